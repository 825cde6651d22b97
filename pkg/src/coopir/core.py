"""Images, deterministic randomness, quality metrics and image I/O.

An image is a float64 ``ndarray`` of shape ``(H, W, C)`` with ``C`` in {1, 3}
and every value in [0, 1].  Metrics operate on the BT.601 luma channel.
"""

from __future__ import annotations

import math
import struct
from dataclasses import astuple, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

MIN_SIDE = 8
PSNR_CAP = 100.0
Y_WEIGHTS = np.array([0.299, 0.587, 0.114])

SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_SIGMA, SSIM_RADIUS = 1.5, 5
GSIM_C = 1e-4

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()

MAGIC_IMAGE = b"OPIMG1"
_MAX_ELEMENTS = 1 << 31


class ShapeError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


def check_image(img: np.ndarray) -> np.ndarray:
    """Validate the image invariants and return ``img`` as float64."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ShapeError(f"expected (H, W, 1|3) image, got shape {img.shape}")
    if img.shape[0] < MIN_SIDE or img.shape[1] < MIN_SIDE:
        raise ShapeError(f"image sides must be >= {MIN_SIDE}, got {img.shape[:2]}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must be finite and within [0, 1]")
    return img


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# SplitMix64


_GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_U64_GAMMA = np.uint64(_GAMMA)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns ``(new_state, output)``."""
    state = (state + _GAMMA) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def derive_seed(base_seed: int, index: int) -> int:
    """Per-item seed: first SplitMix64 output of ``base_seed XOR index``."""
    return splitmix64((base_seed ^ index) & _MASK)[1]


class Prng:
    """SplitMix64 generator.

    The stream is defined purely by the 64-bit state, so block draws
    (``u64(n)``) and scalar draws interleave bit-exactly.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def copy(self) -> Prng:
        return Prng(self.state)

    def next_u64(self) -> int:
        self.state, out = splitmix64(self.state)
        return out

    def u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * _U64_GAMMA
            z = (z ^ (z >> np.uint64(30))) * _M1
            z = (z ^ (z >> np.uint64(27))) * _M2
        self.state = (self.state + n * _GAMMA) & _MASK
        return z ^ (z >> np.uint64(31))

    def random(self, n: int | None = None):
        """Uniform draws on [0, 1) with 53-bit resolution."""
        if n is None:
            return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def uniform(self, low: float, high: float, n: int | None = None):
        return low + (high - low) * self.random(n)

    def integers(self, low: int, high: int, n: int | None = None):
        """Integers in ``[low, high)``."""
        if high <= low:
            raise ValueError("empty integer range")
        if n is None:
            return low + int(self.random() * (high - low))
        return low + np.floor(self.random(n) * (high - low)).astype(np.int64)

    def normal(self, n: int) -> np.ndarray:
        """Standard normal draws via Box-Muller."""
        pairs = (n + 1) // 2
        u = self.random(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return out[:n]

    def categorical(self, probs) -> int:
        cdf = np.cumsum(np.asarray(probs, dtype=np.float64))
        u = self.random() * cdf[-1]
        return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


# ---------------------------------------------------------------------------
# Metrics


def luma(img: np.ndarray) -> np.ndarray:
    """BT.601 luma, arranged so that grey pixels keep their exact value."""
    if img.shape[2] == 1:
        return img[:, :, 0]
    b = img[:, :, 2]
    return b + Y_WEIGHTS[0] * (img[:, :, 0] - b) + Y_WEIGHTS[1] * (img[:, :, 1] - b)


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    _same_shape(pred, gt)
    mse = float(np.mean((luma(pred) - luma(gt)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_taps(sigma: float = SSIM_SIGMA, radius: int = SSIM_RADIUS) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


_SSIM_TAPS = _gaussian_taps()


def _gauss(y: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(y, _SSIM_TAPS, axis=0, mode="nearest")
    return ndimage.correlate1d(out, _SSIM_TAPS, axis=1, mode="nearest")


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean SSIM over an 11x11 Gaussian window (edge-replicated borders)."""
    _same_shape(pred, gt)
    x, y = luma(pred), luma(gt)
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mx, my = _gauss(x), _gauss(y)
    vx = _gauss(x * x) - mx * mx
    vy = _gauss(y * y) - my * my
    cxy = _gauss(x * y) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def sobel_magnitude(y: np.ndarray) -> np.ndarray:
    # Separable form: the difference pass is exactly zero on flat regions.
    gx = ndimage.correlate1d(ndimage.correlate1d(y, [1.0, 2.0, 1.0], axis=0, mode="nearest"),
                             [-1.0, 0.0, 1.0], axis=1, mode="nearest")
    gy = ndimage.correlate1d(ndimage.correlate1d(y, [1.0, 2.0, 1.0], axis=1, mode="nearest"),
                             [-1.0, 0.0, 1.0], axis=0, mode="nearest")
    return np.sqrt(gx * gx + gy * gy)


def gsim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Gradient-magnitude similarity; 1.0 for identical gradient fields."""
    _same_shape(pred, gt)
    gp = sobel_magnitude(luma(pred))
    gg = sobel_magnitude(luma(gt))
    return float(np.mean((2.0 * gp * gg + GSIM_C) / (gp * gp + gg * gg + GSIM_C)))


def nr_metrics(img: np.ndarray) -> tuple[float, float]:
    """No-reference (sharpness, balance) scores, both in [0, 1)."""
    y = luma(img)
    s = float(np.mean(sobel_magnitude(y)))
    nu = float(np.mean(np.abs(y - ndimage.median_filter(y, size=3, mode="nearest"))))
    sd = float(np.std(y - y.flat[0]))  # shifted so flat images give exactly 0
    return s / (s + 0.05), (1.0 / (1.0 + 20.0 * nu)) * (sd / (sd + 0.05))


@dataclass(frozen=True)
class MetricVector:
    psnr: float
    ssim: float
    gsim: float
    nr_sharp: float
    nr_balance: float

    FIELDS = ("psnr", "ssim", "gsim", "nr_sharp", "nr_balance")
    FULL_REFERENCE = ("psnr", "ssim", "gsim")
    NO_REFERENCE = ("nr_sharp", "nr_balance")

    def as_tuple(self) -> tuple[float, ...]:
        return astuple(self)


def evaluate(pred: np.ndarray, gt: np.ndarray) -> MetricVector:
    sharp, balance = nr_metrics(pred)
    return MetricVector(psnr(pred, gt), ssim(pred, gt), gsim(pred, gt), sharp, balance)


# ---------------------------------------------------------------------------
# I/O


def save_image(img: np.ndarray, path) -> None:
    """Write the lossless OPIMG1 format."""
    img = np.ascontiguousarray(check_image(img), dtype="<f8")
    h, w, c = img.shape
    Path(path).write_bytes(MAGIC_IMAGE + struct.pack("<III", h, w, c) + img.tobytes())


def load_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:6] != MAGIC_IMAGE:
        raise ImageFormatError(f"{path}: bad magic {raw[:6]!r}")
    if len(raw) < 18:
        raise ImageFormatError(f"{path}: truncated header")
    h, w, c = struct.unpack("<III", raw[6:18])
    n = h * w * c
    if n > _MAX_ELEMENTS:
        raise ImageFormatError(f"{path}: dimensions {h}x{w}x{c} overflow")
    if len(raw) - 18 != 8 * n:
        raise ImageFormatError(f"{path}: payload has {len(raw) - 18} bytes, expected {8 * n}")
    return np.frombuffer(raw, dtype="<f8", offset=18).reshape(h, w, c).astype(np.float64)


def quantize8(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_ppm(img: np.ndarray, path) -> None:
    """8-bit binary PPM (P6) for viewing; grayscale is replicated to RGB."""
    q = quantize8(img)
    if q.shape[2] == 1:
        q = np.repeat(q, 3, axis=2)
    h, w, _ = q.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def save_arrays(path, magic: bytes, arrays: dict) -> None:
    """Name-keyed float64 arrays in a length-prefixed little-endian layout.

    ``magic | u32 count | (u32 name_len | name | u32 ndim | u32 dims[ndim] | f64 data)*``
    """
    parts = [magic, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_arrays(path, magic: bytes) -> dict:
    raw = Path(path).read_bytes()
    if raw[: len(magic)] != magic:
        raise ImageFormatError(f"{path}: bad magic {raw[:len(magic)]!r}, expected {magic!r}")
    pos = len(magic)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise ImageFormatError(f"{path}: truncated at byte {pos}")
        out = struct.unpack_from(fmt, raw, pos)
        pos += size
        return out

    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (n,) = take("<I")
        if pos + n > len(raw):
            raise ImageFormatError(f"{path}: truncated name")
        name = raw[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        if size > _MAX_ELEMENTS or pos + 8 * size > len(raw):
            raise ImageFormatError(f"{path}: array {name!r} overflows the file")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(raw):
        raise ImageFormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return arrays
