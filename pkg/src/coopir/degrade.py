"""Synthetic multi-degradation generator.

Eight degradation operators, combination tables with tiered sampling,
benchmark presets, and procedural clean images.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import fft, ndimage

from .core import Prng, check_image


class DegradationKind(str, Enum):
    NOISE = "noise"
    RAIN = "rain"
    HAZE = "haze"
    DEFOCUS_BLUR = "defocus_blur"
    MOTION_BLUR = "motion_blur"
    LOW_RESOLUTION = "low_resolution"
    JPEG = "jpeg"
    LOW_LIGHT = "low_light"

    def __str__(self) -> str:
        return self.value


KINDS = tuple(DegradationKind)

# Steps of a combination are applied in this order.
APPLY_ORDER = (
    DegradationKind.HAZE,
    DegradationKind.RAIN,
    DegradationKind.DEFOCUS_BLUR,
    DegradationKind.MOTION_BLUR,
    DegradationKind.LOW_RESOLUTION,
    DegradationKind.LOW_LIGHT,
    DegradationKind.NOISE,
    DegradationKind.JPEG,
)


class ParameterError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# Hard validity limits, inclusive.
LIMITS: dict[DegradationKind, dict[str, tuple[float, float]]] = {
    DegradationKind.NOISE: {"sigma": (0.0, 1.0)},
    DegradationKind.RAIN: {
        "count": (0, 2000),
        "length": (1.0, 64.0),
        "angle": (0.0, 180.0),
        "intensity": (0.0, 1.0),
    },
    DegradationKind.HAZE: {"t": (0.0, 1.0), "A": (0.0, 1.0)},
    DegradationKind.DEFOCUS_BLUR: {"radius": (0.5, 10.0)},
    DegradationKind.MOTION_BLUR: {"length": (1.0, 31.0), "angle": (0.0, math.pi)},
    DegradationKind.LOW_RESOLUTION: {"factor": (2, 8)},
    DegradationKind.JPEG: {"quality": (1, 100)},
    DegradationKind.LOW_LIGHT: {"gamma": (1.0, 4.0), "gain": (0.05, 1.0)},
}

# Default sampling ranges: a list means a discrete choice, a pair a uniform range.
DEFAULT_RANGES: dict[str, dict[str, object]] = {
    "noise": {"sigma": [15 / 255, 25 / 255, 50 / 255]},
    "rain": {"count": (40, 120), "length": (8.0, 24.0), "angle": (70.0, 110.0), "intensity": (0.15, 0.4)},
    "haze": {"t": (0.4, 0.8), "A": (0.8, 1.0)},
    "defocus_blur": {"radius": (2.0, 5.0)},
    "motion_blur": {"length": (5.0, 15.0), "angle": (0.0, math.pi)},
    "low_resolution": {"factor": [2, 4]},
    "jpeg": {"quality": (10, 50)},
    "low_light": {"gamma": (1.5, 2.5), "gain": (0.5, 0.9)},
}

_INTEGER_PARAMS = {("rain", "count"), ("low_resolution", "factor"), ("jpeg", "quality")}


def validate_params(kind: DegradationKind, params: dict) -> None:
    limits = LIMITS[kind]
    missing = set(limits) - set(params)
    extra = set(params) - set(limits)
    if missing or extra:
        raise ParameterError(f"{kind}: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, (lo, hi) in limits.items():
        v = params[name]
        if not (lo <= v <= hi) or (kind is DegradationKind.MOTION_BLUR and name == "angle" and v >= hi):
            raise ParameterError(f"{kind}.{name}={v} outside [{lo}, {hi}]")


def sample_params(kind: DegradationKind, rng: Prng, ranges: dict | None = None) -> dict:
    spec = (ranges or DEFAULT_RANGES)[kind.value]
    params = {}
    for name in LIMITS[kind]:
        r = spec[name]
        if isinstance(r, list):
            params[name] = r[rng.integers(0, len(r))]
        elif (kind.value, name) in _INTEGER_PARAMS:
            params[name] = rng.integers(int(r[0]), int(r[1]) + 1)
        else:
            params[name] = rng.uniform(float(r[0]), float(r[1]))
    return params


# ---------------------------------------------------------------------------
# Operators


def filter_channels(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate every channel with ``kernel`` using edge replication."""
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.correlate(img[:, :, c], kernel, mode="nearest")
    return out


def disk_kernel(radius: float) -> np.ndarray:
    r = int(math.ceil(radius))
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    k = (x * x + y * y <= radius * radius).astype(np.float64)
    return k / k.sum()


def line_kernel(length: float, angle: float) -> np.ndarray:
    half = int(math.ceil(length / 2.0))
    size = 2 * half + 1
    k = np.zeros((size, size))
    t = np.linspace(-length / 2.0, length / 2.0, 4 * size)
    xs = np.clip(np.rint(half + t * math.cos(angle)).astype(int), 0, size - 1)
    ys = np.clip(np.rint(half - t * math.sin(angle)).astype(int), 0, size - 1)
    k[ys, xs] = 1.0
    return k / k.sum()


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and clamped borders."""
    h, w = img.shape[:2]

    def axis(n_out, n_in):
        src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(height, h)
    x0, x1, fx = axis(width, w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def _pad_to_multiple(img: np.ndarray, m: int) -> np.ndarray:
    h, w = img.shape[:2]
    return np.pad(img, ((0, -h % m), (0, -w % m), (0, 0)), mode="edge")


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    p = _pad_to_multiple(img, factor)
    h, w, c = p.shape
    return p.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


JPEG_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def jpeg_table(quality: int) -> np.ndarray:
    scale = 50.0 / quality if quality < 50 else (200.0 - 2.0 * quality) / 100.0
    return np.clip(np.floor(JPEG_LUMA_TABLE * scale + 0.5), 1.0, 255.0)


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    h, w, c = img.shape
    p = _pad_to_multiple(img, 8) * 255.0 - 128.0
    ph, pw = p.shape[:2]
    blocks = p.reshape(ph // 8, 8, pw // 8, 8, c)
    coef = fft.dctn(blocks, type=2, axes=(1, 3), norm="ortho")
    q = jpeg_table(quality)[None, :, None, :, None]
    coef = np.round(coef / q) * q
    rec = fft.idctn(coef, type=2, axes=(1, 3), norm="ortho").reshape(ph, pw, c)
    return (rec[:h, :w] + 128.0) / 255.0


def rain_field(h: int, w: int, params: dict, rng: Prng) -> np.ndarray:
    field_ = np.zeros(h * w)
    theta = math.radians(params["angle"])
    dx, dy = math.cos(theta), -math.sin(theta)
    length = params["length"]
    n_pts = int(math.ceil(2 * length)) + 1
    t = np.linspace(-length / 2.0, length / 2.0, n_pts)
    for _ in range(int(params["count"])):
        cx = rng.uniform(0.0, w)
        cy = rng.uniform(0.0, h)
        xs = np.rint(cx + t * dx).astype(int)
        ys = np.rint(cy + t * dy).astype(int)
        ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        idx = np.unique(ys[ok] * w + xs[ok])
        field_[idx] += params["intensity"]
    return field_.reshape(h, w, 1)


def apply_degradation(img: np.ndarray, kind: DegradationKind, params: dict, rng: Prng) -> np.ndarray:
    kind = DegradationKind(kind)
    validate_params(kind, params)
    img = check_image(img)
    if kind is DegradationKind.NOISE:
        out = img + params["sigma"] * rng.normal(img.size).reshape(img.shape)
    elif kind is DegradationKind.RAIN:
        out = img + rain_field(img.shape[0], img.shape[1], params, rng)
    elif kind is DegradationKind.HAZE:
        t, a = params["t"], params["A"]
        out = img * t + a * (1.0 - t)
    elif kind is DegradationKind.DEFOCUS_BLUR:
        out = filter_channels(img, disk_kernel(params["radius"]))
    elif kind is DegradationKind.MOTION_BLUR:
        out = filter_channels(img, line_kernel(params["length"], params["angle"]))
    elif kind is DegradationKind.LOW_RESOLUTION:
        small = box_downsample(img, int(params["factor"]))
        f = int(params["factor"])
        out = resize_bilinear(small, small.shape[0] * f, small.shape[1] * f)[: img.shape[0], : img.shape[1]]
    elif kind is DegradationKind.JPEG:
        out = jpeg_roundtrip(img, int(params["quality"]))
    else:
        out = params["gain"] * img ** params["gamma"]
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Specs and synthesis


@dataclass(frozen=True)
class DegradationSpec:
    steps: tuple  # ((DegradationKind, params), ...)
    seed: int

    def __post_init__(self):
        if not 1 <= len(self.steps) <= 3:
            raise ParameterError(f"a spec holds 1..3 steps, got {len(self.steps)}")
        kinds = [DegradationKind(k) for k, _ in self.steps]
        if len(set(kinds)) != len(kinds):
            raise ParameterError(f"duplicate degradation kind in {kinds}")

    @property
    def kinds(self) -> frozenset:
        return frozenset(DegradationKind(k) for k, _ in self.steps)


def make_spec(kinds, rng: Prng, ranges: dict | None = None) -> DegradationSpec:
    """Sample parameters for ``kinds`` (applied in ``APPLY_ORDER``) and a seed."""
    kinds = {DegradationKind(k) for k in kinds}
    steps = tuple((k, sample_params(k, rng, ranges)) for k in APPLY_ORDER if k in kinds)
    return DegradationSpec(steps, rng.next_u64())


def synthesize(clean: np.ndarray, spec: DegradationSpec) -> tuple[np.ndarray, frozenset]:
    rng = Prng(spec.seed)
    img = check_image(clean)
    for kind, params in spec.steps:
        img = apply_degradation(img, kind, params, rng)
    return img, spec.kinds


@dataclass
class ComboTable:
    singles: list = field(default_factory=list)
    duals: list = field(default_factory=list)
    triples: list = field(default_factory=list)
    weights: tuple = (1, 3, 5)

    def __post_init__(self):
        for tier, size in ((self.singles, 1), (self.duals, 2), (self.triples, 3)):
            for i, combo in enumerate(tier):
                combo = frozenset(DegradationKind(k) for k in combo)
                if len(combo) != size:
                    raise ConfigError(f"combo {sorted(map(str, combo))} in tier of size {size}")
                tier[i] = combo

    @property
    def tiers(self) -> tuple:
        return (self.singles, self.duals, self.triples)

    def combos(self) -> list:
        return [c for tier in self.tiers for c in tier]


def sample_combo(table: ComboTable, rng: Prng) -> frozenset:
    weights = np.asarray(table.weights, dtype=np.float64)
    for w, tier in zip(weights, table.tiers):
        if w > 0 and not tier:
            raise ConfigError("empty combination tier with nonzero sampling weight")
    if weights.sum() <= 0:
        raise ConfigError("all tier weights are zero")
    tier = table.tiers[rng.categorical(weights)]
    return tier[rng.integers(0, len(tier))]


def all_combos(weights=(1, 3, 5)) -> ComboTable:
    return ComboTable(
        [set(c) for c in itertools.combinations(KINDS, 1)],
        [set(c) for c in itertools.combinations(KINDS, 2)],
        [set(c) for c in itertools.combinations(KINDS, 3)],
        tuple(weights),
    )


_N, _R, _H = "noise", "rain", "haze"
_DB, _MB, _LR, _J, _LL = "defocus_blur", "motion_blur", "low_resolution", "jpeg", "low_light"

_PRESETS = {
    "empirical8": [
        (_R, _N), (_R, _H), (_H, _N), (_R, _DB), (_H, _DB), (_DB, _N),
        (_R, _H, _N), (_R, _H, _DB),
    ],
    "groupA": [
        (_R, _H), (_MB, _LR), (_LL, _N), (_DB, _J), (_N, _J), (_R, _LR), (_MB, _LL), (_DB, _H),
    ],
    "groupB": [(_H, _N), (_DB, _LR), (_MB, _J), (_R, _LL)],
    "groupC": [(_H, _MB, _LR), (_R, _N, _LR), (_LL, _DB, _J), (_MB, _DB, _N)],
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name: str) -> ComboTable:
    """Benchmark combination tables; empty tiers get zero sampling weight."""
    if name == "all":
        return all_combos()
    try:
        combos = _PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(_PRESETS) + ['all']}") from None
    tiers = [[set(c) for c in combos if len(c) == n] for n in (1, 2, 3)]
    weights = tuple(w if tier else 0 for w, tier in zip((1, 3, 5), tiers))
    return ComboTable(*tiers, weights=weights)


def preset_combos(name: str) -> list:
    """Combos of a preset in their listed order."""
    if name == "all":
        return all_combos().combos()
    if name not in _PRESETS:
        preset(name)
    return [frozenset(DegradationKind(k) for k in c) for c in _PRESETS[name]]


# ---------------------------------------------------------------------------
# Procedural clean images

CLEAN_KINDS = ("gradient", "checker", "value_noise_texture", "shapes")


def _value_noise(size: int, rng: Prng, cells=(16, 8, 4, 2)) -> np.ndarray:
    out = np.zeros((size, size, 3))
    amp = 1.0
    for cell in cells:
        n = size // cell + 2
        grid = rng.random(n * n * 3).reshape(n, n, 3)
        out += amp * resize_bilinear(grid, size + 2 * cell, size + 2 * cell)[cell : cell + size, cell : cell + size]
        amp *= 0.7
    lo, hi = out.min(), out.max()
    return 0.05 + 0.9 * (out - lo) / (hi - lo)


def gen_clean(kind: str, size: int, rng: Prng) -> np.ndarray:
    if size < 32:
        raise ValueError(f"clean image size must be >= 32, got {size}")
    if kind == "checker":
        y, x = np.mgrid[0:size, 0:size]
        tile = ((y // 8 + x // 8) % 2).astype(np.float64)
        return np.repeat((0.2 + 0.6 * tile)[:, :, None], 3, axis=2)
    if kind == "gradient":
        theta = rng.uniform(0.0, 2 * math.pi)
        start = rng.uniform(0.1, 0.5, 3)
        end = rng.uniform(0.5, 0.9, 3)
        y, x = np.mgrid[0:size, 0:size] / (size - 1)
        s = (x * math.cos(theta) + y * math.sin(theta))
        s = (s - s.min()) / (s.max() - s.min())
        return start + (end - start) * s[:, :, None]
    if kind == "value_noise_texture":
        return _value_noise(size, rng)
    if kind == "shapes":
        img = 0.5 * _value_noise(size, rng, cells=(32,)) + 0.25
        y, x = np.mgrid[0:size, 0:size]
        for _ in range(10):
            color = rng.uniform(0.05, 0.95, 3)
            cx, cy = rng.uniform(0, size), rng.uniform(0, size)
            r = rng.uniform(size / 16, size / 5)
            if rng.random() < 0.5:
                mask = (x - cx) ** 2 + (y - cy) ** 2 <= r * r
            else:
                mask = (np.abs(x - cx) <= r) & (np.abs(y - cy) <= 0.6 * r)
            img[mask] = color
        return img
    raise ValueError(f"unknown clean image kind {kind!r}; choose from {CLEAN_KINDS}")
