"""Slow, independent reference implementations used to check the library.

Each oracle is written as directly as possible from the defining formula
(explicit loops, no shared helpers with the package) so agreement is a
meaningful check rather than a tautology.
"""

import itertools
import math

import numpy as np

BT601 = (0.299, 0.587, 0.114)


def luma(img):
    img = np.asarray(img, dtype=np.float64)
    if img.shape[2] == 1:
        return img[:, :, 0].copy()
    return BT601[0] * img[:, :, 0] + BT601[1] * img[:, :, 1] + BT601[2] * img[:, :, 2]


def _edge(y, r):
    return np.pad(y, r, mode="edge")


def ssim(a, b, sigma=1.5, radius=5, k1=0.01, k2=0.03):
    x, y = luma(a), luma(b)
    taps = [math.exp(-(i * i) / (2 * sigma * sigma)) for i in range(-radius, radius + 1)]
    s = sum(taps)
    w = np.outer(taps, taps) / (s * s)
    px, py = _edge(x, radius), _edge(y, radius)
    c1, c2 = k1 * k1, k2 * k2
    h, wd = x.shape
    total = 0.0
    for i in range(h):
        for j in range(wd):
            wx = px[i : i + 2 * radius + 1, j : j + 2 * radius + 1]
            wy = py[i : i + 2 * radius + 1, j : j + 2 * radius + 1]
            mx, my = (w * wx).sum(), (w * wy).sum()
            vx = (w * wx * wx).sum() - mx * mx
            vy = (w * wy * wy).sum() - my * my
            cxy = (w * wx * wy).sum() - mx * my
            total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return total / (h * wd)


def sobel(y):
    p = _edge(y, 1)
    h, w = y.shape
    out = np.zeros_like(y)
    for i in range(h):
        for j in range(w):
            win = p[i : i + 3, j : j + 3]
            gx = (win[0, 2] + 2 * win[1, 2] + win[2, 2]) - (win[0, 0] + 2 * win[1, 0] + win[2, 0])
            gy = (win[2, 0] + 2 * win[2, 1] + win[2, 2]) - (win[0, 0] + 2 * win[0, 1] + win[0, 2])
            out[i, j] = math.hypot(gx, gy)
    return out


def gsim(a, b, c=1e-4):
    gp, gg = sobel(luma(a)), sobel(luma(b))
    return float(np.mean((2 * gp * gg + c) / (gp**2 + gg**2 + c)))


def splitmix64_stream(seed, n):
    mask = (1 << 64) - 1
    out, state = [], seed & mask
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out


def enumerate_plans(n, max_len):
    return [p for k in range(1, max_len + 1) for p in itertools.product(range(n), repeat=k)]


def ranks(table):
    """Per-column ordinal ranks, higher is better, earlier index wins ties."""
    table = np.asarray(table, dtype=float)
    n, m = table.shape
    out = np.zeros((n, m), dtype=int)
    for j in range(m):
        order = sorted(range(n), key=lambda i: (-table[i, j], i))
        for r, i in enumerate(order, start=1):
            out[i, j] = r
    return out


def select(rank_table, fraction=0.1, min_good=3, fr=(0, 1, 2), nr=(3, 4)):
    n = len(rank_table)
    cutoff = math.ceil(fraction * n - 1e-9)
    chosen = []
    for i, row in enumerate(rank_table):
        good = {j for j, r in enumerate(row) if r <= cutoff}
        if len(good) >= min_good and good & set(fr) and good & set(nr):
            chosen.append(i)
    return chosen


def dedup(plan):
    seen, out = set(), []
    for t in plan:
        if t not in seen:
            seen.add(t)
            out.append(t)
    return tuple(out)
