"""Independent reference implementations used only by the tests.

Written with explicit loops and no torch, so they share no code path with
the package under test.
"""

import math

import numpy as np


def keys_weight(t, a=-0.75):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def _resize_axis(rows, out_len):
    in_len = len(rows)
    scale = in_len / out_len
    out = []
    for d in range(out_len):
        src = (d + 0.5) * scale - 0.5
        i0 = math.floor(src)
        t = src - i0
        acc = 0.0
        for off in (-1, 0, 1, 2):
            idx = min(max(i0 + off, 0), in_len - 1)
            acc = acc + keys_weight(t - off) * rows[idx]
        out.append(acc)
    return out


def bicubic(grid, target):
    """Separable Keys bicubic (a=-0.75), half-pixel centers, edge replicate."""
    grid = [list(map(float, r)) for r in np.asarray(grid)]
    if (len(grid), len(grid[0])) == tuple(target):
        return np.array(grid)
    cols = [_resize_axis(r, target[1]) for r in grid]
    transposed = list(map(list, zip(*cols)))
    return np.array([_resize_axis(c, target[0]) for c in transposed]).T


def minmax(grid):
    lo, hi = min(map(min, grid)), max(map(max, grid))
    if hi == lo:
        return np.zeros_like(np.asarray(grid, dtype=float))
    return (np.asarray(grid, dtype=float) - lo) / (hi - lo)


def gam_layer(h, g, target):
    c, u, v = h.shape
    raw = [[0.0] * v for _ in range(u)]
    for k in range(c):
        for i in range(u):
            for j in range(v):
                raw[i][j] += max(h[k, i, j], 0.0) * max(g[k, i, j], 0.0)
    if max(map(max, raw)) == min(map(min, raw)):
        return np.zeros(target)
    return minmax(bicubic(raw, target))


def gam(hs, gs, target):
    maps = [gam_layer(h, g, target) for h, g in zip(hs, gs)]
    return sum(maps) / len(maps)


def conv2d_direct(x, w, b, pad):
    """Plain cross-correlation of a (c, h, w) input with (o, c, kh, kw) weights."""
    c, hgt, wid = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((c, hgt + 2 * pad, wid + 2 * pad))
    xp[:, pad : pad + hgt, pad : pad + wid] = x
    oh, ow = hgt + 2 * pad - kh + 1, wid + 2 * pad - kw + 1
    out = np.zeros((o, oh, ow))
    for f in range(o):
        for i in range(oh):
            for j in range(ow):
                total = b[f]
                for ch in range(c):
                    for a in range(kh):
                        for bb in range(kw):
                            total += w[f, ch, a, bb] * xp[ch, i + a, j + bb]
                out[f, i, j] = total
    return out


def avgpool2(x):
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def linear_percentile(values, q):
    """Percentile by linear interpolation between order statistics."""
    s = sorted(values)
    pos = (len(s) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def mask_iou(a, b):
    inter = union = 0
    for ra, rb in zip(a, b):
        for pa, pb in zip(ra, rb):
            inter += bool(pa) and bool(pb)
            union += bool(pa) or bool(pb)
    return inter / union if union else 0.0
