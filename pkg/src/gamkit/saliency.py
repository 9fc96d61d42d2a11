"""Saliency maps: GAM, Grad-CAM and Grad-CAM++.

All map functions take one layer's activations ``h`` and gradients ``g`` as
``(channels, height, width)`` arrays and return a :class:`SaliencyMap` at the
input resolution.  :func:`explain` wires them to a backend capture.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import EmptyInput, ShapeError

Method = Literal["GAM", "GC", "GCPP"]
METHODS = ("GAM", "GC", "GCPP")

# exp(s) is not representable in float64 above this
EXP_OVERFLOW = float(np.log(np.finfo(np.float64).max))


@dataclass(frozen=True)
class SaliencyMap:
    grid: np.ndarray
    method: Method = "GAM"
    n_layers: int = 1
    degenerate: bool = False
    score: Optional[float] = None
    overflow: bool = False

    @property
    def shape(self):
        return self.grid.shape


@dataclass(frozen=True)
class GradDecomposition:
    """Pooled-gradient weighted sum split by the sign of the channel weight.

    ``A = N + P`` where ``N`` collects channels with negative pooled
    gradient and ``P`` the rest.  Pixels where ``|N| >= P`` vanish under
    the ReLU that Grad-CAM applies afterwards.
    """

    A: np.ndarray
    N: np.ndarray
    P: np.ndarray
    alpha: np.ndarray


@dataclass(frozen=True)
class GCPPCoefficients:
    beta: np.ndarray
    weights: np.ndarray
    alpha_gc: np.ndarray = field(default=None)


def _as_grid(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def _check_pair(h, g):
    h, g = _as_grid(h), _as_grid(g)
    if h.ndim == 2:
        h = h[None]
    if g.ndim == 2:
        g = g[None]
    if h.shape != g.shape or h.ndim != 3:
        raise ShapeError(f"activation shape {h.shape} does not match gradient shape {g.shape}")
    return h, g


def relu_clamp(grid) -> np.ndarray:
    return np.maximum(_as_grid(grid), 0.0)


def resize_bicubic(grid, target: tuple[int, int]) -> np.ndarray:
    """Bicubic resize (Keys kernel, a=-0.75) with half-pixel centers."""
    grid = _as_grid(grid)
    if grid.ndim != 2 or min(grid.shape) < 1:
        raise ShapeError(f"expected a non-empty 2-D grid, got shape {grid.shape}")
    target = (int(target[0]), int(target[1]))
    if grid.shape == target:
        return grid.copy()
    t = torch.from_numpy(np.ascontiguousarray(grid))[None, None]
    out = F.interpolate(t, size=target, mode="bicubic", align_corners=False)
    return out[0, 0].numpy()


def normalize_minmax(grid) -> tuple[np.ndarray, bool]:
    """Min-max scale to [0, 1].  A constant grid maps to zeros, flagged degenerate."""
    grid = _as_grid(grid)
    lo, hi = grid.min(), grid.max()
    if not hi > lo:
        return np.zeros_like(grid), True
    out = (grid - lo) / (hi - lo)
    # guard the endpoints against rounding
    out[grid == lo] = 0.0
    out[grid == hi] = 1.0
    return np.clip(out, 0.0, 1.0), False


def _finish(raw: np.ndarray, target, method: Method) -> SaliencyMap:
    # resizing preserves constants; checking first keeps rounding noise from being stretched to [0, 1]
    if not raw.max() > raw.min():
        return SaliencyMap(np.zeros(tuple(target)), method=method, n_layers=1, degenerate=True)
    grid, degenerate = normalize_minmax(resize_bicubic(raw, target))
    return SaliencyMap(grid, method=method, n_layers=1, degenerate=degenerate)


def gam_layer_map(h, g, target: tuple[int, int]) -> SaliencyMap:
    """Per-layer GAM map: NRM(RSZ(sum_k relu(h_k) * relu(g_k)))."""
    h, g = _check_pair(h, g)
    raw = (relu_clamp(h) * relu_clamp(g)).sum(axis=0)
    return _finish(raw, target, "GAM")


def gam_aggregate(maps: Sequence[SaliencyMap]) -> SaliencyMap:
    """Mean of already-normalized per-layer maps; not re-normalized."""
    maps = list(maps)
    if not maps:
        raise EmptyInput("no layer maps to aggregate")
    shapes = {m.grid.shape for m in maps}
    if len(shapes) != 1:
        raise ShapeError(f"layer maps disagree in shape: {sorted(shapes)}")
    grid = np.mean([m.grid for m in maps], axis=0)
    return SaliencyMap(
        np.clip(grid, 0.0, 1.0),
        method=maps[0].method,
        n_layers=len(maps),
        degenerate=all(m.degenerate for m in maps),
        score=maps[0].score,
        overflow=any(m.overflow for m in maps),
    )


def grad_cam(h, g, target: tuple[int, int]) -> tuple[SaliencyMap, GradDecomposition]:
    h, g = _check_pair(h, g)
    alpha = g.mean(axis=(1, 2))
    weighted = alpha[:, None, None] * h
    neg = alpha < 0
    N = weighted[neg].sum(axis=0) if neg.any() else np.zeros(h.shape[1:])
    P = weighted[~neg].sum(axis=0) if (~neg).any() else np.zeros(h.shape[1:])
    A = weighted.sum(axis=0)
    smap = _finish(relu_clamp(A), target, "GC")
    return smap, GradDecomposition(A=A, N=N, P=P, alpha=alpha)


def gcpp_beta(h, g) -> np.ndarray:
    """Per-pixel Grad-CAM++ coefficients with the exp(s) factor cancelled.

    beta_ij = g_ij^2 / (2 g_ij^2 + g_ij^3 * sum_ab h_ab), channel by channel.
    A zero denominator gives beta = 0.
    """
    h, g = _check_pair(h, g)
    g2 = g**2
    denom = 2.0 * g2 + g**3 * h.sum(axis=(1, 2), keepdims=True)
    beta = np.zeros_like(g2)
    np.divide(g2, denom, out=beta, where=denom != 0)
    return beta


def grad_campp(h, g, s_value: float, target: tuple[int, int]) -> tuple[SaliencyMap, GCPPCoefficients, bool]:
    h, g = _check_pair(h, g)
    beta = gcpp_beta(h, g)
    weights = (beta * relu_clamp(g)).sum(axis=(1, 2))
    raw = relu_clamp((weights[:, None, None] * h).sum(axis=0))
    overflow = bool(s_value > EXP_OVERFLOW)
    smap = _finish(raw, target, "GCPP")
    smap = SaliencyMap(smap.grid, "GCPP", 1, smap.degenerate, float(s_value), overflow)
    return smap, GCPPCoefficients(beta=beta, weights=weights, alpha_gc=g.mean(axis=(1, 2))), overflow


def layer_map(method: Method, h, g, target, s_value: float = 0.0) -> SaliencyMap:
    if method == "GAM":
        return gam_layer_map(h, g, target)
    if method == "GC":
        return grad_cam(h, g, target)[0]
    if method == "GCPP":
        return grad_campp(h, g, s_value, target)[0]
    raise ValueError(f"unknown method {method!r}")


def normalize_method(method: str) -> Method:
    key = method.upper().replace("+", "P").replace("-", "")
    aliases = {"GAM": "GAM", "GC": "GC", "GRADCAM": "GC", "GCPP": "GCPP", "GRADCAMPP": "GCPP"}
    if key not in aliases:
        raise ValueError(f"unknown method {method!r}; expected one of gam, gc, gcpp")
    return aliases[key]


def explain(model, x, score, method: str = "GAM", n: int = 1) -> SaliencyMap:
    """Saliency map of ``score`` for image ``x`` over the last ``n`` blocks.

    Grad-CAM and Grad-CAM++ use the same per-layer averaging as GAM when
    ``n > 1``.
    """
    from .backend import capture

    method = normalize_method(method)
    layers = model.list_layers()
    if not 1 <= n <= len(layers):
        raise ValueError(f"n must be in [1, {len(layers)}], got {n}")
    cap = capture(model, x, score, layers[-n:])
    target = x.shape[1:]
    maps = [
        layer_map(method, h, g, target, cap.score)
        for (_, h), (_, g) in zip(cap.activations.entries, cap.gradients.entries)
    ]
    out = gam_aggregate(maps)
    return SaliencyMap(out.grid, method, n, out.degenerate, cap.score, out.overflow)
