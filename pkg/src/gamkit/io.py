"""Raw map files (SMAP/1) and colormapped overlays."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image

from .saliency import SaliencyMap

MAGIC = b"SMAP"
VERSION = 1
# magic, version, rows, cols, method, n, degenerate, overflow, score
HEADER = struct.Struct("<4sHIIBHBBd")
METHOD_CODES = {"GAM": 0, "GC": 1, "GCPP": 2}
CODE_METHODS = {v: k for k, v in METHOD_CODES.items()}


class SmapFormatError(ValueError):
    pass


def encode_smap(m: SaliencyMap) -> bytes:
    rows, cols = m.grid.shape
    score = float("nan") if m.score is None else float(m.score)
    header = HEADER.pack(
        MAGIC, VERSION, rows, cols, METHOD_CODES[m.method], m.n_layers, int(m.degenerate), int(m.overflow), score
    )
    return header + np.ascontiguousarray(m.grid, dtype="<f4").tobytes()


def decode_smap(buf: bytes) -> SaliencyMap:
    if len(buf) < HEADER.size:
        raise SmapFormatError("truncated header")
    magic, version, rows, cols, code, n, degenerate, overflow, score = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise SmapFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise SmapFormatError(f"unsupported version {version}")
    if code not in CODE_METHODS:
        raise SmapFormatError(f"unknown method code {code}")
    body = buf[HEADER.size :]
    if len(body) != rows * cols * 4:
        raise SmapFormatError(f"expected {rows * cols * 4} payload bytes, got {len(body)}")
    grid = np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)
    return SaliencyMap(
        grid, CODE_METHODS[code], n, bool(degenerate), None if np.isnan(score) else score, bool(overflow)
    )


def write_smap(path, m: SaliencyMap) -> Path:
    path = Path(path)
    path.write_bytes(encode_smap(m))
    return path


def read_smap(path) -> SaliencyMap:
    return decode_smap(Path(path).read_bytes())


def overlay(image: np.ndarray, m, alpha: float = 0.5, colormap: str = "viridis") -> np.ndarray:
    """Blend a (c, h, w) image in [0, 1] with a colormapped map; returns uint8 RGB."""
    grid = m.grid if isinstance(m, SaliencyMap) else np.asarray(m)
    img = np.asarray(image, dtype=np.float64)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    img = np.clip(img.transpose(1, 2, 0), 0.0, 1.0)
    heat = colormaps[colormap](np.clip(grid, 0.0, 1.0))[..., :3]
    out = alpha * heat + (1.0 - alpha) * img
    return np.round(out * 255).astype(np.uint8)


def write_overlay(path, image, m, alpha: float = 0.5, colormap: str = "viridis") -> Path:
    path = Path(path)
    Image.fromarray(overlay(image, m, alpha, colormap)).save(path, format="PNG")
    return path


def side_by_side(path, panels) -> Path:
    """Write RGB uint8 panels of equal height next to each other."""
    path = Path(path)
    Image.fromarray(np.concatenate(list(panels), axis=1)).save(path, format="PNG")
    return path
