"""The scalar score ``s`` that every saliency map explains.

A score is either a class logit ``w_j . f_x (+ b)`` or a similarity between
two embeddings (dot product or cosine).  The torch variant is what the
backend differentiates; the numpy variant is for reporting and tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
import torch

from .errors import ConfigError, DegenerateEmbedding

ScoreKind = Literal["class_logit", "dot", "cosine"]
KINDS = ("class_logit", "dot", "cosine")


@dataclass(frozen=True)
class ScoreSpec:
    """Which score to explain.

    ``class_logit`` needs exactly one of ``class_weights`` or ``class_index``
    (the latter is resolved against the model head by the backend).  ``dot``
    and ``cosine`` need ``reference_embedding``.
    """

    kind: ScoreKind
    class_weights: Optional[np.ndarray] = None
    bias: float = 0.0
    class_index: Optional[int] = None
    reference_embedding: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown score kind {self.kind!r}")
        if self.kind == "class_logit":
            if (self.class_weights is None) == (self.class_index is None):
                raise ConfigError("class_logit needs exactly one of class_weights or class_index")
        else:
            if self.reference_embedding is None:
                raise ConfigError(f"{self.kind} score needs a reference embedding")
            if not np.all(np.isfinite(self.reference_embedding)):
                raise ConfigError("reference embedding has non-finite entries")

    @classmethod
    def logit(cls, class_index: int) -> "ScoreSpec":
        return cls("class_logit", class_index=int(class_index))

    @classmethod
    def weights(cls, w, bias: float = 0.0) -> "ScoreSpec":
        return cls("class_logit", class_weights=np.asarray(w, dtype=np.float64), bias=float(bias))

    @classmethod
    def similarity(cls, kind: ScoreKind, reference) -> "ScoreSpec":
        return cls(kind, reference_embedding=np.asarray(reference, dtype=np.float64).ravel())

    @property
    def resolved(self) -> bool:
        return self.kind != "class_logit" or self.class_weights is not None


def score(f_x, spec: ScoreSpec) -> float:
    """Evaluate the score on a numpy embedding."""
    f = np.asarray(f_x, dtype=np.float64).ravel()
    if spec.kind == "class_logit":
        if spec.class_weights is None:
            raise ConfigError("class_index must be resolved against a model head first")
        return float(np.dot(np.asarray(spec.class_weights, dtype=np.float64), f) + spec.bias)
    ref = np.asarray(spec.reference_embedding, dtype=np.float64).ravel()
    dot = float(np.dot(f, ref))
    if spec.kind == "dot":
        return dot
    nx, ny = np.linalg.norm(f), np.linalg.norm(ref)
    if nx == 0 or ny == 0:
        raise DegenerateEmbedding("cosine similarity of a zero-norm embedding")
    return dot / (nx * ny)


def score_tensor(f_x: torch.Tensor, spec: ScoreSpec) -> torch.Tensor:
    """Differentiable twin of :func:`score` for a 1-D torch embedding."""
    f = f_x.reshape(-1)
    if spec.kind == "class_logit":
        if spec.class_weights is None:
            raise ConfigError("class_index must be resolved against a model head first")
        w = torch.tensor(spec.class_weights, dtype=f.dtype, device=f.device)
        return torch.dot(w, f) + spec.bias
    ref = torch.tensor(spec.reference_embedding, dtype=f.dtype, device=f.device).reshape(-1)
    dot = torch.dot(f, ref)
    if spec.kind == "dot":
        return dot
    nx, ny = torch.linalg.norm(f), torch.linalg.norm(ref)
    if nx.item() == 0 or ny.item() == 0:
        raise DegenerateEmbedding("cosine similarity of a zero-norm embedding")
    return dot / (nx * ny)


def cosine_gradient_analytic(f_x, f_y) -> np.ndarray:
    """Closed-form d cos(f_x, f_y) / d f_x.

    ``f_y / (|f_x| |f_y|) - cos(f_x, f_y) * f_x / |f_x|^2``.  Both terms are
    entrywise non-negative for non-negative embeddings, so their difference
    can have negative entries.
    """
    fx = np.asarray(f_x, dtype=np.float64).ravel()
    fy = np.asarray(f_y, dtype=np.float64).ravel()
    nx, ny = np.linalg.norm(fx), np.linalg.norm(fy)
    if nx == 0 or ny == 0:
        raise DegenerateEmbedding("cosine gradient of a zero-norm embedding")
    s = float(np.dot(fx, fy)) / (nx * ny)
    return fy / (nx * ny) - s * fx / nx**2
