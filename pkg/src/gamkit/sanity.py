"""Model- and data-randomization sanity checks for saliency methods.

A method passes when its maps are reproducible on the intact model (rank
correlation above ``tau_self``) and change once the weights, or the labels
the model was trained on, are randomized (correlation below ``tau_cross``).
The default thresholds are configuration, not derived quantities.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import spearmanr

from .backend import ImageTensor, ModelHandle
from .errors import ShapeError, TrainingBudgetExceeded
from .models import load_model
from .saliency import SaliencyMap, explain
from .scoring import ScoreSpec

log = logging.getLogger(__name__)

TAU_SELF = 0.99
TAU_CROSS = 0.5
MIN_IMAGES = 20


@dataclass(frozen=True)
class SanityReport:
    test: str
    self_similarity: float
    cross_similarity: float
    passed: bool
    tau_self: float = TAU_SELF
    tau_cross: float = TAU_CROSS
    details: dict = field(default_factory=dict)
    # (image, intact map, randomized map) for the first few images
    examples: tuple = field(default=(), repr=False, compare=False)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("examples")
        return out


def map_rank_correlation(a, b) -> float:
    """Spearman correlation of two maps over their pixels.

    A degenerate map carries no ranking, so comparing one with a proper map
    gives 0.  Two degenerate maps count as identical (1.0).
    """
    ga = a.grid if isinstance(a, SaliencyMap) else np.asarray(a, dtype=np.float64)
    gb = b.grid if isinstance(b, SaliencyMap) else np.asarray(b, dtype=np.float64)
    if ga.shape != gb.shape:
        raise ShapeError(f"map shapes differ: {ga.shape} vs {gb.shape}")
    flat_a = getattr(a, "degenerate", False) or np.ptp(ga) == 0
    flat_b = getattr(b, "degenerate", False) or np.ptp(gb) == 0
    if flat_a and flat_b:
        return 1.0
    if flat_a or flat_b:
        return 0.0
    rho = spearmanr(ga.ravel(), gb.ravel()).statistic
    return float(np.clip(rho, -1.0, 1.0))


ScoreSource = Union[ScoreSpec, Sequence[ScoreSpec], Callable[[int], ScoreSpec]]


def _score_for(score: ScoreSource, i: int) -> ScoreSpec:
    if isinstance(score, ScoreSpec):
        return score
    if callable(score):
        return score(i)
    return score[i]


def _maps(model, images, score, method, n) -> list[SaliencyMap]:
    return [explain(model, x, _score_for(score, i), method, n) for i, x in enumerate(images)]


def _mean_correlation(maps_a, maps_b) -> float:
    return float(np.mean([map_rank_correlation(a, b) for a, b in zip(maps_a, maps_b)]))


def randomize_weights(model: ModelHandle, seed: int = 0) -> ModelHandle:
    """A copy of ``model`` with every layer re-initialized."""
    fresh = model.copy()
    torch.manual_seed(seed)
    for module in fresh.module.modules():
        if hasattr(module, "reset_parameters"):
            module.reset_parameters()
    return fresh


def _report(test, images, maps, repeat, other, tau_self, tau_cross, details, keep=4) -> SanityReport:
    self_sim = _mean_correlation(maps, repeat)
    cross_sim = _mean_correlation(maps, other)
    passed = self_sim > tau_self and cross_sim < tau_cross
    examples = tuple((images[i], maps[i], other[i]) for i in range(min(keep, len(images))))
    return SanityReport(test, self_sim, cross_sim, bool(passed), tau_self, tau_cross, details, examples)


def parameter_randomization_test(
    model: ModelHandle,
    images: Sequence,
    score: ScoreSource,
    method: str = "GAM",
    n: int = 1,
    seed: int = 0,
    tau_self: float = TAU_SELF,
    tau_cross: float = TAU_CROSS,
) -> SanityReport:
    if len(images) < MIN_IMAGES:
        raise ValueError(f"need at least {MIN_IMAGES} images, got {len(images)}")
    maps = _maps(model, images, score, method, n)
    repeat = _maps(model, images, score, method, n)
    random_maps = _maps(randomize_weights(model, seed), images, score, method, n)
    details = {"images": len(images), "method": method, "n": n, "seed": seed}
    return _report("parameter_randomization", images, maps, repeat, random_maps, tau_self, tau_cross, details)


@contextmanager
def _single_thread():
    before = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(before)


@dataclass(frozen=True)
class TrainingResult:
    model: ModelHandle
    accuracy: float
    epochs: int


def train_classifier(
    arch: str,
    x: np.ndarray,
    y: np.ndarray,
    seed: int = 0,
    target_accuracy: float = 0.95,
    max_epochs: int = 300,
    batch_size: int = 32,
    lr: float = 1e-3,
) -> TrainingResult:
    """Train from a seeded init until training accuracy reaches the target.

    Raises TrainingBudgetExceeded if ``max_epochs`` pass first.
    """
    handle = load_model(arch, seed=seed)
    net = handle.module.train()
    xt, yt = torch.as_tensor(x, dtype=torch.float32), torch.as_tensor(y, dtype=torch.long)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    accuracy = 0.0
    with _single_thread():
        for epoch in range(1, max_epochs + 1):
            order = torch.randperm(len(xt), generator=gen)
            for i in range(0, len(xt), batch_size):
                idx = order[i : i + batch_size]
                opt.zero_grad()
                F.cross_entropy(net(xt[idx]), yt[idx]).backward()
                opt.step()
            with torch.no_grad():
                accuracy = (net(xt).argmax(1) == yt).double().mean().item()
            if accuracy >= target_accuracy:
                net.eval()
                return TrainingResult(handle, accuracy, epoch)
    raise TrainingBudgetExceeded(
        f"{arch} reached {accuracy:.3f} training accuracy after {max_epochs} epochs (target {target_accuracy})"
    )


def label_scores(labels) -> Callable[[int], ScoreSpec]:
    labels = [int(v) for v in labels]
    return lambda i: ScoreSpec.logit(labels[i])


def split_dataset(x, y, train_size: int, eval_size: int, seed: int):
    """Shuffle once, then take disjoint training and evaluation slices."""
    if train_size + eval_size > len(x):
        raise ValueError(f"dataset has {len(x)} items, need {train_size + eval_size}")
    order = np.random.default_rng(seed).permutation(len(x))
    tr, ev = order[:train_size], order[train_size : train_size + eval_size]
    return (x[tr], y[tr]), (x[ev], y[ev])


def data_randomization_test(
    arch: str,
    dataset: tuple,
    score: Optional[ScoreSource] = None,
    method: str = "GAM",
    n: int = 1,
    seed: int = 0,
    permutation: str = "random",
    train_size: int = 500,
    eval_size: int = MIN_IMAGES,
    max_epochs: int = 300,
    target_accuracy: float = 0.95,
    tau_self: float = TAU_SELF,
    tau_cross: float = TAU_CROSS,
) -> SanityReport:
    """Compare maps of a model trained on true labels with one trained on permuted labels.

    Both models start from the same seeded init and must memorize their
    training set.  ``permutation="identity"`` is the control: the two
    models coincide.  ``score`` defaults to the true-label logit of each
    evaluation image.
    """
    x, y = dataset
    (xtr, ytr), (xev, yev) = split_dataset(np.asarray(x), np.asarray(y), train_size, eval_size, seed)
    if permutation == "random":
        shuffled = np.random.default_rng(seed + 1).permutation(ytr)
    elif permutation == "identity":
        shuffled = ytr.copy()
    else:
        raise ValueError(f"unknown permutation {permutation!r}")
    true_run = train_classifier(arch, xtr, ytr, seed, target_accuracy, max_epochs)
    rand_run = train_classifier(arch, xtr, shuffled, seed, target_accuracy, max_epochs)
    images = [ImageTensor(img) for img in xev]
    score = score if score is not None else label_scores(yev)
    maps = _maps(true_run.model, images, score, method, n)
    repeat = _maps(true_run.model, images, score, method, n)
    other = _maps(rand_run.model, images, score, method, n)
    details = {
        "images": len(images),
        "method": method,
        "n": n,
        "seed": seed,
        "permutation": permutation,
        "train_size": train_size,
        "true_label_accuracy": true_run.accuracy,
        "true_label_epochs": true_run.epochs,
        "random_label_accuracy": rand_run.accuracy,
        "random_label_epochs": rand_run.epochs,
        "label_agreement": float(np.mean(shuffled == ytr)),
    }
    return _report("data_randomization", images, maps, repeat, other, tau_self, tau_cross, details)


def parameter_randomization_on_dataset(
    arch: str,
    dataset: tuple,
    method: str = "GAM",
    n: int = 1,
    seed: int = 0,
    train_size: int = 2000,
    eval_size: int = MIN_IMAGES,
    max_epochs: int = 50,
    target_accuracy: float = 0.95,
    tau_self: float = TAU_SELF,
    tau_cross: float = TAU_CROSS,
) -> SanityReport:
    """Train on true labels, then run :func:`parameter_randomization_test`."""
    x, y = dataset
    (xtr, ytr), (xev, yev) = split_dataset(np.asarray(x), np.asarray(y), train_size, eval_size, seed)
    run = train_classifier(arch, xtr, ytr, seed, target_accuracy, max_epochs)
    images = [ImageTensor(img) for img in xev]
    report = parameter_randomization_test(
        run.model, images, label_scores(yev), method, n, seed + 1, tau_self, tau_cross
    )
    report.details.update({"train_size": train_size, "train_accuracy": run.accuracy, "epochs": run.epochs})
    return report
