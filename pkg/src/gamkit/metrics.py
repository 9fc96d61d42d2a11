"""Objective evaluation of saliency maps.

ADP/PIC compare model confidence on an image with its explanation map (the
image masked by its saliency map).  Localization binarizes maps and scores
the predicted box or region against ground truth by IoU.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .errors import DegenerateEmbedding, EmptyInput, InvalidRecord, ShapeError
from .saliency import SaliencyMap

log = logging.getLogger(__name__)

Task = Literal["classification", "similarity"]
RegionRule = Literal["largest_component", "all_pixels"]
THRESHOLD_GRID = np.round(np.arange(1, 100) / 100.0, 2)
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class EvalRecord:
    id: str
    Y: float
    O: float
    task: Task = "classification"

    def __post_init__(self):
        if not (np.isfinite(self.Y) and np.isfinite(self.O)):
            raise InvalidRecord(f"record {self.id}: non-finite confidence")


@dataclass(frozen=True)
class GroundTruthRegion:
    """A box ``(x_min, y_min, x_max, y_max)`` (max exclusive) or a binary mask."""

    kind: Literal["bbox", "mask"]
    bbox: Optional[tuple] = None
    mask: Optional[np.ndarray] = None

    @classmethod
    def box(cls, x_min, y_min, x_max, y_max) -> "GroundTruthRegion":
        if x_max <= x_min or y_max <= y_min:
            raise ValueError(f"box {(x_min, y_min, x_max, y_max)} has no area")
        return cls("bbox", bbox=(int(x_min), int(y_min), int(x_max), int(y_max)))

    @classmethod
    def from_mask(cls, mask) -> "GroundTruthRegion":
        return cls("mask", mask=np.asarray(mask).astype(bool))

    @property
    def area(self) -> int:
        if self.kind == "bbox":
            x0, y0, x1, y1 = self.bbox
            return (x1 - x0) * (y1 - y0)
        return int(self.mask.sum())

    def rasterize(self, shape) -> np.ndarray:
        if self.kind == "mask":
            if self.mask.shape != tuple(shape):
                raise ShapeError(f"mask shape {self.mask.shape} does not match {tuple(shape)}")
            return self.mask
        out = np.zeros(shape, dtype=bool)
        x0, y0, x1, y1 = self.bbox
        out[max(y0, 0) : y1, max(x0, 0) : x1] = True
        return out


@dataclass(frozen=True)
class BinarizationConfig:
    threshold: float = 0.5
    region_rule: RegionRule = "largest_component"

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")


def explanation_map(x, m):
    """Mask every channel of ``x`` by the saliency map ``m``."""
    from .backend import ImageTensor

    grid = m.grid if isinstance(m, SaliencyMap) else np.asarray(m, dtype=np.float64)
    data = x.data if isinstance(x, ImageTensor) else np.asarray(x, dtype=np.float64)
    if data.shape[-2:] != grid.shape:
        raise ShapeError(f"image {data.shape} and map {grid.shape} differ spatially")
    out = data * grid[None]
    if isinstance(x, ImageTensor):
        return ImageTensor(out, normalized=x.normalized)
    return out


def adp(records: Sequence[EvalRecord]) -> float:
    """Average drop percentage; lower is better."""
    if not records:
        raise EmptyInput("no records")
    total = 0.0
    for r in records:
        if r.Y <= 0:
            raise InvalidRecord(f"record {r.id}: confidence Y={r.Y} must be positive")
        total += max(0.0, r.Y - r.O) / r.Y
    return 100.0 * total / len(records)


def pic(records: Sequence[EvalRecord]) -> float:
    """Percentage of records whose confidence strictly increased; higher is better."""
    if not records:
        raise EmptyInput("no records")
    return 100.0 * sum(r.Y < r.O for r in records) / len(records)


def binarize(m, cfg: BinarizationConfig) -> np.ndarray:
    grid = m.grid if isinstance(m, SaliencyMap) else np.asarray(m, dtype=np.float64)
    mask = grid >= cfg.threshold
    if cfg.region_rule == "largest_component" and mask.any():
        labels, count = ndimage.label(mask, structure=FOUR_CONNECTED)
        if count > 1:
            sizes = np.bincount(labels.ravel())[1:]
            mask = labels == (int(np.argmax(sizes)) + 1)
    return mask


def bbox_from_mask(mask) -> Optional[tuple]:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


Region = Union[GroundTruthRegion, tuple, np.ndarray, None]


def _region(r: Region) -> Optional[GroundTruthRegion]:
    if r is None or isinstance(r, GroundTruthRegion):
        return r
    if isinstance(r, tuple) and len(r) == 4:
        return GroundTruthRegion.box(*r)
    return GroundTruthRegion.from_mask(r)


def iou(a: Region, b: Region, shape=None) -> float:
    """Intersection over union of two regions; an empty region scores 0."""
    a, b = _region(a), _region(b)
    if a is None or b is None:
        return 0.0
    if a.kind == "bbox" and b.kind == "bbox":
        ax0, ay0, ax1, ay1 = a.bbox
        bx0, by0, bx1, by1 = b.bbox
        iw = max(0, min(ax1, bx1) - max(ax0, bx0))
        ih = max(0, min(ay1, by1) - max(ay0, by0))
        inter = iw * ih
        union = a.area + b.area - inter
        return inter / union if union > 0 else 0.0
    if shape is None:
        shape = (a.mask if a.kind == "mask" else b.mask).shape
    ma, mb = a.rasterize(shape), b.rasterize(shape)
    union = np.logical_or(ma, mb).sum()
    return float(np.logical_and(ma, mb).sum() / union) if union else 0.0


def localization_iou(m, truth: GroundTruthRegion, cfg: BinarizationConfig) -> float:
    """IoU of a binarized map against ground truth.

    Box ground truth is compared with the tightest box around the kept
    pixels; mask ground truth with the kept pixels themselves.
    """
    mask = binarize(m, cfg)
    if truth.kind == "bbox":
        box = bbox_from_mask(mask)
        return iou(GroundTruthRegion.box(*box) if box else None, truth)
    return iou(GroundTruthRegion.from_mask(mask), truth)


def default_rule(truth: GroundTruthRegion) -> RegionRule:
    return "largest_component" if truth.kind == "bbox" else "all_pixels"


def select_threshold(holdout, rule: Optional[RegionRule] = None) -> BinarizationConfig:
    """Grid-search the threshold maximizing mean holdout IoU.

    Ties go to the smaller threshold.  With ``rule=None`` each pair uses the
    default rule for its ground-truth kind.
    """
    holdout = list(holdout)
    if not holdout:
        raise EmptyInput("empty holdout set")
    best_t, best = float(THRESHOLD_GRID[0]), -1.0
    for t in THRESHOLD_GRID:
        scores = [
            localization_iou(m, truth, BinarizationConfig(float(t), rule or default_rule(truth)))
            for m, truth in holdout
        ]
        mean = float(np.mean(scores))
        if mean > best:
            best_t, best = float(t), mean
    return BinarizationConfig(best_t, rule or default_rule(holdout[0][1]))


def threshold_scan(holdout, rule: Optional[RegionRule] = None) -> np.ndarray:
    """Mean holdout IoU at every grid threshold."""
    return np.array(
        [
            np.mean(
                [
                    localization_iou(m, truth, BinarizationConfig(float(t), rule or default_rule(truth)))
                    for m, truth in holdout
                ]
            )
            for t in THRESHOLD_GRID
        ]
    )


def small_object_subset(dataset, percentile: float) -> list:
    """Items whose ground-truth area is strictly below the given percentile.

    ``dataset`` holds ``(item, GroundTruthRegion)`` pairs.  The percentile is
    linearly interpolated over all areas in the dataset.
    """
    dataset = list(dataset)
    if not dataset:
        raise EmptyInput("empty dataset")
    if not 0 < percentile < 100:
        raise ValueError("percentile must lie in (0, 100)")
    areas = np.array([region.area for _, region in dataset], dtype=np.float64)
    cut = np.percentile(areas, percentile, method="linear")
    return [pair for pair, a in zip(dataset, areas) if a < cut]


def improvement(first: float, second: float, higher_is_better: bool) -> float:
    """Relative gain (%) of the second value over the first; positive is better."""
    if first == 0:
        return 0.0 if second == first else float("nan")
    gain = (second - first) if higher_is_better else (first - second)
    return 100.0 * gain / abs(first)


HIGHER_IS_BETTER = {"ADP": False, "PIC": True, "IoU": True}


# -- end-to-end evaluation ---------------------------------------------------


@dataclass
class Sample:
    """One manifest item with its image loaded at model resolution."""

    id: str
    image: object
    label: Optional[int] = None
    region: Optional[GroundTruthRegion] = None
    pair_with: Optional[str] = None


@dataclass
class RunReport:
    task: Task
    method: str
    n: int
    records: list = field(default_factory=list)
    ious: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    skipped_nonpositive: int = 0
    overflow: int = 0
    threshold: Optional[BinarizationConfig] = None

    @property
    def metrics(self) -> dict:
        out = {}
        if self.records:
            out["ADP"] = adp(self.records)
            out["PIC"] = pic(self.records)
        if self.ious:
            out["IoU"] = 100.0 * float(np.mean(list(self.ious.values())))
        return out

    def rows(self):
        return [(self.task, self.method, self.n, k, v) for k, v in self.metrics.items()]

    def summary(self) -> dict:
        return {
            "task": self.task,
            "method": self.method,
            "n": self.n,
            "metrics": self.metrics,
            "count": len(self.records),
            "failures": len(self.failures),
            "failed_ids": sorted(self.failures),
            "skipped_nonpositive": self.skipped_nonpositive,
            "overflow": self.overflow,
            "threshold": None if self.threshold is None else self.threshold.threshold,
        }


def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def _classification_item(model, sample: Sample, method, n):
    from .saliency import explain
    from .scoring import ScoreSpec

    m = explain(model, sample.image, ScoreSpec.logit(sample.label), method, n)
    y = _softmax(model.logits(sample.image))[sample.label]
    o = _softmax(model.logits(explanation_map(sample.image, m)))[sample.label]
    rec = EvalRecord(sample.id, float(y), float(o), "classification")
    return rec, {sample.id: m}


def _similarity_item(model, sample: Sample, partner: Sample, method, n, kind):
    from .backend import embed
    from .saliency import explain
    from .scoring import ScoreSpec, score

    fx, fy = embed(model, sample.image), embed(model, partner.image)
    mx = explain(model, sample.image, ScoreSpec.similarity(kind, fy), method, n)
    my = explain(model, partner.image, ScoreSpec.similarity(kind, fx), method, n)
    y = score(fx, ScoreSpec.similarity(kind, fy))
    ex, ey = embed(model, explanation_map(sample.image, mx)), embed(model, explanation_map(partner.image, my))
    try:
        o = score(ex, ScoreSpec.similarity(kind, ey))
    except DegenerateEmbedding:
        # the explanation map erased every activation
        o = 0.0
    rec = EvalRecord(f"{sample.id}|{partner.id}", float(y), float(o), "similarity")
    return rec, {sample.id: mx, partner.id: my}


def _run_chunk(model, jobs, method, n, kind):
    out = []
    for job in jobs:
        try:
            if kind == "logit":
                out.append(_classification_item(model, job[0], method, n))
            else:
                out.append(_similarity_item(model, job[0], job[1], method, n, kind))
        except Exception as exc:  # recorded per item, the run goes on
            log.warning("item %s failed: %s", job[0].id, exc)
            out.append(exc)
    return out


def compute_maps(model, samples, method, n, score_kind="logit", workers: int = 1):
    """Records and saliency maps for every sample, in input order."""
    samples = list(samples)
    if score_kind == "logit":
        jobs = [(s,) for s in samples]
    else:
        by_id = {s.id: s for s in samples}
        jobs = [(s, by_id[s.pair_with]) for s in samples if s.pair_with and s.pair_with in by_id]
    if workers <= 1 or len(jobs) < 2:
        results = _run_chunk(model, jobs, method, n, score_kind)
    else:
        chunks = [jobs[i::workers] for i in range(workers)]
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda c: _run_chunk(model.copy(), c, method, n, score_kind), chunks))
        results = [None] * len(jobs)
        for w, part in enumerate(parts):
            results[w::workers] = part
    return jobs, results


def evaluate_run(
    model,
    samples,
    method: str,
    n: int,
    score_kind: str = "logit",
    binarization: Union[BinarizationConfig, float, None] = None,
    holdout=None,
    workers: int = 1,
) -> RunReport:
    """ADP, PIC and localization IoU of one (method, n) on a dataset.

    ``binarization`` is a fixed config or threshold; when None, the
    threshold is selected on ``holdout`` samples (required then) for every
    sample that has a ground-truth region.
    """
    from .saliency import normalize_method

    method = normalize_method(method)
    task: Task = "classification" if score_kind == "logit" else "similarity"
    report = RunReport(task, method, n)
    jobs, results = compute_maps(model, samples, method, n, score_kind, workers)
    if not jobs:
        raise EmptyInput("no evaluable items (similarity needs pair_with links)")
    maps: dict = {}
    for job, res in zip(jobs, results):
        if isinstance(res, Exception):
            report.failures[job[0].id] = repr(res)
            continue
        rec, item_maps = res
        maps.update(item_maps)
        report.overflow += sum(m.overflow for m in item_maps.values())
        if rec.Y <= 0:
            report.skipped_nonpositive += 1
            continue
        report.records.append(rec)

    regions = {s.id: s.region for s in samples if s.region is not None}
    if regions and maps:
        cfg = _binarization(model, binarization, holdout, method, n, score_kind, workers)
        report.threshold = cfg
        fixed_rule = isinstance(binarization, BinarizationConfig)
        for sid, m in maps.items():
            if sid in regions:
                truth = regions[sid]
                rule = cfg.region_rule if fixed_rule else default_rule(truth)
                report.ious[sid] = localization_iou(m, truth, BinarizationConfig(cfg.threshold, rule))
    return report


def _binarization(model, binarization, holdout, method, n, score_kind, workers) -> BinarizationConfig:
    if isinstance(binarization, BinarizationConfig):
        return binarization
    if binarization is not None:
        return BinarizationConfig(float(binarization))
    if not holdout:
        raise EmptyInput("automatic threshold selection needs a non-empty holdout set")
    jobs, results = compute_maps(model, holdout, method, n, score_kind, workers)
    regions = {s.id: s.region for s in holdout if s.region is not None}
    pairs = []
    for res in results:
        if isinstance(res, Exception):
            continue
        for sid, m in res[1].items():
            if sid in regions:
                pairs.append((m, regions[sid]))
    return select_threshold(pairs)
