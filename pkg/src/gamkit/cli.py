"""``gamkit`` command line: explain | evaluate | sanity.

Settings come from an optional YAML/JSON config file (``--config``); any flag
given on the command line overrides the file.  Exit codes: 0 success,
1 configuration error, 2 partial failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml

from . import __version__
from .backend import embed
from .datasets import BUILTIN_MNIST, load_image, load_mnist, load_sample, read_manifest, resolve_label
from .errors import ConfigError, EmptyInput, GamkitError, NonFiniteScore, UnknownClass
from .io import side_by_side, write_overlay, write_smap, overlay
from .metrics import HIGHER_IS_BETTER, evaluate_run, improvement
from .models import ARCHITECTURES, default_input_size, load_model
from .saliency import explain, normalize_method
from .scoring import ScoreSpec

log = logging.getLogger("gamkit")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2
SCORE_KINDS = {"logit": "logit", "dot": "dot", "cosine": "cosine"}


@dataclass
class RunConfig:
    model: Optional[str] = None
    weights: Optional[str] = None
    embedding: Optional[str] = None
    blocks: Optional[list] = None
    method: list = field(default_factory=lambda: ["gam"])
    n: list = field(default_factory=lambda: [1])
    score: str = "logit"
    class_: Optional[str] = None
    reference: Optional[str] = None
    image: Optional[str] = None
    manifest: Optional[str] = None
    holdout_manifest: Optional[str] = None
    holdout_fraction: float = 0.2
    out: str = "gamkit_out"
    seed: int = 0
    workers: int = 1
    threshold: Optional[float] = None
    auto_threshold: bool = False
    alpha: float = 0.5
    colormap: str = "viridis"
    test: str = "param"
    dataset: Optional[str] = None
    permutation: str = "random"
    double: bool = False

    def validate(self, command: str) -> "RunConfig":
        self.method = [normalize_method(m) for m in _as_list(self.method)]
        self.n = [int(v) for v in _as_list(self.n)]
        if any(v < 1 for v in self.n):
            raise ConfigError("n must be >= 1")
        if self.score not in SCORE_KINDS:
            raise ConfigError(f"--score must be one of {sorted(SCORE_KINDS)}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("--alpha must lie in [0, 1]")
        if self.threshold is not None and not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("--threshold must lie in [0, 1]")
        if self.weights not in (None, "random", "pretrained", "imagenet") and not Path(self.weights).exists():
            raise ConfigError(f"weights file not found: {self.weights}")
        if command in ("explain", "evaluate") and self.model is None:
            raise ConfigError("--model is required")
        if command == "explain":
            _require_file(self.image, "--image")
            if self.score != "logit":
                _require_file(self.reference, "--reference")
        elif command == "evaluate":
            _require_file(self.manifest, "--manifest")
            if self.holdout_manifest is not None:
                _require_file(self.holdout_manifest, "--holdout-manifest")
        elif command == "sanity":
            if self.test not in ("param", "data"):
                raise ConfigError("--test must be param or data")
            if self.dataset is None:
                raise ConfigError("--dataset is required (a .npz file or builtin:mnist)")
            if self.dataset != BUILTIN_MNIST:
                _require_file(self.dataset, "--dataset")
        return self


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def _require_file(path, flag):
    if path is None:
        raise ConfigError(f"{flag} is required")
    if not Path(path).exists():
        raise ConfigError(f"{flag}: no such file {path}")


def build_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        values.update({k.replace("-", "_"): v for k, v in loaded.items()})
        if "class" in values:
            values["class_"] = values.pop("class")
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None and flag is not False:
            values[f.name] = flag
    unknown = set(values) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**values)


def _handle(cfg: RunConfig):
    dtype = torch.float64 if cfg.double else torch.float32
    return load_model(cfg.model, cfg.weights, cfg.embedding, cfg.blocks, seed=cfg.seed, dtype=dtype)


def _preprocessing(handle) -> dict:
    return {
        "input_size": list(default_input_size(handle)),
        "resize": "bicubic",
        "pixel_range": [0.0, 1.0],
        "mean": None if handle.mean is None else handle.mean.tolist(),
        "std": None if handle.std is None else handle.std.tolist(),
    }


def _channels(handle) -> int:
    return handle.input_shape[0] if handle.input_shape else (handle._in_channels() or 3)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _emit(cfg, out, stem, image, smap, extra) -> dict:
    write_smap(out / f"{stem}.smap", smap)
    write_overlay(out / f"{stem}_overlay.png", image.data, smap, cfg.alpha, cfg.colormap)
    sidecar = {
        "method": smap.method,
        "n": smap.n_layers,
        "score": smap.score,
        "degenerate": smap.degenerate,
        "overflow": smap.overflow,
        **extra,
    }
    _write_json(out / f"{stem}.json", sidecar)
    return sidecar


def cmd_explain(cfg: RunConfig) -> int:
    cfg.validate("explain")
    torch.manual_seed(cfg.seed)
    handle = _handle(cfg)
    size, channels = default_input_size(handle), _channels(handle)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    x = load_image(cfg.image, size, channels)
    common = {
        "model": cfg.model,
        "weights": cfg.weights,
        "seed": cfg.seed,
        "score_kind": cfg.score,
        "preprocessing": _preprocessing(handle),
    }
    status = EXIT_OK
    sidecars = []
    for method in cfg.method:
        for n in cfg.n:
            tag = f"{method.lower()}_n{n}"
            try:
                if cfg.score == "logit":
                    if cfg.class_ is None:
                        j = int(np.argmax(handle.logits(x)))
                    else:
                        j = resolve_label(cfg.class_, handle.class_names)
                    m = explain(handle, x, ScoreSpec.logit(j), method, n)
                    sidecars.append(_emit(cfg, out, f"{Path(cfg.image).stem}_{tag}", x, m, {**common, "class_index": j}))
                else:
                    y = load_image(cfg.reference, size, channels)
                    fx, fy = embed(handle, x), embed(handle, y)
                    for stem, img, ref, partner in (
                        (Path(cfg.image).stem, x, fy, cfg.reference),
                        (Path(cfg.reference).stem, y, fx, cfg.image),
                    ):
                        m = explain(handle, img, ScoreSpec.similarity(cfg.score, ref), method, n)
                        sidecars.append(_emit(cfg, out, f"{stem}_{tag}", img, m, {**common, "paired_with": str(partner)}))
            except NonFiniteScore as exc:
                log.error("non-finite score for %s: %s", tag, exc)
                _write_json(out / f"{Path(cfg.image).stem}_{tag}.json", {**common, "method": method, "n": n, "error": str(exc)})
                status = EXIT_PARTIAL
    overflowed = sum(s["overflow"] for s in sidecars)
    if overflowed:
        log.warning("Grad-CAM++ exp(s) overflow in %d map(s); maps use the cancelled form", overflowed)
    print(f"wrote {len(sidecars)} map(s) to {out} (overflow: {overflowed}, errors: {status != EXIT_OK})")
    return status


def _holdout_split(samples, fraction, seed):
    order = np.random.default_rng(seed).permutation(len(samples))
    k = max(1, int(round(fraction * len(samples))))
    if k >= len(samples):
        raise EmptyInput("manifest too small to split off a holdout set")
    held = set(order[:k].tolist())
    pairs = {s.id: s.pair_with for s in samples}
    # keep similarity pairs on the same side of the split
    ids = {samples[i].id for i in held}
    ids |= {pairs[i] for i in ids if pairs.get(i)}
    ids |= {s.id for s in samples if s.pair_with in ids}
    return [s for s in samples if s.id not in ids], [s for s in samples if s.id in ids]


def _load_samples(path, handle, failed: dict) -> list:
    size, channels = default_input_size(handle), _channels(handle)
    samples = []
    for item in read_manifest(path):
        try:
            samples.append(load_sample(item, size, channels, handle.class_names))
        except (OSError, UnknownClass, ValueError) as exc:
            log.warning("skipping %s: %s", item.id, exc)
            failed[item.id] = repr(exc)
    if not samples:
        raise EmptyInput(f"no loadable items in {path}")
    return samples


def cmd_evaluate(cfg: RunConfig) -> int:
    cfg.validate("evaluate")
    torch.manual_seed(cfg.seed)
    handle = _handle(cfg)
    load_failures: dict = {}
    load = lambda path: _load_samples(path, handle, load_failures)
    samples = load(cfg.manifest)
    holdout = None
    binarization = cfg.threshold
    if cfg.auto_threshold or binarization is None:
        if cfg.holdout_manifest:
            holdout = load(cfg.holdout_manifest)
        elif any(s.region is not None for s in samples):
            samples, holdout = _holdout_split(samples, cfg.holdout_fraction, cfg.seed)
        binarization = None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, summaries, failures = [], [], len(load_failures)
    for method in cfg.method:
        per_n = {}
        for n in cfg.n:
            report = evaluate_run(handle, samples, method, n, cfg.score, binarization, holdout, cfg.workers)
            per_n[n] = report.metrics
            rows.extend(report.rows())
            summaries.append(report.summary())
            failures += len(report.failures)
            if report.overflow:
                log.warning("%s n=%d: Grad-CAM++ exp(s) overflow on %d map(s)", method, n, report.overflow)
        base = cfg.n[0]
        for n in cfg.n[1:]:
            for metric, value in per_n[n].items():
                if metric in per_n[base]:
                    gain = improvement(per_n[base][metric], value, HIGHER_IS_BETTER[metric])
                    rows.append((summaries[-1]["task"], method, n, f"{metric}_impr", gain))
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "method", "n", "metric", "value"])
        writer.writerows(rows)
    _write_json(
        out / "summary.json",
        {"runs": summaries, "failures": failures, "load_failures": load_failures, "items": len(samples)},
    )
    print(f"evaluated {len(samples)} item(s); {failures} failure(s); report in {out}")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_sanity(cfg: RunConfig) -> int:
    from .sanity import data_randomization_test, parameter_randomization_on_dataset

    cfg.validate("sanity")
    arch = cfg.model or "lenet"
    dataset = load_mnist(cfg.dataset)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for method in cfg.method:
        for n in cfg.n:
            if cfg.test == "param":
                rep = parameter_randomization_on_dataset(arch, dataset, method, n, cfg.seed)
            else:
                rep = data_randomization_test(arch, dataset, None, method, n, cfg.seed, cfg.permutation)
            stem = f"sanity_{cfg.test}_{method.lower()}_n{n}"
            _write_json(out / f"{stem}.json", rep.to_dict())
            for i, (img, a, b) in enumerate(rep.examples):
                panels = [overlay(img.data, np.zeros_like(a.grid), 0.0), overlay(img.data, a, cfg.alpha, cfg.colormap), overlay(img.data, b, cfg.alpha, cfg.colormap)]
                side_by_side(out / f"{stem}_{i}.png", panels)
            reports.append(rep)
            verdict = "PASS" if rep.passed else "FAIL"
            print(f"{rep.test} {method} n={n}: self={rep.self_similarity:.3f} cross={rep.cross_similarity:.3f} {verdict}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gamkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config")
        p.add_argument("--model", choices=sorted(ARCHITECTURES))
        p.add_argument("--weights", help="random | pretrained | path to a state dict")
        p.add_argument("--embedding", help="module whose output is the embedding (default: head input)")
        p.add_argument("--method", nargs="+", type=str.lower, choices=["gam", "gc", "gcpp"])
        p.add_argument("--n", nargs="+", type=int)
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--colormap")
        p.add_argument("--double", action="store_true", help="run the model in float64")

    p = sub.add_parser("explain", help="saliency maps for one image or an image pair")
    common(p)
    p.add_argument("--image")
    p.add_argument("--score", choices=sorted(SCORE_KINDS))
    p.add_argument("--class", dest="class_")
    p.add_argument("--reference")

    p = sub.add_parser("evaluate", help="ADP, PIC and IoU over a manifest")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--holdout-manifest", dest="holdout_manifest")
    p.add_argument("--score", choices=sorted(SCORE_KINDS))
    p.add_argument("--workers", type=int)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--threshold", type=float)
    group.add_argument("--auto-threshold", dest="auto_threshold", action="store_true")

    p = sub.add_parser("sanity", help="randomization sanity tests")
    common(p)
    p.add_argument("--test", choices=["param", "data"])
    p.add_argument("--arch", dest="model", choices=["lenet"])
    p.add_argument("--dataset")
    p.add_argument("--permutation", choices=["random", "identity"])
    return parser


COMMANDS = {"explain": cmd_explain, "evaluate": cmd_evaluate, "sanity": cmd_sanity}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, UnknownClass, EmptyInput) as exc:
        print(f"gamkit: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"gamkit: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GamkitError as exc:
        print(f"gamkit: error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
