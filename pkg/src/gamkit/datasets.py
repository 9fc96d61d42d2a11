"""Dataset manifests, image loading and the MNIST fixture."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

from .backend import ImageTensor
from .errors import ConfigError, EmptyInput, UnknownClass
from .metrics import GroundTruthRegion, Sample

BUILTIN_MNIST = "builtin:mnist"


@dataclass(frozen=True)
class ManifestItem:
    id: str
    image_path: Path
    label: Union[int, str, None] = None
    bbox: Optional[tuple] = None
    mask_path: Optional[Path] = None
    pair_with: Optional[str] = None


def read_manifest(path) -> list[ManifestItem]:
    """Parse a JSON-lines manifest; relative paths resolve against its folder."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    root = path.parent
    items = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            item = ManifestItem(
                id=str(obj["id"]),
                image_path=root / obj["image_path"],
                label=obj.get("label"),
                bbox=tuple(obj["bbox"]) if obj.get("bbox") is not None else None,
                mask_path=root / obj["mask_path"] if obj.get("mask_path") else None,
                pair_with=str(obj["pair_with"]) if obj.get("pair_with") is not None else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad manifest entry ({exc})") from exc
        items.append(item)
    if not items:
        raise EmptyInput(f"manifest {path} has no items")
    return items


def resolve_label(label, class_names) -> int:
    if isinstance(label, (int, np.integer)):
        if class_names is not None and not 0 <= label < len(class_names):
            raise UnknownClass(label)
        return int(label)
    if isinstance(label, str):
        if label.lstrip("-").isdigit():
            return resolve_label(int(label), class_names)
        if class_names is not None and label in class_names:
            return list(class_names).index(label)
    raise UnknownClass(label)


def load_image(path, size: tuple[int, int], channels: int = 3) -> ImageTensor:
    """Load and resize an image to ``size`` (height, width), pixels in [0, 1]."""
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    img = img.convert("L" if channels == 1 else "RGB")
    if img.size != (size[1], size[0]):
        img = img.resize((size[1], size[0]), Image.BICUBIC)
    data = np.asarray(img, dtype=np.float64) / 255.0
    data = data[None] if data.ndim == 2 else data.transpose(2, 0, 1)
    return ImageTensor(data)


def _scale_box(box, src_size, size):
    sx, sy = size[1] / src_size[0], size[0] / src_size[1]
    x0, y0, x1, y1 = box
    x0, y0 = int(np.floor(x0 * sx)), int(np.floor(y0 * sy))
    x1, y1 = max(int(np.ceil(x1 * sx)), x0 + 1), max(int(np.ceil(y1 * sy)), y0 + 1)
    return GroundTruthRegion.box(x0, y0, min(x1, size[1]), min(y1, size[0]))


def load_sample(item: ManifestItem, size, channels: int = 3, class_names=None) -> Sample:
    with Image.open(item.image_path) as img:
        src_size = img.size
    image = load_image(item.image_path, size, channels)
    region = None
    if item.bbox is not None:
        region = _scale_box(item.bbox, src_size, size)
    elif item.mask_path is not None:
        mask = Image.open(item.mask_path).convert("L").resize((size[1], size[0]), Image.NEAREST)
        region = GroundTruthRegion.from_mask(np.asarray(mask) > 0)
    label = resolve_label(item.label, class_names) if item.label is not None else None
    return Sample(item.id, image, label, region, item.pair_with)


def load_mnist(source: str = BUILTIN_MNIST) -> tuple[np.ndarray, np.ndarray]:
    """Digits as ``(N, 1, 28, 28)`` float32 in [0, 1] and integer labels.

    ``source`` is an ``.npz`` file with arrays ``x`` and ``y``, or
    ``builtin:mnist`` for the 5000-digit MNIST sample bundled with mlxtend.
    """
    if source == BUILTIN_MNIST:
        try:
            from mlxtend.data import mnist_data
        except ImportError as exc:
            raise ConfigError("builtin:mnist needs the optional 'mlxtend' package") from exc
        x, y = mnist_data()
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"dataset not found: {path}")
        with np.load(path) as data:
            x, y = data["x"], data["y"]
    x = np.asarray(x, dtype=np.float32).reshape(-1, 1, 28, 28)
    if x.max() > 1.0:
        x = x / 255.0
    return x, np.asarray(y, dtype=np.int64)
