"""Backbones and the per-architecture block table.

Only declared block outputs are eligible layers; inner convolutions are not
enumerated.  Torchvision backbones are optional and loaded lazily.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
from torch import nn

from .backend import BlockSpec, ModelHandle
from .errors import ConfigError, UnsupportedModel

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ToyCNN(nn.Module):
    """Two conv blocks, ReLU, global average pooling, linear head.

    Sized for 8x8 inputs; used by the gradient checks.
    """

    def __init__(self, in_channels: int = 1, widths=(4, 6), num_classes: int = 3):
        super().__init__()
        self.block1 = nn.Sequential(nn.Conv2d(in_channels, widths[0], 3, padding=1), nn.ReLU())
        self.block2 = nn.Sequential(nn.Conv2d(widths[0], widths[1], 3, padding=1), nn.ReLU(), nn.AvgPool2d(2))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(widths[1], num_classes)

    def forward(self, x):
        x = self.block2(self.block1(x))
        return self.fc(torch.flatten(self.pool(x), 1))


class LeNet(nn.Module):
    """LeNet-5 for 28x28 single-channel digits.

    Two conv blocks (conv, ReLU, max-pool) followed by the 120-84-10 fully
    connected head.  The embedding is the 84-d input of the last layer.
    """

    def __init__(self, num_classes: int = 10):
        super().__init__()
        self.block1 = nn.Sequential(nn.Conv2d(1, 6, 5, padding=2), nn.ReLU(), nn.MaxPool2d(2))
        self.block2 = nn.Sequential(nn.Conv2d(6, 16, 5), nn.ReLU(), nn.MaxPool2d(2))
        self.fc1 = nn.Linear(16 * 5 * 5, 120)
        self.fc2 = nn.Linear(120, 84)
        self.fc3 = nn.Linear(84, num_classes)

    def forward(self, x):
        x = torch.flatten(self.block2(self.block1(x)), 1)
        x = torch.relu(self.fc2(torch.relu(self.fc1(x))))
        return self.fc3(x)


class DenseNetBlocks(nn.Module):
    """Torchvision DenseNet with the closing ReLU as its own module.

    Torchvision applies that ReLU functionally and in place, which leaves no
    module whose output is the non-negative last feature map.
    """

    def __init__(self, net):
        super().__init__()
        self.features = net.features
        self.final_relu = nn.ReLU()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.classifier = net.classifier

    def forward(self, x):
        x = self.final_relu(self.features(x))
        return self.classifier(torch.flatten(self.pool(x), 1))


@dataclass(frozen=True)
class Architecture:
    builder: object
    blocks: tuple
    head: str
    input_shape: Optional[tuple] = None
    mean: Optional[tuple] = None
    std: Optional[tuple] = None
    class_names: Optional[tuple] = None
    torchvision: bool = False
    extra: dict = field(default_factory=dict)


def _tv(name):
    def build(pretrained):
        import torchvision

        weights = "DEFAULT" if pretrained else None
        net = getattr(torchvision.models, name)(weights=weights)
        if name.startswith("densenet"):
            net = DenseNetBlocks(net)
        return net

    return build


_RESNET_BLOCKS = tuple(BlockSpec(f"layer{i}") for i in range(1, 5))
_DENSENET_BLOCKS = (
    BlockSpec("features.transition1", relu_terminated=False),
    BlockSpec("features.transition2", relu_terminated=False),
    BlockSpec("features.transition3", relu_terminated=False),
    BlockSpec("final_relu"),
)

ARCHITECTURES = {
    "toycnn": Architecture(lambda _: ToyCNN(), (BlockSpec("block1"), BlockSpec("block2")), "fc", (1, 8, 8)),
    "lenet": Architecture(
        lambda _: LeNet(),
        (BlockSpec("block1"), BlockSpec("block2")),
        "fc3",
        (1, 28, 28),
        class_names=tuple(str(i) for i in range(10)),
    ),
}
for _name in ("resnet18", "resnet50", "resnet101"):
    ARCHITECTURES[_name] = Architecture(_tv(_name), _RESNET_BLOCKS, "fc", None, IMAGENET_MEAN, IMAGENET_STD, torchvision=True)
for _name in ("densenet121", "densenet201"):
    ARCHITECTURES[_name] = Architecture(
        _tv(_name), _DENSENET_BLOCKS, "classifier", None, IMAGENET_MEAN, IMAGENET_STD, torchvision=True
    )


def cache_dir() -> Path:
    return Path(os.environ.get("GAMKIT_CACHE", Path.home() / ".cache" / "gamkit"))


def load_model(
    backbone: str,
    weights: Optional[str] = None,
    embedding: Optional[str] = None,
    blocks=None,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> ModelHandle:
    """Build a :class:`ModelHandle` for a registered backbone.

    ``weights`` is None/"random" (seeded init), "pretrained" (torchvision
    weights, cached under ``$GAMKIT_CACHE``) or a path to a state dict.
    """
    if backbone not in ARCHITECTURES:
        raise UnsupportedModel(f"unknown backbone {backbone!r}; known: {sorted(ARCHITECTURES)}")
    arch = ARCHITECTURES[backbone]
    pretrained = weights in ("pretrained", "imagenet")
    if pretrained:
        if not arch.torchvision:
            raise ConfigError(f"no pretrained weights published for {backbone}")
        torch.hub.set_dir(str(cache_dir()))
    torch.manual_seed(seed)
    module = arch.builder(pretrained)
    if weights not in (None, "random", "pretrained", "imagenet"):
        path = Path(weights)
        if not path.exists():
            raise ConfigError(f"weights file not found: {path}")
        module.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    class_names = arch.class_names
    if pretrained and class_names is None:
        class_names = _imagenet_categories(backbone)
    module.to(dtype)
    return ModelHandle(
        module,
        blocks if blocks is not None else arch.blocks,
        head=arch.head,
        embedding=embedding,
        input_shape=arch.input_shape,
        mean=arch.mean,
        std=arch.std,
        class_names=class_names,
        name=backbone,
    )


def _imagenet_categories(backbone):
    import torchvision

    try:
        return tuple(torchvision.models.get_weight(f"{_weights_enum(backbone)}.DEFAULT").meta["categories"])
    except Exception:
        return None


def _weights_enum(backbone):
    table = {
        "resnet18": "ResNet18_Weights",
        "resnet50": "ResNet50_Weights",
        "resnet101": "ResNet101_Weights",
        "densenet121": "DenseNet121_Weights",
        "densenet201": "DenseNet201_Weights",
    }
    return table[backbone]


def default_input_size(handle: ModelHandle) -> tuple[int, int]:
    if handle.input_shape is not None:
        return handle.input_shape[1:]
    return (224, 224)
