"""Activation and gradient capture on torch models.

A :class:`ModelHandle` wraps an ``nn.Module`` together with the names of its
eligible block outputs (the layers saliency maps are computed from) and the
point where the embedding ``f_x`` is read.  Capture works through forward
hooks, so a handle must not be used from two threads at once.
"""

from __future__ import annotations

import copy
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import InputShapeError, NonFiniteScore, UnknownLayer, UnsupportedModel, ConfigError
from .scoring import ScoreSpec, score_tensor


@dataclass(frozen=True)
class ImageTensor:
    """An input image as a ``(channels, height, width)`` array.

    ``normalized`` tells whether the model's input normalization has already
    been applied; raw pixels are normalized inside capture.
    """

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise InputShapeError(f"image must be (c, h, w), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InputShapeError("image has non-finite entries")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class LayerId:
    index: int
    name: str


@dataclass(frozen=True)
class BlockSpec:
    name: str
    relu_terminated: bool = True


@dataclass(frozen=True)
class LayerStack:
    """Ordered ``(LayerId, grid)`` pairs; used for both activations and gradients."""

    entries: tuple

    def __getitem__(self, layer):
        key = layer.name if isinstance(layer, LayerId) else layer
        for lid, grid in self.entries:
            if lid.name == key or lid.index == key:
                return grid
        raise UnknownLayer(layer)

    def __len__(self):
        return len(self.entries)

    @property
    def layers(self):
        return [lid for lid, _ in self.entries]


ActivationStack = LayerStack
GradientStack = LayerStack


@dataclass(frozen=True)
class Capture:
    activations: LayerStack
    gradients: Optional[LayerStack]
    embedding: np.ndarray
    score: Optional[float]


def _frozen(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().numpy().copy()
    a.setflags(write=False)
    return a


class ModelHandle:
    """A model plus the metadata capture needs.

    Args:
        module: the network; put in eval mode on construction.
        blocks: eligible block outputs in forward order, as module names or
            :class:`BlockSpec`.  The last one is layer ``L``.
        head: name of the final linear classifier, if any.  Its input is the
            default embedding and its rows resolve ``class_index`` scores.
        embedding: name of a module whose (flattened) output is used as the
            embedding instead of the head input.
        input_shape: exact ``(c, h, w)`` the model accepts, or None to only
            check the channel count.
        mean, std: per-channel input normalization applied to raw images.
    """

    def __init__(
        self,
        module: nn.Module,
        blocks: Sequence,
        head: Optional[str] = None,
        embedding: Optional[str] = None,
        input_shape: Optional[tuple] = None,
        mean: Optional[Sequence[float]] = None,
        std: Optional[Sequence[float]] = None,
        class_names: Optional[Sequence[str]] = None,
        name: str = "custom",
    ):
        self.module = module.eval()
        self.name = name
        self.blocks = [b if isinstance(b, BlockSpec) else BlockSpec(b) for b in blocks]
        self.head = head
        self.embedding = embedding
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = None if std is None else np.asarray(std, dtype=np.float64)
        self.class_names = list(class_names) if class_names is not None else None
        self._modules = dict(self.module.named_modules())
        for b in self.blocks:
            if b.name not in self._modules:
                raise UnsupportedModel(f"block {b.name!r} not found in model")
        if head is not None and head not in self._modules:
            raise UnsupportedModel(f"head {head!r} not found in model")
        if embedding is not None and embedding not in self._modules:
            raise UnsupportedModel(f"embedding module {embedding!r} not found in model")
        if head is None and embedding is None:
            raise UnsupportedModel("need a head or an embedding module to read f_x from")

    # -- metadata -----------------------------------------------------------

    @property
    def dtype(self) -> torch.dtype:
        p = next(self.module.parameters(), None)
        return p.dtype if p is not None else torch.float32

    def to(self, dtype: torch.dtype) -> "ModelHandle":
        self.module.to(dtype)
        return self

    def copy(self) -> "ModelHandle":
        return copy.deepcopy(self)

    def list_layers(self) -> list[LayerId]:
        return list_layers(self)

    def head_module(self) -> nn.Linear:
        if self.head is None or not isinstance(self._modules[self.head], nn.Linear):
            raise UnsupportedModel("model has no linear head to resolve class scores against")
        return self._modules[self.head]

    @property
    def embedding_dim(self) -> int:
        if self.embedding is None:
            return self.head_module().in_features
        shape = self.input_shape or (self._in_channels(), 32, 32)
        _, f = forward_capture(self, ImageTensor(np.zeros(shape), normalized=True), [])
        return f.size

    def _in_channels(self) -> Optional[int]:
        for m in self.module.modules():
            if isinstance(m, nn.Conv2d):
                return m.in_channels
        return None

    def resolve(self, spec: ScoreSpec) -> ScoreSpec:
        """Fill in class weights and bias for a ``class_index`` score."""
        if spec.resolved:
            return spec
        head = self.head_module()
        j = spec.class_index
        if not 0 <= j < head.out_features:
            raise ConfigError(f"class index {j} outside [0, {head.out_features})")
        if self.embedding is not None:
            raise ConfigError("class_index scores need the default (head input) embedding point")
        w = head.weight[j].detach().double().cpu().numpy()
        b = float(head.bias[j].detach()) if head.bias is not None else 0.0
        return ScoreSpec.weights(w, b)

    def prepare(self, x) -> torch.Tensor:
        if not isinstance(x, ImageTensor):
            x = ImageTensor(x)
        data = x.data
        expect_c = self.input_shape[0] if self.input_shape else self._in_channels()
        if self.input_shape is not None and tuple(data.shape) != self.input_shape:
            raise InputShapeError(f"model expects input {self.input_shape}, got {data.shape}")
        if expect_c is not None and data.shape[0] != expect_c:
            raise InputShapeError(f"model expects {expect_c} channels, got {data.shape[0]}")
        if not x.normalized and self.mean is not None:
            data = (data - self.mean[:, None, None]) / self.std[:, None, None]
        return torch.tensor(data, dtype=self.dtype)[None]

    def logits(self, x) -> np.ndarray:
        with torch.no_grad():
            out = self.module(self.prepare(x))
        return out[0].double().cpu().numpy()


def list_layers(model: ModelHandle) -> list[LayerId]:
    if not model.blocks:
        raise UnsupportedModel("model declares no spatial blocks")
    return [LayerId(i + 1, b.name) for i, b in enumerate(model.blocks)]


def _lookup(model: ModelHandle, layers) -> list[LayerId]:
    known = {lid.name: lid for lid in list_layers(model)}
    by_index = {lid.index: lid for lid in known.values()}
    out = []
    for layer in layers:
        if isinstance(layer, LayerId):
            lid = known.get(layer.name)
        elif isinstance(layer, int):
            lid = by_index.get(layer)
        else:
            lid = known.get(layer)
        if lid is None:
            raise UnknownLayer(layer)
        out.append(lid)
    return sorted(set(out), key=lambda lid: lid.index)


@contextmanager
def _hooks(model: ModelHandle, layers: Sequence[LayerId], replace: Optional[dict] = None):
    """Record block outputs and the embedding during one forward pass.

    Block outputs are handed downstream as clones so that in-place ops later
    in the network (e.g. ``relu_``) cannot touch the recorded tensor.
    ``replace`` maps a layer name to a function applied to its output.
    """
    store: dict = {}
    handles = []
    replace = replace or {}

    def block_hook(name):
        def hook(_module, _inputs, output):
            if not torch.is_tensor(output) or output.dim() != 4:
                raise UnsupportedModel(f"block {name!r} does not produce a spatial feature map")
            if name in replace:
                output = replace[name](output)
            store[name] = output
            return output.clone()

        return hook

    def head_hook(_module, inputs):
        store["__embedding__"] = inputs[0]

    def embed_hook(_module, _inputs, output):
        store["__embedding__"] = output

    try:
        for lid in layers:
            handles.append(model._modules[lid.name].register_forward_hook(block_hook(lid.name)))
        if model.embedding is not None:
            handles.append(model._modules[model.embedding].register_forward_hook(embed_hook))
        else:
            handles.append(model._modules[model.head].register_forward_pre_hook(head_hook))
        yield store
    finally:
        for h in handles:
            h.remove()


def capture(model: ModelHandle, x, score: Optional[ScoreSpec], layers) -> Capture:
    """One forward (and, with a score, one backward) pass."""
    lids = _lookup(model, layers)
    inp = model.prepare(x)
    spec = model.resolve(score) if score is not None else None
    with torch.enable_grad(), _hooks(model, lids) as store:
        model.module(inp)
        f = store["__embedding__"][0].reshape(-1)
        acts = [store[lid.name] for lid in lids]
        if spec is None:
            return Capture(
                LayerStack(tuple((lid, _frozen(a[0])) for lid, a in zip(lids, acts))),
                None,
                _frozen(f),
                None,
            )
        s = score_tensor(f, spec)
        if not torch.isfinite(s):
            raise NonFiniteScore(f"score evaluated to {s.item()}")
        if acts:
            grads = torch.autograd.grad(s, acts, allow_unused=True)
        else:
            grads = []
        grads = [torch.zeros_like(a) if gr is None else gr for a, gr in zip(acts, grads)]
    for lid, gr in zip(lids, grads):
        if not torch.all(torch.isfinite(gr)):
            raise NonFiniteScore(f"non-finite gradient at layer {lid.name}")
    return Capture(
        LayerStack(tuple((lid, _frozen(a[0])) for lid, a in zip(lids, acts))),
        LayerStack(tuple((lid, _frozen(gr[0])) for lid, gr in zip(lids, grads))),
        _frozen(f),
        float(s.item()),
    )


def forward_capture(model: ModelHandle, x, layers) -> tuple[LayerStack, np.ndarray]:
    cap = capture(model, x, None, layers)
    return cap.activations, cap.embedding


def backward_capture(model: ModelHandle, x, score: ScoreSpec, layers) -> LayerStack:
    return capture(model, x, score, layers).gradients


def embed(model: ModelHandle, x) -> np.ndarray:
    return forward_capture(model, x, [])[1]


@dataclass(frozen=True)
class FiniteDifference:
    """Central-difference gradient estimates at probed activation entries.

    ``smooth`` is False where the forward and backward one-sided slopes
    disagree, i.e. a ReLU kink lies within one step of the probe.
    """

    positions: np.ndarray
    estimates: np.ndarray
    smooth: np.ndarray


def _suffix_score(model, inp, spec, layer, edit: Callable) -> float:
    with torch.no_grad(), _hooks(model, [layer], replace={layer.name: edit}) as store:
        model.module(inp)
        return float(score_tensor(store["__embedding__"][0].reshape(-1), spec))


def finite_difference_oracle(
    model: ModelHandle,
    x,
    score: ScoreSpec,
    layer,
    probe_count: int = 64,
    step: float = 1e-5,
    seed: int = 0,
    positions: Optional[np.ndarray] = None,
    kink_tol: float = 1e-4,
) -> FiniteDifference:
    """Estimate ds/dh at sampled entries of one block output.

    Each probe replaces that block's output with ``h +/- step * e`` and
    re-evaluates the score, so upstream layers play no part.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if probe_count < 1 and positions is None:
        raise ValueError("probe_count must be positive")
    known = {lid.name: lid for lid in list_layers(model)}
    name = layer.name if isinstance(layer, LayerId) else layer
    if isinstance(layer, int):
        name = next((lid.name for lid in known.values() if lid.index == layer), None)
    if name not in known:
        raise UnknownLayer(layer)
    lid = known[name]
    spec = model.resolve(score)
    inp = model.prepare(x)

    acts, _ = forward_capture(model, x, [lid])
    shape = acts.entries[0][1].shape
    if positions is None:
        rng = np.random.default_rng(seed)
        flat = rng.choice(int(np.prod(shape)), size=min(probe_count, int(np.prod(shape))), replace=False)
        positions = np.stack(np.unravel_index(flat, shape), axis=1)
    positions = np.asarray(positions, dtype=int).reshape(-1, 3)

    base = _suffix_score(model, inp, spec, lid, lambda t: t)
    estimates = np.empty(len(positions))
    smooth = np.empty(len(positions), dtype=bool)
    for i, (c, u, v) in enumerate(positions):

        def bump(delta):
            def edit(t):
                t = t.clone()
                t[0, c, u, v] += delta
                return t

            return edit

        plus = _suffix_score(model, inp, spec, lid, bump(step))
        minus = _suffix_score(model, inp, spec, lid, bump(-step))
        estimates[i] = (plus - minus) / (2 * step)
        fwd, bwd = (plus - base) / step, (base - minus) / step
        smooth[i] = abs(fwd - bwd) <= kink_tol * max(1.0, abs(fwd), abs(bwd))
    return FiniteDifference(positions, estimates, smooth)
