"""Small architectures and the flat parameter layout.

Parameters of every model live in one flat float32 vector (``ParamVector``).
A :class:`ModelSpec` maps structured layers onto contiguous slices of that
vector and records which coordinates are prunable (weights) and which are not
(biases).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import autodiff as ad
from .rng import INIT, make_rng


class LayoutError(ValueError):
    """Parameter vector or input does not match the model layout."""


@dataclass(frozen=True)
class Layer:
    kind: str  # dense | conv | relu | maxpool | avgpool | flatten
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    kernel: int = 0


@dataclass(frozen=True)
class ParamSlot:
    name: str
    layer: int
    shape: tuple[int, ...]
    offset: int
    prunable: bool

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, ...]
    num_classes: int
    layers: tuple[Layer, ...]
    slots: tuple[ParamSlot, ...]

    @property
    def total_count(self) -> int:
        return self.slots[-1].stop if self.slots else 0

    @cached_property
    def prunable(self) -> np.ndarray:
        flags = np.zeros(self.total_count, dtype=bool)
        for s in self.slots:
            flags[s.offset:s.stop] = s.prunable
        return flags

    def layer_slots(self, i: int) -> list[ParamSlot]:
        return [s for s in self.slots if s.layer == i]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [
                {"kind": l.kind, "in": list(l.in_shape), "out": list(l.out_shape), "kernel": l.kernel}
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = [Layer(x["kind"], tuple(x["in"]), tuple(x["out"]), x.get("kernel", 0)) for x in d["layers"]]
        return _finish(tuple(d["input_shape"]), d["num_classes"], layers)

    def fingerprint(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _finish(input_shape, num_classes, layers) -> ModelSpec:
    slots, off = [], 0
    for i, l in enumerate(layers):
        if l.kind == "dense":
            shapes = [("weight", (l.in_shape[0], l.out_shape[0]), True), ("bias", (l.out_shape[0],), False)]
        elif l.kind == "conv":
            k = l.kernel
            shapes = [("weight", (l.out_shape[0], l.in_shape[0], k, k), True), ("bias", (l.out_shape[0],), False)]
        else:
            continue
        for name, shape, prunable in shapes:
            slots.append(ParamSlot(f"{i}.{name}", i, shape, off, prunable))
            off += int(np.prod(shape))
    return ModelSpec(tuple(input_shape), int(num_classes), tuple(layers), tuple(slots))


def mlp_spec(layer_widths, input_shape=None) -> ModelSpec:
    widths = [int(w) for w in layer_widths]
    if len(widths) < 2:
        raise ValueError("build_mlp needs at least an input and an output width")
    if min(widths) <= 0:
        raise ValueError("layer widths must be positive")
    input_shape = tuple(input_shape) if input_shape is not None else (widths[0],)
    if int(np.prod(input_shape)) != widths[0]:
        raise LayoutError(f"input shape {input_shape} does not flatten to {widths[0]}")
    layers: list[Layer] = []
    if len(input_shape) > 1:
        layers.append(Layer("flatten", input_shape, (widths[0],)))
    for j, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(Layer("dense", (a,), (b,)))
        if j < len(widths) - 2:
            layers.append(Layer("relu", (b,), (b,)))
    return _finish(input_shape, widths[-1], layers)


def cnn_spec(input_shape, conv_channels, classes: int, pool: str = "max") -> ModelSpec:
    c, h, w = (int(v) for v in input_shape)
    if not conv_channels:
        raise ValueError("build_cnn needs at least one conv block")
    layers: list[Layer] = []
    for j, ch in enumerate(conv_channels):
        layers.append(Layer("conv", (c, h, w), (ch, h, w), kernel=3))
        layers.append(Layer("relu", (ch, h, w), (ch, h, w)))
        layers.append(Layer(f"{pool}pool", (ch, h, w), (ch, h // 2, w // 2)))
        h, w = h // 2, w // 2
        c = ch
    layers.append(Layer("flatten", (c, h, w), (c * h * w,)))
    layers.append(Layer("dense", (c * h * w,), (classes,)))
    return _finish((int(input_shape[0]), int(input_shape[1]), int(input_shape[2])), classes, layers)


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = make_rng(seed, INIT)
    w = np.zeros(spec.total_count, dtype=np.float32)
    for s in spec.slots:
        if not s.prunable:
            continue
        layer = spec.layers[s.layer]
        fan_in = layer.in_shape[0] if layer.kind == "dense" else layer.in_shape[0] * layer.kernel ** 2
        bound = np.sqrt(6.0 / fan_in)
        w[s.offset:s.stop] = rng.uniform(-bound, bound, size=s.size).astype(np.float32)
    return w


def build_mlp(layer_widths, seed: int, input_shape=None) -> tuple[ModelSpec, np.ndarray]:
    spec = mlp_spec(layer_widths, input_shape)
    return spec, init_params(spec, seed)


def build_cnn(input_shape, conv_channels, classes: int, seed: int) -> tuple[ModelSpec, np.ndarray]:
    """Conv3x3 (same padding) -> relu -> 2x2 max-pool per block, then a dense
    classifier."""
    spec = cnn_spec(input_shape, conv_channels, classes)
    return spec, init_params(spec, seed)


def views(spec: ModelSpec, params: np.ndarray) -> dict[str, np.ndarray]:
    """Structured views into ``params``; writes through them mutate the flat vector."""
    check_params(spec, params)
    return {s.name: params[s.offset:s.stop].reshape(s.shape) for s in spec.slots}


def check_params(spec: ModelSpec, params) -> None:
    n = params.shape[0] if hasattr(params, "shape") else len(params)
    if getattr(params, "ndim", 1) != 1 or n != spec.total_count:
        raise LayoutError(f"parameter vector of length {n} does not match layout of {spec.total_count}")


def _check_inputs(spec: ModelSpec, x: np.ndarray) -> None:
    if tuple(x.shape[1:]) != spec.input_shape and not (
        len(spec.input_shape) == 1 and int(np.prod(x.shape[1:])) == spec.input_shape[0]
    ):
        raise LayoutError(f"input shape {tuple(x.shape[1:])} does not match model input {spec.input_shape}")


def forward(spec: ModelSpec, flat: ad.Tensor, x: ad.Tensor) -> ad.Tensor:
    """Logits for a batch, built from slices of the flat parameter tensor."""
    h = x
    if len(spec.input_shape) == 1 and h.data.ndim > 2:
        h = ad.flatten(h)
    for i, layer in enumerate(spec.layers):
        if layer.kind in ("dense", "conv"):
            ws, bs = spec.layer_slots(i)
            w = ad.param_slice(flat, ws.offset, ws.stop, ws.shape)
            b = ad.param_slice(flat, bs.offset, bs.stop, bs.shape)
            if layer.kind == "dense":
                h = ad.add(ad.matmul(h, w), b)
            else:
                h = ad.add(ad.conv2d(h, w, padding=layer.kernel // 2), ad.reshape(b, (1, -1, 1, 1)))
        elif layer.kind == "relu":
            h = ad.relu(h)
        elif layer.kind == "maxpool":
            h = ad.max_pool2d(h, 2)
        elif layer.kind == "avgpool":
            h = ad.avg_pool2d(h, 2)
        elif layer.kind == "flatten":
            h = ad.flatten(h)
        else:
            raise LayoutError(f"unknown layer kind {layer.kind!r}")
    return h


def logits(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray, batch_size: int = 2048) -> np.ndarray:
    """Tape-free forward pass, evaluated in chunks."""
    check_params(spec, params)
    inputs = np.asarray(inputs)
    _check_inputs(spec, inputs)
    dtype = params.dtype
    flat = ad.Tensor(params)
    out = []
    for i in range(0, max(len(inputs), 1), batch_size):
        chunk = inputs[i:i + batch_size].astype(dtype, copy=False)
        out.append(forward(spec, flat, ad.Tensor(chunk)).data)
    return np.concatenate(out) if out else np.zeros((0, spec.num_classes), dtype=dtype)


def predict_probs(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Softmax of the logits; one row per input."""
    return ad.softmax(ad.Tensor(logits(spec, params, inputs))).data


def loss_and_grad(spec: ModelSpec, params: np.ndarray, inputs: np.ndarray, labels: np.ndarray,
                  dtype=None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of a batch and its gradient w.r.t. the flat params.

    ``dtype=np.float64`` runs the whole pass in 64-bit mode.
    """
    check_params(spec, params)
    _check_inputs(spec, inputs)
    dtype = dtype or params.dtype
    flat = ad.Tensor(params.astype(dtype, copy=False), requires_grad=True)
    x = ad.Tensor(np.asarray(inputs).astype(dtype, copy=False))
    with ad.Tape() as tape:
        loss = ad.softmax_cross_entropy(forward(spec, flat, x), labels)
        tape.backward(loss)
    return float(loss.data), flat.grad


def grad(spec: ModelSpec, params: np.ndarray, batch, dtype=None) -> np.ndarray:
    """d(mean cross-entropy)/d(params) for ``batch = (inputs, labels)``."""
    inputs, labels = batch
    return loss_and_grad(spec, params, inputs, labels, dtype)[1]


def build_from_config(cfg: dict, input_shape, num_classes: int, seed: int) -> tuple[ModelSpec, np.ndarray]:
    """Build a model from a ``{"kind": "mlp"|"cnn", ...}`` description."""
    kind = cfg.get("kind", "mlp")
    if kind == "mlp":
        hidden = cfg.get("hidden", [100])
        widths = [int(np.prod(input_shape))] + list(hidden) + [num_classes]
        return build_mlp(widths, seed, input_shape=input_shape)
    if kind == "cnn":
        return build_cnn(input_shape, cfg.get("conv_channels", [8, 16]), num_classes, seed)
    raise ValueError(f"unknown model kind {kind!r}")
