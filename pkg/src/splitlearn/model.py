"""Reference splittable CNN, its three-way partition, and the layer interpreter."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T

Params = dict[str, np.ndarray]

KINDS = ("conv", "relu", "maxpool", "dense", "flatten", "transposed_conv", "tanh", "upsample")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    units: int = 0
    in_features: int = 0
    scaled: bool = False  # tanh only: map onto [0, 1]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "dense", "transposed_conv")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k = self.kernel
        if self.kind == "conv":
            return {"weight": (self.out_channels, self.in_channels, k, k), "bias": (self.out_channels,)}
        if self.kind == "transposed_conv":
            return {"weight": (self.in_channels, self.out_channels, k, k), "bias": (self.out_channels,)}
        if self.kind == "dense":
            return {"weight": (self.units, self.in_features), "bias": (self.units,)}
        return {}

    def fan_in(self) -> int:
        if self.kind in ("conv", "transposed_conv"):
            return self.in_channels * self.kernel * self.kernel
        return self.in_features

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape, raising ``ShapeError`` if ``shape`` does not fit."""
        kind = self.kind
        if kind in ("conv", "transposed_conv", "maxpool", "upsample") and len(shape) != 3:
            raise T.ShapeError(f"{kind} expects a C,H,W input, got {shape}")
        if kind == "conv":
            c, h, w = shape
            if c != self.in_channels:
                raise T.ShapeError(f"conv expects {self.in_channels} channels, got input {shape}")
            if self.kernel > h + 2 * self.pad:
                raise T.ShapeError(f"kernel {self.kernel} too large for input {shape}")
            ho = (h + 2 * self.pad - self.kernel) // self.stride + 1
            wo = (w + 2 * self.pad - self.kernel) // self.stride + 1
            return (self.out_channels, ho, wo)
        if kind == "transposed_conv":
            c, h, w = shape
            if c != self.in_channels:
                raise T.ShapeError(f"transposed_conv expects {self.in_channels} channels, got input {shape}")
            size = T.transposed_conv_output_size
            return (self.out_channels, size(h, self.kernel, self.stride, self.pad),
                    size(w, self.kernel, self.stride, self.pad))
        if kind == "maxpool":
            c, h, w = shape
            return (c, h // 2, w // 2)
        if kind == "upsample":
            c, h, w = shape
            return (c, 2 * h, 2 * w)
        if kind == "flatten":
            return (int(np.prod(shape)),)
        if kind == "dense":
            if shape != (self.in_features,):
                raise T.ShapeError(f"dense expects ({self.in_features},), got {shape}")
            return (self.units,)
        return shape


def conv(cin: int, cout: int, kernel: int = 3, stride: int = 1, pad: int = 1) -> LayerSpec:
    return LayerSpec("conv", in_channels=cin, out_channels=cout, kernel=kernel, stride=stride, pad=pad)


def transposed_conv(cin: int, cout: int, kernel: int = 3, stride: int = 1, pad: int = 1) -> LayerSpec:
    return LayerSpec("transposed_conv", in_channels=cin, out_channels=cout, kernel=kernel,
                     stride=stride, pad=pad)


def dense(in_features: int, units: int) -> LayerSpec:
    return LayerSpec("dense", in_features=in_features, units=units)


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    block_boundaries: tuple[int, int, int]
    num_classes: int

    def __post_init__(self):
        b = self.block_boundaries
        if len(b) != 3 or not (0 < b[0] < b[1] < b[2] <= self.head_start):
            raise ValueError(f"block boundaries {b} must be 3 increasing indices before the head")
        self.shapes()  # validates the chain

    @property
    def head_start(self) -> int:
        return len(self.layers) - 2

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample shapes: ``shapes()[i]`` is the input of layer ``i``; the last is the output."""
        out = [tuple(self.input_shape)]
        for layer in self.layers:
            out.append(layer.output_shape(out[-1]))
        return out


def reference_model(input_channels: int, image_size: int, num_classes: int) -> ModelSpec:
    """Three conv blocks and a dense head.

    block1: conv16+relu+pool, block2: conv32+relu+pool, block3: conv64+relu,
    head: flatten+dense(num_classes).
    """
    if image_size not in (28, 32):
        raise ValueError(f"image_size must be 28 or 32, got {image_size}")
    if input_channels < 1 or num_classes < 1:
        raise ValueError("input_channels and num_classes must be positive")
    relu, pool = LayerSpec("relu"), LayerSpec("maxpool")
    side = image_size // 4
    layers = (
        conv(input_channels, 16), relu, pool,
        conv(16, 32), relu, pool,
        conv(32, 64), relu,
        LayerSpec("flatten"), dense(64 * side * side, num_classes),
    )
    return ModelSpec((input_channels, image_size, image_size), layers, (3, 6, 8), num_classes)


@dataclass(frozen=True)
class SplitPlan:
    depth: int
    extractor: range
    cloud: range
    classifier: range

    def part(self, name: str) -> range:
        return {"extractor": self.extractor, "cloud": self.cloud, "classifier": self.classifier}[name]

    def tag(self, layer_index: int) -> str:
        for name in ("extractor", "cloud", "classifier"):
            if layer_index in self.part(name):
                return name
        raise IndexError(layer_index)


def split(model: ModelSpec, depth: int) -> SplitPlan:
    if depth not in (1, 2, 3):
        raise ValueError(f"depth must be 1, 2 or 3, got {depth}")
    cut = model.block_boundaries[depth - 1]
    head = model.head_start
    return SplitPlan(depth, range(0, cut), range(cut, head), range(head, len(model.layers)))


# parameters

def param_name(index: int, key: str, prefix: str = "") -> str:
    return f"{prefix}{index}.{key}"


def init_params(layers: Iterable[LayerSpec], seed: int, purpose: str = "init", prefix: str = "",
                indices: Iterable[int] | None = None, rng_keys: tuple[int, ...] = ()) -> Params:
    """Fan-in uniform weights and zero biases.

    Every layer draws from its own stream keyed by its index, so initializing
    a sub-range gives exactly the same tensors as initializing the whole model.
    """
    layers = list(layers)
    indices = list(range(len(layers))) if indices is None else list(indices)
    params: Params = {}
    for i, layer in zip(indices, layers):
        if not layer.has_params:
            continue
        shapes = layer.param_shapes()
        rng = T.make_rng(seed, purpose, *rng_keys, i)
        params[param_name(i, "weight", prefix)] = T.uniform_fan_in(rng, shapes["weight"], layer.fan_in())
        params[param_name(i, "bias", prefix)] = np.zeros(shapes["bias"], dtype=T.DTYPE)
    return params


def init_model_params(model: ModelSpec, seed: int, part: range | None = None) -> Params:
    part = range(len(model.layers)) if part is None else part
    return init_params([model.layers[i] for i in part], seed, indices=part)


def select(params: Mapping[str, np.ndarray], part: range, prefix: str = "") -> Params:
    """Parameters owned by layers in ``part``, in layer order."""
    out: Params = {}
    for i in part:
        for key in ("weight", "bias"):
            name = param_name(i, key, prefix)
            if name in params:
                out[name] = params[name]
    return out


def tag_parameters(params: Mapping[str, np.ndarray], plan: SplitPlan) -> dict[str, str]:
    return {name: plan.tag(int(name.split(".")[0])) for name in params}


def checksum(params: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and raw bytes, in insertion order."""
    h = hashlib.sha256()
    for name, t in params.items():
        h.update(name.encode())
        h.update(repr(tuple(t.shape)).encode())
        h.update(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return h.hexdigest()


# interpreter

@dataclass
class Cache:
    part: range
    prefix: str
    entries: list = field(default_factory=list)


def forward(layers, params: Mapping[str, np.ndarray], x: np.ndarray, part: range | None = None,
            prefix: str = "") -> tuple[np.ndarray, Cache]:
    """Run layers ``part`` of ``layers`` (a ModelSpec or LayerSpec sequence) on ``x``."""
    layers = layers.layers if isinstance(layers, ModelSpec) else layers
    part = range(len(layers)) if part is None else part
    cache = Cache(part, prefix)
    for i in part:
        layer = layers[i]
        kind = layer.kind
        if kind == "conv":
            w, b = params[param_name(i, "weight", prefix)], params[param_name(i, "bias", prefix)]
            cache.entries.append(x)
            x = T.conv2d_forward(x, w, b, layer.stride, layer.pad)
        elif kind == "transposed_conv":
            w, b = params[param_name(i, "weight", prefix)], params[param_name(i, "bias", prefix)]
            cache.entries.append(x)
            x = T.transposed_conv2d_forward(x, w, b, layer.stride, layer.pad)
        elif kind == "dense":
            w, b = params[param_name(i, "weight", prefix)], params[param_name(i, "bias", prefix)]
            cache.entries.append(x)
            x = T.dense_forward(x, w, b)
        elif kind == "relu":
            cache.entries.append(x)
            x = T.relu_forward(x)
        elif kind == "tanh":
            x = T.tanh_forward(x, layer.scaled)
            cache.entries.append(x)
        elif kind == "maxpool":
            shape = x.shape
            x, idx = T.maxpool2x2_forward(x)
            cache.entries.append((shape, idx))
        elif kind == "upsample":
            cache.entries.append(None)
            x = T.upsample2x_forward(x)
        elif kind == "flatten":
            cache.entries.append(x.shape)
            x = x.reshape(x.shape[0], -1)
    return x, cache


def backward(layers, params: Mapping[str, np.ndarray], cache: Cache, grad_out: np.ndarray,
             part: range | None = None) -> tuple[np.ndarray, Params]:
    """Backpropagate through the layers recorded in ``cache``.

    Returns the gradient w.r.t. the part's input and the parameter gradients
    keyed like ``params``.
    """
    layers = layers.layers if isinstance(layers, ModelSpec) else layers
    if part is not None and part != cache.part:
        raise ValueError(f"cache was recorded for layers {cache.part} but backward asked for {part}")
    if len(cache.entries) != len(cache.part):
        raise ValueError("cache is incomplete or already consumed")
    prefix = cache.prefix
    grads: Params = {}
    g = grad_out
    for i, saved in zip(reversed(cache.part), reversed(cache.entries)):
        layer = layers[i]
        kind = layer.kind
        if kind in ("conv", "transposed_conv", "dense"):
            wn, bn = param_name(i, "weight", prefix), param_name(i, "bias", prefix)
            w = params[wn]
            if kind == "conv":
                g, gw, gb = T.conv2d_backward(saved, w, g, layer.stride, layer.pad)
            elif kind == "transposed_conv":
                g, gw, gb = T.transposed_conv2d_backward(saved, w, g, layer.stride, layer.pad)
            else:
                g, gw, gb = T.dense_backward(saved, w, g)
            grads[bn] = gb
            grads[wn] = gw
        elif kind == "relu":
            g = T.relu_backward(saved, g)
        elif kind == "tanh":
            g = T.tanh_backward(saved, g, layer.scaled)
        elif kind == "maxpool":
            shape, idx = saved
            g = T.maxpool2x2_backward(shape, idx, g)
        elif kind == "upsample":
            g = T.upsample2x_backward(g)
        elif kind == "flatten":
            g = g.reshape(saved)
    cache.entries.clear()
    ordered = {name: grads[name] for name in select(params, cache.part, prefix) if name in grads}
    return g, ordered


def apply_sgd(params: Params, grads: Mapping[str, np.ndarray], lr: float) -> None:
    """Update ``params`` in place (rebinding each entry) with plain SGD."""
    names = list(grads)
    new = T.sgd_step([params[n] for n in names], [grads[n] for n in names], lr)
    for n, t in zip(names, new):
        params[n] = t


# checkpoint file: "SPLN" u16 version, then records until EOF

CHECKPOINT_MAGIC = b"SPLN"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_tensor_record(name: str, t: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"tensor name too long: {len(raw)} bytes")
    t = np.asarray(t)
    if t.ndim > 255:
        raise CheckpointError(f"tensor {name} has rank {t.ndim} > 255")
    return b"".join((
        struct.pack("<H", len(raw)), raw,
        struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape),
        np.ascontiguousarray(t, dtype="<f4").tobytes(),
    ))


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<H", CHECKPOINT_VERSION))
        for name, t in params.items():
            f.write(encode_tensor_record(name, t))
    return path


def load_checkpoint(path) -> Params:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 6:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos, params = 6, {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            if len(name.encode()) != nlen:
                raise CheckpointError(f"{path}: truncated name")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * count > len(data):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            params[name] = np.frombuffer(data, "<f4", count, pos).astype(T.DTYPE).reshape(shape)
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record") from exc
    return params


def model_from_params(params: Mapping[str, np.ndarray], image_size: int) -> ModelSpec:
    """Rebuild the reference model a checkpoint was trained with."""
    first = params["0.weight"]
    head = max(int(n.split(".")[0]) for n in params)
    return reference_model(first.shape[1], image_size, params[f"{head}.weight"].shape[0])
