"""Layer vocabulary: convolution, pooling, ReLU, dense, dropout, flatten,
softmax cross-entropy and the gradient reversal layer.

Layers are plain functions on :class:`~agnostic_net.tensor.Tensor`; a stack
of :class:`LayerSpec` entries plus a :class:`ParamStore` describes a
network.  Convolutions are stride 1 with same padding and pooling is 2x2
with stride 2, so every shape can be inferred without running data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor

LAYER_KINDS = ("conv", "maxpool", "relu", "dense", "dropout", "flatten", "grl")


# ---------------------------------------------------------------- operations


def _conv_same(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))  # N C H W k k
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))  # N H W F
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), windows


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-padded, stride-1 cross-correlation of NCHW input with FCkk filters."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected NCHW input and FCkk weights, got {x.shape} and {weight.shape}")
    f, c, kh, kw = weight.shape
    if x.shape[1] != c:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} do not match weight channels {c} "
                         f"(input {x.shape}, weight {weight.shape})")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {f} filters")
    out, windows = _conv_same(x.data, weight.data)
    out += bias.data[None, :, None, None]
    wd = weight.data

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            flipped = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx = _conv_same(g, np.ascontiguousarray(flipped))[0]
        if weight.requires_grad:
            gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return Tensor._result(out, (x, weight, bias), backward, "conv2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.  Odd extents are padded with -inf on the
    bottom/right; ties go to the first element in scan order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    h2, w2 = -(-h // 2), -(-w // 2)
    data = x.data
    if (h % 2) or (w % 2):
        data = np.pad(data, ((0, 0), (0, 0), (0, h % 2), (0, w % 2)), constant_values=-np.inf)
    blocks = data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        scattered = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(scattered, idx[..., None], g[..., None], axis=-1)
        full = scattered.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        return (np.ascontiguousarray(full[:, :, :h, :w]),)

    return Tensor._result(out, (x,), backward, "maxpool2d")


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return Tensor._result(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,), "relu")


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ W + b with x (N, in), W (in, out), b (out,)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not conform to weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not conform to weight {weight.shape}")
    return x @ weight + bias


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None,
            mask: np.ndarray | None = None) -> Tensor:
    """Inverted dropout.  ``mask`` (0/1 array) overrides sampling, which lets
    gradient checks freeze the pattern."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("dropout in train mode needs an rng or a fixed mask")
        mask = rng.random(x.shape) >= rate
    scale = np.where(mask, 1.0 / (1.0 - rate), 0.0)
    return Tensor._result(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


def grl(x: Tensor) -> Tensor:
    """Gradient reversal: identity forward, negated gradient backward."""
    return Tensor._result(x.data.copy(), (x,), lambda g: (-g,), "grl")


def grad_scale(x: Tensor, factor: float) -> Tensor:
    """Identity forward; multiplies the backward gradient by ``factor``."""
    return Tensor._result(x.data.copy(), (x,), lambda g: (g * factor,), "grad_scale")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(logits_shape, labels: np.ndarray) -> None:
    if len(logits_shape) != 2:
        raise ShapeError(f"cross-entropy expects N x L logits, got {logits_shape}")
    if labels.shape != (logits_shape[0],):
        raise ShapeError(f"cross-entropy: {labels.shape[0] if labels.ndim else 0} labels for "
                         f"{logits_shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= logits_shape[1]):
        raise ValueError(f"label out of range [0, {logits_shape[1]}): {labels.tolist()}")


def cross_entropy_per_example(logits, labels) -> np.ndarray:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(data.shape, labels)
    return -log_softmax(data)[np.arange(labels.size), labels]


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    _check_labels(logits.shape, labels)
    n = labels.size
    logp = log_softmax(logits.data)
    value = -logp[np.arange(n), labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return Tensor._result(np.asarray(value), (logits,), backward, "softmax_cross_entropy")


# ------------------------------------------------------------------- specs


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int | None = None  # conv filters / dense output width
    kernel: int | None = None
    rate: float | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "dense") and (self.size is None or self.size < 1):
            raise ValueError(f"{self.kind} needs a positive width")
        if self.kind == "conv" and (self.kernel is None or self.kernel < 1 or self.kernel % 2 == 0):
            raise ValueError("conv needs an odd positive kernel size")
        if self.kind == "dropout" and not (self.rate is not None and 0.0 <= self.rate < 1.0):
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "dense")

    def to_line(self) -> str:
        if self.kind == "conv":
            return f"conv {self.size} {self.kernel}"
        if self.kind == "dense":
            return f"dense {self.size}"
        if self.kind == "dropout":
            return f"dropout {self.rate!r}"
        return self.kind

    @classmethod
    def from_line(cls, line: str) -> LayerSpec:
        parts = line.split()
        kind, args = parts[0], parts[1:]
        expected = {"conv": 2, "dense": 1, "dropout": 1}.get(kind, 0)
        if len(args) != expected:
            raise ValueError(f"{kind!r} takes {expected} argument(s), got {len(args)}")
        if kind == "conv":
            return cls(kind, size=int(args[0]), kernel=int(args[1]))
        if kind == "dense":
            return cls(kind, size=int(args[0]))
        if kind == "dropout":
            return cls(kind, rate=float(args[0]))
        return cls(kind)

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-example output shape for a per-example input shape."""
        if self.kind == "conv":
            if len(shape) != 3:
                raise ShapeError(f"conv expects C x H x W input, got {shape}")
            return (self.size, shape[1], shape[2])
        if self.kind == "maxpool":
            if len(shape) != 3:
                raise ShapeError(f"maxpool expects C x H x W input, got {shape}")
            return (shape[0], -(-shape[1] // 2), -(-shape[2] // 2))
        if self.kind == "flatten":
            return (int(np.prod(shape)),)
        if self.kind == "dense":
            return (self.size,)
        return tuple(shape)

    def fan_in(self, shape: tuple[int, ...]) -> int:
        if self.kind == "conv":
            return shape[0] * self.kernel * self.kernel
        return int(np.prod(shape))


def parse_layers(lines: Iterable[str]) -> list[LayerSpec]:
    specs = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            specs.append(LayerSpec.from_line(line))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return specs


def infer_shapes(specs: Sequence[LayerSpec], in_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Shape after each layer.  Dense layers flatten their input implicitly."""
    shapes = []
    shape = tuple(in_shape)
    for spec in specs:
        if spec.kind == "dense" and len(shape) != 1:
            shape = (int(np.prod(shape)),)
        shape = spec.output_shape(shape)
        shapes.append(shape)
    return shapes


# -------------------------------------------------------------- parameters


class ParamStore:
    """Named parameter tensors, each with a zero-initialized momentum buffer."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.momentum: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.momentum[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def copy(self) -> ParamStore:
        out = ParamStore()
        for k, v in self.params.items():
            out.add(k, v.data.copy())
            out.momentum[k] = self.momentum[k].copy()
        return out


def init_params(specs: Sequence[LayerSpec], in_shape: tuple[int, ...], rng: np.random.Generator,
                prefix: str = "layers", store: ParamStore | None = None) -> ParamStore:
    """Weights ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)), zero biases."""
    store = ParamStore() if store is None else store
    shape = tuple(in_shape)
    for i, spec in enumerate(specs):
        if spec.kind == "dense" and len(shape) != 1:
            shape = (int(np.prod(shape)),)
        if spec.has_params:
            fan_in = spec.fan_in(shape)
            bound = np.sqrt(6.0 / fan_in)
            if spec.kind == "conv":
                wshape = (spec.size, shape[0], spec.kernel, spec.kernel)
            else:
                wshape = (shape[0], spec.size)
            store.add(f"{prefix}.{i}.weight", rng.uniform(-bound, bound, size=wshape))
            store.add(f"{prefix}.{i}.bias", np.zeros(spec.size))
        shape = spec.output_shape(shape)
    return store


def run_stack(specs: Sequence[LayerSpec], params: ParamStore, prefix: str, x: Tensor,
              train: bool = False, rng: np.random.Generator | None = None,
              masks: dict[int, np.ndarray] | None = None) -> Tensor:
    """Apply a layer stack.  ``masks`` maps layer index to a fixed dropout mask."""
    for i, spec in enumerate(specs):
        kind = spec.kind
        if kind == "conv":
            x = conv2d(x, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"])
        elif kind == "dense":
            if x.ndim != 2:
                x = flatten(x)
            x = dense(x, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"])
        elif kind == "maxpool":
            x = maxpool2d(x)
        elif kind == "relu":
            x = relu(x)
        elif kind == "flatten":
            x = flatten(x)
        elif kind == "dropout":
            x = dropout(x, spec.rate, train, rng, mask=None if masks is None else masks.get(i))
        elif kind == "grl":
            x = grl(x)
    return x
