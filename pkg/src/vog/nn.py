"""Small differentiable networks in float64 numpy.

Supported layers are ``dense``, ``conv`` (valid padding, stride 1), ``relu``,
``tanh`` and ``flatten``.  Every function here is pure: parameters are never mutated
in place, so the same :class:`Params` can be shared between threads.

Batched entry points (``*_batch``) take inputs of shape ``(n, c, h, w)``;
the single-example functions are thin wrappers around them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_ch: int = 0
    out_ch: int = 0
    k: int = 0

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "dense":
            return {"kind": "dense", "in": self.in_features, "out": self.out_features}
        if self.kind == "conv":
            return {"kind": "conv", "in_ch": self.in_ch, "out_ch": self.out_ch, "k": self.k}
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Layer":
        kind = d["kind"]
        if kind == "dense":
            return dense(int(d["in"]), int(d["out"]))
        if kind == "conv":
            return conv(int(d["in_ch"]), int(d["out_ch"]), int(d["k"]))
        if kind in ("relu", "tanh", "flatten"):
            return cls(kind)
        raise ValueError(f"unknown layer kind {kind!r}")

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv")


def dense(n_in: int, n_out: int) -> Layer:
    return Layer("dense", in_features=n_in, out_features=n_out)


def conv(in_ch: int, out_ch: int, k: int) -> Layer:
    return Layer("conv", in_ch=in_ch, out_ch=out_ch, k=k)


RELU = Layer("relu")
TANH = Layer("tanh")
FLATTEN = Layer("flatten")


@dataclass(frozen=True)
class ModelSpec:
    """Layer stack plus input shape ``(c, h, w)``; the last layer emits the class scores."""

    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int]
    num_classes: int
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ShapeError(f"input_shape must be (c, h, w) with positive extents, got {self.input_shape}")
        shapes = [self.input_shape]
        cur: tuple[int, ...] = self.input_shape
        for j, layer in enumerate(self.layers):
            if layer.kind == "dense":
                if len(cur) != 1 or cur[0] != layer.in_features:
                    raise ShapeError(f"layer {j} (dense) expects ({layer.in_features},), got {cur}")
                cur = (layer.out_features,)
            elif layer.kind == "conv":
                if len(cur) != 3 or cur[0] != layer.in_ch:
                    raise ShapeError(f"layer {j} (conv) expects {layer.in_ch} channels, got {cur}")
                h, w = cur[1] - layer.k + 1, cur[2] - layer.k + 1
                if h < 1 or w < 1:
                    raise ShapeError(f"layer {j} (conv) kernel {layer.k} larger than input {cur[1:]}")
                cur = (layer.out_ch, h, w)
            elif layer.kind == "flatten":
                cur = (int(np.prod(cur)),)
            elif layer.kind not in ("relu", "tanh"):
                raise ValueError(f"unknown layer kind {layer.kind!r}")
            shapes.append(cur)
        if cur != (self.num_classes,):
            raise ShapeError(f"final layer output {cur} does not match num_classes={self.num_classes}")
        object.__setattr__(self, "shapes", tuple(shapes))

    def to_dict(self) -> dict[str, Any]:
        return {
            "layers": [layer.to_dict() for layer in self.layers],
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelSpec":
        return cls(
            tuple(Layer.from_dict(x) for x in d["layers"]),
            tuple(d["input_shape"]),
            int(d["num_classes"]),
        )


def mlp(input_shape: Sequence[int], hidden: Sequence[int], num_classes: int,
        activation: str = "relu") -> ModelSpec:
    act = Layer(activation)
    n_in = int(np.prod(input_shape))
    layers: list[Layer] = [FLATTEN]
    for h in hidden:
        layers += [dense(n_in, h), act]
        n_in = h
    layers.append(dense(n_in, num_classes))
    return ModelSpec(tuple(layers), tuple(input_shape), num_classes)


def convnet(
    input_shape: Sequence[int], channels: Sequence[int], k: int, hidden: Sequence[int], num_classes: int
) -> ModelSpec:
    c, h, w = input_shape
    layers: list[Layer] = []
    for ch in channels:
        layers += [conv(c, ch, k), RELU]
        c, h, w = ch, h - k + 1, w - k + 1
    layers.append(FLATTEN)
    n_in = c * h * w
    for hd in hidden:
        layers += [dense(n_in, hd), RELU]
        n_in = hd
    layers.append(dense(n_in, num_classes))
    return ModelSpec(tuple(layers), tuple(input_shape), num_classes)


@dataclass(frozen=True)
class Params:
    """Weights and biases for every parametric layer, in layer order.

    ``tensors`` is the flat list ``[W0, b0, W1, b1, ...]``.
    """

    spec: ModelSpec
    tensors: tuple[np.ndarray, ...]
    rng_seed: int = 0

    def __post_init__(self) -> None:
        expected = param_shapes(self.spec)
        got = [t.shape for t in self.tensors]
        if got != expected:
            raise ShapeError(f"parameter shapes {got} do not match spec {expected}")

    def map(self, fn) -> "Params":
        return Params(self.spec, tuple(fn(t) for t in self.tensors), self.rng_seed)

    def equal(self, other: "Params") -> bool:
        return len(self.tensors) == len(other.tensors) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.tensors, other.tensors)
        )


def param_shapes(spec: ModelSpec) -> list[tuple[int, ...]]:
    out: list[tuple[int, ...]] = []
    for layer in spec.layers:
        if layer.kind == "dense":
            out += [(layer.out_features, layer.in_features), (layer.out_features,)]
        elif layer.kind == "conv":
            out += [(layer.out_ch, layer.in_ch, layer.k, layer.k), (layer.out_ch,)]
    return out


def init_params(spec: ModelSpec, seed: int) -> Params:
    """He-style uniform fan-in initialization; biases start at zero."""
    rng = np.random.default_rng(seed)
    tensors: list[np.ndarray] = []
    for shape in param_shapes(spec)[0::2]:
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        tensors.append(rng.uniform(-bound, bound, size=shape))
        tensors.append(np.zeros(shape[0]))
    return Params(spec, tuple(tensors), seed)


def _check_batch(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != spec.input_shape:
        raise ShapeError(f"expected input of shape (n, {', '.join(map(str, spec.input_shape))}), got {x.shape}")
    return x


def _check_single(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != spec.input_shape:
        raise ShapeError(f"expected input of shape {spec.input_shape}, got {x.shape}")
    return x[None]


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    k = w.shape[-1]
    patches = sliding_window_view(x, (k, k), axis=(2, 3))  # (n, c, h', w', k, k)
    return np.einsum("nchwij,ocij->nohw", patches, w, optimize=True) + b[None, :, None, None]


def _conv_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray, need_dx: bool):
    k = w.shape[-1]
    patches = sliding_window_view(x, (k, k), axis=(2, 3))
    dw = np.einsum("nohw,nchwij->ocij", dy, patches, optimize=True)
    db = dy.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        pad = np.pad(dy, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        dpatches = sliding_window_view(pad, (k, k), axis=(2, 3))  # (n, o, h, w, k, k)
        dx = np.einsum("nohwij,ocij->nchw", dpatches, w[:, :, ::-1, ::-1], optimize=True)
    return dw, db, dx


def _forward_cached(params: Params, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    it = iter(params.tensors)
    for layer in params.spec.layers:
        h = acts[-1]
        if layer.kind == "dense":
            w, b = next(it), next(it)
            h = h @ w.T + b
        elif layer.kind == "conv":
            w, b = next(it), next(it)
            h = _conv_forward(h, w, b)
        elif layer.kind == "relu":
            h = np.maximum(h, 0.0)
        elif layer.kind == "tanh":
            h = np.tanh(h)
        else:
            h = h.reshape(h.shape[0], -1)
        acts.append(h)
    return acts


def _backward(params: Params, acts: list[np.ndarray], d_out: np.ndarray, need_params: bool, need_input: bool):
    """Backpropagate ``d_out`` (gradient w.r.t. the class scores) through the cached pass."""
    spec = params.spec
    grads: list[np.ndarray | None] = [None] * len(params.tensors)
    pi = len(params.tensors)
    g = d_out
    for j in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[j]
        x_in = acts[j]
        last = j == 0
        if layer.kind == "dense":
            pi -= 2
            w = params.tensors[pi]
            if need_params:
                grads[pi] = g.T @ x_in
                grads[pi + 1] = g.sum(axis=0)
            if not last or need_input:
                g = g @ w
        elif layer.kind == "conv":
            pi -= 2
            w = params.tensors[pi]
            dw, db, dx = _conv_backward(x_in, w, g, need_dx=not last or need_input)
            if need_params:
                grads[pi], grads[pi + 1] = dw, db
            g = dx
        elif layer.kind == "relu":
            # subgradient at 0 is 0
            g = g * (x_in > 0.0)
        elif layer.kind == "tanh":
            y = acts[j + 1]
            g = g * (1.0 - y * y)
        else:
            g = g.reshape(x_in.shape)
    return grads, g


def forward_batch(params: Params, x: np.ndarray) -> np.ndarray:
    """Class scores for a batch, shape ``(n, C)``."""
    return _forward_cached(params, _check_batch(params.spec, x))[-1]


def forward(params: Params, x: np.ndarray) -> np.ndarray:
    return _forward_cached(params, _check_single(params.spec, x))[-1][0]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_classes(spec: ModelSpec, y: np.ndarray, what: str) -> np.ndarray:
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= spec.num_classes):
        bad = y[(y < 0) | (y >= spec.num_classes)][0]
        raise IndexError(f"{what} {int(bad)} out of range for {spec.num_classes} classes")
    return y.astype(np.int64)


def loss_and_grads_batch(params: Params, x: np.ndarray, y: np.ndarray) -> tuple[float, Params]:
    """Mean softmax cross-entropy over the batch and its parameter gradients."""
    x = _check_batch(params.spec, x)
    y = _check_classes(params.spec, y, "label")
    acts = _forward_cached(params, x)
    n = x.shape[0]
    logp = log_softmax(acts[-1])
    loss = -float(logp[np.arange(n), y].mean())
    d_out = np.exp(logp)
    d_out[np.arange(n), y] -= 1.0
    d_out /= n
    grads, _ = _backward(params, acts, d_out, need_params=True, need_input=False)
    return loss, Params(params.spec, tuple(grads), params.rng_seed)


def softmax_xent_grad(params: Params, x: np.ndarray, y: int) -> tuple[float, Params]:
    return loss_and_grads_batch(params, _check_single(params.spec, x), np.array([y]))


def input_gradients_batch(params: Params, x: np.ndarray, p: np.ndarray) -> np.ndarray:
    """d(score[p_i]) / d(x_i) for each example; same shape as ``x``.

    The score is the raw pre-softmax activation, not the loss.
    """
    x = _check_batch(params.spec, x)
    p = _check_classes(params.spec, np.broadcast_to(p, (x.shape[0],)), "class index")
    acts = _forward_cached(params, x)
    d_out = np.zeros_like(acts[-1])
    d_out[np.arange(x.shape[0]), p] = 1.0
    _, gx = _backward(params, acts, d_out, need_params=False, need_input=True)
    return gx


def input_gradient(params: Params, x: np.ndarray, p: int) -> np.ndarray:
    return input_gradients_batch(params, _check_single(params.spec, x), np.array([p]))[0]


def predict_batch(params: Params, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logits = forward_batch(params, x)
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return np.argmax(logits, axis=1), softmax(logits)


def predict(params: Params, x: np.ndarray) -> tuple[int, np.ndarray]:
    logits = forward(params, x)
    return int(np.argmax(logits)), softmax(logits)
