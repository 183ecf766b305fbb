"""Small dense networks with exact reverse-mode gradients.

Layers are plain (weight, bias, activation) triples; no convolutions or
attention, just what the codec, denoiser, classifier, and the actor/critic
pair need. Gradients come back as a GradientSet holding one array per
parameter plus the gradient with respect to the input, so attack code and
chained trainers can reuse the same backward pass.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError, ShapeError
from .tensor import Rng, read_tensor, write_tensor

ACTIVATIONS = ("linear", "relu", "tanh")


@dataclass
class DenseLayer:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray    # [out]
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("dense layer needs a 2-D weight and 1-D bias")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ShapeError("bias length must match weight rows")


@dataclass
class DenseNet:
    layers: list[DenseLayer]

    def __post_init__(self):
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.weight.shape[1] != prev.weight.shape[0]:
                raise ShapeError("consecutive layer dims do not chain")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def parameters(self):
        for layer in self.layers:
            yield layer.weight
            yield layer.bias


def build_net(dims: Sequence[int], activations: Sequence[str], rng: Rng,
              dtype=np.float32) -> DenseNet:
    """Fresh network with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init.

    dims = [in, h1, ..., out]; one activation per layer.
    """
    if len(dims) < 2 or len(activations) != len(dims) - 1:
        raise ConfigError("need dims [in, ..., out] and one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(dims, dims[1:], activations):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
        b = rng.uniform(-bound, bound, size=fan_out).astype(dtype)
        layers.append(DenseLayer(w, b, act))
    return DenseNet(layers)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(z.dtype)
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    """Affine-then-activation through every layer; accepts [in] or [B, in]."""
    x = np.asarray(x)
    if x.shape[-1] != net.in_dim:
        raise ShapeError(f"input dim {x.shape[-1]} != net in dim {net.in_dim}")
    h = x
    for layer in net.layers:
        h = _activate(h @ layer.weight.T + layer.bias, layer.activation)
    return h


@dataclass
class GradientSet:
    """Per-parameter gradients mirroring a net, plus the input gradient."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    wrt_input: np.ndarray

    def add_(self, other: "GradientSet") -> None:
        for w, ow in zip(self.weights, other.weights):
            w += ow
        for b, ob in zip(self.biases, other.biases):
            b += ob

    def scale_(self, factor: float) -> None:
        for w in self.weights:
            w *= factor
        for b in self.biases:
            b *= factor

    def is_finite(self) -> bool:
        return all(np.isfinite(g).all() for g in self.weights + self.biases)


def zero_grads(net: DenseNet) -> GradientSet:
    return GradientSet(
        weights=[np.zeros_like(l.weight) for l in net.layers],
        biases=[np.zeros_like(l.bias) for l in net.layers],
        wrt_input=np.zeros(net.in_dim, dtype=net.layers[0].weight.dtype),
    )


def backprop(net: DenseNet, x: np.ndarray, grad_out: np.ndarray) -> GradientSet:
    """Exact gradients of a scalar loss whose output-gradient is grad_out.

    Runs the forward pass internally to cache pre-activations. Gradients
    are summed over the batch dimension, so any 1/B normalization belongs
    in grad_out.
    """
    x = np.asarray(x)
    grad_out = np.asarray(grad_out)
    squeeze = x.ndim == 1
    h = x.reshape(1, -1) if squeeze else x
    g = grad_out.reshape(1, -1) if squeeze else grad_out
    if h.shape[-1] != net.in_dim:
        raise ShapeError(f"input dim {h.shape[-1]} != net in dim {net.in_dim}")
    if g.shape != (h.shape[0], net.out_dim):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match output")

    inputs, pre_acts = [], []
    for layer in net.layers:
        inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        pre_acts.append(z)
        h = _activate(z, layer.activation)

    grad_w, grad_b = [], []
    for layer, h_in, z in zip(reversed(net.layers), reversed(inputs), reversed(pre_acts)):
        gz = g * _activate_grad(z, layer.activation)
        grad_w.append(gz.T @ h_in)
        grad_b.append(gz.sum(axis=0))
        g = gz @ layer.weight
    grad_w.reverse()
    grad_b.reverse()
    return GradientSet(grad_w, grad_b, g[0] if squeeze else g)


@dataclass
class OptimizerState:
    """SGD or Adam state; moment arrays stay shape-congruent with the net."""

    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning rate must be positive")


def make_optimizer(net: DenseNet, kind: str = "adam",
                   learning_rate: float = 1e-3) -> OptimizerState:
    opt = OptimizerState(kind=kind, learning_rate=learning_rate)
    if kind == "adam":
        opt.m = [np.zeros_like(p) for p in net.parameters()]
        opt.v = [np.zeros_like(p) for p in net.parameters()]
    return opt


def apply_update(net: DenseNet, grads: GradientSet, opt: OptimizerState) -> None:
    """One in-place optimizer step; raises DivergenceError on non-finite grads."""
    if not grads.is_finite():
        raise DivergenceError("non-finite gradient; training diverged")
    flat = []
    for gw, gb in zip(grads.weights, grads.biases):
        flat.extend((gw, gb))
    params = list(net.parameters())
    if opt.kind == "sgd":
        for p, g in zip(params, flat):
            p -= opt.learning_rate * g
        return
    opt.step += 1
    b1c = 1.0 - opt.beta1 ** opt.step
    b2c = 1.0 - opt.beta2 ** opt.step
    for p, g, m, v in zip(params, flat, opt.m, opt.v):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= opt.learning_rate * (m / b1c) / (np.sqrt(v / b2c) + opt.eps)


def clone_net(net: DenseNet) -> DenseNet:
    return DenseNet([DenseLayer(l.weight.copy(), l.bias.copy(), l.activation)
                     for l in net.layers])


# ---------------------------------------------------------------------------
# DNET checkpoints: magic, version, layer count, per-layer dims + activation
# tag, then weight/bias pairs as DTNS blocks.

_DNET_MAGIC = b"DNET"
_DNET_VERSION = 1
_ACT_TAG = {"linear": 0, "relu": 1, "tanh": 2}
_TAG_ACT = {v: k for k, v in _ACT_TAG.items()}


def write_net(stream: BinaryIO, net: DenseNet) -> None:
    stream.write(_DNET_MAGIC)
    stream.write(struct.pack("<BB", _DNET_VERSION, len(net.layers)))
    for layer in net.layers:
        out_dim, in_dim = layer.weight.shape
        stream.write(struct.pack("<IIB", in_dim, out_dim, _ACT_TAG[layer.activation]))
    for layer in net.layers:
        write_tensor(stream, layer.weight)
        write_tensor(stream, layer.bias)


def read_net(stream: BinaryIO) -> DenseNet:
    head = stream.read(6)
    if len(head) < 6 or head[:4] != _DNET_MAGIC:
        raise ShapeError("not a DNET stream")
    if head[4] != _DNET_VERSION:
        raise ShapeError(f"unsupported DNET version {head[4]}")
    n_layers = head[5]
    specs = []
    for _ in range(n_layers):
        in_dim, out_dim, tag = struct.unpack("<IIB", stream.read(9))
        if tag not in _TAG_ACT:
            raise ShapeError(f"unknown activation tag {tag}")
        specs.append((in_dim, out_dim, _TAG_ACT[tag]))
    layers = []
    for in_dim, out_dim, act in specs:
        w = read_tensor(stream)
        b = read_tensor(stream)
        if w.shape != (out_dim, in_dim) or b.shape != (out_dim,):
            raise ShapeError("DNET parameter block does not match its header")
        layers.append(DenseLayer(w, b, act))
    return DenseNet(layers)


def save_net(path, net: DenseNet) -> None:
    with open(path, "wb") as f:
        write_net(f, net)


def load_net(path) -> DenseNet:
    with open(path, "rb") as f:
        return read_net(f)
