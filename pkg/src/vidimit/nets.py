"""Dense-network core: forward/backward passes, losses, SGD, checkpoints.

Everything is float64 numpy. Networks are value types: training code owns
its copy and mutation happens only through returned new parameter arrays,
so snapshots handed to other workers can never be half-updated.

Batched convention: inputs may be (d,) or (B, d); backward sums parameter
gradients over the batch, so per-sample scaling (weights, 1/B) is applied
by the caller to the output gradient rows.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

RELU = "relu"
IDENTITY = "identity"
_ACT_CODES = {IDENTITY: 0, RELU: 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


@dataclass
class Layer:
    W: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)
    activation: str

    def __post_init__(self):
        if self.activation not in _ACT_CODES:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ValueError("layer shape mismatch")


@dataclass
class DenseNet:
    layers: list
    seed: int = 0

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].W.shape[1]

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers], self.seed)


@dataclass
class GradientSet:
    """Per-layer (dW, db) pairs, shape-congruent with the owning net."""

    layers: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.layers)


def make_dense_net(dims, activations, seed: int) -> DenseNet:
    """He-uniform init for relu layers; identity-activated layers start at zero.

    Zero-initialized output layers give untrained heads exactly constant
    outputs (uniform softmax, zero policy mean), which downstream contracts
    rely on.
    """
    if len(dims) != len(activations) + 1:
        raise ValueError("need one activation per layer")
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFF, 0x11]))
    layers = []
    for i, act in enumerate(activations):
        fan_in, fan_out = dims[i], dims[i + 1]
        if act == RELU:
            limit = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            b = np.zeros(fan_out)
        else:
            w = np.zeros((fan_in, fan_out))
            b = np.zeros(fan_out)
        layers.append(Layer(w, b, act))
    return DenseNet(layers, seed)


def _apply_act(z: np.ndarray, act: str) -> np.ndarray:
    return np.maximum(z, 0.0) if act == RELU else z


def forward(net: DenseNet, x) -> tuple:
    """Affine + activation chain; returns (output, caches for backward)."""
    a = np.asarray(x, dtype=np.float64)
    squeeze = a.ndim == 1
    if squeeze:
        a = a[None, :]
    if a.shape[1] != net.input_dim:
        raise ValueError(f"input dim {a.shape[1]} != net input dim {net.input_dim}")
    inputs, zs = [], []
    for layer in net.layers:
        inputs.append(a)
        z = a @ layer.W + layer.b
        zs.append(z)
        a = _apply_act(z, layer.activation)
    out = a[0] if squeeze else a
    return out, (inputs, zs, squeeze)


def backward(net: DenseNet, caches, output_grad, with_input_grad: bool = False):
    """Exact reverse-mode gradients, summed over the batch dimension."""
    inputs, zs, squeeze = caches
    g = np.asarray(output_grad, dtype=np.float64)
    if squeeze:
        g = g[None, :]
    if g.shape != zs[-1].shape:
        raise ValueError("output gradient shape mismatch")
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        dz = g * (zs[i] > 0.0) if layer.activation == RELU else g
        grads[i] = (inputs[i].T @ dz, dz.sum(axis=0))
        g = dz @ layer.W.T
    gset = GradientSet(grads)
    if with_input_grad:
        return gset, (g[0] if squeeze else g)
    return gset


def forward_jvp(net: DenseNet, x, tangent: GradientSet) -> tuple:
    """Forward pass plus directional derivative of outputs along `tangent`."""
    a = np.asarray(x, dtype=np.float64)
    squeeze = a.ndim == 1
    if squeeze:
        a = a[None, :]
    da = np.zeros_like(a)
    for layer, (dW, db) in zip(net.layers, tangent):
        z = a @ layer.W + layer.b
        dz = a @ dW + da @ layer.W + db
        if layer.activation == RELU:
            mask = z > 0.0
            a, da = np.maximum(z, 0.0), dz * mask
        else:
            a, da = z, dz
    if squeeze:
        return a[0], da[0]
    return a, da


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label: int, weight: float = 1.0) -> tuple:
    """Weighted CE for one sample; label is the 1-based rating."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValueError("softmax_cross_entropy takes a single logit vector")
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    if not (1 <= int(label) <= logits.shape[0]):
        raise ValueError(f"label {label} out of range 1..{logits.shape[0]}")
    idx = int(label) - 1
    z = logits - logits.max()
    logsumexp = np.log(np.exp(z).sum())
    loss = weight * (logsumexp - z[idx])
    grad = softmax(logits) * weight
    grad[idx] -= weight
    return float(loss), grad


def batched_cross_entropy(logits: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> tuple:
    """Per-sample losses and logit gradients; caller applies 1/B scaling."""
    p = softmax(logits)
    idx = labels.astype(int) - 1
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    losses = weights * (logsumexp - z[np.arange(len(idx)), idx])
    grads = p * weights[:, None]
    grads[np.arange(len(idx)), idx] -= weights
    return losses, grads


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 1e-2
    batch_size: int = 32

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def sgd_step(net: DenseNet, grads: GradientSet, config: SgdConfig) -> DenseNet:
    """Plain SGD: theta <- theta - lr * g; rejects non-finite gradients."""
    for dW, db in grads:
        if not (np.all(np.isfinite(dW)) and np.all(np.isfinite(db))):
            raise ValueError("non-finite gradients: update rejected")
    lr = config.learning_rate
    layers = [
        Layer(l.W - lr * dW, l.b - lr * db, l.activation)
        for l, (dW, db) in zip(net.layers, grads)
    ]
    return DenseNet(layers, net.seed)


def zeros_like_grads(net: DenseNet) -> GradientSet:
    return GradientSet([(np.zeros_like(l.W), np.zeros_like(l.b)) for l in net.layers])


def add_grads(a: GradientSet, b: GradientSet, scale: float = 1.0) -> GradientSet:
    return GradientSet([(ga[0] + scale * gb[0], ga[1] + scale * gb[1]) for ga, gb in zip(a, b)])


def flatten_grads(grads: GradientSet) -> np.ndarray:
    return np.concatenate([np.concatenate([dW.ravel(), db.ravel()]) for dW, db in grads])


def flatten_params(net: DenseNet) -> np.ndarray:
    return np.concatenate([np.concatenate([l.W.ravel(), l.b.ravel()]) for l in net.layers])


def unflatten_like(net: DenseNet, vec: np.ndarray) -> GradientSet:
    out = []
    off = 0
    for l in net.layers:
        nw, nb = l.W.size, l.b.size
        out.append((vec[off : off + nw].reshape(l.W.shape), vec[off + nw : off + nw + nb].copy()))
        off += nw + nb
    if off != vec.size:
        raise ValueError("vector length does not match parameter count")
    return GradientSet(out)


def set_params(net: DenseNet, vec: np.ndarray) -> DenseNet:
    pieces = unflatten_like(net, vec)
    return DenseNet(
        [Layer(w.copy(), b.copy(), l.activation) for l, (w, b) in zip(net.layers, pieces)],
        net.seed,
    )


def param_count(net: DenseNet) -> int:
    return sum(l.W.size + l.b.size for l in net.layers)


_MAGIC = b"VNN1"


class NetFormatError(ValueError):
    pass


def save_net(net: DenseNet, path: str) -> None:
    """Checkpoint: magic, u32 layer count, per layer u32 rows/cols/act then f64 W,b."""
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<I", len(net.layers))
    for l in net.layers:
        rows, cols = l.W.shape
        blob += struct.pack("<III", rows, cols, _ACT_CODES[l.activation])
        blob += l.W.astype("<f8").tobytes()
        blob += l.b.astype("<f8").tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


def load_net(path: str) -> DenseNet:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise NetFormatError("bad magic: not a VNN1 file")
    if len(data) < 8:
        raise NetFormatError("truncated header")
    (n_layers,) = struct.unpack_from("<I", data, 4)
    off = 8
    layers = []
    for i in range(n_layers):
        if len(data) < off + 12:
            raise NetFormatError(f"truncated layer {i} header")
        rows, cols, code = struct.unpack_from("<III", data, off)
        off += 12
        if code not in _ACT_NAMES:
            raise NetFormatError(f"unknown activation code {code}")
        nbytes = 8 * (rows * cols + cols)
        if len(data) < off + nbytes:
            raise NetFormatError(f"truncated layer {i} parameters")
        W = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).copy()
        off += 8 * rows * cols
        b = np.frombuffer(data, dtype="<f8", count=cols, offset=off).copy()
        off += 8 * cols
        layers.append(Layer(W, b, _ACT_NAMES[code]))
    if off != len(data):
        raise NetFormatError("trailing bytes after declared layers")
    return DenseNet(layers)
