"""Minimal layered networks with hand-written backward passes and SGD.

Activations are NHWC numpy arrays, convolutions use stride 1 and same
padding. A network is a flat sequence of LayerSpec; composite `mbconv`
blocks (pointwise expand -> depthwise -> pointwise project) and any layer
flagged `residual` add their input to their output.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError, TrainingError, UsageError
from .quantize import linear_quantize

CONV_KINDS = ("conv2d", "depthwise_conv2d", "pointwise_conv2d")
PARAMETRIC_KINDS = ("dense",) + CONV_KINDS + ("mbconv",)
SHAPELESS_KINDS = ("relu", "identity", "zero", "global_pool")
KINDS = PARAMETRIC_KINDS + SHAPELESS_KINDS


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    kernel_size: int = 1
    spatial_in: tuple = (1, 1)
    expansion_ratio: int = 1
    residual: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "spatial_in", tuple(int(s) for s in self.spatial_in))
        if self.in_channels < 1 or self.out_channels < 1:
            raise InputError(f"{self.kind}: channel counts must be positive")
        if len(self.spatial_in) != 2 or min(self.spatial_in) < 1:
            raise InputError(f"{self.kind}: spatial_in must be a pair of positive ints")
        if self.kind in ("conv2d", "depthwise_conv2d", "mbconv"):
            if self.kernel_size < 1 or self.kernel_size % 2 == 0:
                raise InputError(f"{self.kind}: kernel_size must be odd and positive")
        if self.kind == "pointwise_conv2d" and self.kernel_size != 1:
            raise InputError("pointwise_conv2d has kernel_size 1")
        if self.kind == "dense" and self.spatial_in != (1, 1):
            raise InputError("dense layers take flat input (spatial_in must be (1, 1))")
        same_width = self.kind in ("depthwise_conv2d", "mbconv") + SHAPELESS_KINDS
        if (same_width or self.residual) and self.in_channels != self.out_channels:
            raise InputError(f"{self.kind}: in_channels must equal out_channels")
        if self.expansion_ratio < 1:
            raise InputError("expansion_ratio must be positive")

    @property
    def parametric(self):
        return self.kind in PARAMETRIC_KINDS

    @property
    def spatial_out(self):
        return (1, 1) if self.kind == "global_pool" else self.spatial_in

    @property
    def flat_out(self):
        return self.kind in ("dense", "global_pool")

    @property
    def hidden_channels(self):
        return self.in_channels * self.expansion_ratio


@dataclass(frozen=True)
class NetSpec:
    layers: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise InputError("network has no layers")
        if not any(l.parametric for l in self.layers):
            raise InputError("network needs at least one parametric layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_channels != b.in_channels:
                raise InputError(f"layer {i + 1} expects {b.in_channels} channels, gets {a.out_channels}")
            if a.spatial_out != b.spatial_in:
                raise InputError(f"layer {i + 1} expects spatial {b.spatial_in}, gets {a.spatial_out}")
            if a.flat_out and b.kind not in ("dense", "relu", "identity", "zero"):
                raise InputError(f"layer {i + 1} ({b.kind}) cannot follow flat output")
        if self.layers[-1].out_channels != self.num_classes:
            raise InputError("last layer width must equal num_classes")

    @property
    def input_shape(self):
        first = self.layers[0]
        if first.kind == "dense":
            return (first.in_channels,)
        return first.spatial_in + (first.in_channels,)

    def parametric_indices(self):
        return [i for i, l in enumerate(self.layers) if l.parametric]


def count_macs(layer):
    """Multiply-accumulates of one forward pass for a single input (batch 1)."""
    h, w = layer.spatial_out
    k2 = layer.kernel_size ** 2
    if layer.kind == "dense":
        return layer.in_channels * layer.out_channels
    if layer.kind == "conv2d":
        return k2 * layer.in_channels * layer.out_channels * h * w
    if layer.kind == "depthwise_conv2d":
        return k2 * layer.in_channels * h * w
    if layer.kind == "pointwise_conv2d":
        return layer.in_channels * layer.out_channels * h * w
    if layer.kind == "mbconv":
        return sum(count_macs(p) for p in expand_block(layer))
    return 0


def net_macs(net):
    return sum(count_macs(l) for l in net.layers)


def weight_count(layer):
    k2 = layer.kernel_size ** 2
    if layer.kind in ("dense", "pointwise_conv2d"):
        return layer.in_channels * layer.out_channels
    if layer.kind == "conv2d":
        return k2 * layer.in_channels * layer.out_channels
    if layer.kind == "depthwise_conv2d":
        return k2 * layer.in_channels
    if layer.kind == "mbconv":
        return sum(weight_count(p) for p in expand_block(layer))
    return 0


def activation_counts(layer):
    """(input activations, output activations) of one forward pass."""
    h, w = layer.spatial_in
    ho, wo = layer.spatial_out
    return layer.in_channels * h * w, layer.out_channels * ho * wo


def expand_block(layer):
    """Primitive kernels that make up `layer` (itself unless it is an mbconv)."""
    if layer.kind != "mbconv":
        return [layer]
    c, e, hw = layer.in_channels, layer.hidden_channels, layer.spatial_in
    return [
        LayerSpec("pointwise_conv2d", c, e, spatial_in=hw),
        LayerSpec("depthwise_conv2d", e, e, kernel_size=layer.kernel_size, spatial_in=hw),
        LayerSpec("pointwise_conv2d", e, c, spatial_in=hw),
    ]


# -- parameters ---------------------------------------------------------------


class Params(dict):
    """Layer index -> {name: array}. `version` changes on every in-place update."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.version = 0

    def copy(self):
        out = Params({i: {k: v.copy() for k, v in d.items()} for i, d in self.items()})
        return out

    def bump(self):
        self.version += 1

    def flat(self):
        return [(i, k, v) for i, d in sorted(self.items()) for k, v in sorted(d.items())]


RESIDUAL_INIT_SCALE = 0.1


def _glorot(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_layer(layer, rng):
    """Parameter dict for one layer (empty for non-parametric kinds)."""
    k, cin, cout = layer.kernel_size, layer.in_channels, layer.out_channels
    if layer.kind in ("dense", "pointwise_conv2d"):
        return {"W": _glorot(rng, (cin, cout), cin, cout), "b": np.zeros(cout)}
    if layer.kind == "conv2d":
        return {"W": _glorot(rng, (k, k, cin, cout), k * k * cin, k * k * cout), "b": np.zeros(cout)}
    if layer.kind == "depthwise_conv2d":
        return {"W": _glorot(rng, (k, k, cin), k * k, k * k), "b": np.zeros(cin)}
    if layer.kind == "mbconv":
        expand, dw, project = expand_block(layer)
        out = {}
        for tag, sub in (("1", expand), ("d", dw), ("2", project)):
            p = init_layer(sub, rng)
            out["W" + tag], out["b" + tag] = p["W"], p["b"]
        if layer.residual:
            # Start residual branches near the identity so that deep stacks
            # without normalization stay trainable.
            out["W2"] *= RESIDUAL_INIT_SCALE
        return out
    return {}


def init_params(net, rng):
    """Glorot-uniform weights, zero biases. `rng` is a Generator or an int seed."""
    rng = np.random.default_rng(rng)
    return Params({i: init_layer(l, rng) for i, l in enumerate(net.layers) if l.parametric})


# -- primitive kernels --------------------------------------------------------


def _windows(x, k):
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    return sliding_window_view(xp, (k, k), axis=(1, 2))  # (B, H, W, C, k, k)


def conv2d_forward(x, W, b):
    win = _windows(x, W.shape[0])
    return np.tensordot(win, W, axes=([3, 4, 5], [2, 0, 1])) + b, win


def conv2d_backward(win, W, dy):
    dW = np.tensordot(win, dy, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    dx = np.tensordot(_windows(dy, W.shape[0]), W[::-1, ::-1], axes=([3, 4, 5], [3, 0, 1]))
    return dx, dW, dy.sum(axis=(0, 1, 2))


def depthwise_forward(x, W, b):
    win = _windows(x, W.shape[0])
    return np.einsum("bhwcij,ijc->bhwc", win, W, optimize=True) + b, win


def depthwise_backward(win, W, dy):
    dW = np.einsum("bhwcij,bhwc->ijc", win, dy, optimize=True)
    dx = np.einsum("bhwcij,ijc->bhwc", _windows(dy, W.shape[0]), W[::-1, ::-1], optimize=True)
    return dx, dW, dy.reshape(-1, dy.shape[-1]).sum(axis=0)


def matmul_forward(x, W, b):
    return x @ W + b, x


def matmul_backward(x, W, dy):
    c_in, c_out = W.shape
    dW = x.reshape(-1, c_in).T @ dy.reshape(-1, c_out)
    return dy @ W.T, dW, dy.reshape(-1, c_out).sum(axis=0)


_KERNELS = {
    "conv2d": (conv2d_forward, conv2d_backward),
    "depthwise_conv2d": (depthwise_forward, depthwise_backward),
    "pointwise_conv2d": (matmul_forward, matmul_backward),
    "dense": (matmul_forward, matmul_backward),
}


# -- layer forward/backward ---------------------------------------------------


def _maybe_quant(a, bits):
    return a if bits is None else linear_quantize(a, bits)


def layer_forward(layer, p, x, bits=None):
    """Apply one layer. `bits` = (w_bits, a_bits) enables fake quantization
    of the weights and of the layer input; gradients pass straight through."""
    w_bits, a_bits = bits if bits is not None else (None, None)
    xin = _maybe_quant(x, a_bits)
    kind = layer.kind
    if kind in _KERNELS:
        W = _maybe_quant(p["W"], w_bits)
        y, cache = _KERNELS[kind][0](xin, W, p["b"])
        cache = (cache, W)
    elif kind == "mbconv":
        W1, Wd, W2 = (_maybe_quant(p[k], w_bits) for k in ("W1", "Wd", "W2"))
        h1, c1 = matmul_forward(xin, W1, p["b1"])
        r1 = np.maximum(h1, 0.0)
        h2, c2 = depthwise_forward(r1, Wd, p["bd"])
        r2 = np.maximum(h2, 0.0)
        y, c3 = matmul_forward(r2, W2, p["b2"])
        cache = (c1, h1, c2, h2, c3, (W1, Wd, W2))
    elif kind == "relu":
        y, cache = np.maximum(xin, 0.0), xin > 0
    elif kind == "identity":
        y, cache = xin, None
    elif kind == "zero":
        y, cache = np.zeros_like(xin), None
    elif kind == "global_pool":
        y, cache = xin.mean(axis=(1, 2)), xin.shape
    else:  # pragma: no cover - guarded by LayerSpec
        raise InputError(kind)
    if layer.residual:
        y = y + x
    return y, cache


def layer_backward(layer, p, cache, dy):
    """Return (dx, grads) for one layer given its forward cache."""
    kind = layer.kind
    grads = {}
    if kind in _KERNELS:
        inner, W = cache
        dx, grads["W"], grads["b"] = _KERNELS[kind][1](inner, W, dy)
    elif kind == "mbconv":
        c1, h1, c2, h2, c3, (W1, Wd, W2) = cache
        d, grads["W2"], grads["b2"] = matmul_backward(c3, W2, dy)
        d = d * (h2 > 0)
        d, grads["Wd"], grads["bd"] = depthwise_backward(c2, Wd, d)
        d = d * (h1 > 0)
        dx, grads["W1"], grads["b1"] = matmul_backward(c1, W1, d)
    elif kind == "relu":
        dx = dy * cache
    elif kind == "identity":
        dx = dy
    elif kind == "zero":
        dx = np.zeros_like(dy)
    elif kind == "global_pool":
        b, h, w, c = cache
        dx = np.broadcast_to(dy[:, None, None, :] / (h * w), cache).copy()
    if layer.residual:
        dx = dx + dy
    return dx, grads


# -- network forward/backward -------------------------------------------------


@dataclass
class Trace:
    """Per-layer caches from one forward pass, consumed by `backward`."""

    net: NetSpec
    params: Params
    params_version: int
    caches: list
    logits_shape: tuple
    consumed: bool = field(default=False)


def forward(net, params, x, quant=None):
    """Run `net` on a batch. Returns (logits, trace).

    `quant` optionally maps layer index -> (w_bits, a_bits) for
    quantization-aware evaluation/training.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 1 or tuple(x.shape[1:]) != net.input_shape:
        raise InputError(f"input shape {x.shape[1:]} does not match network input {net.input_shape}")
    caches = []
    for i, layer in enumerate(net.layers):
        bits = quant.get(i) if quant is not None and layer.parametric else None
        x, cache = layer_forward(layer, params.get(i), x, bits)
        caches.append(cache)
    return x, Trace(net, params, params.version, caches, x.shape)


def backward(trace, dlogits):
    """Backpropagate `dlogits` through a trace. Returns (grads, dx)."""
    if trace.consumed:
        raise UsageError("trace already consumed by a previous backward call")
    if trace.params.version != trace.params_version:
        raise UsageError("parameters changed since the forward pass; trace is stale")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != trace.logits_shape:
        raise UsageError(f"gradient shape {dlogits.shape} does not match logits {trace.logits_shape}")
    trace.consumed = True
    grads = {}
    d = dlogits
    for i in range(len(trace.net.layers) - 1, -1, -1):
        layer = trace.net.layers[i]
        d, g = layer_backward(layer, trace.params.get(i), trace.caches[i], d)
        if g:
            grads[i] = g
    return grads, d


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    p = softmax(logits)
    n = logits.shape[0]
    idx = np.arange(n)
    loss = -np.mean(np.log(np.maximum(p[idx, labels], 1e-300)))
    d = p.copy()
    d[idx, labels] -= 1.0
    return float(loss), d / n


# -- training -----------------------------------------------------------------


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.x_train) == 0 or len(self.x_val) == 0:
            raise InputError("dataset splits must be nonempty")
        if len(self.x_train) != len(self.y_train) or len(self.x_val) != len(self.y_val):
            raise InputError("inputs and labels differ in length")


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 0.05
    epochs: int = 10
    batch: int = 32
    seed: int = 0
    momentum: float = 0.9
    clip_norm: float = 0.0  # <= 0 disables clipping

    def __post_init__(self):
        if not self.lr > 0:
            raise InputError("learning rate must be positive")
        if self.epochs < 0 or self.batch < 1:
            raise InputError("epochs must be >= 0 and batch >= 1")


@dataclass
class TrainResult:
    params: Params
    accuracy: float
    losses: list


def rng_streams(seed, n=2):
    """Independent generators spawned from one seed (init, shuffling, ...)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def batches(n, batch, rng):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def clip_grads(grads, max_norm):
    """Scale `grads` in place so their global L2 norm is at most `max_norm`
    (no-op for max_norm <= 0). Returns the norm before clipping."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for d in grads.values() for g in d.values()))
    if max_norm > 0 and norm > max_norm:
        for d in grads.values():
            for g in d.values():
                g *= max_norm / norm
    return norm


def sgd_step(params, grads, lr, momentum=0.0, velocity=None):
    """In-place (momentum) SGD on the layers present in `grads`."""
    for i, g in grads.items():
        for k, gk in g.items():
            if velocity is not None and momentum:
                v = velocity.setdefault((i, k), np.zeros_like(gk))
                v *= momentum
                v += gk
                gk = v
            params[i][k] -= lr * gk
    params.bump()


def evaluate(net, params, x, y, quant=None, batch=512):
    correct = 0
    for s in range(0, len(x), batch):
        logits, _ = forward(net, params, x[s:s + batch], quant)
        correct += int(np.sum(np.argmax(logits, axis=1) == y[s:s + batch]))
    return correct / len(x)


def train_sgd(net, dataset, config, params=None, quant=None, post_step=None):
    """Train with minibatch SGD and report validation accuracy.

    `params` continues from existing weights (modified in place) instead of
    a fresh seeded init. `post_step(params)` runs after every update, e.g.
    to re-apply pruning masks.
    """
    init_rng, shuffle_rng = rng_streams(config.seed)
    if params is None:
        params = init_params(net, init_rng)
    velocity = {}
    losses = []
    for epoch in range(config.epochs):
        total = 0.0
        for idx in batches(len(dataset.x_train), config.batch, shuffle_rng):
            logits, trace = forward(net, params, dataset.x_train[idx], quant)
            loss, dlogits = cross_entropy(logits, dataset.y_train[idx])
            if not np.isfinite(loss):
                raise TrainingError("non-finite training loss", epoch)
            grads, _ = backward(trace, dlogits)
            clip_grads(grads, config.clip_norm)
            sgd_step(params, grads, config.lr, config.momentum, velocity)
            if post_step is not None:
                post_step(params)
            total += loss * len(idx)
        losses.append(total / len(dataset.x_train))
    acc = evaluate(net, params, dataset.x_val, dataset.y_val, quant)
    return TrainResult(params, acc, losses)
