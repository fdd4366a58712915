"""Differentiable, hardware-aware architecture search over a residual supernet.

Each block of the supernet holds K candidate branches (mobile inverted
bottleneck convs of several kernel sizes and expansion ratios, plus a zero
branch that skips the block). One branch per block is sampled from
softmax(alpha) for every minibatch, so only the active path is evaluated
and trained. Architecture logits are updated from per-branch loss
substitutions pushed through the softmax Jacobian, and the expected latency
from a lookup table enters the loss as a target-relative penalty.
"""

import itertools
import math
import re
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import InputError, SearchError, SearchSpaceTooLarge
from .hwmodel import LatencyTable, expected_network_latency
from .nncore import (
    LayerSpec,
    NetSpec,
    Params,
    SGDConfig,
    backward,
    batches,
    clip_grads,
    cross_entropy,
    forward,
    init_layer,
    init_params,
    layer_forward,
    rng_streams,
    train_sgd,
)

DEFAULT_CHOICES = ("mb3_3x3", "mb3_5x5", "mb3_7x7", "mb6_3x3", "mb6_5x5", "mb6_7x7", "zero")

_MB = re.compile(r"^mb(\d+)_(\d+)x(\d+)$")


def parse_op(name, channels, spatial):
    """LayerSpec for a candidate branch, or None for the zero branch."""
    if name == "zero":
        return None
    m = _MB.match(name)
    if not m or m.group(2) != m.group(3):
        raise InputError(f"unknown op name {name!r}")
    e, k = int(m.group(1)), int(m.group(2))
    return LayerSpec("mbconv", channels, channels, kernel_size=k, spatial_in=spatial,
                     expansion_ratio=e, residual=True)


def _block_layer(name, channels, spatial):
    layer = parse_op(name, channels, spatial)
    if layer is None:
        return LayerSpec("zero", channels, channels, spatial_in=spatial, residual=True)
    return layer


@dataclass(frozen=True)
class SearchSpace:
    """N blocks, each choosing one op from `choices`, between a linear 3x3
    stem and a global-pool + dense head."""

    num_blocks: int = 3
    choices: tuple = DEFAULT_CHOICES
    channels: int = 4
    image_size: int = 5
    in_channels: int = 3
    num_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(self.choices))
        if self.num_blocks < 1:
            raise InputError("num_blocks must be positive")
        if len(self.choices) < 1 or len(set(self.choices)) != len(self.choices):
            raise InputError("choices must be a nonempty list of distinct op names")
        for op in self.choices:
            parse_op(op, self.channels, self.spatial)

    @property
    def spatial(self):
        return (self.image_size, self.image_size)

    @property
    def cardinality(self):
        return len(self.choices) ** self.num_blocks

    def op_layer(self, block, op):
        return parse_op(op, self.channels, self.spatial)

    def child_net(self, ops):
        """Standalone network for one architecture (zero blocks kept as no-ops
        so that layer indices do not depend on the architecture)."""
        hw, c = self.spatial, self.channels
        layers = [LayerSpec("conv2d", self.in_channels, c, kernel_size=3, spatial_in=hw)]
        layers += [_block_layer(op, c, hw) for op in ops]
        layers += [LayerSpec("global_pool", c, c, spatial_in=hw), LayerSpec("dense", c, self.num_classes)]
        return NetSpec(layers, self.num_classes)

    def all_archs(self):
        return itertools.product(self.choices, repeat=self.num_blocks)


@dataclass
class ArchParams:
    alpha: np.ndarray
    gates: np.ndarray

    @classmethod
    def zeros(cls, num_blocks, k):
        return cls(np.zeros((num_blocks, k)), np.zeros((num_blocks, k), dtype=int))

    def probs(self):
        return np.array([softmax_probs(row) for row in self.alpha])


@dataclass(frozen=True)
class SpecializedArch:
    ops: tuple
    hardware: str = ""
    lat_ref: float = math.inf
    seed: int = 0

    def to_dict(self):
        return {
            "blocks": list(self.ops),
            "provenance": {"hardware": self.hardware, "lat_ref": self.lat_ref, "seed": self.seed},
        }

    def dumps(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def loads(cls, text):
        d = yaml.safe_load(text)
        prov = d.get("provenance", {})
        return cls(tuple(d["blocks"]), prov.get("hardware", ""), float(prov.get("lat_ref", math.inf)),
                   int(prov.get("seed", 0)))


# -- elementary operations ----------------------------------------------------


def softmax_probs(alpha_row):
    a = np.asarray(alpha_row, dtype=float)
    e = np.exp(a - a.max())
    return e / e.sum()


def sample_gates(probs, rng):
    """One-hot gate row with index j drawn with probability probs[j]."""
    p = np.asarray(probs, dtype=float)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise InputError("gate probabilities must form a distribution")
    j = rng.choice(len(p), p=p / p.sum())
    g = np.zeros(len(p), dtype=int)
    g[j] = 1
    return g


def mixed_op_forward(block_ops, block_params, gates, x):
    """Output of a mixed op under one-hot gates: only the active branch runs.

    `block_ops` are the (residual) LayerSpecs of the candidate branches and
    `block_params` their parameter dicts, aligned by index.
    """
    gates = np.asarray(gates)
    if gates.sum() != 1 or not np.all((gates == 0) | (gates == 1)):
        raise InputError("gates must be one-hot")
    j = int(np.argmax(gates))
    return layer_forward(block_ops[j], block_params[j], x)[0]


def arch_gradient(dl_dgates, probs):
    """Map gate gradients to logit gradients through the softmax Jacobian:
    dL/dalpha_i = sum_j dL/dg_j * p_j * (delta_ij - p_i)."""
    g = np.asarray(dl_dgates, dtype=float)
    p = np.asarray(probs, dtype=float)
    return p * (g - p @ g)


def latency_penalty(elat, lat_ref, b):
    return max(elat / lat_ref, 1.0) ** b


def hardware_aware_loss(ce, elat, lat_ref, a=1.0, b=1.0):
    """Cross-entropy scaled by a one-sided latency penalty,
    ce * a * max(elat / lat_ref, 1) ** b."""
    if not lat_ref > 0:
        raise InputError("lat_ref must be positive")
    if ce < 0 or not elat > 0:
        raise InputError("ce must be >= 0 and elat > 0")
    return ce * a * latency_penalty(elat, lat_ref, b)


def derive_final_arch(alpha, choices=DEFAULT_CHOICES, hardware="", lat_ref=math.inf, seed=0):
    """Per block, the op with the largest logit (lowest index on ties)."""
    alpha = np.asarray(alpha, dtype=float)
    if not np.all(np.isfinite(alpha)):
        raise InputError("alpha must be finite")
    if alpha.shape[1] != len(choices):
        raise InputError(f"alpha has {alpha.shape[1]} columns for {len(choices)} choices")
    ops = tuple(choices[int(np.argmax(row))] for row in alpha)
    return SpecializedArch(ops, hardware, lat_ref, seed)


# -- supernet -----------------------------------------------------------------


class SuperNet:
    """Shared weights for every candidate branch; child nets borrow them."""

    def __init__(self, space, rng):
        self.space = space
        hw, c = space.spatial, space.channels
        full = space.child_net(space.choices[:1] * space.num_blocks)
        trunk = init_params(full, rng)
        self.stem = trunk[0]
        self.head = trunk[space.num_blocks + 2]
        self.branches = {}
        for b in range(space.num_blocks):
            for j, op in enumerate(space.choices):
                layer = parse_op(op, c, hw)
                if layer is not None:
                    self.branches[(b, j)] = init_layer(layer, rng)
        self._nets = {}

    def child(self, arch):
        """(NetSpec, Params) for an arch given as a tuple of op indices."""
        arch = tuple(int(j) for j in arch)
        net = self._nets.get(arch)
        if net is None:
            net = self._nets[arch] = self.space.child_net([self.space.choices[j] for j in arch])
        params = Params({0: self.stem, self.space.num_blocks + 2: self.head})
        for b, j in enumerate(arch):
            if (b, j) in self.branches:
                params[1 + b] = self.branches[(b, j)]
        return net, params

    def owner(self, arch, layer_index):
        if layer_index == 0:
            return ("stem",)
        if layer_index == self.space.num_blocks + 2:
            return ("head",)
        return ("branch", layer_index - 1, int(arch[layer_index - 1]))


@dataclass(frozen=True)
class SearchConfig:
    a: float = 1.0
    b: float = 1.0
    lat_ref: float = math.inf
    epochs: int = 30
    seed: int = 0
    batch: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    arch_lr: float = 0.5
    warmup_epochs: int = 5
    clip_norm: float = 1.0
    hardware: str = ""

    def __post_init__(self):
        if not self.lat_ref > 0:
            raise InputError("lat_ref must be positive")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.batch < 1:
            raise InputError("epochs, warmup_epochs must be >= 0 and batch >= 1")


@dataclass
class SearchResult:
    arch: SpecializedArch
    alpha: np.ndarray
    log: list = field(default_factory=list)


_CE_FLOOR = 1e-6


def _ce(net, params, x, y):
    logits, _ = forward(net, params, x)
    return cross_entropy(logits, y)[0]


def _cycle_batches(n, batch, rng):
    while True:
        yield from batches(n, batch, rng)


def search(space, dataset, table, config):
    """Alternate weight steps (odd minibatches) and architecture steps (even
    minibatches); return the argmax architecture and a per-epoch log.

    Only weight steps run during the first `warmup_epochs`. Architecture
    steps score candidates on minibatches of the held-out split, so that an
    over-fitted supernet does not make every cross-entropy ratio explode.

    The architecture step descends log(loss). The cross-entropy part uses
    d log CE / dg_j ~= log CE with branch j substituted at that block minus
    log CE of the sampled path; the latency part is exact through the table.
    """
    n, k = space.num_blocks, len(space.choices)
    lat = table.matrix(space.choices)
    if lat.shape != (n, k):
        raise InputError(f"latency table is {lat.shape}, space needs {(n, k)}")
    init_rng, shuffle_rng, gate_rng, val_rng = rng_streams(config.seed, 4)
    supernet = SuperNet(space, init_rng)
    ap = ArchParams.zeros(n, k)
    velocity = {}
    log = []
    held_out = _cycle_batches(len(dataset.x_val), config.batch, val_rng)
    for epoch in range(config.epochs):
        ce_sum = ce_n = 0.0
        for step, idx in enumerate(batches(len(dataset.x_train), config.batch, shuffle_rng)):
            x, y = dataset.x_train[idx], dataset.y_train[idx]
            probs = ap.probs()
            ap.gates = np.array([sample_gates(p, gate_rng) for p in probs])
            arch = tuple(int(j) for j in ap.gates.argmax(axis=1))
            net, params = supernet.child(arch)
            if step % 2 == 1 or epoch < config.warmup_epochs:
                logits, trace = forward(net, params, x)
                ce, dlogits = cross_entropy(logits, y)
                if not math.isfinite(ce):
                    raise SearchError("non-finite training loss", epoch)
                grads, _ = backward(trace, dlogits)
                clip_grads(grads, config.clip_norm)
                for li, g in grads.items():
                    key = supernet.owner(arch, li)
                    for name, gk in g.items():
                        v = velocity.setdefault(key + (name,), np.zeros_like(gk))
                        v *= config.momentum
                        v += gk
                        params[li][name] -= config.lr * v
                params.bump()
            else:
                vidx = next(held_out)
                ce = _arch_step(space, supernet, ap, arch, probs, dataset.x_val[vidx], dataset.y_val[vidx],
                                table, lat, config, epoch)
            ce_sum += ce * len(idx)
            ce_n += len(idx)
        probs = ap.probs()
        elat = expected_network_latency(probs, table)
        train_ce = ce_sum / max(ce_n, 1)
        log.append({
            "epoch": epoch,
            "train_ce": train_ce,
            "expected_latency_s": elat,
            "loss": hardware_aware_loss(train_ce, max(elat, 1e-300), config.lat_ref, config.a, config.b),
            "probs": probs.round(6).tolist(),
        })
    result = derive_final_arch(ap.alpha, space.choices, config.hardware, config.lat_ref, config.seed)
    return SearchResult(result, ap.alpha.copy(), log)


def _arch_step(space, supernet, ap, arch, probs, x, y, table, lat, config, epoch):
    n, k = ap.alpha.shape
    base_net, base_params = supernet.child(arch)
    ce = _ce(base_net, base_params, x, y)
    elat = expected_network_latency(probs, table)
    loss = hardware_aware_loss(ce, max(elat, 1e-300), config.lat_ref, config.a, config.b)
    if not math.isfinite(loss):
        raise SearchError("non-finite hardware-aware loss", epoch)
    over = elat > config.lat_ref
    log_ce = math.log(max(ce, _CE_FLOOR))
    grad = np.zeros_like(ap.alpha)
    for b in range(n):
        dl_dg = np.zeros(k)
        for j in range(k):
            if j != arch[b]:
                alt = arch[:b] + (j,) + arch[b + 1:]
                dl_dg[j] = math.log(max(_ce(*supernet.child(alt), x, y), _CE_FLOOR)) - log_ce
        grad[b] = arch_gradient(dl_dg, probs[b])
        if over:
            grad[b] += config.b * arch_gradient(lat[b], probs[b]) / elat
    ap.alpha -= config.arch_lr * grad
    return ce


# -- exhaustive oracle --------------------------------------------------------


@dataclass(frozen=True)
class FrontierEntry:
    ops: tuple
    accuracy: float
    latency_s: float
    pareto: bool = False


def dominates(p, q):
    """p is at least as accurate and as fast as q, and strictly better in one."""
    return (p.accuracy >= q.accuracy and p.latency_s <= q.latency_s
            and (p.accuracy > q.accuracy or p.latency_s < q.latency_s))


def mark_pareto(entries):
    return [FrontierEntry(e.ops, e.accuracy, e.latency_s, not any(dominates(o, e) for o in entries))
            for e in entries]


def arch_accuracies(space, dataset, sgd_config, cap=512):
    """Train every architecture from scratch with the same seed and budget.

    Returns {ops tuple: validation accuracy}. Accuracy does not depend on
    the hardware, so one sweep serves every latency table.
    """
    if space.cardinality > cap:
        raise SearchSpaceTooLarge(f"space has {space.cardinality} architectures, cap is {cap}")
    return {ops: train_sgd(space.child_net(ops), dataset, sgd_config).accuracy for ops in space.all_archs()}


def frontier_from_accuracies(accuracies, table):
    entries = [FrontierEntry(ops, acc, table.arch_latency(ops)) for ops, acc in accuracies.items()]
    return mark_pareto(entries)


def brute_force_frontier(space, dataset, table, sgd_config=None, cap=512):
    sgd_config = sgd_config or SGDConfig()
    return frontier_from_accuracies(arch_accuracies(space, dataset, sgd_config, cap), table)
