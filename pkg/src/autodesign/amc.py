"""Automated channel pruning: an actor-critic agent walks the prunable layers,
emits one sparsity ratio per layer, the ratio is clipped so the budget stays
reachable, rounded to a whole channel count, and the masked network is
briefly fine-tuned to produce the episode reward (validation accuracy).
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .errors import BudgetError, InputError
from .hwmodel import simulate_cost
from .nncore import LayerSpec, NetSpec, SGDConfig, count_macs, evaluate, net_macs, rng_streams, train_sgd
from .rlcore import Agent, AgentConfig, Transition

STATE_KINDS = ("dense", "conv2d", "depthwise_conv2d", "pointwise_conv2d")
STATE_DIM = 7 + len(STATE_KINDS)
_PRUNABLE_KINDS = ("dense", "conv2d", "pointwise_conv2d")


# -- policies and budgets -----------------------------------------------------


@dataclass(frozen=True)
class SparsityPolicy:
    """Kept output channels per prunable layer index."""

    kept: dict
    channels: dict

    def __post_init__(self):
        for i, k in self.kept.items():
            if not 1 <= k <= self.channels[i]:
                raise InputError(f"layer {i}: kept {k} outside [1, {self.channels[i]}]")

    def sparsity(self, i):
        return 1.0 - self.kept[i] / self.channels[i]

    def dumps(self):
        return yaml.safe_dump({int(i): {"kept": int(k), "sparsity": float(self.sparsity(i))}
                               for i, k in sorted(self.kept.items())}, sort_keys=False)

    @classmethod
    def loads(cls, text, net):
        d = yaml.safe_load(text) or {}
        kept = {int(i): int(v["kept"]) for i, v in d.items()}
        return cls(kept, {i: net.layers[i].out_channels for i in kept})


@dataclass(frozen=True)
class PruneBudget:
    """Upper bound on MACs (kind "macs") or simulated 8-bit latency in
    seconds (kind "latency", which needs `hw`)."""

    kind: str
    limit: float
    hw: object = None

    def __post_init__(self):
        if self.kind not in ("macs", "latency"):
            raise InputError(f"unknown pruning budget kind {self.kind!r}")
        if not self.limit > 0:
            raise InputError("budget limit must be positive")
        if self.kind == "latency" and self.hw is None:
            raise InputError("latency budgets need a hardware profile")


def round_feasible(sparsity, channels):
    """(kept, actual sparsity) for the nearest whole channel count, keeping at least one."""
    if channels < 1:
        raise InputError("channels must be positive")
    kept = int(min(max(round((1.0 - sparsity) * channels), 1), channels))
    return kept, 1.0 - kept / channels


def prune_channels(weights, kept):
    """Boolean mask over output channels (last axis): the `kept` channels with
    the largest L2 norm, ties going to the lower index."""
    w = np.asarray(weights, dtype=float)
    c = w.shape[-1]
    if not 1 <= kept <= c:
        raise InputError(f"kept {kept} outside [1, {c}]")
    norms = np.sqrt(np.sum(w.reshape(-1, c) ** 2, axis=0))
    order = np.lexsort((np.arange(c), -norms))
    mask = np.zeros(c, dtype=bool)
    mask[order[:kept]] = True
    return mask


def prunable_layers(net):
    """Layers whose output channels may be pruned: every non-residual dense,
    conv2d or pointwise layer except the classifier."""
    par = net.parametric_indices()
    last = par[-1] if par else None
    out = []
    for i in par:
        layer = net.layers[i]
        if layer.kind == "mbconv" or layer.residual:
            raise InputError("channel pruning supports plain (non-residual, non-mbconv) chains only")
        if layer.kind in _PRUNABLE_KINDS and i != last:
            out.append(i)
    return out


def shrink_net(net, kept):
    """NetSpec with the channel counts `kept` prescribes; consumers follow."""
    layers = []
    c = None
    for i, layer in enumerate(net.layers):
        cin = layer.in_channels if c is None else c
        if layer.kind in _PRUNABLE_KINDS:
            cout = kept.get(i, layer.out_channels)
        else:
            cout = cin if layer.kind in ("depthwise_conv2d", "relu", "identity", "zero", "global_pool") \
                else layer.out_channels
        layers.append(replace(layer, in_channels=cin, out_channels=cout))
        c = cout
    return NetSpec(layers, net.num_classes)


def channel_masks(net, params, kept):
    """Per-layer (input mask, output mask) for masking `params` in place of
    shrinking. Masks follow channels through depthwise and shape-free layers."""
    masks = {}
    cur = None
    for i, layer in enumerate(net.layers):
        inp = cur
        if layer.kind in _PRUNABLE_KINDS:
            if i in kept:
                out = prune_channels(params[i]["W"], kept[i])
            else:
                out = np.ones(layer.out_channels, dtype=bool)
        elif layer.kind in ("depthwise_conv2d", "relu", "identity", "zero", "global_pool"):
            out = inp
        else:
            out = None
        masks[i] = (inp, out)
        cur = out
    return masks


def apply_masks(params, masks):
    """Zero pruned output channels (weights and bias) and the matching input
    channels of consumers, in place."""
    for i, p in params.items():
        inp, out = masks.get(i, (None, None))
        if not p:
            continue
        W = p["W"]
        if out is not None and not out.all():
            W[..., ~out] = 0.0
            p["b"][~out] = 0.0
        if inp is not None and not inp.all() and W.ndim >= 2 and W.shape[-2] == inp.size:
            W[..., ~inp, :] = 0.0
    params.bump()
    return params


def shrink_params(net, params, masks):
    """Physically sliced parameters for `shrink_net(net, kept)`."""
    out = {}
    for i, p in params.items():
        if not p:
            continue
        inp, o = masks[i]
        W, b = p["W"], p["b"]
        if net.layers[i].kind == "depthwise_conv2d":
            out[i] = {"W": W[..., o], "b": b[o]}
            continue
        if inp is not None:
            W = W[..., inp, :]
        out[i] = {"W": W[..., o], "b": b[o]}
    from .nncore import Params
    return Params(out)


# -- cost and budget clipping -------------------------------------------------


def pruned_cost(net, kept, budget):
    shrunk = shrink_net(net, kept)
    if budget.kind == "macs":
        return float(net_macs(shrunk))
    bits = {i: (8, 8) for i in shrunk.parametric_indices()}
    return simulate_cost(shrunk, bits, budget.hw).latency_s


def floor_cost(net, budget):
    return pruned_cost(net, {i: 1 for i in prunable_layers(net)}, budget)


def check_budget(net, budget):
    lo = floor_cost(net, budget)
    if lo > budget.limit:
        raise BudgetError(f"budget {budget.limit:g} is below the keep-one floor cost {lo:g}")


def clip_action_for_budget(a, t, net, kept_so_far, budget):
    """Smallest sparsity >= `a` for the t-th prunable layer such that the
    budget is still met when every later prunable layer keeps one channel."""
    layers = prunable_layers(net)
    li = layers[t]
    channels = net.layers[li].out_channels
    rest = {j: 1 for j in layers[t + 1:]}

    def cost(k):
        return pruned_cost(net, {**kept_so_far, li: k, **rest}, budget)

    k0, _ = round_feasible(a, channels)
    if cost(k0) <= budget.limit:
        return float(a)
    for k in range(k0 - 1, 0, -1):
        if cost(k) <= budget.limit:
            return max(float(a), 1.0 - k / channels)
    raise BudgetError(f"layer {li}: budget {budget.limit:g} unreachable even keeping one channel")


def uniform_shrink(net, ratio):
    """Keep round(ratio * channels) (at least one) channels in every prunable layer."""
    if not 0 < ratio <= 1:
        raise InputError("ratio must lie in (0, 1]")
    layers = prunable_layers(net)
    ch = {i: net.layers[i].out_channels for i in layers}
    return SparsityPolicy({i: max(1, int(round(ratio * ch[i]))) for i in layers}, ch)


def uniform_shrink_for_budget(net, budget, steps=1000):
    """Largest uniform ratio (on a grid of `steps`) whose policy meets `budget`."""
    check_budget(net, budget)
    for s in range(steps, 0, -1):
        pol = uniform_shrink(net, s / steps)
        if pruned_cost(net, pol.kept, budget) <= budget.limit:
            return pol
    raise BudgetError("no uniform shrink ratio meets the budget")


# -- agent interface ----------------------------------------------------------


def layer_state(net, t, layers, reduced, prev_action, total=None):
    """Features of the t-th layer in `layers`, all scaled to [0, 1]:
    position, kind one-hot, in/out channels, MACs share, MACs removed so far,
    MACs of later layers, previous action."""
    total = total or net_macs(net)
    layer = net.layers[layers[t]]
    cmax = max(max(l.in_channels, l.out_channels) for l in net.layers)
    onehot = [float(layer.kind == k) for k in STATE_KINDS]
    later = sum(count_macs(net.layers[j]) for j in layers[t + 1:])
    return np.array([
        t / max(len(layers) - 1, 1),
        *onehot,
        layer.in_channels / cmax,
        layer.out_channels / cmax,
        count_macs(layer) / total,
        reduced / total,
        later / total,
        prev_action,
    ])


@dataclass(frozen=True)
class AMCConfig:
    episodes: int = 200
    warmup_episodes: int = 25
    finetune_epochs: int = 2
    finetune_lr: float = 0.02
    pretrain_epochs: int = 15
    lr: float = 0.05
    batch: int = 32
    clip_norm: float = 1.0
    updates_per_episode: int = 0  # 0 -> one per transition
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 1 or self.warmup_episodes < 0 or self.finetune_epochs < 0:
            raise InputError("episodes must be positive; warmup and fine-tune epochs nonnegative")


@dataclass
class AMCResult:
    policy: SparsityPolicy
    accuracy: float
    cost: float
    log: list = field(default_factory=list)
    agent: object = None


def rollout(agent, net, budget, explore=True, rng=None):
    """One episode over the prunable layers. Returns (policy, [(state, action)]).

    With `rng` given, actions are uniform random instead of the agent's.
    """
    layers = prunable_layers(net)
    total = net_macs(net)
    kept, steps = {}, []
    prev = 0.0
    for t, li in enumerate(layers):
        reduced = total - net_macs(shrink_net(net, kept))
        s = layer_state(net, t, layers, reduced, prev, total)
        a = float(rng.uniform()) if rng is not None else agent.act(s, explore)
        a = clip_action_for_budget(a, t, net, kept, budget)
        kept[li], _ = round_feasible(a, net.layers[li].out_channels)
        steps.append((s, a))
        prev = a
    return SparsityPolicy(kept, {i: net.layers[i].out_channels for i in layers}), steps


def evaluate_policy(net, params, dataset, policy, config):
    """Validation accuracy after masking and a short masked fine-tune; a pure
    function of (params, policy, config)."""
    masks = channel_masks(net, params, policy.kept)
    p = apply_masks(params.copy(), masks)
    if config.finetune_epochs:
        sgd = SGDConfig(lr=config.finetune_lr, epochs=config.finetune_epochs, batch=config.batch,
                        seed=config.seed, clip_norm=config.clip_norm)
        p = train_sgd(net, dataset, sgd, params=p, post_step=lambda q: apply_masks(q, masks)).params
    return evaluate(net, p, dataset.x_val, dataset.y_val)


def pretrain(net, dataset, config):
    sgd = SGDConfig(lr=config.lr, epochs=config.pretrain_epochs, batch=config.batch, seed=config.seed,
                    clip_norm=config.clip_norm)
    return train_sgd(net, dataset, sgd).params


def amc_search(net, dataset, budget, config=AMCConfig(), agent_config=None, params=None):
    """Search per-layer sparsities under `budget`; return the best policy seen."""
    check_budget(net, budget)
    layers = prunable_layers(net)
    if not layers:
        raise InputError("network has no prunable layers")
    if params is None:
        params = pretrain(net, dataset, config)
    agent_config = agent_config or AgentConfig(STATE_DIM, seed=config.seed, warmup=len(layers) * 4,
                                               batch=min(64, len(layers) * 4))
    agent = Agent(agent_config)
    (warm_rng,) = rng_streams(config.seed + 1, 1)
    cache = {}
    best = None
    log = []
    for ep in range(config.episodes):
        policy, steps = rollout(agent, net, budget, explore=True,
                                rng=warm_rng if ep < config.warmup_episodes else None)
        key = tuple(sorted(policy.kept.items()))
        if key not in cache:
            cache[key] = evaluate_policy(net, params, dataset, policy, config)
        reward = cache[key]
        for j, (s, a) in enumerate(steps):
            last = j == len(steps) - 1
            agent.remember(Transition(s, a, reward, s if last else steps[j + 1][0], last))
        if ep >= config.warmup_episodes and agent.ready:
            for _ in range(config.updates_per_episode or len(steps)):
                agent.update()
        agent.end_episode()
        cost = pruned_cost(net, policy.kept, budget)
        if best is None or reward > best.accuracy:
            best = AMCResult(policy, reward, cost)
        log.append({"episode": ep, "reward": reward, "cost": cost, "kept": dict(policy.kept)})
    return AMCResult(best.policy, best.accuracy, best.cost, log, agent)
