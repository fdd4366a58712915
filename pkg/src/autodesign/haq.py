"""Hardware-aware mixed-precision quantization: an actor-critic agent picks
weight and activation bitwidths layer by layer, the policy is projected onto
the resource budget using the hardware simulator, and the reward is the
validation accuracy after a short quantization-aware fine-tune.
"""

from dataclasses import dataclass, field

import numpy as np
import yaml

from .amc import STATE_DIM as LAYER_STATE_DIM, layer_state
from .errors import BudgetError, InputError, PolicyError
from .hwmodel import simulate_cost
from .nncore import SGDConfig, evaluate, net_macs, rng_streams, train_sgd
from .quantize import MAX_BITS, MIN_BITS, check_bits
from .rlcore import Agent, AgentConfig, Transition

STATE_DIM = LAYER_STATE_DIM + 1
BUDGET_KINDS = ("latency", "energy", "model_size")


@dataclass(frozen=True)
class BitwidthPolicy:
    """Layer index -> (w_bits, a_bits) for every parametric layer."""

    bits: dict

    def __post_init__(self):
        clean = {}
        for i, (w, a) in self.bits.items():
            clean[int(i)] = (check_bits(w), check_bits(a))
        object.__setattr__(self, "bits", clean)

    def covers(self, net):
        missing = set(net.parametric_indices()) - set(self.bits)
        if missing:
            raise PolicyError(f"policy has no bitwidths for layers {sorted(missing)}")
        return True

    def dumps(self, report=None):
        d = {"bits": {i: {"w_bits": w, "a_bits": a} for i, (w, a) in sorted(self.bits.items())}}
        if report is not None:
            d["cost"] = {"latency_s": report.latency_s, "energy_j": report.energy_j,
                         "model_size_bits": report.model_size_bits}
        return yaml.safe_dump(d, sort_keys=False)

    @classmethod
    def loads(cls, text):
        d = yaml.safe_load(text)
        return cls({int(i): (v["w_bits"], v["a_bits"]) for i, v in d["bits"].items()})

    @classmethod
    def uniform(cls, net, w_bits, a_bits=None):
        a_bits = w_bits if a_bits is None else a_bits
        return cls({i: (w_bits, a_bits) for i in net.parametric_indices()})

    def __le__(self, other):
        """Pointwise comparison of every bitwidth."""
        return all(w <= other.bits[i][0] and a <= other.bits[i][1] for i, (w, a) in self.bits.items())


@dataclass(frozen=True)
class Budget:
    kind: str
    limit: float

    def __post_init__(self):
        if self.kind not in BUDGET_KINDS:
            raise InputError(f"budget kind must be one of {BUDGET_KINDS}, got {self.kind!r}")
        if not self.limit > 0:
            raise InputError("budget limit must be positive")


def action_to_bits(a):
    """round(1 + 7a) clamped to [1, 8]; halves round to even (0.5 -> 4)."""
    if not 0.0 <= a <= 1.0:
        raise InputError(f"action {a} outside [0, 1]")
    return int(np.clip(np.rint(1.0 + 7.0 * a), MIN_BITS, MAX_BITS))


def policy_cost(net, policy, hw, budget):
    return simulate_cost(net, policy, hw).value(budget.kind)


def enforce_budget(policy, net, hw, budget):
    """Lower bitwidths until `policy` fits `budget`.

    Sweeps the parametric layers first to last, decrementing the weight then
    the activation bitwidth of each (never below 1) and re-simulating after
    every decrement; returns the first feasible policy. A feasible policy is
    returned unchanged.
    """
    policy.covers(net)
    floor = BitwidthPolicy.uniform(net, MIN_BITS)
    if policy_cost(net, floor, hw, budget) > budget.limit:
        raise BudgetError(f"{budget.kind} budget {budget.limit:g} is below the all-1-bit cost")
    bits = dict(policy.bits)
    if policy_cost(net, policy, hw, budget) <= budget.limit:
        return policy
    order = net.parametric_indices()
    while True:
        for i in order:
            for slot in (0, 1):
                if bits[i][slot] > MIN_BITS:
                    pair = list(bits[i])
                    pair[slot] -= 1
                    bits[i] = tuple(pair)
                    if policy_cost(net, bits, hw, budget) <= budget.limit:
                        return BitwidthPolicy(bits)


def uniform_for_budget(net, hw, budget):
    """Highest uniform bitwidth whose policy meets the budget."""
    for k in range(MAX_BITS, MIN_BITS - 1, -1):
        pol = BitwidthPolicy.uniform(net, k)
        if policy_cost(net, pol, hw, budget) <= budget.limit:
            return pol
    raise BudgetError(f"{budget.kind} budget {budget.limit:g} is below the all-1-bit cost")


# -- search -------------------------------------------------------------------


def quant_state(net, t, layers, prev_action, which, total=None):
    """Pruning layer state plus a flag: 0 for the weight decision, 1 for the
    activation decision."""
    return np.append(layer_state(net, t, layers, 0.0, prev_action, total), float(which))


@dataclass(frozen=True)
class HAQConfig:
    episodes: int = 150
    warmup_episodes: int = 20
    finetune_epochs: int = 1
    finetune_lr: float = 0.01
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
class HAQResult:
    policy: BitwidthPolicy
    accuracy: float
    cost: float
    log: list = field(default_factory=list)
    agent: object = None


def propose(agent, net, explore=True, rng=None):
    """Raw per-layer (w, a) actions before budget projection; uniform random
    when `rng` is given. Returns (policy, [(state, action)])."""
    layers = net.parametric_indices()
    total = net_macs(net)
    bits, steps = {}, []
    prev = 0.0
    for t, i in enumerate(layers):
        pair = []
        for which in (0, 1):
            s = quant_state(net, t, layers, prev, which, total)
            if s.shape[0] != agent.config.state_dim:
                raise InputError(f"agent expects {agent.config.state_dim}-dim states, net yields {s.shape[0]}")
            a = float(rng.uniform()) if rng is not None else agent.act(s, explore)
            pair.append(action_to_bits(a))
            steps.append((s, a))
            prev = a
        bits[i] = tuple(pair)
    return BitwidthPolicy(bits), steps


def evaluate_quantized(net, params, dataset, policy, config):
    """Validation accuracy after a quantization-aware fine-tune under
    `policy`; a pure function of (params, policy, config)."""
    quant = policy.bits
    p = params.copy()
    if config.finetune_epochs:
        sgd = SGDConfig(lr=config.finetune_lr, epochs=config.finetune_epochs, batch=config.batch,
                        seed=config.seed, clip_norm=config.clip_norm)
        p = train_sgd(net, dataset, sgd, params=p, quant=quant).params
    return evaluate(net, p, dataset.x_val, dataset.y_val, quant)


def pretrain(net, dataset, config):
    sgd = SGDConfig(lr=config.lr, epochs=config.pretrain_epochs, batch=config.batch, seed=config.seed,
                    clip_norm=config.clip_norm)
    return train_sgd(net, dataset, sgd).params


def default_agent_config(net, seed):
    # Searches run ~150 episodes, so exploration has to settle within that
    # budget: sigma 0.3 decaying 5% per episode is below 0.03 by episode 50.
    steps = 2 * len(net.parametric_indices())
    return AgentConfig(STATE_DIM, seed=seed, warmup=4 * steps, batch=min(64, 4 * steps), noise=0.3,
                       noise_decay=0.95)


def haq_search(net, dataset, hw, budget, config=HAQConfig(), agent_config=None, params=None, agent=None):
    """Search a per-layer bitwidth policy under `budget`; return the most
    accurate feasible policy seen (earliest on ties)."""
    uniform_for_budget(net, hw, budget)  # refuses infeasible budgets up front
    if params is None:
        params = pretrain(net, dataset, config)
    agent = agent or Agent(agent_config or default_agent_config(net, config.seed))
    (warm_rng,) = rng_streams(config.seed + 1, 1)
    cache = {}
    best = None
    log = []
    for ep in range(config.episodes):
        raw, steps = propose(agent, net, explore=True, rng=warm_rng if ep < config.warmup_episodes else None)
        policy = enforce_budget(raw, net, hw, budget)
        key = tuple(sorted(policy.bits.items()))
        if key not in cache:
            cache[key] = evaluate_quantized(net, params, dataset, policy, config)
        reward = cache[key]
        # the projection is part of the environment: the agent is credited
        # for the actions it emitted, which determine the projected policy
        for j, (s, a) in enumerate(steps):
            last = j == len(steps) - 1
            agent.remember(Transition(s, a, reward, s if last else steps[j + 1][0], last))
        if ep >= config.warmup_episodes and agent.ready:
            for _ in range(config.updates_per_episode or len(steps)):
                agent.update()
        agent.end_episode()
        cost = policy_cost(net, policy, hw, budget)
        if best is None or reward > best.accuracy:
            best = HAQResult(policy, reward, cost)
        log.append({"episode": ep, "reward": reward, "cost": cost,
                    "bits": {i: list(b) for i, b in policy.bits.items()}})
    return HAQResult(best.policy, best.accuracy, best.cost, log, agent)


def greedy_policy(agent, net):
    """The agent's noise-free bitwidths for `net`, before budget projection."""
    return propose(agent, net, explore=False)[0]


def transfer_policy(agent, net, hw, budget):
    """Run a frozen agent over an unseen network and project the result onto
    the budget. `agent` may be an Agent or a checkpoint path."""
    if not isinstance(agent, Agent):
        agent = Agent.load(agent)
    if agent.config.state_dim != STATE_DIM:
        raise InputError(f"agent state_dim {agent.config.state_dim} does not match quantization states ({STATE_DIM})")
    return enforce_budget(greedy_policy(agent, net), net, hw, budget)
