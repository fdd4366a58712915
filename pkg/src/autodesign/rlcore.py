"""A small DDPG agent (deterministic actor, Q critic, target networks, replay)
with scalar actions in [0, 1], shared by the pruning and quantization
searches.
"""

import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import truncnorm

from .errors import InputError, UsageError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AgentConfig:
    state_dim: int
    hidden: tuple = (64, 64)
    actor_lr: float = 1e-3
    critic_lr: float = 2e-3
    gamma: float = 1.0
    tau: float = 0.01
    noise: float = 0.5
    noise_decay: float = 0.99
    capacity: int = 2000
    batch: int = 64
    warmup: int = 100
    seed: int = 0
    normalize_reward: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.state_dim < 1 or not self.hidden or min(self.hidden) < 1:
            raise InputError("state_dim and hidden sizes must be positive")
        if not (self.actor_lr > 0 and self.critic_lr > 0):
            raise InputError("learning rates must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise InputError("gamma must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise InputError("tau must lie in (0, 1]")
        if self.noise < 0 or not 0.0 < self.noise_decay <= 1.0:
            raise InputError("noise must be >= 0 and noise_decay in (0, 1]")
        if self.batch < 1 or self.capacity < self.batch:
            raise InputError("capacity must be at least the batch size")
        if self.warmup < 0:
            raise InputError("warmup must be nonnegative")


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: float
    reward: float
    next_state: np.ndarray
    terminal: bool = False

    def __post_init__(self):
        if not 0.0 <= self.action <= 1.0:
            raise InputError(f"action {self.action} outside [0, 1]")
        if not math.isfinite(self.reward):
            raise InputError("reward must be finite")


# -- networks -----------------------------------------------------------------


class MLP:
    """Fully connected ReLU network with a linear output layer."""

    def __init__(self, sizes, rng, out_scale=3e-3):
        self.params = []
        for i, (m, n) in enumerate(zip(sizes[:-1], sizes[1:])):
            a = out_scale if i == len(sizes) - 2 else 1.0 / math.sqrt(m)
            self.params += [rng.uniform(-a, a, size=(m, n)), rng.uniform(-a, a, size=n)]

    def forward(self, x):
        acts = [x]
        h = x
        n = len(self.params) // 2
        for i in range(n):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < n - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, dout):
        """Parameter gradients (aligned with .params) and input gradient."""
        grads = [None] * len(self.params)
        d = dout
        n = len(self.params) // 2
        for i in reversed(range(n)):
            if i < n - 1:
                d = d * (acts[i + 1] > 0)
            grads[2 * i] = acts[i].T @ d
            grads[2 * i + 1] = d.sum(axis=0)
            d = d @ self.params[2 * i].T
        return grads, d

    def copy(self):
        other = MLP.__new__(MLP)
        other.params = [p.copy() for p in self.params]
        return other


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def soft_update(target, online, tau):
    for t, o in zip(target.params, online.params):
        t *= 1.0 - tau
        t += tau * o


# -- replay -------------------------------------------------------------------


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions."""

    def __init__(self, capacity, state_dim):
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.terminals = np.zeros(capacity)
        self.size = 0
        self.head = 0

    def __len__(self):
        return self.size

    def push(self, t):
        i = self.head
        self.states[i], self.actions[i], self.rewards[i] = t.state, t.action, t.reward
        self.next_states[i], self.terminals[i] = t.next_state, float(t.terminal)
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def oldest(self):
        return (self.head - self.size) % self.capacity

    def sample_indices(self, batch, rng):
        return rng.integers(0, self.size, size=batch)


@dataclass
class RunningStats:
    """Welford mean/variance of every reward seen."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def push(self, x):
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    @property
    def std(self):
        return math.sqrt(self.m2 / self.count) if self.count > 1 else 0.0


# -- agent --------------------------------------------------------------------


@dataclass
class _Streams:
    noise: np.random.Generator
    replay: np.random.Generator


class Agent:
    def __init__(self, config):
        self.config = config
        init_rng, noise_rng, replay_rng = (np.random.default_rng(s)
                                           for s in np.random.SeedSequence(config.seed).spawn(3))
        self.rng = _Streams(noise_rng, replay_rng)
        d, h = config.state_dim, config.hidden
        self.actor = MLP((d,) + h + (1,), init_rng)
        self.critic = MLP((d + 1,) + h + (1,), init_rng)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(self.actor.params, config.actor_lr)
        self.critic_opt = Adam(self.critic.params, config.critic_lr)
        self.buffer = ReplayBuffer(config.capacity, d)
        self.reward_stats = RunningStats()
        self.sigma = config.noise
        self.updates = 0

    def _state(self, state):
        s = np.asarray(state, dtype=float)
        if s.shape != (self.config.state_dim,):
            raise InputError(f"state has shape {s.shape}, agent expects ({self.config.state_dim},)")
        return s

    def policy(self, states, net=None):
        out, _ = (net or self.actor).forward(states)
        return _sigmoid(out[:, 0])

    def act(self, state, explore=False):
        s = self._state(state)
        mu = float(self.policy(s[None])[0])
        if not explore or self.sigma == 0:
            return mu
        lo, hi = (0.0 - mu) / self.sigma, (1.0 - mu) / self.sigma
        a = truncnorm.rvs(lo, hi, loc=mu, scale=self.sigma, random_state=self.rng.noise)
        return float(np.clip(a, 0.0, 1.0))

    def end_episode(self):
        self.sigma *= self.config.noise_decay

    def remember(self, transition):
        self._state(transition.state)
        self._state(transition.next_state)
        self.buffer.push(transition)
        self.reward_stats.push(transition.reward)

    @property
    def ready(self):
        return len(self.buffer) >= max(self.config.batch, self.config.warmup)

    def sample(self):
        if not self.ready:
            raise UsageError(f"replay holds {len(self.buffer)} transitions; "
                             f"need {max(self.config.batch, self.config.warmup)} before sampling")
        return self.buffer.sample_indices(self.config.batch, self.rng.replay)

    def _normalized(self, r):
        if not self.config.normalize_reward:
            return r
        return (r - self.reward_stats.mean) / (self.reward_stats.std + 1e-8)

    def update(self):
        """One critic and one actor step on a replay minibatch, then a soft
        target update. Returns (critic_loss, actor_objective)."""
        c, buf = self.config, self.buffer
        idx = self.sample()
        s, a, s2 = buf.states[idx], buf.actions[idx], buf.next_states[idx]
        r, done = self._normalized(buf.rewards[idx]), buf.terminals[idx]

        a2 = self.policy(s2, self.actor_target)
        q2, _ = self.critic_target.forward(np.column_stack([s2, a2]))
        y = r + c.gamma * (1.0 - done) * q2[:, 0]

        q, acts = self.critic.forward(np.column_stack([s, a]))
        err = q[:, 0] - y
        critic_loss = float(np.mean(err ** 2))
        grads, _ = self.critic.backward(acts, (2.0 / len(idx)) * err[:, None])
        self.critic_opt.step(self.critic.params, grads)

        out, actor_acts = self.actor.forward(s)
        mu = _sigmoid(out[:, 0])
        qa, critic_acts = self.critic.forward(np.column_stack([s, mu]))
        _, dinput = self.critic.backward(critic_acts, np.full((len(idx), 1), -1.0 / len(idx)))
        dmu = dinput[:, -1] * mu * (1.0 - mu)
        grads, _ = self.actor.backward(actor_acts, dmu[:, None])
        self.actor_opt.step(self.actor.params, grads)

        soft_update(self.actor_target, self.actor, c.tau)
        soft_update(self.critic_target, self.critic, c.tau)
        self.updates += 1
        return critic_loss, float(np.mean(qa))

    def q_value(self, state, action):
        s = self._state(state)
        q, _ = self.critic.forward(np.append(s, action)[None])
        return float(q[0, 0])

    # -- checkpoints ---------------------------------------------------------

    def save(self, path):
        """Write networks, exploration scale and reward statistics; the
        replay buffer and optimizer moments are not saved."""
        arrays = {}
        for name in ("actor", "critic", "actor_target", "critic_target"):
            for i, p in enumerate(getattr(self, name).params):
                arrays[f"{name}_{i}"] = p
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "sigma": self.sigma,
            "updates": self.updates,
            "reward_stats": asdict(self.reward_stats),
        }
        buf = io.BytesIO()
        np.savez(buf, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
        with open(path, "wb") as f:
            f.write(buf.getvalue())

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            meta = json.loads(data["meta"].tobytes().decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise InputError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
            agent = cls(AgentConfig(**meta["config"]))
            for name in ("actor", "critic", "actor_target", "critic_target"):
                net = getattr(agent, name)
                net.params = [data[f"{name}_{i}"].copy() for i in range(len(net.params))]
        agent.actor_opt = Adam(agent.actor.params, agent.config.actor_lr)
        agent.critic_opt = Adam(agent.critic.params, agent.config.critic_lr)
        agent.sigma = meta["sigma"]
        agent.updates = meta["updates"]
        agent.reward_stats = RunningStats(**meta["reward_stats"])
        return agent
