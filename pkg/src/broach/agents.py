"""DQN and advantage actor-critic agents, learned-policy checkpoints, and the
per-county QHI-threshold search.

Both agents collect one full episode per kernel call. The QHI restriction is an
action mask applied inside the rollout, so masked days never reach the learner
as alerts.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import kernels
from .env import World, run_episode
from .nn import MLP, Adam, clip_grad_norm
from .policies import THRESHOLD_GRID, Policy, aaqhi, check_threshold

ALGOS = ("DQN", "A2C")
CHECKPOINT_FORMAT = "broach-policy"
CHECKPOINT_VERSION = 1


class AgentConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentConfig:
    """Hyperparameters for one agent.

    ``buffer_or_rollout`` is the replay capacity (transitions) for DQN. A2C
    updates after every episode and ignores it. Exploration decays linearly
    from ``epsilon_start`` to ``epsilon_end`` over the first
    ``epsilon_fraction`` of training episodes.
    """

    algo: str = "A2C"
    learning_rate: float = 1e-3
    discount: float = 1.0
    hidden_layers: int = 2
    hidden_units: int = 32
    buffer_or_rollout: int = 1500
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_fraction: float = 0.5
    batch_size: int = 64
    train_freq: int = 4
    target_sync: int = 500
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    train_episodes: int = 10000
    val_episodes: int = 1000
    eval_every: int = 500
    checkpoint_episodes: int = 100
    future_info: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise AgentConfigError(f"unknown algo {self.algo!r}; valid algos: {', '.join(ALGOS)}")
        if not 0.0 < self.discount <= 1.0:
            raise AgentConfigError("discount must lie in (0, 1]")
        if self.hidden_layers not in (2, 3):
            raise AgentConfigError("hidden_layers must be 2 or 3")
        if self.hidden_units not in (16, 32):
            raise AgentConfigError("hidden_units must be 16 or 32")
        if self.buffer_or_rollout not in (1500, 3000):
            raise AgentConfigError("buffer_or_rollout must be 1500 or 3000")
        if self.learning_rate <= 0:
            raise AgentConfigError("learning_rate must be positive")
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise AgentConfigError("need 0 <= epsilon_end <= epsilon_start <= 1")
        for name in ("batch_size", "train_freq", "target_sync", "train_episodes", "val_episodes"):
            if getattr(self, name) < 1:
                raise AgentConfigError(f"{name} must be >= 1")
        if self.entropy_coef < 0 or self.eval_every < 0 or self.checkpoint_episodes < 0:
            raise AgentConfigError("entropy_coef, eval_every and checkpoint_episodes must be >= 0")

    @classmethod
    def from_dict(cls, d) -> "AgentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise AgentConfigError(f"unknown agent config keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "AgentConfig":
        d = self.to_dict()
        d.update(kw)
        return AgentConfig(**d)


def build_network(algo, n_obs, config: AgentConfig, rng) -> MLP:
    hidden = [config.hidden_units] * config.hidden_layers
    if algo == "DQN":
        return MLP([n_obs, *hidden, 2], "relu", rng)
    return MLP([n_obs, *hidden, 1], "tanh", rng, out_scale=0.01)


class LearnedPolicy(Policy):
    """Network-backed policy. DQN acts greedily on Q; A2C samples from sigmoid(logit).

    ``h`` (optional) applies the QHI mask. ``eval_mode`` defaults to
    deterministic for DQN and stochastic for A2C.
    """

    def __init__(self, net: MLP, algo, future_info=False, h=None, eval_mode=None):
        if algo not in ALGOS:
            raise AgentConfigError(f"unknown algo {algo!r}")
        self.net = net
        self.algo = algo
        self.future_info = bool(future_info)
        self.h = None if h is None else check_threshold(h)
        self.eval_mode = eval_mode or ("deterministic" if algo == "DQN" else "stochastic")
        self._packed = kernels.pack_mlp(net)

    @property
    def n_obs(self) -> int:
        return self.net.sizes[0]

    @property
    def name(self) -> str:
        name = self.algo.lower()
        if self.h is not None:
            name += ".qhi"
        if self.future_info:
            name += ".f"
        if self.algo == "A2C" and self.eval_mode == "deterministic":
            name = "det." + name
        return name

    @property
    def threshold(self) -> float:
        return 0.0 if self.h is None else self.h

    def _check_schema(self, n_obs):
        if n_obs != self.n_obs:
            raise ValueError(f"observation has {n_obs} features; policy expects {self.n_obs}")

    def prob_alert(self, obs, ctx):
        self._check_schema(len(obs))
        if self.h is not None and obs[0] < self.h:
            return 0.0
        out = self.net.forward(obs)
        if self.algo == "DQN":
            return 1.0 if out[1] > out[0] else 0.0
        return 1.0 / (1.0 + math.exp(-out[0]))

    def kernel_args(self, episode):
        self._check_schema(episode.n_obs)
        if self.algo == "DQN":
            mode = kernels.MODE_Q
        else:
            mode = kernels.MODE_LOGIT if self.eval_mode == "stochastic" else kernels.MODE_LOGIT_DET
        return {"mode": mode, "packed": self._packed, "epsilon": 0.0, "threshold": self.threshold}

    def with_eval_mode(self, eval_mode) -> "LearnedPolicy":
        return LearnedPolicy(self.net, self.algo, self.future_info, self.h, eval_mode)

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "algo": self.algo,
            "future_info": self.future_info,
            "h": self.h,
            "n_obs": self.n_obs,
            "eval_mode": self.eval_mode,
            "net": self.net.to_dict(),
        }

    @classmethod
    def from_dict(cls, d, eval_mode=None) -> "LearnedPolicy":
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a broach policy checkpoint (or unsupported version)")
        net = MLP.from_dict(d["net"])
        if net.sizes[0] != d["n_obs"]:
            raise ValueError("checkpoint input schema is inconsistent")
        return cls(net, d["algo"], d["future_info"], d["h"], eval_mode or d["eval_mode"])


def save_policy(path, policy: LearnedPolicy, extra=None) -> None:
    d = policy.to_dict()
    if extra:
        d["meta"] = extra
    with open(path, "w") as fh:
        json.dump(d, fh, sort_keys=True)


def load_policy(path, eval_mode=None) -> LearnedPolicy:
    with open(path) as fh:
        return LearnedPolicy.from_dict(json.load(fh), eval_mode)


@dataclass
class TrainReport:
    episode_returns: list
    val_scores: list      # (episode index, mean validation return)
    best_episode: int
    best_score: float
    grad_steps: int = 0


# ---------------------------------------------------------------- evaluation helpers


def validation_set(world: World, county_id, n, seed, mode="validate"):
    """``n`` fixed (episode, action-uniforms) pairs shared by every candidate."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(county_id.encode()), 7]))
    out = []
    for _ in range(n):
        ep = world.sample_episode(county_id, mode, rng)
        out.append((ep, rng.random((ep.H, 2))))
    return out


def mean_return(policy, pairs) -> float:
    if not pairs:
        return float("nan")
    return float(np.mean([run_episode(ep, policy, uniforms=u).total for ep, u in pairs]))


def linear_epsilon(i, n_episodes, config: AgentConfig) -> float:
    span = max(1.0, config.epsilon_fraction * n_episodes)
    frac = min(1.0, i / span)
    return config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start)


def discounted_returns(rewards, gamma) -> np.ndarray:
    out = np.empty(len(rewards))
    g = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        g = rewards[t] + gamma * g
        out[t] = g
    return out


class _Checkpointer:
    def __init__(self, pairs, every):
        self.pairs = pairs
        self.every = every
        self.best = None
        self.best_score = -np.inf
        self.best_episode = -1
        self.scores = []

    def consider(self, i, n_total, make_policy, net):
        last = i == n_total - 1
        if not self.pairs or not self.every:
            if last:
                self.best, self.best_episode = net.copy(), i
            return
        if (i + 1) % self.every and not last:
            return
        score = mean_return(make_policy(net), self.pairs)
        self.scores.append((i + 1, score))
        if score > self.best_score:
            self.best, self.best_score, self.best_episode = net.copy(), score, i


# ---------------------------------------------------------------- DQN


class ReplayBuffer:
    """Uniform-sampling ring buffer of (obs, action, reward, next_obs, done)."""

    def __init__(self, capacity, n_obs):
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, n_obs))
        self.next_obs = np.zeros((capacity, n_obs))
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.done = np.zeros(capacity)
        self.size = 0
        self.pos = 0

    def add_episode(self, obs, actions, rewards):
        H = len(rewards)
        for t in range(H):
            j = self.pos
            self.obs[j] = obs[t]
            self.next_obs[j] = obs[t + 1] if t + 1 < H else obs[t]
            self.action[j] = actions[t]
            self.reward[j] = rewards[t]
            self.done[j] = 1.0 if t == H - 1 else 0.0
            self.pos = (self.pos + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, n, rng):
        idx = rng.integers(self.size, size=n)
        return self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx], self.done[idx]


def alert_allowed(obs, h) -> np.ndarray:
    """Whether action 1 can take effect: QHI at or above ``h`` and budget left."""
    return (obs[..., 0] >= h) & (obs[..., 6] > 0)


def dqn_targets(target_net: MLP, rewards, next_obs, done, gamma, h) -> np.ndarray:
    """Bellman targets ``r + gamma * max_{allowed a'} Q_target(s', a')``; zero bootstrap at the end."""
    q_next = target_net.forward(next_obs)
    best = np.where(alert_allowed(next_obs, h), q_next.max(axis=1), q_next[:, 0])
    return rewards + gamma * (1.0 - done) * best


def dqn_update(net: MLP, target_net: MLP, opt: Adam, batch, gamma, h, max_grad_norm) -> float:
    obs, act, rew, nxt, done = batch
    y = dqn_targets(target_net, rew, nxt, done, gamma, h)
    q, acts = net.forward(obs, cache=True)
    rows = np.arange(len(act))
    resid = q[rows, act] - y
    loss = 0.5 * float(np.mean(resid ** 2))
    g_out = np.zeros_like(q)
    g_out[rows, act] = resid / len(act)
    grads = clip_grad_norm(net.backward(acts, g_out), max_grad_norm)
    opt.step(grads)
    return loss


def train_dqn(world: World, county_id, config: AgentConfig, h=None, validation=None,
              progress=None) -> tuple[LearnedPolicy, TrainReport]:
    """Train a DQN on train-mode episodes of ``county_id``.

    ``validation`` is a list of (episode, uniforms) pairs used to keep the best
    checkpoint; without it the final weights are returned.
    """
    if config.algo != "DQN":
        raise AgentConfigError("train_dqn needs algo = DQN")
    h = None if h is None else check_threshold(h)
    hv = 0.0 if h is None else h
    rng = np.random.default_rng(config.seed)
    world = world.with_future(config.future_info)
    n_obs = kernels.N_BASE_OBS + (16 if config.future_info else 0)
    net = build_network("DQN", n_obs, config, rng)
    target = net.copy()
    opt = Adam(net.params, lr=config.learning_rate)
    buf = ReplayBuffer(config.buffer_or_rollout, n_obs)
    ckpt = _Checkpointer(validation, config.eval_every)
    make = lambda n: LearnedPolicy(n, "DQN", config.future_info, h)  # noqa: E731
    returns, steps = [], 0
    for i in range(config.train_episodes):
        ep = world.sample_episode(county_id, "train", rng)
        eps = linear_epsilon(i, config.train_episodes, config)
        out = kernels.run(ep.traj.base_obs, ep.future, ep.lam_exo, ep.tau_exo, ep.endo, ep.c2,
                          ep.budget, kernels.MODE_Q, None, rng.random((ep.H, 2)),
                          kernels.pack_mlp(net), eps, hv, True)
        _, effective, rewards, _, _, _, _, obs = out
        returns.append(float(rewards.sum()))
        buf.add_episode(obs, effective, rewards)
        if buf.size >= config.batch_size:
            for _ in range(max(1, ep.H // config.train_freq)):
                loss = dqn_update(net, target, opt, buf.sample(config.batch_size, rng),
                                  config.discount, hv, config.max_grad_norm)
                steps += 1
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite DQN loss at gradient step {steps}")
                if steps % config.target_sync == 0:
                    target.load(net)
        ckpt.consider(i, config.train_episodes, make, net)
        if progress:
            progress(i, returns[-1])
    report = TrainReport(returns, ckpt.scores, ckpt.best_episode, ckpt.best_score, steps)
    return make(ckpt.best), report


# ---------------------------------------------------------------- A2C


def policy_gradient(actor: MLP, obs, actions, probs, returns, baseline, active, entropy_coef=0.0):
    """Ascent direction for the actor from one episode.

    The per-step signal on the logit is ``(a - p) * (G - b)`` plus
    ``entropy_coef * dH/dz`` with ``dH/dz = -z p (1 - p)``; steps that are not
    ``active`` (masked or budget-exhausted) contribute nothing. The result is
    averaged over the ``len(actions)`` steps.
    """
    z, acts = actor.forward(obs, cache=True)
    z = z[:, 0]
    p = np.asarray(probs, dtype=float)
    adv = np.asarray(returns, dtype=float) - np.asarray(baseline, dtype=float)
    g = (np.asarray(actions, dtype=float) - p) * adv
    if entropy_coef:
        g = g - entropy_coef * z * p * (1.0 - p)
    g = np.where(np.asarray(active, dtype=bool), g, 0.0) / len(p)
    return actor.backward(acts, g[:, None])


def train_a2c(world: World, county_id, config: AgentConfig, h=None, validation=None,
              progress=None) -> tuple[LearnedPolicy, TrainReport]:
    """Advantage actor-critic with Monte Carlo returns, one episode per update."""
    if config.algo != "A2C":
        raise AgentConfigError("train_a2c needs algo = A2C")
    h = None if h is None else check_threshold(h)
    hv = 0.0 if h is None else h
    rng = np.random.default_rng(config.seed)
    world = world.with_future(config.future_info)
    n_obs = kernels.N_BASE_OBS + (16 if config.future_info else 0)
    actor = build_network("A2C", n_obs, config, rng)
    critic = MLP([n_obs] + [config.hidden_units] * config.hidden_layers + [1], "tanh", rng)
    a_opt = Adam(actor.params, lr=config.learning_rate)
    c_opt = Adam(critic.params, lr=config.learning_rate)
    ckpt = _Checkpointer(validation, config.eval_every)
    make = lambda n: LearnedPolicy(n, "A2C", config.future_info, h)  # noqa: E731
    returns = []
    for i in range(config.train_episodes):
        ep = world.sample_episode(county_id, "train", rng)
        out = kernels.run(ep.traj.base_obs, ep.future, ep.lam_exo, ep.tau_exo, ep.endo, ep.c2,
                          ep.budget, kernels.MODE_LOGIT, None, rng.random((ep.H, 2)),
                          kernels.pack_mlp(actor), 0.0, hv, True)
        attempted, _, rewards, probs, forced, _, _, obs = out
        G = discounted_returns(rewards, config.discount)
        v, c_acts = critic.forward(obs, cache=True)
        v = v[:, 0]
        resid = v - G
        c_loss = 0.5 * float(np.mean(resid ** 2))
        if not math.isfinite(c_loss):
            raise TrainingError(f"non-finite critic loss at episode {i}")
        c_grads = critic.backward(c_acts, (resid / len(G))[:, None])
        c_opt.step(clip_grad_norm(c_grads, config.max_grad_norm))
        a_grads = policy_gradient(actor, obs, attempted, probs, G, v, forced == 0, config.entropy_coef)
        a_opt.step(clip_grad_norm(a_grads, config.max_grad_norm), ascent=True)
        returns.append(float(rewards.sum()))
        ckpt.consider(i, config.train_episodes, make, actor)
        if progress:
            progress(i, returns[-1])
    report = TrainReport(returns, ckpt.scores, ckpt.best_episode, ckpt.best_score)
    return make(ckpt.best), report


def train(world, county_id, config: AgentConfig, h=None, validation=None, progress=None):
    fn = train_dqn if config.algo == "DQN" else train_a2c
    return fn(world, county_id, config, h, validation, progress)


# ---------------------------------------------------------------- threshold search


def job_seed(seed, county_id, algo, h) -> int:
    """Deterministic per-job training seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(county_id.encode()),
                                 zlib.crc32(algo.encode()), int(round(100 * h))])
    return int(ss.generate_state(1)[0])


@dataclass
class TuneResult:
    h: float
    policy: Policy
    scores: dict          # h -> mean validation return
    reports: dict         # h -> TrainReport (learned policies only)


def tune_threshold(algo, world: World, county_id, config: AgentConfig | None = None,
                   grid=THRESHOLD_GRID, seed=0, n_val=None, progress=None) -> TuneResult:
    """Pick the QHI threshold with the best mean validation return (ties -> smaller h).

    ``algo`` is ``"DQN"``, ``"A2C"`` or ``"AAQHI"`` (no training). Every
    candidate is scored on the same validation episodes and action uniforms.
    """
    grid = sorted(check_threshold(h) for h in grid)
    if not grid:
        raise ValueError("threshold grid is empty")
    if algo not in ALGOS + ("AAQHI",):
        raise AgentConfigError(f"unknown algo {algo!r}; valid: DQN, A2C, AAQHI")
    if algo != "AAQHI":
        config = (config or AgentConfig(algo=algo)).replace(algo=algo)
    n_val = n_val if n_val is not None else (config.val_episodes if config else 1000)
    pairs = validation_set(world.with_future(bool(config and config.future_info)), county_id, n_val, seed)
    ckpt_pairs = pairs[:config.checkpoint_episodes] if config else None
    best_h, best_policy, best_score = None, None, -np.inf
    scores, reports = {}, {}
    for h in grid:
        if algo == "AAQHI":
            policy = aaqhi(h)
        else:
            cfg = config.replace(seed=job_seed(seed, county_id, algo, h))
            policy, reports[h] = train(world, county_id, cfg, h, ckpt_pairs)
        score = mean_return(policy, pairs)
        scores[h] = score
        if progress:
            progress(h, score)
        if best_h is None or score > best_score:
            best_h, best_policy, best_score = h, policy, score
    return TuneResult(best_h, best_policy, scores, reports)
