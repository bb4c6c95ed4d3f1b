"""Alert policies: rule-based baselines and the QHI-restriction wrapper.

Every policy exposes ``prob_alert`` (probability of attempting an alert),
``act`` (one decision, consuming two uniforms from the caller's RNG) and
``kernel_args`` (the same behaviour expressed for the compiled rollout).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels

THRESHOLD_GRID = tuple(round(0.50 + 0.05 * i, 2) for i in range(9))
KINDS = ("Zero", "Random", "TopK", "BasicNWS", "AAQHI", "NWSReplay", "Learned")
EVAL_MODES = ("stochastic", "deterministic")
NORTH_HEAT_INDEX = 100.0
SOUTH_HEAT_INDEX = 105.0


class OracleError(RuntimeError):
    """A policy that needs the full-season trajectory was queried without it."""


class PolicyConfigError(ValueError):
    pass


def check_threshold(h) -> float:
    h = float(h)
    if not any(abs(h - g) < 1e-9 for g in THRESHOLD_GRID):
        raise PolicyConfigError(f"QHI threshold {h} not in grid {THRESHOLD_GRID}")
    return round(h, 2)


class Policy:
    name = "policy"
    eval_mode = "stochastic"
    threshold = 0.0
    needs_oracle = False

    def prob_alert(self, obs, ctx) -> float:
        raise NotImplementedError

    def decide(self, obs, ctx, u) -> int:
        p = self.prob_alert(obs, ctx)
        if self.eval_mode == "deterministic":
            return 1 if p > 0.5 else 0
        return 1 if u[0] < p else 0

    def act(self, obs, ctx, rng) -> int:
        return self.decide(obs, ctx, rng.random(2))

    def kernel_args(self, episode) -> dict:
        raise NotImplementedError


class _IntentPolicy(Policy):
    """Policies whose decisions are a fixed 0/1 sequence given the episode."""

    def intents(self, episode) -> np.ndarray:
        raise NotImplementedError

    def kernel_args(self, episode):
        return {"mode": kernels.MODE_INTENT, "intents": self.intents(episode).astype(np.int8)}


@dataclass(frozen=True)
class ZeroPolicy(_IntentPolicy):
    name = "zero"

    def prob_alert(self, obs, ctx):
        return 0.0

    def intents(self, episode):
        return np.zeros(episode.H, dtype=np.int8)


@dataclass(frozen=True)
class AlwaysPolicy(_IntentPolicy):
    """Attempts an alert every day; the budget clamp does the rest."""

    name = "always"

    def prob_alert(self, obs, ctx):
        return 1.0

    def intents(self, episode):
        return np.ones(episode.H, dtype=np.int8)


@dataclass(frozen=True)
class RandomPolicy(Policy):
    """Alerts with probability ``budget_remaining / days_remaining``.

    Sequentially this picks every subset of ``b`` days with equal probability.
    It is always stochastic.
    """

    name = "random"

    def prob_alert(self, obs, ctx):
        return ctx.budget_remaining / ctx.days_remaining

    def decide(self, obs, ctx, u):
        return 1 if u[0] < self.prob_alert(obs, ctx) else 0

    def kernel_args(self, episode):
        return {"mode": kernels.MODE_HAZARD}


def topk_days(qhi, b) -> np.ndarray:
    """Indicator of the ``b`` highest-QHI days; ties go to the earlier day."""
    qhi = np.asarray(qhi, dtype=float)
    order = np.lexsort((np.arange(qhi.size), -qhi))
    out = np.zeros(qhi.size, dtype=np.int8)
    out[order[:max(0, int(b))]] = 1
    return out


@dataclass(frozen=True)
class TopKPolicy(_IntentPolicy):
    """Oracle baseline: alerts on the season's ``b`` hottest days by QHI."""

    name = "topk"
    needs_oracle = True

    def prob_alert(self, obs, ctx):
        if ctx.qhi_episode is None:
            raise OracleError("TopK needs the full-season QHI vector")
        return float(topk_days(ctx.qhi_episode, ctx.budget)[ctx.t])

    def intents(self, episode):
        return topk_days(episode.traj.qhi, episode.budget)


@dataclass(frozen=True)
class BasicNWSPolicy(_IntentPolicy):
    """Alert when the raw heat index reaches 100F (northern) or 105F (southern)."""

    northern: bool | None = None
    name = "basic_nws"

    def _cut(self, northern):
        north = self.northern if self.northern is not None else northern
        return NORTH_HEAT_INDEX if north else SOUTH_HEAT_INDEX

    def prob_alert(self, obs, ctx):
        return 1.0 if ctx.heat_index >= self._cut(ctx.northern) else 0.0

    def intents(self, episode):
        return (episode.traj.heat_index >= self._cut(episode.northern)).astype(np.int8)


@dataclass(frozen=True)
class NWSReplayPolicy(_IntentPolicy):
    """Replays the alerts recorded with the trajectory."""

    name = "nws"

    def prob_alert(self, obs, ctx):
        return float(ctx.nws_alert)

    def intents(self, episode):
        return np.asarray(episode.traj.alerts, dtype=np.int8)


@dataclass(frozen=True)
class QHIWrapped(Policy):
    """Suppresses alerts on days with QHI below ``h``; otherwise defers to ``inner``."""

    inner: Policy = field(default_factory=ZeroPolicy)
    h: float = 0.5

    @property
    def name(self):
        if isinstance(self.inner, AlwaysPolicy):
            return "aa.qhi"
        return f"{self.inner.name}.qhi"

    @property
    def eval_mode(self):
        return self.inner.eval_mode

    @property
    def threshold(self):
        return max(self.h, self.inner.threshold)

    @property
    def needs_oracle(self):
        return self.inner.needs_oracle

    def prob_alert(self, obs, ctx):
        if obs[0] < self.h:
            return 0.0
        return self.inner.prob_alert(obs, ctx)

    def decide(self, obs, ctx, u):
        a = self.inner.decide(obs, ctx, u)
        return 0 if obs[0] < self.h else a

    def kernel_args(self, episode):
        kw = dict(self.inner.kernel_args(episode))
        kw["threshold"] = max(self.h, kw.get("threshold", 0.0))
        return kw


def qhi_wrap(inner: Policy, h) -> Policy:
    return QHIWrapped(inner, check_threshold(h))


def aaqhi(h) -> Policy:
    return qhi_wrap(AlwaysPolicy(), h)


def prob_alert(policy: Policy, obs, ctx) -> float:
    return policy.prob_alert(obs, ctx)


def act(policy: Policy, obs, ctx, rng) -> int:
    return policy.act(obs, ctx, rng)


@dataclass(frozen=True)
class PolicySpec:
    """Serializable description of a policy (``kind``, ``params``, ``eval_mode``)."""

    kind: str
    params: dict = field(default_factory=dict)
    eval_mode: str = "stochastic"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PolicyConfigError(f"unknown policy kind {self.kind!r}; expected one of {KINDS}")
        if self.eval_mode not in EVAL_MODES:
            raise PolicyConfigError(f"unknown eval_mode {self.eval_mode!r}")
        if self.kind == "AAQHI":
            check_threshold(self.params.get("h", float("nan")))

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "params": self.params, "eval_mode": self.eval_mode},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text) -> "PolicySpec":
        d = json.loads(text) if isinstance(text, str) else dict(text)
        return cls(d["kind"], dict(d.get("params", {})), d.get("eval_mode", "stochastic"))

    def build(self, loader=None) -> Policy:
        """Instantiate; ``loader(path, eval_mode)`` resolves learned checkpoints."""
        k, p = self.kind, self.params
        if k == "Zero":
            return ZeroPolicy()
        if k == "Random":
            return RandomPolicy()
        if k == "TopK":
            return TopKPolicy()
        if k == "BasicNWS":
            return BasicNWSPolicy(p.get("northern"))
        if k == "AAQHI":
            return aaqhi(p["h"])
        if k == "NWSReplay":
            return NWSReplayPolicy()
        if loader is None:
            from .agents import load_policy as loader
        if "path" not in p:
            raise PolicyConfigError("Learned policy spec needs a checkpoint path")
        return loader(p["path"], self.eval_mode)
