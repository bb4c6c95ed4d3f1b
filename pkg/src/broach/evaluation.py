"""Policy evaluation with common random numbers, the paired signed-rank test,
hospitalizations-saved conversion and the across-county approximate interval.
"""
from __future__ import annotations

import csv
import hashlib
import os
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .env import World, run_episode

REFERENCE = "nws"
MEDICARE_POPULATION = 49_000_000
PER = 10_000
EXACT_MAX_N = 12
RESULT_COLUMNS = ("policy", "median_diff", "W", "p_value", "per_10k", "approx_total")


class DegenerateTestError(ValueError):
    """All paired differences are zero."""


# ---------------------------------------------------------------- rollouts


def county_streams(seed, county_id):
    """Independent episode and action generators for one county.

    Both depend only on ``(seed, county_id)``, so every policy evaluated with
    the same seed sees the same coefficient draws, trajectories and uniforms.
    """
    ss = np.random.SeedSequence([int(seed), zlib.crc32(str(county_id).encode())])
    ep_ss, act_ss = ss.spawn(2)
    return np.random.default_rng(ep_ss), np.random.default_rng(act_ss)


def evaluation_episodes(world: World, county_id, n_episodes, seed):
    """The ``n_episodes`` (episode, uniforms) pairs used for every policy of a county."""
    if county_id not in world.counties:
        raise KeyError(f"county {county_id!r} not in dataset")
    ep_rng, act_rng = county_streams(seed, county_id)
    pairs = []
    for _ in range(n_episodes):
        ep = world.sample_episode(county_id, "evaluate", ep_rng)
        pairs.append((ep, act_rng.random((ep.H, 2))))
    return pairs


def stream_digest(pairs) -> str:
    """Hash of the exogenous inputs and coefficient draws of an episode list."""
    h = hashlib.sha256()
    for ep, u in pairs:
        h.update(ep.spec.source_county.encode())
        h.update(np.int64(ep.spec.year).tobytes())
        for arr in (ep.lam_exo, ep.tau_exo, ep.endo, ep.traj.base_obs, u):
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def evaluate_policy(policy, world: World, county_id, n_episodes, seed, pairs=None) -> np.ndarray:
    """Episode returns of ``policy`` over evaluation-mode episodes of ``county_id``."""
    pairs = pairs if pairs is not None else evaluation_episodes(world, county_id, n_episodes, seed)
    return np.array([run_episode(ep, policy, uniforms=u).total for ep, u in pairs])


@dataclass
class CountyEval:
    """Per-county evaluation output; every policy shares the same episodes."""

    county_id: str
    returns: dict                       # policy name -> (n,) returns
    alerts: dict                        # policy name -> (n, H) effective alerts
    c2: np.ndarray                      # (n,)
    budgets: np.ndarray                 # (n,)
    tau_mean: np.ndarray                # (n,) season-mean tau with no alert history
    digest: str = ""
    thresholds: dict = field(default_factory=dict)


def evaluate_county(world: World, county_id, policies, n_episodes, seed) -> CountyEval:
    pairs = evaluation_episodes(world, county_id, n_episodes, seed)
    returns, alerts, thresholds = {}, {}, {}
    for pol in policies:
        if pol.name in returns:
            raise ValueError(f"duplicate policy name {pol.name!r}")
        res = [run_episode(ep, pol, uniforms=u) for ep, u in pairs]
        returns[pol.name] = np.array([r.total for r in res])
        alerts[pol.name] = np.array([r.effective for r in res], dtype=np.int8)
        if getattr(pol, "threshold", 0.0):
            thresholds[pol.name] = float(pol.threshold)
    c2 = np.array([ep.c2 for ep, _ in pairs])
    budgets = np.array([ep.budget for ep, _ in pairs])
    tau_mean = np.array([float(np.mean(stats.logistic.cdf(ep.tau_exo))) for ep, _ in pairs])
    return CountyEval(county_id, returns, alerts, c2, budgets, tau_mean, stream_digest(pairs),
                      thresholds)


# ---------------------------------------------------------------- signed-rank test


def _exact_upper_tail(ranks2: np.ndarray, w2: int) -> float:
    """P(sum of a random signed subset of ``ranks2`` >= ``w2``); integer (doubled) ranks."""
    total = int(ranks2.sum())
    dist = np.zeros(total + 1)
    dist[0] = 1.0
    for r in ranks2:
        r = int(r)
        nxt = dist.copy()
        nxt[r:] += dist[:total + 1 - r]
        dist = nxt
    dist /= 2.0 ** len(ranks2)
    return float(dist[w2:].sum())


def paired_rank_test(diffs, exact_max_n=EXACT_MAX_N) -> tuple[float, float]:
    """One-sided Wilcoxon signed-rank test of ``diffs > 0``.

    Zeros are dropped and tied ``|diff|`` share average ranks. The p-value is
    exact (enumeration of all sign patterns) for at most ``exact_max_n``
    non-zero differences, and otherwise uses the normal approximation with tie
    and continuity corrections.

    Returns
    -------
    (W, p_value)
        ``W`` is the sum of ranks of the positive differences.
    """
    d = np.asarray(diffs, dtype=float)
    if d.size < 2:
        raise ValueError("need at least two paired differences")
    if not np.all(np.isfinite(d)):
        raise ValueError("differences must be finite")
    d = d[d != 0]
    if d.size == 0:
        raise DegenerateTestError("all paired differences are zero")
    ranks = stats.rankdata(np.abs(d))
    W = float(ranks[d > 0].sum())
    n = d.size
    if n <= exact_max_n:
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        return W, _exact_upper_tail(ranks2, int(round(2 * W)))
    _, counts = np.unique(np.abs(d), return_counts=True)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(counts ** 3 - counts)) / 48.0
    z = (W - 0.5 - mean) / np.sqrt(var)
    return W, float(stats.norm.sf(z))


# ---------------------------------------------------------------- health units


def hosps_saved(policy_returns, reference_returns, c2, population=MEDICARE_POPULATION):
    """Hospitalizations saved per summer, per 10,000 people and in total.

    Each episode's return difference divided by its C2 is the per-capita
    reduction in hospitalizations over the summer. This is averaged per
    county and the median across counties is reported.

    Parameters
    ----------
    policy_returns, reference_returns, c2 : sequences of arrays
        One array of episode values per county.
    """
    per_county = [float(np.mean((np.asarray(p) - np.asarray(r)) / np.asarray(c)))
                  for p, r, c in zip(policy_returns, reference_returns, c2)]
    if not per_county:
        return 0.0, 0.0
    rate = float(np.median(per_county))
    return rate * PER, rate * population


def approx_ci(policy, reference, c2=None, scale=1.0, level=0.95) -> tuple[float, float]:
    """Quantiles over episodes of the across-county median difference.

    ``policy`` and ``reference`` are (county, episode) matrices. With ``c2``
    the differences are first converted to per-capita hospitalizations; the
    result is multiplied by ``scale``.
    """
    P = np.asarray(policy, dtype=float)
    R = np.asarray(reference, dtype=float)
    if P.shape != R.shape or P.ndim != 2:
        raise ValueError(f"shape mismatch: {P.shape} vs {R.shape}")
    D = P - R
    if c2 is not None:
        C = np.asarray(c2, dtype=float)
        if C.shape != D.shape:
            raise ValueError("c2 must match the return matrices")
        D = D / C
    med = np.median(D, axis=0) * scale
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(med, [a, 1.0 - a])
    return float(lo), float(hi)


# ---------------------------------------------------------------- report


@dataclass
class PolicyRow:
    policy: str
    median_diff: float
    W: float
    p_value: float
    per_10k: float
    approx_total: float
    ci_per_10k: tuple = (float("nan"), float("nan"))
    ci_total: tuple = (float("nan"), float("nan"))


@dataclass
class EvaluationReport:
    counties: list
    evals: dict                          # county -> CountyEval
    reference: str
    rows: list

    @property
    def policies(self) -> list[str]:
        return [r.policy for r in self.rows]

    def mean_returns(self, name) -> np.ndarray:
        return np.array([self.evals[c].returns[name].mean() for c in self.counties])

    def row(self, name) -> PolicyRow:
        for r in self.rows:
            if r.policy == name:
                return r
        raise KeyError(name)


def build_report(evals: list[CountyEval], reference=REFERENCE) -> EvaluationReport:
    """Table of every policy against ``reference`` across counties."""
    if not evals:
        raise ValueError("no county evaluations")
    names = list(evals[0].returns)
    for ev in evals:
        if list(ev.returns) != names:
            raise ValueError("every county must evaluate the same policies")
    if reference not in names:
        raise ValueError(f"reference policy {reference!r} was not evaluated")
    counties = [ev.county_id for ev in evals]
    ref_m = np.array([ev.returns[reference] for ev in evals])
    C = np.array([ev.c2 for ev in evals])
    rows = []
    for name in names:
        M = np.array([ev.returns[name] for ev in evals])
        diffs = M.mean(axis=1) - ref_m.mean(axis=1)
        try:
            W, p = paired_rank_test(diffs)
        except (DegenerateTestError, ValueError):
            W, p = float("nan"), float("nan")
        per10k, total = hosps_saved(M, ref_m, C)
        lo, hi = approx_ci(M, ref_m, C, scale=PER)
        rows.append(PolicyRow(name, float(np.median(diffs)), W, p, per10k, total, (lo, hi),
                              (lo / PER * MEDICARE_POPULATION, hi / PER * MEDICARE_POPULATION)))
    return EvaluationReport(counties, {ev.county_id: ev for ev in evals}, reference, rows)


def _fmt(x) -> str:
    return "nan" if x != x else repr(float(x))


def write_report(report: EvaluationReport, out_dir) -> list[str]:
    """Write ``results.csv``, ``ci.csv`` and one ``returns_<policy>.csv`` per policy."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    path = os.path.join(out_dir, "results.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in report.rows:
            w.writerow([r.policy, _fmt(r.median_diff), _fmt(r.W), _fmt(r.p_value), _fmt(r.per_10k),
                        _fmt(r.approx_total)])
    paths.append(path)
    path = os.path.join(out_dir, "ci.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "ci_low_per_10k", "ci_high_per_10k", "ci_low_total", "ci_high_total"])
        for r in report.rows:
            w.writerow([r.policy, *map(_fmt, r.ci_per_10k), *map(_fmt, r.ci_total)])
    paths.append(path)
    for name in report.policies:
        path = os.path.join(out_dir, f"returns_{name}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["county_id", "episode", "return", "c2", "budget"])
            for cid in report.counties:
                ev = report.evals[cid]
                for i, (g, c, b) in enumerate(zip(ev.returns[name], ev.c2, ev.budgets)):
                    w.writerow([cid, i, _fmt(g), _fmt(c), int(b)])
        paths.append(path)
    return paths
