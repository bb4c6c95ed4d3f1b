"""Command-line entry point: ``broach synth|fit-rewards|train|evaluate|explain``.

Every command reads one JSON config with a section per command. Outputs go
under ``--out`` (or the config's ``out``):

* ``data/``      dataset.csv, spatial.csv, truth.csv
* ``rewards/``   checkpoint.json, elbo_trace.csv, report.json
* ``policies/``  <county>_<name>.json per learned policy, thresholds.csv
* ``eval/``      results.csv, ci.csv, returns_<policy>.csv, profiles.json
* ``explain/``   tree_*.txt, tree_*.csv, profiles.csv

Exit codes: 0 success, 2 usage or config error, 3 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import agents as ag
from . import data as dc
from . import env as en
from . import evaluation as ev
from . import explain as ex
from . import policies as pol
from . import rewards as rw
from . import synth as sy

log = logging.getLogger("broach")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
COMMANDS = ("synth", "fit-rewards", "train", "evaluate", "explain")
YEAR_RANGE = (2006, 2016)
DEFAULT_BASELINES = ("Zero", "Random", "TopK", "BasicNWS", "NWSReplay")


class UsageError(Exception):
    """Bad config, flags or missing inputs (exit code 2)."""


CONFIG_ERRORS = (UsageError, sy.ConfigError, ag.AgentConfigError, pol.PolicyConfigError,
                 en.EnvConfigError, dc.SchemaError, FileNotFoundError, KeyError, ValueError)


@dataclass
class RunConfig:
    seed: int
    out: str
    train_years: tuple = en.TRAIN_YEARS
    eval_years: tuple = en.EVAL_YEARS
    synth: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    rewards: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    evaluate: dict = field(default_factory=dict)
    explain: dict = field(default_factory=dict)
    jobs: int = 1

    def __post_init__(self):
        ty, ey = set(self.train_years), set(self.eval_years)
        if ty & ey:
            raise UsageError("training and evaluation years overlap")
        lo, hi = YEAR_RANGE
        if not all(lo <= y <= hi for y in ty | ey):
            raise UsageError(f"years must lie in {lo}-{hi}")

    def path(self, *parts) -> str:
        return os.path.join(self.out, *parts)

    @property
    def dataset_path(self) -> str:
        return self.data.get("dataset") or self.path("data", "dataset.csv")

    @property
    def spatial_path(self) -> str:
        return self.data.get("spatial") or self.path("data", "spatial.csv")

    @property
    def truth_path(self) -> str:
        return self.data.get("truth") or self.path("data", "truth.csv")


SECTIONS = {"seed", "out", "train_years", "eval_years", "synth", "data", "rewards", "train",
            "evaluate", "explain"}


def load_config(path, seed=None, out=None, jobs=None) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(raw) - SECTIONS
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}")
    if seed is not None:
        raw["seed"] = seed
    if raw.get("seed") is None:
        raise UsageError("a seed is required (config 'seed' or --seed)")
    if out is not None:
        raw["out"] = out
    raw.setdefault("out", os.path.dirname(os.path.abspath(path)))
    raw["seed"] = int(raw["seed"])
    for key in ("train_years", "eval_years"):
        if key in raw:
            raw[key] = tuple(int(y) for y in raw[key])
    return RunConfig(jobs=max(1, int(jobs or 1)), **raw)


def _map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_star, [(fn, it) for it in items]))


def _star(arg):
    fn, it = arg
    return fn(*it)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------- synth


def cmd_synth(cfg: RunConfig) -> int:
    scfg = sy.SynthConfig.from_dict(cfg.synth)
    tables, truths = sy.generate_synthetic(scfg, cfg.seed)
    os.makedirs(os.path.dirname(cfg.dataset_path) or ".", exist_ok=True)
    dc.write_dataset(tables, cfg.dataset_path, cfg.spatial_path)
    rows = sy.truth_rows(truths)
    _write_csv(cfg.truth_path, ["county_id", "coefficient", "value"],
               [[r["county_id"], r["coefficient"], repr(r["value"])] for r in rows])
    log.info("wrote %d counties to %s", len(tables), cfg.dataset_path)
    return EXIT_OK


# ---------------------------------------------------------------- shared loaders


def _tables(cfg: RunConfig):
    for p in (cfg.dataset_path, cfg.spatial_path):
        if not os.path.exists(p):
            raise UsageError(f"dataset file missing: {p} (run 'broach synth' first)")
    return dc.load_dataset(cfg.dataset_path, cfg.spatial_path)


def load_truth(path, layout=rw.DEFAULT_LAYOUT) -> dict:
    vals: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals.setdefault(row["county_id"], {})[row["coefficient"]] = float(row["value"])
    out = {}
    for cid, d in vals.items():
        gamma = np.array([d[n] for n in layout.names])
        out[cid] = rw.CoefficientSet(gamma[:layout.n_lambda], gamma[layout.n_lambda:])
    return out


def _coefficients(cfg: RunConfig, section: dict):
    source = section.get("coefficients", "posterior")
    if source == "truth":
        if not os.path.exists(cfg.truth_path):
            raise UsageError(f"ground-truth file missing: {cfg.truth_path}")
        return en.FixedCoefficients(load_truth(cfg.truth_path))
    if source != "posterior":
        raise UsageError("coefficients must be 'posterior' or 'truth'")
    ck = cfg.path("rewards", "checkpoint.json")
    if not os.path.exists(ck):
        raise UsageError(f"rewards checkpoint missing: {ck} (run 'broach fit-rewards' first)")
    post, _, _ = rw.load_checkpoint(ck)
    return en.PosteriorCoefficients(post)


def _world(cfg: RunConfig, section: dict) -> en.World:
    return en.World.from_tables(_tables(cfg), _coefficients(cfg, section), cfg.train_years,
                                cfg.eval_years)


def _counties(section, world) -> list[str]:
    counties = [str(c) for c in section.get("counties", world.counties)]
    missing = [c for c in counties if c not in world.counties]
    if missing:
        raise UsageError(f"counties not in dataset: {missing}")
    return counties


# ---------------------------------------------------------------- fit-rewards


def cmd_fit_rewards(cfg: RunConfig) -> int:
    tables = _tables(cfg)
    try:
        tcfg = rw.TrainConfig.from_dict(cfg.rewards)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    post, prior, report = rw.fit(
        tables, tcfg, cfg.seed,
        progress=lambda e, v: log.info("epoch %d elbo %.3f", e + 1, v))
    d = cfg.path("rewards")
    os.makedirs(d, exist_ok=True)
    rw.save_checkpoint(os.path.join(d, "checkpoint.json"), post, prior, report, tcfg)
    _write_csv(os.path.join(d, "elbo_trace.csv"), ["epoch", "elbo"],
               [[i + 1, repr(float(v))] for i, v in enumerate(report.elbo_trace)])
    _dump_json(os.path.join(d, "report.json"),
               {"converged": report.converged, "epochs": report.epochs,
                "final_elbo": float(report.elbo_trace[-1]), "sigma": np.atleast_1d(prior.sigma).astype(float).tolist()})
    if not report.converged:
        warnings.warn("rewards model did not meet the convergence criterion")
        log.warning("rewards model not converged after %d epochs", report.epochs)
    return EXIT_OK


# ---------------------------------------------------------------- train


def _agent_config(section: dict, algo: str) -> ag.AgentConfig:
    base = dict(section.get("agent", {}))
    base.update(section.get("agents", {}).get(algo, {}))
    base["algo"] = algo
    return ag.AgentConfig.from_dict(base)


def _policy_file(cfg, county, name) -> str:
    return cfg.path("policies", f"{county}_{name}.json")


def _train_job(world, county, algo, acfg, grid, seed, n_val, unrestricted, out_paths):
    """One (county, algo) job: threshold search, plus an unrestricted agent if asked."""
    res = ag.tune_threshold(algo, world, county, acfg, grid, seed, n_val)
    rows = [(county, algo, res.h, res.scores[res.h])]
    meta = {"county_id": county, "h_star": res.h,
            "scores": {f"{h:.2f}": s for h, s in res.scores.items()}}
    if algo == "AAQHI":
        _dump_json(out_paths["qhi"], {"kind": "AAQHI", "params": {"h": res.h}, "meta": meta})
        return rows
    ag.save_policy(out_paths["qhi"], res.policy, meta)
    if unrestricted:
        pairs = ag.validation_set(world.with_future(acfg.future_info), county, n_val, seed)
        cfg = acfg.replace(seed=ag.job_seed(seed, county, algo, 0.0))
        policy, _ = ag.train(world, county, cfg, None, pairs[:acfg.checkpoint_episodes])
        ag.save_policy(out_paths["plain"], policy,
                       {"county_id": county, "score": ag.mean_return(policy, pairs)})
    return rows


def cmd_train(cfg: RunConfig) -> int:
    section = cfg.train
    algos = list(section.get("algos", ag.ALGOS))
    bad = [a for a in algos if a not in ag.ALGOS]
    if bad:
        raise UsageError(f"unknown algo(s) {bad}; valid algos: {', '.join(ag.ALGOS)}")
    world = _world(cfg, section)
    counties = _counties(section, world)
    grid = [pol.check_threshold(h) for h in section.get("grid", pol.THRESHOLD_GRID)]
    if not grid:
        raise UsageError("threshold grid is empty")
    n_val = int(section.get("val_episodes", 1000))
    unrestricted = bool(section.get("unrestricted", True))
    configs = {a: _agent_config(section, a) for a in algos}
    os.makedirs(cfg.path("policies"), exist_ok=True)
    jobs = []
    for county in counties:
        for algo in ["AAQHI"] + algos:
            tag = "aa" if algo == "AAQHI" else algo.lower()
            paths = {"qhi": _policy_file(cfg, county, f"{tag}.qhi"),
                     "plain": _policy_file(cfg, county, tag)}
            jobs.append((world, county, algo, configs.get(algo), grid, cfg.seed, n_val,
                         unrestricted, paths))
    rows = []
    for r in _map(_train_job, jobs, cfg.jobs):
        rows.extend(r)
        log.info("trained %s %s h*=%.2f", r[0][0], r[0][1], r[0][2])
    _write_csv(cfg.path("policies", "thresholds.csv"), ["county_id", "algo", "h_star", "val_return"],
               [[c, a, f"{h:.2f}", repr(float(s))] for c, a, h, s in rows])
    return EXIT_OK


# ---------------------------------------------------------------- evaluate


def _learned_policies(cfg: RunConfig, county, section) -> list:
    out = []
    tr = cfg.train
    algos = list(section.get("algos", tr.get("algos", ag.ALGOS)))
    names = ["aa.qhi"]
    for a in algos:
        names.append(f"{a.lower()}.qhi")
        if tr.get("unrestricted", True):
            names.append(a.lower())
    for name in names:
        path = _policy_file(cfg, county, name)
        if not os.path.exists(path):
            raise UsageError(f"missing policy checkpoint {path} (run 'broach train' first)")
        if name == "aa.qhi":
            with open(path) as fh:
                out.append(pol.aaqhi(json.load(fh)["params"]["h"]))
            continue
        p = ag.load_policy(path)
        out.append(p)
        if p.algo == "A2C" and section.get("deterministic_a2c", False):
            out.append(p.with_eval_mode("deterministic"))
    return out


def _policy_specs(section) -> list:
    specs = section.get("policies")
    if specs is None:
        return [pol.PolicySpec(k) for k in DEFAULT_BASELINES]
    return [pol.PolicySpec.from_json(s) for s in specs]


def _build(spec: pol.PolicySpec, cfg, county):
    if spec.kind != "Learned":
        return spec.build()
    path = spec.params.get("path", "").format(county=county, out=cfg.out)
    if not os.path.exists(path):
        raise UsageError(f"missing policy checkpoint {path}")
    return ag.load_policy(path, spec.eval_mode)


def _eval_job(world, county, policies, n, seed):
    return ev.evaluate_county(world, county, policies, n, seed)


def cmd_evaluate(cfg: RunConfig) -> int:
    section = cfg.evaluate
    specs = _policy_specs(section)
    world = _world(cfg, section)
    counties = _counties(section, world)
    n = int(section.get("n_episodes", 1000))
    reference = section.get("reference", ev.REFERENCE)
    jobs = []
    for county in counties:
        policies = [_build(s, cfg, county) for s in specs]
        if section.get("learned", True):
            policies += _learned_policies(cfg, county, section)
        jobs.append((world, county, policies, n, cfg.seed))
    evals = _map(_eval_job, jobs, cfg.jobs)
    try:
        report = ev.build_report(evals, reference)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    d = cfg.path("eval")
    ev.write_report(report, d)
    profiles = ex.build_profiles(report)
    _dump_json(os.path.join(d, "profiles.json"),
               [{k: v for k, v in asdict(p).items() if k != "spatial"} for p in profiles])
    for r in report.rows:
        log.info("%-12s median_diff %+.4f p %.3g", r.policy, r.median_diff, r.p_value)
    return EXIT_OK


# ---------------------------------------------------------------- explain


class ReturnSummary:
    """Per-county mean returns read back from ``returns_<policy>.csv``."""

    def __init__(self, eval_dir):
        with open(os.path.join(eval_dir, "results.csv"), newline="") as fh:
            self.policies = [r["policy"] for r in csv.DictReader(fh)]
        self.means = {}
        counties = []
        for name in self.policies:
            acc: dict = {}
            with open(os.path.join(eval_dir, f"returns_{name}.csv"), newline="") as fh:
                for r in csv.DictReader(fh):
                    acc.setdefault(r["county_id"], []).append(float(r["return"]))
                    if r["county_id"] not in counties:
                        counties.append(r["county_id"])
            self.means[name] = {c: float(np.mean(v)) for c, v in acc.items()}
        self.counties = counties

    def mean_returns(self, name) -> np.ndarray:
        return np.array([self.means[name][c] for c in self.counties])


def cmd_explain(cfg: RunConfig) -> int:
    section = cfg.explain
    d = cfg.path("eval")
    if not os.path.exists(os.path.join(d, "profiles.json")):
        raise UsageError(f"no evaluation output in {d} (run 'broach evaluate' first)")
    summary = ReturnSummary(d)
    tables = _tables(cfg)
    spatial = {cid: t.spatial for cid, t in tables.items()}
    with open(os.path.join(d, "profiles.json")) as fh:
        raw = json.load(fh)
    profiles = []
    for p in raw:
        p["streak_counts"] = {int(k): v for k, v in p["streak_counts"].items()}
        profiles.append(ex.PolicyProfile(spatial=spatial.get(p["county_id"]), **p))
    policy = section.get("policy", "a2c.qhi")
    reference = section.get("reference", ev.REFERENCE)
    candidates = section.get("candidates")
    try:
        rep = ex.contrastive_report(
            summary, profiles, policy, reference, candidates, spatial,
            int(section.get("min_leaf_regression", ex.MIN_LEAF_REGRESSION)),
            int(section.get("min_leaf_classification", ex.MIN_LEAF_CLASSIFICATION)))
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = cfg.path("explain")
    os.makedirs(out, exist_ok=True)
    ex.write_tree(rep.regression, out, "regression")
    ex.write_tree(rep.classification, out, "classification")
    ex.write_profiles(profiles, os.path.join(out, "profiles.csv"))
    _write_csv(os.path.join(out, "features.csv"), ["county_id", *rep.feature_names, "delta", "winner"],
               [[c, *map(repr, map(float, x)), repr(float(dv)), w]
                for c, x, dv, w in zip(rep.counties, rep.features, rep.delta, rep.winners)])
    return EXIT_OK


HANDLERS = {
    "synth": cmd_synth,
    "fit-rewards": cmd_fit_rewards,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="broach", description="Heat-alert RL environment and evaluation pipeline.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for per-county jobs")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out, args.jobs)
        return HANDLERS[args.command](cfg)
    except CONFIG_ERRORS as exc:
        print(f"broach {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"broach {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
