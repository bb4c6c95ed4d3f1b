"""Episodes per second of the compiled and pure-Python rollout kernels.

Usage::

    python3 benchmarks/bench_rollout.py --episodes 200

Every policy is rolled out on the same episodes and action uniforms with both
backends; the script also confirms the two produce identical rewards.
"""
import argparse
import time

import numpy as np

from broach import env, kernels, synth
from broach import policies as P
from broach.agents import AgentConfig, LearnedPolicy, build_network


def _policies(n_obs, rng):
    cfg = AgentConfig()
    return [
        P.TopKPolicy(),
        P.aaqhi(0.7),
        LearnedPolicy(build_network("A2C", n_obs, cfg, rng), "A2C", h=0.6),
        LearnedPolicy(build_network("DQN", n_obs, cfg, rng), "DQN"),
    ]


def _time(fn, pairs, pol, backend):
    start = time.perf_counter()
    totals = [fn(ep, pol, uniforms=u, backend=backend).total for ep, u in pairs]
    return time.perf_counter() - start, np.array(totals)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--episodes", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if kernels.compiled_rollout is None:
        raise SystemExit("compiled kernel not available; build with `pip install -e . --no-build-isolation`")
    tables, truths = synth.generate_synthetic(synth.SynthConfig(), args.seed)
    world = env.World.from_tables(tables, env.FixedCoefficients(truths))
    rng = np.random.default_rng(args.seed)
    pairs = []
    for k in range(args.episodes):
        ep = world.sample_episode(world.counties[k % len(world.counties)], "evaluate", rng)
        pairs.append((ep, rng.random((ep.H, 2))))

    print(f"{'policy':<10} {'compiled ep/s':>14} {'python ep/s':>12} {'speedup':>8}")
    for pol in _policies(pairs[0][0].n_obs, rng):
        t_c, r_c = _time(env.run_episode, pairs, pol, "compiled")
        t_p, r_p = _time(env.run_episode, pairs, pol, "python")
        if not np.array_equal(r_c, r_p):
            raise SystemExit(f"{pol.name}: backends disagree")
        n = len(pairs)
        print(f"{pol.name:<10} {n / t_c:>14.0f} {n / t_p:>12.0f} {t_p / t_c:>7.1f}x")


if __name__ == "__main__":
    main()
