import numpy as np
import pytest

from broach import env, kernels
from broach import policies as P
from broach.agents import AgentConfig, LearnedPolicy, build_network

compiled = pytest.mark.skipif(kernels.compiled_rollout is None, reason="extension not built")


def _policies(n_obs, rng, future):
    cfg = AgentConfig(hidden_layers=2, hidden_units=16)
    dqn = LearnedPolicy(build_network("DQN", n_obs, cfg, rng), "DQN", future)
    a2c_net = build_network("A2C", n_obs, cfg, rng)
    # bigger output weights so the logits actually vary
    a2c_net.params[-2][:] *= 300.0
    a2c = LearnedPolicy(a2c_net, "A2C", future)
    return [
        P.ZeroPolicy(), P.AlwaysPolicy(), P.RandomPolicy(), P.TopKPolicy(), P.BasicNWSPolicy(),
        P.NWSReplayPolicy(), P.aaqhi(0.7), P.qhi_wrap(P.RandomPolicy(), 0.6),
        dqn, LearnedPolicy(dqn.net, "DQN", future, h=0.8),
        a2c, a2c.with_eval_mode("deterministic"), LearnedPolicy(a2c_net, "A2C", future, h=0.55),
    ]


@compiled
@pytest.mark.parametrize("future", [False, True])
def test_compiled_matches_python(truth_world, future):
    world = truth_world.with_future(future)
    rng = np.random.default_rng(0)
    pol_rng = np.random.default_rng(1)
    for i in range(6):
        cid = world.counties[i % len(world.counties)]
        ep = world.sample_episode(cid, ("train", "validate", "evaluate")[i % 3], rng)
        U = rng.random((ep.H, 2))
        for pol in _policies(ep.n_obs, pol_rng, future):
            a = env.run_episode(ep, pol, uniforms=U, record_obs=True, backend="python")
            b = env.run_episode(ep, pol, uniforms=U, record_obs=True, backend="compiled")
            np.testing.assert_array_equal(a.effective, b.effective, err_msg=pol.name)
            np.testing.assert_array_equal(a.attempted, b.attempted, err_msg=pol.name)
            np.testing.assert_array_equal(a.forced, b.forced)
            np.testing.assert_allclose(a.rewards, b.rewards, rtol=1e-13, atol=1e-13)
            np.testing.assert_allclose(a.probs, b.probs, rtol=1e-12, atol=1e-13)
            np.testing.assert_allclose(a.obs, b.obs, rtol=0, atol=0)


@compiled
def test_epsilon_greedy_agrees(truth_world):
    rng = np.random.default_rng(2)
    ep = truth_world.sample_episode(truth_world.counties[0], "train", rng)
    net = build_network("DQN", ep.n_obs, AgentConfig(), rng)
    packed = kernels.pack_mlp(net)
    U = rng.random((ep.H, 2))
    args = (ep.traj.base_obs, ep.future, ep.lam_exo, ep.tau_exo, ep.endo, ep.c2, ep.budget,
            kernels.MODE_Q, None, U, packed, 0.3, 0.0, False)
    a = kernels.run(*args, backend="python")
    b = kernels.run(*args, backend="compiled")
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_allclose(a[2], b[2], rtol=1e-13)


def test_kernel_matches_step_loop(truth_world):
    """The kernel and the step-by-step environment give the same episode."""
    rng = np.random.default_rng(3)
    cid = truth_world.counties[1]
    for pol in _policies(8, np.random.default_rng(4), False):
        ep = truth_world.sample_episode(cid, "evaluate", rng)
        res = env.run_episode(ep, pol, action_rng=np.random.default_rng(9), record_obs=True)
        e = env.BroachEnv(truth_world, cid, "evaluate")
        obs = e.reset(ep)
        arng = np.random.default_rng(9)
        rewards, acts = [], []
        while not e.done:
            np.testing.assert_allclose(obs, res.obs[e.t], rtol=0, atol=1e-15)
            a = pol.act(obs, e.context(oracle=True), arng)
            obs, r, _, info = e.step(a)
            rewards.append(r)
            acts.append(info["effective_action"])
        np.testing.assert_array_equal(acts, res.effective, err_msg=pol.name)
        np.testing.assert_allclose(rewards, res.rewards, rtol=1e-13, atol=1e-13)


def test_unknown_backend_falls_back_cleanly(truth_world, monkeypatch):
    ep = truth_world.sample_episode(truth_world.counties[0], "evaluate", np.random.default_rng(0))
    monkeypatch.setattr(kernels, "compiled_rollout", None)
    with pytest.raises(RuntimeError):
        env.run_episode(ep, P.ZeroPolicy(), backend="compiled")
    assert env.run_episode(ep, P.ZeroPolicy(), backend="python").total < ep.H
