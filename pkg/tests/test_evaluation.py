import itertools
import math

import numpy as np
import pytest

from broach import env, evaluation as ev
from broach import policies as P
from broach.evaluation import DegenerateTestError, paired_rank_test


def _brute_force_p(diffs):
    """Upper-tail probability by enumerating every sign pattern (average ranks)."""
    d = np.asarray(diffs, dtype=float)
    d = d[d != 0]
    absd = np.abs(d)
    order = np.argsort(absd)
    ranks = np.empty(d.size)
    i = 0
    while i < d.size:
        j = i
        while j + 1 < d.size and absd[order[j + 1]] == absd[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    w = ranks[d > 0].sum()
    hits = sum(1 for signs in itertools.product((0, 1), repeat=d.size)
               if np.dot(signs, ranks) >= w - 1e-9)
    return w, hits / 2 ** d.size


def test_signed_rank_examples():
    assert paired_rank_test([1, 2, 3]) == (6.0, 0.125)
    W, p = paired_rank_test([-1, -2])
    assert W == 0.0 and p == 1.0
    W, p = paired_rank_test(np.arange(1, 31) * 0.1)
    assert W == 465.0 and p < 1e-5


def test_signed_rank_against_enumeration():
    rng = np.random.default_rng(0)
    for n in range(2, 9):
        for _ in range(25):
            d = np.round(rng.normal(0.3, 1.0, n), 1)       # rounding creates ties
            if not np.any(d):
                continue
            W, p = paired_rank_test(d)
            W_bf, p_bf = _brute_force_p(d)
            assert W == pytest.approx(W_bf)
            assert p == pytest.approx(p_bf, abs=1e-12)


@pytest.mark.parametrize("n", range(4, 13))
def test_normal_approximation_close_to_exact(n):
    rng = np.random.default_rng(n)
    for _ in range(40):
        d = rng.normal(0.2, 1.0, n)
        _, exact = paired_rank_test(d)
        _, approx = paired_rank_test(d, exact_max_n=0)
        assert abs(exact - approx) < 0.03


def test_signed_rank_invariant_to_odd_monotone_transform():
    rng = np.random.default_rng(1)
    for n in (5, 12, 25):
        d = rng.normal(0.1, 1.0, n)
        assert paired_rank_test(d) == paired_rank_test(np.sinh(3 * d) + d ** 3)


def test_signed_rank_errors():
    with pytest.raises(DegenerateTestError):
        paired_rank_test([0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        paired_rank_test([1.0])
    with pytest.raises(ValueError):
        paired_rank_test([1.0, np.nan])


def test_hosps_saved_examples():
    per10k, total = ev.hosps_saved([np.array([0.042])], [np.zeros(1)], [np.array([1e4])])
    assert per10k == pytest.approx(0.042)
    assert total == pytest.approx(0.042 * 1e-4 * 49e6)
    assert round(total) == 206
    # median across counties of the per-county mean of diff / C2
    p = [np.array([2.0, 4.0]), np.array([1.0, 1.0]), np.array([9.0, 9.0])]
    r = [np.zeros(2)] * 3
    c = [np.array([1e4, 1e4]), np.array([2e4, 2e4]), np.array([1e4, 1e4])]
    per10k, _ = ev.hosps_saved(p, r, c)
    assert per10k == pytest.approx(3.0)           # per-county rates 3, 0.5 and 9
    assert ev.hosps_saved([], [], []) == (0.0, 0.0)


def test_approx_ci_examples():
    P_ = np.array([[1.0, 2.0, 3.0, 4.0], [2.0, 2.0, 2.0, 2.0], [0.0, 5.0, 1.0, 3.0]])
    R = np.zeros_like(P_)
    lo, hi = ev.approx_ci(P_, R)
    med = np.median(P_, axis=0)                       # [1, 2, 2, 3]
    assert (lo, hi) == pytest.approx(tuple(np.quantile(med, [0.025, 0.975])))
    lo, hi = ev.approx_ci(np.ones((2, 5)), np.zeros((2, 5)))
    assert lo == hi == 1.0
    with pytest.raises(ValueError):
        ev.approx_ci(np.ones((2, 3)), np.ones((3, 2)))


def test_approx_ci_brute_force():
    rng = np.random.default_rng(2)
    Pm, Rm, C = rng.normal(size=(5, 40)), rng.normal(size=(5, 40)), rng.uniform(1e3, 1e4, (5, 40))
    meds = []
    for e in range(40):
        col = sorted((Pm[k, e] - Rm[k, e]) / C[k, e] for k in range(5))
        meds.append(col[2] * 1e4)
    meds.sort()
    lo, hi = ev.approx_ci(Pm, Rm, C, scale=1e4)
    # numpy's default linear interpolation between order statistics
    pos = 0.025 * 39
    assert lo == pytest.approx(meds[0] + (pos - math.floor(pos)) * (meds[1] - meds[0]))
    pos = 0.975 * 39
    k = math.floor(pos)
    assert hi == pytest.approx(meds[k] + (pos - k) * (meds[k + 1] - meds[k]))


def test_common_random_numbers(truth_world):
    cid = truth_world.counties[0]
    a = ev.evaluation_episodes(truth_world, cid, 20, seed=3)
    b = ev.evaluation_episodes(truth_world, cid, 20, seed=3)
    assert ev.stream_digest(a) == ev.stream_digest(b)
    assert ev.stream_digest(a) != ev.stream_digest(ev.evaluation_episodes(truth_world, cid, 20, seed=4))
    e1 = ev.evaluate_county(truth_world, cid, [P.ZeroPolicy(), P.NWSReplayPolicy()], 20, 3)
    e2 = ev.evaluate_county(truth_world, cid, [P.AlwaysPolicy(), P.ZeroPolicy()], 20, 3)
    assert e1.digest == e2.digest
    np.testing.assert_array_equal(e1.returns["zero"], e2.returns["zero"])
    with pytest.raises(KeyError):
        ev.evaluation_episodes(truth_world, "nope", 2, 0)


def test_return_identities(truth_world):
    """Zero's return is H minus C2 times summed baseline rates; NWS replay adds back the alert savings."""
    cid = truth_world.counties[1]
    pairs = ev.evaluation_episodes(truth_world, cid, 25, seed=1)
    for ep, u in pairs:
        zero = env.run_episode(ep, P.ZeroPolicy(), uniforms=u)
        assert zero.total == pytest.approx(ep.H - ep.c2 * zero.lam.sum(), abs=1e-10)
        nws = env.run_episode(ep, P.NWSReplayPolicy(), uniforms=u)
        a = nws.effective
        # general form: both returns written through the realized rates of each rollout
        diff = ep.c2 * (zero.lam.sum() - np.sum(nws.lam * (1 - a * nws.tau)))
        assert nws.total - zero.total == pytest.approx(diff, abs=1e-10)


def _fake_eval(cid, returns, c2=1e4):
    n = len(next(iter(returns.values())))
    return ev.CountyEval(cid, {k: np.asarray(v, float) for k, v in returns.items()},
                         {k: np.zeros((n, 3), np.int8) for k in returns}, np.full(n, c2),
                         np.ones(n, int), np.full(n, 0.5))


def test_build_report_and_write(tmp_path):
    evals = [_fake_eval(f"c{k}", {"nws": [0.0, 0.0], "better": [k + 1.0, k + 2.0]}) for k in range(4)]
    rep = ev.build_report(evals)
    row = rep.row("better")
    assert row.median_diff == pytest.approx(np.median([1.5, 2.5, 3.5, 4.5]))
    assert row.W == 10.0 and row.p_value == pytest.approx(1 / 16)
    assert np.isnan(rep.row("nws").W)
    paths = ev.write_report(rep, tmp_path)
    assert {p.split("/")[-1] for p in paths} == {"results.csv", "ci.csv", "returns_nws.csv",
                                                 "returns_better.csv"}
    header = (tmp_path / "results.csv").read_text().splitlines()[0]
    assert header == ",".join(ev.RESULT_COLUMNS)
    with pytest.raises(ValueError):
        ev.build_report(evals, reference="zero")
