import warnings

import numpy as np
import pytest

from broach import data as dc
from broach import evaluation as ev
from broach import explain as ex


def test_streak_examples():
    assert ex.streak_lengths([0, 1, 1, 0, 1, 0, 0, 1, 1, 1]) == [2, 1, 3]
    assert ex.streak_lengths([1, 1, 1]) == [3]
    assert ex.streak_lengths([0, 0]) == []
    assert ex.streak_lengths([]) == []


def test_streaks_against_loop():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = (rng.random(rng.integers(1, 40)) < 0.4).astype(int)
        runs, cur = [], 0
        for v in a:
            if v:
                cur += 1
            elif cur:
                runs.append(cur)
                cur = 0
        if cur:
            runs.append(cur)
        assert ex.streak_lengths(a) == runs
        assert sum(ex.streak_lengths(a)) == a.sum()


def test_policy_profile():
    alerts = np.array([[1, 1, 0, 1, 0], [0, 0, 0, 1, 1]])
    pr = ex.policy_profile("c", "p", alerts, [0.2, 0.4], [3, 2])
    assert pr.streak_counts == {1: 1, 2: 2}
    assert pr.mean_streak == pytest.approx(5 / 3) and pr.max_streak == 2
    assert pr.median_alert_day == 3.0 and pr.mean_alerts == 2.5
    assert pr.tau_variance == pytest.approx(0.01) and pr.mean_budget == 2.5
    assert pr.total_streak_days == alerts.sum()
    empty = ex.policy_profile("c", "zero", np.zeros((2, 5)), [0.1, 0.1], [1, 1])
    assert np.isnan(empty.median_alert_day) and empty.mean_streak == 0.0


# ---------------------------------------------------------------- CART


def test_cart_one_dimensional_example():
    X = np.arange(10, dtype=float)[:, None]
    y = np.r_[np.zeros(5), np.ones(5)]
    tree = ex.cart_fit(X, y, min_leaf=2)
    assert tree.root.feature == 0 and tree.root.threshold == 4.5
    assert tree.depth == 1
    np.testing.assert_array_equal(tree.predict(X), y)
    assert ex.total_impurity(tree) == 0.0


def _sse(y):
    return float(np.sum((y - y.mean()) ** 2)) if y.size else 0.0


def _exhaustive_best(X, y, min_leaf):
    best = None
    for j in range(X.shape[1]):
        vals = np.unique(X[:, j])
        for a, b in zip(vals[:-1], vals[1:]):
            t = 0.5 * (a + b)
            m = X[:, j] <= t
            if m.sum() < min_leaf or (~m).sum() < min_leaf:
                continue
            imp = _sse(y[m]) + _sse(y[~m])
            if best is None or imp < best[0]:
                best = (imp, j, t)
    return best


@pytest.mark.parametrize("seed,min_leaf", [(0, 1), (1, 3), (2, 5)])
def test_cart_matches_exhaustive_search_at_every_node(seed, min_leaf):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, 4))
    y = np.sin(2 * X[:, 0]) + (X[:, 2] > 0.3) + 0.1 * rng.normal(size=60)
    tree = ex.cart_fit(X, y, min_leaf=min_leaf, max_depth=4)
    depth = {id(tree.root): 0}
    for node in tree.nodes():
        if not node.is_leaf:
            depth[id(node.left)] = depth[id(node.right)] = depth[id(node)] + 1
    for node in tree.nodes():
        idx = node.index
        best = _exhaustive_best(X[idx], y[idx], min_leaf)
        if node.is_leaf:
            if depth[id(node)] < 4:
                assert best is None or best[0] >= node.impurity - 1e-9
            continue
        assert best is not None
        assert node.feature == best[1] and node.threshold == pytest.approx(best[2])
        assert node.left.impurity + node.right.impurity == pytest.approx(best[0])


@pytest.mark.parametrize("min_leaf", [1, 2, 5, 9])
def test_cart_min_leaf_never_violated(min_leaf):
    rng = np.random.default_rng(min_leaf)
    X = rng.normal(size=(80, 3))
    y = rng.normal(size=80)
    for tree in (ex.cart_fit(X, y, min_leaf=min_leaf),
                 ex.cart_fit(X, (y > 0).astype(int), "classification", min_leaf)):
        assert all(leaf.n >= min_leaf for leaf in tree.leaves())
        assert sum(leaf.n for leaf in tree.leaves()) == 80


def test_cart_invariant_to_monotone_feature_transform():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(50, 3))
    y = X[:, 1] ** 2 + 0.1 * rng.normal(size=50)
    a = ex.cart_fit(X, y, min_leaf=4)
    Xt = np.column_stack([np.exp(X[:, 0]), X[:, 1] ** 3, 5 * X[:, 2] - 2])
    b = ex.cart_fit(Xt, y, min_leaf=4)
    np.testing.assert_allclose(a.predict(X), b.predict(Xt))
    assert [n.feature for n in a.nodes()] == [n.feature for n in b.nodes()]


def test_cart_separable_classification():
    X = np.array([[0.1, 5], [0.2, 3], [0.35, 1], [0.8, 2], [0.9, 4], [0.95, 0]])
    y = ["a", "a", "a", "b", "b", "b"]
    tree = ex.cart_fit(X, y, "classification", min_leaf=1)
    assert list(tree.predict(X)) == y
    assert tree.root.feature == 0 and tree.root.threshold == pytest.approx(0.575)
    assert tree.classes == ["a", "b"] and len(tree.leaves()) == 2


def test_cart_constant_target_is_single_leaf():
    X = np.random.default_rng(5).normal(size=(20, 2))
    tree = ex.cart_fit(X, np.full(20, 3.0), min_leaf=1)
    assert tree.root.is_leaf and tree.predict(X[:2]).tolist() == [3.0, 3.0]


def test_cart_small_sample_warns():
    with pytest.warns(UserWarning):
        tree = ex.cart_fit(np.arange(4.0)[:, None], [0, 1, 0, 1], min_leaf=3)
    assert tree.root.is_leaf


def test_cart_tie_breaking():
    # both features separate the data perfectly: the lower index wins
    X = np.array([[0, 10], [1, 11], [2, 12], [3, 13]], dtype=float)
    tree = ex.cart_fit(X, [0, 0, 1, 1], min_leaf=1)
    assert tree.root.feature == 0
    # symmetric target: thresholds 0.5 and 2.5 give equal impurity, the smaller wins
    tree = ex.cart_fit(np.arange(4.0)[:, None], [1.0, 0.0, 0.0, 1.0], min_leaf=1, max_depth=1)
    assert tree.root.threshold == 0.5


def test_cart_categorical_split():
    X = np.array([[0, 1.0], [1, 1.0], [2, 1.0], [1, 1.0], [0, 1.0], [2, 1.0]])
    y = [5.0, 0.0, 5.0, 0.0, 5.0, 5.0]
    tree = ex.cart_fit(X, y, min_leaf=1, categorical=(0,), feature_names=["region", "k"])
    assert tree.root.category == 1.0
    assert "region == 1" in tree.to_text()


def test_cart_text_and_rows():
    X = np.arange(10, dtype=float)[:, None]
    tree = ex.cart_fit(X, np.r_[np.zeros(5), np.ones(5)], min_leaf=2, feature_names=["budget"])
    text = tree.to_text()
    assert text.startswith("if budget <= 4.5") and text.count("leaf") == 2
    rows = tree.to_rows()
    assert rows[0]["feature"] == "budget" and rows[0]["left"] == 1 and rows[0]["right"] == 2


# ---------------------------------------------------------------- contrastive


def _spatial(cid, region, rng):
    return dc.SpatialFeatures(cid, region, population_density=float(rng.uniform(10, 1000)),
                              median_hh_income=float(rng.uniform(3e4, 9e4)),
                              democratic_pct=float(rng.uniform(0.2, 0.7)),
                              broadband_pct=float(rng.uniform(0.6, 0.95)), pm25=float(rng.uniform(5, 12)))


def _fake_report(budgets, gains, rng, n=6, H=10):
    evals, spatial = [], {}
    for k, (b, g) in enumerate(zip(budgets, gains)):
        cid = f"{k:05d}"
        spatial[cid] = _spatial(cid, dc.REGIONS[k % 3], rng)
        alerts = np.zeros((n, H), np.int8)
        alerts[:, :b] = 1
        returns = {"nws": np.zeros(n), "a2c.qhi": np.full(n, g) + 0.01 * rng.normal(size=n),
                   "aa.qhi": np.full(n, 0.1)}
        evals.append(ev.CountyEval(cid, returns, {name: alerts for name in returns}, np.full(n, 1e4),
                                   np.full(n, b), rng.uniform(0.3, 0.6, n)))
    return ev.build_report(evals), spatial


def test_budget_drives_root_split():
    rng = np.random.default_rng(6)
    budgets = rng.integers(1, 10, 30)
    gains = np.where(budgets <= 4, 1.0, -1.0)
    report, spatial = _fake_report(budgets, gains, rng)
    profiles = ex.build_profiles(report, spatial)
    rep = ex.contrastive_report(report, profiles, "a2c.qhi", "nws", ["a2c.qhi", "aa.qhi", "nws"], spatial)
    assert rep.regression.feature_names[rep.regression.root.feature] == "budget"
    assert rep.regression.root.threshold == pytest.approx(4.5)
    assert set(rep.winners) == {"a2c.qhi", "aa.qhi"}
    assert rep.classification.feature_names[rep.classification.root.feature] == "budget"
    assert rep.features.shape == (30, 4 + len(dc.COVARIATE_NAMES) + 1)
    assert all(leaf.n >= 5 for leaf in rep.regression.leaves())


def test_two_county_forced_split():
    rng = np.random.default_rng(7)
    report, spatial = _fake_report([2, 7], [1.0, -1.0], rng)
    profiles = ex.build_profiles(report, spatial)
    rep = ex.contrastive_report(report, profiles, "a2c.qhi", candidates=["a2c.qhi", "aa.qhi"],
                                spatial=spatial, min_leaf_regression=1, min_leaf_classification=1)
    assert rep.regression.root.feature == 0 and len(rep.regression.leaves()) == 2
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        small = ex.contrastive_report(report, profiles, "a2c.qhi", spatial=spatial)
    assert small.regression.root.is_leaf and len(caught) == 2
    with pytest.raises(KeyError):
        ex.contrastive_report(report, profiles, "dqn", spatial=spatial)


def test_write_tree(tmp_path):
    tree = ex.cart_fit(np.arange(6.0)[:, None], [0, 0, 0, 1, 1, 1], min_leaf=1)
    paths = ex.write_tree(tree, tmp_path, "regression")
    assert [p.split("/")[-1] for p in paths] == ["tree_regression.txt", "tree_regression.csv"]
    assert (tmp_path / "tree_regression.csv").read_text().startswith("node,n,impurity")


def test_profiles_written(tmp_path):
    rng = np.random.default_rng(8)
    report, spatial = _fake_report([2, 3, 4], [0.0, 0.1, 0.2], rng)
    profiles = ex.build_profiles(report, spatial)
    assert len(profiles) == 9
    ex.write_profiles(profiles, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0].split(",") == list(ex.PROFILE_COLUMNS) and len(lines) == 10


def test_exhaustive_oracle_self_check():
    """The brute-force oracle agrees with itself under column permutation."""
    rng = np.random.default_rng(9)
    X = rng.normal(size=(15, 3))
    y = rng.normal(size=15)
    a = _exhaustive_best(X, y, 2)
    b = _exhaustive_best(X[:, ::-1], y, 2)
    assert a[0] == pytest.approx(b[0]) and a[1] == 2 - b[1]
