"""Contrastive analysis of evaluated policies: alert-pattern profiles and CART trees."""
from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import data as dc

TASKS = ("regression", "classification")
MIN_LEAF_REGRESSION = 5
MIN_LEAF_CLASSIFICATION = 3


# ---------------------------------------------------------------- alert patterns


def streak_lengths(alerts) -> list[int]:
    """Lengths of the maximal runs of consecutive alerts, in order."""
    a = np.asarray(alerts, dtype=np.int8).ravel()
    if a.size == 0:
        return []
    padded = np.concatenate([[0], (a != 0).astype(np.int8), [0]])
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [int(e - s) for s, e in zip(starts, ends)]


@dataclass
class PolicyProfile:
    """Alert behaviour of one policy in one county, over its evaluation episodes."""

    county_id: str
    policy: str
    median_alert_day: float
    mean_alerts: float
    mean_streak: float
    max_streak: int
    streak_counts: dict          # streak length -> number of streaks
    tau_variance: float
    mean_budget: float
    spatial: dc.SpatialFeatures | None = None

    @property
    def total_streak_days(self) -> int:
        return int(sum(k * v for k, v in self.streak_counts.items()))


def policy_profile(county_id, policy, alerts, tau_mean, budgets, spatial=None) -> PolicyProfile:
    """Summarize an (episodes, H) matrix of effective alerts."""
    alerts = np.asarray(alerts, dtype=np.int8)
    counts: dict = {}
    for row in alerts:
        for k in streak_lengths(row):
            counts[k] = counts.get(k, 0) + 1
    days = np.nonzero(alerts)[1]
    n_streaks = sum(counts.values())
    return PolicyProfile(
        county_id=county_id,
        policy=policy,
        median_alert_day=float(np.median(days)) if days.size else float("nan"),
        mean_alerts=float(alerts.sum(axis=1).mean()) if alerts.size else 0.0,
        mean_streak=float(sum(k * v for k, v in counts.items()) / n_streaks) if n_streaks else 0.0,
        max_streak=max(counts) if counts else 0,
        streak_counts=dict(sorted(counts.items())),
        tau_variance=float(np.var(np.asarray(tau_mean, dtype=float))),
        mean_budget=float(np.mean(budgets)),
        spatial=spatial,
    )


def build_profiles(report, spatial: dict | None = None) -> list[PolicyProfile]:
    out = []
    for cid in report.counties:
        ev = report.evals[cid]
        sp = spatial.get(cid) if spatial else None
        for name in ev.alerts:
            out.append(policy_profile(cid, name, ev.alerts[name], ev.tau_mean, ev.budgets, sp))
    return out


PROFILE_COLUMNS = ("county_id", "policy", "mean_alerts", "median_alert_day", "mean_streak",
                   "max_streak", "tau_variance", "mean_budget", "streaks")


def write_profiles(profiles, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROFILE_COLUMNS)
        for p in profiles:
            streaks = ";".join(f"{k}:{v}" for k, v in p.streak_counts.items())
            w.writerow([p.county_id, p.policy, repr(p.mean_alerts), repr(p.median_alert_day),
                        repr(p.mean_streak), p.max_streak, repr(p.tau_variance),
                        repr(p.mean_budget), streaks])


# ---------------------------------------------------------------- CART


@dataclass
class Node:
    n: int
    prediction: np.ndarray        # [mean] for regression, class probabilities otherwise
    impurity: float               # SSE or n * Gini
    feature: int | None = None
    threshold: float | None = None
    category: float | None = None  # set for categorical one-vs-rest splits
    left: "Node | None" = None
    right: "Node | None" = None
    index: np.ndarray | None = field(default=None, repr=False)

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def goes_left(self, x) -> bool:
        if self.category is not None:
            return x[self.feature] == self.category
        return x[self.feature] <= self.threshold


def _impurity(y, task, n_classes):
    if task == "regression":
        return float(np.sum((y - y.mean()) ** 2)) if y.size else 0.0
    counts = np.bincount(y, minlength=n_classes)
    return float(y.size - np.sum(counts ** 2) / y.size) if y.size else 0.0


def _prediction(y, task, n_classes):
    if task == "regression":
        return np.array([y.mean()])
    return np.bincount(y, minlength=n_classes) / y.size


def _best_numeric(x, y, task, n_classes, min_leaf, tol=0.0):
    """Best ``x <= threshold`` split over midpoints; returns (impurity, threshold) or None.

    A later candidate must beat the current best by more than ``tol``.
    """
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = xs.size
    if task == "regression":
        cs, cs2 = np.cumsum(ys), np.cumsum(ys * ys)
        tot, tot2 = cs[-1], cs2[-1]
    else:
        onehot = np.eye(n_classes)[ys]
        cc = np.cumsum(onehot, axis=0)
        tot_c = cc[-1]
    best = None
    for i in range(min_leaf - 1, n - min_leaf):
        if xs[i] == xs[i + 1]:
            continue
        nl, nr = i + 1, n - i - 1
        if task == "regression":
            sl, sr = cs[i], tot - cs[i]
            imp = (cs2[i] - sl * sl / nl) + ((tot2 - cs2[i]) - sr * sr / nr)
        else:
            cl, cr = cc[i], tot_c - cc[i]
            imp = (nl - np.sum(cl * cl) / nl) + (nr - np.sum(cr * cr) / nr)
        if best is None or imp < best[0] - tol:
            best = (float(imp), 0.5 * (xs[i] + xs[i + 1]))
    return best


def _best_categorical(x, y, task, n_classes, min_leaf, tol=0.0):
    best = None
    for v in np.unique(x):
        mask = x == v
        nl = int(mask.sum())
        if nl < min_leaf or x.size - nl < min_leaf:
            continue
        imp = _impurity(y[mask], task, n_classes) + _impurity(y[~mask], task, n_classes)
        if best is None or imp < best[0] - tol:
            best = (imp, float(v))
    return best


@dataclass
class CartTree:
    root: Node
    task: str
    min_leaf: int
    feature_names: list
    classes: list | None = None
    categorical: frozenset = frozenset()

    def _leaf(self, x) -> Node:
        node = self.root
        while not node.is_leaf:
            node = node.left if node.goes_left(x) else node.right
        return node

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.task == "regression":
            return np.array([self._leaf(x).prediction[0] for x in X])
        return np.array([self.classes[int(np.argmax(self._leaf(x).prediction))] for x in X],
                        dtype=object)

    def leaves(self) -> list[Node]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                out.append(node)
            else:
                stack.extend([node.right, node.left])
        return out

    def nodes(self) -> list[Node]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            out.append(node)
            if not node.is_leaf:
                stack.extend([node.right, node.left])
        return out

    @property
    def depth(self) -> int:
        def d(node):
            return 0 if node.is_leaf else 1 + max(d(node.left), d(node.right))
        return d(self.root)

    def _describe(self, node) -> str:
        name = self.feature_names[node.feature]
        if node.category is not None:
            return f"{name} == {node.category:g}"
        return f"{name} <= {node.threshold:.6g}"

    def _pred_text(self, node) -> str:
        if self.task == "regression":
            return f"value={node.prediction[0]:.6g}"
        probs = ", ".join(f"{c}={p:.3f}" for c, p in zip(self.classes, node.prediction))
        return f"class={self.classes[int(np.argmax(node.prediction))]} ({probs})"

    def to_text(self) -> str:
        lines = []

        def walk(node, depth):
            pad = "  " * depth
            if node.is_leaf:
                lines.append(f"{pad}leaf n={node.n} {self._pred_text(node)}")
                return
            lines.append(f"{pad}if {self._describe(node)}  (n={node.n})")
            walk(node.left, depth + 1)
            lines.append(f"{pad}else  (n={node.n})")
            walk(node.right, depth + 1)

        walk(self.root, 0)
        return "\n".join(lines) + "\n"

    def to_rows(self) -> list[dict]:
        rows, ids = [], {}
        for i, node in enumerate(self.nodes()):
            ids[id(node)] = i
        for node in self.nodes():
            rows.append({
                "node": ids[id(node)],
                "n": node.n,
                "impurity": node.impurity,
                "feature": "" if node.is_leaf else self.feature_names[node.feature],
                "threshold": "" if node.is_leaf or node.category is not None else node.threshold,
                "category": "" if node.category is None else node.category,
                "left": "" if node.is_leaf else ids[id(node.left)],
                "right": "" if node.is_leaf else ids[id(node.right)],
                "prediction": self._pred_text(node) if node.is_leaf else "",
            })
        return rows


def cart_fit(X, y, task="regression", min_leaf=MIN_LEAF_REGRESSION, feature_names=None,
             categorical=(), max_depth=None) -> CartTree:
    """Greedy top-down CART.

    Regression minimizes the summed squared deviation; classification the
    n-weighted Gini impurity. Numeric features split at midpoints between
    consecutive distinct values (``x <= t`` goes left); columns listed in
    ``categorical`` split one-vs-rest (``x == v`` goes left). A node is split
    only when both children hold at least ``min_leaf`` samples and the total
    impurity strictly decreases. Equal-impurity candidates resolve to the
    lowest feature index, then the smallest threshold.

    With fewer than ``2 * min_leaf`` samples the result is a single leaf and a
    warning is issued.
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    if min_leaf < 1:
        raise ValueError("min_leaf must be >= 1")
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be 2-D")
    n, p = X.shape
    if n == 0:
        raise ValueError("no samples")
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(p)]
    classes = None
    if task == "regression":
        yv = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(yv)):
            raise ValueError("regression targets must be finite")
        n_classes = 0
    else:
        classes, yv = np.unique(np.asarray(y).astype(str), return_inverse=True)
        classes = list(classes)
        n_classes = len(classes)
    if n < 2 * min_leaf:
        warnings.warn(f"{n} samples < 2 * min_leaf ({min_leaf}); tree is a single leaf",
                      stacklevel=2)
    cat = frozenset(int(j) for j in categorical)

    def grow(idx, depth):
        ys = yv[idx]
        node = Node(int(idx.size), _prediction(ys, task, n_classes), _impurity(ys, task, n_classes),
                    index=idx)
        if idx.size < 2 * min_leaf or node.impurity <= 0.0:
            return node
        if max_depth is not None and depth >= max_depth:
            return node
        # near-equal impurities count as ties so rounding cannot reorder them
        tol = 1e-12 * max(1.0, node.impurity)
        best = None
        for j in range(p):
            finder = _best_categorical if j in cat else _best_numeric
            cand = finder(X[idx, j], ys, task, n_classes, min_leaf, tol)
            if cand is not None and (best is None or cand[0] < best[0] - tol):
                best = (cand[0], j, cand[1])
        if best is None or best[0] >= node.impurity - tol:
            return node
        _, j, thr = best
        if j in cat:
            mask = X[idx, j] == thr
            node.category = thr
        else:
            mask = X[idx, j] <= thr
            node.threshold = thr
        node.feature = j
        node.left = grow(idx[mask], depth + 1)
        node.right = grow(idx[~mask], depth + 1)
        return node

    root = grow(np.arange(n), 0)
    return CartTree(root, task, int(min_leaf), names, classes, cat)


def total_impurity(tree: CartTree) -> float:
    return float(sum(leaf.impurity for leaf in tree.leaves()))


# ---------------------------------------------------------------- contrastive report

BEHAVIOR_FEATURES = ("budget", "mean_streak", "median_alert_day", "tau_variance")


def feature_table(report, profiles, policy, spatial=None):
    """Per-county feature matrix: behaviour of ``policy`` plus county covariates.

    Returns ``(X, names, categorical_columns)``; the region column holds an
    integer code into :data:`broach.data.REGIONS`.
    """
    prof = {(p.county_id, p.policy): p for p in profiles}
    rows = []
    for cid in report.counties:
        pr = prof[(cid, policy)]
        row = [pr.mean_budget, pr.mean_streak,
               pr.median_alert_day if pr.median_alert_day == pr.median_alert_day else -1.0,
               pr.tau_variance]
        sp = (spatial or {}).get(cid) or pr.spatial
        if sp is not None:
            row += list(sp.covariates()) + [float(dc.REGIONS.index(sp.climate_region))]
        rows.append(row)
    names = list(BEHAVIOR_FEATURES)
    cat = ()
    if rows and len(rows[0]) > len(names):
        names += list(dc.COVARIATE_NAMES) + ["region"]
        cat = (len(names) - 1,)
    return np.array(rows, dtype=float), names, cat


@dataclass
class ContrastiveReport:
    regression: CartTree
    classification: CartTree
    features: np.ndarray
    feature_names: list
    counties: list
    delta: np.ndarray
    winners: list


def contrastive_report(report, profiles, policy, reference="nws", candidates=None, spatial=None,
                       min_leaf_regression=MIN_LEAF_REGRESSION,
                       min_leaf_classification=MIN_LEAF_CLASSIFICATION) -> ContrastiveReport:
    """Regression tree on ``policy - reference`` mean-return differences and a
    classification tree on the best policy per county among ``candidates``."""
    if len(report.counties) < 2:
        raise ValueError("contrastive analysis needs at least two counties")
    candidates = list(candidates or report.policies)
    for name in [policy, reference, *candidates]:
        if name not in report.policies:
            raise KeyError(f"policy {name!r} was not evaluated")
    if len(candidates) < 2:
        raise ValueError("need at least two candidate policies")
    X, names, cat = feature_table(report, profiles, policy, spatial)
    delta = report.mean_returns(policy) - report.mean_returns(reference)
    means = np.column_stack([report.mean_returns(c) for c in candidates])
    winners = [candidates[int(np.argmax(m))] for m in means]
    reg = cart_fit(X, delta, "regression", min_leaf_regression, names, cat)
    cls = cart_fit(X, winners, "classification", min_leaf_classification, names, cat)
    return ContrastiveReport(reg, cls, X, names, list(report.counties), delta, winners)


def write_tree(tree: CartTree, out_dir, name) -> list[str]:
    txt = os.path.join(out_dir, f"tree_{name}.txt")
    with open(txt, "w") as fh:
        fh.write(tree.to_text())
    path = os.path.join(out_dir, f"tree_{name}.csv")
    rows = tree.to_rows()
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return [txt, path]
