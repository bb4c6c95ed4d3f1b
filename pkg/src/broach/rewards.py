"""Hierarchical Poisson model of daily hospitalizations, fit by variational inference.

Each county ``k`` has coefficients ``beta_k`` (baseline rate) and ``delta_k``
(alert effectiveness). Daily counts are Poisson with mean ``n * rho`` where

    lambda = exp(beta_k . s),   tau = sigmoid(delta_k . u),
    rho(a) = lambda * (1 - a * tau).

The prior on every coefficient is centred by a small network of county-level
covariates. Sign-constrained coefficients live on a log scale, so in the
unconstrained space ``z`` every prior factor is Normal(f(w), sigma^2). The
posterior approximation is a multivariate normal over ``z`` (and log sigma)
with diagonal-plus-low-rank covariance.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, gammaln

from . import data as dc
from .nn import MLP, Adam

NORMAL, POSITIVE, NEGATIVE = 0, 1, -1
LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_FORMAT = "broach-rewards"
CHECKPOINT_VERSION = 1


class NumericError(FloatingPointError):
    pass


class ConstraintError(ValueError):
    """A coefficient lies outside the support of its prior."""


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Layout:
    lambda_names: tuple
    tau_names: tuple
    lambda_kinds: tuple
    tau_kinds: tuple

    @property
    def n_lambda(self) -> int:
        return len(self.lambda_names)

    @property
    def n_tau(self) -> int:
        return len(self.tau_names)

    @property
    def n_coef(self) -> int:
        return self.n_lambda + self.n_tau

    @property
    def kinds(self) -> np.ndarray:
        return np.array(self.lambda_kinds + self.tau_kinds, dtype=int)

    @property
    def names(self) -> list[str]:
        return [f"beta.{n}" for n in self.lambda_names] + [f"delta.{n}" for n in self.tau_names]

    def to_dict(self):
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(*(tuple(d[k]) for k in ("lambda_names", "tau_names", "lambda_kinds", "tau_kinds")))


def _default_layout() -> Layout:
    lam_kinds = [NORMAL] * dc.N_LAMBDA
    lam_kinds[dc.LAMBDA_FEATURES.index("alerts_2wk")] = NEGATIVE
    lam_kinds[dc.LAMBDA_FEATURES.index("alert_yesterday")] = NEGATIVE
    tau_kinds = [NORMAL] * dc.N_TAU
    tau_kinds[dc.TAU_FEATURES.index("qhi")] = POSITIVE
    return Layout(dc.LAMBDA_FEATURES, dc.TAU_FEATURES, tuple(lam_kinds), tuple(tau_kinds))


DEFAULT_LAYOUT = _default_layout()


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Coefficients of one county: ``beta`` pairs with lambda features, ``delta`` with tau."""

    beta: np.ndarray
    delta: np.ndarray

    def check(self, layout: Layout = DEFAULT_LAYOUT) -> None:
        gamma = np.r_[self.beta, self.delta]
        kinds = layout.kinds
        bad = ((kinds == POSITIVE) & ~(gamma > 0)) | ((kinds == NEGATIVE) & ~(gamma < 0))
        if bad.any():
            names = [layout.names[i] for i in np.flatnonzero(bad)]
            raise ConstraintError(f"sign constraint violated for {names}")


# --------------------------------------------------------------------------
# transforms and densities
# --------------------------------------------------------------------------

def constrain(z, kinds):
    """Map unconstrained values to coefficients (identity, exp or -exp per kind)."""
    z = np.asarray(z, dtype=float)
    return np.where(kinds == POSITIVE, np.exp(z), np.where(kinds == NEGATIVE, -np.exp(z), z))


def unconstrain(gamma, kinds):
    gamma = np.asarray(gamma, dtype=float)
    kinds = np.broadcast_to(kinds, gamma.shape)
    if np.any((kinds == POSITIVE) & ~(gamma > 0)) or np.any((kinds == NEGATIVE) & ~(gamma < 0)):
        raise ConstraintError("coefficient outside its constrained half-line")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(kinds == NORMAL, gamma, np.log(np.abs(gamma)))


def lambda_eval(beta, s) -> float:
    beta = np.asarray(beta, dtype=float)
    s = np.asarray(s, dtype=float)
    if beta.shape != s.shape:
        raise ValueError("beta and lambda features differ in length")
    with np.errstate(over="ignore"):
        val = math.exp(float(beta @ s)) if beta @ s < 709 else math.inf
    if not math.isfinite(val):
        raise NumericError(f"baseline rate overflow (beta.s = {float(beta @ s):.4g})")
    return val


def tau_eval(delta, u) -> float:
    delta = np.asarray(delta, dtype=float)
    u = np.asarray(u, dtype=float)
    if delta.shape != u.shape:
        raise ValueError("delta and tau features differ in length")
    return float(expit(delta @ u))


def expected_rate(beta, delta, S, U, a):
    """Per-capita rate ``lambda * (1 - a * tau)`` for rows of design matrices."""
    lam = np.exp(np.asarray(S) @ beta)
    tau = expit(np.asarray(U) @ delta)
    return lam * (1.0 - np.asarray(a) * tau)


def poisson_loglik(y, n, a, s, u, beta, delta):
    """Poisson log-likelihood of counts ``y`` given population ``n`` and action ``a``.

    Works on single rows (vectors ``s``, ``u``) or on stacked rows.
    """
    eta_l = np.asarray(s, dtype=float) @ np.asarray(beta, dtype=float)
    eta_t = np.asarray(u, dtype=float) @ np.asarray(delta, dtype=float)
    a = np.asarray(a, dtype=float)
    rho = np.exp(eta_l) * (1.0 - a * expit(eta_t))
    if np.any(rho <= 0):
        raise AssertionError("expected rate must be positive")
    log_rho = eta_l - a * np.logaddexp(0.0, eta_t)
    y = np.asarray(y, dtype=float)
    n = np.asarray(n, dtype=float)
    out = y * (np.log(n) + log_rho) - n * rho - gammaln(y + 1.0)
    return float(out) if np.ndim(out) == 0 else out


def halfcauchy_logpdf(sigma, scale=1.0):
    sigma = np.asarray(sigma, dtype=float)
    return np.log(2.0 / (math.pi * scale)) - np.log1p((sigma / scale) ** 2)


def coefficient_logdensity(gamma, center, sigma, kind):
    """Log prior density of one coefficient on its own (constrained) scale.

    ``center`` is the network output: the mean for unconstrained entries and
    the log of the prior median magnitude for sign-constrained ones.
    """
    gamma = np.asarray(gamma, dtype=float)
    base = -np.log(sigma) - 0.5 * LOG_2PI
    if kind == NORMAL:
        return base - (gamma - center) ** 2 / (2.0 * sigma ** 2)
    if kind == POSITIVE and np.all(gamma > 0):
        lg = np.log(gamma)
    elif kind == NEGATIVE and np.all(gamma < 0):
        lg = np.log(-gamma)
    else:
        raise ConstraintError(f"coefficient {gamma} outside support of kind {kind}")
    return base - lg - (lg - center) ** 2 / (2.0 * sigma ** 2)


# --------------------------------------------------------------------------
# prior and posterior containers
# --------------------------------------------------------------------------

def encode_spatial(spatial: list[dc.SpatialFeatures], mean=None, std=None):
    """Standardized covariates plus a one-hot climate region."""
    cov = np.array([s.covariates() for s in spatial], dtype=float).reshape(len(spatial), -1)
    if mean is None:
        mean = cov.mean(axis=0)
        std = cov.std(axis=0)
        std = np.where(std > 0, std, 1.0)
    onehot = np.array([[float(s.climate_region == r) for r in dc.REGIONS] for s in spatial])
    return np.hstack([(cov - mean) / std, onehot.reshape(len(spatial), -1)]), mean, std


@dataclass(eq=False)
class PriorModel:
    """Data-driven prior: networks mapping county covariates to coefficient centres."""

    beta_net: MLP
    delta_net: MLP
    feature_mean: np.ndarray
    feature_std: np.ndarray
    sigma: np.ndarray
    layout: Layout = DEFAULT_LAYOUT

    def encode(self, spatial) -> np.ndarray:
        if isinstance(spatial, dc.SpatialFeatures):
            spatial = [spatial]
        return encode_spatial(list(spatial), self.feature_mean, self.feature_std)[0]

    def centers(self, w, cache=False):
        """Prior centres ``f(w)`` with shape ``(K, n_coef)``."""
        fb, acts_b = self.beta_net.forward(w, cache=True)
        fd, acts_d = self.delta_net.forward(w, cache=True)
        f = np.hstack([fb, fd])
        return (f, (acts_b, acts_d)) if cache else f

    @property
    def params(self):
        return self.beta_net.params + self.delta_net.params

    def to_dict(self):
        return {
            "beta_net": self.beta_net.to_dict(),
            "delta_net": self.delta_net.to_dict(),
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "sigma": self.sigma.tolist(),
        }

    @classmethod
    def from_dict(cls, d, layout=DEFAULT_LAYOUT):
        return cls(
            MLP.from_dict(d["beta_net"]), MLP.from_dict(d["delta_net"]),
            np.asarray(d["feature_mean"], dtype=float), np.asarray(d["feature_std"], dtype=float),
            np.asarray(d["sigma"], dtype=float), layout,
        )


def prior_logdensity(coeffs: CoefficientSet, sigma, w, prior: PriorModel) -> float:
    """Joint prior log-density of one county's coefficients and the scale vector."""
    if isinstance(w, dc.SpatialFeatures):
        w = prior.encode(w)
    f = prior.centers(np.atleast_2d(w))[0]
    gamma = np.r_[coeffs.beta, coeffs.delta]
    sigma = np.asarray(sigma, dtype=float)
    total = 0.0
    for g, c, s, kind in zip(gamma, f, sigma, prior.layout.kinds):
        total += float(coefficient_logdensity(g, c, s, kind))
    return total + float(np.sum(halfcauchy_logpdf(sigma)))


@dataclass(eq=False)
class VariationalPosterior:
    """Normal over a whitened latent vector ``x`` with covariance ``diag + F F^T``.

    ``x`` is laid out county-major: block ``k`` (length ``L``) maps to county
    ``k``'s unconstrained coefficients through a fixed affine map
    ``z_k = offset[k] + transform[k] @ x_k``; when sigma is latent its logs
    occupy the last ``L`` entries of ``x`` unchanged. The affine map is a
    preconditioner chosen before fitting, so the optimizer works in
    coordinates where each county's likelihood is roughly isotropic.
    """

    mean: np.ndarray
    log_diag: np.ndarray
    cov_factor: np.ndarray
    county_ids: tuple
    layout: Layout = DEFAULT_LAYOUT
    fixed_sigma: np.ndarray | None = None
    offset: np.ndarray | None = None
    transform: np.ndarray | None = None

    def __post_init__(self):
        K, L = len(self.county_ids), self.layout.n_coef
        if self.offset is None:
            self.offset = np.zeros((K, L))
        if self.transform is None:
            self.transform = np.broadcast_to(np.eye(L), (K, L, L)).copy()
        expected = K * L + (0 if self.fixed_sigma is not None else L)
        if self.mean.size != expected:
            raise ValueError(f"latent dimension {self.mean.size} does not match layout ({expected})")

    @property
    def cov_diag(self) -> np.ndarray:
        return np.exp(self.log_diag)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def rank(self) -> int:
        return self.cov_factor.shape[1]

    @property
    def n_counties(self) -> int:
        return len(self.county_ids)

    @property
    def log_det_transform(self) -> float:
        return float(np.sum(np.log(np.abs(np.diagonal(self.transform, axis1=1, axis2=2)))))

    def covariance(self) -> np.ndarray:
        """Covariance of the whitened latent vector."""
        return np.diag(self.cov_diag) + self.cov_factor @ self.cov_factor.T

    def county_index(self, county_id) -> int:
        try:
            return self.county_ids.index(county_id)
        except ValueError:
            raise KeyError(f"county {county_id!r} not in fitted model") from None

    def to_unconstrained(self, x):
        """Map latent draws ``(..., D)`` to coefficients ``(..., K, L)``."""
        K, L = self.n_counties, self.layout.n_coef
        xc = np.asarray(x)[..., :K * L].reshape(np.shape(x)[:-1] + (K, L))
        return self.offset + np.einsum("kij,...kj->...ki", self.transform, xc)

    def unconstrained_moments(self, county_id):
        """Mean and covariance of one county's unconstrained coefficients."""
        k = self.county_index(county_id)
        L = self.layout.n_coef
        blk = slice(k * L, (k + 1) * L)
        T = self.transform[k]
        cov_x = np.diag(self.cov_diag[blk]) + self.cov_factor[blk] @ self.cov_factor[blk].T
        return self.offset[k] + T @ self.mean[blk], T @ cov_x @ T.T

    def sample_z(self, n, rng):
        e1 = rng.standard_normal((n, self.dim))
        e2 = rng.standard_normal((n, self.rank))
        return self.mean + np.sqrt(self.cov_diag) * e1 + e2 @ self.cov_factor.T

    def _sample_idx(self, idx, n, rng):
        e1 = rng.standard_normal((n, idx.size))
        e2 = rng.standard_normal((n, self.rank))
        return self.mean[idx] + np.sqrt(self.cov_diag[idx]) * e1 + e2 @ self.cov_factor[idx].T

    def sample_unconstrained(self, county_id, n, rng):
        """Draws of one county's unconstrained coefficients, shape ``(n, L)``."""
        k = self.county_index(county_id)
        L = self.layout.n_coef
        x = self._sample_idx(np.arange(k * L, (k + 1) * L), n, rng)
        return self.offset[k] + x @ self.transform[k].T

    def sample_arrays(self, county_id, n, rng):
        """``n`` draws of (beta, delta) for one county from its marginal."""
        gamma = constrain(self.sample_unconstrained(county_id, n, rng), self.layout.kinds)
        return gamma[:, :self.layout.n_lambda], gamma[:, self.layout.n_lambda:]

    def sigma_draws(self, n, rng):
        if self.fixed_sigma is not None:
            return np.broadcast_to(self.fixed_sigma, (n, self.layout.n_coef)).copy()
        L = self.layout.n_coef
        return np.exp(self._sample_idx(np.arange(self.dim - L, self.dim), n, rng))

    def log_prob(self, x) -> float:
        """Log density of the whitened latent vector."""
        return _lowrank_logpdf(np.asarray(x) - self.mean, self.cov_diag, self.cov_factor)[0]

    def to_dict(self):
        return {
            "mean": self.mean.tolist(),
            "log_diag": self.log_diag.tolist(),
            "cov_factor": self.cov_factor.tolist(),
            "county_ids": list(self.county_ids),
            "fixed_sigma": None if self.fixed_sigma is None else self.fixed_sigma.tolist(),
            "offset": self.offset.tolist(),
            "transform": self.transform.tolist(),
        }

    @classmethod
    def from_dict(cls, d, layout=DEFAULT_LAYOUT):
        fs = d.get("fixed_sigma")
        K, L = len(d["county_ids"]), layout.n_coef
        return cls(
            np.asarray(d["mean"], dtype=float), np.asarray(d["log_diag"], dtype=float),
            np.asarray(d["cov_factor"], dtype=float).reshape(len(d["mean"]), -1),
            tuple(d["county_ids"]), layout, None if fs is None else np.asarray(fs, dtype=float),
            np.asarray(d["offset"], dtype=float).reshape(K, L),
            np.asarray(d["transform"], dtype=float).reshape(K, L, L),
        )


def sample_posterior(posterior: VariationalPosterior, county_id, n, rng) -> list[CoefficientSet]:
    if n == 0:
        return []
    beta, delta = posterior.sample_arrays(county_id, n, rng)
    return [CoefficientSet(b, d) for b, d in zip(beta, delta)]


def _lowrank_logpdf(dev, d, F, with_grad_terms=False):
    """Log density of N(0, diag(d) + F F^T) at ``dev`` via the Woodbury identity."""
    D, r = F.shape
    dinv = 1.0 / d
    A = F * dinv[:, None]
    M = np.eye(r) + F.T @ A
    cho = np.linalg.cholesky(M)
    Minv = np.linalg.inv(M)
    v = dinv * dev - A @ (Minv @ (A.T @ dev))
    logdet = float(np.sum(np.log(d)) + 2.0 * np.sum(np.log(np.diag(cho))))
    logq = -0.5 * (float(dev @ v) + logdet + D * LOG_2PI)
    if not with_grad_terms:
        return logq, v
    AM = A @ Minv
    sinv_diag = dinv - np.sum(AM * A, axis=1)
    return logq, v, sinv_diag, AM


# --------------------------------------------------------------------------
# data batches and the ELBO
# --------------------------------------------------------------------------

@dataclass(eq=False)
class RowBatch:
    """Stacked observation rows sorted by county, with segment boundaries."""

    county: np.ndarray
    S: np.ndarray
    U: np.ndarray
    a: np.ndarray
    y: np.ndarray
    n: np.ndarray
    log_fact: np.ndarray = None
    starts: np.ndarray = field(default=None)

    def __post_init__(self):
        order = np.argsort(self.county, kind="stable")
        if not np.array_equal(order, np.arange(order.size)):
            for name in ("county", "S", "U", "a", "y", "n"):
                setattr(self, name, getattr(self, name)[order])
        self.a = np.asarray(self.a, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.n = np.asarray(self.n, dtype=float)
        self.log_fact = gammaln(self.y + 1.0)
        self.log_n = np.log(self.n)
        if self.county.size:
            self.starts = np.flatnonzero(np.r_[True, self.county[1:] != self.county[:-1]])
        else:
            self.starts = np.zeros(0, dtype=int)

    def __len__(self):
        return self.county.size

    @classmethod
    def empty(cls, layout=DEFAULT_LAYOUT):
        z = np.zeros(0)
        return cls(np.zeros(0, dtype=int), np.zeros((0, layout.n_lambda)), np.zeros((0, layout.n_tau)),
                   z, z, z)

    @classmethod
    def concat(cls, batches):
        return cls(*(np.concatenate([getattr(b, k) for b in batches])
                     for k in ("county", "S", "U", "a", "y", "n")))


def county_year_batches(tables: dict, county_ids, years=None) -> list[RowBatch]:
    """One batch per county-year, using the observed alert history."""
    out = []
    for k, cid in enumerate(county_ids):
        tb = tables[cid]
        S, U = dc.design_matrices(tb)
        for j, year in enumerate(tb.years):
            if years is not None and year not in years:
                continue
            m = S.shape[1]
            out.append(RowBatch(np.full(m, k), S[j], U[j], tb.alert[j], tb.hosp[j], tb.population[j]))
    return out


@dataclass
class ElboTerms:
    value: float
    loglik: float
    log_prior: float
    log_q: float
    grads: list | None = None


def _elbo_single(post: VariationalPosterior, prior: PriorModel, w, batch: RowBatch,
                 e1, e2, scale, want_grad):
    layout = post.layout
    K, L, Ll = post.n_counties, layout.n_coef, layout.n_lambda
    kinds = layout.kinds
    d = post.cov_diag
    sd = np.sqrt(d)
    F = post.cov_factor
    x = post.mean + sd * e1 + F @ e2
    latent_sigma = post.fixed_sigma is None
    if latent_sigma:
        log_sigma = x[K * L:]
        sigma = np.exp(log_sigma)
    else:
        sigma = np.asarray(post.fixed_sigma, dtype=float)
    zc = post.to_unconstrained(x)
    gamma = constrain(zc, kinds)
    beta, delta = gamma[:, :Ll], gamma[:, Ll:]

    # likelihood
    ll = 0.0
    g_gamma = np.zeros((K, L))
    if len(batch):
        kb = batch.county
        eta_l = np.einsum("ij,ij->i", batch.S, beta[kb])
        eta_t = np.einsum("ij,ij->i", batch.U, delta[kb])
        with np.errstate(over="ignore"):
            lam = np.exp(eta_l)
        tau = expit(eta_t)
        mu = batch.n * lam * (1.0 - batch.a * tau)
        log_rho = eta_l - batch.a * np.logaddexp(0.0, eta_t)
        ll = float(np.sum(batch.y * (batch.log_n + log_rho) - mu - batch.log_fact))
        if want_grad and math.isfinite(ll):
            g_l = batch.y - mu
            g_t = batch.a * (mu - batch.y) * tau
            seg_k = kb[batch.starts]
            g_gamma[seg_k, :Ll] = np.add.reduceat(batch.S * g_l[:, None], batch.starts, axis=0)
            g_gamma[seg_k, Ll:] = np.add.reduceat(batch.U * g_t[:, None], batch.starts, axis=0)

    # prior: independent Normal(f, sigma^2) per unconstrained coefficient
    f, acts = prior.centers(w, cache=True)
    dev = zc - f
    inv_var = 1.0 / sigma ** 2
    log_prior = float(np.sum(-0.5 * LOG_2PI - np.log(sigma) - 0.5 * dev ** 2 * inv_var))
    if latent_sigma:
        log_prior += float(np.sum(halfcauchy_logpdf(sigma) + log_sigma))

    if want_grad:
        log_q, v, sinv_diag, sinvF = _lowrank_logpdf(x - post.mean, d, F, with_grad_terms=True)
    else:
        log_q, v = _lowrank_logpdf(x - post.mean, d, F)
    # density of q in coefficient space
    log_q -= post.log_det_transform
    value = scale * ll + log_prior - log_q
    for term, val in (("likelihood", ll), ("prior", log_prior), ("entropy", log_q)):
        if not math.isfinite(val):
            raise NumericError(f"non-finite {term} term in ELBO estimate")
    if not want_grad:
        return ElboTerms(value, ll, log_prior, log_q)

    dgamma_dz = np.where(kinds == NORMAL, 1.0, gamma)
    g_zc = scale * g_gamma * dgamma_dz - dev * inv_var
    gx = np.empty_like(x)
    gx[:K * L] = np.einsum("kji,kj->ki", post.transform, g_zc).ravel()
    if latent_sigma:
        s2 = sigma ** 2
        gx[K * L:] = np.sum(-1.0 + dev ** 2 * inv_var, axis=0) + 1.0 - 2.0 * s2 / (1.0 + s2)

    gv = gx + v
    g_logdiag = 0.5 * gv * e1 * sd + 0.5 * d * (sinv_diag - v * v)
    g_factor = np.outer(gv, e2) + sinvF - np.outer(v, v @ F)

    g_f = dev * inv_var
    gb = prior.beta_net.backward(acts[0], g_f[:, :Ll])
    gd = prior.delta_net.backward(acts[1], g_f[:, Ll:])
    return ElboTerms(value, ll, log_prior, log_q, [gx, g_logdiag, g_factor] + gb + gd)


def elbo_terms(post, prior, w, batch, eps, scale=1.0, want_grad=True) -> ElboTerms:
    """ELBO estimate averaged over the supplied standard-normal draws ``eps = [(e1, e2), ...]``."""
    out = None
    for e1, e2 in eps:
        t = _elbo_single(post, prior, w, batch, e1, e2, scale, want_grad)
        if out is None:
            out = t
        else:
            out.value += t.value
            out.loglik += t.loglik
            out.log_prior += t.log_prior
            out.log_q += t.log_q
            if want_grad:
                out.grads = [a + b for a, b in zip(out.grads, t.grads)]
    m = len(eps)
    out.value /= m
    out.loglik /= m
    out.log_prior /= m
    out.log_q /= m
    if want_grad:
        out.grads = [g / m for g in out.grads]
    return out


def draw_eps(post: VariationalPosterior, n_mc, rng):
    return [(rng.standard_normal(post.dim), rng.standard_normal(post.rank)) for _ in range(n_mc)]


def elbo_estimate(batch: RowBatch, posterior, prior, n_mc, rng, w=None, scale=1.0) -> float:
    """Reparameterized Monte Carlo ELBO: ``scale * loglik + log p(z) - log q(z)``.

    ``w`` holds the encoded county covariates (rows aligned with the
    posterior's county order); ``scale`` is dataset size over batch size.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    if w is None:
        raise ValueError("encoded county covariates are required")
    return elbo_terms(posterior, prior, w, batch, draw_eps(posterior, n_mc, rng), scale, want_grad=False).value


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 80
    learning_rate: float = 1e-3
    final_lr_fraction: float = 0.1
    rank: int = 8
    n_mc: int = 1
    hidden_units: int = 32
    eval_draws: int = 256
    weight_decay: float = 100.0
    precondition: bool = True
    ridge_sd: float = 1.0
    init_sd: float = 1.0
    init_sigma: float = 0.5
    sigma_init_sd: float = 0.1
    fixed_sigma: float | None = None
    learn_prior: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.n_mc < 1 or self.eval_draws < 1:
            raise ValueError("epochs, n_mc and eval_draws must be positive")
        if self.rank < 1:
            raise ValueError("rank must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training options {sorted(unknown)}")
        return cls(**d)


@dataclass
class FitReport:
    elbo_trace: list
    epochs: int
    converged: bool

    def __post_init__(self):
        if len(self.elbo_trace) != self.epochs:
            raise ValueError("ELBO trace length must equal the number of epochs")


def initial_centers(layout: Layout, base_rate: float) -> np.ndarray:
    """Generic starting point in unconstrained coordinates."""
    c = np.zeros(layout.n_coef)
    c[0] = math.log(base_rate)
    kinds = layout.kinds
    c[:layout.n_lambda][kinds[:layout.n_lambda] == NEGATIVE] = math.log(0.05)
    c[layout.n_lambda] = -2.0
    return c


def county_laplace(batch: RowBatch, layout: Layout, center, ridge_sd=1.0, iters=50):
    """Ridge-penalized mode and covariance of one county's unconstrained coefficients.

    Fisher scoring on the Poisson likelihood plus an isotropic Normal penalty
    around ``center``; used only to build the preconditioner.
    """
    kinds = layout.kinds
    Ll = layout.n_lambda
    S, U, a, y, n = batch.S, batch.U, batch.a, batch.y, batch.n
    prec0 = 1.0 / ridge_sd ** 2

    def objective(z):
        g = constrain(z, kinds)
        with np.errstate(over="ignore"):
            eta_l = S @ g[:Ll]
            mu = n * np.exp(eta_l) * (1.0 - a * expit(U @ g[Ll:]))
        log_mu = np.log(n) + eta_l - a * np.logaddexp(0.0, U @ g[Ll:])
        return float(np.sum(y * log_mu - mu)) - 0.5 * prec0 * float(np.sum((z - center) ** 2))

    def score_info(z):
        g = constrain(z, kinds)
        lam = np.exp(S @ g[:Ll])
        tau = expit(U @ g[Ll:])
        mu = n * lam * (1.0 - a * tau)
        dmu = np.hstack([S * mu[:, None], U * (-n * lam * a * tau * (1.0 - tau))[:, None]])
        dmu *= np.where(kinds == NORMAL, 1.0, g)
        grad = dmu.T @ (y / np.maximum(mu, 1e-300) - 1.0) - prec0 * (z - center)
        info = (dmu / np.maximum(mu, 1e-300)[:, None]).T @ dmu + prec0 * np.eye(z.size)
        return grad, info

    z = np.array(center, dtype=float)
    obj = objective(z)
    for _ in range(iters):
        grad, info = score_info(z)
        step = np.linalg.solve(info, grad)
        t = 1.0
        while t > 1e-6:
            cand = z + t * step
            c_obj = objective(cand)
            if math.isfinite(c_obj) and c_obj >= obj:
                break
            t *= 0.5
        else:
            break
        converged = c_obj - obj < 1e-9 * max(1.0, abs(obj))
        z, obj = cand, c_obj
        if converged:
            break
    _, info = score_info(z)
    return z, np.linalg.inv(info)


def init_model(layout: Layout, county_ids, w, full: RowBatch, config: TrainConfig, rng):
    K, P = w.shape
    L = layout.n_coef
    base_rate = max(float(full.y.sum()), 0.5) / float(full.n.sum())
    c = initial_centers(layout, base_rate)
    offset = np.tile(c, (K, 1))
    transform = np.broadcast_to(np.eye(L), (K, L, L)).copy()
    if config.precondition:
        for seg, start in enumerate(full.starts):
            stop = full.starts[seg + 1] if seg + 1 < full.starts.size else len(full)
            k = int(full.county[start])
            rows = slice(start, stop)
            sub = RowBatch(full.county[rows], full.S[rows], full.U[rows], full.a[rows],
                           full.y[rows], full.n[rows])
            offset[k], cov = county_laplace(sub, layout, c, config.ridge_sd)
            transform[k] = np.linalg.cholesky(cov)

    hidden = [config.hidden_units] if config.hidden_units else []
    beta_net = MLP([P, *hidden, layout.n_lambda], "tanh", rng, out_scale=0.1)
    delta_net = MLP([P, *hidden, layout.n_tau], "tanh", rng, out_scale=0.1)
    start = offset.mean(axis=0)
    beta_net.params[-1][:] = start[:layout.n_lambda]
    delta_net.params[-1][:] = start[layout.n_lambda:]

    fixed = None if config.fixed_sigma is None else np.full(L, float(config.fixed_sigma))
    D = K * L + (0 if fixed is not None else L)
    mean = np.zeros(D)
    log_diag = np.full(D, 2.0 * math.log(config.init_sd))
    if fixed is None:
        mean[K * L:] = math.log(config.init_sigma)
        log_diag[K * L:] = 2.0 * math.log(config.sigma_init_sd)
    factor = rng.normal(0.0, 0.01, size=(D, config.rank))
    post = VariationalPosterior(mean, log_diag, factor, tuple(county_ids), layout, fixed, offset, transform)
    return post, (beta_net, delta_net)


def fit_batches(batches: list[RowBatch], w, county_ids, config: TrainConfig, seed,
                layout: Layout = DEFAULT_LAYOUT, feature_mean=None, feature_std=None,
                progress=None):
    """Stochastic variational inference over a list of minibatches.

    Each epoch visits every batch once in a seeded random order; the trace
    records the full-data ELBO at the end of each epoch, always evaluated with
    the same fixed standard-normal draws so epochs are comparable.
    """
    rng = np.random.default_rng(seed)
    full = RowBatch.concat(batches)
    n_total = len(full)
    post, (beta_net, delta_net) = init_model(layout, county_ids, w, full, config, rng)
    prior = PriorModel(
        beta_net, delta_net,
        np.zeros(0) if feature_mean is None else feature_mean,
        np.zeros(0) if feature_std is None else feature_std,
        np.ones(layout.n_coef), layout,
    )
    params = [post.mean, post.log_diag, post.cov_factor]
    if config.learn_prior:
        params = params + prior.params
    decay = [config.weight_decay if (i >= 3 and p.ndim == 2) else 0.0 for i, p in enumerate(params)]
    opt = Adam(params, lr=config.learning_rate)
    eval_eps = draw_eps(post, config.eval_draws, np.random.default_rng([seed, 1]))

    trace = []
    n_steps = config.epochs * len(batches)
    step = 0
    for epoch in range(config.epochs):
        for bi in rng.permutation(len(batches)):
            lr = cosine_lr(config.learning_rate, config.final_lr_fraction, step, n_steps)
            step += 1
            b = batches[bi]
            try:
                t = elbo_terms(post, prior, w, b, draw_eps(post, config.n_mc, rng), n_total / len(b))
            except NumericError as exc:
                raise TrainingError(f"ELBO diverged at epoch {epoch}: {exc}") from exc
            grads = t.grads[:len(params)]
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingError(f"non-finite ELBO gradient at epoch {epoch}")
            if config.weight_decay:
                # Gaussian prior on network weight matrices; biases stay free
                grads = [g - lam * p if lam else g for g, p, lam in zip(grads, params, decay)]
            opt.step(grads, ascent=True, lr=lr)
        try:
            value = elbo_terms(post, prior, w, full, eval_eps, 1.0, want_grad=False).value
        except NumericError as exc:
            raise TrainingError(f"ELBO diverged at epoch {epoch}: {exc}") from exc
        trace.append(value)
        if progress is not None:
            progress(epoch, value)

    prior.sigma = (np.asarray(post.fixed_sigma) if post.fixed_sigma is not None
                   else np.exp(post.mean[-layout.n_coef:]))
    report = FitReport(trace, config.epochs, has_converged(trace))
    return post, prior, report


def cosine_lr(lr0, final_fraction, step, n_steps):
    """Cosine interpolation from ``lr0`` down to ``final_fraction * lr0``."""
    if final_fraction >= 1.0 or n_steps <= 1:
        return lr0
    frac = step / (n_steps - 1)
    return lr0 * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def has_converged(trace, window=10, tol=1e-3) -> bool:
    """Mean relative change over the final ``window`` epochs below ``tol``."""
    if len(trace) <= window:
        return False
    tr = np.asarray(trace[-(window + 1):], dtype=float)
    rel = np.abs(np.diff(tr)) / np.maximum(np.abs(tr[:-1]), 1e-300)
    return bool(rel.mean() < tol)


def fit(tables: dict, config: TrainConfig | None = None, seed: int = 0, county_ids=None,
        years=None, progress=None):
    """Fit the rewards model to feature-engineered county tables.

    Returns ``(posterior, prior, report)``.
    """
    config = config or TrainConfig()
    county_ids = tuple(sorted(tables) if county_ids is None else county_ids)
    spatial = [tables[c].spatial for c in county_ids]
    w, mean, std = encode_spatial(spatial)
    batches = county_year_batches(tables, county_ids, years)
    return fit_batches(batches, w, county_ids, config, seed, DEFAULT_LAYOUT, mean, std, progress)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, posterior, prior, report=None, config=None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layout": posterior.layout.to_dict(),
        "covariates": list(dc.COVARIATE_NAMES) + [f"region={r}" for r in dc.REGIONS],
        "posterior": posterior.to_dict(),
        "prior": prior.to_dict(),
        "config": asdict(config) if config is not None else None,
        "report": asdict(report) if report is not None else None,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} rewards checkpoint")
    layout = Layout.from_dict(doc["layout"])
    post = VariationalPosterior.from_dict(doc["posterior"], layout)
    prior = PriorModel.from_dict(doc["prior"], layout)
    report = FitReport(**doc["report"]) if doc.get("report") else None
    return post, prior, report
