"""Synthetic county datasets with known ground-truth coefficients."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as dc
from . import rewards as rw

# centres of the true coefficients in unconstrained coordinates
TRUE_LAMBDA_CENTER = {
    "qhi": 0.1, "qhi_over_25": 0.1, "qhi_over_75": 0.6,
    "dos_1": 0.05, "dos_2": -0.05, "dos_3": 0.0,
    "weekend": -0.1, "excess_heat": 0.1,
    "alerts_2wk": math.log(0.1), "alert_yesterday": math.log(0.03),
}
TRUE_TAU_CENTER = {
    "bias": -2.5, "qhi": 0.0,
    "dos_1": 0.3, "dos_2": 0.0, "dos_3": -0.3,
    "weekend": 0.0, "excess_heat": 0.5,
    "alerts_2wk": -1.5, "alert_yesterday": -0.5,
}
REGION_HEAT_OFFSET = {
    "HotHumid": 4.0, "HotDry": 6.0, "MixedHumid": 0.0,
    "Marine": -8.0, "ColdEast": -5.0, "ColdWest": -6.0,
}


class ConfigError(ValueError):
    pass


@dataclass
class HeatConfig:
    mean: float = 86.0
    amplitude: float = 12.0
    ar: float = 0.7
    sd: float = 4.0


@dataclass
class SynthConfig:
    """Settings for :func:`generate_synthetic`.

    ``regions`` maps climate-region names to county counts. ``tau_zero``
    makes alerts useless in the ground truth. ``require_augmentation`` asks
    for at least two counties in every listed region.
    """

    regions: dict = field(default_factory=lambda: {"HotHumid": 4, "MixedHumid": 3})
    years: list = field(default_factory=lambda: list(range(2006, 2017)))
    base_rate: float = 1e-4
    population: tuple = (30_000, 150_000)
    alert_threshold: float = 0.9
    alert_noise: float = 0.05
    heat: HeatConfig = field(default_factory=HeatConfig)
    prior_sd: float = 0.1
    loading_sd: float = 0.05
    tau_zero: bool = False
    require_augmentation: bool = True
    n_days: int = dc.H

    def __post_init__(self):
        if isinstance(self.heat, dict):
            self.heat = HeatConfig(**self.heat)
        self.population = tuple(self.population)
        self.years = [int(y) for y in self.years]
        for r, n in self.regions.items():
            if r not in dc.REGIONS:
                raise ConfigError(f"unknown climate region {r!r}")
            if int(n) < 0:
                raise ConfigError(f"negative county count for {r}")
        if sum(int(n) for n in self.regions.values()) == 0:
            raise ConfigError("config defines no counties")
        if not self.years:
            raise ConfigError("config defines no years")
        if not 0 < self.base_rate < 1:
            raise ConfigError("base_rate must lie in (0, 1)")
        lo, hi = self.population
        if not 0 < lo <= hi:
            raise ConfigError("population range must be positive and ordered")
        if self.require_augmentation:
            thin = [r for r, n in self.regions.items() if 0 < int(n) < 2]
            if thin:
                raise ConfigError(f"regional augmentation needs >= 2 counties per region; too few in {thin}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth config keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["population"] = list(self.population)
        return d


def true_centers(layout: rw.Layout = rw.DEFAULT_LAYOUT, base_rate=1e-4, tau_zero=False) -> np.ndarray:
    lam = [math.log(base_rate) if n == "bias" else TRUE_LAMBDA_CENTER[n] for n in layout.lambda_names]
    tau = [TRUE_TAU_CENTER[n] for n in layout.tau_names]
    if tau_zero:
        tau[layout.tau_names.index("bias")] = -math.inf
    return np.array(lam + tau)


def _spatial(rng, cid, region) -> dc.SpatialFeatures:
    return dc.SpatialFeatures(
        county_id=cid,
        climate_region=region,
        population_density=float(np.round(np.exp(rng.normal(5.0, 1.0)), 2)),
        median_hh_income=float(np.round(rng.normal(55_000, 10_000), 0)),
        democratic_pct=float(np.round(rng.uniform(0.20, 0.70), 4)),
        broadband_pct=float(np.round(rng.uniform(0.60, 0.95), 4)),
        pm25=float(np.round(rng.uniform(5, 12), 2)),
    )


def _heat_series(rng, cfg: SynthConfig, offset, n_years):
    n = cfg.n_days
    seasonal = cfg.heat.mean + offset + cfg.heat.amplitude * np.sin(np.pi * np.arange(n) / (n - 1))
    noise = np.empty((n_years, n))
    innov = rng.standard_normal((n_years, n)) * cfg.heat.sd
    noise[:, 0] = innov[:, 0] / math.sqrt(max(1e-12, 1 - cfg.heat.ar ** 2))
    for t in range(1, n):
        noise[:, t] = cfg.heat.ar * noise[:, t - 1] + innov[:, t]
    # rounded so that CSV round trips reproduce the engineered features exactly
    return np.round(seasonal + noise, 4)


def generate_synthetic(config: SynthConfig, seed: int):
    """Simulate county tables and return ``(tables, truths)``.

    ``truths`` maps county id to the :class:`~broach.rewards.CoefficientSet`
    used to draw hospitalization counts.
    """
    rng = np.random.default_rng(seed)
    layout = rw.DEFAULT_LAYOUT
    ids, regions = [], []
    for r_idx, region in enumerate(dc.REGIONS):
        for i in range(int(config.regions.get(region, 0))):
            ids.append(f"{10_000 + 1000 * r_idx + i + 1:05d}")
            regions.append(region)
    spatial = [_spatial(rng, cid, reg) for cid, reg in zip(ids, regions)]
    w, _, _ = rw.encode_spatial(spatial)

    centers = true_centers(layout, config.base_rate, config.tau_zero)
    loadings = rng.normal(0.0, config.loading_sd, size=(w.shape[1], layout.n_coef))
    loadings[:, np.isinf(centers)] = 0.0
    years = np.array(config.years, dtype=int)
    n_days = config.n_days
    tables, truths = {}, {}
    for k, cid in enumerate(ids):
        z = centers + w[k] @ loadings + config.prior_sd * rng.standard_normal(layout.n_coef)
        gamma = rw.constrain(z, layout.kinds)
        coeffs = rw.CoefficientSet(gamma[:layout.n_lambda], gamma[layout.n_lambda:])
        truths[cid] = coeffs

        offset = REGION_HEAT_OFFSET[regions[k]] + rng.uniform(-3, 3)
        heat = _heat_series(rng, config, offset, len(years))
        lo, hi = config.population
        pop = int(rng.integers(lo, hi + 1))
        dates = np.stack([dc.season_dates(y, n_days) for y in years])
        base = dc.CountyTable(
            cid, spatial[k], years, dates, heat,
            np.zeros(heat.shape, dtype=np.int8),
            np.zeros(heat.shape, dtype=np.int64),
            np.full(heat.shape, pop, dtype=np.int64),
        )
        eng = dc.engineer_features(base)
        alert = (eng.qhi + config.alert_noise * rng.standard_normal(heat.shape)
                 > config.alert_threshold).astype(np.int8)
        eng = dataclasses.replace(eng, alert=alert)
        S, U = dc.design_matrices(eng)
        with np.errstate(over="ignore"):
            rho = rw.expected_rate(coeffs.beta, coeffs.delta, S.reshape(-1, layout.n_lambda),
                                   U.reshape(-1, layout.n_tau), alert.ravel())
        hosp = rng.poisson(pop * rho).reshape(heat.shape).astype(np.int64)
        tables[cid] = dataclasses.replace(eng, hosp=hosp)
    return tables, truths


def truth_rows(truths: dict, layout: rw.Layout = rw.DEFAULT_LAYOUT) -> list[dict]:
    rows = []
    for cid in sorted(truths):
        gamma = np.r_[truths[cid].beta, truths[cid].delta]
        for name, g in zip(layout.names, gamma):
            rows.append({"county_id": cid, "coefficient": name, "value": float(g)})
    return rows
