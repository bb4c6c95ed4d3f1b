"""Dataset schema, CSV loading, feature engineering and basis expansion.

A county's data is held as a :class:`CountyTable`: one row per warm-season
year, one column per day of summer (``H = 152`` days, May 1 to Sep 30).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.interpolate import BSpline
from scipy.stats import rankdata

H = 152

REGIONS = ("MixedHumid", "Marine", "HotHumid", "HotDry", "ColdEast", "ColdWest")
NORTHERN_REGIONS = frozenset({"MixedHumid", "Marine", "ColdEast", "ColdWest"})

DATASET_COLUMNS = (
    "county_id", "year", "date", "day_of_summer", "heat_index",
    "alert", "hosp_count", "population",
)
SPATIAL_COLUMNS = (
    "county_id", "climate_region", "pop_density", "median_hh_income",
    "democratic_pct", "broadband_pct", "pm25",
)

# Fixed coefficient orderings. The first entries of each vector depend only on
# exogenous (weather/calendar) state; the last two are the alert-history terms.
LAMBDA_FEATURES = (
    "bias", "qhi", "qhi_over_25", "qhi_over_75", "dos_1", "dos_2", "dos_3",
    "weekend", "excess_heat", "alerts_2wk", "alert_yesterday",
)
TAU_FEATURES = (
    "bias", "qhi", "dos_1", "dos_2", "dos_3", "weekend", "excess_heat",
    "alerts_2wk", "alert_yesterday",
)
N_LAMBDA = len(LAMBDA_FEATURES)
N_TAU = len(TAU_FEATURES)
N_LAMBDA_EXO = N_LAMBDA - 2
N_TAU_EXO = N_TAU - 2
QHI_KNOTS = (0.25, 0.75)
ALERT_WINDOW = 14

_SPLINE = BSpline(np.r_[[0.0] * 4, [1.0] * 4], np.eye(4), 3, extrapolate=False)


class SchemaError(ValueError):
    """Raised when an input file violates the dataset schema."""


@dataclass(frozen=True)
class SpatialFeatures:
    county_id: str
    climate_region: str
    population_density: float
    median_hh_income: float
    democratic_pct: float
    broadband_pct: float
    pm25: float
    northern: bool | None = None

    def __post_init__(self):
        if self.climate_region not in REGIONS:
            raise SchemaError(f"unknown climate region {self.climate_region!r}")
        if self.northern is None:
            object.__setattr__(self, "northern", self.climate_region in NORTHERN_REGIONS)

    def covariates(self) -> np.ndarray:
        """Continuous covariates in a fixed order (region handled separately)."""
        return np.array([
            self.population_density, self.median_hh_income, self.democratic_pct,
            self.broadband_pct, self.pm25,
        ], dtype=float)


COVARIATE_NAMES = (
    "pop_density", "median_hh_income", "democratic_pct", "broadband_pct", "pm25",
)


@dataclass(frozen=True, eq=False)
class CountyTable:
    """All warm seasons for one county. Arrays are ``(n_years, H)`` unless noted.

    ``qhi``, ``excess_heat``, ``dos_frac`` and ``weekend`` stay ``None`` until
    :func:`engineer_features` has been applied.
    """

    county_id: str
    spatial: SpatialFeatures
    years: np.ndarray
    dates: np.ndarray
    heat_index: np.ndarray
    alert: np.ndarray
    hosp: np.ndarray
    population: np.ndarray
    qhi: np.ndarray | None = None
    excess_heat: np.ndarray | None = None
    dos_frac: np.ndarray | None = None
    weekend: np.ndarray | None = None

    @property
    def n_years(self) -> int:
        return len(self.years)

    @property
    def engineered(self) -> bool:
        return self.qhi is not None

    def year_index(self, year: int) -> int:
        idx = np.flatnonzero(self.years == year)
        if idx.size == 0:
            raise KeyError(f"county {self.county_id} has no data for {year}")
        return int(idx[0])


@dataclass(frozen=True)
class EngineeredDay:
    qhi: float
    excess_heat: float
    dos_frac: float
    weekend: float


@dataclass(frozen=True)
class BasisVector:
    lambda_features: np.ndarray
    tau_features: np.ndarray


# --------------------------------------------------------------------------
# feature engineering
# --------------------------------------------------------------------------

def empirical_quantile(values: np.ndarray) -> np.ndarray:
    """Empirical CDF of each value within the pooled sample (ties share the max rank)."""
    flat = np.asarray(values, dtype=float).ravel()
    q = rankdata(flat, method="max") / flat.size
    return q.reshape(np.shape(values))


def excess_heat(qhi: np.ndarray) -> np.ndarray:
    """Today's QHI minus the mean QHI of up to three previous days of the same season."""
    qhi = np.asarray(qhi, dtype=float)
    out = np.zeros_like(qhi)
    csum = np.cumsum(qhi, axis=-1)
    n = qhi.shape[-1]
    for t in range(1, n):
        lo = max(0, t - 3)
        prev = csum[..., t - 1] - (csum[..., lo - 1] if lo > 0 else 0.0)
        out[..., t] = qhi[..., t] - prev / (t - lo)
    return out


def weekend_indicator(dates: np.ndarray) -> np.ndarray:
    dow = (np.asarray(dates).astype("datetime64[D]").view("int64") - 4) % 7  # 1970-01-01 was a Thursday
    return (dow >= 5).astype(float)


def engineer_features(table: CountyTable) -> CountyTable:
    """Populate QHI, excess heat, day-of-summer fraction and weekend indicator."""
    qhi = empirical_quantile(table.heat_index)
    n_days = table.heat_index.shape[1]
    dos = np.broadcast_to(np.arange(n_days) / (n_days - 1), qhi.shape).copy()
    return dataclasses.replace(
        table,
        qhi=qhi,
        excess_heat=excess_heat(qhi),
        dos_frac=dos,
        weekend=weekend_indicator(table.dates),
    )


def dos_spline(dos_frac) -> np.ndarray:
    """Cubic B-spline on [0, 1] with 3 degrees of freedom (intercept column dropped)."""
    x = np.clip(np.atleast_1d(np.asarray(dos_frac, dtype=float)), 0.0, 1.0)
    basis = np.nan_to_num(_SPLINE(x))
    # the right endpoint is outside the half-open support of scipy's evaluation
    basis[x >= 1.0] = [0.0, 0.0, 0.0, 1.0]
    return basis[:, 1:]


def qhi_hinges(qhi) -> np.ndarray:
    q = np.atleast_1d(np.asarray(qhi, dtype=float))
    return np.stack([q, np.maximum(0.0, q - QHI_KNOTS[0]), np.maximum(0.0, q - QHI_KNOTS[1])], axis=-1)


def exogenous_design(qhi, excess, dos_frac, weekend) -> tuple[np.ndarray, np.ndarray]:
    """Exogenous blocks of the lambda and tau design matrices.

    Returns ``(lam_exo, tau_exo)`` with shapes ``(n, N_LAMBDA_EXO)`` and
    ``(n, N_TAU_EXO)`` for flat inputs of length ``n``.
    """
    qhi = np.ravel(np.asarray(qhi, dtype=float))
    excess = np.ravel(np.asarray(excess, dtype=float))
    weekend = np.ravel(np.asarray(weekend, dtype=float))
    spl = dos_spline(np.ravel(dos_frac))
    ones = np.ones_like(qhi)
    lam = np.column_stack([ones, qhi_hinges(qhi), spl, weekend, excess])
    tau = np.column_stack([ones, qhi, spl, weekend, excess])
    return lam, tau


def alert_history_features(alerts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Alerts in the previous 14 days and yesterday's alert, per day of each season.

    Days before the season starts count as no-alert days.
    """
    a = np.asarray(alerts, dtype=float)
    csum = np.concatenate([np.zeros(a.shape[:-1] + (1,)), np.cumsum(a, axis=-1)], axis=-1)
    t = np.arange(a.shape[-1])
    lo = np.maximum(0, t - ALERT_WINDOW)
    count = csum[..., t] - csum[..., lo]
    yday = np.zeros_like(a)
    yday[..., 1:] = a[..., :-1]
    return count, yday


def basis_expand(day: EngineeredDay, alerts_2wk: int, alert_yesterday: int) -> BasisVector:
    if not 0 <= alerts_2wk <= ALERT_WINDOW:
        raise ValueError(f"alerts_2wk must lie in [0, {ALERT_WINDOW}], got {alerts_2wk}")
    lam, tau = exogenous_design(day.qhi, day.excess_heat, day.dos_frac, day.weekend)
    endo = np.array([alerts_2wk / ALERT_WINDOW, float(alert_yesterday)])
    return BasisVector(np.r_[lam[0], endo], np.r_[tau[0], endo])


def design_matrices(table: CountyTable) -> tuple[np.ndarray, np.ndarray]:
    """Full lambda/tau design matrices under the observed alert history.

    Shapes are ``(n_years, H, N_LAMBDA)`` and ``(n_years, H, N_TAU)``.
    """
    if not table.engineered:
        table = engineer_features(table)
    lam, tau = exogenous_design(table.qhi, table.excess_heat, table.dos_frac, table.weekend)
    count, yday = alert_history_features(table.alert)
    endo = np.column_stack([count.ravel() / ALERT_WINDOW, yday.ravel()])
    shape = table.qhi.shape
    return (
        np.hstack([lam, endo]).reshape(shape + (N_LAMBDA,)),
        np.hstack([tau, endo]).reshape(shape + (N_TAU,)),
    )


def day(table: CountyTable, year_idx: int, t: int) -> EngineeredDay:
    return EngineeredDay(
        float(table.qhi[year_idx, t]), float(table.excess_heat[year_idx, t]),
        float(table.dos_frac[year_idx, t]), float(table.weekend[year_idx, t]),
    )


# --------------------------------------------------------------------------
# CSV i/o
# --------------------------------------------------------------------------

def _row_error(row: int, msg: str) -> SchemaError:
    # +2: header line and 1-based numbering
    return SchemaError(f"row {row + 2}: {msg}")


def load_spatial(path) -> dict[str, SpatialFeatures]:
    df = pd.read_csv(path, dtype={"county_id": str})
    missing = [c for c in SPATIAL_COLUMNS if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    out = {}
    for i, rec in enumerate(df.to_dict("records")):
        cid = rec["county_id"]
        if cid in out:
            raise _row_error(i, f"duplicate county {cid}")
        if rec["climate_region"] not in REGIONS:
            raise _row_error(i, f"unknown climate region {rec['climate_region']!r}")
        for col in ("democratic_pct", "broadband_pct"):
            if not 0.0 <= rec[col] <= 1.0:
                raise _row_error(i, f"{col} must be a fraction, got {rec[col]}")
        for col in ("pop_density", "median_hh_income", "pm25"):
            if not rec[col] > 0:
                raise _row_error(i, f"{col} must be positive, got {rec[col]}")
        northern = rec.get("northern")
        if northern is not None and not pd.isna(northern):
            northern = bool(int(northern))
        else:
            northern = None
        out[cid] = SpatialFeatures(
            cid, rec["climate_region"], float(rec["pop_density"]), float(rec["median_hh_income"]),
            float(rec["democratic_pct"]), float(rec["broadband_pct"]), float(rec["pm25"]), northern,
        )
    return out


def load_dataset(path, spatial_path=None, engineer: bool = True) -> dict[str, CountyTable]:
    """Read the daily CSV (and its spatial companion) into county tables.

    ``spatial_path`` defaults to ``spatial.csv`` next to ``path``.
    """
    path = Path(path)
    spatial_path = Path(spatial_path) if spatial_path is not None else path.with_name("spatial.csv")
    spatial = load_spatial(spatial_path)

    df = pd.read_csv(path, dtype={"county_id": str})
    missing = [c for c in DATASET_COLUMNS if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    df["date"] = pd.to_datetime(df["date"]).values.astype("datetime64[D]")

    for col in ("hosp_count", "alert", "heat_index", "population", "day_of_summer"):
        bad = np.flatnonzero(df[col].isna().to_numpy())
        if bad.size:
            raise _row_error(int(bad[0]), f"missing {col}")
    checks = (
        (df["hosp_count"] < 0, "negative hosp_count"),
        (df["population"] <= 0, "population must be positive"),
        (df["hosp_count"] > df["population"], "hosp_count exceeds population"),
        (~df["alert"].isin([0, 1]), "alert must be 0 or 1"),
        ((df["day_of_summer"] < 0) | (df["day_of_summer"] >= H), "day_of_summer outside [0, 151]"),
    )
    for mask, msg in checks:
        bad = np.flatnonzero(mask.to_numpy())
        if bad.size:
            raise _row_error(int(bad[0]), msg)
    dup = np.flatnonzero(df.duplicated(["county_id", "date"]).to_numpy())
    if dup.size:
        raise _row_error(int(dup[0]), "duplicate (county, date)")
    dup = np.flatnonzero(df.duplicated(["county_id", "year", "day_of_summer"]).to_numpy())
    if dup.size:
        raise _row_error(int(dup[0]), "duplicate (county, year, day_of_summer)")

    tables = {}
    df["_row"] = np.arange(len(df))
    for cid, grp in df.groupby("county_id", sort=True):
        if cid not in spatial:
            raise _row_error(int(grp["_row"].iloc[0]), f"county {cid} missing from spatial file")
        years = np.array(sorted(grp["year"].unique()), dtype=int)
        arrays = {k: [] for k in ("dates", "heat_index", "alert", "hosp", "population")}
        for year in years:
            g = grp[grp["year"] == year].sort_values("day_of_summer")
            if len(g) != H or not np.array_equal(g["day_of_summer"].to_numpy(), np.arange(H)):
                raise _row_error(int(g["_row"].iloc[0]),
                                 f"incomplete season for county {cid} year {year}: {len(g)} of {H} days")
            arrays["dates"].append(g["date"].to_numpy().astype("datetime64[D]"))
            arrays["heat_index"].append(g["heat_index"].to_numpy(dtype=float))
            arrays["alert"].append(g["alert"].to_numpy(dtype=np.int8))
            arrays["hosp"].append(g["hosp_count"].to_numpy(dtype=np.int64))
            arrays["population"].append(g["population"].to_numpy(dtype=np.int64))
        table = CountyTable(cid, spatial[cid], years, **{k: np.stack(v) for k, v in arrays.items()})
        tables[cid] = engineer_features(table) if engineer else table
    return tables


def write_dataset(tables: dict[str, CountyTable], path, spatial_path=None) -> None:
    """Write county tables back to the dataset and spatial CSV formats."""
    path = Path(path)
    spatial_path = Path(spatial_path) if spatial_path is not None else path.with_name("spatial.csv")
    frames = []
    for cid in sorted(tables):
        tb = tables[cid]
        n_years, n_days = tb.heat_index.shape
        frames.append(pd.DataFrame({
            "county_id": cid,
            "year": np.repeat(tb.years, n_days),
            "date": pd.to_datetime(tb.dates.ravel()).strftime("%Y-%m-%d"),
            "day_of_summer": np.tile(np.arange(n_days), n_years),
            "heat_index": np.round(tb.heat_index.ravel(), 4),
            "alert": tb.alert.ravel().astype(int),
            "hosp_count": tb.hosp.ravel(),
            "population": tb.population.ravel(),
        }))
    pd.concat(frames).to_csv(path, index=False, lineterminator="\n")
    rows = []
    for cid in sorted(tables):
        s = tables[cid].spatial
        rows.append({
            "county_id": cid, "climate_region": s.climate_region,
            "pop_density": s.population_density, "median_hh_income": s.median_hh_income,
            "democratic_pct": s.democratic_pct, "broadband_pct": s.broadband_pct,
            "pm25": s.pm25, "northern": int(s.northern),
        })
    pd.DataFrame(rows).to_csv(spatial_path, index=False, lineterminator="\n")


def season_dates(year: int, n_days: int = H) -> np.ndarray:
    return np.datetime64(f"{year}-05-01") + np.arange(n_days)
