import dataclasses
import hashlib

import numpy as np
import pandas as pd
import pytest

from broach import data as dc
from broach import rewards as rw
from broach import synth


def _small(seed=3, regions=None, years=(2006, 2007)):
    cfg = synth.SynthConfig(regions=regions or {"HotHumid": 2}, years=list(years))
    return synth.generate_synthetic(cfg, seed)


def _write(tmp_path, tables):
    path = tmp_path / "dataset.csv"
    dc.write_dataset(tables, path)
    return path


def test_load_two_county_two_year(tmp_path):
    tables, _ = _small()
    path = _write(tmp_path, tables)
    assert len(pd.read_csv(path)) == 608
    loaded = dc.load_dataset(path)
    assert sorted(loaded) == sorted(tables)
    for cid, tb in loaded.items():
        assert tb.heat_index.shape == (2, dc.H)
        np.testing.assert_array_equal(tb.alert, tables[cid].alert)
        np.testing.assert_array_equal(tb.hosp, tables[cid].hosp)
        np.testing.assert_allclose(tb.qhi, tables[cid].qhi, rtol=0, atol=0)


def test_incomplete_season_rejected(tmp_path):
    tables, _ = _small()
    path = _write(tmp_path, tables)
    df = pd.read_csv(path, dtype={"county_id": str})
    df.drop(index=5).to_csv(path, index=False)
    with pytest.raises(dc.SchemaError, match="incomplete season"):
        dc.load_dataset(path)


@pytest.mark.parametrize("col,value,msg", [
    ("population", 0, "population must be positive"),
    ("hosp_count", -1, "negative hosp_count"),
    ("alert", 2, "alert must be 0 or 1"),
])
def test_bad_values_name_the_row(tmp_path, col, value, msg):
    tables, _ = _small()
    path = _write(tmp_path, tables)
    df = pd.read_csv(path, dtype={"county_id": str})
    df.loc[10, col] = value
    df.to_csv(path, index=False)
    with pytest.raises(dc.SchemaError, match=f"row 12: {msg}"):
        dc.load_dataset(path)


def test_duplicate_date_rejected(tmp_path):
    tables, _ = _small()
    path = _write(tmp_path, tables)
    df = pd.read_csv(path, dtype={"county_id": str})
    df.loc[1, "date"] = df.loc[0, "date"]
    df.to_csv(path, index=False)
    with pytest.raises(dc.SchemaError, match="duplicate"):
        dc.load_dataset(path)


def test_unknown_region_rejected(tmp_path):
    tables, _ = _small()
    path = _write(tmp_path, tables)
    sp = pd.read_csv(tmp_path / "spatial.csv", dtype={"county_id": str})
    sp.loc[0, "climate_region"] = "Tropical"
    sp.to_csv(tmp_path / "spatial.csv", index=False)
    with pytest.raises(dc.SchemaError, match="row 2: unknown climate region"):
        dc.load_dataset(path)


def test_spatial_fraction_bounds(tmp_path):
    tables, _ = _small()
    path = _write(tmp_path, tables)
    sp = pd.read_csv(tmp_path / "spatial.csv", dtype={"county_id": str})
    sp.loc[1, "broadband_pct"] = 87.0
    sp.to_csv(tmp_path / "spatial.csv", index=False)
    with pytest.raises(dc.SchemaError, match="row 3: broadband_pct must be a fraction"):
        dc.load_dataset(path)


def test_northern_defaults_by_region():
    kw = dict(population_density=1.0, median_hh_income=1.0, democratic_pct=0.5, broadband_pct=0.5,
              pm25=1.0)
    assert dc.SpatialFeatures("a", "ColdEast", **kw).northern
    assert dc.SpatialFeatures("a", "Marine", **kw).northern
    assert not dc.SpatialFeatures("a", "HotDry", **kw).northern
    assert not dc.SpatialFeatures("a", "HotDry", northern=False, **kw).northern
    assert dc.SpatialFeatures("a", "HotDry", northern=True, **kw).northern


def test_qhi_of_increasing_series():
    heat = np.arange(2 * dc.H, dtype=float).reshape(2, dc.H)
    q = dc.empirical_quantile(heat)
    N = heat.size
    assert q.max() == 1.0 and q[-1, -1] == 1.0
    assert q[0, 0] == pytest.approx(1.0 / N)


def test_excess_heat_examples():
    q = np.array([0.2, 0.4, 0.6, 0.9])
    ex = dc.excess_heat(q)
    assert ex[3] == pytest.approx(0.5)
    assert ex[0] == 0.0
    assert ex[1] == pytest.approx(0.2)          # partial history: 0.4 - 0.2
    assert ex[2] == pytest.approx(0.3)          # 0.6 - mean(0.2, 0.4)


def test_qhi_invariant_under_monotone_transform(toy):
    tables, _ = toy
    tb = next(iter(tables.values()))
    transformed = dataclasses.replace(tb, heat_index=np.exp(tb.heat_index / 20.0) * 3 + 1)
    again = dc.engineer_features(transformed)
    np.testing.assert_array_equal(again.qhi, tb.qhi)
    np.testing.assert_array_equal(again.excess_heat, tb.excess_heat)


def test_feature_ranges(toy):
    tables, _ = toy
    for tb in tables.values():
        assert np.all((tb.qhi >= 0) & (tb.qhi <= 1))
        assert np.all(np.abs(tb.excess_heat) <= 1)
        assert set(np.unique(tb.weekend)) <= {0.0, 1.0}


def test_weekend_from_calendar():
    dates = dc.season_dates(2021, 7)        # 2021-05-01 was a Saturday
    np.testing.assert_array_equal(dc.weekend_indicator(dates), [1, 1, 0, 0, 0, 0, 0])


@pytest.mark.parametrize("q,expected", [(0.5, (0.5, 0.25, 0.0)), (0.9, (0.9, 0.65, 0.15))])
def test_hinge_terms(q, expected):
    np.testing.assert_allclose(dc.qhi_hinges(q)[0], expected, atol=1e-15)


def test_hinges_continuous_on_fine_grid():
    q = np.arange(0, 1 + 1e-12, 1e-4)
    jumps = np.abs(np.diff(dc.qhi_hinges(q), axis=0))
    assert jumps.max() <= 1e-4 + 1e-12


def test_basis_vector_layout():
    d = dc.EngineeredDay(qhi=0.9, excess_heat=0.1, dos_frac=0.5, weekend=1.0)
    bv = dc.basis_expand(d, 14, 1)
    assert bv.lambda_features.size == dc.N_LAMBDA == 11
    assert bv.tau_features.size == dc.N_TAU == 9
    assert bv.lambda_features[-2] == 1.0 and bv.lambda_features[-1] == 1.0
    np.testing.assert_allclose(bv.lambda_features[1:4], (0.9, 0.65, 0.15))
    assert bv.tau_features[1] == 0.9
    assert bv.lambda_features[0] == bv.tau_features[0] == 1.0
    with pytest.raises(ValueError):
        dc.basis_expand(d, 15, 0)


def test_spline_bounded_and_partition():
    x = np.linspace(0, 1, 1001)
    b = dc.dos_spline(x)
    assert b.shape == (1001, 3)
    assert np.all(b >= 0) and np.all(b.sum(axis=1) <= 1.0 + 1e-12)


def test_alert_history_window():
    rng = np.random.default_rng(0)
    a = (rng.random((3, dc.H)) < 0.3).astype(np.int8)
    count, yday = dc.alert_history_features(a)
    for j in range(3):
        for t in range(dc.H):
            assert count[j, t] == a[j, max(0, t - 14):t].sum()
            assert yday[j, t] == (a[j, t - 1] if t else 0)


def test_synthetic_deterministic(tmp_path):
    digests = []
    for run in range(2):
        tables, _ = synth.generate_synthetic(synth.SynthConfig(), 11)
        p = tmp_path / f"r{run}" / "dataset.csv"
        p.parent.mkdir()
        dc.write_dataset(tables, p)
        digests.append(hashlib.sha256(p.read_bytes() + (p.parent / "spatial.csv").read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_toy_layout(toy):
    tables, truths = toy
    assert len(tables) == 7
    assert sum(tb.heat_index.size for tb in tables.values()) == 7 * 11 * 152
    regions = {tb.spatial.climate_region for tb in tables.values()}
    assert regions == {"HotHumid", "MixedHumid"}
    for cid, c in truths.items():
        c.check()


def test_tau_zero_means_alerts_do_nothing():
    tables, truths = synth.generate_synthetic(synth.SynthConfig(tau_zero=True), 2)
    for cid, tb in tables.items():
        S, U = dc.design_matrices(tb)
        S, U = S.reshape(-1, dc.N_LAMBDA), U.reshape(-1, dc.N_TAU)
        c = truths[cid]
        np.testing.assert_array_equal(rw.expected_rate(c.beta, c.delta, S, U, 1),
                                      rw.expected_rate(c.beta, c.delta, S, U, 0))


def test_synthetic_counts_are_calibrated():
    tables, truths = synth.generate_synthetic(
        synth.SynthConfig(regions={"HotHumid": 30, "MixedHumid": 30}), 5)
    ratios = []
    for cid, tb in tables.items():
        S, U = dc.design_matrices(tb)
        c = truths[cid]
        rho = rw.expected_rate(c.beta, c.delta, S.reshape(-1, dc.N_LAMBDA),
                               U.reshape(-1, dc.N_TAU), tb.alert.ravel())
        ratios.append(tb.hosp.ravel() / (tb.population.ravel() * rho))
    r = np.concatenate(ratios)
    assert r.size >= 100_000
    se = r.std(ddof=1) / np.sqrt(r.size)
    assert abs(r.mean() - 1.0) < 3 * se


def test_augmentation_needs_two_counties_per_region():
    with pytest.raises(synth.ConfigError):
        synth.SynthConfig(regions={"HotHumid": 1, "MixedHumid": 3})
    synth.SynthConfig(regions={"HotHumid": 1}, require_augmentation=False)


def test_synth_config_json_round_trip(tmp_path):
    cfg = synth.SynthConfig(regions={"Marine": 2}, tau_zero=True)
    p = tmp_path / "s.json"
    import json
    p.write_text(json.dumps(cfg.to_dict()))
    assert synth.SynthConfig.from_json(p) == cfg
    with pytest.raises(synth.ConfigError):
        synth.SynthConfig.from_dict({"regionz": {}})
