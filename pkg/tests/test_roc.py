import json
import math

import numpy as np
import pytest

from stcoinc.errors import ConfigError, DomainError
from stcoinc.roc import (
    RocCurve,
    binomial_sigma,
    check_windows,
    empirical_roc,
    model_lambdas,
    model_roc,
    poisson_sf,
    roc_deviation,
    roc_from_counts,
    segment_counts,
)
from stcoinc.theory import TheoryParams

from oracles import poisson_tail_logspace


@pytest.mark.parametrize("lam", [0.3, 1.0, 4.4, 21.4, 300.0, 1e4])
def test_poisson_tail_matches_logspace_oracle(lam):
    ks = sorted({0, 1, 2, 5, int(lam), int(lam) + 1, int(2 * lam) + 3, int(lam + 30 * math.sqrt(lam)) + 1})
    got = poisson_sf(np.array(ks), lam)
    for k, g in zip(ks, got):
        ref = poisson_tail_logspace(k, lam)
        if ref == 0:
            assert g == 0 or g < 1e-300
        else:
            assert abs(g - ref) <= 1e-10 * ref


def test_poisson_tail_extremes():
    assert poisson_sf(np.array([100_000]), 1e4)[0] == 0.0
    assert poisson_sf(np.array([1]), 1.0)[0] == pytest.approx(1 - math.exp(-1), rel=1e-14)
    assert poisson_sf(np.array([-3, 0]), 2.0).tolist() == [1.0, 1.0]
    assert poisson_sf(np.array([0, 1, 5]), 0.0).tolist() == [1.0, 0.0, 0.0]
    with pytest.raises(DomainError):
        poisson_sf(np.array([1]), -1.0)


def test_binomial_sigma_floor():
    assert binomial_sigma(0.0, 600) == pytest.approx(math.sqrt((1 / 600) * (599 / 600) / 600))
    assert binomial_sigma(0.5, 100) == pytest.approx(0.05)


def test_model_lambdas_from_reference_rates():
    p = TheoryParams()
    sig, bg = model_lambdas(p, 0.5, "ts", 14.0)
    assert sig == pytest.approx(4.444, abs=1e-3)
    assert bg == pytest.approx(1.117, abs=1e-3)
    sig, bg = model_lambdas(p, 0.5, "t")
    assert (sig, bg) == pytest.approx((5.3, 21.435), abs=1e-3)
    assert model_lambdas(p, 0.5, "ts", math.inf) == pytest.approx(model_lambdas(p, 0.5, "t"))


def test_model_operating_points():
    p = TheoryParams()
    ts = model_roc(*model_lambdas(p, 0.5, "ts", 14.0)).operating_point(1e-3)
    t = model_roc(*model_lambdas(p, 0.5, "t")).operating_point(1e-3)
    assert ts["pd"] == pytest.approx(0.5, abs=0.1)
    assert t["pd"] == pytest.approx(0.04, abs=0.1)
    assert ts["threshold"] == 6 and t["threshold"] == 38


def test_model_zero_background():
    curve = model_roc(3.0, 0.0, np.arange(5))
    assert curve.pfa.tolist() == [1, 0, 0, 0, 0]
    with pytest.raises(DomainError):
        model_roc(-1, 1)
    assert curve.operating_point(1e-3)["threshold"] == 0  # the only non-zero P_fa
    blank = RocCurve(np.arange(3), np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), 0.5, 10)
    with pytest.raises(DomainError):
        blank.operating_point(1e-3)


def _pd_at(curve, pfa):
    """ROC value at ``pfa`` with straight segments between integer thresholds."""
    order = np.argsort(curve.pfa, kind="stable")
    return np.interp(pfa, curve.pfa[order], curve.pd[order])


def test_spectral_filter_dominates_model():
    p = TheoryParams()
    ts = model_roc(*model_lambdas(p, 0.5, "ts", 14.0), np.arange(200))
    t = model_roc(*model_lambdas(p, 0.5, "t"), np.arange(200))
    for target in np.logspace(-6, -0.01, 60):
        assert _pd_at(ts, target) >= _pd_at(t, target)
    assert np.all(ts.pd >= ts.pfa) and np.all(t.pd >= t.pfa)


def test_from_counts_trivial_thresholds():
    sc = np.array([3, 0, 7, 2])
    fc = np.array([1, 0, 0, 2])
    curve = roc_from_counts(sc, fc, 0.5)
    assert (curve.pd[0], curve.pfa[0]) == (1.0, 1.0)
    assert (curve.pd[-1], curve.pfa[-1]) == (0.0, 0.0)
    assert np.all(np.diff(curve.pd) <= 0) and np.all(np.diff(curve.pfa) <= 0)
    assert curve.pd[3] == 0.5
    with pytest.raises(DomainError):
        roc_from_counts([], [], 0.5)


def test_segment_counts_half_open():
    toa = np.array([0, 100, 500_000_000_000, 999_999_999_999, 1_000_000_000_000])
    dt = np.array([15.0, 35.0, 20.0, 34.999, 25.0])
    assert segment_counts(toa, dt, (15, 35), 2, 0.5).tolist() == [1, 2]


def test_window_overlap_and_duration_errors():
    with pytest.raises(ConfigError):
        check_windows((25, 20), (40, 20))
    with pytest.raises(ConfigError):
        check_windows((25, 0), (75, 20))
    check_windows((25, 20), (45, 20))  # touching half-open windows do not overlap
    s = np.zeros(3, dtype=[("toa_ps", "<i8"), ("col", "<u2")])
    with pytest.raises(DomainError):
        empirical_roc(s, s, 0.7, segment_s=0.5)
    with pytest.raises(ConfigError):
        empirical_roc(s, s, 10, signal_window_ns=(70, 20))


def test_empirical_roc_on_synthetic_streams():
    rng = np.random.default_rng(3)
    T = 60
    herald = np.sort(rng.integers(0, T * 10**12, 20_000))
    true_sig = herald[rng.random(len(herald)) < 0.02] + 25_000
    bg = rng.integers(0, T * 10**12, 20_000)
    sig = np.sort(np.concatenate([true_sig, bg]))
    mk = lambda t: np.rec.fromarrays([t, rng.integers(0, 256, len(t))], names="toa_ps,col")
    s, h = np.asarray(mk(sig)), np.asarray(mk(herald))
    curve = empirical_roc(s, h, T, segment_s=0.5)
    assert curve.n_segments == 120
    assert np.all(curve.pd >= curve.pfa)
    ts = empirical_roc(s, h, T, segment_s=0.5, mode="ts", w=np.inf)
    assert np.array_equal(ts.pd, curve.pd)


def test_deviation_and_serialization(tmp_path):
    model = model_roc(4.0, 1.0, np.arange(15), 0.5, 600)
    emp = RocCurve(model.thresholds, model.pd.copy(), model.pfa.copy(), model.pd_err, model.pfa_err, 0.5, 600)
    zd, zf = roc_deviation(emp, model)
    assert np.all(zd == 0) and np.all(zf == 0)
    with pytest.raises(DomainError):
        roc_deviation(emp, model_roc(4.0, 1.0, np.arange(10)))
    path = model.to_csv(tmp_path / "m.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "threshold,pd,pd_err,pfa,pfa_err" and len(lines) == 16
    d = json.loads(model.to_json())
    assert d["kind"] == "model" and d["meta"]["lambda_sig"] == 4.0
