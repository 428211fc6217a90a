import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from sklearn.base import clone

from stcoinc.coincidence import (
    CoincidenceAnalyzer,
    CoincidenceResult,
    DtHistogram,
    JointSpectrum,
    analyze,
    band_profile,
    estimate_background,
    fit_band_profile,
    fit_gaussian_profile,
    histogram_dt,
    match_coincidences,
    sbr_snr_from_counts,
    split_arms,
)
from stcoinc.errors import ConfigError, FitError
from stcoinc.events import EVENT_DTYPE, Arm
from stcoinc.geometry import band_mask
from stcoinc.pixel import assign_arm
from stcoinc.simulator import SourceParams, simulate_ideal

from oracles import background_loops, nearest_all_pairs


def events_from_hits(hits):
    ev = np.empty(len(hits), dtype=EVENT_DTYPE)
    ev["col"], ev["row"], ev["toa_ps"] = hits["col"], hits["row"], hits["toa_ps"]
    ev["arm"] = assign_arm(hits["row"])
    ev["cluster_size"] = 1
    return ev


@pytest.fixture(scope="module")
def reference_streams():
    r = simulate_ideal(SourceParams.reference_regime(duration_s=30, seed=3))
    s, h = split_arms(events_from_hits(r.hits))
    return s, h, match_coincidences(s, h)


# -- matching ------------------------------------------------------------------

def test_match_example():
    m = match_coincidences(np.array([100_000]), np.array([75_000, 300_000]))
    assert m.herald_index.tolist() == [0]
    assert m.dt_ns.tolist() == [25.0]


def test_match_tie_goes_to_earlier_herald():
    m = match_coincidences(np.array([50]), np.array([40, 60]))
    assert m.herald_index.tolist() == [0] and m.dt_ps.tolist() == [10]


def test_match_equal_herald_times_pick_lowest_index():
    m = match_coincidences(np.array([5, 100]), np.array([10, 10, 10]))
    assert m.herald_index.tolist() == [0, 0]


@pytest.mark.parametrize("seed", range(10))
def test_match_equals_brute_force(seed):
    rng = np.random.default_rng(seed)
    s = np.sort(rng.integers(0, 5000, rng.integers(1, 1000)))
    h = np.sort(rng.integers(0, 5000, rng.integers(1, 1000)))
    m = match_coincidences(s, h)
    assert np.array_equal(m.herald_index, nearest_all_pairs(s, h))
    assert np.array_equal(m.dt_ps, s - h[m.herald_index])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 300), min_size=0, max_size=60),
       st.lists(st.integers(0, 300), min_size=1, max_size=60))
def test_match_brute_force_property(s, h):
    s, h = np.sort(s), np.sort(h)
    m = match_coincidences(s, h)
    assert np.array_equal(m.herald_index, nearest_all_pairs(s, h))


def test_match_errors():
    with pytest.raises(ValueError):
        match_coincidences(np.array([1]), np.array([], dtype=np.int64))
    with pytest.raises(ValueError):
        match_coincidences(np.array([3, 1]), np.array([1]))


# -- histogram -----------------------------------------------------------------

def test_histogram_total_conserved():
    dt = np.random.default_rng(0).normal(50, 40, 10_000)
    hist = histogram_dt(dt)
    assert hist.total == len(dt)
    assert hist.counts.sum() == np.count_nonzero((dt >= 0) & (dt <= 100))
    assert len(hist.counts) == 64


def test_histogram_right_edge_inclusive():
    hist = histogram_dt(np.array([0.0, 100.0, 100.0001, -0.0001]))
    assert hist.counts[0] == 1 and hist.counts[-1] == 1
    assert hist.overflow == 1 and hist.underflow == 1


def test_histogram_empty():
    hist = histogram_dt(np.array([]))
    assert hist.counts.sum() == 0 and math.isnan(hist.peak_ns)


def test_histogram_peak_uses_smoothing():
    counts_dt = np.concatenate([np.full(30, 10.2), np.full(20, 60.0), np.full(20, 61.6), np.full(20, 58.5)])
    assert histogram_dt(counts_dt).peak_ns == pytest.approx(60.15625)


def test_histogram_config_errors():
    with pytest.raises(ConfigError):
        histogram_dt(np.array([1.0]), bin_ns=0)
    with pytest.raises(ConfigError):
        histogram_dt(np.array([1.0]), range_ns=(5, 5))


def test_uncorrelated_histogram_is_flat():
    r = simulate_ideal(SourceParams(duration_s=5, seed=4, mu_s=0.0, bg_rate_B=6e4))
    s, h = split_arms(events_from_hits(r.hits))
    hist = histogram_dt(match_coincidences(s, h))
    c = hist.counts
    chi2 = float(((c - c.mean()) ** 2 / c.mean()).sum())
    assert stats.chi2.sf(chi2, len(c) - 1) > 1e-3


def test_histogram_csv_and_dict(tmp_path):
    hist = histogram_dt(np.linspace(0, 100, 500))
    path = hist.to_csv(tmp_path / "h.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "bin_lo_ns,bin_hi_ns,count" and len(lines) == 65
    back = DtHistogram.from_dict(json.loads(json.dumps(hist.to_dict())))
    assert np.array_equal(back.counts, hist.counts) and back.peak_ns == hist.peak_ns


# -- background -----------------------------------------------------------------

def _js(s, h):
    sr = np.zeros(256)
    hr = np.zeros(256)
    sr[: len(s)] = s
    hr[: len(h)] = h
    return JointSpectrum(np.zeros((256, 256)), sr, hr, 1.0)


def test_background_factorized_example():
    assert estimate_background(_js([2, 0], [1, 1]), 1.0) == pytest.approx(4.0)


def test_background_uniform_examples():
    js = _js(np.full(256, 221.0), np.full(256, 148.0))
    assert estimate_background(js, 20e-9) == pytest.approx(42.87, abs=0.005)
    mask = np.zeros((256, 256), dtype=bool)
    mask.flat[:4636] = True
    assert estimate_background(js, 20e-9, mask) == pytest.approx(3.033, abs=5e-4)


def test_background_matches_double_loop():
    rng = np.random.default_rng(5)
    s, h = rng.random(256) * 100, rng.random(256) * 50
    js = _js(s, h)
    mask = band_mask(11)
    assert estimate_background(js, 2e-8, mask) == pytest.approx(background_loops(s, h, 2e-8, mask), rel=1e-12)
    assert estimate_background(js, 2e-8) == pytest.approx(background_loops(s, h, 2e-8), rel=1e-12)


def test_joint_spectrum_validation_and_io(tmp_path):
    with pytest.raises(ValueError):
        JointSpectrum(np.zeros((3, 3)), np.zeros(256), np.zeros(256), 1.0)
    with pytest.raises(ValueError):
        JointSpectrum(-np.ones((256, 256)), np.zeros(256), np.zeros(256), 1.0)
    m = np.zeros((256, 256), dtype=np.int64)
    m[3, 4] = 7
    js = JointSpectrum(m, np.arange(256.0), np.ones(256), 2.0)
    back = JointSpectrum.from_json(js.to_json())
    assert np.array_equal(back.matrix, m) and back.duration_s == 2.0
    text = js.to_csv(tmp_path / "j.csv").read_text()
    assert text == "signal_col,herald_col,count\n3,4,7\n"


# -- SBR / SNR -------------------------------------------------------------------

def test_sbr_snr_from_counts_and_error_propagation():
    c_tot, c_b = 10734, 8575.0
    sbr, sbr_err, snr, snr_err = sbr_snr_from_counts(c_tot, c_b)
    assert sbr == pytest.approx((c_tot - c_b) / c_b)
    assert snr == pytest.approx((c_tot - c_b) / math.sqrt(c_tot + c_b))
    # numerical propagation with Poisson variances c_tot and c_b
    h = 1e-3

    def g(f, a, b):
        return ((f(a + h, b) - f(a - h, b)) / (2 * h), (f(a, b + h) - f(a, b - h)) / (2 * h))

    fs = lambda a, b: (a - b) / b
    fn = lambda a, b: (a - b) / math.sqrt(a + b)
    da, db = g(fs, c_tot, c_b)
    assert sbr_err == pytest.approx(math.sqrt(c_tot * da**2 + c_b * db**2), rel=1e-6)
    da, db = g(fn, c_tot, c_b)
    assert snr_err == pytest.approx(math.sqrt(c_tot * da**2 + c_b * db**2), rel=1e-6)


def test_sbr_zero_background():
    sbr, sbr_err, snr, _ = sbr_snr_from_counts(5, 0.0)
    assert sbr == math.inf and math.isnan(sbr_err) and snr == pytest.approx(math.sqrt(5))


# -- analyze ---------------------------------------------------------------------

def test_full_band_equals_temporal_only(reference_streams):
    s, h, m = reference_streams
    t = analyze(s, h, mode="t", duration_s=30, matches=m).result
    ts = analyze(s, h, mode="ts", w=math.inf, duration_s=30, matches=m).result
    assert (ts.c_tot, ts.c_b, ts.sbr, ts.snr, ts.peak_ns) == (t.c_tot, t.c_b, t.sbr, t.snr, t.peak_ns)
    assert np.array_equal(ts.histogram.counts, t.histogram.counts)


def test_c_tot_monotone_and_sbr_tail(reference_streams):
    s, h, m = reference_streams
    widths = [1, 3, 5, 10, 15, 19, 20, 25, 30, 40, 60, 100, 200]
    res = {w: analyze(s, h, mode="ts", w=w, duration_s=30, matches=m).result for w in widths}
    c = [res[w].c_tot for w in widths]
    assert all(b >= a for a, b in zip(c, c[1:]))
    tail = [res[w].sbr for w in widths if w >= 20]
    assert all(b <= a for a, b in zip(tail, tail[1:]))
    assert len({res[w].gate_ns for w in widths}) == 1


def test_peak_near_tof(reference_streams):
    s, h, m = reference_streams
    res = analyze(s, h, duration_s=30, matches=m).result
    assert abs(res.peak_ns - 25.0) <= 2 * 1.5625
    assert res.gate_ns == (res.peak_ns - 10, res.peak_ns + 10)
    assert res.n_matches == len(s)


def test_zero_background_matches_closed_form():
    src = SourceParams(duration_s=10, seed=6, bg_rate_B=0)
    s, h = split_arms(events_from_hits(simulate_ideal(src).hits))
    res = analyze(s, h, duration_s=10).result
    expect_b = 20e-9 * (3e-4 * 4e6) * (0.01 * 4e6) * 10
    assert res.c_b == pytest.approx(expect_b, rel=0.1)
    # accidentals scale with the pair rate too, so SBR saturates at gate/(tau P)
    expect_sbr = src.expected_rates()["C"] / (20e-9 * 3e-4 * 4e6 * 0.01 * 4e6)
    assert abs(res.sbr - expect_sbr) < 3 * res.sbr_err


def test_fixed_peak(reference_streams):
    s, h, m = reference_streams
    res = analyze(s, h, duration_s=30, matches=m, peak_ns=50.0).result
    assert res.gate_ns == (40.0, 60.0)


def test_analyze_errors(reference_streams):
    s, h, m = reference_streams
    with pytest.raises(ConfigError):
        analyze(s, h, mode="t", w=19)
    with pytest.raises(ConfigError):
        analyze(s, h, mode="ts")
    with pytest.raises(ConfigError):
        analyze(s, h, mode="ts", w=0.5)
    with pytest.raises(ConfigError):
        analyze(s, h, mode="x")
    with pytest.raises(ConfigError):
        analyze(s, h, duration_s=30, matches=m, range_ns=(20.0, 100.0))
    with pytest.raises(ValueError):
        analyze(s[:0], h)


def test_result_round_trip(reference_streams):
    s, h, m = reference_streams
    res = analyze(s, h, mode="ts", w=19, duration_s=30, matches=m).result
    back = CoincidenceResult.from_dict(json.loads(res.to_json()))
    assert (back.c_tot, back.c_b, back.sbr, back.mode, back.w) == (res.c_tot, res.c_b, res.sbr, "ts", 19.0)


def test_estimator(reference_streams):
    s, h, _ = reference_streams
    ev = np.sort(np.concatenate([s, h]), order="toa_ps", kind="stable")
    est = CoincidenceAnalyzer(mode="ts", w=19, duration_s=30).fit(ev)
    direct = analyze(s, h, mode="ts", w=19, duration_s=30).result
    assert est.result_.c_tot == direct.c_tot
    assert clone(est).get_params()["w"] == 19
    assert est.joint_spectrum_.matrix.sum() > 0


# -- band fit --------------------------------------------------------------------

def test_exact_gaussian_recovered():
    x = np.arange(-40, 41, dtype=float)
    y = 37.0 * np.exp(-2 * (x / 9.3) ** 2) + 4.0
    fit = fit_gaussian_profile(x, y)
    assert fit.alpha == pytest.approx(9.3, rel=1e-6)
    assert fit.amplitude == pytest.approx(37.0, rel=1e-6)
    assert fit.offset == pytest.approx(4.0, rel=1e-6)


def test_flat_profile_raises():
    x = np.arange(-40, 41, dtype=float)
    with pytest.raises(FitError):
        fit_gaussian_profile(x, np.full(len(x), 5.0))
    with pytest.raises(FitError):
        fit_gaussian_profile(x[:3], np.ones(3))


def test_fallback_search():
    x = np.arange(-40, 41, dtype=float)
    y = 10.0 * np.exp(-2 * (x / 6.0) ** 2) + 1.0
    fit = fit_gaussian_profile(x, y, max_iter=0)
    assert fit.method == "golden-section"
    assert fit.alpha == pytest.approx(6.0, rel=1e-6)


def test_band_profile_aligns_band():
    m = np.zeros((256, 256), dtype=np.int64)
    from stcoinc.geometry import expected_signal_column
    for j in range(60, 200):
        e = int(round(float(expected_signal_column(j))))
        m[e, j] = 5
    x, prof = band_profile(m)
    assert prof[x == 0][0] > 0.9 * prof.sum()


def test_fit_band_profile_on_simulation():
    r = simulate_ideal(SourceParams(duration_s=20, seed=7, mu_s=0.005, bg_rate_B=1e4))
    s, h = split_arms(events_from_hits(r.hits))
    js = analyze(s, h, duration_s=20).joint_spectrum
    fit = fit_band_profile(js)
    assert fit.alpha == pytest.approx(10.0, rel=0.1)
