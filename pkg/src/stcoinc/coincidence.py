"""Coincidence analysis: nearest-herald matching, the Δt histogram, the joint
spectrum, accidental-background estimation and SBR/SNR with uncertainties."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy.optimize import minimize_scalar
from sklearn.base import BaseEstimator

from .errors import ConfigError, DomainError, FitError
from .events import EVENT_DTYPE, Arm
from .geometry import DEFAULT_CONFIG, N_COLUMNS, band_mask, expected_signal_column, round_half_down

PS_PER_NS = 1000
MODES = ("t", "ts")


@numba.njit(cache=True)
def _nearest_kernel(sig, her, out):
    m = len(her)
    # index of the first herald sharing each timestamp, so ties on equal
    # herald times resolve to the lowest index
    first = np.empty(m, dtype=np.int64)
    for k in range(m):
        first[k] = first[k - 1] if k and her[k] == her[k - 1] else k
    j = 0
    for i in range(len(sig)):
        t = sig[i]
        while j + 1 < m and her[j + 1] <= t:
            j += 1
        best = j
        if her[j] <= t and j + 1 < m and her[j + 1] - t < t - her[j]:
            best = j + 1
        out[i] = first[best]


def _toa(x, name):
    arr = np.asarray(x)
    if arr.dtype.names is not None:
        arr = arr["toa_ps"]
    arr = np.ascontiguousarray(arr, dtype=np.int64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if len(arr) > 1 and np.any(arr[1:] < arr[:-1]):
        raise ValueError(f"{name} stream must be sorted by toa")
    return arr


@dataclass
class Matches:
    """Nearest-herald match per signal event; ``dt_ps = signal - herald``."""

    signal_index: np.ndarray
    herald_index: np.ndarray
    dt_ps: np.ndarray

    def __len__(self):
        return len(self.dt_ps)

    @property
    def dt_ns(self):
        return self.dt_ps / PS_PER_NS

    def subset(self, keep):
        return Matches(self.signal_index[keep], self.herald_index[keep], self.dt_ps[keep])


def match_coincidences(signal, herald):
    """Pair every signal event with the herald closest in time.

    Both inputs are event arrays (or plain ``toa_ps`` vectors) sorted by time.
    Equidistant heralds resolve to the earlier one.
    """
    s = _toa(signal, "signal")
    h = _toa(herald, "herald")
    if not len(h):
        raise ValueError("herald stream is empty")
    idx = np.empty(len(s), dtype=np.int64)
    _nearest_kernel(s, h, idx)
    return Matches(np.arange(len(s), dtype=np.int64), idx, s - h[idx])


@dataclass
class DtHistogram:
    edges_ns: np.ndarray
    counts: np.ndarray
    underflow: int = 0
    overflow: int = 0
    peak_ns: float = float("nan")

    @property
    def centers_ns(self):
        return 0.5 * (self.edges_ns[1:] + self.edges_ns[:-1])

    @property
    def total(self):
        return int(self.counts.sum()) + self.underflow + self.overflow

    def to_dict(self):
        return {
            "edges_ns": self.edges_ns.tolist(),
            "counts": self.counts.tolist(),
            "underflow": self.underflow,
            "overflow": self.overflow,
            "peak_ns": None if math.isnan(self.peak_ns) else self.peak_ns,
        }

    @classmethod
    def from_dict(cls, d):
        peak = d.get("peak_ns")
        return cls(
            np.asarray(d["edges_ns"], dtype=float),
            np.asarray(d["counts"], dtype=np.int64),
            int(d["underflow"]),
            int(d["overflow"]),
            float("nan") if peak is None else float(peak),
        )

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("bin_lo_ns,bin_hi_ns,count\n")
            for lo, hi, c in zip(self.edges_ns[:-1], self.edges_ns[1:], self.counts):
                fh.write(f"{lo:.6f},{hi:.6f},{int(c)}\n")
        return Path(path)


def smoothed_peak(counts, centers, window=3):
    """Centre of the bin maximizing the moving average of ``counts``."""
    if not counts.sum():
        return float("nan")
    smooth = np.convolve(counts.astype(float), np.ones(window) / window, mode="same")
    return float(centers[int(np.argmax(smooth))])


def histogram_dt(dt_ns, cfg=DEFAULT_CONFIG, range_ns=(0.0, 100.0), bin_ns=None):
    """Bin time differences; values outside ``range_ns`` go to under/overflow.

    The right edge is inclusive, like :func:`numpy.histogram`.
    """
    if isinstance(dt_ns, Matches):
        dt_ns = dt_ns.dt_ns
    bin_ns = cfg.histogram_bin_ns if bin_ns is None else float(bin_ns)
    lo, hi = map(float, range_ns)
    if bin_ns <= 0:
        raise ConfigError("histogram bin width must be positive")
    if not hi > lo:
        raise ConfigError("histogram range must be increasing")
    n_bins = max(1, int(round((hi - lo) / bin_ns)))
    edges = lo + bin_ns * np.arange(n_bins + 1)
    edges[-1] = hi
    dt = np.asarray(dt_ns, dtype=float)
    under = int(np.count_nonzero(dt < lo))
    over = int(np.count_nonzero(dt > hi))
    inside = dt[(dt >= lo) & (dt <= hi)]
    idx = np.minimum(((inside - lo) / bin_ns).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.int64)
    hist = DtHistogram(edges, counts, under, over)
    hist.peak_ns = smoothed_peak(counts, hist.centers_ns)
    return hist


@dataclass
class JointSpectrum:
    """Gated coincidence counts ``matrix[signal_col, herald_col]`` with the
    per-column singles rates of both arms over ``duration_s``."""

    matrix: np.ndarray
    signal_rate: np.ndarray
    herald_rate: np.ndarray
    duration_s: float

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.int64)
        self.signal_rate = np.asarray(self.signal_rate, dtype=float)
        self.herald_rate = np.asarray(self.herald_rate, dtype=float)
        if self.matrix.shape != (N_COLUMNS, N_COLUMNS):
            raise ValueError("joint matrix must be 256x256")
        if self.signal_rate.shape != (N_COLUMNS,) or self.herald_rate.shape != (N_COLUMNS,):
            raise ValueError("marginal rates must have 256 entries")
        if np.any(self.matrix < 0) or np.any(self.signal_rate < 0) or np.any(self.herald_rate < 0):
            raise ValueError("counts and rates must be non-negative")

    @classmethod
    def from_events(cls, signal, herald, matches, keep, duration_s):
        m = np.zeros((N_COLUMNS, N_COLUMNS), dtype=np.int64)
        si, hj = signal["col"][matches.signal_index[keep]], herald["col"][matches.herald_index[keep]]
        np.add.at(m, (si.astype(np.intp), hj.astype(np.intp)), 1)
        s_rate = np.bincount(signal["col"], minlength=N_COLUMNS) / duration_s
        h_rate = np.bincount(herald["col"], minlength=N_COLUMNS) / duration_s
        return cls(m, s_rate, h_rate, float(duration_s))

    def to_dict(self):
        return {
            "duration_s": self.duration_s,
            "signal_rate": self.signal_rate.tolist(),
            "herald_rate": self.herald_rate.tolist(),
            "matrix": self.matrix.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["matrix"], d["signal_rate"], d["herald_rate"], d["duration_s"])

    def to_json(self, path=None):
        text = json.dumps(self.to_dict())
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, source):
        if isinstance(source, Path) or not str(source).lstrip().startswith("{"):
            source = Path(source).read_text()
        return cls.from_dict(json.loads(source))

    def to_csv(self, path):
        """Long-format CSV of the non-zero cells."""
        i, j = np.nonzero(self.matrix)
        with open(path, "w") as fh:
            fh.write("signal_col,herald_col,count\n")
            for a, b, c in zip(i, j, self.matrix[i, j]):
                fh.write(f"{a},{b},{c}\n")
        return Path(path)


def estimate_background(js, tau_s, mask=None):
    """Expected accidental coincidences per second, ``tau * sum S_i S_j``
    over the allowed ``(signal, herald)`` column pairs."""
    s, h = js.signal_rate, js.herald_rate
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    if mask is None or mask.all():
        return float(tau_s * s.sum() * h.sum())
    return float(tau_s * (s @ mask.astype(float) @ h))


def sbr_snr_from_counts(c_tot, c_b):
    """SBR and SNR of ``c_tot - c_b`` with Poisson errors on both counts."""
    net = c_tot - c_b
    var = c_tot + c_b
    if c_b > 0:
        sbr = net / c_b
        sbr_err = math.sqrt(c_tot / c_b**2 + c_tot**2 / c_b**3)
    else:
        sbr = math.inf if net > 0 else math.nan
        sbr_err = math.nan
    if var > 0:
        s = math.sqrt(var)
        snr = net / s
        d_tot = 1 / s - net / (2 * s**3)
        d_b = -1 / s - net / (2 * s**3)
        snr_err = math.sqrt(c_tot * d_tot**2 + c_b * d_b**2)
    else:
        snr, snr_err = math.nan, math.nan
    return sbr, sbr_err, snr, snr_err


def _finite(x):
    return x if math.isfinite(x) else None


@dataclass
class CoincidenceResult:
    histogram: DtHistogram
    peak_ns: float
    gate_ns: tuple
    c_tot: int
    c_b: float
    sbr: float
    sbr_err: float
    snr: float
    snr_err: float
    mode: str = "t"
    w: float | None = None
    duration_s: float = 0.0
    n_matches: int = 0

    def to_dict(self):
        return {
            "mode": self.mode,
            "w": None if self.w is None else (_finite(self.w) if math.isfinite(self.w) else "inf"),
            "duration_s": self.duration_s,
            "n_matches": self.n_matches,
            "peak_ns": _finite(self.peak_ns),
            "gate_ns": list(self.gate_ns),
            "c_tot": self.c_tot,
            "c_b": self.c_b,
            "sbr": _finite(self.sbr),
            "sbr_err": _finite(self.sbr_err),
            "snr": _finite(self.snr),
            "snr_err": _finite(self.snr_err),
            "histogram": self.histogram.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        nan = float("nan")
        w = d.get("w")
        return cls(
            DtHistogram.from_dict(d["histogram"]),
            nan if d["peak_ns"] is None else d["peak_ns"],
            tuple(d["gate_ns"]),
            int(d["c_tot"]),
            float(d["c_b"]),
            *(nan if d[k] is None else float(d[k]) for k in ("sbr", "sbr_err", "snr", "snr_err")),
            mode=d["mode"],
            w=None if w is None else float(w),
            duration_s=float(d["duration_s"]),
            n_matches=int(d["n_matches"]),
        )

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def check_mode(mode, w):
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "t" and w is not None:
        raise ConfigError("a band width w is only meaningful with mode 'ts'")
    if mode == "ts":
        if w is None:
            raise ConfigError("mode 'ts' requires a band width w")
        if not w >= 1:
            raise ConfigError("band width w must be >= 1 pixel")


def split_arms(events):
    events = np.asarray(events)
    if events.dtype != EVENT_DTYPE:
        raise ValueError("expected an EVENT_DTYPE array")
    arm = events["arm"]
    return events.take(np.flatnonzero(arm == Arm.SIGNAL)), events.take(np.flatnonzero(arm == Arm.HERALD))


def _duration(signal, herald, duration_s):
    if duration_s is not None:
        if duration_s <= 0:
            raise DomainError("duration must be positive")
        return float(duration_s)
    t = np.concatenate([signal["toa_ps"][[0, -1]], herald["toa_ps"][[0, -1]]])
    span = (int(t.max()) - int(t.min())) / 1e12
    if span <= 0:
        raise DomainError("cannot infer a positive duration from the data")
    return span


@dataclass
class Analysis:
    """Everything :func:`analyze` derives from one pair of streams."""

    result: CoincidenceResult
    joint_spectrum: JointSpectrum
    matches: Matches
    in_band: np.ndarray = field(repr=False)


def analyze(signal, herald, cfg=DEFAULT_CONFIG, mode="t", w=None, duration_s=None, range_ns=(0.0, 100.0),
            bin_ns=None, matches=None, peak_ns=None):
    """Match, gate and count coincidences; return an :class:`Analysis`.

    The peak is located on the unfiltered Δt histogram in both modes, so the
    gate does not move with ``w``. ``peak_ns`` fixes the gate center instead
    (useful when there is no real peak to find). Pass ``matches`` from an
    earlier call on the same streams to skip re-matching.
    """
    check_mode(mode, w)
    if not len(signal) or not len(herald):
        raise ValueError("signal and herald streams must be non-empty")
    T = _duration(signal, herald, duration_s)
    if matches is None:
        matches = match_coincidences(signal, herald)
    dt_ns = matches.dt_ns
    full = histogram_dt(dt_ns, cfg, range_ns, bin_ns)
    peak = full.peak_ns if peak_ns is None else float(peak_ns)
    if not np.isfinite(peak):
        raise ValueError("no matches inside the histogram range to locate a peak")
    half = cfg.tau_ns / 2
    gate = (peak - half, peak + half)
    if gate[0] < range_ns[0] or gate[1] > range_ns[1]:
        raise ConfigError(f"gate {gate} ns extends beyond histogram range {tuple(range_ns)}")

    if mode == "ts":
        mask = band_mask(w, cfg)
        in_band = mask[signal["col"][matches.signal_index], herald["col"][matches.herald_index]]
    else:
        mask = None
        in_band = np.ones(len(matches), dtype=bool)
    hist = full if mode == "t" else histogram_dt(dt_ns[in_band], cfg, range_ns, bin_ns)
    hist.peak_ns = peak
    gated = (dt_ns >= gate[0]) & (dt_ns <= gate[1])
    js = JointSpectrum.from_events(signal, herald, matches, gated, T)
    c_tot = int(np.count_nonzero(gated & in_band))
    c_b = estimate_background(js, cfg.tau_ns * 1e-9, mask) * T
    sbr, sbr_err, snr, snr_err = sbr_snr_from_counts(c_tot, c_b)
    result = CoincidenceResult(
        hist, peak, gate, c_tot, c_b, sbr, sbr_err, snr, snr_err,
        mode=mode, w=None if w is None else float(w), duration_s=T, n_matches=len(matches),
    )
    return Analysis(result, js, matches, in_band)


class CoincidenceAnalyzer(BaseEstimator):
    """Estimator wrapper around :func:`analyze`.

    ``fit`` takes an event array holding both arms (split on the ``arm``
    field) and stores ``result_``, ``joint_spectrum_`` and ``matches_``.
    """

    def __init__(self, mode="t", w=None, duration_s=None, range_ns=(0.0, 100.0), cfg=None):
        self.mode = mode
        self.w = w
        self.duration_s = duration_s
        self.range_ns = range_ns
        self.cfg = cfg

    def fit(self, X, y=None):
        signal, herald = split_arms(X)
        out = analyze(signal, herald, self.cfg or DEFAULT_CONFIG, self.mode, self.w, self.duration_s,
                      self.range_ns)
        self.result_ = out.result
        self.joint_spectrum_ = out.joint_spectrum
        self.matches_ = out.matches
        return self


# -- band profile ------------------------------------------------------------

@dataclass
class BandProfileFit:
    alpha: float
    alpha_err: float
    amplitude: float
    offset: float
    x: np.ndarray
    profile: np.ndarray
    residual: float
    method: str = "gauss-newton"

    def to_dict(self):
        return {
            "alpha_px": self.alpha,
            "alpha_err_px": self.alpha_err,
            "amplitude": self.amplitude,
            "offset": self.offset,
            "residual": self.residual,
            "method": self.method,
        }


def band_profile(js, cfg=DEFAULT_CONFIG, half_range=40):
    """Sum the joint matrix along the band after shifting each herald column
    by its expected signal column; returns ``(x, profile)``."""
    matrix = js.matrix if isinstance(js, JointSpectrum) else np.asarray(js)
    cols = np.arange(N_COLUMNS)
    expected = expected_signal_column(cols.astype(float), cfg)
    use = (expected >= half_range) & (expected <= N_COLUMNS - 1 - half_range)
    x = np.arange(-half_range, half_range + 1)
    profile = np.zeros(len(x))
    for j in np.flatnonzero(use):
        off = round_half_down(cols - expected[j])
        sel = np.abs(off) <= half_range
        np.add.at(profile, off[sel] + half_range, matrix[sel, j])
    return x, profile


def _gauss(x, a, alpha, c):
    return a * np.exp(-2.0 * (x / alpha) ** 2) + c


def _jacobian(x, a, alpha):
    g = np.exp(-2.0 * (x / alpha) ** 2)
    return np.column_stack([g, a * g * 4.0 * x**2 / alpha**3, np.ones_like(x)])


def _linear_ac(x, y, alpha):
    basis = np.column_stack([np.exp(-2.0 * (x / alpha) ** 2), np.ones_like(x)])
    (a, c), *_ = np.linalg.lstsq(basis, y, rcond=None)
    r = y - basis @ [a, c]
    return a, c, float(r @ r)


def fit_gaussian_profile(x, y, tol=1e-8, max_iter=200):
    """Least-squares fit of ``A exp(-2 (x/alpha)^2) + c``.

    Gauss-Newton with step halving, started from the profile moments; falls
    back to a bounded 1-D search over ``alpha`` with ``(A, c)`` solved
    linearly. Raises :class:`FitError` when neither yields a resolved band.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    span = float(x.max() - x.min())
    if len(x) < 4 or span <= 0:
        raise FitError("need at least four distinct abscissae")
    edge = np.concatenate([y[: max(1, len(y) // 10)], y[-max(1, len(y) // 10):]])
    c0 = float(np.mean(edge))
    w = np.clip(y - c0, 0, None)
    theta = None
    if w.sum() > 0:
        mu = float((w * x).sum() / w.sum())
        var = float((w * (x - mu) ** 2).sum() / w.sum())
        if var > 0:
            theta = np.array([float(y.max() - c0), 2.0 * math.sqrt(var), c0])

    method = "gauss-newton"
    converged = False
    if theta is not None:
        r = y - _gauss(x, *theta)
        rss = float(r @ r)
        for _ in range(max_iter):
            J = _jacobian(x, theta[0], theta[1])
            step, *_ = np.linalg.lstsq(J, r, rcond=None)
            lam = 1.0
            while lam > 1e-10:
                trial = theta + lam * step
                if trial[1] > 0:
                    rt = y - _gauss(x, *trial)
                    if float(rt @ rt) <= rss:
                        break
                lam *= 0.5
            else:
                converged = True  # no descent direction left
                break
            done = np.all(np.abs(lam * step) <= tol * np.maximum(np.abs(theta), 1e-300))
            theta, r, rss = trial, rt, float(rt @ rt)
            if done or rss == 0.0:
                converged = True
                break

    ok = converged and theta[0] > 0 and 0 < theta[1] < 2 * span
    if not ok:
        method = "golden-section"
        res = minimize_scalar(lambda a: _linear_ac(x, y, a)[2], bounds=(1e-3, 2 * span), method="bounded",
                              options={"xatol": 1e-10})
        alpha = float(res.x)
        a, c, rss = _linear_ac(x, y, alpha)
        theta = np.array([a, alpha, c])
        if not (a > 0 and alpha < 0.99 * 2 * span):
            raise FitError("no resolvable band in profile", residual=math.sqrt(rss))

    J = _jacobian(x, theta[0], theta[1])
    dof = max(1, len(x) - 3)
    s2 = rss / dof
    try:
        cov = s2 * np.linalg.inv(J.T @ J)
        alpha_err = float(math.sqrt(max(cov[1, 1], 0.0)))
    except np.linalg.LinAlgError:
        alpha_err = math.inf
    return BandProfileFit(float(theta[1]), alpha_err, float(theta[0]), float(theta[2]), x, y,
                          math.sqrt(rss), method)


def fit_band_profile(js, cfg=DEFAULT_CONFIG, half_range=40):
    """Fit the Gaussian cross-section of the correlation band (width in pixels)."""
    x, profile = band_profile(js, cfg, half_range)
    return fit_gaussian_profile(x, profile)
