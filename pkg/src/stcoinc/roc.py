"""Segmented threshold detection: empirical and Poisson-model ROC curves."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammainc

from .coincidence import check_mode, match_coincidences
from .errors import ConfigError, DomainError
from .geometry import DEFAULT_CONFIG, band_mask
from .theory import eta, n_prime_for


def poisson_sf(k, lam):
    """``P[Poisson(lam) >= k]`` for integer ``k`` (1 for ``k <= 0``)."""
    k = np.asarray(k, dtype=float)
    if lam < 0:
        raise DomainError("Poisson mean must be non-negative")
    out = np.ones_like(k)
    pos = k > 0
    out[pos] = 0.0 if lam == 0 else gammainc(k[pos], lam)
    return out


def binomial_sigma(p, n):
    """Binomial standard error with ``p`` clipped to ``[1/n, 1-1/n]`` so
    unresolved extremes still carry one count of uncertainty."""
    p = np.clip(np.asarray(p, dtype=float), 1.0 / n, 1.0 - 1.0 / n)
    return np.sqrt(p * (1 - p) / n)


@dataclass
class RocCurve:
    thresholds: np.ndarray
    pd: np.ndarray
    pfa: np.ndarray
    pd_err: np.ndarray
    pfa_err: np.ndarray
    segment_s: float
    n_segments: int
    signal_window_ns: tuple = (25.0, 20.0)
    false_window_ns: tuple = (75.0, 20.0)
    kind: str = "empirical"
    meta: dict = field(default_factory=dict)

    def operating_point(self, target_pfa=1e-3):
        """Integer threshold whose ``P_fa`` is closest to ``target_pfa`` in log
        scale (thresholds with ``P_fa = 0`` are skipped)."""
        ok = self.pfa > 0
        if not ok.any():
            raise DomainError("no threshold with non-zero false-alarm probability")
        gap = np.abs(np.log10(self.pfa[ok]) - math.log10(target_pfa))
        i = np.flatnonzero(ok)[int(np.argmin(gap))]
        return {
            "target_pfa": target_pfa,
            "threshold": int(self.thresholds[i]),
            "pd": float(self.pd[i]),
            "pd_err": float(self.pd_err[i]),
            "pfa": float(self.pfa[i]),
            "pfa_err": float(self.pfa_err[i]),
        }

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("threshold,pd,pd_err,pfa,pfa_err\n")
            for row in zip(self.thresholds, self.pd, self.pd_err, self.pfa, self.pfa_err):
                fh.write(f"{int(row[0])},{row[1]:.10g},{row[2]:.10g},{row[3]:.10g},{row[4]:.10g}\n")
        return Path(path)

    def to_dict(self):
        return {
            "kind": self.kind,
            "segment_s": self.segment_s,
            "n_segments": self.n_segments,
            "signal_window_ns": list(self.signal_window_ns),
            "false_window_ns": list(self.false_window_ns),
            "thresholds": self.thresholds.tolist(),
            "pd": self.pd.tolist(),
            "pd_err": self.pd_err.tolist(),
            "pfa": self.pfa.tolist(),
            "pfa_err": self.pfa_err.tolist(),
            "meta": self.meta,
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def _window(center_width):
    c, w = map(float, center_width)
    if w <= 0:
        raise ConfigError("window width must be positive")
    return c - w / 2, c + w / 2


def check_windows(signal_window_ns, false_window_ns):
    a, b = _window(signal_window_ns), _window(false_window_ns)
    if a[0] < b[1] and b[0] < a[1]:
        raise ConfigError(f"signal window {a} overlaps false-alarm window {b}")
    return a, b


def segment_counts(toa_ps, dt_ns, window_ns, n_segments, segment_s, t0_ps=0):
    """Per-segment count of matches with ``lo <= dt < hi``."""
    lo, hi = window_ns
    toa = np.asarray(toa_ps, dtype=np.int64)
    dt = np.asarray(dt_ns, dtype=float)
    seg = (toa - t0_ps) // int(round(segment_s * 1e12))
    sel = (dt >= lo) & (dt < hi) & (seg >= 0) & (seg < n_segments)
    return np.bincount(seg[sel], minlength=n_segments)


def roc_from_counts(signal_counts, false_counts, segment_s, thresholds=None, **kw):
    """Fraction of segments whose window count reaches each threshold."""
    sc = np.asarray(signal_counts)
    fc = np.asarray(false_counts)
    n = len(sc)
    if n == 0 or len(fc) != n:
        raise DomainError("need matching, non-empty per-segment counts")
    if thresholds is None:
        thresholds = np.arange(0, max(sc.max(), fc.max()) + 2)
    k = np.asarray(thresholds, dtype=np.int64)
    pd = (sc[None, :] >= k[:, None]).mean(axis=1)
    pfa = (fc[None, :] >= k[:, None]).mean(axis=1)
    return RocCurve(k, pd, pfa, binomial_sigma(pd, n), binomial_sigma(pfa, n), float(segment_s), n, **kw)


def empirical_roc(signal, herald, duration_s, cfg=DEFAULT_CONFIG, segment_s=0.5, mode="t", w=None,
                  signal_window_ns=(25.0, 20.0), false_window_ns=(75.0, 20.0), thresholds=None, t0_ps=0):
    """Split the run into ``floor(T/segment_s)`` segments and sweep integer
    thresholds over the per-segment counts of both windows.

    In ``ts`` mode both windows only count matches inside the selection band.
    """
    check_mode(mode, w)
    sw, fw = check_windows(signal_window_ns, false_window_ns)
    n_seg = int(math.floor(duration_s / segment_s + 1e-9))
    if n_seg < 2:
        raise DomainError("duration must cover at least two segments")
    m = match_coincidences(signal, herald)
    toa = signal["toa_ps"][m.signal_index]
    dt = m.dt_ns
    if mode == "ts":
        keep = band_mask(w, cfg)[signal["col"][m.signal_index], herald["col"][m.herald_index]]
        toa, dt = toa[keep], dt[keep]
    sc = segment_counts(toa, dt, sw, n_seg, segment_s, t0_ps)
    fc = segment_counts(toa, dt, fw, n_seg, segment_s, t0_ps)
    return roc_from_counts(sc, fc, segment_s, thresholds, signal_window_ns=tuple(signal_window_ns),
                           false_window_ns=tuple(false_window_ns), kind="empirical",
                           meta={"mode": mode, "w": w})


def model_roc(lambda_sig, lambda_bg, thresholds=None, segment_s=0.5, n_segments=0):
    """Poisson model: ``P_d = P[Pois(sig+bg) >= k]``, ``P_fa = P[Pois(bg) >= k]``.

    Errors are the binomial spread expected from ``n_segments`` segments
    (zero when ``n_segments`` is 0).
    """
    if lambda_sig < 0 or lambda_bg < 0:
        raise DomainError("Poisson means must be non-negative")
    if thresholds is None:
        top = lambda_sig + lambda_bg
        thresholds = np.arange(0, int(math.ceil(top + 10 * math.sqrt(top) + 10)) + 1)
    k = np.asarray(thresholds, dtype=np.int64)
    pd = poisson_sf(k, lambda_sig + lambda_bg)
    pfa = poisson_sf(k, lambda_bg)
    if n_segments:
        pd_err, pfa_err = binomial_sigma(pd, n_segments), binomial_sigma(pfa, n_segments)
    else:
        pd_err, pfa_err = np.zeros_like(pd), np.zeros_like(pfa)
    return RocCurve(k, pd, pfa, pd_err, pfa_err, float(segment_s), int(n_segments), kind="model",
                    meta={"lambda_sig": lambda_sig, "lambda_bg": lambda_bg})


def model_lambdas(p, segment_s=0.5, mode="t", w=None, approx=False, cfg=DEFAULT_CONFIG):
    """Per-segment means from the closed-form rates of a ``TheoryParams``:
    signal ``eta*C*t`` and accidentals ``N' tau S_s S_h t`` (``N`` when temporal only)."""
    check_mode(mode, w)
    if mode == "t":
        return p.C * segment_s, p.N * p.tau_s * p.S_s * p.S_h * segment_s
    e = 1.0 if math.isinf(w) else eta(w, p.alpha_px)
    npr = p.N if math.isinf(w) else n_prime_for(w, approx, cfg)
    return e * p.C * segment_s, npr * p.tau_s * p.S_s * p.S_h * segment_s


def roc_deviation(empirical, model):
    """Per-threshold ``|empirical - model| / sigma`` for ``P_d`` and ``P_fa``,
    with sigma the binomial error of the model value over the empirical
    segment count."""
    if not np.array_equal(empirical.thresholds, model.thresholds):
        raise DomainError("curves must share thresholds")
    n = empirical.n_segments
    zd = np.abs(empirical.pd - model.pd) / binomial_sigma(model.pd, n)
    zf = np.abs(empirical.pfa - model.pfa) / binomial_sigma(model.pfa, n)
    return zd, zf
