"""Closed-form SBR/SNR model for temporal and spectro-temporal gating."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from scipy.optimize import brentq
from scipy.special import erf

from .errors import ConfigError, DomainError
from .geometry import DEFAULT_CONFIG, N_COLUMNS, expected_signal_column, n_prime, on_sensor


@dataclass(frozen=True)
class TheoryParams:
    """Rates are per second, per column for the singles ``S_s``/``S_h``."""

    C: float = 10.6
    S_s: float = 221.0
    S_h: float = 148.0
    tau_s: float = 20e-9
    N: int = N_COLUMNS * N_COLUMNS
    N_prime: float = 4636
    w_px: float = 19.0
    alpha_px: float = 10.0
    T_s: float = 200.0
    P: float = 4e6
    B: float = 6e4
    mu_s: float = 3e-4
    mu_h: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or math.isnan(v) or v < 0:
                raise ConfigError(f"{f.name} must be a non-negative number, got {v!r}")
        if self.N_prime > self.N:
            raise ConfigError("N_prime cannot exceed N")

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown TheoryParams field(s): {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)

    def with_width(self, w, approx=False, cfg=DEFAULT_CONFIG):
        """Copy with band width ``w`` and the matching ``N_prime``."""
        return replace(self, w_px=float(w), N_prime=n_prime_for(w, approx, cfg))


def n_prime_for(w, approx=False, cfg=DEFAULT_CONFIG):
    if w == 0:
        return 0
    return float(cfg.band_length_l * w) if approx else n_prime(w, cfg)


def eta(w_px, alpha_px):
    """Fraction of a Gaussian band of parameter ``alpha`` inside width ``w``."""
    w = np.asarray(w_px, dtype=float)
    if alpha_px <= 0:
        raise DomainError("alpha_px must be positive")
    if np.any(w < 0):
        raise DomainError("w_px must be non-negative")
    out = erf(w / (math.sqrt(2.0) * alpha_px))
    return float(out) if out.ndim == 0 else out


def _eta(p):
    return eta(p.w_px, p.alpha_px) if p.alpha_px > 0 else 1.0


def _check_rates(p):
    if p.S_s * p.S_h * p.tau_s * p.N <= 0:
        raise DomainError("S_s*S_h*tau*N must be positive")


def sbr_snr_t(p):
    _check_rates(p)
    if p.C == 0:
        return 0.0, 0.0
    sbr = p.C / (p.N * p.tau_s * p.S_s * p.S_h)
    return sbr, math.sqrt(sbr * p.C * p.T_s / (sbr + 2))


def sbr_snr_ts(p, eta_value=None):
    _check_rates(p)
    e = _eta(p) if eta_value is None else float(eta_value)
    if p.C == 0 or e == 0:
        return 0.0, 0.0
    if p.N_prime <= 0:
        raise DomainError("N_prime must be positive")
    sbr_t, _ = sbr_snr_t(p)
    sbr = e * p.C / (p.N_prime * p.tau_s * p.S_s * p.S_h)
    snr = math.sqrt(sbr_t * e * p.C * p.T_s / (sbr_t + 2 * p.N_prime / (e * p.N)))
    return sbr, snr


@dataclass(frozen=True)
class Enhancements:
    e_sbr: float
    e_snr: float
    dat_reduction: float


def enhancements(p, eta_value=None):
    e = _eta(p) if eta_value is None else float(eta_value)
    if e == 0:
        return Enhancements(0.0, 0.0, 0.0)
    if p.N_prime <= 0:
        raise DomainError("N_prime must be positive")
    sbr_t, _ = sbr_snr_t(p)
    ratio = p.N_prime / p.N
    e_snr = math.sqrt(e * (sbr_t + 2) / (sbr_t + 2 * ratio / e))
    return Enhancements(e * p.N / p.N_prime, e_snr, e_snr**2)


def e_snr_limit(p, eta_value=None):
    """Background-dominated ceiling of the SNR enhancement."""
    e = _eta(p) if eta_value is None else float(eta_value)
    return e * math.sqrt(p.N / p.N_prime)


def snr_crossover_sbr(eta_value, n_ratio):
    """Temporal-only SBR above which the SNR enhancement drops below 1.

    Found as the root of ``E_SNR(SBR_t) = 1``. Returns ``inf`` when the
    enhancement never falls below 1 and ``0`` when it never exceeds 1.
    """
    e, r = float(eta_value), float(n_ratio)
    if not (0 < e <= 1 and 0 < r <= 1):
        raise DomainError("need 0 < eta <= 1 and 0 < N'/N <= 1")

    def gap(s):
        return e * (s + 2) / (s + 2 * r / e) - 1.0

    if gap(0.0) <= 0:
        return 0.0
    if e == 1.0:
        return math.inf
    hi = 1.0
    while gap(hi) > 0:
        hi *= 2
        if hi > 1e300:
            return math.inf
    return brentq(gap, 0.0, hi, xtol=1e-14, rtol=1e-14)


SWEEP_COLUMNS = ("w", "N_prime", "eta", "E_SBR", "E_SNR", "SBR_ts", "SNR_ts")


def sweep_w(p, widths, approx=False, cfg=DEFAULT_CONFIG):
    """Rows of ``SWEEP_COLUMNS`` for each band width."""
    rows = []
    for w in widths:
        q = p.with_width(w, approx, cfg)
        en = enhancements(q)
        sbr, snr = sbr_snr_ts(q)
        rows.append((float(w), float(q.N_prime), _eta(q), en.e_sbr, en.e_snr, sbr, snr))
    return rows


@dataclass(frozen=True)
class OptimalWidth:
    w: int
    e_snr: float
    enhancing: bool  # False when no width lifts the SNR above temporal-only


def optimal_width(p, w_range=range(1, 41), approx=False, cfg=DEFAULT_CONFIG):
    """Integer width maximizing the SNR enhancement (ties to the smaller w)."""
    widths = [int(w) for w in w_range]
    if not widths:
        raise DomainError("w_range is empty")
    if any(w < 1 for w in widths):
        raise DomainError("widths must be >= 1")
    values = [enhancements(p.with_width(w, approx, cfg)).e_snr for w in widths]
    k = int(np.argmax(values))
    return OptimalWidth(widths[k], values[k], values[k] > 1.0)


def spectral_modes(w, cfg=DEFAULT_CONFIG):
    """Distinct spectral bins of width ``w`` across the band's signal span."""
    if w < 1:
        raise DomainError("w must be >= 1")
    e = expected_signal_column(np.arange(N_COLUMNS, dtype=float), cfg)
    e = e[on_sensor(e)]
    span = math.floor(e.max()) - math.ceil(e.min()) + 1
    return int(span // w)


@dataclass(frozen=True)
class ClassicalComparison:
    sbr_c: float
    snr_c: float
    sbr_q: float
    snr_q: float
    sbr_ratio: float
    snr_ratio: float
    approx: dict

    def to_dict(self):
        return asdict(self)


def _div(a, b):
    if b == 0:
        return math.inf if a > 0 else math.nan
    return a / b


def classical_comparison(p):
    """Signal-only detection against temporal-gated heralded detection.

    Exact forms populate the main fields; ``approx`` holds the large-background
    approximations. Division by zero yields ``inf`` (or ``nan`` for 0/0).
    """
    mu_s, mu_h, P, B, tau, T = p.mu_s, p.mu_h, p.P, p.B, p.tau_s, p.T_s
    sig = mu_s * P
    sbr_c = _div(sig, B)
    snr_c = _div(sig * T, math.sqrt((sig + 2 * B) * T))
    sbr_q = _div(mu_s, (sig + B) * tau)
    snr_q = mu_s * math.sqrt(_div(mu_h * P * T, mu_s + 2 * (sig + B) * tau))
    approx = {
        "sbr_c": sbr_c,
        "snr_c": sig * math.sqrt(_div(T, 2 * B)),
        "sbr_q": _div(mu_s, B * tau),
        "snr_q": mu_s * math.sqrt(_div(mu_h * P * T, mu_s + 2 * B * tau)),
    }
    return ClassicalComparison(sbr_c, snr_c, sbr_q, snr_q, _div(sbr_q, sbr_c), _div(snr_q, snr_c), approx)


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return x


def summary(p, cfg=DEFAULT_CONFIG):
    """Every closed-form quantity for ``p`` as a JSON-ready dict."""
    sbr_t, snr_t = sbr_snr_t(p)
    sbr_ts, snr_ts = sbr_snr_ts(p)
    en = enhancements(p)
    e = _eta(p)
    cc = classical_comparison(p)
    out = {
        "params": p.to_dict(),
        "eta": e,
        "SBR_t": sbr_t,
        "SNR_t": snr_t,
        "SBR_ts": sbr_ts,
        "SNR_ts": snr_ts,
        "E_SBR": en.e_sbr,
        "E_SNR": en.e_snr,
        "DAT_reduction": en.dat_reduction,
        "E_SNR_limit": e_snr_limit(p),
        "SBR_t_crossover": snr_crossover_sbr(e, p.N_prime / p.N) if e > 0 and p.N_prime > 0 else None,
        "spectral_modes": spectral_modes(p.w_px, cfg) if p.w_px >= 1 else None,
        "classical": {k: _clean(v) for k, v in cc.to_dict().items() if k != "approx"},
        "classical_approx": {k: _clean(v) for k, v in cc.approx.items()},
    }
    return {k: _clean(v) for k, v in out.items()}
