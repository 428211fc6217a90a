"""Spectrometer geometry: pixel <-> wavelength maps and the spectral selection band.

The camera images both spectrum stripes over the same wavelength range, so a
single linear column map serves herald and signal arms. Correlated pairs obey
energy conservation, which fixes the signal column expected for every herald
column; the selection band is the stripe of signal columns within ``w/2`` of
that curve.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError

N_COLUMNS = 256
N_ROWS = 256
MAX_PIXEL = N_COLUMNS - 1


@dataclass(frozen=True)
class SpectrometerConfig:
    """Geometry and gating constants of the two-photon spectrometer.

    Row bands are inclusive ``(first, last)`` pairs.
    """

    lambda_min_nm: float = 775.0
    lambda_max_nm: float = 845.0
    lambda_pump_nm: float = 405.0
    herald_rows: tuple[int, int] = (60, 80)
    signal_rows: tuple[int, int] = (160, 200)
    tau_ns: float = 20.0
    n_total: int = N_COLUMNS * N_ROWS
    band_length_l: int = 244
    histogram_bin_ns: float = 1.5625
    peak_offset_ns: float = 25.0

    def __post_init__(self):
        object.__setattr__(self, "herald_rows", tuple(int(r) for r in self.herald_rows))
        object.__setattr__(self, "signal_rows", tuple(int(r) for r in self.signal_rows))
        self.validate()

    def validate(self):
        if not self.lambda_min_nm < self.lambda_max_nm:
            raise ConfigError("lambda_min_nm must be smaller than lambda_max_nm")
        if self.lambda_min_nm <= self.lambda_pump_nm:
            raise ConfigError("imaged wavelengths must exceed the pump wavelength")
        for name in ("herald_rows", "signal_rows"):
            lo, hi = getattr(self, name)
            if len(getattr(self, name)) != 2 or not 0 <= lo <= hi <= MAX_PIXEL:
                raise ConfigError(f"{name} must be an inclusive (lo, hi) range within [0, 255]")
        (hl, hh), (sl, sh) = self.herald_rows, self.signal_rows
        if not (hh < sl or sh < hl):
            raise ConfigError("herald_rows and signal_rows overlap")
        if self.n_total != N_COLUMNS * N_ROWS:
            raise ConfigError("n_total must equal 256*256")
        if self.tau_ns <= 0 or self.histogram_bin_ns <= 0:
            raise ConfigError("tau_ns and histogram_bin_ns must be positive")
        if self.band_length_l <= 0:
            raise ConfigError("band_length_l must be positive")

    # -- serialization -------------------------------------------------
    def to_dict(self):
        d = asdict(self)
        d["herald_rows"] = list(self.herald_rows)
        d["signal_rows"] = list(self.signal_rows)
        return d

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown SpectrometerConfig field(s): {sorted(unknown)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid SpectrometerConfig: {exc}") from exc

    def to_json(self, path=None, indent=2):
        text = json.dumps(self.to_dict(), indent=indent, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, source):
        """Load from a JSON string or a path to a JSON file."""
        if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
            source = Path(source).read_text()
        return cls.from_dict(json.loads(source))

    def digest(self):
        """SHA-256 of the canonical JSON form (32 raw bytes)."""
        return hashlib.sha256(self.to_json(indent=None).encode()).digest()


DEFAULT_CONFIG = SpectrometerConfig()


def _as_real(x):
    arr = np.asarray(x, dtype=float)
    return arr


def wavelength_at_column(col, cfg=DEFAULT_CONFIG):
    """Wavelength (nm) at a real-valued pixel column; linear over 0..255."""
    c = _as_real(col)
    if np.any(~np.isfinite(c)) or np.any((c < 0) | (c > MAX_PIXEL)):
        raise DomainError(f"column outside [0, {MAX_PIXEL}]")
    lam = cfg.lambda_min_nm + (c / MAX_PIXEL) * (cfg.lambda_max_nm - cfg.lambda_min_nm)
    return lam if lam.ndim else float(lam)


def column_at_wavelength(lam, cfg=DEFAULT_CONFIG):
    """Inverse of :func:`wavelength_at_column`; not clipped to the sensor."""
    lam = _as_real(lam)
    col = (lam - cfg.lambda_min_nm) * MAX_PIXEL / (cfg.lambda_max_nm - cfg.lambda_min_nm)
    return col if col.ndim else float(col)


def conjugate_wavelength(lambda_h, lambda_p=DEFAULT_CONFIG.lambda_pump_nm):
    """Energy-conserving partner wavelength: ``lp*lh / (lh - lp)``."""
    lh = _as_real(lambda_h)
    if np.any(lh <= lambda_p):
        raise DomainError("herald wavelength must exceed the pump wavelength")
    ls = lambda_p * lh / (lh - lambda_p)
    return ls if ls.ndim else float(ls)


def expected_signal_column(herald_col, cfg=DEFAULT_CONFIG):
    """Real signal column conjugate to ``herald_col``; may fall off the sensor."""
    lam_h = wavelength_at_column(herald_col, cfg)
    return column_at_wavelength(conjugate_wavelength(lam_h, cfg.lambda_pump_nm), cfg)


def on_sensor(col):
    c = np.asarray(col, dtype=float)
    return (c >= 0) & (c <= MAX_PIXEL)


def in_selection_band(signal_col, herald_col, w, cfg=DEFAULT_CONFIG):
    """True where ``|signal_col - expected(herald_col)| <= w/2`` and the
    expected column lies on the sensor. Broadcasts over array inputs."""
    if w < 1:
        raise DomainError("band width must be >= 1 pixel")
    expected = expected_signal_column(herald_col, cfg)
    ok = on_sensor(expected) & (np.abs(np.asarray(signal_col, dtype=float) - expected) <= w / 2)
    return ok if np.ndim(ok) else bool(ok)


@lru_cache(maxsize=256)
def _band_mask_cached(w, cfg):
    cols = np.arange(N_COLUMNS, dtype=float)
    expected = expected_signal_column(cols, cfg)
    if np.isinf(w):
        mask = np.ones((N_COLUMNS, N_COLUMNS), dtype=bool)
    else:
        mask = on_sensor(expected)[None, :] & (np.abs(cols[:, None] - expected[None, :]) <= w / 2)
    mask.setflags(write=False)
    return mask


def band_mask(w, cfg=DEFAULT_CONFIG):
    """Boolean ``[signal_col, herald_col]`` matrix of the selection band.

    ``w=inf`` means no spectral selection: every column pair is allowed.
    """
    w = float(w)
    if w < 1:
        raise DomainError("band width must be >= 1 pixel")
    return _band_mask_cached(w, cfg)


def n_prime(w, cfg=DEFAULT_CONFIG, approx=False):
    """Number of column pairs in the band (exact count, or ``l*w`` when ``approx``)."""
    if approx:
        return cfg.band_length_l * w
    return int(band_mask(w, cfg).sum())


def band_length(cfg=DEFAULT_CONFIG):
    """Herald columns whose conjugate signal column falls on the sensor."""
    expected = expected_signal_column(np.arange(N_COLUMNS, dtype=float), cfg)
    return int(on_sensor(expected).sum())


def round_half_down(x):
    """Nearest integer, ties toward the smaller index."""
    return np.ceil(np.asarray(x, dtype=float) - 0.5).astype(np.int64)
