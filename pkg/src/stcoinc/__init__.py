"""Spectro-temporal photon-pair coincidence analysis for a time-stamping pixel camera."""

__version__ = "0.1.0"

from .coincidence import (CoincidenceAnalyzer, CoincidenceResult, JointSpectrum, analyze, estimate_background,
                          fit_band_profile, histogram_dt, match_coincidences, split_arms)
from .errors import CalibrationError, ConfigError, DomainError, EventFileError, FitError
from .events import EventFile, read_events, write_events
from .geometry import DEFAULT_CONFIG, SpectrometerConfig, band_mask, expected_signal_column, n_prime
from .pixel import (PixelClusterer, TimewalkCorrector, TimewalkTable, calibrate_timewalk, cluster,
                    correct_and_centroid, hits_to_events, sort_events)
from .roc import RocCurve, empirical_roc, model_roc
from .simulator import IntensifierParams, SourceParams, simulate, simulate_ideal
from .theory import TheoryParams, enhancements, eta, optimal_width, sbr_snr_t, sbr_snr_ts

__all__ = [
    "CalibrationError", "CoincidenceAnalyzer", "CoincidenceResult", "ConfigError", "DEFAULT_CONFIG", "DomainError",
    "EventFile", "EventFileError", "FitError", "IntensifierParams", "JointSpectrum", "PixelClusterer", "RocCurve",
    "SourceParams", "SpectrometerConfig", "TheoryParams", "TimewalkCorrector", "TimewalkTable", "analyze",
    "band_mask", "calibrate_timewalk", "cluster", "correct_and_centroid", "empirical_roc", "enhancements",
    "estimate_background", "eta",
    "expected_signal_column", "fit_band_profile", "histogram_dt", "hits_to_events", "match_coincidences",
    "model_roc", "n_prime", "optimal_width", "read_events", "sbr_snr_t", "sbr_snr_ts", "simulate",
    "simulate_ideal", "sort_events", "split_arms", "write_events",
]
