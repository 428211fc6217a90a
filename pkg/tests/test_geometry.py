import json

import numpy as np
import pytest

from stcoinc.errors import ConfigError, DomainError
from stcoinc.geometry import (
    DEFAULT_CONFIG,
    SpectrometerConfig,
    band_length,
    band_mask,
    column_at_wavelength,
    conjugate_wavelength,
    expected_signal_column,
    in_selection_band,
    n_prime,
    round_half_down,
    wavelength_at_column,
)

from oracles import band_count_loops


@pytest.mark.parametrize("col,lam", [(0, 775.0), (255, 845.0), (127.5, 810.0)])
def test_wavelength_endpoints(col, lam):
    assert wavelength_at_column(col) == pytest.approx(lam, abs=1e-12)


def test_column_round_trip():
    c = np.linspace(0, 255, 10001)
    assert np.max(np.abs(column_at_wavelength(wavelength_at_column(c)) - c)) < 1e-9


@pytest.mark.parametrize("bad", [-0.01, 255.01, np.nan])
def test_wavelength_out_of_range(bad):
    with pytest.raises(DomainError):
        wavelength_at_column(bad)


@pytest.mark.parametrize("lh,ls", [(810, 810.0), (830, 790.9411764705882), (845, 777.7840909090909)])
def test_conjugate_examples(lh, ls):
    assert conjugate_wavelength(lh, 405) == pytest.approx(ls, rel=1e-12)


def test_conjugate_is_involution():
    lh = np.linspace(780, 845, 200)
    assert np.allclose(conjugate_wavelength(conjugate_wavelength(lh)), lh, rtol=0, atol=1e-9)


@pytest.mark.parametrize("bad", [405.0, 300.0])
def test_conjugate_nonphysical(bad):
    with pytest.raises(DomainError):
        conjugate_wavelength(bad, 405.0)


def test_expected_signal_column_examples():
    assert expected_signal_column(127.5) == pytest.approx(127.5, abs=1e-9)
    assert expected_signal_column(200) == pytest.approx(58.4, abs=0.1)
    assert expected_signal_column(0) > 255


def test_in_selection_band_examples():
    assert in_selection_band(127, 128, 19)
    assert not in_selection_band(0, 0, 19)
    with pytest.raises(DomainError):
        in_selection_band(0, 0, 0.5)


def test_n_prime_matches_oracle_and_reference_scale():
    for w in (1, 5, 14, 19, 30):
        assert n_prime(w) == band_count_loops(w)
    assert n_prime(19) == pytest.approx(4636, rel=0.05)
    assert n_prime(19, approx=True) == 244 * 19


def test_n_prime_monotone_and_per_width_scale():
    counts = [n_prime(w) for w in range(1, 41)]
    assert all(b >= a for a, b in zip(counts, counts[1:]))
    for w in range(5, 31):
        assert 220 <= n_prime(w) / w <= 260
        assert n_prime(w) <= 256 * w + 256


def test_band_mask_agrees_with_predicate():
    m = band_mask(7)
    s, h = np.meshgrid(np.arange(256), np.arange(256), indexing="ij")
    assert np.array_equal(m, in_selection_band(s, h, 7))
    assert not m.flags.writeable


def test_band_mask_infinite_width_is_everything():
    assert band_mask(np.inf).all()


def test_band_length():
    assert band_length() == 245


def test_round_half_down():
    assert round_half_down([0.5, 1.5, 1.49, 1.51, -0.5]).tolist() == [0, 1, 1, 2, -1]


def test_config_validation():
    with pytest.raises(ConfigError):
        SpectrometerConfig(lambda_min_nm=850)
    with pytest.raises(ConfigError):
        SpectrometerConfig(herald_rows=(150, 170))
    with pytest.raises(ConfigError):
        SpectrometerConfig(lambda_min_nm=400)
    with pytest.raises(ConfigError):
        SpectrometerConfig.from_dict({"nope": 1})


def test_config_json_round_trip(tmp_path):
    cfg = SpectrometerConfig(tau_ns=15.0, herald_rows=(10, 20))
    path = tmp_path / "c.json"
    cfg.to_json(path)
    assert SpectrometerConfig.from_json(path) == cfg
    assert set(json.loads(path.read_text())) == set(DEFAULT_CONFIG.to_dict())
    assert cfg.digest() != DEFAULT_CONFIG.digest()
    assert len(cfg.digest()) == 32
