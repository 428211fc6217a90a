import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from stcoinc.cli import main
from stcoinc.events import read_events
from stcoinc.simulator import IntensifierParams


def run(tmp, *argv):
    return main(["--out", str(tmp), *argv])


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def truncated_geometric_moments(mean, cap):
    """First two moments of a geometric hit count conditioned on ``k <= cap``."""
    p = 1.0 / mean
    k = np.arange(1, cap + 1)
    pmf = p * (1 - p) ** (k - 1)
    pmf /= pmf.sum()
    return float((k * pmf).sum()), float((k * k * pmf).sum())


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run(out, "--seed", "1", "simulate", "--duration", "10") == 0
    return out


def test_simulate_zero_duration_writes_empty_file(tmp_path):
    assert run(tmp_path, "simulate", "--duration", "0") == 0
    assert len(read_events(tmp_path / "events.tpxe").hits) == 0
    assert (tmp_path / "manifest.json").exists()


def test_simulate_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, "--seed", "5", "simulate", "--duration", "0.2") == 0
    assert run(b, "--seed", "5", "--threads", "3", "simulate", "--duration", "0.2") == 0
    assert (a / "events.tpxe").read_bytes() == (b / "events.tpxe").read_bytes()
    assert (a / "truth.npz").read_bytes() == (b / "truth.npz").read_bytes()


def test_default_record_count(default_run):
    man = json.loads((default_run / "manifest.json").read_text())
    n = len(read_events(default_run / "events.tpxe").hits)
    assert man["metrics"]["n_hits"] == n
    ip = IntensifierParams()
    ek, ek2 = truncated_geometric_moments(ip.cluster_mean, ip.cluster_max)
    rate = 40_000 + 1_200 + 60_000
    mean, sd = rate * 10 * ek, math.sqrt(rate * 10 * ek2)
    assert abs(n - mean) < 4 * sd


def test_ideal_detection_count(tmp_path):
    assert run(tmp_path, "--seed", "2", "simulate", "--duration", "1", "--ideal", "--no-truth") == 0
    n = len(read_events(tmp_path / "events.tpxe").hits)
    assert abs(n - 101_200) < 4 * math.sqrt(101_200)
    assert not (tmp_path / "truth.npz").exists()


def test_analyze_outputs(default_run, tmp_path, capsys):
    assert run(tmp_path, "analyze", str(default_run / "events.tpxe"), "--mode", "ts", "--w", "19") == 0
    printed = json.loads(capsys.readouterr().out)
    doc = json.loads((tmp_path / "result.json").read_text())
    assert doc["mode"] == "ts" and doc["w"] == 19
    assert doc["duration_s"] == 10
    assert printed["sbr"] == doc["sbr"] and doc["sbr"] > 0
    assert 15 <= doc["peak_ns"] <= 35  # few pairs in 10 s; the precise peak is checked on long runs
    for name in ("histogram.csv", "joint.csv", "joint.json", "timewalk.json", "manifest.json"):
        assert (tmp_path / name).exists()
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["command"] == "analyze" and len(man["config_digest"]) == 64


def test_analyze_exit_codes(default_run, tmp_path, capsys):
    ev = str(default_run / "events.tpxe")
    with pytest.raises(SystemExit) as exc:
        run(tmp_path, "analyze", ev, "--w", "19")
    assert exc.value.code == 2
    assert run(tmp_path, "analyze", str(tmp_path / "missing.tpxe")) == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"spectrometer": {"tau_ns": -1}}')
    assert run(tmp_path, "--config", str(bad), "analyze", ev) == 2
    bad.write_text("{not json")
    assert run(tmp_path, "--config", str(bad), "theory") == 2
    junk = tmp_path / "junk.tpxe"
    junk.write_bytes(b"nope")
    assert run(tmp_path, "analyze", str(junk)) == 1
    assert run(tmp_path, "--seed", "-1", "theory") == 2


def test_sweep_w_csv(tmp_path):
    assert run(tmp_path, "sweep-w") == 0
    table = rows(tmp_path / "sweep_w.csv")
    assert len(table) == 40
    best = max(table, key=lambda r: float(r["E_SNR"]))
    assert 16 <= int(best["w"]) <= 22
    assert float(best["E_SNR"]) == pytest.approx(2.31, abs=0.01)
    first = (tmp_path / "sweep_w.csv").read_bytes()
    assert run(tmp_path, "sweep-w") == 0
    assert (tmp_path / "sweep_w.csv").read_bytes() == first


def test_snr_vs_t_ratio_constant(tmp_path):
    assert run(tmp_path, "snr-vs-t") == 0
    table = rows(tmp_path / "snr_vs_t.csv")
    assert [float(r["T_s"]) for r in table] == [12.5, 25, 50, 100, 200]
    for r in table:
        assert float(r["ratio"]) == pytest.approx(2.31, abs=0.01)
    snr = [float(r["SNR_t"]) for r in table]
    assert snr[-1] / snr[0] == pytest.approx(4.0, rel=1e-9)


def test_roc_model_operating_points(tmp_path):
    assert run(tmp_path, "roc") == 0
    doc = json.loads((tmp_path / "roc.json").read_text())
    ts, t = doc["operating_points"]["ts"]["model"], doc["operating_points"]["t"]["model"]
    assert ts["threshold"] == 6 and t["threshold"] == 38
    assert ts["pd"] == pytest.approx(0.5, abs=0.1)
    assert t["pd"] == pytest.approx(0.04, abs=0.1)
    for name in ("roc_t_model.csv", "roc_ts_model.csv"):
        assert rows(tmp_path / name)[0]["threshold"] == "0"


def test_roc_with_events(default_run, tmp_path):
    assert run(tmp_path, "roc", "--events", str(default_run / "events.tpxe"), "--lambda-source", "empirical") == 0
    doc = json.loads((tmp_path / "roc.json").read_text())
    assert "empirical_at_model_threshold" in doc["operating_points"]["ts"]
    emp = rows(tmp_path / "roc_t_empirical.csv")
    assert float(emp[0]["pd"]) == 1.0


def test_theory_json(tmp_path, capsys):
    assert run(tmp_path, "theory") == 0
    printed = json.loads(capsys.readouterr().out)
    doc = json.loads((tmp_path / "theory.json").read_text())
    assert printed == doc
    assert doc["SBR_t"] == pytest.approx(0.2472, abs=1e-4)
    assert doc["SNR_ts"] == pytest.approx(35.2, abs=0.1)
    assert run(tmp_path, "theory", "--w", "19") == 0


def test_thread_count_does_not_change_analysis(default_run, tmp_path):
    ev = str(default_run / "events.tpxe")
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(a, "--threads", "1", "analyze", ev) == 0
    assert run(b, "--threads", "4", "analyze", ev) == 0
    assert (a / "histogram.csv").read_bytes() == (b / "histogram.csv").read_bytes()
    assert json.loads((a / "result.json").read_text()) == json.loads((b / "result.json").read_text())


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "stcoinc.cli", "--out", str(tmp_path), "theory"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["E_SNR"] == pytest.approx(2.31, abs=0.01)
