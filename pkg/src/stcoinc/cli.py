"""Command-line front end: ``stcoinc [global flags] <subcommand> ...``.

Exit codes: 0 success, 1 runtime/analysis failure, 2 usage or configuration
error. Every output directory receives a ``manifest.json`` describing the run.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .coincidence import analyze, check_mode, fit_band_profile, split_arms
from .errors import CalibrationError, ConfigError, DomainError, EventFileError, FitError
from .events import EVENT_DTYPE, EventWriter, canonical_order, iter_event_chunks, read_events, write_events_csv
from .geometry import DEFAULT_CONFIG, SpectrometerConfig
from .pixel import (TimewalkTable, calibrate_timewalk, cluster, correct_and_centroid, iter_hit_batches,
                    sort_events)
from .roc import empirical_roc, model_lambdas, model_roc
from .simulator import GroundTruth, IntensifierParams, SourceParams, iter_simulation
from .theory import SWEEP_COLUMNS, TheoryParams, sbr_snr_t, sbr_snr_ts, summary, sweep_w

CONFIG_SECTIONS = ("spectrometer", "source", "intensifier", "theory")
CALIBRATION_HITS = 2_000_000


# -- configuration -------------------------------------------------------------

class RunConfig:
    def __init__(self, data=None):
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(data) - set(CONFIG_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        self.raw = data
        self.spectrometer = SpectrometerConfig.from_dict(data.get("spectrometer", {}))
        self.source = SourceParams.from_dict(data.get("source", {}))
        self.intensifier = IntensifierParams.from_dict(data.get("intensifier", {}))
        theory = data.get("theory", {})
        try:
            self.theory = TheoryParams.from_dict(theory)
        except TypeError as exc:
            raise ConfigError(f"theory: {exc}") from exc

    @classmethod
    def load(cls, path):
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls(data)

    def digest(self):
        import hashlib

        canon = {
            "spectrometer": self.spectrometer.to_dict(),
            "source": self.source.to_dict(),
            "intensifier": self.intensifier.to_dict(),
            "theory": self.theory.to_dict(),
        }
        return hashlib.sha256(json.dumps(canon, sort_keys=True).encode()).hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(x, Path):
        return str(x)
    return x


def write_manifest(out, args, rc, inputs, outputs, timings, metrics):
    manifest = {
        "tool": "stcoinc",
        "version": __version__,
        "command": args.command,
        "config_digest": rc.digest(),
        "seed": args.seed,
        "threads": args.threads,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "timings_s": timings,
        "metrics": metrics,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
    return path


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return Path(path)


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{float(v):.10g}"


# -- event loading -----------------------------------------------------------

def _calibrate_from_file(path, cfg, threads, n_bins=16, min_samples=20, max_hits=CALIBRATION_HITS):
    table, used = None, 0
    for batch in iter_hit_batches(iter_event_chunks(path)):
        cl = cluster(batch, n_jobs=threads)
        if (cl.size > 1).any():
            part = calibrate_timewalk(cl, n_bins=n_bins, min_samples=min_samples)
            table = part if table is None else table.merge(part)
        used += len(batch)
        if max_hits and used >= max_hits:
            break
    if table is None:
        raise CalibrationError("no multi-hit clusters in the event file")
    return table, used


def load_photon_events(path, cfg, threads, table=None):
    """Cluster and correct every hit of an event file; events sorted by time."""
    parts = []
    for batch in iter_hit_batches(iter_event_chunks(path)):
        parts.append(correct_and_centroid(cluster(batch, n_jobs=threads), table, cfg))
    if not parts:
        return np.zeros(0, dtype=EVENT_DTYPE)
    return sort_events(np.concatenate(parts))


def _duration_for(events_path, explicit):
    if explicit is not None:
        if explicit <= 0:
            raise DomainError("--T must be positive")
        return float(explicit)
    sidecar = Path(events_path).parent / "manifest.json"
    if sidecar.exists():
        try:
            d = json.loads(sidecar.read_text()).get("metrics", {}).get("duration_s")
            if d:
                return float(d)
        except (json.JSONDecodeError, AttributeError):
            pass
    return None


def _events_and_table(args, rc):
    cfg = rc.spectrometer
    if args.no_timewalk:
        table = None
    elif args.table:
        table = TimewalkTable.from_json(args.table)
    else:
        table, _ = _calibrate_from_file(args.events, cfg, args.threads)
    events = load_photon_events(args.events, cfg, args.threads, table)
    signal, herald = split_arms(events)
    if not len(signal) or not len(herald):
        raise EventFileError("event file yields no signal or no herald events")
    return signal, herald, table


# -- subcommands --------------------------------------------------------------

def cmd_simulate(args, rc, out):
    src = rc.source
    if args.reference_regime:
        src = SourceParams.reference_regime(duration_s=src.duration_s, seed=src.seed, cfg=rc.spectrometer)
    if args.duration is not None:
        if args.duration < 0:
            raise DomainError("--duration must be >= 0")
        src = replace(src, duration_s=float(args.duration))
    if args.seed is not None:
        src = replace(src, seed=args.seed)
    cfg = rc.spectrometer
    events_path = out / "events.tpxe"
    truths, written_det = [], []
    carry = carry_det = None
    n_det, t_end = 0, 0.0
    margin = 10**9  # 1 ms: hits near a chunk edge are re-sorted together with the next chunk
    with EventWriter(events_path, cfg.digest()) as writer:
        for chunk in iter_simulation(src, rc.intensifier, cfg, ideal=args.ideal, n_jobs=args.threads):
            t_end += chunk.duration_s
            hits, det = chunk.hits, chunk.truth.hit_detection + n_det
            n_det += len(chunk.truth)
            if not args.no_truth:
                truths.append(chunk.truth)
            if carry is not None and len(carry):
                hits, det = np.concatenate([carry, hits]), np.concatenate([carry_det, det])
                order = canonical_order(hits)
                hits, det = hits[order], det[order]
            keep = hits["toa_ps"].astype(np.int64) >= int(round(t_end * 1e12)) - margin
            writer.write(hits[~keep])
            written_det.append(det[~keep])
            carry, carry_det = hits[keep], det[keep]
        if carry is not None:
            writer.write(carry)
            written_det.append(carry_det)
        n_hits = writer.count
    outputs = [events_path]
    if not args.no_truth:
        gt = GroundTruth.concatenate(truths) if truths else _empty_truth()
        gt.hit_detection = np.concatenate(written_det) if written_det else np.zeros(0, np.int64)
        truth_path = out / "truth.npz"
        gt.save_npz(truth_path)
        outputs.append(truth_path)
    if args.csv:
        outputs.append(write_events_csv(read_events(events_path).hits, out / "events.csv"))
    rates = src.expected_rates(cfg)
    metrics = {
        "duration_s": src.duration_s,
        "n_hits": n_hits,
        "n_detections": n_det,
        "expected": rates,
        "source": src.to_dict(),
        "ideal": bool(args.ideal),
    }
    return [], outputs, metrics


def _empty_truth():
    z = np.zeros(0, dtype=np.int64)
    return GroundTruth(z, z.astype(np.int8), z, z, z, z.astype(bool), z)


def cmd_calibrate(args, rc, out):
    table, used = _calibrate_from_file(args.events, rc.spectrometer, args.threads, args.bins,
                                       args.min_samples, args.max_hits)
    path = out / "timewalk.json"
    table.to_json(path)
    metrics = {
        "hits_used": used,
        "cells_supported": int(table.valid.sum()),
        "walk_ns_at_bin_centers": table.walk_ns(table.centers).tolist(),
    }
    return [args.events], [path], metrics


def cmd_analyze(args, rc, out):
    check_mode(args.mode, args.w)
    cfg = rc.spectrometer
    signal, herald, table = _events_and_table(args, rc)
    T = _duration_for(args.events, args.T)
    res = analyze(signal, herald, cfg, args.mode, args.w, T, tuple(args.range))
    r = res.result
    doc = r.to_dict()
    try:
        fit = fit_band_profile(res.joint_spectrum, cfg)
        doc["band_fit"] = fit.to_dict()
    except FitError as exc:
        doc["band_fit"] = {"error": str(exc)}
    outputs = [out / "result.json", out / "histogram.csv", out / "joint.csv", out / "joint.json"]
    outputs[0].write_text(json.dumps(_jsonable(doc), indent=2) + "\n")
    r.histogram.to_csv(outputs[1])
    res.joint_spectrum.to_csv(outputs[2])
    res.joint_spectrum.to_json(outputs[3])
    if table is not None and not args.table:
        table.to_json(out / "timewalk.json")
        outputs.append(out / "timewalk.json")
    metrics = {k: doc[k] for k in ("mode", "w", "duration_s", "peak_ns", "c_tot", "c_b", "sbr", "sbr_err",
                                   "snr", "snr_err")}
    metrics["band_fit"] = doc["band_fit"]
    print(json.dumps(_jsonable(metrics), indent=2))
    return [args.events], outputs, metrics


def cmd_sweep_w(args, rc, out):
    if args.w_min < 1 or args.w_max < args.w_min:
        raise ConfigError("need 1 <= --w-min <= --w-max")
    widths = list(range(args.w_min, args.w_max + 1))
    rows = sweep_w(rc.theory, widths, args.approx, rc.spectrometer)
    header = list(SWEEP_COLUMNS)
    inputs = []
    if args.events:
        inputs.append(args.events)
        signal, herald, _ = _events_and_table(args, rc)
        T = _duration_for(args.events, args.T)
        base = analyze(signal, herald, rc.spectrometer, "t", None, T)
        header += ["SBR_ts_meas", "SBR_ts_meas_err", "SNR_ts_meas", "SNR_ts_meas_err", "E_SBR_meas", "E_SNR_meas"]
        t_res = base.result
        measured = []
        for w in widths:
            r = analyze(signal, herald, rc.spectrometer, "ts", float(w), T, matches=base.matches).result
            measured.append((r.sbr, r.sbr_err, r.snr, r.snr_err, r.sbr / t_res.sbr, r.snr / t_res.snr))
        rows = [tuple(a) + tuple(b) for a, b in zip(rows, measured)]
    path = _write_csv(out / "sweep_w.csv", header, rows)
    best = max(rows, key=lambda r: (r[4], -r[0]))
    metrics = {"w_opt": best[0], "E_SNR_max": best[4], "E_SBR_w_min": rows[0][3]}
    return inputs, [path], metrics


def cmd_snr_vs_t(args, rc, out):
    times = sorted(args.times)
    if not times or times[0] <= 0:
        raise ConfigError("--times must be positive")
    p = rc.theory.with_width(args.w, args.approx, rc.spectrometer)
    header = ["T_s", "SNR_t", "SNR_ts", "ratio"]
    rows = []
    for t in times:
        q = replace(p, T_s=float(t))
        a, b = sbr_snr_t(q)[1], sbr_snr_ts(q)[1]
        rows.append([t, a, b, b / a if a else float("nan")])
    inputs = []
    if args.events:
        inputs.append(args.events)
        signal, herald, _ = _events_and_table(args, rc)
        t0 = min(int(signal["toa_ps"][0]), int(herald["toa_ps"][0]))
        header += ["SNR_t_meas", "SNR_t_meas_err", "SNR_ts_meas", "SNR_ts_meas_err"]
        for row, t in zip(rows, times):
            cut = t0 + int(round(t * 1e12))
            s = signal[signal["toa_ps"] < cut]
            h = herald[herald["toa_ps"] < cut]
            rt = analyze(s, h, rc.spectrometer, "t", None, t).result
            rs = analyze(s, h, rc.spectrometer, "ts", float(args.w), t).result
            row += [rt.snr, rt.snr_err, rs.snr, rs.snr_err]
    path = _write_csv(out / "snr_vs_t.csv", header, rows)
    return inputs, [path], {"ratio": [r[3] for r in rows], "w": args.w}


def cmd_roc(args, rc, out):
    cfg = rc.spectrometer
    if args.segment <= 0:
        raise ConfigError("--segment must be positive")
    modes = [("t", None), ("ts", float(args.w))]
    outputs, metrics, inputs = [], {"operating_points": {}, "lambdas": {}}, []
    signal = herald = None
    if args.events:
        inputs.append(args.events)
        signal, herald, _ = _events_and_table(args, rc)
        T = _duration_for(args.events, args.T)
        if T is None:
            raise ConfigError("--T is required when the run duration cannot be found")
    for mode, w in modes:
        lam_sig, lam_bg = model_lambdas(rc.theory, args.segment, mode, w, args.approx, cfg)
        n_seg = 0
        emp = None
        if signal is not None:
            emp = empirical_roc(signal, herald, T, cfg, args.segment, mode, w)
            n_seg = emp.n_segments
            if args.lambda_source == "empirical":
                res = analyze(signal, herald, cfg, mode, w, T).result
                lam_bg = res.c_b / T * args.segment
                lam_sig = max(res.c_tot - res.c_b, 0.0) / T * args.segment
        top = int(math.ceil(lam_sig + lam_bg + 10 * math.sqrt(lam_sig + lam_bg + 1) + 10))
        if emp is not None:
            top = max(top, int(emp.thresholds[-1]))
            emp = empirical_roc(signal, herald, T, cfg, args.segment, mode, w, thresholds=np.arange(top + 1))
        model = model_roc(lam_sig, lam_bg, np.arange(top + 1), args.segment, n_seg)
        outputs.append(model.to_csv(out / f"roc_{mode}_model.csv"))
        op = {"model": model.operating_point(args.target_pfa)}
        if emp is not None:
            outputs.append(emp.to_csv(out / f"roc_{mode}_empirical.csv"))
            k = op["model"]["threshold"]
            op["empirical_at_model_threshold"] = {"threshold": k, "pd": float(emp.pd[k]), "pfa": float(emp.pfa[k])}
        metrics["operating_points"][mode] = op
        metrics["lambdas"][mode] = {"signal": lam_sig, "background": lam_bg, "w": w}
    metrics["segment_s"] = args.segment
    summary_path = out / "roc.json"
    summary_path.write_text(json.dumps(_jsonable(metrics), indent=2) + "\n")
    outputs.append(summary_path)
    return inputs, outputs, metrics


def cmd_theory(args, rc, out):
    p = rc.theory
    if args.w is not None:
        p = p.with_width(args.w, args.approx, rc.spectrometer)
    doc = summary(p, rc.spectrometer)
    text = json.dumps(_jsonable(doc), indent=2)
    print(text)
    path = out / "theory.json"
    path.write_text(text + "\n")
    return [], [path], doc


COMMANDS = {
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "analyze": cmd_analyze,
    "sweep-w": cmd_sweep_w,
    "snr-vs-t": cmd_snr_vs_t,
    "roc": cmd_roc,
    "theory": cmd_theory,
}


# -- parser --------------------------------------------------------------------

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _global_flags(parser, suppress):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="JSON config with spectrometer/source/intensifier/theory sections")
    parser.add_argument("--seed", type=int, default=d(None), help="master seed (overrides source.seed)")
    parser.add_argument("--threads", type=_positive_int, default=d(1), help="worker threads; results do not depend on it")
    parser.add_argument("--out", default=d("."), help="output directory")


def _event_input(p, required=True):
    p.add_argument("events" if required else "--events", help="binary event file")
    p.add_argument("--table", help="time-walk table JSON (default: calibrate from the file itself)")
    p.add_argument("--no-timewalk", action="store_true", help="skip time-walk correction")
    p.add_argument("--T", type=float, help="acquisition time in s (default: from the sibling manifest or data span)")


def build_parser():
    parser = argparse.ArgumentParser(prog="stcoinc", description="Spectro-temporal coincidence analysis")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate a raw hit stream")
    p.add_argument("--duration", type=float, help="seconds (overrides source.duration_s)")
    p.add_argument("--ideal", action="store_true", help="one hit per photon, no time-walk")
    p.add_argument("--reference-regime", action="store_true", help="rates matching the reference 200 s measurement")
    p.add_argument("--no-truth", action="store_true", help="do not write the ground-truth sidecar")
    p.add_argument("--csv", action="store_true", help="also write events.csv")

    p = sub.add_parser("calibrate", parents=[common], help="build a time-walk table")
    p.add_argument("events")
    p.add_argument("--bins", type=_positive_int, default=16)
    p.add_argument("--min-samples", type=_positive_int, default=20)
    p.add_argument("--max-hits", type=int, default=0, help="stop after this many hits (0 = all)")

    p = sub.add_parser("analyze", parents=[common], help="coincidence SBR/SNR")
    _event_input(p)
    p.add_argument("--mode", choices=("t", "ts"), default="t")
    p.add_argument("--w", type=float, help="selection band width in pixels (mode ts only)")
    p.add_argument("--range", type=float, nargs=2, default=(0.0, 100.0), metavar=("LO", "HI"))

    p = sub.add_parser("sweep-w", parents=[common], help="enhancement factors versus band width")
    _event_input(p, required=False)
    p.add_argument("--w-min", type=int, default=1)
    p.add_argument("--w-max", type=int, default=40)
    p.add_argument("--approx", action="store_true", help="use N' = l*w instead of the exact band count")

    p = sub.add_parser("snr-vs-t", parents=[common], help="SNR versus acquisition time")
    _event_input(p, required=False)
    p.add_argument("--w", type=float, default=19.0)
    p.add_argument("--times", type=float, nargs="+", default=[12.5, 25, 50, 100, 200])
    p.add_argument("--approx", action="store_true")

    p = sub.add_parser("roc", parents=[common], help="ROC curves from segmented counts")
    _event_input(p, required=False)
    p.add_argument("--segment", type=float, default=0.5)
    p.add_argument("--w", type=float, default=14.0)
    p.add_argument("--target-pfa", type=float, default=1e-3)
    p.add_argument("--lambda-source", choices=("theory", "empirical"), default="theory")
    p.add_argument("--approx", action="store_true")

    p = sub.add_parser("theory", parents=[common], help="print every closed-form quantity")
    p.add_argument("--w", type=float, help="band width; recomputes N' (default: theory.N_prime as given)")
    p.add_argument("--approx", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        rc = RunConfig.load(args.config)
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        if args.command == "analyze" and args.w is not None and args.mode != "ts":
            parser.error("--w requires --mode ts")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        inputs, outputs, metrics = COMMANDS[args.command](args, rc, out)
        timings = {"total": round(time.perf_counter() - t0, 3)}
        write_manifest(out, args, rc, inputs, outputs, timings, metrics)
    except (ConfigError, DomainError) as exc:
        print(f"stcoinc: error: {exc}", file=sys.stderr)
        return 2
    except (EventFileError, CalibrationError, FitError, OSError, ValueError) as exc:
        print(f"stcoinc: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
