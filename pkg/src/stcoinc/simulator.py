"""Seeded Monte Carlo generator of raw pixel-hit streams.

The run is cut into fixed one-second slabs. Each slab draws from its own
``SeedSequence(seed, spawn_key=(slab,))`` stream, so the output does not depend
on how many worker threads produce the slabs.

Pair emissions are Poisson with rate ``P``; each pair independently yields a
herald (prob. ``mu_h``) and a signal (prob. ``mu_s``) detection. Only detected
photons matter, so the three thinned processes (both / herald only / signal
only) are drawn directly instead of materialising undetected pairs.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numba
import numpy as np

from .errors import ConfigError
from .events import HIT_DTYPE, Arm, EventFile, canonical_order, is_canonical
from .geometry import (
    DEFAULT_CONFIG,
    MAX_PIXEL,
    N_COLUMNS,
    SpectrometerConfig,
    column_at_wavelength,
    conjugate_wavelength,
)

SLAB_S = 1.0
PS_PER_S = 10**12
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


def _check_fields(cls, data):
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} field(s): {sorted(unknown)}")


@dataclass(frozen=True)
class SourceParams:
    """Pair source, jamming background and timing parameters."""

    pair_rate_P: float = 4e6
    bg_rate_B: float = 6e4
    mu_s: float = 3e-4
    mu_h: float = 0.01
    herald_center_nm: float = 810.0
    herald_fwhm_nm: float = 20.0
    alpha_px: float = 10.0
    jitter_ns_rms: float = 5.0
    tof_delay_ns: float = 25.0
    duration_s: float = 10.0
    seed: int = 0

    def __post_init__(self):
        for name in ("pair_rate_P", "bg_rate_B", "mu_s", "mu_h", "jitter_ns_rms", "tof_delay_ns", "duration_s"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be a finite number >= 0, got {v!r}")
        if self.mu_s > 1 or self.mu_h > 1:
            raise ConfigError("detection efficiencies must be <= 1")
        if not self.alpha_px > 0:
            raise ConfigError("alpha_px must be > 0")
        if not self.herald_fwhm_nm > 0:
            raise ConfigError("herald_fwhm_nm must be > 0")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")

    @classmethod
    def from_dict(cls, data):
        _check_fields(cls, data)
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        return asdict(self)

    @classmethod
    def reference_regime(cls, duration_s=200.0, seed=0, coincidence_rate=10.6, signal_per_column=221.0,
                     herald_per_column=148.0, cfg=DEFAULT_CONFIG, **overrides):
        """Rates tuned so the gated pair rate and per-column singles match the
        measured 200 s run (C=10.6/s, S_s=221/s, S_h=148/s)."""
        base = replace(cls(), duration_s=duration_s, seed=seed, **overrides)
        herald_total = herald_per_column * N_COLUMNS
        mu_h = herald_total / base.pair_rate_P
        gate = gate_efficiency(cfg.tau_ns, base.jitter_ns_rms)
        mu_s = coincidence_rate / (gate * herald_total)
        bg = signal_per_column * N_COLUMNS - mu_s * base.pair_rate_P
        return replace(base, mu_h=mu_h, mu_s=mu_s, bg_rate_B=bg)

    def expected_rates(self, cfg=DEFAULT_CONFIG):
        """Closed-form rates: gated pair coincidences and per-column singles."""
        P = self.pair_rate_P
        return {
            "C": self.mu_s * self.mu_h * P * gate_efficiency(cfg.tau_ns, self.jitter_ns_rms),
            "C_ungated": self.mu_s * self.mu_h * P,
            "S_s": (self.mu_s * P + self.bg_rate_B) / N_COLUMNS,
            "S_h": self.mu_h * P / N_COLUMNS,
            "background_fraction": self.bg_rate_B / (self.mu_s * P + self.bg_rate_B)
            if (self.mu_s * P + self.bg_rate_B) > 0 else 0.0,
        }


def gate_efficiency(tau_ns, jitter_ns_rms):
    """Fraction of true pairs within a centred gate of width ``tau_ns``; both
    arms carry independent Gaussian jitter."""
    if jitter_ns_rms == 0:
        return 1.0
    return math.erf((tau_ns / 2) / (2.0 * jitter_ns_rms))


@dataclass(frozen=True)
class IntensifierParams:
    """Intensifier flash and pixel-response model.

    Cluster sizes follow a geometric law (mean ``cluster_mean``) truncated at
    ``cluster_max``; per-hit ToT is a discretised log-normal truncated to
    ``[tot_min_ns, tot_max_ns]``. Hits arrive late by
    ``timewalk_c0_ns / (tot + timewalk_c1_ns)``.
    """

    cluster_mean: float = 4.0
    cluster_max: int = 16
    tot_median_ns: float = 150.0
    tot_sigma_log: float = 0.9
    tot_min_ns: int = 25
    tot_max_ns: int = 2000
    timewalk_c0_ns: float = 600.0
    timewalk_c1_ns: float = 50.0
    pixel_jitter_ns_rms: float = 0.5

    def __post_init__(self):
        if self.cluster_mean < 1 or self.cluster_max < 1:
            raise ConfigError("cluster_mean and cluster_max must be >= 1")
        if not 0 < self.tot_min_ns <= self.tot_max_ns <= 65535:
            raise ConfigError("need 0 < tot_min_ns <= tot_max_ns <= 65535")
        if self.timewalk_c0_ns < 0 or self.timewalk_c1_ns <= -self.tot_min_ns:
            raise ConfigError("time-walk law must be non-negative and finite over the ToT range")
        if self.pixel_jitter_ns_rms < 0 or self.tot_sigma_log < 0:
            raise ConfigError("spreads must be >= 0")

    @classmethod
    def from_dict(cls, data):
        _check_fields(cls, data)
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        return asdict(self)

    def timewalk_ns(self, tot_ns):
        return self.timewalk_c0_ns / (np.asarray(tot_ns, dtype=float) + self.timewalk_c1_ns)


@dataclass
class GroundTruth:
    """Per-detection origin tags; never consumed by the analysis pipeline.

    ``arrival_ps`` is the jitter-free photon arrival time. ``pair_id`` is -1
    for background photons. ``hit_detection`` maps each hit (in file order)
    to its detection.
    """

    arrival_ps: np.ndarray
    arm: np.ndarray
    col: np.ndarray
    row: np.ndarray
    pair_id: np.ndarray
    partner_detected: np.ndarray
    hit_detection: np.ndarray

    def __len__(self):
        return len(self.arrival_ps)

    def to_dict(self):
        return {
            "arrival_ps": self.arrival_ps.tolist(),
            "arm": [Arm(a).name.lower() for a in self.arm],
            "col": self.col.tolist(),
            "row": self.row.tolist(),
            "origin": ["pair" if p >= 0 else "background" for p in self.pair_id],
            "pair_id": self.pair_id.tolist(),
            "partner_detected": self.partner_detected.tolist(),
            "hit_detection": self.hit_detection.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        arms = {a.name.lower(): int(a) for a in Arm}
        return cls(
            arrival_ps=np.asarray(d["arrival_ps"], dtype=np.int64),
            arm=np.asarray([arms[a] for a in d["arm"]], dtype=np.int8),
            col=np.asarray(d["col"], dtype=np.int64),
            row=np.asarray(d["row"], dtype=np.int64),
            pair_id=np.asarray(d["pair_id"], dtype=np.int64),
            partner_detected=np.asarray(d["partner_detected"], dtype=bool),
            hit_detection=np.asarray(d["hit_detection"], dtype=np.int64),
        )

    def save_npz(self, path):
        np.savez(path, **{f.name: getattr(self, f.name) for f in fields(self)})

    @classmethod
    def load_npz(cls, path):
        with np.load(path) as z:
            return cls(**{f.name: z[f.name] for f in fields(cls)})

    @classmethod
    def concatenate(cls, parts):
        """Join per-chunk truths; ``hit_detection`` is offset chunk by chunk."""
        out, n_det = {f.name: [] for f in fields(cls)}, 0
        for p in parts:
            for f in fields(cls):
                v = getattr(p, f.name)
                out[f.name].append(v + n_det if f.name == "hit_detection" else v)
            n_det += len(p)
        return cls(**{k: np.concatenate(v) for k, v in out.items()})

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def read_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SimulationResult:
    events: EventFile
    truth: GroundTruth
    duration_s: float
    source: SourceParams = field(default_factory=SourceParams)

    @property
    def hits(self):
        return self.events.hits


# -- slab generation ---------------------------------------------------------

_DC = np.array([-1, 0, 1, -1, 1, -1, 0, 1], dtype=np.int64)
_DR = np.array([-1, -1, -1, 0, 0, 1, 1, 1], dtype=np.int64)


@numba.njit(cache=True, nogil=True)
def _expand_clusters(seed, det_ps, center_col, center_row, sizes, tot_mu, tot_sigma, tot_min, tot_max,
                     c0, c1, pix_jit, out_col, out_row, out_tot, out_toa, out_det):
    """Expand detections into pixel clusters; returns the number of hits.

    Growth is random and connected: each new hit is an unoccupied 8-neighbour
    of a random existing member (a cluster stays smaller if attempts run out).
    The brightest ToT sits at the flash centre and ToT decreases in growth
    order; each hit is delayed by the time-walk law plus pixel jitter.
    """
    np.random.seed(seed)
    n = len(sizes)
    m_total = 0
    tots = np.empty(64, dtype=np.int64)
    for d in range(n):
        start = m_total
        out_col[start] = center_col[d]
        out_row[start] = center_row[d]
        m = 1
        attempts = 0
        while m < sizes[d] and attempts < 3 * sizes[d] + 16:
            attempts += 1
            parent = start + int(np.random.random() * m)
            k = int(np.random.random() * 8)
            nc = out_col[parent] + _DC[k]
            nr = out_row[parent] + _DR[k]
            if nc < 0 or nc > 255 or nr < 0 or nr > 255:
                continue
            taken = False
            for q in range(start, start + m):
                if out_col[q] == nc and out_row[q] == nr:
                    taken = True
                    break
            if taken:
                continue
            out_col[start + m] = nc
            out_row[start + m] = nr
            m += 1
        for q in range(m):
            t = np.rint(np.exp(np.random.normal(tot_mu, tot_sigma)))
            while t < tot_min or t > tot_max:
                t = np.rint(np.exp(np.random.normal(tot_mu, tot_sigma)))
            v = int(t)
            # insertion sort, descending
            j = q
            while j > 0 and tots[j - 1] < v:
                tots[j] = tots[j - 1]
                j -= 1
            tots[j] = v
        for q in range(m):
            out_tot[start + q] = tots[q]
            walk = c0 / (tots[q] + c1) * 1e3
            jit = np.random.normal(0.0, pix_jit) if pix_jit > 0 else 0.0
            out_toa[start + q] = det_ps[d] + walk + jit
            out_det[start + q] = d
        m_total += m
    return m_total


def _truncated_normal(rng, mean, sigma, lo, hi, n):
    out = rng.normal(mean, sigma, n)
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = rng.normal(mean, sigma, int(bad.sum()))
        bad = (out < lo) | (out > hi)
    return out


def _band_interior(rows):
    lo, hi = rows
    return (lo + 2, hi - 2) if hi - lo >= 4 else (lo, hi)


def _cluster_sizes(rng, intf, n):
    if intf.cluster_mean <= 1 or intf.cluster_max == 1:
        return np.ones(n, dtype=np.int64)
    p = 1.0 / intf.cluster_mean
    q = 1.0 - p
    # inverse CDF of the geometric law conditioned on k <= cluster_max
    u = rng.random(n)
    k = 1 + np.floor(np.log1p(-u * (1.0 - q**intf.cluster_max)) / math.log(q))
    return np.clip(k, 1, intf.cluster_max).astype(np.int64)


def _draw_tot(rng, intf, n):
    """Log-normal ToT rounded to whole ns and truncated (redrawn) to the range."""
    def draw(k):
        return np.rint(np.exp(rng.normal(math.log(intf.tot_median_ns), intf.tot_sigma_log, k)))

    out = draw(n)
    bad = (out < intf.tot_min_ns) | (out > intf.tot_max_ns)
    while bad.any():
        out[bad] = draw(int(bad.sum()))
        bad = (out < intf.tot_min_ns) | (out > intf.tot_max_ns)
    return out.astype(np.int64)


def _simulate_slab(k, src, intf, cfg, ideal):
    t0 = k * SLAB_S
    dt = min(SLAB_S, src.duration_s - t0)
    rng = np.random.default_rng(np.random.SeedSequence(int(src.seed), spawn_key=(k,)))
    P = src.pair_rate_P
    n_both = rng.poisson(P * src.mu_s * src.mu_h * dt)
    n_h = rng.poisson(P * src.mu_h * (1.0 - src.mu_s) * dt)
    n_s = rng.poisson(P * src.mu_s * (1.0 - src.mu_h) * dt)
    n_bg = rng.poisson(src.bg_rate_B * dt)

    n_pairs = n_both + n_h + n_s
    emit_ps = (t0 + dt * rng.random(n_pairs)) * PS_PER_S
    has_h = np.zeros(n_pairs, dtype=bool)
    has_s = np.zeros(n_pairs, dtype=bool)
    has_h[: n_both + n_h] = True
    has_s[:n_both] = True
    has_s[n_both + n_h:] = True
    pair_id = k * (1 << 32) + np.arange(n_pairs, dtype=np.int64)

    sigma_nm = src.herald_fwhm_nm * FWHM_TO_SIGMA
    lam_h = _truncated_normal(rng, src.herald_center_nm, sigma_nm, cfg.lambda_min_nm, cfg.lambda_max_nm, n_pairs)
    h_col = np.clip(column_at_wavelength(lam_h, cfg), 0, MAX_PIXEL)
    # band cross-section exp[-2 (x/alpha)^2] is a Gaussian with sigma = alpha/2
    s_col = column_at_wavelength(conjugate_wavelength(lam_h, cfg.lambda_pump_nm), cfg)
    s_col = s_col + rng.normal(0.0, src.alpha_px / 2.0, n_pairs)
    s_on = (s_col >= -0.5) & (s_col < MAX_PIXEL + 0.5)
    has_s &= s_on

    hl, hh = _band_interior(cfg.herald_rows)
    sl, sh = _band_interior(cfg.signal_rows)
    jit = src.jitter_ns_rms * 1e3

    h_idx = np.flatnonzero(has_h)
    s_idx = np.flatnonzero(has_s)
    nh, ns = len(h_idx), len(s_idx)
    arrival = np.concatenate([
        emit_ps[h_idx],
        emit_ps[s_idx] + src.tof_delay_ns * 1e3,
        (t0 + dt * rng.random(n_bg)) * PS_PER_S,
    ])
    det = arrival + rng.normal(0.0, jit, len(arrival)) if jit > 0 else arrival.copy()
    col = np.concatenate([
        np.rint(h_col[h_idx]),
        np.clip(np.rint(s_col[s_idx]), 0, MAX_PIXEL),
        rng.integers(0, N_COLUMNS, n_bg),
    ]).astype(np.int64)
    row = np.concatenate([
        rng.integers(hl, hh + 1, nh),
        rng.integers(sl, sh + 1, ns),
        rng.integers(sl, sh + 1, n_bg),
    ]).astype(np.int64)
    arm = np.concatenate([
        np.full(nh, Arm.HERALD, np.int8), np.full(ns + n_bg, Arm.SIGNAL, np.int8)
    ])
    pid = np.concatenate([pair_id[h_idx], pair_id[s_idx], np.full(n_bg, -1, np.int64)])
    partner = np.concatenate([has_s[h_idx], has_h[s_idx], np.zeros(n_bg, dtype=bool)])

    keep = det >= 0
    if not keep.all():
        arrival, det, col, row, arm, pid, partner = (
            a[keep] for a in (arrival, det, col, row, arm, pid, partner)
        )
    n_det = len(det)

    if ideal:
        sizes = np.ones(n_det, dtype=np.int64)
        hit_col, hit_row = col, row
        hit_det = np.arange(n_det, dtype=np.int64)
        tot = _draw_tot(rng, intf, n_det)
        toa = det
    else:
        sizes = _cluster_sizes(rng, intf, n_det)
        total = int(sizes.sum())
        hit_col = np.empty(total, dtype=np.int64)
        hit_row = np.empty(total, dtype=np.int64)
        tot = np.empty(total, dtype=np.int64)
        toa = np.empty(total, dtype=np.float64)
        hit_det = np.empty(total, dtype=np.int64)
        m = _expand_clusters(
            int(rng.integers(0, 2**32 - 1)), det, col, row, sizes,
            math.log(intf.tot_median_ns), intf.tot_sigma_log, intf.tot_min_ns, intf.tot_max_ns,
            intf.timewalk_c0_ns, intf.timewalk_c1_ns, intf.pixel_jitter_ns_rms * 1e3,
            hit_col, hit_row, tot, toa, hit_det,
        )
        hit_col, hit_row, tot, toa, hit_det = (a[:m] for a in (hit_col, hit_row, tot, toa, hit_det))

    hits = np.empty(len(hit_det), dtype=HIT_DTYPE)
    hits["col"] = hit_col
    hits["row"] = hit_row
    hits["toa_ps"] = np.maximum(np.rint(toa), 0).astype(np.int64)
    hits["tot_ns"] = tot
    order = canonical_order(hits)
    truth = dict(arrival_ps=np.rint(arrival).astype(np.int64), arm=arm, col=col, row=row,
                 pair_id=pid, partner_detected=partner)
    return hits[order], hit_det[order], truth


def _merge_boundaries(hits, hit_det, bounds):
    """Restore global order where consecutive slabs overlap in time."""
    for b in bounds:
        if b <= 0 or b >= len(hits):
            continue
        t = hits["toa_ps"]
        lo = int(np.searchsorted(t[:b], t[b], side="left"))
        hi = b + int(np.searchsorted(t[b:], t[b - 1], side="right"))
        if lo < b < hi:
            seg = hits[lo:hi]
            order = canonical_order(seg)
            hits[lo:hi] = seg[order]
            hit_det[lo:hi] = hit_det[lo:hi][order]
    if not is_canonical(hits):
        order = canonical_order(hits)
        hits, hit_det = hits[order], hit_det[order]
    return hits, hit_det


def _assemble(slab_results):
    hits_parts, det_parts, bounds = [], [], []
    truth = {k: [] for k in ("arrival_ps", "arm", "col", "row", "pair_id", "partner_detected")}
    n_hits = n_det = 0
    for hits, hit_det, tr in slab_results:
        hits_parts.append(hits)
        det_parts.append(hit_det + n_det)
        for key in truth:
            truth[key].append(tr[key])
        n_hits += len(hits)
        bounds.append(n_hits)
        n_det += len(tr["arrival_ps"])
    if hits_parts:
        hits = np.concatenate(hits_parts)
        hit_det = np.concatenate(det_parts)
    else:
        hits, hit_det = np.zeros(0, HIT_DTYPE), np.zeros(0, np.int64)
    hits, hit_det = _merge_boundaries(hits, hit_det, bounds[:-1])
    tr = {k: (np.concatenate(v) if v else np.zeros(0)) for k, v in truth.items()}
    gt = GroundTruth(
        arrival_ps=tr["arrival_ps"].astype(np.int64),
        arm=tr["arm"].astype(np.int8),
        col=tr["col"].astype(np.int64),
        row=tr["row"].astype(np.int64),
        pair_id=tr["pair_id"].astype(np.int64),
        partner_detected=tr["partner_detected"].astype(bool),
        hit_detection=hit_det,
    )
    return hits, gt


def n_slabs(duration_s):
    return int(math.ceil(duration_s / SLAB_S - 1e-12)) if duration_s > 0 else 0


def _run(src, intf, cfg, ideal, slabs, n_jobs):
    def work(k):
        return _simulate_slab(k, src, intf, cfg, ideal)

    if n_jobs and n_jobs > 1 and len(slabs) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(work, slabs))
    else:
        results = [work(k) for k in slabs]
    return _assemble(results)


def simulate(src=None, intf=None, cfg=DEFAULT_CONFIG, n_jobs=None, ideal=False):
    """Generate a sorted hit stream plus ground truth for ``src.duration_s``."""
    src = src or SourceParams()
    intf = intf or IntensifierParams()
    hits, truth = _run(src, intf, cfg, ideal, range(n_slabs(src.duration_s)), n_jobs)
    ef = EventFile.__new__(EventFile)
    ef.hits, ef.config_digest, ef.version = hits, cfg.digest(), 1
    return SimulationResult(ef, truth, src.duration_s, src)


def simulate_ideal(src=None, cfg=DEFAULT_CONFIG, n_jobs=None):
    """As :func:`simulate` with one hit per photon and no time-walk."""
    return simulate(src, IntensifierParams(), cfg, n_jobs=n_jobs, ideal=True)


def iter_simulation(src=None, intf=None, cfg=DEFAULT_CONFIG, chunk_slabs=10, ideal=False, n_jobs=None):
    """Yield the run as consecutive :class:`SimulationResult` chunks.

    Concatenating the chunks' slabs reproduces :func:`simulate` exactly up to
    reordering across chunk edges; use this to process long runs in bounded
    memory.
    """
    src = src or SourceParams()
    intf = intf or IntensifierParams()
    total = n_slabs(src.duration_s)
    for first in range(0, total, chunk_slabs):
        slabs = range(first, min(total, first + chunk_slabs))
        hits, truth = _run(src, intf, cfg, ideal, slabs, n_jobs)
        ef = EventFile.__new__(EventFile)
        ef.hits, ef.config_digest, ef.version = hits, cfg.digest(), 1
        span = min(src.duration_s, slabs.stop * SLAB_S) - slabs.start * SLAB_S
        yield SimulationResult(ef, truth, span, src)


def merge_simulations(a, b):
    """Append ``b`` after ``a`` in time (``b`` shifted by ``a.duration_s``)."""
    shift = int(round(a.duration_s * PS_PER_S))
    hb = b.hits.copy()
    hb["toa_ps"] += np.uint64(shift)
    hits = np.concatenate([a.hits, hb])
    det = np.concatenate([a.truth.hit_detection, b.truth.hit_detection + len(a.truth)])
    order = canonical_order(hits)
    gt = GroundTruth(
        arrival_ps=np.concatenate([a.truth.arrival_ps, b.truth.arrival_ps + shift]),
        arm=np.concatenate([a.truth.arm, b.truth.arm]),
        col=np.concatenate([a.truth.col, b.truth.col]),
        row=np.concatenate([a.truth.row, b.truth.row]),
        pair_id=np.concatenate([a.truth.pair_id, np.where(b.truth.pair_id >= 0, b.truth.pair_id + (1 << 62), -1)]),
        partner_detected=np.concatenate([a.truth.partner_detected, b.truth.partner_detected]),
        hit_detection=det[order],
    )
    ef = EventFile.__new__(EventFile)
    ef.hits, ef.config_digest, ef.version = hits[order], a.events.config_digest, 1
    return SimulationResult(ef, gt, a.duration_s + b.duration_s, a.source)
