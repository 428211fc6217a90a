"""Raw pixel hits -> photon events: clustering, time-walk calibration, centroiding.

Hits of one intensifier flash are linked when they touch (Chebyshev distance
<= 1) and lie within ``cluster_window_ns`` of each other; clusters are the
connected components of that graph. Each cluster is timed by its *anchor*
hit, by default the highest-ToT member, whose time-walk is smallest.

The time-walk table accumulates ``hit ToA - anchor ToA`` over log-spaced
(pixel ToT, anchor ToT) cells. Those relative offsets are turned into an
absolute per-ToT walk by a weighted least-squares solve with the highest
anchor-ToT bin pinned to zero (walk vanishes for large pulses), followed by a
monotone (non-increasing) projection.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.isotonic import IsotonicRegression
from sklearn.utils.validation import check_is_fitted

from .errors import CalibrationError, ConfigError
from .events import EVENT_DTYPE, Arm, check_hits
from .geometry import DEFAULT_CONFIG, round_half_down

ANCHOR_MODES = ("max_tot", "nearest_centroid")


# -- kernels -------------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@numba.njit(cache=True, nogil=True)
def _link(col, row, toa, window, parent):
    """Union touching hits of a time-sorted slab; the earliest hit of each
    component is its root. ``parent`` has one spare slot at the end that
    absorbs the writes of non-adjacent pairs, keeping the inner loop free of
    data-dependent branches."""
    n = len(col)
    parent[n] = n
    for i in range(n):
        ci = np.int64(col[i])
        ri = np.int64(row[i])
        ti = np.int64(toa[i])
        root = i  # current root of i's component; always a root
        parent[i] = i
        j = i - 1
        while j >= 0 and ti - np.int64(toa[j]) <= window:
            dc = ci - np.int64(col[j])
            dr = ri - np.int64(row[j])
            touch = (dc * dc <= 1) & (dr * dr <= 1)
            rj = _find(parent, j)
            lo = min(rj, root)
            hi = max(rj, root)
            parent[hi if touch else n] = lo if touch else n
            root = lo if touch else root
            j -= 1
        parent[i] = root


@numba.njit(cache=True, nogil=True)
def _label_kernel(col, row, toa, window, labels):
    """Connected components over a time-sorted hit slab; labels in order of
    each component's first hit. Returns the component count."""
    n = len(col)
    parent = np.empty(n + 1, dtype=np.int64)
    _link(col, row, toa, window, parent)
    count = 0
    for i in range(n):
        r = _find(parent, i)
        if r == i:
            labels[i] = count
            count += 1
        else:
            labels[i] = labels[r]
    return count


@numba.njit(cache=True, nogil=True)
def _cluster_kernel(col, row, toa, tot, window, labels):
    """Labels plus per-cluster size, ToT-weighted centroid and max-ToT anchor
    (ties keep the earlier hit), in one pass after linking."""
    n = len(col)
    parent = np.empty(n + 1, dtype=np.int64)
    _link(col, row, toa, window, parent)
    size = np.zeros(n, dtype=np.int64)
    wsum = np.zeros(n)
    csum = np.zeros(n)
    rsum = np.zeros(n)
    anchor = np.empty(n, dtype=np.int64)
    count = 0
    for i in range(n):
        r = _find(parent, i)
        if r == i:
            k = count
            count += 1
            anchor[k] = i
        else:
            k = labels[r]
            if tot[i] > tot[anchor[k]]:
                anchor[k] = i
        labels[i] = k
        w = np.float64(tot[i])
        size[k] += 1
        wsum[k] += w
        csum[k] += w * col[i]
        rsum[k] += w * row[i]
    raw = np.empty(count, dtype=np.int64)
    for k in range(count):
        raw[k] = np.int64(toa[anchor[k]])
    return count, size[:count], csum[:count] / wsum[:count], rsum[:count] / wsum[:count], anchor[:count], raw


@numba.njit(cache=True, nogil=True)
def _nearest_anchor(col, row, tot, labels, ccol, crow, anchor):
    """Re-pick anchors as the hit closest to the centroid (ToT breaks ties)."""
    best = np.full(len(ccol), np.inf)
    for i in range(len(labels)):
        k = labels[i]
        d = (col[i] - ccol[k]) ** 2 + (row[i] - crow[k]) ** 2
        if d < best[k] or (d == best[k] and tot[i] > tot[anchor[k]]):
            best[k] = d
            anchor[k] = i


def _slab_bounds(toa, window, n_slabs):
    """Split points at inter-hit gaps wider than ``window``."""
    n = len(toa)
    if n_slabs <= 1 or n < 2:
        return [0, n]
    gaps = np.flatnonzero(np.diff(toa.astype(np.int64)) > window) + 1
    if not len(gaps):
        return [0, n]
    targets = np.linspace(0, n, n_slabs + 1)[1:-1]
    cuts = np.unique(gaps[np.clip(np.searchsorted(gaps, targets), 0, len(gaps) - 1)])
    return [0, *cuts.tolist(), n]


def label_hits(hits, cluster_window_ns=100.0, n_jobs=None):
    """Cluster labels per hit and the number of clusters.

    Slabs are cut only at gaps wider than the window, so the partition does
    not depend on ``n_jobs``.
    """
    window = int(round(cluster_window_ns * 1000))
    toa = hits["toa_ps"]
    labels = np.empty(len(hits), dtype=np.int64)
    bounds = _slab_bounds(toa, window, n_jobs or 1)
    spans = list(zip(bounds[:-1], bounds[1:]))

    def work(span):
        a, b = span
        return _label_kernel(hits["col"][a:b], hits["row"][a:b], toa[a:b], window, labels[a:b])

    if len(spans) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            counts = list(pool.map(work, spans))
    else:
        counts = [work(s) for s in spans]
    offset = 0
    for (a, b), c in zip(spans, counts):
        if offset:
            labels[a:b] += offset
        offset += c
    return labels, offset


# -- clusters ------------------------------------------------------------------

@dataclass
class Cluster:
    """One intensifier flash."""

    hits: np.ndarray
    centroid_col: float
    centroid_row: float
    anchor: np.void
    raw_toa_ps: int

    @property
    def size(self):
        return len(self.hits)


@dataclass
class Clusters:
    """Columnar cluster table over a hit array, ordered by ``raw_toa_ps``.

    ``labels[i]`` is the cluster of ``hits[i]``; ``anchor[k]`` indexes
    ``hits``.
    """

    hits: np.ndarray
    labels: np.ndarray
    size: np.ndarray
    centroid_col: np.ndarray
    centroid_row: np.ndarray
    anchor: np.ndarray
    raw_toa_ps: np.ndarray

    def __len__(self):
        return len(self.size)

    @property
    def anchor_tot(self):
        return self.hits["tot_ns"][self.anchor]

    def members(self, k):
        return np.flatnonzero(self.labels == k)

    def __getitem__(self, k):
        return Cluster(
            hits=self.hits[self.members(k)],
            centroid_col=float(self.centroid_col[k]),
            centroid_row=float(self.centroid_row[k]),
            anchor=self.hits[self.anchor[k]],
            raw_toa_ps=int(self.raw_toa_ps[k]),
        )

    def partition(self):
        """Hit-index sets, one per cluster (for comparisons in tests)."""
        order = np.argsort(self.labels, kind="stable")
        return np.split(order, np.cumsum(self.size)[:-1]) if len(self) else []


def cluster(hits, cluster_window_ns=100.0, anchor="max_tot", n_jobs=None):
    """Cluster a time-sorted hit stream (see module docstring)."""
    if anchor not in ANCHOR_MODES:
        raise ConfigError(f"anchor must be one of {ANCHOR_MODES}")
    hits = check_hits(hits)
    window = int(round(cluster_window_ns * 1000))
    col, row, toa, tot = hits["col"], hits["row"], hits["toa_ps"], hits["tot_ns"]
    labels = np.empty(len(hits), dtype=np.int64)
    bounds = _slab_bounds(toa, window, n_jobs or 1)
    spans = list(zip(bounds[:-1], bounds[1:]))

    def work(span):
        a, b = span
        return _cluster_kernel(col[a:b], row[a:b], toa[a:b], tot[a:b], window, labels[a:b])

    if len(spans) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(work, spans))
    else:
        parts = [work(s) for s in spans]
    offset = 0
    for (a, b), part in zip(spans, parts):
        if a:
            labels[a:b] += offset
            part[4][:] += a
        offset += part[0]
    size, ccol, crow, anc, raw = (np.concatenate([p[i] for p in parts]) for i in range(1, 6))
    n = offset
    if anchor == "nearest_centroid":
        _nearest_anchor(col, row, tot, labels, ccol, crow, anc)
        raw = toa[anc].astype(np.int64)
    order = np.argsort(raw, kind="stable")
    if np.any(order[1:] < order[:-1]):
        rank = np.empty(n, dtype=np.int64)
        rank[order] = np.arange(n)
        labels = rank[labels]
        size, ccol, crow, anc, raw = size[order], ccol[order], crow[order], anc[order], raw[order]
    return Clusters(hits, labels, size, ccol, crow, anc, raw)


class PixelClusterer(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`cluster`.

    After ``fit``: ``clusters_`` (:class:`Clusters`), ``labels_``,
    ``n_clusters_``.
    """

    def __init__(self, cluster_window_ns=100.0, anchor="max_tot", n_jobs=None):
        self.cluster_window_ns = cluster_window_ns
        self.anchor = anchor
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        if self.cluster_window_ns < 0:
            raise ConfigError("cluster_window_ns must be >= 0")
        self.clusters_ = cluster(X, self.cluster_window_ns, self.anchor, self.n_jobs)
        self.labels_ = self.clusters_.labels
        self.n_clusters_ = len(self.clusters_)
        return self


# -- time-walk -----------------------------------------------------------------

@dataclass
class TimewalkTable:
    """Time-walk calibration over log-spaced ToT bins (same edges on both axes).

    ``counts/sums/sumsq[h, a]`` accumulate ``hit ToA - anchor ToA`` (ns) for
    pixel-ToT bin ``h`` and anchor-ToT bin ``a``. ``offsets_ns`` is the derived
    absolute walk per ToT bin (zero where ``supported`` is false).
    """

    edges: np.ndarray
    counts: np.ndarray
    sums: np.ndarray
    sumsq: np.ndarray
    min_samples: int = 20
    offsets_ns: np.ndarray | None = None
    supported: np.ndarray | None = None

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        n = len(self.edges) - 1
        for name in ("counts", "sums", "sumsq"):
            arr = np.asarray(getattr(self, name), dtype=np.int64 if name == "counts" else float)
            if arr.shape != (n, n):
                raise ValueError(f"{name} must have shape {(n, n)}")
            setattr(self, name, arr)
        if self.offsets_ns is None or self.supported is None:
            self.offsets_ns, self.supported = _solve_offsets(self)
        else:
            self.offsets_ns = np.asarray(self.offsets_ns, dtype=float)
            self.supported = np.asarray(self.supported, dtype=bool)

    @property
    def n_bins(self):
        return len(self.edges) - 1

    @property
    def centers(self):
        return np.sqrt(self.edges[:-1] * self.edges[1:])

    @property
    def valid(self):
        return self.counts >= self.min_samples

    @property
    def means(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.sums / np.maximum(self.counts, 1), np.nan)

    @property
    def stds(self):
        c = np.maximum(self.counts, 1)
        with np.errstate(invalid="ignore"):
            var = np.maximum(self.sumsq / c - (self.sums / c) ** 2, 0.0) * c / np.maximum(c - 1, 1)
        return np.where(self.counts > 1, np.sqrt(var), np.nan)

    def bin_of(self, tot):
        idx = np.searchsorted(self.edges, np.asarray(tot, dtype=float), side="right") - 1
        return np.clip(idx, 0, self.n_bins - 1)

    def lookup(self, pixel_tot, centroid_tot):
        """Mean ToA offset of a pixel relative to its anchor (0 below ``min_samples``)."""
        h, a = self.bin_of(pixel_tot), self.bin_of(centroid_tot)
        m = np.where(self.valid, np.nan_to_num(self.means), 0.0)
        return m[h, a]

    def walk_ns(self, tot):
        """Absolute time-walk estimate for a hit of the given ToT."""
        return np.where(self.supported, self.offsets_ns, 0.0)[self.bin_of(tot)]

    def merge(self, other):
        if not np.array_equal(self.edges, other.edges):
            raise ValueError("cannot merge tables with different bin edges")
        return TimewalkTable(self.edges, self.counts + other.counts, self.sums + other.sums,
                             self.sumsq + other.sumsq, self.min_samples)

    @classmethod
    def identity(cls, n_bins=16, tot_range=(25, 2000), min_samples=20):
        edges = np.geomspace(tot_range[0], tot_range[1], n_bins + 1)
        z = np.zeros((n_bins, n_bins))
        return cls(edges, z.astype(np.int64), z, z, min_samples)

    def to_dict(self):
        return {
            "edges": self.edges.tolist(),
            "counts": self.counts.tolist(),
            "sums": self.sums.tolist(),
            "sumsq": self.sumsq.tolist(),
            "means": [[None if np.isnan(v) else float(v) for v in row] for row in self.means],
            "min_samples": int(self.min_samples),
            "offsets_ns": self.offsets_ns.tolist(),
            "supported": self.supported.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["edges"]), np.array(d["counts"]), np.array(d["sums"]), np.array(d["sumsq"]),
                   int(d["min_samples"]), np.array(d["offsets_ns"]), np.array(d["supported"]))

    def to_json(self, path=None):
        text = json.dumps(self.to_dict())
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source):
        if isinstance(source, Path) or not str(source).lstrip().startswith("{"):
            source = Path(source).read_text()
        return cls.from_dict(json.loads(source))


def _solve_offsets(table):
    n = table.n_bins
    valid = table.valid
    offsets = np.zeros(n)
    supported = np.zeros(n, dtype=bool)
    if not valid.any():
        return offsets, supported
    hs, as_ = np.nonzero(valid)
    ref = int(as_.max())
    # bins reachable from the reference through valid cells
    reach = {ref}
    changed = True
    while changed:
        changed = False
        for h, a in zip(hs, as_):
            if (h in reach) != (a in reach):
                reach.update((int(h), int(a)))
                changed = True
    bins = sorted(reach)
    col = {b: i for i, b in enumerate(b for b in bins if b != ref)}
    means = table.sums / np.maximum(table.counts, 1)
    rows, rhs, wts = [], [], []
    for h, a in zip(hs, as_):
        if h not in reach or h == a:
            continue
        r = np.zeros(len(col))
        if h != ref:
            r[col[h]] += 1.0
        if a != ref:
            r[col[a]] -= 1.0
        rows.append(r)
        rhs.append(means[h, a])
        wts.append(np.sqrt(table.counts[h, a]))
    if col and rows:
        A = np.asarray(rows) * np.asarray(wts)[:, None]
        sol, *_ = np.linalg.lstsq(A, np.asarray(rhs) * np.asarray(wts), rcond=None)
        for b, i in col.items():
            offsets[b] = sol[i]
    supported[bins] = True
    # project onto non-increasing in ToT, then re-pin the reference to zero
    idx = np.asarray(bins)
    weight = table.counts.sum(axis=0)[idx] + table.counts.sum(axis=1)[idx]
    iso = IsotonicRegression(increasing=False).fit(idx, offsets[idx], sample_weight=np.maximum(weight, 1))
    offsets[idx] = iso.predict(idx) - iso.predict([ref])[0]
    return offsets, supported


def calibrate_timewalk(clusters, n_bins=16, tot_range=(25, 2000), min_samples=20):
    """Accumulate ``hit ToA - anchor ToA`` for every non-anchor hit."""
    multi = clusters.size > 1
    if not multi.any():
        raise CalibrationError("time-walk calibration needs multi-hit clusters")
    edges = np.geomspace(tot_range[0], tot_range[1], n_bins + 1)
    hits = clusters.hits
    anchor_of_hit = clusters.anchor[clusters.labels]
    sel = np.flatnonzero(anchor_of_hit != np.arange(len(hits)))
    a_idx = anchor_of_hit[sel]
    dt = (hits["toa_ps"][sel].astype(np.int64) - hits["toa_ps"][a_idx].astype(np.int64)) / 1000.0
    proto = TimewalkTable.identity(n_bins, tot_range, min_samples)
    h_bin = proto.bin_of(hits["tot_ns"][sel])
    a_bin = proto.bin_of(hits["tot_ns"][a_idx])
    cell = h_bin * n_bins + a_bin
    size = n_bins * n_bins
    counts = np.bincount(cell, minlength=size).reshape(n_bins, n_bins)
    sums = np.bincount(cell, weights=dt, minlength=size).reshape(n_bins, n_bins)
    sumsq = np.bincount(cell, weights=dt * dt, minlength=size).reshape(n_bins, n_bins)
    return TimewalkTable(edges, counts, sums, sumsq, min_samples)


def assign_arm(row, cfg=DEFAULT_CONFIG):
    row = np.asarray(row)
    arm = np.full(row.shape, Arm.UNASSIGNED, dtype=np.int8)
    (hl, hh), (sl, sh) = cfg.herald_rows, cfg.signal_rows
    arm[(row >= hl) & (row <= hh)] = Arm.HERALD
    arm[(row >= sl) & (row <= sh)] = Arm.SIGNAL
    return arm


@numba.njit(cache=True, nogil=True)
def _event_kernel(ccol, crow, toa, size, herald_rows, signal_rows, out):
    for k in range(len(toa)):
        # nearest pixel, ties toward the smaller index
        c = np.int64(np.ceil(ccol[k] - 0.5))
        r = np.int64(np.ceil(crow[k] - 0.5))
        arm = 0
        if herald_rows[0] <= r <= herald_rows[1]:
            arm = 1
        elif signal_rows[0] <= r <= signal_rows[1]:
            arm = 2
        out[k].col = c
        out[k].row = r
        out[k].toa_ps = toa[k]
        out[k].arm = arm
        out[k].cluster_size = size[k]


def correct_and_centroid(clusters, table=None, cfg=DEFAULT_CONFIG):
    """One :data:`EVENT_DTYPE` record per cluster, in cluster order.

    Time is the anchor ToA minus the table's absolute walk at the anchor ToT;
    position is the ToT-weighted centroid rounded to the nearest pixel (ties
    to the smaller index). Corrected times may be locally out of order.
    """
    events = np.empty(len(clusters), dtype=EVENT_DTYPE)
    toa = clusters.raw_toa_ps.astype(np.int64)
    if table is not None:
        toa = toa - np.rint(table.walk_ns(clusters.anchor_tot) * 1000).astype(np.int64)
    _event_kernel(clusters.centroid_col, clusters.centroid_row, toa, clusters.size,
                  np.array(cfg.herald_rows, dtype=np.int64), np.array(cfg.signal_rows, dtype=np.int64), events)
    return events


class TimewalkCorrector(TransformerMixin, BaseEstimator):
    """Fit a :class:`TimewalkTable` on clusters; transform clusters to events."""

    def __init__(self, n_bins=16, tot_range=(25, 2000), min_samples=20, cfg=None):
        self.n_bins = n_bins
        self.tot_range = tot_range
        self.min_samples = min_samples
        self.cfg = cfg

    def fit(self, X, y=None):
        if not isinstance(X, Clusters):
            raise TypeError("TimewalkCorrector.fit expects a Clusters table")
        self.table_ = calibrate_timewalk(X, self.n_bins, tuple(self.tot_range), self.min_samples)
        return self

    def transform(self, X):
        check_is_fitted(self, "table_")
        return correct_and_centroid(X, self.table_, self.cfg or DEFAULT_CONFIG)


def sort_events(events):
    """Stable sort by time; a no-op copy-free return when already ordered."""
    t = events["toa_ps"]
    if len(t) < 2 or not np.any(t[1:] < t[:-1]):
        return events
    return events[np.argsort(t, kind="stable")]


def iter_hit_batches(chunks, cluster_window_ns=100.0):
    """Re-cut consecutive sorted hit chunks at gaps wider than the cluster
    window, so no cluster straddles two batches."""
    window = int(round(cluster_window_ns * 1000))
    carry = None
    for chunk in chunks:
        buf = chunk if carry is None else np.concatenate([carry, chunk])
        if len(buf) < 2:
            carry = buf
            continue
        gaps = np.flatnonzero(np.diff(buf["toa_ps"].astype(np.int64)) > window)
        if not len(gaps):
            carry = buf
            continue
        cut = int(gaps[-1]) + 1
        yield buf[:cut]
        carry = buf[cut:]
    if carry is not None and len(carry):
        yield carry


def hits_to_events(hits, table=None, cfg=DEFAULT_CONFIG, cluster_window_ns=100.0, anchor="max_tot", n_jobs=None):
    """Cluster + correct in one call; returns ``(events, clusters)``."""
    cl = cluster(hits, cluster_window_ns, anchor, n_jobs)
    return correct_and_centroid(cl, table, cfg), cl
