"""Pixel-hit and photon-event records, plus the binary/CSV event file formats.

Binary layout (all little-endian)::

    header   magic b"TPXE" | u16 version | 32-byte config digest | u64 record count
    records  u16 col | u16 row | u64 toa_ps | u16 tot_ns     (14 bytes, packed)

Records are sorted by ``toa_ps`` with ties broken by ``(col, row)``.
"""
from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .errors import EventFileError
from .geometry import MAX_PIXEL

MAGIC = b"TPXE"
VERSION = 1
HEADER = struct.Struct("<4sH32sQ")
HEADER_SIZE = HEADER.size

HIT_DTYPE = np.dtype([("col", "<u2"), ("row", "<u2"), ("toa_ps", "<u8"), ("tot_ns", "<u2")])
RECORD_SIZE = HIT_DTYPE.itemsize

EVENT_DTYPE = np.dtype(
    [("col", "<u2"), ("row", "<u2"), ("toa_ps", "<i8"), ("arm", "i1"), ("cluster_size", "<u2")]
)

CSV_HEADER = "col,row,toa_ps,tot_ns"


class Arm(enum.IntEnum):
    UNASSIGNED = 0
    HERALD = 1
    SIGNAL = 2


def empty_hits(n=0):
    return np.zeros(n, dtype=HIT_DTYPE)


def make_hits(col, row, toa_ps, tot_ns, sort=True):
    """Build a hit array from column vectors, optionally in canonical order."""
    hits = np.empty(len(col), dtype=HIT_DTYPE)
    hits["col"] = col
    hits["row"] = row
    hits["toa_ps"] = toa_ps
    hits["tot_ns"] = tot_ns
    if sort:
        hits = hits[canonical_order(hits)]
    return hits


def canonical_order(hits):
    """Permutation sorting hits by ``(toa_ps, col, row)``."""
    if not len(hits):
        return np.zeros(0, dtype=np.intp)
    t = hits["toa_ps"]
    t0 = t.min()
    if int(t.max() - t0) < (1 << 47):
        # pack (toa, col, row) into one 63-bit key; a single argsort is much faster
        key = ((t - t0).astype(np.int64) << 16) | (hits["col"].astype(np.int64) << 8) | hits["row"]
        return np.argsort(key, kind="stable")
    return np.lexsort((hits["row"], hits["col"], t))


BAD_NONE, BAD_RANGE, BAD_TOT, BAD_ORDER = 0, 1, 2, 3


@numba.njit(cache=True, nogil=True)
def _scan_kernel(col, row, toa, tot, max_pixel):
    """One pass over a hit array: ``(code, index)`` of the first bad record."""
    for i in range(len(toa)):
        if col[i] > max_pixel or row[i] > max_pixel:
            return BAD_RANGE, i
        if tot[i] == 0:
            return BAD_TOT, i
        if i:
            if toa[i] < toa[i - 1]:
                return BAD_ORDER, i
            if toa[i] == toa[i - 1]:
                if col[i] < col[i - 1] or (col[i] == col[i - 1] and row[i] < row[i - 1]):
                    return BAD_ORDER, i
    return BAD_NONE, -1


def scan_hits(hits):
    if not len(hits):
        return BAD_NONE, -1
    code, i = _scan_kernel(hits["col"], hits["row"], hits["toa_ps"], hits["tot_ns"], MAX_PIXEL)
    return int(code), int(i)


def _first_unsorted(hits):
    """Index of the first record out of ``(toa_ps, col, row)`` order, or None."""
    if len(hits) < 2:
        return None
    ones = np.ones(len(hits), dtype=np.uint16)
    code, i = _scan_kernel(hits["col"], hits["row"], hits["toa_ps"], ones, 65535)
    return None if code == BAD_NONE else int(i)


def is_canonical(hits):
    return _first_unsorted(hits) is None


def check_hits(hits, require_sorted=True):
    """Validate a hit array and return it as ``HIT_DTYPE``.

    Accepts a structured array with the hit fields or an ``(n, 4)`` numeric
    array ordered ``col, row, toa_ps, tot_ns``.
    """
    hits = np.asarray(hits)
    if hits.dtype.names is None:
        if hits.ndim != 2 or hits.shape[1] != 4:
            raise ValueError("expected a structured hit array or an (n, 4) array")
        if np.any(hits < 0):
            raise ValueError("hit fields must be non-negative")
        wide = (hits[:, 0] > MAX_PIXEL) | (hits[:, 1] > MAX_PIXEL) | (hits[:, 3] > 0xFFFF)
        if wide.any():
            raise ValueError(f"hit field out of range (hit {int(np.flatnonzero(wide)[0])})")
        hits = make_hits(hits[:, 0], hits[:, 1], hits[:, 2], hits[:, 3], sort=False)
    elif hits.dtype != HIT_DTYPE:
        missing = set(HIT_DTYPE.names) - set(hits.dtype.names)
        if missing:
            raise ValueError(f"hit array missing fields {sorted(missing)}")
        hits = make_hits(hits["col"], hits["row"], hits["toa_ps"], hits["tot_ns"], sort=False)
    code, i = scan_hits(hits)
    if code == BAD_ORDER and not require_sorted:
        code, i = _scan_unordered(hits)
    if code == BAD_RANGE:
        raise ValueError(f"pixel coordinate outside [0, 255] (hit {i})")
    if code == BAD_TOT:
        raise ValueError(f"tot_ns must be > 0 (hit {i})")
    if code == BAD_ORDER:
        raise ValueError(f"hits must be sorted by (toa_ps, col, row) (hit {i})")
    return hits


def _scan_unordered(hits):
    bad = np.flatnonzero((hits["col"] > MAX_PIXEL) | (hits["row"] > MAX_PIXEL))
    if len(bad):
        return BAD_RANGE, int(bad[0])
    bad = np.flatnonzero(hits["tot_ns"] == 0)
    if len(bad):
        return BAD_TOT, int(bad[0])
    return BAD_NONE, -1


def check_events(events):
    events = np.asarray(events)
    if events.dtype != EVENT_DTYPE:
        raise ValueError("expected an EVENT_DTYPE array")
    return events


@dataclass
class EventFile:
    """An ordered hit stream plus the header metadata of its file."""

    hits: np.ndarray = field(default_factory=empty_hits)
    config_digest: bytes = bytes(32)
    version: int = VERSION

    def __post_init__(self):
        if len(self.config_digest) != 32:
            raise ValueError("config_digest must be 32 bytes")
        self.hits = check_hits(self.hits)

    def __len__(self):
        return len(self.hits)

    def __eq__(self, other):
        if not isinstance(other, EventFile):
            return NotImplemented
        return (
            self.version == other.version
            and self.config_digest == other.config_digest
            and np.array_equal(self.hits, other.hits)
        )

    def to_bytes(self):
        head = HEADER.pack(MAGIC, self.version, self.config_digest, len(self.hits))
        return head + self.hits.astype(HIT_DTYPE, copy=False).tobytes()


def write_events(ef, path):
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, ef.version, ef.config_digest, len(ef.hits)))
        ef.hits.tofile(fh)
    return path


class EventWriter:
    """Append sorted hit chunks to an event file without holding them all.

    The record count in the header is patched on :meth:`close`.
    """

    def __init__(self, path, config_digest=bytes(32)):
        if len(config_digest) != 32:
            raise ValueError("config_digest must be 32 bytes")
        self.path = Path(path)
        self.config_digest = config_digest
        self.count = 0
        self._last = None
        self._fh = open(self.path, "wb")
        self._fh.write(HEADER.pack(MAGIC, VERSION, config_digest, 0))

    def write(self, hits):
        hits = check_hits(hits)
        if not len(hits):
            return
        first = (int(hits["toa_ps"][0]), int(hits["col"][0]), int(hits["row"][0]))
        if self._last is not None and first < self._last:
            raise ValueError("chunk starts before the end of the previous chunk")
        hits.tofile(self._fh)
        last = hits[-1]
        self._last = (int(last["toa_ps"]), int(last["col"]), int(last["row"]))
        self.count += len(hits)

    def close(self):
        if self._fh.closed:
            return
        self._fh.seek(0)
        self._fh.write(HEADER.pack(MAGIC, VERSION, self.config_digest, self.count))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _parse_header(buf):
    if len(buf) < HEADER_SIZE:
        raise EventFileError("truncated header", offset=len(buf))
    magic, version, digest, count = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise EventFileError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise EventFileError(f"unsupported version {version}", offset=4)
    return version, digest, count


def _validate_records(hits, base_offset, prev_key=None):
    """Raise with the byte offset of the first invalid record in a chunk."""
    if not len(hits):
        return
    code, i = scan_hits(hits)
    if prev_key is not None and (code == BAD_NONE or i > 0):
        first = (int(hits["toa_ps"][0]), int(hits["col"][0]), int(hits["row"][0]))
        if first < prev_key:
            raise EventFileError("records not sorted by toa_ps", offset=base_offset)
    if code in (BAD_RANGE, BAD_TOT):
        raise EventFileError(
            f"invalid record {tuple(int(v) for v in hits[i])}", offset=base_offset + i * RECORD_SIZE
        )
    if code == BAD_ORDER:
        raise EventFileError("records not sorted by toa_ps", offset=base_offset + i * RECORD_SIZE)


def parse_events(buf):
    """Parse a complete event file image (``bytes``)."""
    version, digest, count = _parse_header(buf)
    body = len(buf) - HEADER_SIZE
    if body % RECORD_SIZE:
        whole = body // RECORD_SIZE
        raise EventFileError("truncated record", offset=HEADER_SIZE + whole * RECORD_SIZE)
    if body // RECORD_SIZE != count:
        raise EventFileError(
            f"header declares {count} records, file holds {body // RECORD_SIZE}",
            offset=HEADER_SIZE + min(count, body // RECORD_SIZE) * RECORD_SIZE,
        )
    hits = np.frombuffer(buf, dtype=HIT_DTYPE, count=count, offset=HEADER_SIZE).copy()
    _validate_records(hits, HEADER_SIZE)
    ef = EventFile.__new__(EventFile)
    ef.hits, ef.config_digest, ef.version = hits, digest, version
    return ef


def read_events(path):
    return parse_events(Path(path).read_bytes())


def iter_event_chunks(path, chunk_records=1 << 20):
    """Yield validated hit chunks from a file without loading it whole.

    Sort order is also checked across chunk boundaries.
    """
    with open(path, "rb") as fh:
        head = fh.read(HEADER_SIZE)
        _, _, count = _parse_header(head)
        offset, prev, remaining = HEADER_SIZE, None, count
        while remaining:
            n = min(chunk_records, remaining)
            raw = fh.read(n * RECORD_SIZE)
            if len(raw) < n * RECORD_SIZE:
                raise EventFileError("truncated record", offset=offset + (len(raw) // RECORD_SIZE) * RECORD_SIZE)
            hits = np.frombuffer(raw, dtype=HIT_DTYPE).copy()
            _validate_records(hits, offset, prev)
            last = hits[-1]
            prev = (int(last["toa_ps"]), int(last["col"]), int(last["row"]))
            yield hits
            offset += len(raw)
            remaining -= n
        if fh.read(1):
            raise EventFileError("trailing bytes after last record", offset=offset)


def write_events_csv(hits, path):
    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        if len(hits):
            np.savetxt(
                fh,
                np.column_stack([hits["col"], hits["row"], hits["toa_ps"], hits["tot_ns"]]).astype(np.uint64),
                fmt="%d",
                delimiter=",",
            )
    return Path(path)


def read_events_csv(path):
    text = Path(path).read_text()
    first, _, rest = text.partition("\n")
    if first.strip() != CSV_HEADER:
        raise EventFileError(f"CSV header must be {CSV_HEADER!r}", offset=0)
    if not rest.strip():
        return empty_hits()
    try:
        data = np.loadtxt(io.StringIO(rest), delimiter=",", dtype=np.uint64, ndmin=2)
    except ValueError as exc:
        raise EventFileError(f"unreadable CSV row: {exc}", offset=len(first) + 1) from exc
    if data.shape[1] != 4:
        raise EventFileError("CSV rows must have 4 fields", offset=len(first) + 1)
    try:
        return check_hits(data.astype(np.int64))
    except ValueError as exc:
        raise EventFileError(str(exc), offset=len(first) + 1) from exc
