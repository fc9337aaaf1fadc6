"""Event and annotation data types, canonical file formats, and windowing.

Two on-disk event encodings are supported:

* CSV with header ``t_us,x,y,p`` (one event per LF-terminated line).
* A little-endian binary layout: a 16-byte header (magic ``EVT0``, u16 width,
  u16 height, 8 zero bytes) followed by packed 13-byte records
  ``u64 t_us, u16 x, u16 y, u8 p``.

Streams are backed by a numpy structured array so the binary path never
allocates per event and windowing can return views.
"""

from __future__ import annotations

import io
import math
import struct
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

OFF = 0
ON = 1

CSV_HEADER = "t_us,x,y,p"
ANNOTATION_HEADER = "t_us,track_id,x_min,y_min,w,h"

BINARY_MAGIC = b"EVT0"
BINARY_HEADER = struct.Struct("<4sHH8s")
EVENT_DTYPE = np.dtype([("t", "<i8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])
assert EVENT_DTYPE.itemsize == 13


class FormatError(ValueError):
    """Raised when an event or annotation source violates its format."""


@dataclass(frozen=True)
class SensorGeometry:
    width: int = 1280
    height: int = 720

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"sensor geometry must be positive, got {self.width}x{self.height}")

    @property
    def n_pixels(self) -> int:
        return self.width * self.height


@dataclass(frozen=True, slots=True)
class Event:
    t: int
    x: int
    y: int
    polarity: int


@dataclass(frozen=True)
class BoundingBoxObservation:
    """Axis-aligned box; pixel-inclusive on every edge."""

    t: int
    track_id: int
    x_min: float
    y_min: float
    w: float
    h: float
    clamped: bool = False

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box width/height must be positive, got w={self.w} h={self.h}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.w / 2.0, self.y_min + self.h / 2.0)

    @property
    def x_max(self) -> float:
        return self.x_min + self.w

    @property
    def y_max(self) -> float:
        return self.y_min + self.h

    def pixel_bounds(self) -> tuple[int, int, int, int]:
        """Integer pixel range ``(x0, y0, x1, y1)`` covered by the box, inclusive."""
        return (
            math.ceil(self.x_min),
            math.ceil(self.y_min),
            math.floor(self.x_max),
            math.floor(self.y_max),
        )

    def contains(self, x: int, y: int) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max


def clamp_box(box: BoundingBoxObservation, geometry: SensorGeometry) -> BoundingBoxObservation:
    """Clip ``box`` to the sensor; the result has ``clamped=True`` if anything changed."""
    x0 = min(max(box.x_min, 0.0), geometry.width - 1)
    y0 = min(max(box.y_min, 0.0), geometry.height - 1)
    x1 = min(max(box.x_max, 0.0), geometry.width - 1)
    y1 = min(max(box.y_max, 0.0), geometry.height - 1)
    if (x0, y0, x1, y1) == (box.x_min, box.y_min, box.x_max, box.y_max):
        return box
    # degenerate after clipping: keep a one-pixel box at the border
    w = x1 - x0 if x1 > x0 else 1.0
    h = y1 - y0 if y1 > y0 else 1.0
    x0 = min(x0, geometry.width - 1 - w)
    y0 = min(y0, geometry.height - 1 - h)
    return replace(box, x_min=x0, y_min=y0, w=w, h=h, clamped=True)


class EventStream(Sequence[Event]):
    """Immutable, time-ordered sequence of events over a sensor geometry.

    Columns are exposed as read-only numpy arrays (``t``, ``x``, ``y``, ``p``).
    Indexing with an int yields an :class:`Event`; slicing yields another
    stream sharing memory with this one.
    """

    __slots__ = ("geometry", "_rec", "_t_contig")

    def __init__(self, geometry: SensorGeometry, records: np.ndarray, *, validate: bool = True):
        if records.dtype != EVENT_DTYPE:
            records = records.astype(EVENT_DTYPE)
        if validate:
            _validate_records(records, geometry)
        if records.flags.writeable and records.base is None:
            records.flags.writeable = False
        self.geometry = geometry
        self._rec = records
        self._t_contig: np.ndarray | None = None

    @classmethod
    def from_arrays(cls, geometry: SensorGeometry, t, x, y, p, *, validate: bool = True) -> "EventStream":
        t = np.asarray(t, dtype=np.int64)
        rec = np.empty(t.shape[0], dtype=EVENT_DTYPE)
        rec["t"] = t
        rec["x"] = np.asarray(x)
        rec["y"] = np.asarray(y)
        rec["p"] = np.asarray(p)
        return cls(geometry, rec, validate=validate)

    @classmethod
    def empty(cls, geometry: SensorGeometry | None = None) -> "EventStream":
        return cls(geometry or SensorGeometry(), np.empty(0, dtype=EVENT_DTYPE))

    @classmethod
    def from_events(cls, events: Iterable[Event], geometry: SensorGeometry | None = None) -> "EventStream":
        rows = [(e.t, e.x, e.y, e.polarity) for e in events]
        rec = np.array(rows, dtype=EVENT_DTYPE) if rows else np.empty(0, dtype=EVENT_DTYPE)
        return cls(geometry or SensorGeometry(), rec)

    @property
    def records(self) -> np.ndarray:
        return self._rec

    @property
    def t(self) -> np.ndarray:
        return self._rec["t"]

    @property
    def x(self) -> np.ndarray:
        return self._rec["x"]

    @property
    def y(self) -> np.ndarray:
        return self._rec["y"]

    @property
    def p(self) -> np.ndarray:
        return self._rec["p"]

    def __len__(self) -> int:
        return self._rec.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return EventStream(self.geometry, self._rec[idx], validate=False)
        r = self._rec[idx]
        return Event(int(r["t"]), int(r["x"]), int(r["y"]), int(r["p"]))

    def __iter__(self) -> Iterator[Event]:
        for t, x, y, p in self._rec.tolist():
            yield Event(t, x, y, p)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self._rec, other._rec)

    def __repr__(self) -> str:
        span = f"{self.t[0]}..{self.t[-1]} us" if len(self) else "empty"
        return f"EventStream({len(self)} events, {self.geometry.width}x{self.geometry.height}, {span})"

    def time_slice(self, t_start: int, t_end: int) -> "EventStream":
        """Events with ``t_start <= t < t_end`` as a zero-copy view."""
        if self._t_contig is None:
            # searchsorted on the strided record field is an order of magnitude slower
            self._t_contig = np.ascontiguousarray(self.t)
        lo = int(np.searchsorted(self._t_contig, t_start, side="left"))
        hi = int(np.searchsorted(self._t_contig, t_end, side="left"))
        return self[lo:hi]


def _validate_records(rec: np.ndarray, geometry: SensorGeometry) -> None:
    if rec.shape[0] == 0:
        return
    t = rec["t"]
    if t[0] < 0:
        raise FormatError(f"record 0: negative timestamp {int(t[0])}")
    back = np.flatnonzero(np.diff(t) < 0)
    if back.size:
        i = int(back[0]) + 1
        raise FormatError(f"record {i}: timestamp regression {int(t[i - 1])} -> {int(t[i])}")
    bad = np.flatnonzero((rec["x"] >= geometry.width) | (rec["y"] >= geometry.height))
    if bad.size:
        i = int(bad[0])
        raise FormatError(
            f"record {i}: pixel ({int(rec['x'][i])}, {int(rec['y'][i])}) outside "
            f"{geometry.width}x{geometry.height} sensor"
        )
    badp = np.flatnonzero(rec["p"] > 1)
    if badp.size:
        i = int(badp[0])
        raise FormatError(f"record {i}: polarity {int(rec['p'][i])} not in {{0,1}}")


def _as_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if hasattr(source, "read"):
        return source.read()
    with open(source, "rb") as fh:
        return fh.read()


def parse_event_csv(source, geometry: SensorGeometry | None = None) -> EventStream:
    """Parse the canonical event CSV. ``source`` is bytes, a binary file object, or a path.

    Errors name the 1-based line number of the offending row.
    """
    geometry = geometry or SensorGeometry()
    text = _as_bytes(source).decode("utf-8")
    lines = text.split("\n")
    if not lines or lines[0].strip() != CSV_HEADER:
        raise FormatError(f"line 1: expected header {CSV_HEADER!r}")
    ts: list[int] = []
    xs: list[int] = []
    ys: list[int] = []
    ps: list[int] = []
    prev_t = -1
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise FormatError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            t, x, y, p = (int(v) for v in parts)
        except ValueError:
            raise FormatError(f"line {lineno}: non-integer field in {line!r}") from None
        if t < 0:
            raise FormatError(f"line {lineno}: negative timestamp {t}")
        if t < prev_t:
            raise FormatError(f"line {lineno}: timestamp regression {prev_t} -> {t}")
        if not (0 <= x < geometry.width and 0 <= y < geometry.height):
            raise FormatError(
                f"line {lineno}: pixel ({x}, {y}) outside {geometry.width}x{geometry.height} sensor"
            )
        if p not in (0, 1):
            raise FormatError(f"line {lineno}: polarity {p} not in {{0,1}}")
        prev_t = t
        ts.append(t)
        xs.append(x)
        ys.append(y)
        ps.append(p)
    return EventStream.from_arrays(geometry, ts, xs, ys, ps, validate=False)


def write_event_csv(stream: EventStream) -> bytes:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    if len(stream):
        cols = np.column_stack([stream.t, stream.x.astype(np.int64), stream.y.astype(np.int64), stream.p.astype(np.int64)])
        np.savetxt(buf, cols, fmt="%d", delimiter=",", newline="\n")
    return buf.getvalue().encode("utf-8")


def parse_event_binary(source) -> EventStream:
    data = _as_bytes(source)
    if len(data) < BINARY_HEADER.size:
        raise FormatError(f"byte 0: file shorter than the {BINARY_HEADER.size}-byte header")
    magic, width, height, _reserved = BINARY_HEADER.unpack_from(data, 0)
    if magic != BINARY_MAGIC:
        raise FormatError(f"byte 0: bad magic {magic!r}, expected {BINARY_MAGIC!r}")
    geometry = SensorGeometry(width, height)
    body = len(data) - BINARY_HEADER.size
    n, rem = divmod(body, EVENT_DTYPE.itemsize)
    if rem:
        offset = BINARY_HEADER.size + n * EVENT_DTYPE.itemsize
        raise FormatError(f"byte {offset}: truncated record ({rem} trailing bytes)")
    rec = np.frombuffer(data, dtype=EVENT_DTYPE, count=n, offset=BINARY_HEADER.size)
    return EventStream(geometry, rec)


def write_event_binary(stream: EventStream) -> bytes:
    g = stream.geometry
    header = BINARY_HEADER.pack(BINARY_MAGIC, g.width, g.height, b"\x00" * 8)
    return header + np.ascontiguousarray(stream.records).tobytes()


def parse_annotations(source, geometry: SensorGeometry | None = None) -> list[BoundingBoxObservation]:
    """Parse annotation CSV rows in file order.

    Tracks may be interleaved; timestamps must be non-decreasing per track.
    When ``geometry`` is given, boxes are clamped to it and flagged.
    """
    text = _as_bytes(source).decode("utf-8")
    lines = text.split("\n")
    if not lines or lines[0].strip() != ANNOTATION_HEADER:
        raise FormatError(f"line 1: expected header {ANNOTATION_HEADER!r}")
    last_t: dict[int, int] = {}
    out: list[BoundingBoxObservation] = []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise FormatError(f"line {lineno}: expected 6 fields, got {len(parts)}")
        try:
            t = int(parts[0])
            tid = int(parts[1])
            x0, y0, w, h = (float(v) for v in parts[2:])
        except ValueError:
            raise FormatError(f"line {lineno}: malformed field in {line!r}") from None
        if not (w > 0 and h > 0):
            raise FormatError(f"line {lineno}: non-positive box size w={parts[4]} h={parts[5]}")
        if tid in last_t and t < last_t[tid]:
            raise FormatError(f"line {lineno}: track {tid} timestamp regression {last_t[tid]} -> {t}")
        last_t[tid] = t
        box = BoundingBoxObservation(t, tid, x0, y0, w, h)
        if geometry is not None:
            box = clamp_box(box, geometry)
        out.append(box)
    return out


def _fmt_num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else f"{v:.6f}".rstrip("0").rstrip(".")


def write_annotations(boxes: Iterable[BoundingBoxObservation]) -> bytes:
    rows = [ANNOTATION_HEADER]
    for b in boxes:
        rows.append(f"{b.t},{b.track_id},{_fmt_num(b.x_min)},{_fmt_num(b.y_min)},{_fmt_num(b.w)},{_fmt_num(b.h)}")
    return ("\n".join(rows) + "\n").encode("utf-8")


def group_tracks(boxes: Iterable[BoundingBoxObservation]) -> dict[int, list[BoundingBoxObservation]]:
    tracks: dict[int, list[BoundingBoxObservation]] = defaultdict(list)
    for b in boxes:
        tracks[b.track_id].append(b)
    return dict(tracks)


def select_track(boxes: Iterable[BoundingBoxObservation], track_id: int) -> list[BoundingBoxObservation]:
    track = [b for b in boxes if b.track_id == track_id]
    if not track:
        raise KeyError(f"track {track_id} not present in annotations")
    return track


def box_mask(stream: EventStream, box: BoundingBoxObservation) -> np.ndarray:
    x = stream.x
    y = stream.y
    return (x >= box.x_min) & (x <= box.x_max) & (y >= box.y_min) & (y <= box.y_max)


def window_events(stream: EventStream, t_start: int, t_end: int, box: BoundingBoxObservation) -> EventStream:
    """Events with ``t_start <= t < t_end`` whose pixel lies inside ``box`` (edges inclusive)."""
    if t_start > t_end:
        raise ValueError(f"t_start {t_start} after t_end {t_end}")
    span = stream.time_slice(t_start, t_end)
    if len(span) == 0:
        return span
    m = box_mask(span, box)
    if m.all():
        return span
    return EventStream(stream.geometry, span.records[m], validate=False)
