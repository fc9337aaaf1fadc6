"""Propeller RPM from per-pixel ON/OFF periodicity inside a drone box.

Pipeline per annotation frame:

1. count events per pixel over a trailing window (frequency map),
2. keep the pixels at or above a nearest-rank percentile of the nonzero
   counts (propeller mask),
3. feed masked events through per-pixel ON/OFF bookkeeping; every ON that
   follows an OFF on the same pixel yields a period,
4. bin periods into a 256 x 0.1 ms histogram with 100 ms FIFO retention,
5. take the argmax bin centre as the blade-passing period and convert it.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .events import (
    OFF,
    ON,
    BoundingBoxObservation,
    Event,
    EventStream,
    SensorGeometry,
    select_track,
    window_events,
)

log = logging.getLogger(__name__)

BIN_WIDTH_US = 100
N_BINS = 256
BIN_WIDTH_MS = BIN_WIDTH_US / 1000.0
MAX_PERIOD_MS = N_BINS * BIN_WIDTH_MS  # 25.6 ms, exclusive
RETENTION_US = 100_000

RPM_CSV_HEADER = "t_us,rpm,period_ms,support,valid"


@dataclass(frozen=True)
class RpmConfig:
    percentile: float = 70.0
    blades: int = 2
    window_us: int = 100_000
    min_support: int = 5

    def __post_init__(self) -> None:
        if not 0 < self.percentile < 100:
            raise ValueError(f"percentile must be in (0, 100), got {self.percentile}")
        if self.blades < 1:
            raise ValueError(f"blade count must be >= 1, got {self.blades}")
        if self.window_us <= 0:
            raise ValueError(f"frequency-map window must be positive, got {self.window_us}")
        if self.min_support < 1:
            raise ValueError(f"min_support must be >= 1, got {self.min_support}")


@dataclass(frozen=True)
class RpmEstimate:
    t: int
    period_ms: float | None
    rpm: float | None
    support: int
    valid: bool


# ---------------------------------------------------------------------------
# frequency map and mask


@dataclass
class FrequencyMap:
    """Per-pixel event counts over the integer pixels of one box."""

    x0: int
    y0: int
    counts: np.ndarray  # (rows, cols) int64, row = y - y0
    t_start: int = 0
    t_end: int = 0

    def count(self, x: int, y: int) -> int:
        r, c = y - self.y0, x - self.x0
        if 0 <= r < self.counts.shape[0] and 0 <= c < self.counts.shape[1]:
            return int(self.counts[r, c])
        raise KeyError((x, y))

    def as_dict(self, nonzero: bool = True) -> dict[tuple[int, int], int]:
        rows, cols = np.nonzero(self.counts) if nonzero else np.indices(self.counts.shape).reshape(2, -1)
        return {(int(c) + self.x0, int(r) + self.y0): int(self.counts[r, c]) for r, c in zip(rows, cols)}

    @property
    def n_pixels(self) -> int:
        return int(self.counts.size)


@dataclass
class PixelMask:
    x0: int
    y0: int
    mask: np.ndarray  # bool, same shape as the map it came from

    def __len__(self) -> int:
        return int(self.mask.sum())

    def __contains__(self, xy) -> bool:
        x, y = xy
        r, c = y - self.y0, x - self.x0
        return 0 <= r < self.mask.shape[0] and 0 <= c < self.mask.shape[1] and bool(self.mask[r, c])

    def pixels(self) -> set[tuple[int, int]]:
        rows, cols = np.nonzero(self.mask)
        return {(int(c) + self.x0, int(r) + self.y0) for r, c in zip(rows, cols)}

    def flat_indices(self, width: int) -> np.ndarray:
        rows, cols = np.nonzero(self.mask)
        return (rows.astype(np.int64) + self.y0) * width + (cols.astype(np.int64) + self.x0)

    def select(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Boolean selector for event coordinates falling in the mask."""
        r = y.astype(np.int64) - self.y0
        c = x.astype(np.int64) - self.x0
        ok = (r >= 0) & (r < self.mask.shape[0]) & (c >= 0) & (c < self.mask.shape[1])
        out = np.zeros(r.shape[0], dtype=bool)
        out[ok] = self.mask[r[ok], c[ok]]
        return out


def build_frequency_map(events: EventStream, box: BoundingBoxObservation) -> FrequencyMap:
    x0, y0, x1, y1 = box.pixel_bounds()
    rows, cols = max(y1 - y0 + 1, 0), max(x1 - x0 + 1, 0)
    if len(events) == 0 or rows == 0 or cols == 0:
        t0 = int(events.t[0]) if len(events) else 0
        return FrequencyMap(x0, y0, np.zeros((rows, cols), dtype=np.int64), t0, t0)
    c = events.x.astype(np.int64) - x0
    r = events.y.astype(np.int64) - y0
    ok = (r >= 0) & (r < rows) & (c >= 0) & (c < cols)
    flat = r[ok] * cols + c[ok]
    counts = np.bincount(flat, minlength=rows * cols).reshape(rows, cols)
    return FrequencyMap(x0, y0, counts, int(events.t[0]), int(events.t[-1]) + 1)


def nearest_rank(sorted_values: np.ndarray, percentile: float) -> float:
    n = sorted_values.shape[0]
    rank = max(1, math.ceil(percentile / 100.0 * n))
    return sorted_values[rank - 1]


def threshold_propeller_pixels(fmap: FrequencyMap, percentile: float) -> PixelMask:
    """Pixels whose count is at least the nearest-rank percentile of nonzero counts.

    An all-zero map gives an empty mask.
    """
    nz = np.sort(fmap.counts[fmap.counts > 0])
    if nz.size == 0:
        return PixelMask(fmap.x0, fmap.y0, np.zeros(fmap.counts.shape, dtype=bool))
    thr = nearest_rank(nz, percentile)
    return PixelMask(fmap.x0, fmap.y0, fmap.counts >= thr)


# ---------------------------------------------------------------------------
# per-pixel ON/OFF bookkeeping


class PixelTransitionState:
    """Last ON / OFF timestamp per sensor pixel (``-1`` when unset)."""

    def __init__(self, geometry: SensorGeometry | None = None):
        self.geometry = geometry or SensorGeometry()
        n = self.geometry.n_pixels
        self.t_on = np.full(n, -1, dtype=np.int64)
        self.t_off = np.full(n, -1, dtype=np.int64)
        self.latest = -1

    def _index(self, x: int, y: int) -> int:
        return y * self.geometry.width + x

    def last_on(self, x: int, y: int) -> int | None:
        v = int(self.t_on[self._index(x, y)])
        return v if v >= 0 else None

    def last_off(self, x: int, y: int) -> int | None:
        v = int(self.t_off[self._index(x, y)])
        return v if v >= 0 else None

    def record(self, e: Event) -> float | None:
        i = self._index(e.x, e.y)
        self.latest = max(self.latest, e.t)
        if e.polarity == ON:
            prev = int(self.t_off[i])
            self.t_on[i] = e.t
            if prev >= 0:
                return (e.t - prev) / 1000.0
            return None
        self.t_off[i] = e.t
        return None

    def advance(self, t: np.ndarray, x: np.ndarray, y: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised :meth:`record` over time-ordered events.

        Returns ``(t_on_us, period_us)`` for every period produced, in event order.
        """
        n = t.shape[0]
        if n == 0:
            return np.empty(0, np.int64), np.empty(0, np.int64)
        t = t.astype(np.int64, copy=False)
        pix = y.astype(np.int64) * self.geometry.width + x.astype(np.int64)
        order = np.argsort(pix, kind="stable")
        ps, ts, pol = pix[order], t[order], p[order]
        ar = np.arange(n)
        starts = np.empty(n, dtype=bool)
        starts[0] = True
        starts[1:] = ps[1:] != ps[:-1]
        group_start = np.maximum.accumulate(np.where(starts, ar, 0))

        is_on = pol == ON
        last_off = np.maximum.accumulate(np.where(~is_on, ar, -1))
        in_group = last_off >= group_start
        prev_off = np.where(in_group, ts[np.maximum(last_off, 0)], self.t_off[ps])
        hit = is_on & (prev_off >= 0)

        produced = np.zeros(n, dtype=bool)
        period = np.zeros(n, dtype=np.int64)
        produced[order[hit]] = True
        period[order[hit]] = ts[hit] - prev_off[hit]

        ends = np.empty(n, dtype=bool)
        ends[-1] = True
        ends[:-1] = starts[1:]
        last_on = np.maximum.accumulate(np.where(is_on, ar, -1))
        e_idx = np.flatnonzero(ends)
        for last, table in ((last_on, self.t_on), (last_off, self.t_off)):
            li = last[e_idx]
            ok = li >= group_start[e_idx]
            table[ps[e_idx[ok]]] = ts[li[ok]]

        self.latest = max(self.latest, int(t[-1]))
        return t[produced], period[produced]

    def clear(self, flat_indices: np.ndarray) -> None:
        self.t_on[flat_indices] = -1
        self.t_off[flat_indices] = -1


def record_transition(state: PixelTransitionState, e: Event) -> float | None:
    """Update ``state`` with ``e``; return the OFF->ON gap in ms when ``e`` is an ON."""
    return state.record(e)


# ---------------------------------------------------------------------------
# period histogram


def period_bin(period_ms: float) -> int:
    return int(math.floor(period_ms / BIN_WIDTH_MS + 1e-9))


class PeriodHistogram:
    """256-bin period histogram with FIFO eviction of entries older than the retention."""

    def __init__(self, retention_us: int = RETENTION_US):
        self.retention_us = retention_us
        self.counts = np.zeros(N_BINS, dtype=np.int64)
        self._t = np.empty(0, dtype=np.int64)
        self._b = np.empty(0, dtype=np.int64)
        self._head = 0

    def __len__(self) -> int:
        return self._t.shape[0] - self._head

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def entries(self) -> list[tuple[int, int]]:
        return list(zip(self._t[self._head:].tolist(), self._b[self._head:].tolist()))

    def insert(self, period_ms: float, now: int) -> None:
        if period_ms < 0:
            raise ValueError(f"negative period {period_ms}")
        b = period_bin(period_ms)
        if b < N_BINS:
            self._push(np.array([now], np.int64), np.array([b], np.int64))
        self.evict(now)

    def insert_us(self, times: np.ndarray, periods_us: np.ndarray) -> None:
        """Batch insert of integer-microsecond periods stamped at ``times`` (non-decreasing).

        Equivalent to calling :meth:`insert` once per entry in order.
        """
        if times.shape[0] == 0:
            return
        bins = periods_us // BIN_WIDTH_US
        keep = bins < N_BINS
        self._push(times[keep], bins[keep])
        self.evict(int(times[-1]))

    def _push(self, times: np.ndarray, bins: np.ndarray) -> None:
        if times.shape[0] == 0:
            return
        if len(self) and times[0] < self._t[-1]:
            raise ValueError("histogram insertions must be time-ordered")
        np.add.at(self.counts, bins, 1)
        live_t, live_b = self._t[self._head:], self._b[self._head:]
        self._t = np.concatenate([live_t, times])
        self._b = np.concatenate([live_b, bins])
        self._head = 0

    def evict(self, now: int) -> int:
        """Drop entries with ``now - t > retention``; returns how many were dropped."""
        live = self._t[self._head:]
        cut = int(np.searchsorted(live, now - self.retention_us, side="left"))
        if cut:
            gone = self._b[self._head:self._head + cut]
            self.counts -= np.bincount(gone, minlength=N_BINS)
            self._head += cut
        return cut

    def argmax(self) -> tuple[int, int]:
        """``(bin, support)`` of the tallest bin, ties to the smaller index."""
        b = int(np.argmax(self.counts))
        support = int(self.counts[b])
        if support and np.count_nonzero(self.counts == support) > 1:
            log.debug("histogram tie at support %d: bins %s", support, np.flatnonzero(self.counts == support).tolist())
        return b, support


def estimate_dominant_period(h: PeriodHistogram, min_support: int = 1) -> float | None:
    """Bin-centre period in ms of the argmax bin, or ``None`` when support is below ``min_support``."""
    b, support = h.argmax()
    if support == 0 or support < min_support:
        return None
    return (b + 0.5) * BIN_WIDTH_MS


def period_to_rpm(period_ms: float, blades: int) -> float:
    if not period_ms > 0:
        raise ValueError(f"period must be positive, got {period_ms}")
    if blades < 1:
        raise ValueError(f"blade count must be >= 1, got {blades}")
    return (1000.0 / period_ms) * 60.0 / blades


def rpm_to_period(rpm: float, blades: int) -> float:
    return 60_000.0 / (rpm * blades)


# ---------------------------------------------------------------------------
# streaming estimator


class RpmEstimator:
    """Streaming estimator for one track. Not thread-safe; one instance per track."""

    def __init__(self, geometry: SensorGeometry, cfg: RpmConfig | None = None):
        self.cfg = cfg or RpmConfig()
        self.geometry = geometry
        self.state = PixelTransitionState(geometry)
        self.histogram = PeriodHistogram()
        self._mask_pixels = np.empty(0, dtype=np.int64)
        self._t_prev: int | None = None

    def update(self, stream: EventStream, box: BoundingBoxObservation) -> RpmEstimate:
        t_now = box.t
        cfg = self.cfg
        recent = window_events(stream, t_now - cfg.window_us, t_now, box)
        fmap = build_frequency_map(recent, box)
        mask = threshold_propeller_pixels(fmap, cfg.percentile)

        pixels = mask.flat_indices(self.geometry.width)
        dropped = np.setdiff1d(self._mask_pixels, pixels, assume_unique=True)
        if dropped.size:
            self.state.clear(dropped)
        self._mask_pixels = pixels

        t_from = t_now - cfg.window_us if self._t_prev is None else self._t_prev
        new = window_events(stream, min(t_from, t_now), t_now, box)
        if len(new):
            sel = mask.select(new.x, new.y)
            times, periods = self.state.advance(new.t[sel], new.x[sel], new.y[sel], new.p[sel])
            self.histogram.insert_us(times, periods)
        self.histogram.evict(t_now)
        self._t_prev = t_now

        b, support = self.histogram.argmax()
        period = estimate_dominant_period(self.histogram, cfg.min_support)
        if period is None:
            return RpmEstimate(t_now, None, None, support, False)
        return RpmEstimate(t_now, period, period_to_rpm(period, cfg.blades), support, True)


def estimate_rpm_stream(
    stream: EventStream,
    boxes: Sequence[BoundingBoxObservation],
    cfg: RpmConfig | None = None,
    track_id: int | None = None,
) -> list[RpmEstimate]:
    """One estimate per annotation of the chosen track (the only track when ``track_id`` is None)."""
    if track_id is not None:
        boxes = select_track(boxes, track_id)
    elif len({b.track_id for b in boxes}) > 1:
        raise ValueError("annotations hold several tracks; pass track_id")
    est = RpmEstimator(stream.geometry, cfg)
    out = []
    for b in boxes:
        out.append(est.update(stream, b))
    return out


def write_rpm_csv(series: Iterable[RpmEstimate]) -> bytes:
    buf = io.StringIO()
    buf.write(RPM_CSV_HEADER + "\n")
    for e in series:
        if e.valid:
            buf.write(f"{e.t},{e.rpm:.6f},{e.period_ms:.6f},{e.support},1\n")
        else:
            buf.write(f"{e.t},,,{e.support},0\n")
    return buf.getvalue().encode("utf-8")


def parse_rpm_csv(data: bytes) -> list[RpmEstimate]:
    lines = data.decode("utf-8").split("\n")
    if not lines or lines[0].strip() != RPM_CSV_HEADER:
        raise ValueError(f"expected header {RPM_CSV_HEADER!r}")
    out = []
    for line in lines[1:]:
        if not line.strip():
            continue
        t, rpm, period, support, valid = line.strip().split(",")
        ok = valid == "1"
        out.append(RpmEstimate(int(t), float(period) if ok else None, float(rpm) if ok else None, int(support), ok))
    return out
