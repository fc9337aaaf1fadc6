"""Synthetic propeller events and drone tracks with known ground truth.

The propeller model is deliberately simple: every pixel in the blade annulus
fires ON when a blade's leading edge crosses its centre and OFF when the
trailing edge leaves. Timestamps come from inverting the exact rotation
angle, so per-pixel ON->ON spacing equals the blade-passing period
``60 / (rpm * blades)`` to within timestamp rounding. With a non-zero blade
width the OFF->ON gap is the period minus the blade dwell time.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .events import (
    OFF,
    ON,
    BoundingBoxObservation,
    Event,
    EventStream,
    SensorGeometry,
    clamp_box,
)
from .trajectory import Trajectory

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# RPM profiles


class RpmProfile:
    """Piecewise-linear RPM over time (seconds); repeated knot times make steps.

    Held constant before the first and after the last knot.
    """

    def __init__(self, knots: Sequence[tuple[float, float]]):
        if not knots:
            raise ValueError("profile needs at least one knot")
        t = np.array([k[0] for k in knots], dtype=np.float64)
        r = np.array([k[1] for k in knots], dtype=np.float64)
        if np.any(np.diff(t) < 0):
            raise ValueError("profile knot times must be non-decreasing")
        if np.any(r <= 0):
            raise ValueError("profile rpm must be positive")
        # anchor at t=0 so the angle integral starts there
        if t[0] > 0:
            t = np.r_[0.0, t]
            r = np.r_[r[0], r]
        self.t = t
        self.rpm = r
        w = r * TWO_PI / 60.0
        self._w = w
        seg = np.diff(t)
        self._theta = np.r_[0.0, np.cumsum(0.5 * (w[:-1] + w[1:]) * seg)]

    @classmethod
    def constant(cls, rpm: float) -> "RpmProfile":
        return cls([(0.0, rpm)])

    @classmethod
    def step(cls, t_step: float, before: float, after: float) -> "RpmProfile":
        return cls([(0.0, before), (t_step, before), (t_step, after)])

    def __call__(self, t_s) -> np.ndarray:
        return np.vectorize(self.rpm_at, otypes=[np.float64])(t_s)

    def rpm_at(self, t_s: float) -> float:
        i = int(np.searchsorted(self.t, t_s, side="right")) - 1
        if i < 0:
            return float(self.rpm[0])
        if i >= len(self.t) - 1:
            return float(self.rpm[-1])
        t0, t1 = self.t[i], self.t[i + 1]
        frac = (t_s - t0) / (t1 - t0) if t1 > t0 else 1.0
        return float(self.rpm[i] + frac * (self.rpm[i + 1] - self.rpm[i]))

    def angle(self, t_s) -> np.ndarray:
        """Rotation angle in radians accumulated since t=0."""
        t_s = np.asarray(t_s, dtype=np.float64)
        i = np.clip(np.searchsorted(self.t, t_s, side="right") - 1, 0, len(self.t) - 1)
        tau = t_s - self.t[i]
        w0 = self._w[i]
        nxt = np.minimum(i + 1, len(self.t) - 1)
        dt = self.t[nxt] - self.t[i]
        slope = np.where(dt > 0, (self._w[nxt] - w0) / np.where(dt > 0, dt, 1.0), 0.0)
        return self._theta[i] + w0 * tau + 0.5 * slope * tau * tau

    def inverse_angle(self, theta) -> np.ndarray:
        """Time at which the accumulated angle reaches ``theta`` (radians, >= 0)."""
        theta = np.asarray(theta, dtype=np.float64)
        i = np.clip(np.searchsorted(self._theta, theta, side="right") - 1, 0, len(self.t) - 1)
        d = theta - self._theta[i]
        w0 = self._w[i]
        nxt = np.minimum(i + 1, len(self.t) - 1)
        dt = self.t[nxt] - self.t[i]
        slope = np.where(dt > 0, (self._w[nxt] - w0) / np.where(dt > 0, dt, 1.0), 0.0)
        # stable root of 0.5*slope*tau^2 + w0*tau - d = 0
        tau = 2.0 * d / (w0 + np.sqrt(np.maximum(w0 * w0 + 2.0 * slope * d, 0.0)))
        return self.t[i] + tau


def surge_profile(
    bursts: Iterable[tuple[float, float]],
    base_rpm: float,
    peak_rpm: float,
    ramp_s: float = 0.1,
) -> RpmProfile:
    """Base RPM with trapezoidal surges to ``peak_rpm`` over each ``(start, duration)`` burst."""
    knots = [(0.0, base_rpm)]
    last = 0.0
    for start, dur in sorted(bursts):
        a = max(start, last)
        b = max(a + 2 * ramp_s, start + dur)
        knots += [(a, base_rpm), (a + ramp_s, peak_rpm), (b - ramp_s, peak_rpm), (b, base_rpm)]
        last = b
    return RpmProfile(knots)


# ---------------------------------------------------------------------------
# propeller events


@dataclass(frozen=True)
class PropellerSpec:
    center: tuple[float, float]
    blade_length: float
    blades: int
    profile: RpmProfile
    blade_width_rad: float = 0.0
    hub_radius: float = 1.0
    phase: float = 0.0

    def __post_init__(self) -> None:
        if self.blade_length < 2:
            raise ValueError(f"blade length must be >= 2 px, got {self.blade_length}")
        if self.blades < 1:
            raise ValueError(f"blade count must be >= 1, got {self.blades}")
        if self.blade_width_rad < 0 or self.blade_width_rad >= TWO_PI / self.blades:
            raise ValueError("blade width must be in [0, 2*pi/blades)")

    def annulus(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pixel offsets ``(dx, dy)`` from the rounded centre and their angle about the true centre."""
        cx, cy = self.center
        L = int(math.ceil(self.blade_length)) + 1
        bx, by = round(cx), round(cy)
        dy, dx = np.mgrid[-L:L + 1, -L:L + 1]
        dx, dy = dx.ravel(), dy.ravel()
        rx, ry = bx + dx - cx, by + dy - cy
        rho = np.hypot(rx, ry)
        keep = (rho >= self.hub_radius) & (rho <= self.blade_length)
        return dx[keep], dy[keep], np.arctan2(ry[keep], rx[keep])


def simulate_propeller_events(
    spec: PropellerSpec,
    duration_s: float,
    geometry: SensorGeometry | None = None,
    *,
    t0_us: int = 0,
    jitter_us: int = 0,
    seed: int = 0,
    center_path: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None,
) -> EventStream:
    """ON at leading-edge arrival, OFF at trailing-edge departure, for every annulus pixel.

    ``jitter_us`` adds uniform integer jitter in ``[-jitter_us, jitter_us]`` per event;
    an OFF is never emitted before the ON of the same blade passage.
    ``center_path(t_s)`` moves the propeller (integer-pixel translation of the
    annulus relative to ``spec.center``).
    """
    geometry = geometry or SensorGeometry()
    dx, dy, phi = spec.annulus()
    sector = TWO_PI / spec.blades
    a0 = np.mod(phi - spec.phase, sector)
    a_end = float(spec.profile.angle(duration_s))
    n_per = np.where(a0 <= a_end, np.floor((a_end - a0) / sector).astype(np.int64) + 1, 0)
    total = int(n_per.sum())
    pix = np.repeat(np.arange(dx.shape[0]), n_per)
    starts = np.r_[0, np.cumsum(n_per)[:-1]]
    k = np.arange(total) - np.repeat(starts, n_per)
    lead = a0[pix] + k * sector

    t_on_s = spec.profile.inverse_angle(lead)
    t_off_s = spec.profile.inverse_angle(lead + spec.blade_width_rad) if spec.blade_width_rad else t_on_s
    t_on = np.rint(t_on_s * 1e6).astype(np.int64)
    t_off = np.rint(t_off_s * 1e6).astype(np.int64)
    if jitter_us:
        rng = np.random.default_rng(seed)
        t_on = t_on + rng.integers(-jitter_us, jitter_us + 1, total)
        t_off = t_off + rng.integers(-jitter_us, jitter_us + 1, total)
        t_on = np.maximum(t_on, 0)
        t_off = np.maximum(t_off, t_on)

    bx, by = round(spec.center[0]), round(spec.center[1])
    t = np.concatenate([t_on, t_off])
    px = np.concatenate([dx[pix], dx[pix]]) + bx
    py = np.concatenate([dy[pix], dy[pix]]) + by
    pol = np.concatenate([np.full(total, ON, np.uint8), np.full(total, OFF, np.uint8)])
    edge = np.concatenate([np.zeros(total, np.int8), np.ones(total, np.int8)])
    if center_path is not None:
        ts = t / 1e6
        cx, cy = center_path(ts)
        px = px + np.rint(np.asarray(cx) - spec.center[0]).astype(np.int64)
        py = py + np.rint(np.asarray(cy) - spec.center[1]).astype(np.int64)

    dur_us = int(round(duration_s * 1e6))
    keep = (t < dur_us) & (px >= 0) & (px < geometry.width) & (py >= 0) & (py < geometry.height)
    t, px, py, pol, edge = t[keep], px[keep], py[keep], pol[keep], edge[keep]
    order = np.lexsort((edge, py * geometry.width + px, t))
    return EventStream.from_arrays(geometry, t[order] + t0_us, px[order], py[order], pol[order], validate=False)


def add_noise_events(
    stream: EventStream,
    rate: float,
    seed: int,
    *,
    region: BoundingBoxObservation | None = None,
    t_range: tuple[int, int] | None = None,
) -> EventStream:
    """Merge uniform random events at ``rate`` events/s per kilopixel.

    Noise covers ``region`` (whole sensor by default) over ``t_range``
    (stream span by default). Ties keep original events first.
    """
    if rate < 0:
        raise ValueError(f"noise rate must be >= 0, got {rate}")
    if rate == 0:
        return stream
    g = stream.geometry
    if t_range is None:
        if len(stream) == 0:
            return stream
        t_range = (int(stream.t[0]), int(stream.t[-1]) + 1)
    if region is None:
        x0, y0, x1, y1 = 0, 0, g.width - 1, g.height - 1
    else:
        x0, y0, x1, y1 = region.pixel_bounds()
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, g.width - 1), min(y1, g.height - 1)
    area = (x1 - x0 + 1) * (y1 - y0 + 1)
    span_s = (t_range[1] - t_range[0]) / 1e6
    n = int(round(rate * area / 1000.0 * span_s))
    if n <= 0:
        return stream
    rng = np.random.default_rng(seed)
    nt = rng.integers(t_range[0], t_range[1], n)
    nx = rng.integers(x0, x1 + 1, n)
    ny = rng.integers(y0, y1 + 1, n)
    npol = rng.integers(0, 2, n)
    t = np.concatenate([stream.t, nt])
    order = np.argsort(t, kind="stable")
    x = np.concatenate([stream.x.astype(np.int64), nx])[order]
    y = np.concatenate([stream.y.astype(np.int64), ny])[order]
    p = np.concatenate([stream.p.astype(np.int64), npol])[order]
    return EventStream.from_arrays(g, t[order], x, y, p, validate=False)


# ---------------------------------------------------------------------------
# motion and tracks

MOTION_KINDS = ("constant_velocity", "circular", "sinusoidal", "random_accel")


@dataclass(frozen=True)
class MotionProfile:
    """Centre-path generator parameters. Units: px, px/s, px/s^2, Hz, s."""

    kind: str = "constant_velocity"
    start: tuple[float, float] = (640.0, 360.0)
    velocity: tuple[float, float] = (0.0, 0.0)
    radius: float = 100.0
    freq_hz: float = 0.25
    amplitude: tuple[float, float] = (50.0, 0.0)
    accel_std: float = 0.0
    accel_hold_s: float = 0.1
    burst_rate_hz: float = 0.0
    burst_duration_s: float = 0.5
    burst_accel: float = 0.0
    damping: float = 0.0
    spring: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in MOTION_KINDS:
            raise ValueError(f"unknown motion kind {self.kind!r}; expected one of {MOTION_KINDS}")


@dataclass
class CenterPath:
    """Continuous centre path; call with seconds (scalar or array)."""

    fn: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
    bursts: list[tuple[float, float]] = field(default_factory=list)

    def __call__(self, t_s):
        return self.fn(np.asarray(t_s, dtype=np.float64))


def _draw_bursts(profile: MotionProfile, duration_s: float, rng: np.random.Generator):
    bursts = []
    if profile.burst_rate_hz <= 0 or profile.burst_accel <= 0:
        return bursts
    t = rng.exponential(1.0 / profile.burst_rate_hz)
    while t < duration_s:
        ang = rng.uniform(0, TWO_PI)
        bursts.append((t, profile.burst_duration_s, profile.burst_accel * math.cos(ang), profile.burst_accel * math.sin(ang)))
        t += profile.burst_duration_s + rng.exponential(1.0 / profile.burst_rate_hz)
    return bursts


def motion_path(profile: MotionProfile, duration_s: float, dt_s: float = 1e-3) -> CenterPath:
    sx, sy = profile.start
    if profile.kind == "constant_velocity":
        vx, vy = profile.velocity
        return CenterPath(lambda t: (sx + vx * t, sy + vy * t))
    if profile.kind == "circular":
        R, f = profile.radius, profile.freq_hz
        # start on the circle at angle 0, centre to the left
        return CenterPath(lambda t: (sx - R + R * np.cos(TWO_PI * f * t), sy + R * np.sin(TWO_PI * f * t)))
    if profile.kind == "sinusoidal":
        vx, vy = profile.velocity
        ax, ay, f = profile.amplitude[0], profile.amplitude[1], profile.freq_hz
        return CenterPath(lambda t: (sx + vx * t + ax * np.sin(TWO_PI * f * t), sy + vy * t + ay * np.sin(TWO_PI * f * t)))

    rng = np.random.default_rng(profile.seed)
    n = int(math.ceil(duration_s / dt_s)) + 1
    grid = np.arange(n) * dt_s
    hold = max(int(round(profile.accel_hold_s / dt_s)), 1)
    n_hold = n // hold + 1
    a_rand = rng.normal(0.0, profile.accel_std, size=(n_hold, 2)) if profile.accel_std > 0 else np.zeros((n_hold, 2))
    a_rand = np.repeat(a_rand, hold, axis=0)[:n]
    bursts = _draw_bursts(profile, duration_s, rng)
    for start, dur, bx, by in bursts:
        m = (grid >= start) & (grid < start + dur)
        a_rand[m] += (bx, by)
    pos = np.empty((n, 2))
    vel = np.empty((n, 2))
    p = np.array([sx, sy], dtype=np.float64)
    v = np.array(profile.velocity, dtype=np.float64)
    anchor = p.copy()
    for i in range(n):
        pos[i] = p
        vel[i] = v
        a = a_rand[i] + profile.spring * (anchor - p) - profile.damping * v
        p = p + v * dt_s + 0.5 * a * dt_s * dt_s
        v = v + a * dt_s

    def fn(t):
        return np.interp(t, grid, pos[:, 0]), np.interp(t, grid, pos[:, 1])

    path = CenterPath(fn, [(b[0], b[1]) for b in bursts])
    path.velocity_grid = (grid, vel)  # type: ignore[attr-defined]
    return path


@dataclass
class SimulatedTrack:
    annotations: list[BoundingBoxObservation]
    ground_truth: Trajectory
    path: CenterPath
    clamped: int = 0

    def __iter__(self):
        # allows ``annotations, gt = simulate_track(...)``
        return iter((self.annotations, self.ground_truth))


def simulate_track(
    profile: MotionProfile,
    duration_s: float,
    fps: float,
    box_size: tuple[float, float] = (80.0, 60.0),
    geometry: SensorGeometry | None = None,
    *,
    t0_us: int = 0,
    track_id: int = 0,
    box_noise_px: float = 0.0,
    noise_seed: int = 0,
) -> SimulatedTrack:
    """Sample the centre path at ``1/fps``; boxes are centred on it (plus optional jitter).

    The centre is held at least half a box inside the sensor, so the returned
    path and ground truth stay in view; frames where the path or a jittered box
    had to be clamped are counted in ``clamped``.
    """
    if fps <= 0:
        raise ValueError(f"fps must be positive, got {fps}")
    geometry = geometry or SensorGeometry()
    w, h = box_size
    raw = motion_path(profile, duration_s)
    lo = np.array([w / 2, h / 2])
    hi = np.array([geometry.width - w / 2, geometry.height - h / 2])

    def clipped(t):
        x, y = raw(t)
        return np.clip(x, lo[0], hi[0]), np.clip(y, lo[1], hi[1])

    path = CenterPath(clipped, raw.bursts)
    n = int(math.floor(duration_s * fps - 1e-9)) + 1
    k = np.arange(n)
    rel_us = np.rint(k * 1e6 / fps).astype(np.int64)
    rel_us = rel_us[rel_us < int(round(duration_s * 1e6))]
    rx, ry = (np.atleast_1d(v) for v in raw(rel_us / 1e6))
    cx, cy = (np.atleast_1d(v) for v in path(rel_us / 1e6))
    off_sensor = (rx != cx) | (ry != cy)
    rng = np.random.default_rng(noise_seed)
    jit = rng.normal(0.0, box_noise_px, size=(rel_us.shape[0], 2)) if box_noise_px > 0 else np.zeros((rel_us.shape[0], 2))
    boxes = []
    clamped = 0
    for i, t in enumerate(rel_us.tolist()):
        b = BoundingBoxObservation(t + t0_us, track_id, cx[i] + jit[i, 0] - w / 2, cy[i] + jit[i, 1] - h / 2, w, h)
        b2 = clamp_box(b, geometry)
        clamped += bool(b2.clamped or off_sensor[i])
        boxes.append(b2)
    gt = Trajectory(rel_us + t0_us, np.column_stack([cx, cy]))
    return SimulatedTrack(boxes, gt, path, clamped)


# ---------------------------------------------------------------------------
# brute-force oracle

ORACLE_MIN_US = 50
ORACLE_MAX_US = 25_600
ORACLE_STEP_US = 10
ORACLE_HALF_WINDOW_US = 50


def off_on_gaps(events: Iterable[Event]) -> list[int]:
    """Per-pixel OFF->ON gaps (us), walking events one by one."""
    last_off: dict[tuple[int, int], int] = {}
    gaps = []
    for e in events:
        key = (e.x, e.y)
        if e.polarity == OFF:
            last_off[key] = e.t
        elif key in last_off:
            gaps.append(e.t - last_off[key])
    return gaps


def oracle_period_us(events: Iterable[Event]) -> float:
    gaps = sorted(off_on_gaps(events))
    if len(gaps) < 10:
        raise ValueError(f"oracle needs at least 10 OFF->ON gaps, got {len(gaps)}")
    best_score, best = -1, []
    for c in range(ORACLE_MIN_US, ORACLE_MAX_US + 1, ORACLE_STEP_US):
        lo = bisect.bisect_left(gaps, c - ORACLE_HALF_WINDOW_US)
        hi = bisect.bisect_right(gaps, c + ORACLE_HALF_WINDOW_US)
        score = hi - lo
        if score > best_score:
            best_score, best = score, [c]
        elif score == best_score and best and c == best[-1] + ORACLE_STEP_US:
            best.append(c)
    # centre of the first maximal plateau
    return (best[0] + best[-1]) / 2.0


def oracle_rpm(events: Iterable[Event], blades: int) -> float:
    """Exhaustive 0.05-25.6 ms period search, scored by gaps within +/-0.05 ms."""
    period_us = oracle_period_us(events)
    return 60.0 / (period_us * 1e-6 * blades)



def add_box_noise(
    stream: EventStream,
    boxes: Sequence[BoundingBoxObservation],
    rate: float,
    seed: int,
) -> EventStream:
    """Airframe-like clutter: uniform events inside each box until the next box time."""
    if rate <= 0 or len(boxes) < 2:
        return stream
    out = stream
    for i, (b, nxt) in enumerate(zip(boxes[:-1], boxes[1:])):
        out = add_noise_events(out, rate, seed * 100_003 + i, region=b, t_range=(b.t, nxt.t))
    return out
