"""Constant-velocity Kalman filter in image space with RPM-scaled process noise.

State is ``(cx, cy, vx, vy)`` in px and px/s. Process noise is a fixed
diagonal scaled by ``alpha_v = max(0.5, 1 + 2 r + max(0, r_dot))``, where
``r`` is the normalised RPM level and ``r_dot`` its clamped rate.
"""

from __future__ import annotations

import bisect
import io
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .events import BoundingBoxObservation
from .rpm import RpmEstimate
from .trajectory import Trajectory

DEFAULT_STEP_S = 1.0 / 30.0
DEFAULT_HORIZONS = (0.4, 0.8)
INIT_P_DIAG = (10.0, 10.0, 100.0, 100.0)
FALLBACK_R = 0.5

FORECAST_CSV_HEADER = "t_emit_us,horizon_s,t_pred_us,cx,cy"


@dataclass(frozen=True)
class NoiseConfig:
    q_cx: float = 1.0
    q_cy: float = 1.0
    q_vx: float = 10.0
    q_vy: float = 10.0
    r_pos: float = 1.0
    scale_scope: str = "full"  # or "velocity_only"

    def __post_init__(self) -> None:
        for name in ("q_cx", "q_cy", "q_vx", "q_vy", "r_pos"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.scale_scope not in ("full", "velocity_only"):
            raise ValueError(f"scale_scope must be 'full' or 'velocity_only', got {self.scale_scope!r}")

    def process_noise(self, dt: float, alpha_v: float) -> np.ndarray:
        if self.scale_scope == "full":
            q = alpha_v * np.array([self.q_cx, self.q_cy, self.q_vx, self.q_vy])
        else:
            q = np.array([self.q_cx, self.q_cy, alpha_v * self.q_vx, alpha_v * self.q_vy])
        return np.diag(q * dt)


@dataclass(frozen=True)
class ModulationConfig:
    rpm_lo: float = 2300.0
    rpm_hi: float = 30000.0
    rdot_scale: float = 2.0

    def __post_init__(self) -> None:
        if not self.rpm_lo < self.rpm_hi:
            raise ValueError(f"rpm_lo ({self.rpm_lo}) must be below rpm_hi ({self.rpm_hi})")
        if not self.rdot_scale > 0:
            raise ValueError(f"rdot_scale must be > 0, got {self.rdot_scale}")


@dataclass(frozen=True)
class FilterState:
    x: np.ndarray
    P: np.ndarray
    t: int

    @property
    def center(self) -> tuple[float, float]:
        return (float(self.x[0]), float(self.x[1]))

    @property
    def velocity(self) -> tuple[float, float]:
        return (float(self.x[2]), float(self.x[3]))


@dataclass(frozen=True)
class Measurement:
    t: int
    cx: float
    cy: float
    vx: float
    vy: float
    dt_s: float  # spacing of the two boxes the velocity was differenced from

    def vector(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.vx, self.vy], dtype=np.float64)


@dataclass(frozen=True)
class RpmModulation:
    r: float
    r_dot: float
    alpha_v: float

    @classmethod
    def from_levels(cls, r: float, r_dot: float) -> "RpmModulation":
        r = min(max(r, 0.0), 1.0)
        r_dot = min(max(r_dot, -1.0), 1.0)
        return cls(r, r_dot, compute_alpha_v(r, r_dot))


def normalize_rpm(rpm: float, rpm_lo: float, rpm_hi: float) -> float:
    if not rpm_lo < rpm_hi:
        raise ValueError(f"rpm_lo ({rpm_lo}) must be below rpm_hi ({rpm_hi})")
    return min(max((rpm - rpm_lo) / (rpm_hi - rpm_lo), 0.0), 1.0)


def compute_r_dot(r_now: float, r_then: float, dt_s: float, scale: float = 2.0) -> float:
    if not dt_s > 0:
        raise ValueError(f"dt must be positive, got {dt_s}")
    return min(max((r_now - r_then) / dt_s / scale, -1.0), 1.0)


def compute_alpha_v(r: float, r_dot: float) -> float:
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"r must be in [0, 1], got {r}")
    if not -1.0 <= r_dot <= 1.0:
        raise ValueError(f"r_dot must be in [-1, 1], got {r_dot}")
    return max(0.5, 1.0 + 2.0 * r + max(0.0, r_dot))


def transition(dt: float) -> np.ndarray:
    F = np.eye(4)
    F[0, 2] = dt
    F[1, 3] = dt
    return F


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def kf_predict(s: FilterState, dt: float, alpha_v: float, cfg: NoiseConfig) -> FilterState:
    if not dt > 0:
        raise ValueError(f"prediction step must be positive, got {dt}")
    F = transition(dt)
    x = F @ s.x
    P = _sym(F @ s.P @ F.T + cfg.process_noise(dt, alpha_v))
    return FilterState(x, P, s.t + int(round(dt * 1e6)))


def kf_update(s: FilterState, m: Measurement, cfg: NoiseConfig) -> FilterState:
    """Full-state update (H = I), Joseph form."""
    z = m.vector()
    if not np.all(np.isfinite(z)) or not math.isfinite(m.dt_s):
        raise ValueError(f"non-finite measurement at t={m.t}")
    if m.t < s.t:
        raise ValueError(f"measurement at {m.t} precedes filter time {s.t}")
    r_vel = 2.0 * cfg.r_pos / (m.dt_s * m.dt_s)
    R = np.diag([cfg.r_pos, cfg.r_pos, r_vel, r_vel])
    S = s.P + R
    K = np.linalg.solve(S.T, s.P.T).T  # P S^-1
    x = s.x + K @ (z - s.x)
    I_K = np.eye(4) - K
    P = _sym(I_K @ s.P @ I_K.T + K @ R @ K.T)
    return FilterState(x, P, m.t)


def measurement_from_boxes(curr: BoundingBoxObservation, prev: BoundingBoxObservation) -> Measurement:
    if curr.t <= prev.t:
        raise ValueError(f"box timestamps must increase: {prev.t} -> {curr.t}")
    dt = (curr.t - prev.t) / 1e6
    (cx, cy), (px, py) = curr.center, prev.center
    return Measurement(curr.t, cx, cy, (cx - px) / dt, (cy - py) / dt, dt)


def initial_state(m: Measurement, p_diag: Sequence[float] = INIT_P_DIAG) -> FilterState:
    return FilterState(m.vector(), np.diag(np.asarray(p_diag, dtype=np.float64)), m.t)


def forecast_grid(horizon: float, step: float = DEFAULT_STEP_S) -> list[float]:
    """Offsets in seconds of the forecast poses; the last equals ``horizon``."""
    if not horizon > 0 or not step > 0:
        raise ValueError("horizon and step must be positive")
    n = math.ceil(horizon / step - 1e-9)
    return [min(k * step, horizon) for k in range(1, n)] + [horizon]


def forecast_states(
    s: FilterState, horizon: float, step: float = DEFAULT_STEP_S, alpha_v: float = 1.0, cfg: NoiseConfig | None = None
) -> list[FilterState]:
    cfg = cfg or NoiseConfig()
    out = []
    cur, prev_off = s, 0.0
    for off in forecast_grid(horizon, step):
        cur = kf_predict(cur, off - prev_off, alpha_v, cfg)
        cur = replace(cur, t=s.t + int(round(off * 1e6)))
        out.append(cur)
        prev_off = off
    return out


def forecast(
    s: FilterState, horizon: float, step: float = DEFAULT_STEP_S, alpha_v: float = 1.0, cfg: NoiseConfig | None = None
) -> Trajectory:
    """Open-loop prediction; the input state is not modified."""
    states = forecast_states(s, horizon, step, alpha_v, cfg)
    return Trajectory(np.array([st.t for st in states]), np.array([st.x[:2] for st in states]))


# ---------------------------------------------------------------------------
# RPM -> alpha_v


class ModulationSchedule:
    """Maps an RPM series to ``(r, r_dot, alpha_v)`` looked up by time.

    Invalid samples hold the last valid ``r``; before any valid sample
    ``r = 0.5`` and ``r_dot = 0``.
    """

    def __init__(self, series: Sequence[RpmEstimate], cfg: ModulationConfig | None = None):
        cfg = cfg or ModulationConfig()
        self.cfg = cfg
        self.times: list[int] = []
        self.values: list[RpmModulation] = []
        r_prev: float | None = None
        t_prev: int | None = None
        for e in sorted(series, key=lambda e: e.t):
            if e.valid and e.rpm is not None:
                r = normalize_rpm(e.rpm, cfg.rpm_lo, cfg.rpm_hi)
            else:
                r = r_prev if r_prev is not None else FALLBACK_R
            if r_prev is None or t_prev is None or e.t <= t_prev:
                rd = 0.0
            else:
                rd = compute_r_dot(r, r_prev, (e.t - t_prev) / 1e6, cfg.rdot_scale)
            if e.valid or r_prev is not None:
                r_prev = r
            t_prev = e.t
            self.times.append(e.t)
            self.values.append(RpmModulation.from_levels(r, rd))

    def at(self, t: int) -> RpmModulation:
        i = bisect.bisect_right(self.times, t) - 1
        if i < 0:
            return RpmModulation.from_levels(FALLBACK_R, 0.0)
        return self.values[i]


# ---------------------------------------------------------------------------
# forecaster


@dataclass(frozen=True)
class ForecasterConfig:
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    modulation: ModulationConfig = field(default_factory=ModulationConfig)
    horizons: tuple[float, ...] = DEFAULT_HORIZONS
    step_s: float = DEFAULT_STEP_S
    init_p: tuple[float, float, float, float] = INIT_P_DIAG


@dataclass(frozen=True)
class Forecast:
    t_emit: int
    horizon_s: float
    trajectory: Trajectory
    alpha_v: float = 1.0


def emission_allowed(t: int, t_end: int | None, horizons: Sequence[float]) -> bool:
    return t_end is None or t + int(round(max(horizons) * 1e6)) <= t_end


def run_forecaster(
    boxes: Sequence[BoundingBoxObservation],
    rpm_series: Sequence[RpmEstimate] | None,
    cfg: ForecasterConfig | None = None,
    *,
    vanilla: bool = False,
    t_end: int | None = None,
    emit_from: int = 2,
) -> list[Forecast]:
    """Filter a box track and emit forecasts at every horizon.

    The filter starts from the measurement formed by the first two boxes.
    From box ``emit_from`` on, each box is predicted to, updated with, and
    forecast from, provided ``max(horizons)`` of track remains before
    ``t_end`` (default: last box time). ``vanilla`` pins ``alpha_v`` to 1.
    """
    cfg = cfg or ForecasterConfig()
    if len(boxes) < 2:
        raise ValueError(f"need at least 2 observations, got {len(boxes)}")
    if t_end is None:
        t_end = boxes[-1].t
    schedule = None if vanilla else ModulationSchedule(rpm_series or [], cfg.modulation)
    state = initial_state(measurement_from_boxes(boxes[1], boxes[0]), cfg.init_p)
    out: list[Forecast] = []
    for i in range(2, len(boxes)):
        m = measurement_from_boxes(boxes[i], boxes[i - 1])
        alpha = 1.0 if schedule is None else schedule.at(m.t).alpha_v
        state = kf_predict(state, (m.t - state.t) / 1e6, alpha, cfg.noise)
        state = kf_update(state, m, cfg.noise)
        if i >= emit_from and emission_allowed(m.t, t_end, cfg.horizons):
            for h in cfg.horizons:
                out.append(Forecast(m.t, h, forecast(state, h, cfg.step_s, alpha, cfg.noise), alpha))
    return out


def write_forecast_csv(forecasts: Iterable[Forecast]) -> bytes:
    buf = io.StringIO()
    buf.write(FORECAST_CSV_HEADER + "\n")
    for f in forecasts:
        for t, x, y in f.trajectory:
            buf.write(f"{f.t_emit},{f.horizon_s:g},{t},{x:.6f},{y:.6f}\n")
    return buf.getvalue().encode("utf-8")


def parse_forecast_csv(data: bytes) -> list[Forecast]:
    lines = data.decode("utf-8").split("\n")
    if not lines or lines[0].strip() != FORECAST_CSV_HEADER:
        raise ValueError(f"expected header {FORECAST_CSV_HEADER!r}")
    groups: dict[tuple[int, float], list[tuple[int, float, float]]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.strip().split(",")
        if len(parts) != 5:
            raise ValueError(f"line {lineno}: expected 5 fields")
        key = (int(parts[0]), float(parts[1]))
        groups.setdefault(key, []).append((int(parts[2]), float(parts[3]), float(parts[4])))
    return [Forecast(t, h, Trajectory.from_points(pts)) for (t, h), pts in groups.items()]
