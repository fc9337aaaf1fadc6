"""Classical comparison forecasters: 4-pose linear extrapolation and the fixed-noise Kalman filter."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .events import BoundingBoxObservation
from .kalman import (
    DEFAULT_STEP_S,
    Forecast,
    ForecasterConfig,
    emission_allowed,
    forecast_grid,
    run_forecaster,
)
from .trajectory import Trajectory

N_POSES = 4


def mean_velocity(poses: Sequence[tuple[int, float, float]]) -> tuple[float, float]:
    """Mean of the successive difference quotients (px/s); ``poses`` are ``(t_us, cx, cy)``."""
    t = np.array([p[0] for p in poses], dtype=np.float64) / 1e6
    xy = np.array([(p[1], p[2]) for p in poses], dtype=np.float64)
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise ValueError("poses need strictly increasing timestamps")
    v = np.diff(xy, axis=0) / dt[:, None]
    vx, vy = v.mean(axis=0)
    return float(vx), float(vy)


def linear_extrapolate(
    last4: Sequence[tuple[int, float, float]], horizon: float, step: float = DEFAULT_STEP_S
) -> Trajectory:
    """Constant-velocity forecast from the newest pose using the 4-pose mean velocity."""
    if len(last4) != N_POSES:
        raise ValueError(f"expected {N_POSES} poses, got {len(last4)}")
    vx, vy = mean_velocity(last4)
    t0, x0, y0 = last4[-1]
    offs = forecast_grid(horizon, step)
    times = [t0 + int(round(o * 1e6)) for o in offs]
    pts = [(x0 + vx * o, y0 + vy * o) for o in offs]
    return Trajectory(np.array(times), np.array(pts))


def run_linear(
    boxes: Sequence[BoundingBoxObservation],
    cfg: ForecasterConfig | None = None,
    *,
    t_end: int | None = None,
    emit_from: int = N_POSES - 1,
) -> list[Forecast]:
    """Linear-extrapolation forecasts from every box with three predecessors."""
    cfg = cfg or ForecasterConfig()
    if len(boxes) < N_POSES:
        raise ValueError(f"need at least {N_POSES} observations, got {len(boxes)}")
    if t_end is None:
        t_end = boxes[-1].t
    poses = [(b.t, *b.center) for b in boxes]
    out = []
    for i in range(max(emit_from, N_POSES - 1), len(boxes)):
        if not emission_allowed(boxes[i].t, t_end, cfg.horizons):
            continue
        window = poses[i - N_POSES + 1:i + 1]
        for h in cfg.horizons:
            out.append(Forecast(boxes[i].t, h, linear_extrapolate(window, h, cfg.step_s)))
    return out


def vanilla_kalman(
    boxes: Sequence[BoundingBoxObservation],
    cfg: ForecasterConfig | None = None,
    *,
    t_end: int | None = None,
    emit_from: int = 2,
) -> list[Forecast]:
    """The proposed forecaster with ``alpha_v`` fixed at 1; no RPM input."""
    return run_forecaster(boxes, None, cfg, vanilla=True, t_end=t_end, emit_from=emit_from)
