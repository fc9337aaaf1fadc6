"""ADE/FDE on centre points, per-sequence scoring and boxplot statistics."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .kalman import DEFAULT_STEP_S, Forecast
from .trajectory import Trajectory

METRICS = ("ade", "fde")
RESULTS_CSV_HEADER = "sequence_id,metric,horizon_s,value_px"
AGGREGATE_CSV_HEADER = "metric,horizon_s,mean,median,p5,p25,p75,p95"

# comparison row order (baselines first) and display label per method key
TABLE_ORDER = (
    ("linear", "Linear Extrapolation"),
    ("vanilla_kf", "Kalman Filter"),
    ("proposed", "Kalman + RPM"),
)

HALF_STEP_US = int(round(DEFAULT_STEP_S * 1e6 / 2))


def _check_grids(pred: Trajectory, gt: Trajectory, tol_us: int) -> None:
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("empty trajectory")
    if len(pred) != len(gt):
        raise ValueError(f"grid length mismatch: {len(pred)} predicted vs {len(gt)} ground-truth points")
    off = np.abs(pred.t - gt.t)
    if np.any(off > tol_us):
        raise ValueError(f"grid mismatch of {int(off.max())} us exceeds tolerance {tol_us} us")


def ade(pred: Trajectory, gt: Trajectory, tol_us: int = 0) -> float:
    _check_grids(pred, gt, tol_us)
    return float(np.mean(np.linalg.norm(pred.xy - gt.xy, axis=1)))


def fde(pred: Trajectory, gt: Trajectory, tol_us: int = 0) -> float:
    _check_grids(pred, gt, tol_us)
    return float(np.linalg.norm(pred.xy[-1] - gt.xy[-1]))


@dataclass
class SequenceResult:
    sequence_id: str
    # (metric, horizon) -> per-emission errors in px
    per_emission: dict[tuple[str, float], np.ndarray] = field(default_factory=dict)

    def score(self, metric: str, horizon: float) -> float:
        return float(np.mean(self.per_emission[(metric, horizon)]))

    def count(self, horizon: float) -> int:
        return int(self.per_emission[("ade", horizon)].shape[0])

    @property
    def keys(self) -> list[tuple[str, float]]:
        return sorted(self.per_emission)


@dataclass(frozen=True)
class AggregateStats:
    mean: float
    median: float
    p5: float
    p25: float
    p75: float
    p95: float
    pooled_mean: float = float("nan")
    n_sequences: int = 0


def common_emissions(forecast_sets: Iterable[Sequence[Forecast]]) -> set[int]:
    """Emission times present in every method's output."""
    sets = [{f.t_emit for f in fs} for fs in forecast_sets]
    return set.intersection(*sets) if sets else set()


def evaluate_sequence(
    forecasts: Sequence[Forecast],
    ground_truth: Trajectory,
    horizons: Sequence[float],
    *,
    sequence_id: str = "seq0",
    tol_us: int = HALF_STEP_US,
    emissions: set[int] | None = None,
) -> SequenceResult:
    """Per-emission ADE/FDE; emissions whose horizon runs past the ground truth are skipped."""
    res = SequenceResult(sequence_id)
    t_last = int(ground_truth.t[-1]) if len(ground_truth) else -1
    for h in horizons:
        ades, fdes = [], []
        for f in forecasts:
            if abs(f.horizon_s - h) > 1e-9:
                continue
            if emissions is not None and f.t_emit not in emissions:
                continue
            if f.t_emit + int(round(h * 1e6)) > t_last + tol_us:
                continue
            gt = ground_truth.align(f.trajectory.t, tol_us)
            ades.append(ade(f.trajectory, gt))
            fdes.append(fde(f.trajectory, gt))
        if not ades:
            raise ValueError(f"sequence {sequence_id}: no valid emission windows at horizon {h}s")
        res.per_emission[("ade", h)] = np.array(ades)
        res.per_emission[("fde", h)] = np.array(fdes)
    return res


def aggregate(results: Sequence[SequenceResult]) -> dict[tuple[str, float], AggregateStats]:
    """Statistics over per-sequence scores; percentiles interpolate linearly between order statistics."""
    if not results:
        raise ValueError("no sequence results to aggregate")
    out = {}
    for key in results[0].keys:
        scores = np.array([r.score(*key) for r in results])
        pooled = np.concatenate([r.per_emission[key] for r in results])
        p5, p25, p50, p75, p95 = np.percentile(scores, [5, 25, 50, 75, 95])
        out[key] = AggregateStats(
            mean=float(scores.mean()),
            median=float(p50),
            p5=float(p5),
            p25=float(p25),
            p75=float(p75),
            p95=float(p95),
            pooled_mean=float(pooled.mean()),
            n_sequences=len(results),
        )
    return out


def write_results_csv(results: Iterable[SequenceResult]) -> bytes:
    buf = io.StringIO()
    buf.write(RESULTS_CSV_HEADER + "\n")
    for r in results:
        for metric, h in r.keys:
            buf.write(f"{r.sequence_id},{metric},{h:g},{r.score(metric, h):.6f}\n")
    return buf.getvalue().encode("utf-8")


def write_aggregate_csv(stats: Mapping[tuple[str, float], AggregateStats]) -> bytes:
    buf = io.StringIO()
    buf.write(AGGREGATE_CSV_HEADER + "\n")
    for (metric, h), s in sorted(stats.items()):
        buf.write(
            f"{metric},{h:g},{s.mean:.6f},{s.median:.6f},{s.p5:.6f},{s.p25:.6f},{s.p75:.6f},{s.p95:.6f}\n"
        )
    return buf.getvalue().encode("utf-8")


def write_comparison_csv(
    stats_by_method: Mapping[str, Mapping[tuple[str, float], AggregateStats]], horizons: Sequence[float]
) -> bytes:
    """Three-method table, baselines first; values are means over sequences."""
    cols = [f"{m}_{h:g}" for m in METRICS for h in horizons]
    buf = io.StringIO()
    buf.write("method," + ",".join(cols) + "\n")
    for key, label in TABLE_ORDER:
        if key not in stats_by_method:
            continue
        st = stats_by_method[key]
        vals = [f"{st[(m, h)].mean:.6f}" for m in METRICS for h in horizons]
        buf.write(label + "," + ",".join(vals) + "\n")
    return buf.getvalue().encode("utf-8")


def boxplot_svg(
    stats_by_method: Mapping[str, Mapping[tuple[str, float], AggregateStats]],
    metric: str,
    horizon: float,
    width: int = 480,
    height: int = 320,
) -> str:
    """Geometry-only boxplot: IQR box, 5th-95th whiskers, median line per method."""
    methods = [k for k, _ in TABLE_ORDER if k in stats_by_method]
    stats = [stats_by_method[m][(metric, horizon)] for m in methods]
    top = max((s.p95 for s in stats), default=1.0) or 1.0
    pad = 30
    scale = (height - 2 * pad) / top

    def y(v: float) -> float:
        return height - pad - v * scale

    slot = (width - 2 * pad) / max(len(methods), 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    for i, (m, s) in enumerate(zip(methods, stats)):
        cx = pad + slot * (i + 0.5)
        half = slot * 0.25
        parts.append(f'<line x1="{cx:.1f}" y1="{y(s.p5):.1f}" x2="{cx:.1f}" y2="{y(s.p95):.1f}" stroke="black"/>')
        parts.append(
            f'<rect x="{cx - half:.1f}" y="{y(s.p75):.1f}" width="{2 * half:.1f}" '
            f'height="{max(y(s.p25) - y(s.p75), 0):.1f}" fill="white" stroke="black"/>'
        )
        parts.append(f'<line x1="{cx - half:.1f}" y1="{y(s.median):.1f}" x2="{cx + half:.1f}" y2="{y(s.median):.1f}" stroke="orange"/>')
        parts.append(f'<text x="{cx:.1f}" y="{height - 8}" text-anchor="middle" font-size="10">{m}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
