from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

GT_CSV_HEADER = "t_us,cx,cy"


@dataclass(frozen=True)
class Trajectory:
    """Timestamped centre points; ``t`` in microseconds, strictly increasing."""

    t: np.ndarray
    xy: np.ndarray  # (n, 2)

    def __post_init__(self) -> None:
        t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        if t.shape[0] != xy.shape[0]:
            raise ValueError(f"{t.shape[0]} timestamps for {xy.shape[0]} points")
        if t.shape[0] > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "xy", xy)

    @classmethod
    def from_points(cls, points) -> "Trajectory":
        pts = list(points)
        if not pts:
            return cls(np.empty(0, np.int64), np.empty((0, 2)))
        t, x, y = zip(*pts)
        return cls(np.array(t), np.column_stack([x, y]))

    def __len__(self) -> int:
        return self.t.shape[0]

    def __iter__(self):
        for t, (x, y) in zip(self.t.tolist(), self.xy.tolist()):
            yield (t, x, y)

    @property
    def final(self) -> tuple[int, float, float]:
        return (int(self.t[-1]), float(self.xy[-1, 0]), float(self.xy[-1, 1]))

    def at(self, t_us: int, tol_us: int) -> np.ndarray:
        """Point whose timestamp is nearest ``t_us``; ``KeyError`` beyond ``tol_us``."""
        i = int(np.searchsorted(self.t, t_us))
        best = None
        for j in (i - 1, i):
            if 0 <= j < len(self) and (best is None or abs(self.t[j] - t_us) < abs(self.t[best] - t_us)):
                best = j
        if best is None or abs(int(self.t[best]) - t_us) > tol_us:
            raise KeyError(f"no ground-truth sample within {tol_us} us of t={t_us}")
        return self.xy[best]

    def align(self, times: np.ndarray, tol_us: int) -> "Trajectory":
        """Resample onto ``times`` by nearest sample within ``tol_us``."""
        times = np.asarray(times, dtype=np.int64)
        if len(self) == 0:
            raise KeyError("empty ground truth")
        i = np.clip(np.searchsorted(self.t, times), 1, max(len(self) - 1, 1))
        lo = np.maximum(i - 1, 0)
        hi = np.minimum(i, len(self) - 1)
        pick = np.where(np.abs(self.t[hi] - times) < np.abs(self.t[lo] - times), hi, lo)
        off = np.abs(self.t[pick] - times)
        if np.any(off > tol_us):
            bad = int(times[np.argmax(off)])
            raise KeyError(f"no ground-truth sample within {tol_us} us of t={bad}")
        return Trajectory(times, self.xy[pick])


def write_trajectory_csv(traj: Trajectory) -> bytes:
    buf = io.StringIO()
    buf.write(GT_CSV_HEADER + "\n")
    for t, x, y in traj:
        buf.write(f"{t},{x:.6f},{y:.6f}\n")
    return buf.getvalue().encode("utf-8")


def parse_trajectory_csv(data: bytes) -> Trajectory:
    lines = data.decode("utf-8").split("\n")
    if not lines or lines[0].strip() != GT_CSV_HEADER:
        raise ValueError(f"expected header {GT_CSV_HEADER!r}")
    pts = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.strip().split(",")
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 3 fields")
        pts.append((int(parts[0]), float(parts[1]), float(parts[2])))
    return Trajectory.from_points(pts)
