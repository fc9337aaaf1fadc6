"""Scenario files: ``key=value`` descriptions of a synthetic recording.

Keys (defaults in ``SCENARIO_SCHEMA``): ``geometry`` (``WxH``), ``seed``,
``duration_s``, ``fps``, ``format`` (``csv``/``binary``), ``track_id``,
``box.*``, ``propeller.*``, ``motion.*`` and ``noise.*``. The propeller
rides with the box centre at ``propeller.offset_*``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .config import ConfigError, _choice, _geometry, coerce, config_hash, load_kv, parse_kv
from .events import BoundingBoxObservation, EventStream, SensorGeometry
from .synth import (
    MOTION_KINDS,
    MotionProfile,
    PropellerSpec,
    RpmProfile,
    add_box_noise,
    add_noise_events,
    simulate_propeller_events,
    simulate_track,
    surge_profile,
)
from .trajectory import Trajectory


SCENARIO_SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "geometry": (_geometry, (1280, 720)),
    "seed": (int, 0),
    "duration_s": (float, 2.0),
    "fps": (float, 30.0),
    "format": (_choice("csv", "binary"), "csv"),
    "track_id": (int, 0),
    "box.w": (float, 60.0),
    "box.h": (float, 60.0),
    "box.noise_px": (float, 0.0),
    "propeller.blade_length_px": (float, 6.0),
    "propeller.blades": (int, 2),
    "propeller.width_rad": (float, 0.0),
    "propeller.hub_radius_px": (float, 1.0),
    "propeller.offset_x": (float, 0.3),
    "propeller.offset_y": (float, 0.2),
    "propeller.profile": (_choice("constant", "step", "surge"), "constant"),
    "propeller.rpm": (float, 6000.0),
    "propeller.step_time_s": (float, 1.0),
    "propeller.step_rpm": (float, 12000.0),
    "propeller.surge_rpm": (float, 18000.0),
    "propeller.ramp_s": (float, 0.05),
    "motion.kind": (_choice(*MOTION_KINDS), "constant_velocity"),
    "motion.start_x": (float, 640.0),
    "motion.start_y": (float, 360.0),
    "motion.vx": (float, 0.0),
    "motion.vy": (float, 0.0),
    "motion.radius": (float, 100.0),
    "motion.freq_hz": (float, 0.25),
    "motion.amp_x": (float, 50.0),
    "motion.amp_y": (float, 0.0),
    "motion.accel_std": (float, 0.0),
    "motion.accel_hold_s": (float, 0.1),
    "motion.burst_rate_hz": (float, 0.0),
    "motion.burst_duration_s": (float, 0.5),
    "motion.burst_accel": (float, 0.0),
    "motion.damping": (float, 0.0),
    "motion.spring": (float, 0.0),
    "noise.box_rate_per_kpx": (float, 0.0),
    "noise.sensor_rate_per_kpx": (float, 0.0),
    "noise.jitter_us": (int, 0),
}

BUNDLED = ("hover_6000rpm", "aggressive_maneuver")


@dataclass(frozen=True)
class Scenario:
    name: str
    values: Mapping[str, Any]

    @classmethod
    def from_mapping(cls, raw: Mapping[str, str], name: str = "scenario") -> "Scenario":
        return cls(name, coerce(raw, SCENARIO_SCHEMA))

    @classmethod
    def from_text(cls, text: str, name: str = "scenario") -> "Scenario":
        return cls.from_mapping(parse_kv(text, name), name)

    @classmethod
    def load(cls, ref: str | Path, overrides: Mapping[str, str] | None = None) -> "Scenario":
        """A scenario file path, or the name of a bundled scenario."""
        p = Path(ref)
        if p.is_file():
            raw, name = load_kv(p), p.stem
        elif str(ref) in BUNDLED:
            text = resources.files("evrpm.scenarios").joinpath(f"{ref}.cfg").read_text(encoding="utf-8")
            raw, name = parse_kv(text, str(ref)), str(ref)
        else:
            raise FileNotFoundError(f"scenario not found: {ref}")
        raw.update(overrides or {})
        return cls.from_mapping(raw, name)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def with_overrides(self, **kv: Any) -> "Scenario":
        vals = dict(self.values)
        for k, v in kv.items():
            key = k.replace("__", ".")
            if key not in vals:
                raise ConfigError(f"unknown scenario key {key}")
            vals[key] = v
        return Scenario(self.name, vals)

    @property
    def digest(self) -> str:
        return config_hash(self.values)

    @property
    def geometry(self) -> SensorGeometry:
        return SensorGeometry(*self["geometry"])

    def motion(self) -> MotionProfile:
        v = self.values
        return MotionProfile(
            kind=v["motion.kind"],
            start=(v["motion.start_x"], v["motion.start_y"]),
            velocity=(v["motion.vx"], v["motion.vy"]),
            radius=v["motion.radius"],
            freq_hz=v["motion.freq_hz"],
            amplitude=(v["motion.amp_x"], v["motion.amp_y"]),
            accel_std=v["motion.accel_std"],
            accel_hold_s=v["motion.accel_hold_s"],
            burst_rate_hz=v["motion.burst_rate_hz"],
            burst_duration_s=v["motion.burst_duration_s"],
            burst_accel=v["motion.burst_accel"],
            damping=v["motion.damping"],
            spring=v["motion.spring"],
            seed=v["seed"],
        )


@dataclass
class SimulationOutput:
    events: EventStream
    annotations: list[BoundingBoxObservation]
    ground_truth: Trajectory
    rpm_profile: RpmProfile
    clamped: int = 0
    bursts: list[tuple[float, float]] = field(default_factory=list)  # (start_s, duration_s)

    def rpm_truth(self) -> list[tuple[int, float]]:
        return [(b.t, self.rpm_profile.rpm_at(b.t / 1e6)) for b in self.annotations]


def generate(sc: Scenario) -> SimulationOutput:
    v = sc.values
    seed = v["seed"]
    geometry = sc.geometry
    track = simulate_track(
        sc.motion(),
        v["duration_s"],
        v["fps"],
        (v["box.w"], v["box.h"]),
        geometry,
        track_id=v["track_id"],
        box_noise_px=v["box.noise_px"],
        noise_seed=seed + 1,
    )
    kind = v["propeller.profile"]
    if kind == "constant":
        profile = RpmProfile.constant(v["propeller.rpm"])
    elif kind == "step":
        profile = RpmProfile.step(v["propeller.step_time_s"], v["propeller.rpm"], v["propeller.step_rpm"])
    else:
        profile = surge_profile(track.path.bursts, v["propeller.rpm"], v["propeller.surge_rpm"], v["propeller.ramp_s"])

    ox, oy = v["propeller.offset_x"], v["propeller.offset_y"]
    x0, y0 = track.path(0.0)
    spec = PropellerSpec(
        center=(float(x0) + ox, float(y0) + oy),
        blade_length=v["propeller.blade_length_px"],
        blades=v["propeller.blades"],
        profile=profile,
        blade_width_rad=v["propeller.width_rad"],
        hub_radius=v["propeller.hub_radius_px"],
    )

    def prop_path(t):
        cx, cy = track.path(t)
        return np.asarray(cx) + ox, np.asarray(cy) + oy

    events = simulate_propeller_events(
        spec,
        v["duration_s"],
        geometry,
        jitter_us=v["noise.jitter_us"],
        seed=seed + 2,
        center_path=None if v["motion.kind"] == "constant_velocity" and v["motion.vx"] == 0 and v["motion.vy"] == 0 else prop_path,
    )
    events = add_box_noise(events, track.annotations, v["noise.box_rate_per_kpx"], seed + 3)
    if v["noise.sensor_rate_per_kpx"] > 0:
        events = add_noise_events(
            events, v["noise.sensor_rate_per_kpx"], seed + 4, t_range=(0, int(round(v["duration_s"] * 1e6)))
        )
    return SimulationOutput(events, track.annotations, track.ground_truth, profile, track.clamped, track.path.bursts)
