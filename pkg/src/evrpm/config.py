"""Flat ``key=value`` configuration with dotted keys and a validated run config."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from .kalman import ForecasterConfig, ModulationConfig, NoiseConfig
from .rpm import RpmConfig

METHODS = ("proposed", "vanilla_kf", "linear")


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def load_kv(path: str | Path) -> dict[str, str]:
    p = Path(path)
    return parse_kv(p.read_text(encoding="utf-8"), str(p))


def _float_list(v: str) -> tuple[float, ...]:
    vals = tuple(float(s) for s in v.split(",") if s.strip())
    if not vals:
        raise ValueError("empty list")
    return vals


def _geometry(v: str) -> tuple[int, int]:
    parts = v.lower().split("x")
    if len(parts) != 2:
        raise ValueError("expected WIDTHxHEIGHT")
    w, h = (int(s) for s in parts)
    if w <= 0 or h <= 0:
        raise ValueError("geometry must be positive")
    return (w, h)


def _choice(*options: str) -> Callable[[str], str]:
    def conv(v: str) -> str:
        if v not in options:
            raise ValueError(f"expected one of {options}")
        return v

    return conv


def coerce(raw: Mapping[str, str], schema: Mapping[str, tuple[Callable[[str], Any], Any]]) -> dict[str, Any]:
    """Apply ``schema`` (key -> (converter, default)) to ``raw``; unknown keys are errors."""
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    out = {}
    for key, (conv, default) in schema.items():
        if key in raw:
            try:
                out[key] = conv(raw[key])
            except ValueError as exc:
                raise ConfigError(f"{key}: invalid value {raw[key]!r} ({exc})") from None
        else:
            out[key] = default
    return out


def canonical_text(values: Mapping[str, Any]) -> str:
    def fmt(v: Any) -> str:
        if isinstance(v, tuple):
            return ",".join(fmt(x) for x in v)
        return "" if v is None else str(v)

    return "".join(f"{k}={fmt(values[k])}\n" for k in sorted(values))


def config_hash(values: Mapping[str, Any]) -> str:
    return hashlib.sha256(canonical_text(values).encode("utf-8")).hexdigest()


RUN_SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "rpm.percentile": (float, 70.0),
    "rpm.blades": (int, 2),
    "rpm.window_ms": (float, 100.0),
    "rpm.min_support": (int, 5),
    "noise.q_cx": (float, 1.0),
    "noise.q_cy": (float, 1.0),
    "noise.q_vx": (float, 10.0),
    "noise.q_vy": (float, 10.0),
    "noise.r_pos": (float, 1.0),
    "noise.scale_scope": (_choice("full", "velocity_only"), "full"),
    "modulation.rpm_lo": (float, 2300.0),
    "modulation.rpm_hi": (float, 30000.0),
    "modulation.rdot_scale": (float, 2.0),
    "forecast.horizons": (_float_list, (0.4, 0.8)),
    "forecast.step_s": (float, 1.0 / 30.0),
    "geometry": (_geometry, (1280, 720)),
    "method": (_choice(*METHODS), "proposed"),
    "track": (int, 0),
    "seed": (int, 0),
    "events": (str, None),
    "annotations": (str, None),
    "out": (str, None),
}


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, Any]
    rpm: RpmConfig
    forecaster: ForecasterConfig

    @classmethod
    def from_mapping(cls, raw: Mapping[str, str]) -> "RunConfig":
        v = coerce(raw, RUN_SCHEMA)
        try:
            rpm = RpmConfig(
                percentile=v["rpm.percentile"],
                blades=v["rpm.blades"],
                window_us=int(round(v["rpm.window_ms"] * 1000)),
                min_support=v["rpm.min_support"],
            )
            noise = NoiseConfig(
                q_cx=v["noise.q_cx"],
                q_cy=v["noise.q_cy"],
                q_vx=v["noise.q_vx"],
                q_vy=v["noise.q_vy"],
                r_pos=v["noise.r_pos"],
                scale_scope=v["noise.scale_scope"],
            )
            mod = ModulationConfig(v["modulation.rpm_lo"], v["modulation.rpm_hi"], v["modulation.rdot_scale"])
            if any(h <= 0 for h in v["forecast.horizons"]) or v["forecast.step_s"] <= 0:
                raise ValueError("horizons and step must be positive")
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        fc = ForecasterConfig(noise=noise, modulation=mod, horizons=v["forecast.horizons"], step_s=v["forecast.step_s"])
        return cls(v, rpm, fc)

    @classmethod
    def load(cls, path: str | Path | None, overrides: Mapping[str, str] | None = None) -> "RunConfig":
        raw = load_kv(path) if path else {}
        raw.update(overrides or {})
        return cls.from_mapping(raw)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def digest(self) -> str:
        return config_hash(self.values)
