"""Multi-seed comparison of the three forecasters on a synthetic scenario."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .baselines import run_linear, vanilla_kalman
from .config import METHODS
from .evaluation import SequenceResult, aggregate, common_emissions, evaluate_sequence
from .kalman import Forecast, ForecasterConfig, run_forecaster
from .rpm import RpmConfig, RpmEstimate, estimate_rpm_stream
from .scenario import Scenario, SimulationOutput, generate


@dataclass
class SeedRun:
    seed: int
    sim: SimulationOutput
    rpm: list[RpmEstimate]
    forecasts: dict[str, list[Forecast]]
    results: dict[str, SequenceResult]


def run_methods(
    sim: SimulationOutput, rpm_cfg: RpmConfig | None = None, cfg: ForecasterConfig | None = None
) -> tuple[list[RpmEstimate], dict[str, list[Forecast]]]:
    cfg = cfg or ForecasterConfig()
    boxes = sim.annotations
    rpm = estimate_rpm_stream(sim.events, boxes, rpm_cfg)
    forecasts = {
        "proposed": run_forecaster(boxes, rpm, cfg),
        "vanilla_kf": vanilla_kalman(boxes, cfg),
        "linear": run_linear(boxes, cfg),
    }
    return rpm, forecasts


def run_seed(
    seed: int,
    scenario: Scenario | str = "aggressive_maneuver",
    rpm_cfg: RpmConfig | None = None,
    cfg: ForecasterConfig | None = None,
) -> SeedRun:
    """Simulate one seed and score every method on the emissions they share."""
    sc = Scenario.load(scenario) if isinstance(scenario, str) else scenario
    sc = sc.with_overrides(seed=seed)
    cfg = cfg or ForecasterConfig()
    sim = generate(sc)
    rpm, forecasts = run_methods(sim, rpm_cfg, cfg)
    shared = common_emissions(forecasts.values())
    results = {
        m: evaluate_sequence(fs, sim.ground_truth, cfg.horizons, sequence_id=f"seed{seed}", emissions=shared)
        for m, fs in forecasts.items()
    }
    return SeedRun(seed, sim, rpm, forecasts, results)


def run_benchmark(
    seeds: Sequence[int],
    scenario: Scenario | str = "aggressive_maneuver",
    rpm_cfg: RpmConfig | None = None,
    cfg: ForecasterConfig | None = None,
):
    """Per-method lists of per-seed results plus their aggregates."""
    per_method: dict[str, list[SequenceResult]] = {m: [] for m in METHODS}
    for s in seeds:
        run = run_seed(s, scenario, rpm_cfg, cfg)
        for m in METHODS:
            per_method[m].append(run.results[m])
    return per_method, {m: aggregate(r) for m, r in per_method.items()}
