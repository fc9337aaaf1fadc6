import pytest

from evrpm.config import RUN_SCHEMA, ConfigError, RunConfig, canonical_text, config_hash, parse_kv
from evrpm.scenario import BUNDLED, SCENARIO_SCHEMA, Scenario, generate
from evrpm.synth import oracle_rpm


def test_parse_kv_comments_and_errors():
    assert parse_kv("# hi\n a = 1 \n\nb=x # tail\n") == {"a": "1", "b": "x"}
    with pytest.raises(ConfigError, match=":2:"):
        parse_kv("a=1\nnope\n")
    with pytest.raises(ConfigError):
        parse_kv("=3")


def test_run_config_defaults_and_types():
    cfg = RunConfig.from_mapping({})
    assert cfg.rpm.percentile == 70 and cfg.rpm.blades == 2 and cfg.rpm.window_us == 100_000
    assert cfg.forecaster.horizons == (0.4, 0.8)
    assert cfg.forecaster.noise.scale_scope == "full"
    cfg = RunConfig.from_mapping({"rpm.window_ms": "50", "forecast.horizons": "0.2,1.0", "geometry": "640x480"})
    assert cfg.rpm.window_us == 50_000 and cfg.forecaster.horizons == (0.2, 1.0) and cfg["geometry"] == (640, 480)


@pytest.mark.parametrize(
    "raw",
    [
        {"rpm.bogus": "1"},
        {"rpm.percentile": "abc"},
        {"rpm.percentile": "100"},
        {"noise.q_vx": "0"},
        {"noise.scale_scope": "half"},
        {"modulation.rpm_lo": "40000"},
        {"method": "lstm"},
        {"forecast.horizons": "0.4,-1"},
        {"geometry": "12x"},
    ],
)
def test_run_config_rejects(raw):
    with pytest.raises(ConfigError):
        RunConfig.from_mapping(raw)


def test_overrides_win(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("rpm.percentile = 60\nrpm.blades = 3\n")
    cfg = RunConfig.load(p, {"rpm.percentile": "80"})
    assert cfg.rpm.percentile == 80 and cfg.rpm.blades == 3


def test_hash_is_canonical():
    a = RunConfig.from_mapping({"rpm.percentile": "70"})
    b = RunConfig.from_mapping({})
    assert a.digest == b.digest == config_hash(b.values)
    assert RunConfig.from_mapping({"rpm.percentile": "71"}).digest != a.digest
    assert canonical_text({"b": 1, "a": (1, 2)}) == "a=1,2\nb=1\n"


def test_every_schema_key_has_a_default_type():
    for schema in (RUN_SCHEMA, SCENARIO_SCHEMA):
        for key, (conv, _default) in schema.items():
            assert callable(conv), key


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_scenarios_load(name):
    sc = Scenario.load(name)
    assert sc.name == name
    assert set(sc.values) == set(SCENARIO_SCHEMA)


def test_scenario_unknown_key_and_missing():
    with pytest.raises(ConfigError):
        Scenario.from_text("propeller.colour = red")
    with pytest.raises(FileNotFoundError):
        Scenario.load("no_such_scenario")


def test_hover_generation():
    sim = generate(Scenario.load("hover_6000rpm"))
    assert len(sim.annotations) == 60
    assert oracle_rpm(sim.events, 2) == pytest.approx(6000, rel=0.01)
    assert all(r == 6000 for _, r in sim.rpm_truth())


def test_generation_deterministic_and_seeded():
    sc = Scenario.from_text("duration_s=0.5\nmotion.kind=random_accel\nmotion.accel_std=80\nnoise.box_rate_per_kpx=200")
    a, b = generate(sc), generate(sc)
    assert a.events == b.events and a.annotations == b.annotations
    c = generate(sc.with_overrides(seed=1))
    assert c.annotations != a.annotations


def test_surge_profile_follows_bursts():
    sim = generate(Scenario.load("aggressive_maneuver"))
    assert sim.bursts
    for t, rpm in sim.rpm_truth():
        s = t / 1e6
        inside = any(b + 0.05 <= s <= b + d - 0.05 for b, d in sim.bursts)
        outside = all(s < b or s > b + d for b, d in sim.bursts)
        if inside:
            assert rpm == 18000
        elif outside:
            assert rpm == 6000
