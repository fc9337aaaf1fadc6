import json
import subprocess
import sys

import numpy as np
import pytest

from evrpm import cli
from evrpm.events import parse_annotations, parse_event_csv
from evrpm.kalman import parse_forecast_csv, run_forecaster, write_forecast_csv
from evrpm.rpm import parse_rpm_csv
from evrpm.synth import oracle_rpm


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def hover(tmp_path_factory):
    out = tmp_path_factory.mktemp("hover")
    assert cli.main(["simulate", "--config", "hover_6000rpm", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def straight(tmp_path_factory):
    d = tmp_path_factory.mktemp("straight")
    spec = d / "line.cfg"
    spec.write_text(
        "duration_s = 3\nmotion.kind = constant_velocity\nmotion.start_x = 300\nmotion.vx = 45\nmotion.vy = -15\n"
    )
    assert cli.main(["simulate", "--config", str(spec), "--out", str(d / "sim")]) == 0
    return d / "sim"


# ---------------------------------------------------------------- simulate


def test_simulate_hover_oracle(hover):
    events = parse_event_csv((hover / "events.csv").read_bytes())
    assert oracle_rpm(events, 2) == pytest.approx(6000, rel=0.01)
    manifest = json.loads((hover / "manifest.json").read_text())
    assert set(manifest["files"]) == {"events.csv", "annotations.csv", "ground_truth.csv", "rpm_truth.csv"}
    assert len(manifest["config_hash"]) == 64
    assert str(hover) not in (hover / "manifest.json").read_text()


def test_simulate_manifest_deterministic(tmp_path, capsys):
    assert run("simulate", "--config", "hover_6000rpm", "--out", tmp_path / "a", "--seed", 3) == 0
    first = capsys.readouterr().out
    assert run("simulate", "--config", "hover_6000rpm", "--out", tmp_path / "b", "--seed", 3) == 0
    assert capsys.readouterr().out == first
    assert run("simulate", "--config", "hover_6000rpm", "--out", tmp_path / "c", "--seed", 4) == 0
    assert capsys.readouterr().out != first


def test_simulate_missing_scenario(tmp_path, capsys):
    assert run("simulate", "--config", tmp_path / "nope.cfg", "--out", tmp_path / "x") == 2
    assert "nope.cfg" in capsys.readouterr().err


def test_simulate_bad_override(tmp_path, capsys):
    assert run("simulate", "--config", "hover_6000rpm", "--out", tmp_path, "--propeller.rpm", "fast") == 2
    assert run("simulate", "--config", "hover_6000rpm", "--out", tmp_path, "--propeller.colour", "red") == 2


def test_simulate_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("simulate", "--config", "hover_6000rpm", "--out", blocker / "sub") == 2


def test_simulate_binary_and_autodetect(tmp_path):
    spec = tmp_path / "b.cfg"
    spec.write_text("format = binary\nduration_s = 0.5\npropeller.rpm = 9000\n")
    assert run("simulate", "--config", spec, "--out", tmp_path / "s") == 0
    assert (tmp_path / "s" / "events.bin").read_bytes()[:4] == b"EVT0"
    assert run("estimate-rpm", "--events", tmp_path / "s" / "events.bin", "--annotations",
               tmp_path / "s" / "annotations.csv", "--out", tmp_path / "r.csv") == 0
    series = parse_rpm_csv((tmp_path / "r.csv").read_bytes())
    assert all(abs(e.rpm - 9000) / 9000 < 0.03 for e in series[3:])


def test_no_temp_files_left(hover):
    assert not [p for p in hover.iterdir() if p.name.startswith(".")]


# ---------------------------------------------------------------- estimate-rpm


def test_estimate_rpm_matches_oracle(hover, tmp_path):
    out = tmp_path / "rpm.csv"
    assert run("estimate-rpm", "--events", hover / "events.csv", "--annotations", hover / "annotations.csv",
               "--out", out) == 0
    truth = oracle_rpm(parse_event_csv((hover / "events.csv").read_bytes()), 2)
    series = parse_rpm_csv(out.read_bytes())
    assert all(e.valid and abs(e.rpm - truth) / truth <= 0.02 for e in series[1:])


def test_estimate_rpm_no_propeller(hover, tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("t_us,x,y,p\n")
    out = tmp_path / "rpm.csv"
    assert run("estimate-rpm", "--events", empty, "--annotations", hover / "annotations.csv", "--out", out) == 0
    series = parse_rpm_csv(out.read_bytes())
    assert series and not any(e.valid for e in series)


def test_estimate_rpm_bad_track(hover, capsys):
    assert run("estimate-rpm", "--events", hover / "events.csv", "--annotations", hover / "annotations.csv",
               "--track", 7) == 2
    assert "track 7" in capsys.readouterr().err


def test_estimate_rpm_config_file(hover, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("rpm.blades = 1\n")
    out = tmp_path / "rpm.csv"
    assert run("estimate-rpm", "--config", cfg, "--events", hover / "events.csv", "--annotations",
               hover / "annotations.csv", "--out", out) == 0
    series = parse_rpm_csv(out.read_bytes())
    assert series[-1].rpm == pytest.approx(2 * 5940.594, rel=1e-6)
    assert run("estimate-rpm", "--config", tmp_path / "missing.cfg", "--events", hover / "events.csv") == 2


def test_stdout_output(hover, capsys):
    assert run("estimate-rpm", "--events", hover / "events.csv", "--annotations", hover / "annotations.csv") == 0
    assert capsys.readouterr().out.startswith("t_us,rpm,period_ms,support,valid\n")


# ---------------------------------------------------------------- forecast


def test_forecast_linear_exact_line(straight, tmp_path):
    out = tmp_path / "lin.csv"
    assert run("forecast", "--annotations", straight / "annotations.csv", "--method", "linear", "--out", out) == 0
    for f in parse_forecast_csv(out.read_bytes()):
        t = (f.trajectory.t - f.t_emit) / 1e6
        # exact-line data: every pose is the emission centre plus v * offset (offsets on the 1/30 s grid)
        c0 = np.array([300 + 45 * f.t_emit / 1e6, 360 - 15 * f.t_emit / 1e6])
        np.testing.assert_allclose(f.trajectory.xy, c0 + np.outer(t, [45, -15]), atol=1e-4)


def test_forecast_proposed_invalid_rpm_fallback(straight, tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("t_us,x,y,p\n")
    out = tmp_path / "p.csv"
    assert run("forecast", "--events", empty, "--annotations", straight / "annotations.csv",
               "--method", "proposed", "--out", out) == 0
    boxes = parse_annotations((straight / "annotations.csv").read_bytes())
    # all-invalid RPM: alpha_v is the r = 0.5 fallback (2) at every step
    expected = run_forecaster(boxes, [])
    assert {f.alpha_v for f in expected} == {2.0}
    assert out.read_bytes() == write_forecast_csv(expected)


def test_forecast_vanilla_differs_only_through_gain(straight, tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("t_us,x,y,p\n")
    a, b = tmp_path / "v.csv", tmp_path / "p.csv"
    ann = straight / "annotations.csv"
    assert run("forecast", "--annotations", ann, "--method", "vanilla_kf", "--out", a) == 0
    assert run("forecast", "--events", empty, "--annotations", ann, "--method", "proposed", "--out", b) == 0
    fa, fb = parse_forecast_csv(a.read_bytes()), parse_forecast_csv(b.read_bytes())
    assert [(f.t_emit, f.horizon_s) for f in fa] == [(f.t_emit, f.horizon_s) for f in fb]
    # on noiseless straight data both converge to the same line
    for x, y in zip(fa[-4:], fb[-4:]):
        np.testing.assert_allclose(x.trajectory.xy, y.trajectory.xy, atol=1e-3)


def test_forecast_proposed_needs_events(straight):
    assert run("forecast", "--annotations", straight / "annotations.csv", "--method", "proposed") == 2


# ---------------------------------------------------------------- evaluate


def gt_forecast_csv(gt_path, offset=(0.0, 0.0)):
    from evrpm.trajectory import parse_trajectory_csv

    gt = parse_trajectory_csv(gt_path.read_bytes())
    lines = ["t_emit_us,horizon_s,t_pred_us,cx,cy"]
    for i in range(0, len(gt) - 24):
        for h, n in ((0.4, 12), (0.8, 24)):
            for k in range(1, n + 1):
                t, (x, y) = gt.t[i + k], gt.xy[i + k]
                lines.append(f"{gt.t[i]},{h},{t},{x + offset[0]:.6f},{y + offset[1]:.6f}")
    return "\n".join(lines) + "\n"


def test_evaluate_perfect_and_offset(straight, tmp_path):
    gt = straight / "ground_truth.csv"
    perfect, shifted = tmp_path / "perfect.csv", tmp_path / "shifted.csv"
    perfect.write_text(gt_forecast_csv(gt))
    shifted.write_text(gt_forecast_csv(gt, (3.0, 4.0)))
    out = tmp_path / "eval"
    assert run("evaluate", "--forecast", f"proposed={perfect}", "--forecast", f"linear={shifted}",
               "--ground-truth", gt, "--out", out, "--svg") == 0
    res = (out / "results_proposed.csv").read_text().splitlines()[1:]
    assert all(float(r.split(",")[-1]) == 0 for r in res)
    agg = (out / "aggregate_linear.csv").read_text().splitlines()[1:]
    for row in agg:
        assert all(abs(float(v) - 5.0) < 1e-5 for v in row.split(",")[2:])
    comp = (out / "comparison.csv").read_text().splitlines()
    assert [c.split(",")[0] for c in comp[1:]] == ["Linear Extrapolation", "Kalman + RPM"]
    assert (out / "boxplot_ade_0.8.svg").read_text().startswith("<svg")


def test_evaluate_full_table_order(hover, tmp_path):
    ann, ev, gt = hover / "annotations.csv", hover / "events.csv", hover / "ground_truth.csv"
    paths = {}
    for m in ("proposed", "vanilla_kf", "linear"):
        paths[m] = tmp_path / f"{m}.csv"
        assert run("forecast", "--events", ev, "--annotations", ann, "--method", m, "--out", paths[m]) == 0
    out = tmp_path / "eval"
    args = [a for m, p in paths.items() for a in ("--forecast", f"seqA:{m}={p}")]
    assert run("evaluate", *args, "--ground-truth", f"seqA={gt}", "--out", out) == 0
    rows = (out / "comparison.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["Linear Extrapolation", "Kalman Filter", "Kalman + RPM"]


def test_evaluate_user_errors(straight, tmp_path):
    gt = straight / "ground_truth.csv"
    assert run("evaluate", "--forecast", "lstm=x.csv", "--ground-truth", gt, "--out", tmp_path) == 2
    assert run("evaluate", "--forecast", f"proposed={tmp_path / 'missing.csv'}", "--ground-truth", gt,
               "--out", tmp_path) == 2
    assert run("evaluate", "--forecast", "seqZ:linear=x.csv", "--ground-truth", gt, "--out", tmp_path) == 2
    assert run("evaluate", "--ground-truth", gt, "--out", tmp_path) == 2


# ---------------------------------------------------------------- exit codes, determinism


def test_usage_errors_exit_2(capsys):
    assert run("forecast", "--bogus.key", "1") == 2
    assert run("nonsense") == 2
    assert run("forecast", "--method", "lstm") == 2


def test_internal_error_exit_1(monkeypatch, hover, capsys):
    def boom(*a, **k):
        raise RuntimeError("boom")

    monkeypatch.setattr(cli, "estimate_rpm_stream", boom)
    assert run("estimate-rpm", "--events", hover / "events.csv", "--annotations", hover / "annotations.csv") == 1
    assert "internal error" in capsys.readouterr().err


def test_all_commands_byte_identical(tmp_path):
    def pipeline(d):
        assert run("simulate", "--config", "aggressive_maneuver", "--out", d, "--seed", 5, "--duration_s", 3) == 0
        files = {}
        for m in ("proposed", "vanilla_kf", "linear"):
            files[m] = d / f"{m}.csv"
            assert run("forecast", "--events", d / "events.bin", "--annotations", d / "annotations.csv",
                       "--method", m, "--out", files[m]) == 0
        assert run("estimate-rpm", "--events", d / "events.bin", "--annotations", d / "annotations.csv",
                   "--out", d / "rpm.csv") == 0
        assert run("evaluate", *[a for m, p in files.items() for a in ("--forecast", f"{m}={p}")],
                   "--ground-truth", d / "ground_truth.csv", "--out", d / "eval") == 0
        return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}

    a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    assert a.keys() == b.keys() and len(a) > 10
    for k in a:
        assert a[k] == b[k], k


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "evrpm.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("evrpm ")
