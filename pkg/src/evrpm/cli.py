"""Command-line entry point: ``evrpm {simulate,estimate-rpm,forecast,evaluate}``.

Any config key may also be given as a flag, e.g. ``--rpm.percentile 80``;
flags win over the ``--config`` file. Exit status is 0 on success, 2 on
bad input or configuration, 1 on an internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Sequence

from . import __version__
from .baselines import run_linear, vanilla_kalman
from .config import METHODS, RUN_SCHEMA, ConfigError, RunConfig
from .evaluation import (
    METRICS,
    aggregate,
    boxplot_svg,
    common_emissions,
    evaluate_sequence,
    write_aggregate_csv,
    write_comparison_csv,
    write_results_csv,
)
from .events import (
    BINARY_MAGIC,
    EventStream,
    FormatError,
    SensorGeometry,
    parse_annotations,
    parse_event_binary,
    parse_event_csv,
    select_track,
    write_annotations,
    write_event_binary,
    write_event_csv,
)
from .kalman import parse_forecast_csv, run_forecaster, write_forecast_csv
from .rpm import estimate_rpm_stream, write_rpm_csv
from .scenario import SCENARIO_SCHEMA, Scenario, generate
from .trajectory import parse_trajectory_csv, write_trajectory_csv

log = logging.getLogger("evrpm")


_UMASK = os.umask(0)
os.umask(_UMASK)


class UsageError(Exception):
    pass


def atomic_write(path: Path, data: bytes | str) -> None:
    """Write via a sibling temp file and ``os.replace``."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(out: str | None, data: bytes) -> None:
    if out is None or out == "-":
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    else:
        atomic_write(Path(out), data)


def _read(path: str, what: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc.strerror or exc}") from None


def load_events(path: str, geometry: SensorGeometry) -> EventStream:
    """Binary when the file starts with the binary magic, CSV otherwise."""
    data = _read(path, "events file")
    if data[: len(BINARY_MAGIC)] == BINARY_MAGIC:
        return parse_event_binary(data)
    return parse_event_csv(data, geometry)


def _split_overrides(extra: Sequence[str], schema) -> dict[str, str]:
    """Turn leftover ``--key value`` / ``--key=value`` tokens into overrides."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, val = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise UsageError(f"flag --{key} needs a value")
            i += 1
            val = extra[i]
        if key not in schema:
            raise UsageError(f"unknown option --{key}")
        out[key] = val
        i += 1
    return out


def _run_config(args, extra) -> RunConfig:
    overrides = _split_overrides(extra, RUN_SCHEMA)
    for key in ("events", "annotations", "track", "method", "out", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = str(v)
    if args.config and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    return RunConfig.load(args.config, overrides)


def _track(cfg: RunConfig):
    if not cfg["annotations"]:
        raise UsageError("--annotations is required")
    geometry = SensorGeometry(*cfg["geometry"])
    boxes = parse_annotations(_read(cfg["annotations"], "annotations file"))
    try:
        return geometry, select_track(boxes, cfg["track"])
    except KeyError:
        raise UsageError(f"track {cfg['track']} not present in {cfg['annotations']}") from None


def _rpm_series(cfg: RunConfig, geometry, boxes):
    if not cfg["events"]:
        raise UsageError("--events is required")
    events = load_events(cfg["events"], geometry)
    return estimate_rpm_stream(events, boxes, cfg.rpm)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, extra) -> int:
    if not args.config:
        raise UsageError("--config (scenario file or bundled name) is required")
    if not args.out:
        raise UsageError("--out directory is required")
    overrides = _split_overrides(extra, SCENARIO_SCHEMA)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    try:
        sc = Scenario.load(args.config, overrides)
    except FileNotFoundError:
        raise UsageError(f"scenario file not found: {args.config}") from None
    sim = generate(sc)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror or exc}") from None
    if sc["format"] == "binary":
        files = {"events.bin": write_event_binary(sim.events)}
    else:
        files = {"events.csv": write_event_csv(sim.events)}
    files["annotations.csv"] = write_annotations(sim.annotations)
    files["ground_truth.csv"] = write_trajectory_csv(sim.ground_truth)
    files["rpm_truth.csv"] = ("t_us,rpm\n" + "".join(f"{t},{r:.6f}\n" for t, r in sim.rpm_truth())).encode()
    for name, data in files.items():
        try:
            atomic_write(out / name, data)
        except OSError as exc:
            raise UsageError(f"cannot write {out / name}: {exc.strerror or exc}") from None
    manifest = {
        "scenario": sc.name,
        "seed": sc["seed"],
        "config_hash": sc.digest,
        "n_events": len(sim.events),
        "n_boxes": len(sim.annotations),
        "clamped_boxes": sim.clamped,
        "files": {name: hashlib.sha256(data).hexdigest() for name, data in sorted(files.items())},
    }
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    atomic_write(out / "manifest.json", text)
    sys.stdout.write(text)
    return 0


def cmd_estimate_rpm(args, extra) -> int:
    cfg = _run_config(args, extra)
    geometry, boxes = _track(cfg)
    series = _rpm_series(cfg, geometry, boxes)
    log.info("%d/%d valid RPM estimates", sum(e.valid for e in series), len(series))
    _emit(cfg["out"], write_rpm_csv(series))
    return 0


def cmd_forecast(args, extra) -> int:
    cfg = _run_config(args, extra)
    geometry, boxes = _track(cfg)
    method = cfg["method"]
    fc = cfg.forecaster
    if method == "proposed":
        forecasts = run_forecaster(boxes, _rpm_series(cfg, geometry, boxes), fc)
    elif method == "vanilla_kf":
        forecasts = vanilla_kalman(boxes, fc)
    else:
        forecasts = run_linear(boxes, fc)
    _emit(cfg["out"], write_forecast_csv(forecasts))
    return 0


def _parse_pair(arg: str, sep: str, what: str) -> tuple[str, str]:
    left, found, right = arg.partition(sep)
    if not found or not left or not right:
        raise UsageError(f"bad {what} {arg!r}")
    return left, right


def cmd_evaluate(args, extra) -> int:
    cfg = _run_config(args, extra)
    if not args.forecast:
        raise UsageError("at least one --forecast [SEQ:]METHOD=PATH is required")
    if not args.ground_truth:
        raise UsageError("--ground-truth [SEQ=]PATH is required")
    if not cfg["out"]:
        raise UsageError("--out directory is required")
    gts = {}
    for g in args.ground_truth:
        seq, path = _parse_pair(g, "=", "--ground-truth") if "=" in g else ("seq0", g)
        gts[seq] = parse_trajectory_csv(_read(path, "ground truth"))
    by_seq: dict[str, dict[str, list]] = {}
    for f in args.forecast:
        lhs, path = _parse_pair(f, "=", "--forecast")
        seq, _, method = lhs.rpartition(":")
        seq = seq or "seq0"
        if method not in METHODS:
            raise UsageError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
        if seq not in gts:
            raise UsageError(f"no ground truth for sequence {seq!r}")
        by_seq.setdefault(seq, {})[method] = parse_forecast_csv(_read(path, "forecast file"))
    horizons = cfg.forecaster.horizons
    results: dict[str, list] = {}
    for seq in sorted(by_seq):
        shared = common_emissions(by_seq[seq].values())
        for method, fs in by_seq[seq].items():
            results.setdefault(method, []).append(
                evaluate_sequence(fs, gts[seq], horizons, sequence_id=seq, emissions=shared)
            )
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    stats = {}
    for method in sorted(results):
        stats[method] = aggregate(results[method])
        atomic_write(out / f"results_{method}.csv", write_results_csv(results[method]))
        atomic_write(out / f"aggregate_{method}.csv", write_aggregate_csv(stats[method]))
    comparison = write_comparison_csv(stats, horizons)
    atomic_write(out / "comparison.csv", comparison)
    if args.svg:
        for m in METRICS:
            for h in horizons:
                atomic_write(out / f"boxplot_{m}_{h:g}.svg", boxplot_svg(stats, m, h))
    sys.stdout.write(comparison.decode("utf-8"))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evrpm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, events=True):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--out", help="output path ('-' or omitted: stdout)")
        sp.add_argument("--seed", type=int)
        if events:
            sp.add_argument("--events")
            sp.add_argument("--annotations")
            sp.add_argument("--track", type=int)

    sp = sub.add_parser("simulate", help="write a synthetic recording from a scenario")
    common(sp, events=False)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("estimate-rpm", help="RPM series for one annotated track")
    common(sp)
    sp.set_defaults(func=cmd_estimate_rpm)

    sp = sub.add_parser("forecast", help="trajectory forecasts for one track")
    common(sp)
    sp.add_argument("--method", choices=METHODS)
    sp.set_defaults(func=cmd_forecast)

    sp = sub.add_parser("evaluate", help="ADE/FDE of forecast files against ground truth")
    common(sp, events=False)
    sp.add_argument("--forecast", action="append", default=[], metavar="[SEQ:]METHOD=PATH")
    sp.add_argument("--ground-truth", action="append", default=[], metavar="[SEQ=]PATH")
    sp.add_argument("--svg", action="store_true", help="also write boxplot SVGs")
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args, extra)
    except (UsageError, ConfigError, FormatError, KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"evrpm {args.command}: error: {msg}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - last resort
        log.debug("internal error", exc_info=True)
        print(f"evrpm {args.command}: internal error: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
