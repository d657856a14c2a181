"""Command-line entry point: generate data, build and update maps, evaluate, plan, export.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

from .batch import BuildConfig, EmConfig, MeanShiftConfig
from .dynamics_map import (
    GridSpec,
    MapFormatError,
    VelocityBatch,
    build_map,
    export_field,
    load_map,
    save_map,
    update_map,
    write_field_csv,
)
from .evaluation import VARIANTS, run_experiment, write_report
from .ingestion import BatchPlan, DataError, make_batches, parse_tracks, to_velocities, write_native_csv
from .online import UpdateConfig
from .planner import PlannerConfig, cell_at, plan, write_path_csv
from .synthetic import (
    MapFormatError as ObstacleFormatError,
    format_mapf_map,
    load_mapf_map,
    loop_corridor_map,
    loop_scenario,
    toy_eight_directions,
    two_condition_dataset,
)

log = logging.getLogger("cliffmap")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclasses.dataclass(frozen=True)
class GridConfig:
    # width/height of 0 means "cover the data"
    width: int = 0
    height: int = 0
    origin_x: float = 0.0
    origin_y: float = 0.0
    resolution: float = 1.0
    radius: float = 1.0


@dataclasses.dataclass(frozen=True)
class IngestConfig:
    format: str = "native_csv"
    rate_hz: float = 1.0
    min_speed: float = 0.05

    def __post_init__(self):
        if self.format not in ("native_csv", "atc_csv"):
            raise ValueError(f"unknown track format {self.format!r}")
        if not self.rate_hz > 0:
            raise ValueError("rate_hz must be positive")


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    interval: float = 3600.0
    test_fraction: float = 0.1
    seed: int = 0
    variants: str = ",".join(VARIANTS)

    def __post_init__(self):
        BatchPlan(self.interval, self.test_fraction, self.seed)


@dataclasses.dataclass(frozen=True)
class UpdateSection:
    decay_lambda: float = 0.5
    eta_thres: float = 0.1

    def __post_init__(self):
        UpdateConfig(decay_lambda=self.decay_lambda, eta_thres=self.eta_thres)


@dataclasses.dataclass(frozen=True)
class ScenarioConfig:
    n_trajectories: int = 300
    batches_per_condition: int = 10
    size: int = 48
    corridor: int = 3
    tau: float = 0.3
    toy_n_per_batch: int = 200
    toy_sigma_deg: float = 10.0

    def __post_init__(self):
        for name in ("n_trajectories", "batches_per_condition", "corridor", "toy_n_per_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not (self.tau > 0 and self.toy_sigma_deg >= 0):
            raise ValueError("tau must be positive and toy_sigma_deg non-negative")


SECTIONS = {
    "grid": GridConfig,
    "mean_shift": MeanShiftConfig,
    "em": EmConfig,
    "update": UpdateSection,
    "planner": PlannerConfig,
    "experiment": ExperimentConfig,
    "ingest": IngestConfig,
    "scenario": ScenarioConfig,
}


@dataclasses.dataclass
class RunConfig:
    sections: dict

    def __getitem__(self, name):
        return self.sections[name]

    @property
    def build(self) -> BuildConfig:
        return BuildConfig(self["mean_shift"], self["em"])

    @property
    def update(self) -> UpdateConfig:
        u = self["update"]
        return UpdateConfig(decay_lambda=u.decay_lambda, eta_thres=u.eta_thres, jitter=self["em"].jitter)


def _coerce(section: str, cls, key: str, raw: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise UsageError(f"config: unknown key {key!r} in section [{section}]")
    default = getattr(cls(), key)
    try:
        if default is None or isinstance(default, float):
            return float(raw)
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        return raw.strip()
    except ValueError:
        raise UsageError(f"config: bad value {raw!r} for [{section}] {key}") from None


def load_config(path: Optional[str]) -> RunConfig:
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise UsageError(f"config {path}: {exc}") from exc
        for section in parser.sections():
            if section not in SECTIONS:
                raise UsageError(f"config: unknown section [{section}]")
            for key, raw in parser.items(section):
                values[section][key] = _coerce(section, SECTIONS[section], key, raw)
    try:
        return RunConfig({name: cls(**values[name]) for name, cls in SECTIONS.items()})
    except ValueError as exc:
        raise UsageError(f"config: {exc}") from exc


def _override(cfg: RunConfig, section: str, **changes) -> None:
    changes = {k: v for k, v in changes.items() if v is not None}
    if changes:
        try:
            cfg.sections[section] = dataclasses.replace(cfg[section], **changes)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc


def config_help() -> str:
    lines = ["configuration file (INI; flags override it):"]
    for name, cls in SECTIONS.items():
        inst = cls()
        keys = ", ".join(f"{f.name}={getattr(inst, f.name)!r}" for f in dataclasses.fields(cls))
        lines.append(f"  [{name}] {keys}")
    return "\n".join(lines)


def _pair(text: str) -> tuple[float, float]:
    try:
        a, b = text.split(",")
        return float(a), float(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="seed for every random choice (default from [experiment])")
    common.add_argument("-v", "--verbose", action="store_true")

    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--width", type=int, help="grid cells along x (default: cover the data)")
    grid.add_argument("--height", type=int, help="grid cells along y")
    grid.add_argument("--origin", type=_pair, help="grid origin X,Y in metres")
    grid.add_argument("--resolution", type=float, help="cell size in metres")
    grid.add_argument("--radius", type=float, help="observation-to-cell assignment radius in metres")
    grid.add_argument("--format", choices=("native_csv", "atc_csv"), help="input track format")

    p = _Parser(
        prog="cliffmap",
        description="Online-updated circular-linear flow field maps.",
        epilog=config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser(
        "gen",
        parents=[common],
        help="generate a synthetic dataset",
        description="toy: eight 45-degree batches at one location. den520d: two-condition "
        "flows on the built-in corridor-loop obstacle map (written as obstacles.map).",
    )
    g.add_argument("kind", choices=("toy", "den520d"))
    g.add_argument("--out", required=True, help="output directory")

    b = sub.add_parser("build", parents=[common, grid], help="batch map from one dataset")
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)

    u = sub.add_parser("update", parents=[common], help="one online iteration")
    u.add_argument("--map", required=True)
    u.add_argument("--data", required=True)
    u.add_argument("--lambda", dest="lam", type=float, help="decay rate in (0, 1)")
    u.add_argument("--eta-thres", type=float, help="component-spawn density threshold")
    u.add_argument("--format", choices=("native_csv", "atc_csv"))
    u.add_argument("--out", required=True)

    e = sub.add_parser("eval", parents=[common, grid], help="online / history / interval comparison")
    e.add_argument("--data-dir", required=True, help="directory holding tracks.csv")
    e.add_argument("--variants", help="comma-separated subset of " + ",".join(VARIANTS))
    e.add_argument("--lambda", dest="lam", type=float)
    e.add_argument("--interval", type=float, help="batch length in seconds")
    e.add_argument("--report", required=True, help="output directory")
    e.add_argument("--no-timing", action="store_true", help="do not write timing.csv")
    e.add_argument("--save-maps", action="store_true", help="also write every per-batch map under REPORT/maps")

    pl = sub.add_parser("plan", parents=[common], help="flow-aware path")
    pl.add_argument("--map", required=True)
    pl.add_argument("--obstacles", required=True, help="MAPF .map file")
    pl.add_argument("--start", type=_pair, required=True, help="X,Y in metres")
    pl.add_argument("--goal", type=_pair, required=True, help="X,Y in metres")
    pl.add_argument("--alpha", type=float)
    pl.add_argument("--out", help="CSV path (default stdout)")

    x = sub.add_parser("export", parents=[common], help="field data for plotting")
    x.add_argument("--map", required=True)
    x.add_argument("--mode", choices=("dominant", "all"), default="all")
    x.add_argument("--out", required=True)
    return p


def _grid_from(cfg: RunConfig, args, batch: VelocityBatch) -> GridSpec:
    gc = cfg["grid"]
    ox, oy = args.origin if args.origin is not None else (gc.origin_x, gc.origin_y)
    res = args.resolution if args.resolution is not None else gc.resolution
    radius = args.radius if args.radius is not None else gc.radius
    width = args.width if args.width is not None else gc.width
    height = args.height if args.height is not None else gc.height
    try:
        if width and height:
            return GridSpec(width, height, (ox, oy), res, radius)
        if len(batch) == 0:
            raise DataError("no observations to size the grid from")
        return GridSpec.covering(batch.positions, res, radius)
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise UsageError(str(exc)) from exc


def _read_velocities(path, cfg: RunConfig, fmt: Optional[str]) -> VelocityBatch:
    ic = cfg["ingest"]
    tracks = parse_tracks(path, fmt or ic.format)
    return to_velocities(tracks, ic.rate_hz, ic.min_speed)


def _load_map(path):
    if not Path(path).is_file():
        raise DataError(f"map file not found: {path}")
    try:
        return load_map(path)
    except MapFormatError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _load_obstacles(path):
    try:
        return load_mapf_map(path)
    except OSError as exc:
        raise DataError(f"cannot read obstacle map {path}: {exc}") from exc
    except ObstacleFormatError as exc:
        raise DataError(f"{path}: {exc}") from exc


def cmd_gen(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg["experiment"].seed
    sc = cfg["scenario"]
    interval = cfg["experiment"].interval
    if args.kind == "toy":
        batches = toy_eight_directions(sc.toy_n_per_batch, sigma=math.radians(sc.toy_sigma_deg), seed=seed, interval=interval)
        for k, batch in enumerate(batches, start=1):
            write_native_csv(batch, out / f"batch_{k:02d}.csv")
        write_native_csv(VelocityBatch.concat(batches), out / "tracks.csv")
        return
    grid = loop_corridor_map(size=sc.size, corridor=sc.corridor)
    scenario = loop_scenario(size=sc.size, corridor=sc.corridor, n_trajectories=sc.n_trajectories, tau=sc.tau, seed=seed)
    data = two_condition_dataset(grid, scenario, sc.batches_per_condition, interval)
    write_native_csv(data, out / "tracks.csv")
    (out / "obstacles.map").write_text(format_mapf_map(grid))


def cmd_build(args, cfg: RunConfig) -> None:
    batch = _read_velocities(args.data, cfg, args.format)
    grid = _grid_from(cfg, args, batch)
    save_map(build_map(grid, batch, cfg.build, iteration=1), args.out)


def cmd_update(args, cfg: RunConfig) -> None:
    _override(cfg, "update", decay_lambda=args.lam, eta_thres=args.eta_thres)
    cmap = _load_map(args.map)
    batch = _read_velocities(args.data, cfg, args.format)
    save_map(update_map(cmap, batch, cfg.update, cfg.build), args.out)


def cmd_eval(args, cfg: RunConfig) -> None:
    _override(cfg, "update", decay_lambda=args.lam)
    _override(cfg, "experiment", interval=args.interval, variants=args.variants)
    ex = cfg["experiment"]
    variants = [v.strip() for v in ex.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad or not variants:
        raise UsageError(f"unknown variants: {','.join(bad) or '(none)'}")
    data = _read_velocities(Path(args.data_dir) / "tracks.csv", cfg, args.format)
    grid = _grid_from(cfg, args, data)
    batches = make_batches(data, BatchPlan(ex.interval, ex.test_fraction, ex.seed))
    snaps = range(1, len(batches) + 1) if args.save_maps else ()
    rep = run_experiment(batches, grid, variants, cfg.update, cfg.build, timing=not args.no_timing, snapshots=snaps)
    write_report(rep, args.report, timing=not args.no_timing)
    if args.save_maps:
        d = Path(args.report) / "maps"
        d.mkdir(parents=True, exist_ok=True)
        for v, run in rep.runs.items():
            for k, m in sorted(run.snapshots.items()):
                save_map(m, d / f"{v}_{k:02d}.clff")


def cmd_plan(args, cfg: RunConfig) -> None:
    _override(cfg, "planner", alpha=args.alpha)
    cmap = _load_map(args.map)
    obstacles = _load_obstacles(args.obstacles)
    start, goal = cell_at(*args.start), cell_at(*args.goal)
    for name, c in (("start", start), ("goal", goal)):
        if not obstacles.free(c):
            raise DataError(f"{name} {getattr(args, name)} is not in a free cell")
    result = plan(obstacles, cmap, start, goal, cfg["planner"])
    if not result.found:
        log.warning("no path between start and goal")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_path_csv(result, cmap, fh)
    else:
        write_path_csv(result, cmap, sys.stdout)


def cmd_export(args, cfg: RunConfig) -> None:
    cmap = _load_map(args.map)
    write_field_csv(export_field(cmap, args.mode), args.out)


COMMANDS = {
    "gen": cmd_gen,
    "build": cmd_build,
    "update": cmd_update,
    "eval": cmd_eval,
    "plan": cmd_plan,
    "export": cmd_export,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config)
        _override(cfg, "experiment", seed=args.seed)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"cliffmap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, MapFormatError, ObstacleFormatError, FileNotFoundError) as exc:
        print(f"cliffmap: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort report
        log.debug("internal error", exc_info=True)
        print(f"cliffmap: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
