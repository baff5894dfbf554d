"""Command-line experiment runner: ``run``, ``sweep`` and ``gen-data``.

Every config key is also a flag (``--local-epochs 3``, ``--drift.n-clients 6``).
``FEDPALL_OUT_DIR`` overrides the directory metrics files are written to.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .config import ExperimentConfig, config_keys, format_config, parse_config
from .data import dump_clients, generate_drifted_clients
from .errors import ConfigError, DataParseError, FedPallError, ProtocolError, TrainingDivergenceError
from .federation import RunResult, run, write_metrics_csv

log = logging.getLogger(__name__)

OUT_DIR_ENV = "FEDPALL_OUT_DIR"

EXIT_CODES = {ConfigError: 2, DataParseError: 3, TrainingDivergenceError: 4, ProtocolError: 5}


def exit_code_for(exc: BaseException) -> int:
    for cls, code in EXIT_CODES.items():
        if isinstance(exc, cls):
            return code
    return 1


@dataclass
class SweepSpec:
    grid: dict[str, list]
    seeds: list[int]

    def __post_init__(self):
        if not self.grid or any(len(v) == 0 for v in self.grid.values()):
            raise ConfigError("sweep grid must be nonempty")
        if not self.seeds:
            raise ConfigError("sweep needs at least one seed")

    def points(self):
        """Cartesian product in the order the parameters were given, last one fastest."""
        names = list(self.grid)
        for values in itertools.product(*(self.grid[n] for n in names)):
            yield dict(zip(names, values))


def _output_path(config: ExperimentConfig, default_name: str) -> Path:
    env_dir = os.environ.get(OUT_DIR_ENV)
    name = Path(config.out_path).name if config.out_path else default_name
    if env_dir:
        return Path(env_dir) / name
    return Path(config.out_path) if config.out_path else Path(default_name)


def run_command(config: ExperimentConfig, stdout=None) -> tuple[RunResult, Path]:
    """Run one experiment, write its metrics CSV and print the macro-average top-1."""
    stdout = stdout or sys.stdout
    result = run(config)
    path = write_metrics_csv(result.metrics, _output_path(config, f"{config.effective_run_id}.csv"))
    print(f"{config.effective_run_id}: method={config.method} seed={config.seed} "
          f"macro_avg_top1={result.report.macro_avg:.6f} metrics={path}", file=stdout)
    return result, path


@dataclass
class SweepRow:
    point: dict
    seed: int
    avg_top1: float
    error: str = ""


def sweep_command(config: ExperimentConfig, sweep: SweepSpec, out_path=None) -> list[SweepRow]:
    """One run per (grid point, seed); failed cells become NaN rows and the sweep continues.

    Writes ``<out>`` with one row per run and ``<out stem>_means.csv`` with the
    per-point mean over seeds.
    """
    rows: list[SweepRow] = []
    for point in sweep.points():
        for seed in sweep.seeds:
            try:
                cfg = config.replace(**point, seed=seed)
                rows.append(SweepRow(point, seed, run(cfg).report.macro_avg))
            except FedPallError as exc:
                log.warning("sweep cell %s seed=%s failed: %s", point, seed, exc)
                rows.append(SweepRow(point, seed, float("nan"), f"{type(exc).__name__}: {exc}"))
    if out_path is None:
        out_path = _output_path(config, "sweep.csv")
    elif os.environ.get(OUT_DIR_ENV):
        out_path = Path(os.environ[OUT_DIR_ENV]) / Path(out_path).name
    write_sweep_csv(rows, list(sweep.grid), out_path)
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def write_sweep_csv(rows: list[SweepRow], names: list[str], out_path) -> tuple[Path, Path]:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*names, "seed", "avg_top1", "error"])
        for r in rows:
            w.writerow([*(_fmt(r.point[n]) for n in names), r.seed, _fmt(r.avg_top1), r.error])
    means_path = out_path.with_name(out_path.stem + "_means.csv")
    cells: dict[tuple, list[float]] = {}
    for r in rows:
        cells.setdefault(tuple(r.point[n] for n in names), []).append(r.avg_top1)
    with open(means_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*names, "mean_top1", "n_seeds"])
        for key, vals in cells.items():
            ok = [v for v in vals if not math.isnan(v)]
            w.writerow([*(_fmt(k) for k in key), _fmt(sum(ok) / len(ok) if ok else float("nan")), len(ok)])
    return out_path, means_path


def _grid_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_grid(items: list[str]) -> dict[str, list]:
    """``["mu=0.1,0.2", "delta=0.5"]`` -> ``{"mu": [0.1, 0.2], "delta": [0.5]}``."""
    grid: dict[str, list] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"grid entry {item!r} must look like name=v1,v2,...")
        name, values = item.split("=", 1)
        grid[name.strip().replace("-", "_")] = [_grid_value(v.strip()) for v in values.split(",") if v.strip()]
    return grid


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    for key in config_keys():
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="VALUE")


def _config_from_args(args) -> ExperimentConfig:
    overrides = {k: getattr(args, k) for k in config_keys()}
    return parse_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedpall", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment and write a metrics CSV")
    _add_config_flags(p_run)
    p_run.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")

    p_sweep = sub.add_parser("sweep", help="grid sweep over config keys and seeds")
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--grid", action="append", default=[], metavar="NAME=V1,V2",
                         help="repeatable; e.g. --grid mu=0.1,0.2,0.5,1.0 --grid delta=0.1,0.2,0.5,1.0")
    p_sweep.add_argument("--seeds", default="0", help="comma-separated seeds")
    p_sweep.add_argument("--sweep-out", default=None, help="aggregated CSV path (default sweep.csv)")

    p_gen = sub.add_parser("gen-data", help="dump synthetic drifted clients to CSV files")
    _add_config_flags(p_gen)
    p_gen.add_argument("--out-dir", default=None, help="directory for client_<n>.csv")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _config_from_args(args)
        if args.command == "run":
            if args.dump_config:
                sys.stdout.write(format_config(config))
                return 0
            run_command(config)
        elif args.command == "sweep":
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            sweep = SweepSpec(parse_grid(args.grid), seeds)
            rows = sweep_command(config, sweep, args.sweep_out)
            failed = sum(1 for r in rows if r.error)
            print(f"sweep: {len(rows)} runs, {failed} failed")
        elif args.command == "gen-data":
            out_dir = args.out_dir or os.environ.get(OUT_DIR_ENV) or "data"
            paths = dump_clients(generate_drifted_clients(config.drift_spec()), out_dir)
            print("\n".join(str(p) for p in paths))
    except FedPallError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
