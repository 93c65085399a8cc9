"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 numerical failure.  On
failure stderr carries ``error: <CODE>: <detail>`` and the output directory
holds only ``manifest.json`` with ``status: failed``.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import platform
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .cost import n_threads
from .dynamics import DivergenceError, SimulationError, SteadyStateError, trajectory_columns
from .export import atomic_write_text, csv_text, write_manifest
from .harness import (
    DesignProblem,
    ExperimentError,
    evaluate_tagged,
    export_views,
    occupancy_rows,
    run_design,
    run_monte_carlo,
    run_schroeder_baseline,
    signal_rows,
    spectrum_rows,
    trace_rows,
)

log = logging.getLogger("spacefill")

COMMANDS = ("design", "schroeder", "monte-carlo", "simulate", "grid-info")


def _numeric_code(exc: BaseException) -> str:
    cause = exc.__cause__ if isinstance(exc, ExperimentError) else exc
    steady = isinstance(exc, ExperimentError) and "steady state" in exc.stage
    if isinstance(cause, SteadyStateError):
        return "E_STEADY_STATE_NOT_CONVERGED"
    if isinstance(cause, DivergenceError):
        return "E_STEADY_STATE_DIVERGED" if steady else "E_SIMULATION_DIVERGED"
    return "E_OPTIMIZER_FAILED"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spacefill", description="Space-filling input design.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--out", help="output directory (overrides config output_dir)")
        sp.add_argument("--seed", type=int, help="seed (design/simulate) or master seed (monte-carlo)")
        if name == "monte-carlo":
            sp.add_argument("--runs", type=int, default=20)
            sp.add_argument("--workers", type=int, default=1, help="parallel processes")
        v = sp.add_mutually_exclusive_group()
        v.add_argument("--quiet", action="store_true")
        v.add_argument("--verbose", action="store_true")
    return p


def _design_files(res, problem, cfg) -> dict[str, str]:
    files = {}
    Ts = cfg.model.Ts
    for tag, traj, d in (
        ("initial", res.trajectory_initial, res.occupancy_initial),
        ("optimized", res.trajectory_final, res.occupancy_final),
    ):
        u = traj.inputs[:, 0]
        files[f"signal_{tag}.csv"] = csv_text(["k", "t", "u"], signal_rows(u, Ts))
        files[f"spectrum_{tag}.csv"] = csv_text(["line", "freq_hz", "magnitude"], spectrum_rows(u, cfg.input.fs))
        files[f"trajectory_{tag}.csv"] = csv_text(*trajectory_columns(traj))
        files[f"occupancy_{tag}.csv"] = csv_text(_occ_header(problem), occupancy_rows(problem.grid, d))
    files["cost_trace.csv"] = csv_text(["iter", "cost", "grad_inf_norm", "step_size"], trace_rows(res.optim))
    return files


def _occ_header(problem):
    return ["i", *[f"z{j + 1}" for j in range(problem.grid.n_z)], "d"]


def _single_files(label, res, problem, cfg):
    traj = res.trajectory_final
    u = traj.inputs[:, 0]
    return {
        f"signal_{label}.csv": csv_text(["k", "t", "u"], signal_rows(u, cfg.model.Ts)),
        f"spectrum_{label}.csv": csv_text(["line", "freq_hz", "magnitude"], spectrum_rows(u, cfg.input.fs)),
        f"trajectory_{label}.csv": csv_text(*trajectory_columns(traj)),
        f"occupancy_{label}.csv": csv_text(_occ_header(problem), occupancy_rows(problem.grid, res.occupancy_final)),
    }


def _run(args, cfg: ExperimentConfig, manifest: dict) -> dict[str, str]:
    """Compute everything in memory; returns file name -> contents."""
    problem = DesignProblem(cfg)
    manifest["grid"] = {"n_z": problem.grid.n_z, "n": problem.grid.n, "points_per_dim": list(problem.grid.points_per_dim)}
    files: dict[str, str] = {}
    views = {}
    if args.command == "grid-info":
        print(f"n_z={problem.grid.n_z} n={problem.grid.n} points_per_dim={list(problem.grid.points_per_dim)}")
    elif args.command == "simulate":
        seed = cfg.input.seed if args.seed is None else args.seed
        manifest["seed"] = seed
        ev = evaluate_tagged(problem, problem.initial_theta(seed), "steady state", seed)
        u = ev.trajectory.inputs[:, 0]
        files["signal_initial.csv"] = csv_text(["k", "t", "u"], signal_rows(u, cfg.model.Ts))
        files["trajectory_initial.csv"] = csv_text(*trajectory_columns(ev.trajectory))
        manifest["summary"] = {"cost": ev.cost, "periods": ev.trajectory.periods}
        views["initial"] = ev.trajectory
    elif args.command == "design":
        seed = cfg.input.seed if args.seed is None else args.seed
        manifest["seed"] = seed
        res = run_design(cfg, seed)
        files.update(_design_files(res, problem, cfg))
        manifest["summary"] = res.summary()
        views["initial"] = res.trajectory_initial
        views["optimized"] = res.trajectory_final
        if cfg.input.type == "multisine":
            base = run_schroeder_baseline(cfg)
            files.update(_single_files("schroeder", base, problem, cfg))
            manifest["baseline"] = base.summary()
            views["schroeder"] = base.trajectory_final
    elif args.command == "schroeder":
        base = run_schroeder_baseline(cfg)
        files.update(_single_files("schroeder", base, problem, cfg))
        manifest["summary"] = base.summary()
        views["schroeder"] = base.trajectory_final
    elif args.command == "monte-carlo":
        master = cfg.input.seed if args.seed is None else args.seed
        manifest["master_seed"] = master
        mc = run_monte_carlo(cfg, args.runs, master, workers=args.workers)
        files["montecarlo.csv"] = csv_text(*mc.table())
        manifest["seeds"] = [r["seed"] for r in mc.rows]
        manifest["summary"] = mc.summary()
    if views:
        # render view CSVs into a scratch dir, then keep their text
        with tempfile.TemporaryDirectory() as tmp:
            for p in export_views(views, tmp, box=problem.grid.box):
                files[p.name] = p.read_text()
    return files


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.quiet else logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out or cfg.output_dir)
    if args.out:
        cfg = cfg.replace(output_dir=str(out))

    manifest = {
        "command": args.command,
        "config": cfg.to_dict(),
        "versions": {"spacefill": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "threads": n_threads(),
        "status": "running",
    }
    t0 = time.perf_counter()
    try:
        with _thread_limits():
            files = _run(args, cfg, manifest)
    except (ExperimentError, SimulationError) as exc:
        code = _numeric_code(exc)
        return _fail(out, manifest, code, str(exc), 2)
    except ConfigError as exc:
        return _fail(out, manifest, exc.code, str(exc), 1)

    manifest["elapsed_s"] = time.perf_counter() - t0
    manifest["status"] = "ok"
    manifest["files"] = sorted(files)
    for name, text in files.items():
        atomic_write_text(out / name, text)
    write_manifest(out / "manifest.json", manifest)
    log.info("wrote %d files to %s", len(files) + 1, out)
    return 0


def _fail(out: Path, manifest: dict, code: str, detail: str, exit_code: int) -> int:
    print(f"error: {code}: {detail}", file=sys.stderr)
    manifest.update(status="failed", error={"code": code, "detail": detail})
    write_manifest(out / "manifest.json", manifest)
    return exit_code


@contextlib.contextmanager
def _thread_limits():
    if int(os.environ.get("SPACEFILL_THREADS", "0") or 0) > 0:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(n_threads()):
            yield
    else:
        yield


if __name__ == "__main__":
    sys.exit(main())
