"""End-to-end experiments: design, Schroeder baseline, Monte-Carlo study, exports."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cost as costmod
from .config import ExperimentConfig
from .dynamics import (
    SimulationError,
    SensitivityTrajectory,
    Trajectory,
    simulate_steady_state_with_sensitivities,
)
from .export import index_rows, write_csv
from .optimizer import OptimResult, OptimizationError, minimize
from .signals import (
    MultisinePhases,
    amplitude_for_target_std,
    amplitude_spectrum,
    crest_factor,
    random_phases,
    schroeder_phases,
)

log = logging.getLogger(__name__)


class ExperimentError(RuntimeError):
    """A simulation or optimizer failure, tagged with the stage and seed it happened in.

    The underlying exception is chained as ``__cause__``.
    """

    def __init__(self, stage: str, seed, cause: Exception):
        self.stage = stage
        self.seed = seed
        super().__init__(f"{stage} (seed {seed}): {cause}")


@dataclass
class Evaluation:
    cost: float
    grad: np.ndarray | None
    trajectory: Trajectory
    sensitivities: SensitivityTrajectory | None


class DesignProblem:
    """Resolved runtime objects for one config; evaluates cost(simulate(signal(theta)))."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.model = config.build_model()
        self.param = config.build_parametrization()
        self.grid = config.build_grid()
        self.kernel = config.build_kernel()
        self.options = config.build_options()
        ss = config.steady_state
        self.x0 = None if ss.x0 is None else np.asarray(ss.x0)
        self.tol = ss.tol
        self.max_periods = ss.max_periods

    def initial_theta(self, seed: int) -> np.ndarray:
        inp = self.config.input
        phases = random_phases(inp.line_max - inp.line_min + 1, seed)
        if self.param.kind == "multisine":
            return phases
        # direct parametrization starts from the random-phase multisine
        amp = amplitude_for_target_std(inp.target_std, phases.size)
        u = MultisinePhases(inp.N, inp.fs, inp.line_min, inp.line_max, np.full(phases.size, amp)).signal(phases)
        if self.param.bounds is not None:
            u = np.clip(u, *self.param.bounds)
        return u

    def evaluate(self, theta, gradient: bool = True) -> Evaluation:
        u = self.param.signal(theta)
        du = self.param.jacobian(theta) if gradient else np.zeros((u.size, 0))
        traj, sens = simulate_steady_state_with_sensitivities(
            self.model, u, du, self.x0, self.max_periods, self.tol
        )
        z = traj.samples
        if not gradient:
            return Evaluation(costmod.cost(z, self.grid, self.kernel), None, traj, None)
        c, gz = costmod.cost_and_gradient(z, self.grid, self.kernel)
        return Evaluation(c, costmod.chain_sample_gradient(gz, sens), traj, sens)

    def objective(self, theta):
        try:
            ev = self.evaluate(theta)
        except SimulationError:
            # an over-driven trial point inside a line search; let it backtrack
            return np.inf, None
        return ev.cost, ev.grad


@dataclass
class DesignResult:
    label: str
    seed: int | None
    theta_initial: np.ndarray
    theta_final: np.ndarray
    cost_initial: float
    cost_final: float
    crest_initial: float | None
    crest_final: float | None
    trajectory_initial: Trajectory
    trajectory_final: Trajectory
    occupancy_initial: np.ndarray
    occupancy_final: np.ndarray
    optim: OptimResult | None = None
    elapsed: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return self.cost_final / self.cost_initial

    @property
    def signal_initial(self) -> np.ndarray:
        return self.trajectory_initial.inputs[:, 0]

    @property
    def signal_final(self) -> np.ndarray:
        return self.trajectory_final.inputs[:, 0]

    def summary(self) -> dict:
        out = {
            "label": self.label,
            "seed": self.seed,
            "cost_initial": self.cost_initial,
            "cost_final": self.cost_final,
            "ratio": self.ratio,
            "crest_initial": self.crest_initial,
            "crest_final": self.crest_final,
            "periods_initial": self.trajectory_initial.periods,
            "periods_final": self.trajectory_final.periods,
            "elapsed_s": self.elapsed,
        }
        if self.optim is not None:
            out.update(
                iterations=self.optim.iterations,
                termination=self.optim.termination_reason,
                cost_evaluations=self.optim.n_cost_evals,
            )
        return out


def _crest(u) -> float | None:
    try:
        return crest_factor(u)
    except ValueError:
        return None


def evaluate_tagged(problem: DesignProblem, theta, stage, seed, gradient=False) -> Evaluation:
    try:
        return problem.evaluate(theta, gradient=gradient)
    except SimulationError as exc:
        raise ExperimentError(stage, seed, exc) from exc


def run_design(config: ExperimentConfig, seed: int | None = None) -> DesignResult:
    """Optimize the input parameters from a seeded random start."""
    t0 = time.perf_counter()
    seed = config.input.seed if seed is None else int(seed)
    problem = DesignProblem(config)
    theta0 = problem.initial_theta(seed)
    ev0 = evaluate_tagged(problem, theta0, "initial steady state", seed, gradient=True)
    first = [True]

    def objective(theta):
        if first[0] and np.array_equal(theta, theta0):
            first[0] = False
            return ev0.cost, ev0.grad
        return problem.objective(theta)

    try:
        res = minimize(objective, theta0, problem.options)
    except OptimizationError as exc:
        raise ExperimentError("optimization", seed, exc) from exc
    ev1 = evaluate_tagged(problem, res.theta_star, "final steady state", seed)
    log.info(
        "seed %s: cost %.6g -> %.6g in %d iterations (%s)",
        seed, ev0.cost, ev1.cost, res.iterations, res.termination_reason,
    )
    return DesignResult(
        label="optimized",
        seed=seed,
        theta_initial=theta0,
        theta_final=res.theta_star,
        cost_initial=ev0.cost,
        cost_final=ev1.cost,
        crest_initial=_crest(ev0.trajectory.inputs),
        crest_final=_crest(ev1.trajectory.inputs),
        trajectory_initial=ev0.trajectory,
        trajectory_final=ev1.trajectory,
        occupancy_initial=costmod.grid_occupancy(ev0.trajectory.samples, problem.grid, problem.kernel),
        occupancy_final=costmod.grid_occupancy(ev1.trajectory.samples, problem.grid, problem.kernel),
        optim=res,
        elapsed=time.perf_counter() - t0,
    )


def run_schroeder_baseline(config: ExperimentConfig) -> DesignResult:
    """Evaluate the Schroeder-phase multisine (no optimization)."""
    if config.input.type != "multisine":
        raise ValueError("the Schroeder baseline needs the multisine parametrization")
    t0 = time.perf_counter()
    problem = DesignProblem(config)
    theta = schroeder_phases(problem.param.n_theta)
    ev = evaluate_tagged(problem, theta, "Schroeder steady state", None)
    occ = costmod.grid_occupancy(ev.trajectory.samples, problem.grid, problem.kernel)
    cf = _crest(ev.trajectory.inputs)
    return DesignResult(
        label="schroeder",
        seed=None,
        theta_initial=theta,
        theta_final=theta,
        cost_initial=ev.cost,
        cost_final=ev.cost,
        crest_initial=cf,
        crest_final=cf,
        trajectory_initial=ev.trajectory,
        trajectory_final=ev.trajectory,
        occupancy_initial=occ,
        occupancy_final=occ,
        elapsed=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# Monte-Carlo
# ---------------------------------------------------------------------------

MC_COLUMNS = [
    "run", "seed", "status", "initial_cost", "final_cost", "ratio",
    "iterations", "termination", "monotone", "error",
]


def run_seed(run: int, master_seed: int) -> int:
    """Seed of Monte-Carlo run ``run``: ``master_seed + run``."""
    return int(master_seed) + int(run)


def _mc_run(args) -> dict:
    config, run, seed = args
    try:
        res = run_design(config, seed)
    except ExperimentError as exc:
        return {"run": run, "seed": seed, "status": "failed", "error": str(exc)}
    trace = res.optim.cost_trace
    return {
        "run": run,
        "seed": seed,
        "status": "ok",
        "initial_cost": res.cost_initial,
        "final_cost": res.cost_final,
        "ratio": res.ratio,
        "iterations": res.optim.iterations,
        "termination": res.optim.termination_reason,
        "monotone": bool(np.all(np.diff(trace) <= 0)),
        "error": "",
    }


@dataclass
class MonteCarloResult:
    master_seed: int
    rows: list[dict]

    @property
    def ok_rows(self) -> list[dict]:
        return [r for r in self.rows if r["status"] == "ok"]

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.ok_rows], dtype=float)

    def summary(self) -> dict:
        ok = self.ok_rows
        out = {"runs": len(self.rows), "succeeded": len(ok), "master_seed": self.master_seed}
        if ok:
            final = self.column("final_cost")
            q1, med, q3 = np.percentile(final, [25, 50, 75])
            out.update(
                median_initial_cost=float(np.median(self.column("initial_cost"))),
                median_final_cost=float(med),
                final_cost_iqr=float(q3 - q1),
                final_cost_iqr_over_median=float((q3 - q1) / med),
                median_ratio=float(np.median(self.column("ratio"))),
                max_ratio=float(np.max(self.column("ratio"))),
                all_improved=bool(np.all(self.column("ratio") < 1)),
            )
        return out

    def table(self) -> tuple[list[str], list[list]]:
        rows = [[r.get(c, "") for c in MC_COLUMNS] for r in self.rows]
        return MC_COLUMNS, rows


def run_monte_carlo(
    config: ExperimentConfig, runs: int, master_seed: int = 0, workers: int = 1
) -> MonteCarloResult:
    """Independent designs from seeds ``master_seed + i``; failures are recorded per run."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    jobs = [(config, i, run_seed(i, master_seed)) for i in range(runs)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_mc_run, jobs))
    else:
        rows = [_mc_run(job) for job in jobs]
    rows.sort(key=lambda r: r["run"])
    return MonteCarloResult(int(master_seed), rows)


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

AXIS_NAMES = ("u", "x1", "x2")
PLANES = ((0, 1), (0, 2), (1, 2))


def _names(n_z: int) -> list[str]:
    return list(AXIS_NAMES) if n_z == 3 else [f"z{j + 1}" for j in range(n_z)]


def slice_index(values, edges) -> np.ndarray:
    """Bin of each value; the first and last bins are open-ended, so every sample lands in one bin."""
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("slice edges must be strictly increasing with at least two entries")
    return np.clip(np.searchsorted(edges, values, side="right") - 1, 0, edges.size - 2)


def export_views(
    trajectories: dict[str, Trajectory],
    out_dir,
    slice_axis: int = 0,
    slice_edges=None,
    n_slices: int = 5,
    box=None,
) -> list[Path]:
    """Side views (coordinate-plane projections) and slices along one axis.

    Writes ``sideviews_<label>_<h>-<v>.csv`` (``k, h, v``) per plane and
    ``slices_<label>.csv`` (``slice, lo, hi, k, z...``).  Default edges split
    the box range of ``slice_axis`` into ``n_slices`` equal bins.
    """
    out_dir = Path(out_dir)
    paths = []
    for label, traj in trajectories.items():
        z = traj.samples if len(traj) else np.empty((0, 3))
        names = _names(z.shape[1])
        k = np.arange(z.shape[0])
        for h, v in [(a, b) for a, b in PLANES if b < z.shape[1]]:
            p = out_dir / f"sideviews_{label}_{names[h]}-{names[v]}.csv"
            paths.append(write_csv(p, ["k", names[h], names[v]], index_rows(k, z[:, h], z[:, v])))
        edges = slice_edges
        if edges is None:
            if box is not None:
                lo, hi = box.lower[slice_axis], box.upper[slice_axis]
            elif z.shape[0]:
                lo, hi = z[:, slice_axis].min(), z[:, slice_axis].max()
            else:
                lo, hi = 0.0, 1.0
            edges = np.linspace(lo, hi, n_slices + 1)
        edges = np.asarray(edges, dtype=float)
        idx = slice_index(z[:, slice_axis], edges) if z.shape[0] else np.empty(0, dtype=int)
        rows = [
            [int(b), float(edges[b]), float(edges[b + 1]), int(i), *map(float, z[i])]
            for b in range(edges.size - 1)
            for i in np.flatnonzero(idx == b)
        ]
        p = out_dir / f"slices_{label}.csv"
        paths.append(write_csv(p, ["slice", "lo", "hi", "k", *names], rows))
    return paths


def signal_rows(u, Ts):
    k = np.arange(len(u))
    return [[int(i), float(i * Ts), float(v)] for i, v in zip(k, u)]


def spectrum_rows(u, fs):
    mag = amplitude_spectrum(u)
    n = len(u)
    return [[int(i), float(i * fs / n), float(m)] for i, m in enumerate(mag)]


def occupancy_rows(grid: costmod.DomainGrid, d):
    return index_rows(np.arange(grid.n), grid.centers, d)


def trace_rows(res: OptimResult):
    return [
        [i, c, g, s]
        for i, (c, g, s) in enumerate(zip(res.cost_trace, res.grad_norm_trace, res.step_trace))
    ]
