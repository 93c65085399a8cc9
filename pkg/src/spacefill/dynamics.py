"""Discrete-time nonlinear state-space models, simulation and sensitivities.

A model maps ``(x_k, u_k)`` to ``x_{k+1}``.  Models with a continuous-time
right-hand side subclass :class:`EulerModel` and are discretized with the
forward Euler rule ``x_{k+1} = x_k + Ts * rhs(x_k, u_k)``.

Sensitivities ``dx_k/dtheta`` are propagated forward alongside the state:

    S_{k+1} = (dF/dx) S_k + (dF/du) dU_k

where ``F`` is the discrete map and ``dU_k = du_k/dtheta``.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass, field

import numba
import numpy as np

DIVERGENCE_LIMIT = 1e12


class SimulationError(RuntimeError):
    """Base class for numerical failures while simulating a model."""


class DivergenceError(SimulationError):
    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"state diverged at step {step}")


class SteadyStateError(SimulationError):
    def __init__(self, mismatch: float, periods: int):
        self.mismatch = mismatch
        self.periods = periods
        super().__init__(
            f"steady state not reached after {periods} periods "
            f"(last relative mismatch {mismatch:.3e})"
        )


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


class StateSpaceModel(abc.ABC):
    """Known system ``x+ = f(x, u)``, ``y = g(x, u)``."""

    n_x: int
    n_u: int
    n_y: int

    @abc.abstractmethod
    def f(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Discrete state map."""

    @abc.abstractmethod
    def jacobians(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(df/dx, df/du)`` of the discrete map, shapes (n_x, n_x) and (n_x, n_u)."""

    def g(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float)[: self.n_y].copy()


class EulerModel(StateSpaceModel):
    """Continuous-time model discretized by forward Euler with sample time ``Ts``."""

    Ts: float

    @abc.abstractmethod
    def rhs(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Continuous-time state derivative."""

    @abc.abstractmethod
    def rhs_jacobians(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Jacobians of :meth:`rhs` with respect to state and input."""

    def f(self, x, u):
        x = np.asarray(x, dtype=float)
        return x + self.Ts * self.rhs(x, u)

    def jacobians(self, x, u):
        a, b = self.rhs_jacobians(x, u)
        return np.eye(self.n_x) + self.Ts * a, self.Ts * b


@dataclass(frozen=True)
class LinearModel(StateSpaceModel):
    """Discrete LTI system ``x+ = A x + B u``, ``y = C x``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray | None = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float).reshape(A.shape[0], -1)
        if A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        C = np.eye(A.shape[0]) if self.C is None else np.atleast_2d(np.asarray(self.C, dtype=float))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]

    @property
    def n_y(self):
        return self.C.shape[0]

    def f(self, x, u):
        return self.A @ np.asarray(x, dtype=float) + self.B @ np.atleast_1d(u)

    def jacobians(self, x, u):
        return self.A, self.B

    def g(self, x, u):
        return self.C @ np.asarray(x, dtype=float)


@dataclass(frozen=True)
class MsdModel(EulerModel):
    """Mass on a rail held by an inclined spring, with a linear damper.

    State ``x = [position, velocity]``, input ``F`` (force, N).  Units: ``m`` kg,
    ``s`` N/m, ``a`` (stretched length) m, ``l`` (tensionless length) m,
    ``c`` N s/m, ``Ts`` s.
    """

    m: float = 5.0
    s: float = 800.0
    a: float = 0.25
    l: float = 0.17
    c: float = 10.0
    Ts: float = 0.01
    n_x: int = field(default=2, init=False, repr=False)
    n_u: int = field(default=1, init=False, repr=False)
    n_y: int = field(default=1, init=False, repr=False)

    def __post_init__(self):
        for name in ("m", "s", "a", "Ts"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"MsdModel.{name} must be > 0, got {value}")
        if not (math.isfinite(self.c) and self.c >= 0):
            raise ValueError(f"MsdModel.c must be >= 0, got {self.c}")
        if not math.isfinite(self.l):
            raise ValueError("MsdModel.l must be finite")

    def rhs(self, x, u):
        return msd_rhs(x, float(np.asarray(u).reshape(-1)[0]), self)

    def rhs_jacobians(self, x, u):
        x1, x2 = float(x[0]), float(x[1])
        r2 = x1 * x1 + self.a * self.a
        dk = (-self.s + self.s * self.l * self.a * self.a / (r2 * math.sqrt(r2))) / self.m
        A = np.array([[0.0, 1.0], [dk, -self.c / self.m]])
        B = np.array([[0.0], [1.0 / self.m]])
        return A, B


def msd_rhs(x, F: float, params: MsdModel) -> np.ndarray:
    """State derivative of the mass-spring-damper for force ``F``."""
    x1, x2 = float(x[0]), float(x[1])
    p = params
    spring = -p.s * x1 + p.s * p.l * x1 / math.sqrt(x1 * x1 + p.a * p.a)
    return np.array([x2, (F + spring - p.c * x2) / p.m])


def euler_step(model: EulerModel, x, u) -> np.ndarray:
    """One forward Euler step ``x + Ts * rhs(x, u)``."""
    x = np.asarray(x, dtype=float)
    return x + model.Ts * model.rhs(x, np.atleast_1d(u))


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """``N`` joint samples; ``states[k]`` is the state at which ``inputs[k]`` is applied."""

    states: np.ndarray
    inputs: np.ndarray
    Ts: float = 1.0
    periods: int = 0

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        inputs = np.asarray(self.inputs, dtype=float)
        if inputs.ndim == 1:
            inputs = inputs[:, None]
        if states.ndim != 2 or inputs.ndim != 2:
            raise ValueError("states and inputs must be 2-D (N, dim)")
        if states.shape[0] != inputs.shape[0]:
            raise ValueError(
                f"states and inputs differ in length: {states.shape[0]} != {inputs.shape[0]}"
            )
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "inputs", inputs)

    def __len__(self):
        return self.states.shape[0]

    @property
    def samples(self) -> np.ndarray:
        """Joint samples ``z_k = [u_k, x_k]``, shape (N, n_u + n_x)."""
        return np.hstack([self.inputs, self.states])


@dataclass(frozen=True)
class SensitivityTrajectory:
    state_sens: np.ndarray  # (N, n_x, n_theta)
    input_sens: np.ndarray  # (N, n_u, n_theta)

    def __post_init__(self):
        xs = np.asarray(self.state_sens, dtype=float)
        us = np.asarray(self.input_sens, dtype=float)
        if us.ndim == 2:
            us = us[:, None, :]
        if xs.ndim != 3 or us.ndim != 3:
            raise ValueError("sensitivities must be 3-D (N, dim, n_theta)")
        if xs.shape[0] != us.shape[0] or xs.shape[2] != us.shape[2]:
            raise ValueError(
                f"inconsistent sensitivity shapes {xs.shape} and {us.shape}"
            )
        object.__setattr__(self, "state_sens", xs)
        object.__setattr__(self, "input_sens", us)

    @property
    def n_theta(self) -> int:
        return self.state_sens.shape[2]

    @property
    def sample_sens(self) -> np.ndarray:
        """``dz_k/dtheta``, shape (N, n_u + n_x, n_theta)."""
        return np.concatenate([self.input_sens, self.state_sens], axis=1)


def _as_inputs(model: StateSpaceModel, inputs) -> np.ndarray:
    u = np.asarray(inputs, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    if u.ndim != 2 or u.shape[1] != model.n_u:
        raise ValueError(f"inputs must have shape (N, {model.n_u}), got {np.shape(inputs)}")
    if u.shape[0] < 1:
        raise ValueError("need at least one input sample")
    return u


def _as_input_sens(model: StateSpaceModel, input_sens, n: int) -> np.ndarray:
    du = np.asarray(input_sens, dtype=float)
    if du.ndim == 2:
        if model.n_u != 1:
            raise ValueError("2-D input sensitivities require a single-input model")
        du = du[:, None, :]
    if du.shape[0] != n or du.shape[1] != model.n_u:
        raise ValueError(
            f"input sensitivities must have shape ({n}, {model.n_u}, n_theta), got {du.shape}"
        )
    return du


def _check_state(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_LIMIT:
        raise DivergenceError(step)


def _initial_state(model, x0) -> np.ndarray:
    x = np.zeros(model.n_x) if x0 is None else np.asarray(x0, dtype=float).reshape(model.n_x)
    return x.copy()


def simulate(model: StateSpaceModel, inputs, x0=None) -> Trajectory:
    """Run the discrete recursion; ``states[0] = x0`` and the output has ``len(inputs)`` samples."""
    u = _as_inputs(model, inputs)
    n = u.shape[0]
    states = np.empty((n, model.n_x))
    x = _initial_state(model, x0)
    for k in range(n):
        states[k] = x
        x = model.f(x, u[k])
        _check_state(x, k + 1)
    return Trajectory(states, u, getattr(model, "Ts", 1.0))


def simulate_with_sensitivities(
    model: StateSpaceModel, inputs, input_sens, x0=None, x0_sens=None
) -> tuple[Trajectory, SensitivityTrajectory]:
    u = _as_inputs(model, inputs)
    n = u.shape[0]
    du = _as_input_sens(model, input_sens, n)
    n_theta = du.shape[2]
    S = np.zeros((model.n_x, n_theta)) if x0_sens is None else np.array(x0_sens, dtype=float)
    x = _initial_state(model, x0)
    states = np.empty((n, model.n_x))
    sens = np.empty((n, model.n_x, n_theta))
    for k in range(n):
        states[k] = x
        sens[k] = S
        A, B = model.jacobians(x, u[k])
        x = model.f(x, u[k])
        _check_state(x, k + 1)
        S = A @ S + B @ du[k]
    traj = Trajectory(states, u, getattr(model, "Ts", 1.0))
    return traj, SensitivityTrajectory(sens, du)


# ---------------------------------------------------------------------------
# Periodic steady state
# ---------------------------------------------------------------------------


def _period_mismatch(x_end, x_start) -> float:
    return float(np.linalg.norm(x_end - x_start) / (1.0 + np.linalg.norm(x_start)))


def simulate_steady_state(
    model: StateSpaceModel, periodic_inputs, x0=None, max_periods: int = 50, tol: float = 1e-9
) -> Trajectory:
    """Repeat one input period until the period-boundary state settles.

    Returns the last simulated period.  Its wrap-around state (one step past
    the final sample) matches ``states[0]`` to ``tol * (1 + |states[0]|)``.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    if isinstance(model, MsdModel):
        u = _as_inputs(model, periodic_inputs)
        traj, _ = _msd_steady_state(model, u, np.zeros((u.shape[0], 1, 0)), x0, max_periods, tol)
        return traj
    u = _as_inputs(model, periodic_inputs)
    x_start = _initial_state(model, x0)
    mismatch = math.inf
    for period in range(1, max_periods + 1):
        traj = simulate(model, u, x_start)
        x_end = model.f(traj.states[-1], u[-1])
        mismatch = _period_mismatch(x_end, x_start)
        if mismatch <= tol:
            return Trajectory(traj.states, u, traj.Ts, period)
        x_start = x_end
    raise SteadyStateError(mismatch, max_periods)


def simulate_steady_state_with_sensitivities(
    model: StateSpaceModel,
    periodic_inputs,
    input_sens,
    x0=None,
    max_periods: int = 50,
    tol: float = 1e-9,
) -> tuple[Trajectory, SensitivityTrajectory]:
    """Steady-state period plus ``dx_k/dtheta`` accumulated over all simulated periods.

    The sensitivity seed is zero at the very first sample; each period reuses
    the same ``du/dtheta`` since the parameters shape every period alike.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    u = _as_inputs(model, periodic_inputs)
    du = _as_input_sens(model, input_sens, u.shape[0])
    if isinstance(model, MsdModel):
        return _msd_steady_state(model, u, du, x0, max_periods, tol)
    x_start = _initial_state(model, x0)
    S = None
    mismatch = math.inf
    for period in range(1, max_periods + 1):
        traj, sens = simulate_with_sensitivities(model, u, du, x_start, S)
        A, B = model.jacobians(traj.states[-1], u[-1])
        x_end = model.f(traj.states[-1], u[-1])
        S = A @ sens.state_sens[-1] + B @ du[-1]
        mismatch = _period_mismatch(x_end, x_start)
        if mismatch <= tol:
            return Trajectory(traj.states, u, traj.Ts, period), sens
        x_start = x_end
    raise SteadyStateError(mismatch, max_periods)


@numba.njit(cache=True)
def _msd_kernel(u, du, x1, x2, m, s, a, l, c, Ts, max_periods, tol):
    # status: 0 converged, 1 diverged (fail_step set), 2 not converged
    n = u.shape[0]
    n_theta = du.shape[1]
    states = np.empty((n, 2))
    sens = np.empty((n, 2, n_theta))
    S0 = np.zeros(n_theta)
    S1 = np.zeros(n_theta)
    a2 = a * a
    mismatch = np.inf
    step = 0
    for period in range(1, max_periods + 1):
        s1 = x1
        s2 = x2
        for k in range(n):
            states[k, 0] = x1
            states[k, 1] = x2
            for j in range(n_theta):
                sens[k, 0, j] = S0[j]
                sens[k, 1, j] = S1[j]
            r2 = x1 * x1 + a2
            r = np.sqrt(r2)
            acc = (u[k] + (-s * x1 + s * l * x1 / r) - c * x2) / m
            dk = (-s + s * l * a2 / (r2 * r)) / m
            for j in range(n_theta):
                t0 = S0[j] + Ts * S1[j]
                t1 = S1[j] + Ts * (dk * S0[j] - (c / m) * S1[j] + du[k, j] / m)
                S0[j] = t0
                S1[j] = t1
            x1, x2 = x1 + Ts * x2, x2 + Ts * acc
            step += 1
            if not (np.isfinite(x1) and np.isfinite(x2)) or max(abs(x1), abs(x2)) > 1e12:
                return states, sens, period, 1, mismatch, step
        mismatch = np.sqrt((x1 - s1) ** 2 + (x2 - s2) ** 2) / (1.0 + np.sqrt(s1 * s1 + s2 * s2))
        if mismatch <= tol:
            return states, sens, period, 0, mismatch, step
    return states, sens, max_periods, 2, mismatch, step


def _msd_steady_state(model: MsdModel, u, du, x0, max_periods, tol):
    x = _initial_state(model, x0)
    states, sens, periods, status, mismatch, step = _msd_kernel(
        np.ascontiguousarray(u[:, 0]),
        np.ascontiguousarray(du[:, 0, :]),
        float(x[0]),
        float(x[1]),
        model.m,
        model.s,
        model.a,
        model.l,
        model.c,
        model.Ts,
        int(max_periods),
        float(tol),
    )
    if status == 1:
        raise DivergenceError(int(step))
    if status == 2:
        raise SteadyStateError(float(mismatch), int(periods))
    traj = Trajectory(states, u, model.Ts, int(periods))
    return traj, SensitivityTrajectory(sens, du)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def trajectory_columns(traj: Trajectory, outputs: np.ndarray | None = None) -> tuple[list[str], np.ndarray]:
    """Header and rows for the ``k, t, u, x1, x2[, y...]`` CSV layout."""
    n = len(traj)
    n_u = traj.inputs.shape[1]
    header = ["k", "t"]
    header += ["u"] if n_u == 1 else [f"u{i + 1}" for i in range(n_u)]
    header += [f"x{i + 1}" for i in range(traj.states.shape[1])]
    cols = [np.arange(n, dtype=float), np.arange(n) * traj.Ts, traj.inputs, traj.states]
    if outputs is not None:
        outputs = np.asarray(outputs, dtype=float).reshape(n, -1)
        header += ["y"] if outputs.shape[1] == 1 else [f"y{i + 1}" for i in range(outputs.shape[1])]
        cols.append(outputs)
    rows = np.column_stack([np.asarray(c, dtype=float).reshape(n, -1) for c in cols]) if n else np.empty((0, len(header)))
    return header, rows
