"""Projected limited-memory BFGS with a monotone backtracking line search.

Handles unconstrained and box-constrained problems.  Variables sitting on a
bound with the gradient pointing outward are frozen for the quasi-Newton
step; the trial point is projected back onto the box before the
sufficient-decrease test, so every accepted iterate is feasible.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

TERMINATIONS = ("gradient-tol", "step-tol", "max-iter", "line-search-failure")


class OptimizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimOptions:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-6
    step_tolerance: float = 1e-9
    memory: int = 10
    sufficient_decrease: float = 1e-4
    backtracking: float = 0.5
    max_backtracks: int = 40
    lower: np.ndarray | float | None = None
    upper: np.ndarray | float | None = None

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not self.gradient_tolerance > 0 or not self.step_tolerance > 0:
            raise ValueError("tolerances must be > 0")
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if not 0 < self.sufficient_decrease < 1:
            raise ValueError("sufficient_decrease must lie in (0, 1)")
        if not 0 < self.backtracking < 1:
            raise ValueError("backtracking must lie in (0, 1)")
        if self.max_backtracks < 1:
            raise ValueError("max_backtracks must be >= 1")

    def bounds(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full(n, -np.inf) if self.lower is None else np.broadcast_to(np.asarray(self.lower, float), (n,)).copy()
        hi = np.full(n, np.inf) if self.upper is None else np.broadcast_to(np.asarray(self.upper, float), (n,)).copy()
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")
        return lo, hi


@dataclass
class OptimResult:
    theta_star: np.ndarray
    cost_trace: list[float]
    grad_norm_trace: list[float]
    step_trace: list[float]
    termination_reason: str
    n_cost_evals: int = 0
    n_grad_evals: int = 0
    iterations: int = 0
    message: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def final_cost(self) -> float:
        return self.cost_trace[-1]


def projected_gradient(theta, grad, lo, hi) -> np.ndarray:
    """Gradient with components that would push an at-bound variable outward zeroed."""
    pg = grad.copy()
    pg[(theta <= lo) & (grad > 0)] = 0.0
    pg[(theta >= hi) & (grad < 0)] = 0.0
    return pg


def _two_loop(g, pairs, free):
    q = np.where(free, g, 0.0)
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * np.dot(s[free], q[free])
        q[free] -= a * y[free]
        alphas.append(a)
    s, y, _ = pairs[-1]
    gamma = np.dot(s[free], y[free]) / np.dot(y[free], y[free])
    if not (math.isfinite(gamma) and gamma > 0):
        gamma = 1.0
    r = gamma * q
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * np.dot(y[free], r[free])
        r[free] += (a - b) * s[free]
    r[~free] = 0.0
    return -r


def minimize(objective, theta0, options: OptimOptions | None = None, callback=None) -> OptimResult:
    """Minimize ``objective(theta) -> (cost, gradient)`` from ``theta0``.

    The line search accepts ``f(P(x + a d)) <= f(x) + c1 * g.(P(x + a d) - x)``
    and only ever moves to lower costs, so ``cost_trace`` never increases.
    Non-finite trial values are treated as failed trials.
    """
    opts = options or OptimOptions()
    theta = np.array(theta0, dtype=float).reshape(-1)
    n = theta.size
    lo, hi = opts.bounds(n)
    if np.any(theta < lo) or np.any(theta > hi):
        raise OptimizationError("theta0 lies outside the bounds")

    n_f = n_g = 0

    def evaluate(x):
        nonlocal n_f, n_g
        f, g = objective(x)
        n_f += 1
        n_g += 1
        f = float(f)
        if g is not None:
            g = np.asarray(g, dtype=float).reshape(n)
        return f, g

    f, g = evaluate(theta)
    if not math.isfinite(f) or g is None or not np.all(np.isfinite(g)):
        raise OptimizationError("objective is not finite at theta0")

    pairs: deque = deque(maxlen=opts.memory)
    costs, gnorms, steps = [f], [], [0.0]
    pg = projected_gradient(theta, g, lo, hi)
    gnorms.append(float(np.max(np.abs(pg))) if n else 0.0)
    reason = "max-iter"
    it = 0
    while True:
        if gnorms[-1] <= opts.gradient_tolerance:
            reason = "gradient-tol"
            break
        if it >= opts.max_iterations:
            reason = "max-iter"
            break
        free = ~(((theta <= lo) & (g > 0)) | ((theta >= hi) & (g < 0)))
        if pairs:
            d = _two_loop(g, list(pairs), free)
            if not np.dot(d, g) < 0:
                pairs.clear()
        if not pairs:
            gn = np.linalg.norm(pg)
            d = -pg / gn

        accepted = None
        for attempt in range(2):
            alpha = 1.0
            for _ in range(opts.max_backtracks):
                trial = np.clip(theta + alpha * d, lo, hi)
                decrease = np.dot(g, trial - theta)
                if not decrease < 0:
                    alpha *= opts.backtracking
                    continue
                f_t, g_t = evaluate(trial)
                if (
                    math.isfinite(f_t)
                    and g_t is not None
                    and np.all(np.isfinite(g_t))
                    and f_t <= f + opts.sufficient_decrease * decrease
                    and f_t < f
                ):
                    accepted = (trial, f_t, g_t)
                    break
                alpha *= opts.backtracking
            if accepted is not None or not pairs:
                break
            # quasi-Newton direction failed: retry once along steepest descent
            pairs.clear()
            d = -pg / np.linalg.norm(pg)
        if accepted is None:
            reason = "line-search-failure"
            break

        trial, f_new, g_new = accepted
        s = trial - theta
        y = g_new - g
        sy = float(np.dot(s, y))
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        theta, f, g = trial, f_new, g_new
        it += 1
        step = float(np.max(np.abs(s)))
        pg = projected_gradient(theta, g, lo, hi)
        costs.append(f)
        gnorms.append(float(np.max(np.abs(pg))))
        steps.append(step)
        if callback is not None:
            callback(it, theta, f)
        log.debug("iter %d cost %.6g |pg| %.3g step %.3g", it, f, gnorms[-1], step)
        if step <= opts.step_tolerance:
            reason = "step-tol"
            break

    return OptimResult(
        theta_star=theta,
        cost_trace=costs,
        grad_norm_trace=gnorms,
        step_trace=steps,
        termination_reason=reason,
        n_cost_evals=n_f,
        n_grad_evals=n_g,
        iterations=it,
    )


def numeric_gradient(cost_fn, theta, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a cost-only function."""
    if not step > 0:
        raise ValueError("step must be > 0")
    theta = np.array(theta, dtype=float).reshape(-1)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = step
        grad[i] = (cost_fn(theta + e) - cost_fn(theta - e)) / (2.0 * step)
    return grad
