"""Kernel-based space-filling cost over a gridded region of interest.

For joint samples ``z_k`` and grid centers ``c_i`` the cost is

    C = (1/n) * sum_i 1 / (eps + d_i),
    d_i = sum_k exp(-0.5 * sum_j (c_ij - z_kj)**2 / var_j).

Two evaluation paths give the same numbers: a tensor-product path for
uniform grids (the kernel factorizes per dimension, so each ``d_i`` is a
contraction of per-axis factors) and a dense path over explicit centers,
chunked and optionally run on a thread pool.  Chunk results are reduced in
chunk order, so output does not depend on the thread count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

CHUNK = 256


def n_threads() -> int:
    """Thread cap from ``SPACEFILL_THREADS`` (0 or unset means CPU count)."""
    raw = os.environ.get("SPACEFILL_THREADS", "0").strip() or "0"
    n = int(raw)
    if n < 0:
        raise ValueError("SPACEFILL_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


@dataclass(frozen=True)
class DomainBox:
    """Axis-aligned box over ``z = [u, x]``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("lower and upper must have the same length")
        if not np.all(lo < hi):
            raise ValueError(f"need lower < upper in every dimension, got {lo} / {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def n_z(self) -> int:
        return self.lower.size

    def points_for_spacing(self, spacing) -> tuple[int, ...]:
        """Grid points per dimension for a requested center spacing.

        The spacing must split the range into a whole number of intervals
        (within 0.1 %, which absorbs rounded spacings such as 42.1053).
        """
        spacing = np.asarray(spacing, dtype=float).reshape(-1)
        if spacing.shape != self.lower.shape or np.any(spacing <= 0):
            raise ValueError("spacing must be positive, one entry per dimension")
        ratio = (self.upper - self.lower) / spacing
        intervals = np.rint(ratio)
        if np.any(intervals < 1) or np.any(np.abs(ratio - intervals) > 1e-3 * ratio):
            raise ValueError(f"spacing {spacing} does not evenly divide the box ranges")
        return tuple(int(i) + 1 for i in intervals)


@dataclass(frozen=True)
class DomainGrid:
    """Centers ``c_i`` (``n x n_z``).  ``axes`` is set for tensor-product grids."""

    centers: np.ndarray
    box: DomainBox | None = None
    points_per_dim: tuple[int, ...] | None = None
    axes: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        if centers.shape[0] < 1:
            raise ValueError("grid needs at least one center")
        if self.box is not None:
            if centers.shape[1] != self.box.n_z:
                raise ValueError("center dimension differs from box dimension")
            tol = 1e-12 * np.maximum(1.0, np.abs(self.box.upper - self.box.lower))
            if np.any(centers < self.box.lower - tol) or np.any(centers > self.box.upper + tol):
                raise ValueError("grid centers must lie inside the box")
        object.__setattr__(self, "centers", centers)

    @property
    def n(self) -> int:
        return self.centers.shape[0]

    @property
    def n_z(self) -> int:
        return self.centers.shape[1]

    @classmethod
    def from_centers(cls, centers, box: DomainBox | None = None) -> "DomainGrid":
        return cls(centers, box)


def build_uniform_grid(box: DomainBox, points_per_dim) -> DomainGrid:
    """Tensor grid including both endpoints in every dimension.

    Centers are ordered with the last dimension varying fastest.
    """
    ppd = tuple(int(p) for p in np.broadcast_to(points_per_dim, (box.n_z,)))
    if any(p < 2 for p in ppd):
        raise ValueError("need at least 2 points per dimension")
    axes = tuple(np.linspace(lo, hi, p) for lo, hi, p in zip(box.lower, box.upper, ppd))
    mesh = np.meshgrid(*axes, indexing="ij")
    centers = np.column_stack([m.reshape(-1) for m in mesh])
    return DomainGrid(centers, box, ppd, axes)


@dataclass(frozen=True)
class KernelConfig:
    """Diagonal kernel variances ``var_j`` (units of ``z_j`` squared) and regularizer ``epsilon``.

    ``cutoff`` optionally drops kernel terms beyond that Mahalanobis distance.
    """

    variances: np.ndarray
    epsilon: float = 1e-3
    cutoff: float | None = None

    def __post_init__(self):
        var = np.asarray(self.variances, dtype=float).reshape(-1)
        if var.size == 0 or not np.all(var > 0) or not np.all(np.isfinite(var)):
            raise ValueError("kernel variances must be positive and finite")
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValueError("epsilon must be > 0")
        if self.cutoff is not None and not self.cutoff > 0:
            raise ValueError("cutoff must be > 0")
        object.__setattr__(self, "variances", var)


def _samples(samples, n_z: int) -> np.ndarray:
    z = np.asarray(samples, dtype=float)
    if z.size == 0:
        return np.empty((0, n_z))
    z = z.reshape(-1, n_z) if z.ndim == 1 and n_z == 1 else np.atleast_2d(z)
    if z.shape[1] != n_z:
        raise ValueError(f"samples have dimension {z.shape[1]}, expected {n_z}")
    return z


def _check_kernel(grid: DomainGrid, kernel: KernelConfig):
    if kernel.variances.size != grid.n_z:
        raise ValueError(
            f"kernel has {kernel.variances.size} variances for a {grid.n_z}-dimensional grid"
        )


def membership(center, samples, kernel: KernelConfig) -> float:
    """Squared-exponential weighted count ``d_i`` of samples near one center."""
    center = np.asarray(center, dtype=float).reshape(-1)
    z = _samples(samples, center.size)
    if kernel.variances.size != center.size:
        raise ValueError("kernel dimension differs from center dimension")
    if z.shape[0] == 0:
        return 0.0
    q = np.sum((center - z) ** 2 / kernel.variances, axis=1)
    k = np.exp(-0.5 * q)
    if kernel.cutoff is not None:
        k[q > kernel.cutoff**2] = 0.0
    return float(k.sum())


# -- dense path --------------------------------------------------------------


def _dense_kernel(centers, z, kernel):
    q = np.zeros((centers.shape[0], z.shape[0]))
    for j, var in enumerate(kernel.variances):
        q += (centers[:, j, None] - z[None, :, j]) ** 2 / var
    k = np.exp(-0.5 * q)
    if kernel.cutoff is not None:
        k[q > kernel.cutoff**2] = 0.0
    return k


def _map_chunks(fn, n: int):
    starts = range(0, n, CHUNK)
    workers = min(n_threads(), len(starts))
    if workers <= 1:
        return [fn(s) for s in starts]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, starts))


def _dense_occupancy(z, grid, kernel):
    c = grid.centers
    parts = _map_chunks(lambda s: _dense_kernel(c[s : s + CHUNK], z, kernel).sum(axis=1), grid.n)
    return np.concatenate(parts)


def _dense_gradient(z, grid, kernel, w):
    c = grid.centers

    def chunk(s):
        cc = c[s : s + CHUNK]
        h = _dense_kernel(cc, z, kernel) * w[s : s + CHUNK, None]
        return np.column_stack(
            [np.sum((cc[:, j, None] - z[None, :, j]) * h, axis=0) for j in range(z.shape[1])]
        )

    g = np.zeros_like(z)
    for part in _map_chunks(chunk, grid.n):
        g += part
    return -g / kernel.variances


# -- tensor path -------------------------------------------------------------


def _axis_factors(z, grid, kernel):
    return [
        np.exp(-0.5 * (ax[:, None] - z[None, :, j]) ** 2 / kernel.variances[j])
        for j, ax in enumerate(grid.axes)
    ]


def _tensor_occupancy(z, grid, kernel, factors=None):
    e = factors if factors is not None else _axis_factors(z, grid, kernel)
    n_k = z.shape[0]
    if len(e) == 1:
        return e[0].sum(axis=1)
    p = e[0]
    for f in e[1:-1]:
        p = (p[:, None, :] * f[None, :, :]).reshape(-1, n_k)
    return (p @ e[-1].T).reshape(-1)


def _tensor_gradient(z, grid, kernel, w, factors):
    shape = grid.points_per_dim
    w = w.reshape(shape)
    n_dim = len(shape)
    g = np.empty_like(z)
    for j in range(n_dim):
        others = [o for o in range(n_dim) if o != j]
        t = np.moveaxis(w, j, 0)
        if others:
            t = np.tensordot(t, factors[others[-1]], axes=([t.ndim - 1], [0]))
            for o in reversed(others[:-1]):
                t = np.einsum("...ak,ak->...k", t, factors[o])
        else:
            t = np.broadcast_to(t[:, None], (shape[0], z.shape[0]))
        h = t * factors[j]
        g[:, j] = np.sum((grid.axes[j][:, None] - z[None, :, j]) * h, axis=0)
    return -g / kernel.variances


def _use_tensor(grid, kernel) -> bool:
    return grid.axes is not None and kernel.cutoff is None


# -- public evaluation ---------------------------------------------------------


def grid_occupancy(samples, grid: DomainGrid, kernel: KernelConfig) -> np.ndarray:
    """``d_i`` for every center, in center order."""
    _check_kernel(grid, kernel)
    z = _samples(samples, grid.n_z)
    if z.shape[0] == 0:
        return np.zeros(grid.n)
    if _use_tensor(grid, kernel):
        return _tensor_occupancy(z, grid, kernel)
    return _dense_occupancy(z, grid, kernel)


def cost(samples, grid: DomainGrid, kernel: KernelConfig) -> float:
    d = grid_occupancy(samples, grid, kernel)
    return float(np.mean(1.0 / (kernel.epsilon + d)))


def cost_and_gradient(samples, grid: DomainGrid, kernel: KernelConfig) -> tuple[float, np.ndarray]:
    """Cost and ``dC/dz_k`` (shape ``N x n_z``) sharing one kernel evaluation."""
    _check_kernel(grid, kernel)
    z = _samples(samples, grid.n_z)
    if z.shape[0] == 0:
        return 1.0 / kernel.epsilon, np.zeros((0, grid.n_z))
    if _use_tensor(grid, kernel):
        factors = _axis_factors(z, grid, kernel)
        d = _tensor_occupancy(z, grid, kernel, factors)
    else:
        d = _dense_occupancy(z, grid, kernel)
    inv = 1.0 / (kernel.epsilon + d)
    c = float(np.mean(inv))
    w = inv * inv / grid.n
    if _use_tensor(grid, kernel):
        g = _tensor_gradient(z, grid, kernel, w, factors)
    else:
        g = _dense_gradient(z, grid, kernel, w)
    return c, g


def cost_gradient_samples(samples, grid: DomainGrid, kernel: KernelConfig) -> np.ndarray:
    return cost_and_gradient(samples, grid, kernel)[1]


def chain_sample_gradient(grad_samples: np.ndarray, sample_sens) -> np.ndarray:
    """``sum_k (dz_k/dtheta)^T dC/dz_k`` for a precomputed sample gradient."""
    dz = getattr(sample_sens, "sample_sens", sample_sens)
    dz = np.asarray(dz, dtype=float)
    if dz.ndim != 3 or dz.shape[:2] != grad_samples.shape:
        raise ValueError(
            f"sensitivities of shape {dz.shape} do not match samples {grad_samples.shape}"
        )
    return np.einsum("kj,kjp->p", grad_samples, dz)


def cost_gradient_params(samples, sample_sens, grid: DomainGrid, kernel: KernelConfig) -> np.ndarray:
    """``dC/dtheta`` given ``dz_k/dtheta`` (a SensitivityTrajectory or an ``N x n_z x n_theta`` array)."""
    return chain_sample_gradient(cost_gradient_samples(samples, grid, kernel), sample_sens)
