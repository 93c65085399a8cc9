"""Parametrized excitation signals and their parameter Jacobians."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class MultisineSpec:
    """Periodic multisine exciting harmonics ``line_min..line_max`` of ``f0 = fs / N``.

    ``amplitudes`` and ``phases`` hold one entry per excited line, in line order.
    """

    N: int
    fs: float
    line_min: int
    line_max: int
    amplitudes: np.ndarray
    phases: np.ndarray

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not self.fs > 0:
            raise ValueError("fs must be > 0")
        if not (1 <= self.line_min <= self.line_max and 2 * self.line_max < self.N):
            raise ValueError(
                f"need 1 <= line_min <= line_max < N/2, got lines "
                f"{self.line_min}..{self.line_max} with N={self.N}"
            )
        amps = np.asarray(self.amplitudes, dtype=float)
        if amps.ndim == 0:
            amps = np.full(self.F, float(amps))
        phases = np.asarray(self.phases, dtype=float)
        if amps.shape != (self.F,) or phases.shape != (self.F,):
            raise ValueError(f"amplitudes and phases must both have length F={self.F}")
        if np.any(amps < 0):
            raise ValueError("amplitudes must be >= 0")
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "phases", phases)

    @property
    def F(self) -> int:
        return self.line_max - self.line_min + 1

    @property
    def lines(self) -> np.ndarray:
        return np.arange(self.line_min, self.line_max + 1)

    @property
    def f0(self) -> float:
        return self.fs / self.N

    def with_phases(self, phases) -> "MultisineSpec":
        return MultisineSpec(self.N, self.fs, self.line_min, self.line_max, self.amplitudes, phases)


@dataclass(frozen=True)
class DirectSpec:
    """Direct parametrization ``u_k = theta_k`` with optional amplitude bounds."""

    samples: np.ndarray
    bounds: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=float).reshape(-1))
        if self.bounds is not None:
            lo, hi = (float(b) for b in self.bounds)
            if lo > hi:
                raise ValueError(f"bounds must satisfy lo <= hi, got [{lo}, {hi}]")
            object.__setattr__(self, "bounds", (lo, hi))


def _angles(spec: MultisineSpec) -> np.ndarray:
    # f0/fs = 1/N; reduce l*k mod N in integers so large k keeps full precision
    k = np.arange(spec.N)
    lk = np.outer(k, spec.lines) % spec.N
    return TWO_PI * lk / spec.N + spec.phases


def multisine_generate(spec: MultisineSpec) -> np.ndarray:
    """One period of ``sum_l A_l sin(2 pi l k / N + phi_l)``, ``k = 0..N-1``."""
    return np.sin(_angles(spec)) @ spec.amplitudes


def multisine_jacobian(spec: MultisineSpec, free=("phases",)) -> np.ndarray:
    """``du_k/dtheta`` as an ``N x n_theta`` matrix.

    Columns are ordered as ``free``: phase block first when ``free`` is
    ``("phases", "amplitudes")``, and so on.
    """
    ang = _angles(spec)
    blocks = []
    for name in free:
        if name == "phases":
            blocks.append(np.cos(ang) * spec.amplitudes)
        elif name == "amplitudes":
            blocks.append(np.sin(ang))
        else:
            raise ValueError(f"unknown multisine parameter {name!r}")
    if not blocks:
        return np.zeros((spec.N, 0))
    return np.hstack(blocks)


def amplitude_for_target_std(target_std: float, F: int) -> float:
    """Equal per-line amplitude giving a multisine of RMS ``target_std``."""
    if F < 1:
        raise ValueError("F must be >= 1")
    if target_std < 0:
        raise ValueError("target_std must be >= 0")
    return target_std * math.sqrt(2.0 / F)


def schroeder_phases(F: int) -> np.ndarray:
    """Schroeder phases ``-l (l - 1) pi / F`` for ``l = 1..F``."""
    if F < 1:
        raise ValueError("F must be >= 1")
    l = np.arange(1, F + 1, dtype=float)
    return -l * (l - 1.0) * np.pi / F


def random_phases(F: int, seed) -> np.ndarray:
    """Uniform phases on [0, 2 pi) from a seeded generator."""
    return np.random.default_rng(seed).uniform(0.0, TWO_PI, F)


def crest_factor(u) -> float:
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.size == 0:
        raise ValueError("crest factor of an empty signal")
    rms = math.sqrt(float(np.mean(u * u)))
    if rms == 0.0:
        raise ValueError("crest factor undefined for an all-zero signal")
    return float(np.max(np.abs(u))) / rms


def direct_generate(spec: DirectSpec) -> np.ndarray:
    return spec.samples.copy()


def direct_jacobian(spec: DirectSpec) -> np.ndarray:
    return np.eye(spec.samples.size)


def amplitude_spectrum(u) -> np.ndarray:
    """One-sided amplitude spectrum at lines ``0..N//2``.

    A sine of amplitude ``A`` on line ``l`` (``0 < l < N/2``) reports ``A``;
    DC and Nyquist bins are scaled by ``1/N``.
    """
    u = np.asarray(u, dtype=float).reshape(-1)
    n = u.size
    if n == 0:
        raise ValueError("spectrum of an empty signal")
    mag = np.abs(np.fft.rfft(u)) / n
    mag[1:] *= 2.0
    if n % 2 == 0:
        mag[-1] /= 2.0
    return mag


# ---------------------------------------------------------------------------
# Parametrizations used by the design loop
# ---------------------------------------------------------------------------


class MultisinePhases:
    """Fixed-amplitude multisine whose phases are the design parameters."""

    kind = "multisine"

    def __init__(self, N: int, fs: float, line_min: int, line_max: int, amplitudes):
        self.template = MultisineSpec(
            N, fs, line_min, line_max, amplitudes, np.zeros(line_max - line_min + 1)
        )
        self.bounds = None

    @property
    def n_theta(self) -> int:
        return self.template.F

    def spec(self, theta) -> MultisineSpec:
        return self.template.with_phases(theta)

    def signal(self, theta) -> np.ndarray:
        return multisine_generate(self.spec(theta))

    def jacobian(self, theta) -> np.ndarray:
        return multisine_jacobian(self.spec(theta), ("phases",))


class DirectSamples:
    """Every input sample is a design parameter."""

    kind = "direct"

    def __init__(self, N: int, bounds: tuple[float, float] | None = None):
        self.N = N
        self.bounds = bounds

    @property
    def n_theta(self) -> int:
        return self.N

    def signal(self, theta) -> np.ndarray:
        return direct_generate(DirectSpec(theta, self.bounds))

    def jacobian(self, theta) -> np.ndarray:
        return direct_jacobian(DirectSpec(theta, self.bounds))
