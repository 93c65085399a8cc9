import dataclasses

import pytest

from spacefill.config import (
    DomainConfig,
    ExperimentConfig,
    InputConfig,
    KernelSettings,
    OptimizerConfig,
    benchmark_config,
)

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def record_criterion():
    """Log one acceptance line; the summary is printed at the end of the session."""

    def record(name: str, passed: bool, detail: str = ""):
        _ACCEPTANCE.append((name, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


def small_config(**overrides) -> ExperimentConfig:
    """Seconds-scale variant of the benchmark: short period, coarse grid, few iterations."""
    cfg = ExperimentConfig(
        # band kept above resonance so the steady state contracts for every seed
        input=InputConfig(N=256, line_min=6, line_max=40, target_std=80.0, seed=3),
        domain=DomainConfig(
            lower=(-250.0, -0.1, -2.5), upper=(250.0, 0.1, 2.5), spacing=None, points_per_dim=(6, 6, 6)
        ),
        kernel=KernelSettings(variances=(100.0**2, 0.04**2, 1.0**2), epsilon=1e-3),
        optimizer=OptimizerConfig(max_iterations=15),
    )
    for section, values in overrides.items():
        cfg = dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **values)})
    return cfg


@pytest.fixture
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def bench_cfg():
    return benchmark_config()
