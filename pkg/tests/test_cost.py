import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spacefill.cost import (
    DomainBox,
    DomainGrid,
    KernelConfig,
    build_uniform_grid,
    cost,
    cost_and_gradient,
    cost_gradient_params,
    cost_gradient_samples,
    grid_occupancy,
    membership,
)
from spacefill.dynamics import SensitivityTrajectory


def naive_occupancy(samples, centers, variances):
    """Independent oracle: plain double loop with math.exp."""
    d = []
    for c in centers:
        total = 0.0
        for z in samples:
            q = 0.0
            for j in range(len(c)):
                q += (c[j] - z[j]) ** 2 / variances[j]
            total += math.exp(-0.5 * q)
        d.append(total)
    return d


def naive_cost(samples, centers, variances, eps):
    d = naive_occupancy(samples, centers, variances)
    return sum(1.0 / (eps + di) for di in d) / len(d)


def random_instance(rng, n_z=3, N=20, ppd=4):
    box = DomainBox(-np.ones(n_z), np.ones(n_z))
    grid = build_uniform_grid(box, [ppd] * n_z)
    kernel = KernelConfig(rng.uniform(0.05, 0.5, n_z) ** 2, epsilon=rng.uniform(1e-3, 1e-1))
    samples = rng.uniform(-1.2, 1.2, (N, n_z))
    return samples, grid, kernel


def dense(grid):
    return DomainGrid.from_centers(grid.centers, grid.box)


# -- types ---------------------------------------------------------------------------


def test_box_and_kernel_validation():
    with pytest.raises(ValueError):
        DomainBox([0.0, 1.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        KernelConfig([1.0, 0.0])
    with pytest.raises(ValueError):
        KernelConfig([1.0], epsilon=-0.1)
    with pytest.raises(ValueError):
        DomainGrid([[2.0]], DomainBox([0.0], [1.0]))


def test_benchmark_grid_spacing():
    box = DomainBox([-400, -2, -20], [400, 2, 20])
    ppd = box.points_for_spacing([42.1053, 0.2105, 2.1053])
    assert ppd == (20, 20, 20)
    grid = build_uniform_grid(box, ppd)
    assert grid.n == 8000
    for j, h in enumerate((42.1053, 0.2105, 2.1053)):
        np.testing.assert_allclose(np.diff(grid.axes[j]), h, rtol=1e-3)
        np.testing.assert_allclose(np.diff(grid.axes[j]), np.diff(grid.axes[j])[0], rtol=1e-12)
    assert np.all(grid.centers >= box.lower) and np.all(grid.centers <= box.upper)
    with pytest.raises(ValueError):
        box.points_for_spacing([45.0, 0.2105, 2.1053])


def test_grid_needs_two_points():
    with pytest.raises(ValueError):
        build_uniform_grid(DomainBox([0.0], [1.0]), [1])


# -- membership -----------------------------------------------------------------------


def test_membership_sample_at_center():
    assert membership([1.0, 2.0, 3.0], [[1.0, 2.0, 3.0]], KernelConfig([4.0, 1.0, 9.0])) == 1.0


def test_membership_quadratic_form_two():
    # quadratic form 2 -> exp(-1)
    kernel = KernelConfig([4.0, 1.0, 9.0])
    assert membership([0, 0, 0], [[2.0, 1.0, 3.0]], kernel) == pytest.approx(math.exp(-1.5), rel=1e-15)
    assert membership([0, 0, 0], [[2.0, 0.0, 3.0]], kernel) == pytest.approx(math.exp(-1.0), rel=1e-15)


def test_membership_matches_naive():
    rng = np.random.default_rng(0)
    c = rng.normal(size=3)
    z = rng.normal(size=(3, 3))
    var = rng.uniform(0.5, 2, 3)
    assert membership(c, z, KernelConfig(var)) == pytest.approx(naive_occupancy(z, [c], var)[0], rel=1e-14)


def test_membership_empty():
    assert membership([0.0, 0.0], np.empty((0, 2)), KernelConfig([1.0, 1.0])) == 0.0


# -- cost -------------------------------------------------------------------------------


def test_cost_empty_samples():
    grid = build_uniform_grid(DomainBox([0, 0], [1, 1]), [3, 3])
    assert cost(np.empty((0, 2)), grid, KernelConfig([1.0, 1.0], 0.1)) == pytest.approx(10.0)


def test_cost_single_point():
    grid = DomainGrid.from_centers([[0.5, 0.5]])
    assert cost([[0.5, 0.5]], grid, KernelConfig([1.0, 1.0], 0.1)) == pytest.approx(1 / 1.1, rel=1e-15)


@pytest.mark.parametrize("n_z,ppd,N", [(1, 9, 30), (2, 5, 40), (3, 4, 25), (4, 3, 15)])
def test_tensor_and_dense_paths_match_naive(n_z, ppd, N):
    rng = np.random.default_rng(n_z)
    samples, grid, kernel = random_instance(rng, n_z, N, ppd)
    ref = naive_occupancy(samples, grid.centers, kernel.variances)
    np.testing.assert_allclose(grid_occupancy(samples, grid, kernel), ref, rtol=1e-12)
    np.testing.assert_allclose(grid_occupancy(samples, dense(grid), kernel), ref, rtol=1e-12)
    c_ref = naive_cost(samples, grid.centers, kernel.variances, kernel.epsilon)
    assert cost(samples, grid, kernel) == pytest.approx(c_ref, rel=1e-12)
    g_t = cost_gradient_samples(samples, grid, kernel)
    g_d = cost_gradient_samples(samples, dense(grid), kernel)
    np.testing.assert_allclose(g_t, g_d, rtol=1e-10, atol=1e-14 * np.max(np.abs(g_d)))


def test_cutoff_drops_far_terms():
    grid = DomainGrid.from_centers([[0.0, 0.0]])
    z = [[0.0, 0.0], [7.0, 0.0]]
    full = KernelConfig([1.0, 1.0])
    cut = KernelConfig([1.0, 1.0], cutoff=6.0)
    assert grid_occupancy(z, grid, full)[0] == pytest.approx(1 + math.exp(-24.5))
    assert grid_occupancy(z, grid, cut)[0] == 1.0


def test_threaded_dense_path_is_deterministic(monkeypatch):
    rng = np.random.default_rng(3)
    samples, grid, kernel = random_instance(rng, 3, 200, 9)  # 729 centers -> several chunks
    monkeypatch.setenv("SPACEFILL_THREADS", "1")
    one = cost_and_gradient(samples, dense(grid), kernel)
    monkeypatch.setenv("SPACEFILL_THREADS", "4")
    four = cost_and_gradient(samples, dense(grid), kernel)
    assert one[0] == four[0]
    assert np.array_equal(one[1], four[1])


# -- gradients ---------------------------------------------------------------------------


def fd_sample_gradient(samples, grid, kernel, h=1e-6):
    g = np.zeros_like(samples)
    for k in range(samples.shape[0]):
        for j in range(samples.shape[1]):
            zp, zm = samples.copy(), samples.copy()
            zp[k, j] += h
            zm[k, j] -= h
            g[k, j] = (cost(zp, grid, kernel) - cost(zm, grid, kernel)) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(4))
def test_sample_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    samples, grid, kernel = random_instance(rng, 3, 12, 4)
    g = cost_gradient_samples(samples, grid, kernel)
    fd = fd_sample_gradient(samples, grid, kernel)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-6
    gd = cost_gradient_samples(samples, dense(grid), kernel)
    assert np.max(np.abs(gd - fd)) / np.max(np.abs(fd)) < 1e-6


def test_gradient_zero_at_symmetric_center():
    grid = build_uniform_grid(DomainBox([-1, -1], [1, 1]), [3, 3])
    g = cost_gradient_samples([[0.0, 0.0]], grid, KernelConfig([0.5, 0.5], 0.01))
    np.testing.assert_allclose(g, 0.0, atol=1e-17)


def test_gradient_vanishes_for_huge_epsilon():
    rng = np.random.default_rng(1)
    samples, grid, _ = random_instance(rng, 2, 10, 4)
    small = cost_gradient_samples(samples, grid, KernelConfig([0.1, 0.1], 1e-2))
    huge = cost_gradient_samples(samples, grid, KernelConfig([0.1, 0.1], 1e9))
    assert np.max(np.abs(huge)) < 1e-12 * np.max(np.abs(small))


def test_param_gradient_chain():
    rng = np.random.default_rng(2)
    samples, grid, kernel = random_instance(rng, 3, 15, 4)
    dz = rng.normal(size=(15, 3, 4))
    g = cost_gradient_params(samples, dz, grid, kernel)
    np.testing.assert_allclose(g, np.einsum("kj,kjp->p", cost_gradient_samples(samples, grid, kernel), dz))
    sens = SensitivityTrajectory(dz[:, 1:, :], dz[:, :1, :])
    np.testing.assert_allclose(cost_gradient_params(samples, sens, grid, kernel), g, rtol=1e-14)
    assert not np.any(cost_gradient_params(samples, np.zeros_like(dz), grid, kernel))
    with pytest.raises(ValueError):
        cost_gradient_params(samples, dz[:10], grid, kernel)


def test_scaling_invariance():
    rng = np.random.default_rng(4)
    samples, grid, kernel = random_instance(rng, 3, 15, 4)
    c = 7.0
    box2 = DomainBox(grid.box.lower * c, grid.box.upper * c)
    grid2 = build_uniform_grid(box2, grid.points_per_dim)
    k2 = KernelConfig(kernel.variances * c**2, kernel.epsilon)
    assert cost(samples * c, grid2, k2) == pytest.approx(cost(samples, grid, kernel), rel=1e-12)
    dz = rng.normal(size=(15, 3, 2))
    g1 = cost_gradient_params(samples, dz, grid, kernel)
    # the sample map theta -> c*z has sensitivities c*dz, so dC/dtheta is unchanged
    g2 = cost_gradient_params(samples * c, dz * c, grid2, k2)
    np.testing.assert_allclose(g2, g1, rtol=1e-10)


# -- properties --------------------------------------------------------------------------

coords = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    extra=st.lists(st.tuples(coords, coords), min_size=1, max_size=1),
)
def test_appending_a_sample_strictly_decreases_cost(seed, extra):
    rng = np.random.default_rng(seed)
    samples, grid, kernel = random_instance(rng, 2, int(rng.integers(0, 20)), 4)
    kernel = KernelConfig(np.array([1.0, 1.0]), kernel.epsilon)
    before = cost(samples, grid, kernel)
    after = cost(np.vstack([samples.reshape(-1, 2), extra]), grid, kernel)
    assert after < before
    assert 0 < after <= 1 / kernel.epsilon


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_permutation_and_translation_invariance(seed):
    rng = np.random.default_rng(seed)
    samples, grid, kernel = random_instance(rng, 3, 10, 3)
    c = cost(samples, grid, kernel)
    perm = DomainGrid.from_centers(grid.centers[rng.permutation(grid.n)])
    assert cost(samples[rng.permutation(10)], perm, kernel) == pytest.approx(c, rel=1e-12)
    shift = rng.normal(size=3) * 5
    moved = DomainGrid.from_centers(grid.centers + shift)
    assert cost(samples + shift, moved, kernel) == pytest.approx(c, rel=1e-9)


def test_far_samples_approach_upper_bound():
    grid = build_uniform_grid(DomainBox([0, 0], [1, 1]), [3, 3])
    kernel = KernelConfig([0.1, 0.1], 0.01)
    assert cost([[1e4, 1e4]], grid, kernel) == pytest.approx(100.0, rel=1e-12)
