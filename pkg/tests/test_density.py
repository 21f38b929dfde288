"""Density ground truth: count preservation, kernel policies, geometry."""

import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from denet.density import (
    DensityGrid,
    DotAnnotation,
    KernelPolicy,
    adaptive_sigma,
    generate_density_map,
)
from denet.errors import InputValidationError

FIXED = KernelPolicy(mode="fixed", sigma_fixed=4.0)


def naive_density(ann, sigmas):
    """Per-dot double-loop oracle: same window rule, no vectorization."""
    grid = np.zeros((ann.height, ann.width))
    for (x, y), sigma in zip(ann.points, sigmas):
        reach = 4.0 * sigma
        r0 = max(0, int(math.floor(y - reach)))
        r1 = min(ann.height - 1, int(math.ceil(y + reach)))
        c0 = max(0, int(math.floor(x - reach)))
        c1 = min(ann.width - 1, int(math.ceil(x + reach)))
        bump = np.zeros((r1 - r0 + 1, c1 - c0 + 1))
        for r in range(r0, r1 + 1):
            for c in range(c0, c1 + 1):
                dy = (r + 0.5) - y
                dx = (c + 0.5) - x
                bump[r - r0, c - c0] = math.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))
        grid[r0:r1 + 1, c0:c1 + 1] += bump / bump.sum()
    return grid


def test_empty_points_zero_grid():
    ann = DotAnnotation("img", 32, 16, np.zeros((0, 2)))
    grid = generate_density_map(ann, FIXED)
    assert grid.values.shape == (16, 32)
    assert grid.total() == 0.0


def test_center_dot_unit_mass():
    ann = DotAnnotation("img", 64, 64, [[32.0, 32.0]])
    grid = generate_density_map(ann, FIXED)
    assert abs(grid.total() - 1.0) < 1e-6


def test_border_dots_keep_mass():
    pts = [[0.0, 0.0], [63.0, 0.0], [0.5, 63.5], [10.0, 10.0], [63.9, 63.9]]
    ann = DotAnnotation("img", 64, 64, pts)
    grid = generate_density_map(ann, FIXED)
    assert abs(grid.total() - 5.0) < 1e-6
    want = naive_density(ann, [4.0] * 5)
    npt.assert_allclose(grid.values, want, atol=1e-12, rtol=0)


def test_matches_naive_oracle_adaptive():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 48, (12, 2))
    ann = DotAnnotation("img", 48, 48, pts)
    policy = KernelPolicy(mode="adaptive", sigma_fixed=4.0, beta=0.3, k_neighbors=3)
    grid = generate_density_map(ann, policy)
    sigmas = [adaptive_sigma(pts, i, policy) for i in range(len(pts))]
    npt.assert_allclose(grid.values, naive_density(ann, sigmas), atol=1e-12, rtol=0)


def test_adaptive_sigma_two_points():
    pts = np.array([[0.0, 0.0], [10.0, 0.0]])
    policy = KernelPolicy(mode="adaptive", beta=0.3, k_neighbors=3)
    assert adaptive_sigma(pts, 0, policy) == pytest.approx(3.0)
    assert adaptive_sigma(pts, 1, policy) == pytest.approx(3.0)


def test_adaptive_sigma_single_point_falls_back():
    policy = KernelPolicy(mode="adaptive", sigma_fixed=15.0)
    assert adaptive_sigma(np.array([[5.0, 5.0]]), 0, policy) == 15.0


def test_adaptive_sigma_colinear_interior():
    pts = np.array([[float(20 * i), 50.0] for i in range(5)])
    policy = KernelPolicy(mode="adaptive", beta=0.3, k_neighbors=1)
    # interior points have a nearest neighbor at distance 20
    for i in (1, 2, 3):
        assert adaptive_sigma(pts, i, policy) == pytest.approx(6.0)


def test_adaptive_sigma_clamped():
    pts = np.array([[0.0, 0.0], [1000.0, 0.0]])
    policy = KernelPolicy(mode="adaptive", beta=0.3, k_neighbors=1,
                          sigma_min=1.0, sigma_max=25.0)
    assert adaptive_sigma(pts, 0, policy) == 25.0


def test_point_outside_image_rejected_with_index():
    ann = DotAnnotation("img", 32, 32, [[1.0, 1.0], [32.0, 5.0]])
    with pytest.raises(InputValidationError, match=r"points\[1\]"):
        generate_density_map(ann, FIXED)


def test_non_finite_point_rejected():
    ann = DotAnnotation("img", 32, 32, [[float("nan"), 1.0]])
    with pytest.raises(InputValidationError, match=r"points\[0\]"):
        generate_density_map(ann, FIXED)


def test_translation_equivariance():
    sigma = 2.0
    base = np.array([[20.0, 22.0], [25.0, 30.0], [30.0, 20.0]])
    policy = KernelPolicy(mode="fixed", sigma_fixed=sigma)
    dx, dy = 7, 5
    a = generate_density_map(DotAnnotation("a", 64, 64, base), policy)
    b = generate_density_map(DotAnnotation("b", 64, 64, base + [dx, dy]), policy)
    npt.assert_allclose(np.roll(a.values, (dy, dx), axis=(0, 1)), b.values, atol=1e-9)


def test_superposition_fixed_mode():
    rng = np.random.default_rng(1)
    a_pts = rng.uniform(0, 64, (6, 2))
    b_pts = rng.uniform(0, 64, (4, 2))
    policy = KernelPolicy(mode="fixed", sigma_fixed=3.0)
    ga = generate_density_map(DotAnnotation("a", 64, 64, a_pts), policy)
    gb = generate_density_map(DotAnnotation("b", 64, 64, b_pts), policy)
    gu = generate_density_map(DotAnnotation("u", 64, 64, np.vstack([a_pts, b_pts])), policy)
    npt.assert_allclose(gu.values, ga.values + gb.values, atol=1e-12, rtol=0)


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(0, 50),
    w=st.integers(8, 128),
    h=st.integers(8, 128),
    mode=st.sampled_from(["fixed", "adaptive"]),
    sigma=st.floats(0.5, 20.0),
    seed=st.integers(0, 2**16),
)
def test_count_preservation_property(n, w, h, mode, sigma, seed):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)])
    ann = DotAnnotation("img", w, h, pts)
    policy = KernelPolicy(mode=mode, sigma_fixed=sigma)
    grid = generate_density_map(ann, policy)
    assert abs(grid.total() - n) < 1e-6
    assert grid.values.min() >= 0.0


def test_kernel_policy_validation():
    with pytest.raises(InputValidationError):
        KernelPolicy(mode="gaussian")
    with pytest.raises(InputValidationError):
        KernelPolicy(sigma_fixed=0.0)
    with pytest.raises(InputValidationError):
        KernelPolicy(mode="adaptive", beta=-1.0)
    with pytest.raises(InputValidationError):
        KernelPolicy(sigma_min=5.0, sigma_max=1.0)
    with pytest.raises(InputValidationError):
        KernelPolicy(k_neighbors=0)


def test_annotation_validation():
    with pytest.raises(InputValidationError):
        DotAnnotation("img", 10, 10, [[1.0, 2.0, 3.0]])
    with pytest.raises(InputValidationError):
        DotAnnotation("img", 0, 10, []).validate()


def test_density_grid_shape_guard():
    with pytest.raises(InputValidationError):
        DensityGrid(np.zeros(5))
