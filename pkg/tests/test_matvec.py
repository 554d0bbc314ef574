from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.sparse.linalg import LinearOperator

from nnca.compressor import assemble
from nnca.errors import DimensionError
from nnca.geometry import PointCloud, chebyshev_points, make_points, uniform_points
from nnca.kernels import builtin_kernel
from nnca.matvec import (
    dense_matvec,
    dense_rows,
    h2_matvec,
    matvec_plan,
    nearfield_pass,
    relative_error,
    upward_pass,
)
from nnca.tree import build_tree

SQRT2 = math.sqrt(2.0)


def test_matvec_matches_dense(h2_2d, log_kernel, cloud_2d, rng):
    w = rng.standard_normal(cloud_2d.n_sources)
    u = h2_matvec(h2_2d, w)
    assert relative_error(u, dense_matvec(log_kernel, cloud_2d, w)) <= 100 * h2_2d.eps_nca


def test_matvec_error_shrinks_with_tolerance(tree_2d, log_kernel, cloud_2d, rng):
    w = rng.standard_normal(cloud_2d.n_sources)
    ref = dense_matvec(log_kernel, cloud_2d, w)
    loose = relative_error(assemble(tree_2d, log_kernel, cloud_2d, 1e-3).matvec(w), ref)
    tight = relative_error(assemble(tree_2d, log_kernel, cloud_2d, 1e-10).matvec(w), ref)
    assert tight < loose


def test_matvec_split_cloud(split_cloud_2d, rng):
    kernel = builtin_kernel("reg-inverse", 2)
    tree = build_tree(split_cloud_2d, nu=16, eta=SQRT2)
    h2 = assemble(tree, kernel, split_cloud_2d, 1e-10)
    assert not h2.symmetric
    w = rng.standard_normal(split_cloud_2d.n_sources)
    u = h2.matvec(w)
    assert u.shape == (split_cloud_2d.n_targets,)
    assert relative_error(u, dense_matvec(kernel, split_cloud_2d, w)) <= 100 * 1e-10


@pytest.mark.parametrize("kernel_name", ["matern", "gaussian"])
def test_matvec_chebyshev_points(kernel_name, rng):
    cloud = PointCloud.from_points(chebyshev_points(900, 2))
    kernel = builtin_kernel(kernel_name, 2)
    h2 = assemble(build_tree(cloud, nu=32, eta=SQRT2), kernel, cloud, 1e-10)
    w = rng.standard_normal(900)
    assert relative_error(h2.matvec(w), dense_matvec(kernel, cloud, w)) <= 100 * 1e-10


def test_matvec_3d_coulomb(rng):
    cloud = PointCloud.from_points(uniform_points(1500, 3, seed=4))
    kernel = builtin_kernel("coulomb-3d", 3)
    h2 = assemble(build_tree(cloud, nu=16, eta=SQRT2), kernel, cloud, 1e-9)
    w = rng.standard_normal(1500)
    assert relative_error(h2.matvec(w), dense_matvec(kernel, cloud, w)) <= 100 * 1e-9


@pytest.mark.parametrize("eps", [1e-6, 1e-9])
@pytest.mark.parametrize("distribution", ["uniform", "chebyshev"])
@pytest.mark.parametrize("kernel_name", ["reg-log-2d", "reg-inverse", "matern", "gaussian"])
def test_matvec_error_within_tolerance(kernel_name, distribution, eps, rng):
    cloud = PointCloud.from_points(make_points(distribution, 1024, 2, seed=6))
    kernel = builtin_kernel(kernel_name, 2)
    h2 = assemble(build_tree(cloud, nu=32, eta=SQRT2), kernel, cloud, eps)
    w = rng.standard_normal(1024)
    assert relative_error(h2.matvec(w), dense_matvec(kernel, cloud, w)) <= 100 * eps


@pytest.mark.slow
@pytest.mark.parametrize("eps", [1e-6, 1e-9])
@pytest.mark.parametrize("dim", [2, 3])
@pytest.mark.parametrize("n", [1024, 4096])
@pytest.mark.parametrize("distribution", ["uniform", "chebyshev"])
@pytest.mark.parametrize("kernel_name", ["reg-log-2d", "reg-inverse", "matern", "gaussian"])
def test_matvec_error_grid(kernel_name, distribution, n, dim, eps, rng):
    cloud = PointCloud.from_points(make_points(distribution, n, dim, seed=6))
    kernel = builtin_kernel(kernel_name, dim)
    h2 = assemble(build_tree(cloud, nu=64, eta=SQRT2), kernel, cloud, eps)
    assert h2.couplings
    w = rng.standard_normal(n)
    assert relative_error(h2.matvec(w), dense_matvec(kernel, cloud, w)) <= 100 * eps


def test_shallow_tree_matvec_is_exact(log_kernel, rng):
    cloud = PointCloud.from_points(uniform_points(50, 2, seed=9))
    h2 = assemble(build_tree(cloud, nu=64, eta=SQRT2), log_kernel, cloud, 1e-6)
    w = rng.standard_normal(50)
    ref = dense_matvec(log_kernel, cloud, w)
    np.testing.assert_allclose(h2.matvec(w), ref, rtol=1e-12, atol=1e-12)


def test_matvec_is_linear(h2_2d, rng):
    a = rng.standard_normal(400)
    b = rng.standard_normal(400)
    np.testing.assert_allclose(
        h2_matvec(h2_2d, 2.0 * a - b),
        2.0 * h2_matvec(h2_2d, a) - h2_matvec(h2_2d, b),
        atol=1e-10,
    )


def test_threaded_matvec_matches_serial(h2_2d, rng):
    w = rng.standard_normal(400)
    np.testing.assert_allclose(h2_matvec(h2_2d, w, threads=4), h2_matvec(h2_2d, w), rtol=1e-14)


def test_column_vector_input_is_accepted(h2_2d, rng):
    w = rng.standard_normal(400)
    np.testing.assert_array_equal(h2_matvec(h2_2d, w.reshape(-1, 1)), h2_matvec(h2_2d, w))


def test_wrong_length_raises(h2_2d):
    with pytest.raises(DimensionError, match="expected 400"):
        h2_matvec(h2_2d, np.ones(399))


def test_linear_operator(h2_2d, rng):
    op = h2_2d.as_linear_operator()
    assert isinstance(op, LinearOperator)
    assert op.shape == (400, 400)
    w = rng.standard_normal(400)
    np.testing.assert_allclose(op.matvec(w), h2_2d.matvec(w))


# --- passes ---


def test_upward_pass_covers_compressed_cells(h2_2d, rng):
    data = upward_pass(h2_2d, rng.standard_normal(400))
    assert data.w_out.keys() == h2_2d.pivots.keys()
    for cell, coeffs in data.w_out.items():
        assert coeffs.shape == (h2_2d.pivots[cell].s_out.size,)


def test_matvec_plan_is_built_once(h2_2d, rng):
    h2_2d.matvec(rng.standard_normal(400))
    plan = matvec_plan(h2_2d)
    assert matvec_plan(h2_2d) is plan
    assert plan.n_out == sum(p.s_out.size for p in h2_2d.pivots.values())
    for x, packed in h2_2d.couplings.packed.items():
        assert plan.gathers[x].size == packed.shape[1]
    for x, packed in h2_2d.nearfield.packed.items():
        assert plan.near_cols[x].size == packed.shape[1]


def test_gather_reads_partner_coefficients(h2_2d, rng):
    data = upward_pass(h2_2d, rng.standard_normal(400))
    plan = matvec_plan(h2_2d)
    x, ys = next(iter(h2_2d.couplings.partners.items()))
    expected = np.concatenate([data.w_out[y] for y in ys])
    np.testing.assert_array_equal(data.outgoing[plan.gathers[x]], expected)


def test_nearfield_pass_alone(h2_2d, log_kernel, cloud_2d):
    w = np.zeros(400)
    w[0] = 1.0
    u = np.zeros(400)
    nearfield_pass(h2_2d, w, u)
    column = log_kernel.matrix(cloud_2d.targets, cloud_2d.sources[:1])[:, 0]
    nonzero = u != 0.0
    np.testing.assert_allclose(u[nonzero], column[nonzero])


# --- reference product and error metric ---


def test_dense_rows_match_full_product(log_kernel, cloud_2d, rng):
    w = rng.standard_normal(400)
    rows = np.array([3, 17, 250])
    np.testing.assert_allclose(
        dense_rows(log_kernel, cloud_2d, rows, w), dense_matvec(log_kernel, cloud_2d, w)[rows]
    )


def test_relative_error():
    assert relative_error([1.0, 1.0], [1.0, 1.0]) == 0.0
    assert relative_error([2.0, 0.0], [1.0, 0.0]) == pytest.approx(1.0)


def test_relative_error_zero_reference_raises():
    with pytest.raises(DimensionError, match="zero"):
        relative_error([1.0], [0.0])


def test_relative_error_length_mismatch_raises():
    with pytest.raises(DimensionError, match="Length mismatch"):
        relative_error([1.0, 2.0], [1.0])
