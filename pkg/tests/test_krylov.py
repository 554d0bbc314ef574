from __future__ import annotations

import numpy as np
import pytest

from nnca.errors import DimensionError, SolverError
from nnca.krylov import DOMAIN_VOLUME, FREDHOLM_NU, FredholmSystem, gmres, solve_fredholm


@pytest.fixture
def spd_system(rng):
    q, _ = np.linalg.qr(rng.standard_normal((30, 30)))
    a = q @ np.diag(np.linspace(1.0, 10.0, 30)) @ q.T
    b = rng.standard_normal(30)
    return a, b


# --- gmres ---


def test_gmres_solves_small_system(spd_system):
    a, b = spd_system
    report = gmres(a, b, tol=1e-12)
    assert report.converged
    assert not report.breakdown
    np.testing.assert_allclose(report.solution, np.linalg.solve(a, b), rtol=1e-9, atol=1e-10)
    assert report.iterations <= 30


def test_gmres_history(spd_system):
    a, b = spd_system
    report = gmres(a, b, tol=1e-10)
    assert report.residual_history[0] == 1.0
    assert len(report.residual_history) == report.iterations + 1
    assert report.final_residual <= 1e-10
    # the minimized residual never grows
    hist = np.array(report.residual_history)
    assert np.all(np.diff(hist) <= 1e-15)


def test_gmres_true_residual_matches_estimate(spd_system):
    a, b = spd_system
    report = gmres(a, b, tol=1e-8)
    true_res = np.linalg.norm(b - a @ report.solution) / np.linalg.norm(b)
    assert true_res == pytest.approx(report.final_residual, rel=1e-3, abs=1e-12)


def test_gmres_accepts_callable(spd_system):
    a, b = spd_system
    report = gmres(lambda v: a @ v, b, tol=1e-10)
    assert report.converged


def test_gmres_identity_converges_in_one_step():
    b = np.arange(1.0, 6.0)
    report = gmres(np.eye(5), b, tol=1e-12)
    assert report.iterations == 1
    assert report.converged
    np.testing.assert_allclose(report.solution, b)


def test_gmres_zero_rhs():
    report = gmres(np.eye(4), np.zeros(4))
    assert report.iterations == 0
    assert report.converged
    np.testing.assert_array_equal(report.solution, np.zeros(4))


def test_gmres_iteration_cap(spd_system):
    a, b = spd_system
    report = gmres(a, b, tol=1e-14, max_iter=3)
    assert report.iterations == 3
    assert not report.converged


def test_gmres_stops_on_invariant_subspace():
    a = np.diag([2.0, 3.0, 4.0, 5.0])
    b = np.array([1.0, 1.0, 0.0, 0.0])
    report = gmres(a, b, tol=1e-12)
    assert report.converged
    np.testing.assert_allclose(report.solution, [0.5, 1.0 / 3.0, 0.0, 0.0], atol=1e-12)
    assert report.iterations == 2


def test_gmres_default_cap_grows_with_iterations():
    # a full (n + 1) x n basis here would need hundreds of gigabytes
    b = np.ones(200_000)
    report = gmres(lambda v: 2.0 * v, b, tol=1e-12)
    assert report.iterations == 1
    np.testing.assert_allclose(report.solution, 0.5)


def test_gmres_unbounded_run_matches_capped_run(spd_system):
    a, b = spd_system
    free = gmres(a, b, tol=1e-10)
    capped = gmres(a, b, tol=1e-10, max_iter=30)
    assert free.iterations == capped.iterations
    np.testing.assert_allclose(free.solution, capped.solution)


@pytest.mark.parametrize("tol", [0.0, -1e-8])
def test_gmres_invalid_tolerance(tol):
    with pytest.raises(SolverError, match="tolerance must be positive"):
        gmres(np.eye(2), np.ones(2), tol=tol)


def test_gmres_non_finite_rhs():
    with pytest.raises(SolverError, match="non-finite"):
        gmres(np.eye(2), np.array([1.0, np.nan]))


def test_gmres_shape_mismatch():
    with pytest.raises(DimensionError, match="Operator has shape"):
        gmres(np.eye(3), np.ones(4))


# --- Fredholm system ---


def test_fredholm_quadrature_weight():
    system = FredholmSystem.build(4, backend="dense")
    assert system.n == 64
    assert system.quad_weight == pytest.approx(DOMAIN_VOLUME / 64)
    assert system.memory_bytes == 64 * 64 * 8


def test_fredholm_apply_adds_identity():
    system = FredholmSystem.build(3, backend="dense")
    v = np.zeros(27)
    v[13] = 1.0
    out = system.apply(v)
    # the grid centre sees no self interaction
    assert out[13] == pytest.approx(1.0)
    assert system.applications == 1


def test_fredholm_dense_solve():
    result = solve_fredholm(4, eps_gmres=1e-12, backend="dense", seed=2)
    assert result.report.converged
    assert result.forward_error < 1e-9
    assert result.system.n == 64


def test_fredholm_h2_solve():
    result = solve_fredholm(6, eps_nca=1e-10, eps_gmres=1e-10, nu=8, seed=1)
    assert result.report.converged
    assert result.forward_error < 1e-6
    assert result.system.h2 is not None
    assert result.system.h2.stats.max_rank > 0
    assert result.report.iterations < 60


def test_fredholm_zero_reference_gives_absolute_error():
    result = solve_fredholm(3, backend="dense", reference=np.zeros(27))
    assert result.report.iterations == 0
    assert result.forward_error == 0.0


def test_fredholm_reference_length_mismatch():
    with pytest.raises(DimensionError, match="expected 27"):
        solve_fredholm(3, backend="dense", reference=np.ones(5))


def test_fredholm_grid_too_small():
    with pytest.raises(SolverError, match="at least 2 points"):
        FredholmSystem.build(1)


def test_fredholm_unknown_backend():
    with pytest.raises(SolverError, match="Unknown backend 'sparse'"):
        FredholmSystem.build(3, backend="sparse")


@pytest.mark.parametrize(
    "n_per_axis",
    [8, pytest.param(12, marks=pytest.mark.slow), pytest.param(16, marks=pytest.mark.slow)],
)
def test_h2_and_dense_solves_agree(n_per_axis):
    fast = solve_fredholm(n_per_axis, seed=3)
    dense = solve_fredholm(n_per_axis, backend="dense", seed=3)
    h2 = fast.system.h2
    assert h2.tree.nu == FREDHOLM_NU
    assert h2.tree.depth >= 2
    assert h2.stats.n_coupling_blocks > 0
    assert fast.report.converged
    assert dense.report.converged
    assert abs(fast.report.iterations - dense.report.iterations) <= 1
    assert fast.forward_error <= 1e-6
    gap = np.linalg.norm(fast.report.solution - dense.report.solution)
    assert gap <= 1e-6 * np.linalg.norm(dense.report.solution)


@pytest.mark.slow
def test_iteration_count_is_flat_across_grids():
    results = [solve_fredholm(k, seed=4) for k in (8, 12, 16)]
    iterations = [r.report.iterations for r in results]
    assert all(r.report.converged for r in results)
    assert max(iterations) <= 20
    assert all(abs(it - iterations[0]) <= 3 for it in iterations)
    assert all(r.forward_error <= 1e-6 for r in results)
