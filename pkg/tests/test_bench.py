from __future__ import annotations

import io
import math

import numpy as np
import pytest

from nnca.bench import (
    MATVEC_COLUMNS,
    SOLVER_COLUMNS,
    SVM_COLUMNS,
    SWEEP_COLUMNS,
    loglog_slope,
    matvec_error,
    resolve_kernel,
    run_convergence_sweep,
    run_matvec_bench,
    run_solver_bench,
    run_svm_bench,
    time_median,
    write_csv,
)
from nnca.config import DEFAULT_NU, RunConfig
from nnca.kernels import builtin_kernel
from nnca.matvec import dense_matvec, relative_error
from nnca.svm import KernelProduct, synth_dataset

SQRT2 = math.sqrt(2.0)


def _config(**kwargs) -> RunConfig:
    base = {"command": "matvec-bench", "nu": 32, "eps_nca": 1e-9, "repeats": 1}
    base.update(kwargs)
    return RunConfig(**base).validate()


# --- CSV output ---


def test_write_csv_formats_values():
    out = io.StringIO()
    rows = [{"N": 1000, "mem": 2048, "T_a": 0.5, "T_m": 1.25e-3, "ε_m": None, "max_rank": 7}]
    write_csv(rows, MATVEC_COLUMNS, out)
    lines = out.getvalue().splitlines()
    assert lines[0] == "N,mem,T_a,T_m,ε_m,max_rank"
    assert lines[1] == "1000,2048,5.000000e-01,1.250000e-03,n/a,7"


def test_write_csv_missing_column_is_not_available():
    out = io.StringIO()
    write_csv([{"N": 3}], ("N", "iter"), out)
    assert out.getvalue().splitlines()[1] == "3,n/a"


def test_loglog_slope():
    xs = [1e3, 1e4, 1e5]
    assert loglog_slope(xs, [x**1.5 for x in xs]) == pytest.approx(1.5)


def test_time_median_returns_last_result():
    calls = []

    def fn():
        calls.append(1)
        return len(calls)

    seconds, result = time_median(fn, 3)
    assert result == 3
    assert seconds >= 0.0


def test_resolve_kernel_applies_reg_a_only_when_taken():
    assert resolve_kernel(_config(reg_a=0.25)).params["reg_a"] == 0.25
    assert not resolve_kernel(_config(kernel="matern", reg_a=0.25)).params


# --- matvec error oracle ---


def test_matvec_error_exact_below_cap(h2_2d, log_kernel, cloud_2d, rng):
    w = rng.standard_normal(400)
    u = h2_2d.matvec(w)
    expected = relative_error(u, dense_matvec(log_kernel, cloud_2d, w))
    assert matvec_error(h2_2d, u, w, _config()) == expected


def test_matvec_error_sampled_above_cap(h2_2d, rng):
    w = rng.standard_normal(400)
    u = h2_2d.matvec(w)
    sampled = matvec_error(h2_2d, u, w, _config(oracle_cap=100, oracle_sample_rows=50))
    assert 0.0 <= sampled < 1e-6
    noisy = u + 1e-3 * np.abs(u).max()
    assert matvec_error(h2_2d, noisy, w, _config(oracle_cap=100, oracle_sample_rows=50)) > 1e-5


# --- drivers ---


def test_run_matvec_bench_rows():
    rows = run_matvec_bench(_config(n_values=[500, 1000]))
    assert [row["N"] for row in rows] == [500, 1000]
    for row in rows:
        assert set(MATVEC_COLUMNS) <= row.keys()
        assert row["ε_m"] < 1e-6
        assert row["mem"] > 0


def test_run_matvec_bench_is_reproducible():
    a = run_matvec_bench(_config(n_values=[600]))[0]
    b = run_matvec_bench(_config(n_values=[600]))[0]
    assert a["ε_m"] == b["ε_m"]
    assert a["mem"] == b["mem"]
    assert a["max_rank"] == b["max_rank"]


def test_run_convergence_sweep_error_decreases():
    config = _config(command="convergence-sweep", n_values=[800], eps_values=[1e-3, 1e-9])
    rows = run_convergence_sweep(config)
    assert [row["eps_nca"] for row in rows] == [1e-3, 1e-9]
    assert all(set(SWEEP_COLUMNS) <= row.keys() for row in rows)
    assert rows[1]["ε_m"] < rows[0]["ε_m"]
    assert rows[1]["max_rank"] >= rows[0]["max_rank"]


def test_run_solver_bench_rows():
    config = _config(
        command="solve-ie", dim=3, kernel="coulomb-3d", n_per_axis=[3, 4], nu=8, eps_nca=1e-8
    )
    rows = run_solver_bench(config)
    assert [row["N"] for row in rows] == [27, 64]
    for row in rows:
        assert set(SOLVER_COLUMNS) <= row.keys()
        assert row["ε_s"] < 1e-6


def test_run_svm_bench_rows():
    config = _config(
        command="svm-bench",
        kernel="matern",
        n_values=[200],
        shape="rings2d",
        nu=16,
        svm={
            "lambda_box": 10.0,
            "learn_rate": 1e-3,
            "beta_penalty": 1.0,
            "grad_tol": 1e-4,
            "max_iter": 20,
        },
    )
    (row,) = run_svm_bench(config)
    assert set(SVM_COLUMNS) <= row.keys()
    assert row["M"] == 200
    assert row["C1"] + row["C2"] + row["c1"] + row["c2"] == 200
    assert row["iter_F"] <= 20
    assert row["iter_N"] <= 20
    assert 0.0 <= row["OA"] <= 100.0


@pytest.mark.slow
def test_assembly_matvec_and_memory_scale_linearly():
    config = _config(n_values=[8192, 16384, 32768, 65536], nu=64, repeats=3, oracle_cap=1)
    rows = run_matvec_bench(config)
    sizes = [r["N"] for r in rows]
    for column in ("T_a", "T_m", "mem"):
        assert loglog_slope(sizes, [r[column] for r in rows]) <= 1.15, column
    assert all(r["ε_m"] <= 100 * 1e-9 for r in rows)


@pytest.mark.slow
def test_error_follows_tolerance_sweep():
    config = _config(
        command="convergence-sweep",
        kernel="reg-log-2d",
        n_values=[10240],
        nu=64,
        eps_values=[1e-4, 1e-6, 1e-8, 1e-10],
        oracle_cap=20000,
    )
    errors = [row["ε_m"] for row in run_convergence_sweep(config)]
    assert errors[0] > errors[1] > errors[2]
    assert errors[1] <= errors[0] / 10
    assert errors[2] <= errors[1] / 10
    # the last step may sit on the roundoff floor
    assert errors[3] <= max(errors[2] / 10, 1e-11)


def _svm_config(**kwargs) -> RunConfig:
    svm = {
        "lambda_box": 10.0,
        "learn_rate": 1e-3,
        "beta_penalty": 1.0,
        "grad_tol": 1e-4,
        "max_iter": 30,
    }
    return _config(command="svm-bench", kernel="matern", svm=svm, **kwargs)


@pytest.mark.slow
def test_four_dimensional_svm_products_compress():
    config = _svm_config(
        dim=4, n_values=[1024, 4096], shape="hypersphere4d", nu=DEFAULT_NU[4], repeats=1
    )
    rows = run_svm_bench(config)
    assert loglog_slope([r["M"] for r in rows], [r["i_F"] for r in rows]) <= 1.3
    assert rows[-1]["i_N"] / rows[-1]["i_F"] > 2.0
    kernel = builtin_kernel("matern", 4)
    for m in (1024, 4096):
        data = synth_dataset("hypersphere4d", m, seed=config.seed)
        product = KernelProduct(kernel, data.train_x, "fast", 1e-9, DEFAULT_NU[4], SQRT2, 1)
        assert product.h2.tree.depth >= 2
        assert product.h2.stats.n_coupling_blocks > 0
