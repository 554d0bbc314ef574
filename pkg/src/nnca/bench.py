"""Experiment drivers behind the CLI subcommands, emitting plot-ready CSV rows."""

from __future__ import annotations

import csv
import logging
import statistics
import time
from typing import IO, Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .compressor import STATS_CSV_HEADER, H2Matrix, assemble
from .config import RunConfig
from .geometry import PointCloud, make_points
from .kernels import KernelSpec, get_kernel, merge_kernel
from .krylov import solve_fredholm
from .matvec import dense_matvec, dense_rows, relative_error
from .svm import evaluate, synth_dataset, train
from .tree import build_tree

logger = logging.getLogger(__name__)

MATVEC_COLUMNS = ("N", "mem", "T_a", "T_m", "ε_m", "max_rank")
SWEEP_COLUMNS = ("eps_nca",) + MATVEC_COLUMNS
SOLVER_COLUMNS = ("N", "mem", "T_a", "T_s", "iter", "ε_s")
SVM_COLUMNS = (
    "M", "C1", "C2", "c1", "c2",
    "t_F", "t_N", "i_F", "i_N", "iter_F", "iter_N",
    "A1", "A2", "OA",
)
NOT_AVAILABLE = "n/a"

Row = dict[str, Any]


def resolve_kernel(
    config: RunConfig, custom_kernels: Mapping[str, KernelSpec] | None = None
) -> KernelSpec:
    """Kernel named by the run, with reg_a applied when the kernel takes it."""
    kernel = get_kernel(config.kernel, config.dim, custom_kernels)
    if config.reg_a is not None and "reg_a" in kernel.params:
        kernel = merge_kernel(kernel, {"reg_a": config.reg_a})
    return kernel


def make_cloud(config: RunConfig, n: int) -> PointCloud:
    return PointCloud.from_points(make_points(config.distribution, n, config.dim, config.seed))


def time_median(fn: Callable[[], Any], repeats: int) -> tuple[float, Any]:
    """Median wall time of ``repeats`` calls and the last call's result."""
    times = []
    result = None
    for _ in range(max(1, repeats)):
        start = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times), result


def matvec_error(h2: H2Matrix, u: np.ndarray, w: np.ndarray, config: RunConfig) -> float:
    """Relative matvec error, exact below the oracle cap and row-sampled above it."""
    n = h2.cloud.n_targets
    if n <= config.oracle_cap:
        return relative_error(u, dense_matvec(h2.kernel, h2.cloud, w))
    rng = np.random.default_rng(config.seed + 1)
    rows = np.sort(rng.choice(n, size=min(config.oracle_sample_rows, n), replace=False))
    return relative_error(u[rows], dense_rows(h2.kernel, h2.cloud, rows, w))


def _matvec_row(
    config: RunConfig, kernel: KernelSpec, cloud: PointCloud, eps_nca: float
) -> Row:
    tree = build_tree(cloud, nu=config.nu, eta=config.eta)
    h2 = assemble(tree, kernel, cloud, eps_nca, threads=config.threads)
    w = np.random.default_rng(config.seed).standard_normal(cloud.n_sources)
    t_m, u = time_median(lambda: h2.matvec(w, threads=config.threads), config.repeats)
    err = matvec_error(h2, u, w, config)
    logger.info(
        "N=%d eps=%.1e: error %.3e, max rank %d",
        cloud.n_targets, eps_nca, err, h2.stats.max_rank,
    )
    return {
        "N": cloud.n_targets,
        "mem": h2.stats.memory_bytes,
        "T_a": h2.stats.assembly_seconds,
        "T_m": t_m,
        "ε_m": err,
        "max_rank": h2.stats.max_rank,
        "stats": h2.stats,
        "stats_row": h2.stats_csv_row(),
    }


def run_matvec_bench(
    config: RunConfig, custom_kernels: Mapping[str, KernelSpec] | None = None
) -> list[Row]:
    """One row per N at fixed eps_nca."""
    kernel = resolve_kernel(config, custom_kernels)
    rows = []
    for n in config.n_values:
        rows.append(_matvec_row(config, kernel, make_cloud(config, n), config.eps_nca))
    return rows


def run_convergence_sweep(
    config: RunConfig, custom_kernels: Mapping[str, KernelSpec] | None = None
) -> list[Row]:
    """One row per eps_nca at the first N of the run."""
    kernel = resolve_kernel(config, custom_kernels)
    cloud = make_cloud(config, config.n_values[0])
    rows = []
    for eps in config.eps_values:
        rows.append({"eps_nca": eps, **_matvec_row(config, kernel, cloud, eps)})
    return rows


def run_solver_bench(config: RunConfig) -> list[Row]:
    rows = []
    for n_per_axis in config.n_per_axis:
        result = solve_fredholm(
            n_per_axis,
            eps_nca=config.eps_nca,
            eps_gmres=config.eps_gmres,
            seed=config.seed,
            nu=config.nu,
            eta=config.eta,
            threads=config.threads,
        )
        if not result.report.converged:
            logger.warning("Solve at N=%d did not converge", result.system.n)
        rows.append(
            {
                "N": result.system.n,
                "mem": result.system.memory_bytes,
                "T_a": result.assembly_seconds,
                "T_s": result.solve_seconds,
                "iter": result.report.iterations,
                "ε_s": result.forward_error,
            }
        )
    return rows


def _svm_kwargs(config: RunConfig) -> dict[str, Any]:
    return {
        "lambda_box": config.svm["lambda_box"],
        "learn_rate": config.svm["learn_rate"],
        "beta_penalty": config.svm["beta_penalty"],
        "max_iter": int(config.svm["max_iter"]),
        "grad_tol": config.svm["grad_tol"],
        "eps_nca": config.eps_nca,
        "nu": config.nu,
        "eta": config.eta,
        "threads": config.threads,
    }


def run_svm_bench(
    config: RunConfig, custom_kernels: Mapping[str, KernelSpec] | None = None
) -> list[Row]:
    """Train each configured backend per dataset size; accuracy from the first backend."""
    shape = config.shape or ("rings2d" if config.dim == 2 else "hypersphere4d")
    rows = []
    for m in config.n_values:
        data = synth_dataset(shape, m, seed=config.seed)
        kernel = resolve_kernel(config, custom_kernels)
        row: Row = {"M": m, **data.class_counts()}
        scored = None
        for backend in config.backends:
            model, report = train(data, kernel, backend=backend, **_svm_kwargs(config))
            tag = "F" if backend == "fast" else "N"
            row[f"t_{tag}"] = report.wall_seconds
            row[f"i_{tag}"] = report.per_iter_seconds
            row[f"iter_{tag}"] = report.iterations
            if scored is None:
                scored = model
        acc = evaluate(scored, data.test_x, data.test_y)
        row.update({"A1": acc.a1, "A2": acc.a2, "OA": acc.oa})
        rows.append(row)
    return rows


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    slope, _ = np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)
    return float(slope)


def _fmt(value: Any) -> str:
    if value is None:
        return NOT_AVAILABLE
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6e}"
    return str(value)


def write_csv(rows: Iterable[Row], columns: Sequence[str], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(col)) for col in columns])


def write_stats_csv(rows: Iterable[Row], stream: IO[str]) -> None:
    """Assembly statistics of every matrix built by a matvec run."""
    stats_rows = [dict(zip(STATS_CSV_HEADER, row["stats_row"])) for row in rows]
    write_csv(stats_rows, STATS_CSV_HEADER, stream)
