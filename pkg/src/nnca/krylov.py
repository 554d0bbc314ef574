"""Full GMRES over a black-box operator and the Nystrom Fredholm system."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
from scipy.linalg import solve_triangular
from scipy.sparse.linalg import LinearOperator, aslinearoperator

from .compressor import H2Matrix, assemble
from .errors import DimensionError, SolverError
from .geometry import PointCloud, grid_points
from .kernels import KernelSpec, builtin_kernel
from .tree import build_tree

logger = logging.getLogger(__name__)

DEFAULT_EPS_GMRES = 1e-10
DOMAIN_VOLUME = 8.0
BREAKDOWN_RTOL = 1e-14
FREDHOLM_NU = 27

Operator = Union[LinearOperator, np.ndarray, Callable[[np.ndarray], np.ndarray]]


@dataclass
class GmresReport:
    solution: np.ndarray
    iterations: int
    residual_history: list[float] = field(default_factory=list)
    converged: bool = False
    breakdown: bool = False

    @property
    def final_residual(self) -> float:
        return self.residual_history[-1] if self.residual_history else 0.0


def _as_operator(apply: Operator, n: int) -> LinearOperator:
    if hasattr(apply, "shape"):
        op = aslinearoperator(apply)
    else:
        op = LinearOperator((n, n), matvec=apply, dtype=np.float64)
    if op.shape != (n, n):
        raise DimensionError(f"Operator has shape {op.shape}, right-hand side length {n}")
    return op


def _givens(a: float, b: float) -> tuple[float, float]:
    if b == 0.0:
        return 1.0, 0.0
    r = math.hypot(a, b)
    return a / r, b / r


def gmres(
    apply: Operator,
    b,
    tol: float = DEFAULT_EPS_GMRES,
    max_iter: int | None = None,
) -> GmresReport:
    """Solve A x = b by non-restarted GMRES from x0 = 0.

    Arnoldi uses modified Gram-Schmidt and the least-squares problem is
    updated with Givens rotations, so the relative residual
    ||b - A x|| / ||b|| is known at every step without forming x.
    """
    if not tol > 0:
        raise SolverError(f"GMRES tolerance must be positive, got {tol}")
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(b)):
        raise SolverError("Right-hand side contains non-finite values")
    n = b.size
    op = _as_operator(apply, n)
    beta = float(np.linalg.norm(b))
    if beta == 0.0:
        return GmresReport(
            solution=np.zeros(n), iterations=0, residual_history=[0.0], converged=True
        )

    m = n if max_iter is None else max(1, min(int(max_iter), n))
    # Krylov basis and Hessenberg columns grow with the iteration count
    basis = [b / beta]
    columns: list[np.ndarray] = []
    cs: list[float] = []
    sn: list[float] = []
    g = [beta]
    history = [1.0]
    converged = False
    breakdown = False

    k = 0
    for j in range(m):
        w = np.asarray(op.matvec(basis[j]), dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(w)):
            raise SolverError(f"Operator produced non-finite values at iteration {j + 1}")
        h = np.zeros(j + 2)
        for i in range(j + 1):
            h[i] = np.dot(basis[i], w)
            w -= h[i] * basis[i]
        h_next = float(np.linalg.norm(w))
        h[j + 1] = h_next

        for i in range(j):
            upper = cs[i] * h[i] + sn[i] * h[i + 1]
            h[i + 1] = -sn[i] * h[i] + cs[i] * h[i + 1]
            h[i] = upper
        c, s = _givens(h[j], h[j + 1])
        cs.append(c)
        sn.append(s)
        h[j] = c * h[j] + s * h[j + 1]
        g.append(-s * g[j])
        g[j] = c * g[j]
        columns.append(h[: j + 1])

        k = j + 1
        rel = abs(g[j + 1]) / beta
        history.append(rel)
        logger.debug("GMRES iteration %d: relative residual %.3e", k, rel)
        if rel <= tol:
            converged = True
            break
        if h_next <= BREAKDOWN_RTOL * beta:
            breakdown = True
            break
        basis.append(w / h_next)

    r = np.zeros((k, k))
    for j, col in enumerate(columns):
        r[: j + 1, j] = col
    y = solve_triangular(r, np.asarray(g[:k]), lower=False)
    x = np.stack(basis[:k], axis=1) @ y
    if breakdown:
        true_res = float(np.linalg.norm(b - op.matvec(x))) / beta
        converged = true_res <= tol
        history.append(true_res)
        logger.warning("GMRES breakdown at iteration %d, residual %.3e", k, true_res)
    elif not converged:
        logger.warning("GMRES did not converge in %d iterations (residual %.3e)", k, history[-1])
    return GmresReport(
        solution=x,
        iterations=k,
        residual_history=history,
        converged=converged,
        breakdown=breakdown,
    )


@dataclass
class FredholmSystem:
    """Nystrom discretization v -> v + w_q K v on a uniform grid of [-1, 1]^3."""

    cloud: PointCloud
    kernel: KernelSpec
    quad_weight: float
    backend: str = "h2"
    h2: H2Matrix | None = None
    dense: np.ndarray | None = None
    threads: int | None = None
    applications: int = 0

    @classmethod
    def build(
        cls,
        n_per_axis: int,
        eps_nca: float = 1e-7,
        nu: int = FREDHOLM_NU,
        eta: float = math.sqrt(2.0),
        backend: str = "h2",
        threads: int | None = None,
    ) -> FredholmSystem:
        if n_per_axis < 2:
            raise SolverError(f"Grid needs at least 2 points per axis, got {n_per_axis}")
        cloud = PointCloud.from_points(grid_points(n_per_axis, 3))
        kernel = builtin_kernel("coulomb-3d", 3)
        system = cls(
            cloud=cloud,
            kernel=kernel,
            quad_weight=DOMAIN_VOLUME / cloud.n_targets,
            backend=backend,
            threads=threads,
        )
        if backend == "h2":
            tree = build_tree(cloud, nu=nu, eta=eta)
            system.h2 = assemble(tree, kernel, cloud, eps_nca, threads=threads)
        elif backend == "dense":
            system.dense = kernel.matrix(cloud.targets, cloud.sources)
        else:
            raise SolverError(f"Unknown backend '{backend}'. Available: h2, dense")
        return system

    @property
    def n(self) -> int:
        return self.cloud.n_targets

    @property
    def memory_bytes(self) -> int:
        if self.h2 is not None:
            return self.h2.stats.memory_bytes
        return int(self.dense.nbytes) if self.dense is not None else 0

    def apply(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        self.applications += 1
        if self.h2 is not None:
            kv = self.h2.matvec(v, threads=self.threads)
        else:
            kv = self.dense @ v
        return v + self.quad_weight * kv

    def as_linear_operator(self) -> LinearOperator:
        return LinearOperator((self.n, self.n), matvec=self.apply, dtype=np.float64)


@dataclass
class FredholmResult:
    report: GmresReport
    forward_error: float
    system: FredholmSystem
    assembly_seconds: float
    solve_seconds: float


def solve_fredholm(
    n_per_axis: int,
    eps_nca: float = 1e-7,
    eps_gmres: float = DEFAULT_EPS_GMRES,
    seed: int = 0,
    nu: int = FREDHOLM_NU,
    eta: float = math.sqrt(2.0),
    backend: str = "h2",
    threads: int | None = None,
    max_iter: int = 200,
    reference=None,
) -> FredholmResult:
    """Manufactured-solution solve: f = A sigma, then recover sigma by GMRES."""
    start = time.perf_counter()
    system = FredholmSystem.build(
        n_per_axis, eps_nca=eps_nca, nu=nu, eta=eta, backend=backend, threads=threads
    )
    assembly_seconds = time.perf_counter() - start

    if reference is None:
        sigma = np.random.default_rng(seed).standard_normal(system.n)
    else:
        sigma = np.asarray(reference, dtype=np.float64).reshape(-1)
        if sigma.size != system.n:
            raise DimensionError(f"Reference has length {sigma.size}, expected {system.n}")
    f = system.apply(sigma)

    start = time.perf_counter()
    report = gmres(system.as_linear_operator(), f, tol=eps_gmres, max_iter=max_iter)
    solve_seconds = time.perf_counter() - start

    ref_norm = float(np.linalg.norm(sigma))
    diff = float(np.linalg.norm(report.solution - sigma))
    forward_error = diff / ref_norm if ref_norm > 0 else diff
    logger.info(
        "Fredholm solve N=%d: %d iterations, forward error %.3e",
        system.n, report.iterations, forward_error,
    )
    return FredholmResult(
        report=report,
        forward_error=forward_error,
        system=system,
        assembly_seconds=assembly_seconds,
        solve_seconds=solve_seconds,
    )
