from __future__ import annotations

import threading
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import TYPE_CHECKING, Any, Callable, Mapping

import numpy as np
from scipy.spatial.distance import cdist

from .errors import KernelError

if TYPE_CHECKING:
    from .geometry import PointCloud

DEFAULT_REG_A = 1e-4

RadialProfile = Callable[[np.ndarray, Mapping[str, float]], np.ndarray]


class EntryCounter:
    """Running total of kernel entry evaluations.

    Accumulation is guarded by a lock so totals stay exact when blocks are
    requested from worker threads.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._value = 0

    @property
    def value(self) -> int:
        return self._value

    def add(self, n: int) -> None:
        with self._lock:
            self._value += int(n)

    def reset(self) -> None:
        with self._lock:
            self._value = 0


ENTRY_COUNTER = EntryCounter()


@dataclass(frozen=True)
class KernelSpec:
    name: str
    dim: int
    radial: RadialProfile
    is_symmetric: bool = True
    params: Mapping[str, float] = field(default_factory=dict)
    formula: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))

    def evaluate(self, x: np.ndarray, y: np.ndarray) -> float:
        r = np.linalg.norm(np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64))
        return float(self.radial(np.asarray([r]), self.params)[0])

    def matrix(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Dense kernel matrix between two point arrays of shape (m, d), (n, d)."""
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        if xs.shape[0] == 0 or ys.shape[0] == 0:
            return np.zeros((xs.shape[0], ys.shape[0]))
        return self.radial(cdist(xs, ys), self.params)


def _reg_log(r: np.ndarray, params: Mapping[str, float]) -> np.ndarray:
    a = params["reg_a"]
    out = np.empty_like(r)
    near = r < a
    rn = r[near]
    with np.errstate(divide="ignore", invalid="ignore"):
        inner = np.where(rn > 0.0, rn * (np.log(rn) - 1.0), 0.0)
    out[near] = inner / (a * (np.log(a) - 1.0))
    out[~near] = np.log(r[~near]) / np.log(a)
    return out


def _reg_inverse(r: np.ndarray, params: Mapping[str, float]) -> np.ndarray:
    a = params["reg_a"]
    out = np.empty_like(r)
    near = r < a
    out[near] = r[near] / a
    out[~near] = a / r[~near]
    return out


def _coulomb(r: np.ndarray, params: Mapping[str, float]) -> np.ndarray:
    # punctured diagonal: K(x, x) = 0
    out = np.zeros_like(r)
    nonzero = r > 0.0
    out[nonzero] = 1.0 / r[nonzero]
    return out


def _matern(r: np.ndarray, params: Mapping[str, float]) -> np.ndarray:
    return np.exp(-r)


def _gaussian(r: np.ndarray, params: Mapping[str, float]) -> np.ndarray:
    return np.exp(-r * r)


@dataclass(frozen=True)
class _Builtin:
    radial: RadialProfile
    formula: str
    params: Mapping[str, float] = field(default_factory=dict)


BUILTIN_KERNELS: dict[str, _Builtin] = {
    "reg-log-2d": _Builtin(
        radial=_reg_log,
        formula="r(log r - 1)/(a(log a - 1)) for r < a, log r / log a otherwise",
        params={"reg_a": DEFAULT_REG_A},
    ),
    "reg-inverse": _Builtin(
        radial=_reg_inverse,
        formula="r/a for r < a, a/r otherwise",
        params={"reg_a": DEFAULT_REG_A},
    ),
    "coulomb-3d": _Builtin(
        radial=_coulomb,
        formula="1/r, with K(x, x) = 0",
    ),
    "matern": _Builtin(
        radial=_matern,
        formula="exp(-r)",
    ),
    "gaussian": _Builtin(
        radial=_gaussian,
        formula="exp(-r^2)",
    ),
}


def builtin_kernel(name: str, dim: int, **overrides: float) -> KernelSpec:
    if name not in BUILTIN_KERNELS:
        available = ", ".join(sorted(BUILTIN_KERNELS))
        raise KernelError(f"Unknown kernel '{name}'. Available: {available}")
    if dim < 1:
        raise KernelError(f"Invalid kernel dimension: {dim}")
    builtin = BUILTIN_KERNELS[name]
    params = dict(builtin.params)
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in params:
            raise KernelError(f"Kernel '{name}' has no parameter '{key}'")
        if not float(value) > 0.0:
            raise KernelError(f"Kernel parameter {key} must be positive, got {value}")
        params[key] = float(value)
    return KernelSpec(
        name=name,
        dim=dim,
        radial=builtin.radial,
        is_symmetric=True,
        params=params,
        formula=builtin.formula,
    )


def merge_kernel(base: KernelSpec, overrides: Mapping[str, Any]) -> KernelSpec:
    """Create a new kernel by extending a base kernel with parameter overrides."""
    params = dict(base.params)
    for key, value in overrides.items():
        if key in ("name", "extends", "formula"):
            continue
        if key not in params:
            raise KernelError(f"Kernel '{base.name}' has no parameter '{key}'")
        params[key] = float(value)
    return KernelSpec(
        name=overrides.get("name", base.name),
        dim=base.dim,
        radial=base.radial,
        is_symmetric=base.is_symmetric,
        params=params,
        formula=overrides.get("formula", base.formula),
    )


def get_kernel(
    name: str,
    dim: int,
    custom_kernels: Mapping[str, KernelSpec] | None = None,
    **overrides: float,
) -> KernelSpec:
    """Resolve a kernel by name, custom definitions taking precedence."""
    if custom_kernels and name in custom_kernels:
        custom = custom_kernels[name]
        params = {k: v for k, v in overrides.items() if v is not None}
        spec = merge_kernel(custom, params) if params else custom
        if spec.dim != dim:
            spec = KernelSpec(
                name=spec.name,
                dim=dim,
                radial=spec.radial,
                is_symmetric=spec.is_symmetric,
                params=spec.params,
                formula=spec.formula,
            )
        return spec
    if name not in BUILTIN_KERNELS:
        names = set(BUILTIN_KERNELS) | set(custom_kernels or {})
        available = ", ".join(sorted(names))
        raise KernelError(f"Unknown kernel '{name}'. Available: {available}")
    return builtin_kernel(name, dim, **overrides)


def list_kernels(custom_kernels: Mapping[str, KernelSpec] | None = None) -> dict[str, str]:
    """Map every available kernel name to its formula."""
    listing = {name: builtin.formula for name, builtin in BUILTIN_KERNELS.items()}
    if custom_kernels:
        listing.update({name: spec.formula for name, spec in custom_kernels.items()})
    return listing


def _check_indices(idx: np.ndarray, size: int, label: str) -> None:
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise KernelError(f"{label} index out of range (size {size})")


def entry(kernel: KernelSpec, cloud: PointCloud, i: int, j: int) -> float:
    """K(p_i, q_j), counted in ENTRY_COUNTER."""
    if not 0 <= i < cloud.n_targets:
        raise KernelError(f"row index {i} out of range (size {cloud.n_targets})")
    if not 0 <= j < cloud.n_sources:
        raise KernelError(f"column index {j} out of range (size {cloud.n_sources})")
    ENTRY_COUNTER.add(1)
    return kernel.evaluate(cloud.targets[i], cloud.sources[j])


def block(kernel: KernelSpec, cloud: PointCloud, rows, cols) -> np.ndarray:
    """Dense sub-block A[rows, cols] in the order of the given index lists."""
    rows = np.asarray(rows, dtype=np.intp).reshape(-1)
    cols = np.asarray(cols, dtype=np.intp).reshape(-1)
    _check_indices(rows, cloud.n_targets, "row")
    _check_indices(cols, cloud.n_sources, "column")
    ENTRY_COUNTER.add(rows.size * cols.size)
    return kernel.matrix(cloud.targets[rows], cloud.sources[cols])


class KernelOracle:
    """Block entry oracle over (kernel, cloud), as consumed by partial ACA.

    ``oracle(rows, cols)`` returns A[rows, cols]; the transposed view returns
    A[cols, rows]^T so self-source indices can play the role of ACA rows.
    """

    def __init__(self, kernel: KernelSpec, cloud: PointCloud, transposed: bool = False):
        self.kernel = kernel
        self.cloud = cloud
        self.transposed = transposed

    def __call__(self, rows, cols) -> np.ndarray:
        if self.transposed:
            return block(self.kernel, self.cloud, cols, rows).T
        return block(self.kernel, self.cloud, rows, cols)

    def transpose(self) -> KernelOracle:
        return KernelOracle(self.kernel, self.cloud, transposed=not self.transposed)
