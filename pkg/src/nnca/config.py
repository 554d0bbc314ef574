from __future__ import annotations

import math
import os
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError, NNCAError
from .kernels import BUILTIN_KERNELS, KernelSpec, builtin_kernel, merge_kernel

CONFIG_FILENAME = ".nncarc.yml"
USER_CONFIG_DIR = Path.home() / ".config" / "nnca"
THREADS_ENV = "NNCA_THREADS"

DEFAULT_NU = {2: 64, 3: 216, 4: 32}
DEFAULT_SVM = {
    "lambda_box": 10.0,
    "learn_rate": 1e-3,
    "beta_penalty": 1.0,
    "grad_tol": 1e-4,
    "max_iter": 2000,
}

_POSITIVE_FLOATS = ("eta", "eps_nca", "reg_a")
_POSITIVE_INTS = ("oracle_cap", "oracle_sample_rows")


def _find_git_root() -> Path | None:
    try:
        result = subprocess.run(
            ["git", "rev-parse", "--show-toplevel"],
            capture_output=True,
            text=True,
            timeout=5,
        )
        if result.returncode == 0:
            return Path(result.stdout.strip())
    except (FileNotFoundError, subprocess.TimeoutExpired):
        pass
    return None


def _discover_config_files() -> list[Path]:
    """Find config files in order of precedence (lowest first)."""
    paths: list[Path] = []

    user_config = USER_CONFIG_DIR / CONFIG_FILENAME
    if user_config.exists():
        paths.append(user_config)

    # Project-level config (git root or cwd)
    git_root = _find_git_root()
    search_dir = git_root or Path.cwd()
    project_config = search_dir / CONFIG_FILENAME
    if project_config.exists():
        paths.append(project_config)

    return paths


def _parse_yaml(path: Path) -> dict[str, Any]:
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
        if data is None:
            return {}
        if not isinstance(data, dict):
            raise ConfigError(f"Config file must be a YAML mapping: {path}")
        return data
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML in {path}: {e}")


def _positive_float(key: str, value: Any) -> float:
    try:
        number = float(value)
    except (ValueError, TypeError):
        raise ConfigError(f"Invalid {key} value: '{value}' (must be a positive number)")
    if not number > 0 or not math.isfinite(number):
        raise ConfigError(f"Invalid {key} value: {value} (must be a positive number)")
    return number


def _positive_int(key: str, value: Any) -> int:
    if isinstance(value, bool):
        raise ConfigError(f"Invalid {key} value: '{value}' (must be a positive integer)")
    try:
        number = int(value)
    except (ValueError, TypeError):
        raise ConfigError(f"Invalid {key} value: '{value}' (must be a positive integer)")
    if number <= 0 or number != float(value):
        raise ConfigError(f"Invalid {key} value: {value} (must be a positive integer)")
    return number


def _parse_nu(value: Any) -> dict[int, int]:
    if isinstance(value, dict):
        parsed = {}
        for dim, nu in value.items():
            parsed[_positive_int("nu dimension", dim)] = _positive_int("nu", nu)
        return parsed
    nu = _positive_int("nu", value)
    return {dim: nu for dim in DEFAULT_NU}


def _build_custom_kernels(raw_kernels: dict[str, Any]) -> dict[str, KernelSpec]:
    """Build KernelSpec objects from config via the 'extends' keyword.

    Uses multi-pass resolution so a custom kernel may extend another custom
    kernel regardless of declaration order in YAML.
    """
    custom: dict[str, KernelSpec] = {}
    unresolved = dict(raw_kernels)

    max_passes = len(unresolved) + 1
    for _ in range(max_passes):
        if not unresolved:
            break
        still_unresolved: dict[str, Any] = {}
        for name, definition in unresolved.items():
            if not isinstance(definition, dict):
                raise ConfigError(f"Invalid kernel '{name}': expected a mapping")
            extends = definition.get("extends")
            if not extends:
                raise ConfigError(f"Invalid kernel '{name}': missing 'extends'")
            if extends in BUILTIN_KERNELS:
                # dimension is rebound when the kernel is looked up
                base = builtin_kernel(extends, 1)
            elif extends in custom:
                base = custom[extends]
            else:
                still_unresolved[name] = definition
                continue
            overrides = {k: v for k, v in definition.items() if k != "extends"}
            for key, value in overrides.items():
                if key != "formula":
                    overrides[key] = _positive_float(f"kernel '{name}' {key}", value)
            try:
                custom[name] = merge_kernel(base, {**overrides, "name": name})
            except NNCAError as e:
                raise ConfigError(f"Invalid kernel '{name}': {e}")
        unresolved = still_unresolved
    else:
        names = ", ".join(sorted(unresolved.keys()))
        raise ConfigError(
            f"Could not resolve kernels (circular or missing extends?): {names}"
        )

    return custom


def default_config() -> dict[str, Any]:
    return {
        "eta": math.sqrt(2.0),
        "eps_nca": 1e-9,
        "kernel": "reg-log-2d",
        "reg_a": 1e-4,
        "nu": dict(DEFAULT_NU),
        "threads": None,
        "oracle_cap": 20000,
        "oracle_sample_rows": 200,
        "seed": 0,
        "svm": dict(DEFAULT_SVM),
        "custom_kernels": None,
    }


def load_config(explicit_path: str | None = None) -> dict[str, Any]:
    """Load and merge configuration from all sources.

    Returns a dict with keys:
        - eta, eps_nca, reg_a: float
        - kernel: str
        - nu: dict[int, int] (leaf capacity per dimension)
        - threads: int | None
        - oracle_cap, oracle_sample_rows, seed: int
        - svm: dict (lambda_box, learn_rate, beta_penalty, grad_tol, max_iter)
        - custom_kernels: dict[str, KernelSpec] | None
    """
    merged = default_config()

    if explicit_path:
        path = Path(explicit_path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {explicit_path}")
        config_files = [path]
    else:
        config_files = _discover_config_files()

    all_raw_kernels: dict[str, Any] = {}

    for config_file in config_files:
        data = _parse_yaml(config_file)

        for key in _POSITIVE_FLOATS:
            if key in data:
                merged[key] = _positive_float(key, data[key])
        for key in _POSITIVE_INTS:
            if key in data:
                merged[key] = _positive_int(key, data[key])
        if "kernel" in data:
            merged["kernel"] = str(data["kernel"])
        if "seed" in data:
            try:
                merged["seed"] = int(data["seed"])
            except (ValueError, TypeError):
                raise ConfigError(f"Invalid seed value: '{data['seed']}' (must be an integer)")
        if "nu" in data:
            merged["nu"].update(_parse_nu(data["nu"]))
        if "threads" in data:
            threads = data["threads"]
            merged["threads"] = None if threads is None else _positive_int("threads", threads)
        if "svm" in data:
            if not isinstance(data["svm"], dict):
                raise ConfigError(f"Invalid svm section in {config_file}: expected a mapping")
            for key, value in data["svm"].items():
                if key not in DEFAULT_SVM:
                    raise ConfigError(f"Unknown svm setting '{key}' in {config_file}")
                if key == "max_iter":
                    merged["svm"][key] = _positive_int(key, value)
                else:
                    merged["svm"][key] = _positive_float(key, value)
        if "kernels" in data and isinstance(data["kernels"], dict):
            all_raw_kernels.update(data["kernels"])

    if all_raw_kernels:
        merged["custom_kernels"] = _build_custom_kernels(all_raw_kernels)

    return merged


def resolve_threads(flag: int | None, configured: int | None = None) -> int:
    """Thread count from the flag, then NNCA_THREADS, then config, then the CPU count."""
    if flag is not None:
        return _positive_int("threads", flag)
    env = os.environ.get(THREADS_ENV)
    if env:
        return _positive_int(THREADS_ENV, env)
    if configured is not None:
        return configured
    return os.cpu_count() or 1


def _strictly_increasing(values: list) -> bool:
    return all(a < b for a, b in zip(values, values[1:]))


@dataclass
class RunConfig:
    """Resolved settings of one CLI run, layered over the loaded config."""

    command: str
    dim: int = 2
    distribution: str = "uniform"
    n_values: list[int] = field(default_factory=list)
    eps_values: list[float] = field(default_factory=list)
    n_per_axis: list[int] = field(default_factory=list)
    kernel: str = "reg-log-2d"
    reg_a: float | None = None
    eps_nca: float = 1e-9
    nu: int = 64
    eta: float = math.sqrt(2.0)
    seed: int = 0
    threads: int = 1
    output: str | None = None
    oracle_cap: int = 20000
    oracle_sample_rows: int = 200
    repeats: int = 3
    eps_gmres: float = 1e-10
    backends: list[str] = field(default_factory=lambda: ["fast", "dense"])
    shape: str | None = None
    data_path: str | None = None
    svm: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_SVM))

    def validate(self) -> RunConfig:
        if not self.eta > 0:
            raise ConfigError(f"Invalid eta value: {self.eta} (must be a positive number)")
        if not self.eps_nca > 0:
            raise ConfigError(f"Invalid eps_nca value: {self.eps_nca} (must be a positive number)")
        if self.dim < 1:
            raise ConfigError(f"Invalid dimension: {self.dim}")
        if self.nu < 1:
            raise ConfigError(f"Invalid nu value: {self.nu} (must be a positive integer)")
        if self.threads < 1:
            raise ConfigError(f"Invalid threads value: {self.threads} (must be a positive integer)")
        if self.repeats < 1:
            raise ConfigError(f"Invalid repeats value: {self.repeats} (must be a positive integer)")
        if any(n < 1 for n in self.n_values):
            raise ConfigError(f"Sweep sizes must be positive: {self.n_values}")
        if not _strictly_increasing(self.n_values):
            raise ConfigError(f"Sweep sizes must be strictly increasing: {self.n_values}")
        if any(k < 2 for k in self.n_per_axis):
            raise ConfigError(f"Grid sizes need at least 2 points per axis: {self.n_per_axis}")
        if not _strictly_increasing(self.n_per_axis):
            raise ConfigError(f"Grid sizes must be strictly increasing: {self.n_per_axis}")
        if any(not e > 0 for e in self.eps_values):
            raise ConfigError(f"Sweep tolerances must be positive: {self.eps_values}")
        if not _strictly_increasing([-e for e in self.eps_values]):
            raise ConfigError(f"Sweep tolerances must be strictly decreasing: {self.eps_values}")
        return self

    def to_yaml(self) -> str:
        return yaml.safe_dump(asdict(self), sort_keys=False, default_flow_style=None)
