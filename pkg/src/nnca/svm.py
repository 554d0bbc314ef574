"""Kernel SVM trained by projected gradient ascent on the penalized dual.

Each iteration needs one kernel product K v over the training features. The
``fast`` backend assembles an H² matrix once and reuses it; the ``dense``
backend recomputes the kernel rows every iteration.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .compressor import H2Stats, assemble
from .errors import ModelFormatError, NNCAError, TrainingError
from .geometry import PointCloud
from .kernels import KernelSpec, get_kernel
from .matvec import dense_matvec
from .tree import build_tree

logger = logging.getLogger(__name__)

BACKENDS = ("fast", "dense")
SHAPES = ("rings2d", "hypersphere4d")
TRAIN_FRACTION = 0.85
MARGIN_SLACK = 1e-8
MODEL_MAGIC = "# nnca-svm-model 1"
PREDICT_CHUNK_ROWS = 1024
POWER_ITERATIONS = 20


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if self.features.shape[0] != self.labels.size:
            raise TrainingError(
                f"{self.features.shape[0]} feature rows but {self.labels.size} labels"
            )
        bad = ~np.isin(self.labels, (-1.0, 1.0))
        if bad.any():
            raise TrainingError(f"Labels must be +1 or -1, found {self.labels[bad][0]!r}")

    @classmethod
    def from_arrays(
        cls, features, labels, train_fraction: float = TRAIN_FRACTION, seed: int = 0
    ) -> Dataset:
        labels = np.asarray(labels, dtype=np.float64).reshape(-1)
        train = _stratified_mask(labels, train_fraction, seed)
        return cls(features=features, labels=labels, train_mask=train, test_mask=~train)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def train_x(self) -> np.ndarray:
        return self.features[self.train_mask]

    @property
    def train_y(self) -> np.ndarray:
        return self.labels[self.train_mask]

    @property
    def test_x(self) -> np.ndarray:
        return self.features[self.test_mask]

    @property
    def test_y(self) -> np.ndarray:
        return self.labels[self.test_mask]

    def class_counts(self) -> dict[str, int]:
        """Training (C1, C2) and test (c1, c2) sizes of class +1 and class -1."""
        return {
            "C1": int(np.sum(self.train_y > 0)),
            "C2": int(np.sum(self.train_y < 0)),
            "c1": int(np.sum(self.test_y > 0)),
            "c2": int(np.sum(self.test_y < 0)),
        }


@dataclass
class SVMModel:
    alpha: np.ndarray
    bias: float
    kernel: KernelSpec
    lambda_box: float
    beta_penalty: float
    features: np.ndarray
    labels: np.ndarray

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.alpha > 0.0)


@dataclass
class TrainReport:
    iterations: int
    wall_seconds: float
    per_iter_seconds: float
    assembly_seconds: float = 0.0
    converged: bool = False
    grad_norm: float = math.inf
    backend: str = "fast"
    h2_stats: H2Stats | None = None
    grad_history: list[float] = field(default_factory=list)
    step_size: float = 0.0
    curvature: float = 0.0


@dataclass
class Prediction:
    label: int
    score: float


@dataclass
class Accuracy:
    """Per-class and overall accuracy in percent; None when a class is absent."""

    a1: float | None
    a2: float | None
    oa: float


def _stratified_mask(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    mask = np.zeros(labels.size, dtype=bool)
    for cls in (1.0, -1.0):
        idx = np.flatnonzero(labels == cls)
        if idx.size == 0:
            continue
        chosen = rng.permutation(idx)[: int(round(fraction * idx.size))]
        mask[chosen] = True
    return mask


def _unit_directions(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    g = rng.standard_normal((n, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _shell_radii(rng: np.random.Generator, n: int, dim: int, r0: float, r1: float) -> np.ndarray:
    # uniform in volume between radii r0 and r1
    u = rng.uniform(size=n)
    return (r0**dim + u * (r1**dim - r0**dim)) ** (1.0 / dim)


def synth_dataset(shape: str, m: int, seed: int = 0) -> Dataset:
    """Two-class point sets separated by a radius band.

    ``rings2d`` lives in [-1.4, 1.4]^2 (a disc inside a ring) and
    ``hypersphere4d`` in [-1, 1]^4 (a ball inside a shell). Labels alternate
    +1, -1 by sample index.
    """
    if shape not in SHAPES:
        raise TrainingError(f"Unknown dataset shape '{shape}'. Available: {', '.join(SHAPES)}")
    if m < 20:
        raise TrainingError(f"Dataset needs at least 20 samples, got {m}")
    rng = np.random.default_rng(seed)
    labels = np.where(np.arange(m) % 2 == 0, 1.0, -1.0)
    inner = labels > 0
    if shape == "rings2d":
        dim, bands = 2, ((0.0, 0.6), (0.85, 1.35))
    else:
        dim, bands = 4, ((0.0, 0.55), (0.75, 1.0))
    radii = np.empty(m)
    radii[inner] = _shell_radii(rng, int(inner.sum()), dim, *bands[0])
    radii[~inner] = _shell_radii(rng, int((~inner).sum()), dim, *bands[1])
    features = _unit_directions(rng, m, dim) * radii[:, None]
    return Dataset.from_arrays(features, labels, seed=seed)


class KernelProduct:
    """K v over the training features for one backend."""

    def __init__(self, kernel, features, backend, eps_nca, nu, eta, threads):
        self.cloud = PointCloud.from_points(features)
        self.kernel = kernel
        self.backend = backend
        self.threads = threads
        self.h2 = None
        self.assembly_seconds = 0.0
        if backend == "fast":
            start = time.perf_counter()
            tree = build_tree(self.cloud, nu=nu, eta=eta)
            self.h2 = assemble(tree, kernel, self.cloud, eps_nca, threads=threads)
            self.assembly_seconds = time.perf_counter() - start

    def __call__(self, v: np.ndarray) -> np.ndarray:
        if self.h2 is not None:
            return self.h2.matvec(v, threads=self.threads)
        return dense_matvec(self.kernel, self.cloud, v)


def dual_gradient(kv: np.ndarray, y: np.ndarray, v: np.ndarray, beta: float) -> np.ndarray:
    """1 - y * (K v) - beta * sum(v) * y with v = y * alpha."""
    return 1.0 - y * kv - beta * float(np.sum(v)) * y


def curvature_bound(
    product, y: np.ndarray, beta: float, iterations: int = POWER_ITERATIONS
) -> float:
    """Largest eigenvalue of Y K Y + beta y y^T by power iteration.

    This is minus the Hessian of the dual objective, so steps up to 1/bound
    keep the gradient iteration monotone.
    """
    z = y / math.sqrt(y.size)
    bound = 0.0
    for _ in range(iterations):
        hz = y * product(y * z) + beta * float(np.dot(y, z)) * y
        bound = float(np.linalg.norm(hz))
        if bound == 0.0 or not math.isfinite(bound):
            break
        z = hz / bound
    return bound


def _bias(alpha, y, kv, lambda_box) -> float:
    margin = (alpha > MARGIN_SLACK) & (alpha < lambda_box - MARGIN_SLACK)
    if not margin.any():
        margin = alpha > 0.0
    if not margin.any():
        return 0.0
    return float(np.mean(y[margin] - kv[margin]))


def train(
    data: Dataset,
    kernel: KernelSpec,
    lambda_box: float = 10.0,
    learn_rate: float = 1e-3,
    beta_penalty: float = 1.0,
    max_iter: int = 2000,
    grad_tol: float = 1e-4,
    backend: str = "fast",
    eps_nca: float = 1e-9,
    nu: int = 64,
    eta: float = math.sqrt(2.0),
    threads: int | None = None,
) -> tuple[SVMModel, TrainReport]:
    """Projected gradient ascent on the dual.

    alpha <- clip(alpha + step * DL(alpha), 0, lambda_box) until
    ||DL|| / sqrt(N_train) <= grad_tol or max_iter steps, where step is
    learn_rate capped at 1 / curvature_bound. The bias is fitted afterwards
    from the margin support vectors.
    """
    if backend not in BACKENDS:
        raise TrainingError(f"Unknown backend '{backend}'. Available: {', '.join(BACKENDS)}")
    if not learn_rate > 0:
        raise TrainingError(f"Invalid learn_rate value: {learn_rate} (must be a positive number)")
    if not lambda_box > 0:
        raise TrainingError(f"Invalid lambda_box value: {lambda_box} (must be a positive number)")
    x = data.train_x
    y = data.train_y
    if y.size == 0:
        raise TrainingError("Training split is empty")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise TrainingError("Training split must contain both classes")

    start = time.perf_counter()
    product = KernelProduct(kernel, x, backend, eps_nca, nu, eta, threads)
    n = y.size
    curvature = curvature_bound(product, y, beta_penalty)
    step = min(learn_rate, 1.0 / curvature) if curvature > 0.0 else learn_rate
    if step < learn_rate:
        logger.info(
            "SVM step reduced from %.3e to %.3e (curvature %.3e)", learn_rate, step, curvature
        )
    alpha = np.zeros(n)
    history: list[float] = []
    converged = False
    grad_norm = math.inf
    iterations = 0
    loop_start = time.perf_counter()
    while True:
        v = y * alpha
        kv = product(v)
        grad = dual_gradient(kv, y, v, beta_penalty)
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"Non-finite gradient at iteration {iterations}")
        grad_norm = float(np.linalg.norm(grad)) / math.sqrt(n)
        history.append(grad_norm)
        if grad_norm <= grad_tol:
            converged = True
            break
        if iterations >= max_iter:
            break
        alpha = np.clip(alpha + step * grad, 0.0, lambda_box)
        iterations += 1
    loop_seconds = time.perf_counter() - loop_start

    bias = _bias(alpha, y, kv, lambda_box)
    model = SVMModel(
        alpha=alpha,
        bias=bias,
        kernel=kernel,
        lambda_box=float(lambda_box),
        beta_penalty=float(beta_penalty),
        features=x,
        labels=y,
    )
    report = TrainReport(
        iterations=iterations,
        wall_seconds=time.perf_counter() - start,
        per_iter_seconds=loop_seconds / (iterations + 1),
        assembly_seconds=product.assembly_seconds,
        converged=converged,
        grad_norm=grad_norm,
        backend=backend,
        h2_stats=product.h2.stats if product.h2 is not None else None,
        grad_history=history,
        step_size=step,
        curvature=curvature,
    )
    if not converged:
        logger.info("SVM training stopped at max_iter=%d (gradient norm %.3e)", max_iter, grad_norm)
    return model, report


def decision_scores(model: SVMModel, points) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    weights = model.alpha * model.labels
    keep = weights != 0.0
    scores = np.full(points.shape[0], model.bias)
    if not keep.any():
        return scores
    support = model.features[keep]
    for start in range(0, points.shape[0], PREDICT_CHUNK_ROWS):
        stop = start + PREDICT_CHUNK_ROWS
        scores[start:stop] += model.kernel.matrix(points[start:stop], support) @ weights[keep]
    return scores


def _labels_from(scores: np.ndarray) -> np.ndarray:
    return np.where(scores >= 0.0, 1, -1)


def predict(model: SVMModel, x) -> Prediction:
    score = float(decision_scores(model, np.asarray(x, dtype=np.float64).reshape(1, -1))[0])
    return Prediction(label=1 if score >= 0.0 else -1, score=score)


def predict_batch(model: SVMModel, points) -> tuple[np.ndarray, np.ndarray]:
    scores = decision_scores(model, points)
    return _labels_from(scores), scores


def accuracy(predicted, truth) -> Accuracy:
    predicted = np.asarray(predicted).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if truth.size == 0:
        raise TrainingError("Test split is empty")
    correct = predicted == truth

    def _percent(mask):
        if not mask.any():
            return None
        return 100.0 * float(np.mean(correct[mask]))

    return Accuracy(
        a1=_percent(truth > 0),
        a2=_percent(truth < 0),
        oa=100.0 * float(np.mean(correct)),
    )


def evaluate(model: SVMModel, features, labels) -> Accuracy:
    predicted, _ = predict_batch(model, features)
    return accuracy(predicted, labels)


def save_model(model: SVMModel, path: str | Path) -> None:
    path = Path(path)
    lines = [
        MODEL_MAGIC,
        f"dim {model.features.shape[1]}",
        f"n_train {model.alpha.size}",
        f"kernel {model.kernel.name}",
    ]
    lines += [f"param {k} {v!r}" for k, v in sorted(model.kernel.params.items())]
    lines += [
        f"lambda_box {model.lambda_box!r}",
        f"beta_penalty {model.beta_penalty!r}",
        f"bias {model.bias!r}",
        "---",
    ]
    for row, y, a in zip(model.features, model.labels, model.alpha):
        lines.append(",".join(repr(float(v)) for v in (*row, y, a)))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _header_value(header: dict, key: str, path: Path, cast=float):
    if key not in header:
        raise ModelFormatError(f"Missing '{key}' in model file {path}")
    try:
        return cast(header[key])
    except ValueError:
        raise ModelFormatError(f"Invalid '{key}' value in model file {path}: {header[key]}")


def load_model(
    path: str | Path, custom_kernels: Mapping[str, KernelSpec] | None = None
) -> SVMModel:
    path = Path(path)
    if not path.exists():
        raise ModelFormatError(f"Model file not found: {path}")
    text = path.read_text(encoding="utf-8").splitlines()
    if not text or text[0].strip() != MODEL_MAGIC:
        raise ModelFormatError(f"Not an nnca model file: {path}")
    try:
        sep = text.index("---")
    except ValueError:
        raise ModelFormatError(f"Model file {path} has no body separator")

    header: dict[str, str] = {}
    params: dict[str, float] = {}
    for line in text[1:sep]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "param" and len(parts) == 3:
            try:
                params[parts[1]] = float(parts[2])
            except ValueError:
                raise ModelFormatError(f"Invalid kernel parameter in {path}: {line}")
        elif len(parts) == 2:
            header[parts[0]] = parts[1]
        else:
            raise ModelFormatError(f"Malformed header line in {path}: {line}")

    dim = _header_value(header, "dim", path, int)
    n_train = _header_value(header, "n_train", path, int)
    try:
        name = _header_value(header, "kernel", path, str)
        kernel = get_kernel(name, dim, custom_kernels, **params)
    except NNCAError as e:
        raise ModelFormatError(f"Model file {path}: {e}")

    rows = []
    for lineno, line in enumerate(text[sep + 1 :], start=sep + 2):
        if not line.strip():
            continue
        try:
            values = [float(v) for v in line.split(",")]
        except ValueError:
            raise ModelFormatError(f"Malformed body row {lineno} in {path}")
        if len(values) != dim + 2:
            raise ModelFormatError(
                f"Body row {lineno} in {path} has {len(values)} columns, expected {dim + 2}"
            )
        rows.append(values)
    if len(rows) != n_train:
        raise ModelFormatError(f"Model file {path} declares {n_train} rows but has {len(rows)}")
    body = np.asarray(rows, dtype=np.float64).reshape(-1, dim + 2)
    return SVMModel(
        alpha=body[:, dim + 1].copy(),
        bias=_header_value(header, "bias", path),
        kernel=kernel,
        lambda_box=_header_value(header, "lambda_box", path),
        beta_penalty=_header_value(header, "beta_penalty", path),
        features=body[:, :dim].copy(),
        labels=body[:, dim].copy(),
    )
