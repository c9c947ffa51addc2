"""
SVM Classifier - Soft-Margin Kernel SVM, SMO Solver, One-vs-One Voting

The binary solver works on the dual with a precomputed Gram matrix. Each iteration picks the
maximal violating pair (first-order working-set selection) and moves it analytically along the
equality constraint, clipped to the box [0, C]. The bias comes from the free support vectors.

Multiclass models train one binary machine per unordered class pair; prediction is a majority
vote with ties going to the smallest class label.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics.pairwise import pairwise_kernels

from inclusions.dataset import kfold
from inclusions.shared import ConvergenceError

KERNEL_KINDS = ("linear", "quadratic")
DEFAULT_C = 1.0
SMO_TOLERANCE = 1e-3
CURVATURE_FLOOR = 1e-12
PASS_FACTOR = 10


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "quadratic"

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"Unknown kernel '{self.kind}'. Expected one of {KERNEL_KINDS}")


def gram(x: np.ndarray, y: Optional[np.ndarray], spec: KernelSpec) -> np.ndarray:
    """Kernel matrix between the rows of x and y (y=None means x against itself)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = x if y is None else np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"Feature lengths differ: {x.shape[1]} vs {y.shape[1]}")
    if spec.kind == "linear":
        return pairwise_kernels(x, y, metric="linear")
    return pairwise_kernels(x, y, metric="poly", degree=2, gamma=1.0, coef0=1.0)


def kernel(x: Sequence[float], y: Sequence[float], spec: KernelSpec) -> float:
    if len(x) != len(y):
        raise ValueError(f"Feature lengths differ: {len(x)} vs {len(y)}")
    return float(gram(np.asarray(x, dtype=float).reshape(1, -1),
                      np.asarray(y, dtype=float).reshape(1, -1), spec)[0, 0])


def feature_map(x: Sequence[float]) -> np.ndarray:
    """
    Explicit quadratic embedding: the coordinates, their squares, and sqrt(2)-scaled pairwise
    products. Length 2l + l(l-1)/2, and (x.y + 1)^2 = phi(x).phi(y) + x.y + 1.
    """
    x = np.asarray(x, dtype=float)
    i, j = np.triu_indices(len(x), k=1)
    return np.concatenate([x, x * x, np.sqrt(2.0) * x[i] * x[j]])


@dataclass(frozen=True, eq=False)
class SvmModel:
    """Binary machine. dual_coef holds alpha_i * y_i for each support vector."""
    support_vectors: np.ndarray
    dual_coef: np.ndarray
    bias: float
    kernel: KernelSpec
    C: float
    support_indices: np.ndarray
    iterations: int = 0

    @property
    def alphas(self) -> np.ndarray:
        return np.abs(self.dual_coef)

    @property
    def n_support(self) -> int:
        return len(self.dual_coef)

# ============================================================================
# SMO
# ============================================================================


def _index_sets(alpha: np.ndarray, y: np.ndarray, C: float) -> Tuple[np.ndarray, np.ndarray]:
    up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
    low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
    return up, low


def _bias(alpha: np.ndarray, grad: np.ndarray, y: np.ndarray, C: float) -> float:
    score = -y * grad
    free = (alpha > 0) & (alpha < C)
    if np.any(free):
        return float(np.mean(score[free]))
    up, low = _index_sets(alpha, y, C)
    return float((score[up].max(initial=-np.inf) + score[low].min(initial=np.inf)) / 2.0)


def _count_violations(alpha: np.ndarray, margins: np.ndarray, C: float, tol: float) -> int:
    """KKT check on y_i f(x_i) per box position of alpha_i."""
    at_zero = alpha <= 0
    at_c = alpha >= C
    free = ~at_zero & ~at_c
    bad = (at_zero & (margins < 1 - tol)) | (free & (np.abs(margins - 1) > tol)) | (at_c & (margins > 1 + tol))
    return int(np.sum(bad))


def _binary_labels(y: Sequence[int]) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or len(y) == 0:
        raise ValueError("Labels must be a non-empty vector")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("Binary SVM labels must be +1 or -1")
    if np.all(y == 1) or np.all(y == -1):
        raise ValueError("Both labels +1 and -1 must be present")
    return y


def train_smo(x: np.ndarray, y: Sequence[int], spec: Optional[KernelSpec] = None, C: float = DEFAULT_C,
              tol: float = SMO_TOLERANCE, max_passes: Optional[int] = None,
              callback: Optional[Callable[[int, float], None]] = None) -> SvmModel:
    """
    Trains a binary soft-margin SVM. A pass is N pair updates; the default budget is 10*N passes.
    `callback(iteration, dual_objective)` runs after every pair update.
    """
    spec = spec or KernelSpec()
    if C <= 0:
        raise ValueError(f"C must be positive, got {C}")
    if tol <= 0:
        raise ValueError(f"Tolerance must be positive, got {tol}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = _binary_labels(y)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} feature rows for {len(y)} labels")

    n = len(y)
    K = gram(x, None, spec)
    diag = np.diag(K).copy()
    alpha = np.zeros(n)
    grad = -np.ones(n)
    budget = (max_passes if max_passes is not None else PASS_FACTOR * n) * n

    iteration = 0
    while True:
        up, low = _index_sets(alpha, y, C)
        score = -y * grad
        i = int(np.argmax(np.where(up, score, -np.inf)))
        j = int(np.argmin(np.where(low, score, np.inf)))
        if score[i] - score[j] < tol:
            break
        if iteration >= budget:
            b = _bias(alpha, grad, y, C)
            violations = _count_violations(alpha, grad + 1.0 + y * b, C, tol)
            raise ConvergenceError(f"SMO did not converge after {iteration} pair updates "
                                   f"({violations} KKT violations remain)", violations=violations)

        curvature = diag[i] + diag[j] - 2.0 * K[i, j]
        if curvature <= 0:
            curvature = CURVATURE_FLOOR
        step = (score[i] - score[j]) / curvature
        # alpha_i moves by y_i*t and alpha_j by -y_j*t, which keeps sum(alpha*y) fixed
        room_i = C - alpha[i] if y[i] > 0 else alpha[i]
        room_j = alpha[j] if y[j] > 0 else C - alpha[j]
        t = min(step, room_i, room_j)

        alpha[i] = min(max(alpha[i] + y[i] * t, 0.0), C)
        alpha[j] = min(max(alpha[j] - y[j] * t, 0.0), C)
        if t == room_i:
            alpha[i] = C if y[i] > 0 else 0.0
        if t == room_j:
            alpha[j] = 0.0 if y[j] > 0 else C
        grad += y * t * (K[:, i] - K[:, j])
        iteration += 1

        if callback is not None:
            callback(iteration, 0.5 * float(alpha.sum() - alpha @ grad))

    b = _bias(alpha, grad, y, C)
    support = np.flatnonzero(alpha > 0)
    return SvmModel(
        support_vectors=x[support].copy(),
        dual_coef=(alpha * y)[support],
        bias=b,
        kernel=spec,
        C=float(C),
        support_indices=support,
        iterations=iteration,
    )


def decision(model: SvmModel, x: np.ndarray):
    """f(x) = sum_i alpha_i y_i K(x_i, x) + b, for one vector or a batch."""
    single = np.ndim(x) == 1
    values = gram(np.atleast_2d(x), model.support_vectors, model.kernel) @ model.dual_coef + model.bias
    return float(values[0]) if single else values


def classify(model: SvmModel, x: np.ndarray):
    """Sign of the decision value; f = 0 is classified as +1."""
    f = decision(model, x)
    if np.ndim(f) == 0:
        return 1 if f >= 0 else -1
    return np.where(f >= 0, 1, -1)


def dual_objective(model: SvmModel) -> float:
    c = model.dual_coef
    return float(np.sum(np.abs(c)) - 0.5 * c @ gram(model.support_vectors, None, model.kernel) @ c)


def kkt_violations(model: SvmModel, x: np.ndarray, y: Sequence[int], tol: float = SMO_TOLERANCE) -> int:
    """Number of training points whose margin is inconsistent with their multiplier."""
    y = _binary_labels(y)
    alpha = np.zeros(len(y))
    alpha[model.support_indices] = model.alphas
    return _count_violations(alpha, y * decision(model, np.atleast_2d(x)), model.C, tol)

# ============================================================================
# One-vs-One
# ============================================================================


@dataclass(frozen=True, eq=False)
class OvoModel:
    classes: List[int]
    machines: Dict[Tuple[int, int], SvmModel]
    kernel: KernelSpec
    C: float
    mean: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    iterations: Dict[Tuple[int, int], int] = field(default_factory=dict)


def _standardize(model: OvoModel, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if model.mean is not None:
        x = (x - model.mean) / model.scale
    return x


def train_ovo(x: np.ndarray, labels: Sequence[int], spec: Optional[KernelSpec] = None, C: float = DEFAULT_C,
              tol: float = SMO_TOLERANCE, classes: Optional[Sequence[int]] = None, normalize: bool = False,
              workers: int = 1) -> OvoModel:
    """One binary machine per class pair (a, b) with a < b; class a is the +1 side."""
    spec = spec or KernelSpec()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    labels = np.asarray(labels)
    classes = sorted(int(c) for c in (classes if classes is not None else np.unique(labels)))
    if len(classes) < 2:
        raise ValueError("At least two classes are required")
    for c in classes:
        count = int(np.sum(labels == c))
        if count < 2:
            raise ValueError(f"Class {c} has {count} training points; at least 2 are required")
    if len(x) != len(labels):
        raise ValueError(f"{len(x)} feature rows for {len(labels)} labels")

    mean = scale = None
    if normalize:
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale[scale == 0] = 1.0
        x = (x - mean) / scale

    pairs = list(combinations(classes, 2))

    def fit_pair(pair: Tuple[int, int]) -> SvmModel:
        a, b = pair
        mask = (labels == a) | (labels == b)
        return train_smo(x[mask], np.where(labels[mask] == a, 1, -1), spec, C, tol)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        fitted = list(executor.map(fit_pair, pairs))

    machines = dict(zip(pairs, fitted))
    return OvoModel(classes=classes, machines=machines, kernel=spec, C=float(C), mean=mean, scale=scale,
                    iterations={pair: m.iterations for pair, m in machines.items()})


def ovo_votes(model: OvoModel, x: np.ndarray) -> np.ndarray:
    x = _standardize(model, x)
    index = {c: k for k, c in enumerate(model.classes)}
    votes = np.zeros((len(x), len(model.classes)), dtype=np.int64)
    rows = np.arange(len(x))
    for (a, b), machine in model.machines.items():
        winner = np.where(classify(machine, x) > 0, index[a], index[b])
        np.add.at(votes, (rows, winner), 1)
    return votes


def predict_ovo(model: OvoModel, x: np.ndarray):
    """Majority vote; argmax picks the first (smallest) label among tied classes."""
    single = np.ndim(x) == 1
    out = np.asarray(model.classes)[np.argmax(ovo_votes(model, x), axis=1)]
    return int(out[0]) if single else out


def cross_validate(x: np.ndarray, labels: Sequence[int], spec: Optional[KernelSpec] = None, C: float = DEFAULT_C,
                   k: int = 5, seed: int = 0, normalize: bool = False, workers: int = 1) -> Dict[str, Any]:
    """K-fold accuracy plus out-of-fold predictions aligned with the input rows."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    labels = np.asarray(labels)
    classes = sorted(int(c) for c in np.unique(labels))
    predictions = np.zeros(len(labels), dtype=np.int64)
    fold_accuracies = []
    for fit_idx, hold_idx in kfold(np.arange(len(labels)), k, seed):
        model = train_ovo(x[fit_idx], labels[fit_idx], spec, C, classes=classes, normalize=normalize,
                          workers=workers)
        predictions[hold_idx] = predict_ovo(model, x[hold_idx])
        fold_accuracies.append(float(np.mean(predictions[hold_idx] == labels[hold_idx])))
    return {
        "fold_accuracies": fold_accuracies,
        "mean_accuracy": float(np.mean(fold_accuracies)),
        "predictions": predictions,
    }

# ============================================================================
# Serialization
# ============================================================================


def ovo_to_dict(model: OvoModel) -> Dict[str, Any]:
    return {
        "kind": "svm_ovo",
        "kernel": model.kernel.kind,
        "C": model.C,
        "classes": list(model.classes),
        "mean": None if model.mean is None else model.mean.tolist(),
        "scale": None if model.scale is None else model.scale.tolist(),
        "machines": [
            {
                "pair": [a, b],
                "support_vectors": m.support_vectors.tolist(),
                "dual_coef": m.dual_coef.tolist(),
                "bias": m.bias,
                "support_indices": m.support_indices.tolist(),
                "iterations": m.iterations,
            }
            for (a, b), m in model.machines.items()
        ],
    }


def ovo_from_dict(data: Dict[str, Any]) -> OvoModel:
    if data.get("kind") != "svm_ovo":
        raise ValueError(f"Not a one-vs-one SVM model: kind={data.get('kind')!r}")
    spec = KernelSpec(data["kernel"])
    machines = {}
    for entry in data["machines"]:
        pair = (int(entry["pair"][0]), int(entry["pair"][1]))
        sv = np.array(entry["support_vectors"], dtype=float)
        machines[pair] = SvmModel(
            support_vectors=sv.reshape(len(entry["dual_coef"]), -1),
            dual_coef=np.array(entry["dual_coef"], dtype=float),
            bias=float(entry["bias"]),
            kernel=spec,
            C=float(data["C"]),
            support_indices=np.array(entry["support_indices"], dtype=np.int64),
            iterations=int(entry.get("iterations", 0)),
        )
    return OvoModel(
        classes=[int(c) for c in data["classes"]],
        machines=machines,
        kernel=spec,
        C=float(data["C"]),
        mean=None if data.get("mean") is None else np.array(data["mean"], dtype=float),
        scale=None if data.get("scale") is None else np.array(data["scale"], dtype=float),
        iterations={pair: m.iterations for pair, m in machines.items()},
    )
