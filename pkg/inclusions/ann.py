"""
ANN Classifier - Sigmoid MLP Trained by Scaled Conjugate Gradient

Architecture: d inputs -> hidden sigmoid layer -> n-way softmax, cross-entropy loss.

Training is full batch. Each epoch is one scaled-conjugate-gradient iteration (conjugate
directions, curvature from a finite-difference Hessian-vector product, model-trust scaling
lambda adapted by the comparison ratio, no line search). Validation loss drives early stopping
with patience and best-snapshot restoration.
"""

from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, softmax

from inclusions.shared import TrainingError, DEFAULT_HIDDEN_UNITS

LOG_CLAMP = 1e-300
PARAM_BLOCKS = ("w1", "b1", "w2", "b2")
GRADIENT_FLOOR = 1e-12


@dataclass(eq=False)
class MlpModel:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    classes: List[int]
    mean: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None

    def __post_init__(self):
        d, h = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape[0] != h or self.b2.shape != (self.w2.shape[1],):
            raise ValueError(f"Inconsistent parameter shapes {self.w1.shape}, {self.b1.shape}, "
                             f"{self.w2.shape}, {self.b2.shape}")
        if len(self.classes) != self.w2.shape[1]:
            raise ValueError(f"{len(self.classes)} class labels for {self.w2.shape[1]} output neurons")
        self.classes = [int(c) for c in self.classes]

    @property
    def input_dim(self) -> int:
        return int(self.w1.shape[0])

    @property
    def hidden(self) -> int:
        return int(self.w1.shape[1])

    @property
    def n_classes(self) -> int:
        return int(self.w2.shape[1])

    def parameters(self) -> np.ndarray:
        return np.concatenate([getattr(self, name).ravel() for name in PARAM_BLOCKS])

    def with_parameters(self, theta: np.ndarray) -> "MlpModel":
        blocks, offset = {}, 0
        for name in PARAM_BLOCKS:
            shape = getattr(self, name).shape
            size = int(np.prod(shape))
            blocks[name] = theta[offset:offset + size].reshape(shape).copy()
            offset += size
        return MlpModel(classes=list(self.classes), mean=self.mean, scale=self.scale, **blocks)


@dataclass
class TrainConfig:
    max_epochs: int = 1000
    patience: int = 6
    seed: int = 0
    scg_lambda: float = 1e-6
    scg_sigma: float = 1e-4
    hidden: int = DEFAULT_HIDDEN_UNITS
    normalize: bool = False

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.scg_lambda <= 0 or self.scg_sigma <= 0:
            raise ValueError("SCG scalars must be positive")


def init_model(input_dim: int, classes: Sequence[int], hidden: int = DEFAULT_HIDDEN_UNITS, seed: int = 0,
               mean: Optional[np.ndarray] = None, scale: Optional[np.ndarray] = None) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    n = len(classes)
    lim1 = np.sqrt(6.0 / (input_dim + hidden))
    lim2 = np.sqrt(6.0 / (hidden + n))
    return MlpModel(
        w1=rng.uniform(-lim1, lim1, size=(input_dim, hidden)),
        b1=np.zeros(hidden),
        w2=rng.uniform(-lim2, lim2, size=(hidden, n)),
        b2=np.zeros(n),
        classes=list(classes),
        mean=mean,
        scale=scale,
    )


def standardization(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    return mean, scale

# ============================================================================
# Forward, Loss, Gradient
# ============================================================================


def _inputs(model: MlpModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"Expected inputs of length {model.input_dim}, got shape {x.shape}")
    if model.mean is not None:
        x = (x - model.mean) / model.scale
    return x


def _activations(model: MlpModel, x: np.ndarray):
    hidden = expit(x @ model.w1 + model.b1)
    logits = hidden @ model.w2 + model.b2
    return hidden, softmax(logits, axis=1)


def forward_pass(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Class probabilities for one feature vector (shape (n,)) or a batch (shape (N, n))."""
    single = np.ndim(x) == 1
    batch = _inputs(model, np.atleast_2d(x))
    _, p = _activations(model, batch)
    return p[0] if single else p


def _label_indices(model: MlpModel, labels: Sequence[int]) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(model.classes)}
    try:
        return np.array([lookup[int(y)] for y in labels], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"Label {e.args[0]} is not one of the model classes {model.classes}")


def loss(model: MlpModel, x: np.ndarray, labels: Sequence[int]) -> float:
    """Mean cross-entropy."""
    if len(labels) == 0:
        raise ValueError("Loss of an empty batch is undefined")
    idx = _label_indices(model, labels)
    _, p = _activations(model, _inputs(model, x))
    return float(-np.mean(np.log(np.maximum(p[np.arange(len(idx)), idx], LOG_CLAMP))))


def gradient(model: MlpModel, x: np.ndarray, labels: Sequence[int]) -> Dict[str, np.ndarray]:
    """Backpropagated gradient of the mean cross-entropy, keyed by parameter block."""
    if len(labels) == 0:
        raise ValueError("Gradient of an empty batch is undefined")
    idx = _label_indices(model, labels)
    x = _inputs(model, x)
    hidden, p = _activations(model, x)

    d_logits = p.copy()
    d_logits[np.arange(len(idx)), idx] -= 1.0
    d_logits /= len(idx)
    d_hidden = (d_logits @ model.w2.T) * hidden * (1.0 - hidden)
    grads = {
        "w1": x.T @ d_hidden,
        "b1": d_hidden.sum(axis=0),
        "w2": hidden.T @ d_logits,
        "b2": d_logits.sum(axis=0),
    }
    for name in PARAM_BLOCKS:
        if not np.all(np.isfinite(grads[name])):
            raise TrainingError(f"Non-finite gradient in parameter block {name}")
    return grads


def flat_gradient(model: MlpModel, x: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    grads = gradient(model, x, labels)
    return np.concatenate([grads[name].ravel() for name in PARAM_BLOCKS])

# ============================================================================
# Prediction
# ============================================================================


def predict_batch(model: MlpModel, x: np.ndarray, seed: int = 0) -> np.ndarray:
    """O_net for every row; ties between maximal probabilities broken by a seeded uniform draw."""
    rng = np.random.default_rng(seed)
    p = forward_pass(model, np.atleast_2d(x))
    out = np.empty(len(p), dtype=np.int64)
    classes = np.asarray(model.classes)
    for i, row in enumerate(p):
        winners = np.flatnonzero(row == row.max())
        out[i] = classes[winners[0] if len(winners) == 1 else rng.choice(winners)]
    return out


def predict(model: MlpModel, x: np.ndarray, seed: int = 0) -> int:
    return int(predict_batch(model, np.asarray(x, dtype=float).reshape(1, -1), seed)[0])


def accuracy(model: MlpModel, x: np.ndarray, labels: Sequence[int], seed: int = 0) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("Accuracy of an empty set is undefined")
    return float(np.mean(predict_batch(model, x, seed) == labels))

# ============================================================================
# Training
# ============================================================================


class EarlyStopper:
    """Tracks the best validation loss and stops after `patience` epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.best_state: Any = None
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float, state: Any) -> bool:
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_state = state
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def scg_minimize(objective: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
                 theta: np.ndarray, max_iterations: int, sigma0: float = 1e-4, lambda0: float = 1e-6,
                 callback: Optional[Callable[[int, np.ndarray, float, bool], bool]] = None):
    """
    Scaled conjugate gradient. `callback(iteration, theta, loss, accepted)` runs after every
    iteration and returns True to stop. Returns (theta, loss, iterations).
    """
    w = theta.copy()
    n_params = len(w)
    f = objective(w)
    r = -grad(w)
    p = r.copy()
    lam, lam_bar = lambda0, 0.0
    success = True
    delta = 0.0
    p2 = float(p @ p)

    for k in range(1, max_iterations + 1):
        if p2 == 0.0:
            break
        if success:
            sigma = sigma0 / np.sqrt(p2)
            s = (grad(w + sigma * p) + r) / sigma
            delta = float(p @ s)

        delta += (lam - lam_bar) * p2
        if delta <= 0:
            lam_bar = 2.0 * (lam - delta / p2)
            delta = -delta + lam * p2
            lam = lam_bar

        mu = float(p @ r)
        if mu == 0.0:
            p = r.copy()
            p2 = float(p @ p)
            success = True
            continue
        alpha = mu / delta
        w_new = w + alpha * p
        f_new = objective(w_new)
        if not np.isfinite(f_new):
            raise TrainingError(f"Non-finite loss at epoch {k}")
        comparison = 2.0 * delta * (f - f_new) / (mu * mu)

        accepted = comparison >= 0
        if accepted:
            lam_bar = 0.0
            success = True
            if comparison >= 0.75:
                lam *= 0.25
        else:
            lam_bar = lam
            success = False
        # trust-region growth uses the direction of this iteration
        if comparison < 0.25:
            lam += delta * (1.0 - comparison) / p2

        if accepted:
            w, f = w_new, f_new
            r_new = -grad(w)
            if k % n_params == 0:
                p = r_new.copy()
            else:
                beta = (float(r_new @ r_new) - float(r_new @ r)) / mu
                p = r_new + beta * p
            r = r_new
            p2 = float(p @ p)

        if callback is not None and callback(k, w, f, accepted):
            return w, f, k
        if np.linalg.norm(r) < GRADIENT_FLOOR:
            return w, f, k
    return w, f, max_iterations


def train_scg(model: MlpModel, train: Tuple[np.ndarray, Sequence[int]],
              validation: Optional[Tuple[np.ndarray, Sequence[int]]] = None,
              config: Optional[TrainConfig] = None) -> Tuple[MlpModel, List[Dict[str, Any]]]:
    """
    Full-batch SCG on the training set. With a validation set, stops after `patience` epochs
    without validation improvement and returns the best-validation parameters.
    """
    config = config or TrainConfig()
    x_train, y_train = np.asarray(train[0], dtype=float), np.asarray(train[1])
    if validation is not None and len(validation[1]) == 0:
        validation = None

    def objective(theta: np.ndarray) -> float:
        return loss(model.with_parameters(theta), x_train, y_train)

    def grad(theta: np.ndarray) -> np.ndarray:
        return flat_gradient(model.with_parameters(theta), x_train, y_train)

    history: List[Dict[str, Any]] = []
    stopper = EarlyStopper(config.patience)

    def record(epoch: int, theta: np.ndarray, train_loss: float, accepted: bool) -> bool:
        if not np.isfinite(train_loss):
            raise TrainingError(f"Non-finite loss at epoch {epoch}")
        entry = {"epoch": epoch, "train_loss": train_loss, "accepted": accepted}
        if validation is None:
            history.append(entry)
            return False
        current = model.with_parameters(theta)
        entry["val_loss"] = loss(current, validation[0], validation[1])
        history.append(entry)
        return stopper.update(epoch, entry["val_loss"], theta.copy())

    theta, _, _ = scg_minimize(objective, grad, model.parameters(), config.max_epochs,
                               sigma0=config.scg_sigma, lambda0=config.scg_lambda, callback=record)
    if validation is not None and stopper.best_state is not None:
        theta = stopper.best_state
    return model.with_parameters(theta), history


def fit_ann(x_train: np.ndarray, y_train: Sequence[int], x_val: Optional[np.ndarray] = None,
            y_val: Optional[Sequence[int]] = None, config: Optional[TrainConfig] = None,
            classes: Optional[Sequence[int]] = None) -> Tuple[MlpModel, List[Dict[str, Any]]]:
    """Initializes a model for the data (optionally z-scored) and trains it."""
    config = config or TrainConfig()
    x_train = np.asarray(x_train, dtype=float)
    classes = sorted(int(c) for c in (classes if classes is not None else np.unique(y_train)))
    mean = scale = None
    if config.normalize:
        mean, scale = standardization(x_train)
    model = init_model(x_train.shape[1], classes, config.hidden, config.seed, mean, scale)
    validation = (x_val, y_val) if x_val is not None and y_val is not None else None
    return train_scg(model, (x_train, y_train), validation, config)

# ============================================================================
# Serialization
# ============================================================================


def model_to_dict(model: MlpModel) -> Dict[str, Any]:
    data = {
        "kind": "mlp",
        "input_dim": model.input_dim,
        "hidden": model.hidden,
        "n_classes": model.n_classes,
        "classes": list(model.classes),
    }
    for name in PARAM_BLOCKS:
        data[name] = getattr(model, name).tolist()
    data["mean"] = None if model.mean is None else model.mean.tolist()
    data["scale"] = None if model.scale is None else model.scale.tolist()
    return data


def model_from_dict(data: Dict[str, Any]) -> MlpModel:
    if data.get("kind") != "mlp":
        raise ValueError(f"Not an MLP model: kind={data.get('kind')!r}")
    model = MlpModel(
        w1=np.array(data["w1"], dtype=float).reshape(data["input_dim"], data["hidden"]),
        b1=np.array(data["b1"], dtype=float),
        w2=np.array(data["w2"], dtype=float).reshape(data["hidden"], data["n_classes"]),
        b2=np.array(data["b2"], dtype=float),
        classes=data["classes"],
        mean=None if data.get("mean") is None else np.array(data["mean"], dtype=float),
        scale=None if data.get("scale") is None else np.array(data["scale"], dtype=float),
    )
    return model
