"""Linear SVMs trained with Pegasos-style stochastic subgradient steps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# footnote-level constant: a patch "fires" when its score is strictly above this
FIRE_THRESHOLD = -1.0


@dataclass
class LinearSvmModel:
    w: np.ndarray
    b: float
    lambda_reg: float

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if not (np.all(np.isfinite(self.w)) and np.isfinite(self.b)):
            raise FloatingPointError("non-finite SVM parameters")


@dataclass
class OvrModel:
    models: list[LinearSvmModel]

    @property
    def num_classes(self) -> int:
        return len(self.models)

    def weights(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.stack([m.w for m in self.models]), np.array([m.b for m in self.models]))


def balanced_objective(w, b, pos, neg, lambda_reg) -> float:
    """(lam/2)|[w,b]|^2 + mean positive hinge/2 + mean negative hinge/2.

    This is the objective the class-balanced sampler optimizes in expectation;
    the bias is treated as the weight of a constant feature.
    """
    hp = np.maximum(0.0, 1.0 - (pos @ w + b)).mean()
    hn = np.maximum(0.0, 1.0 + (neg @ w + b)).mean()
    return 0.5 * lambda_reg * (float(w @ w) + b * b) + 0.5 * hp + 0.5 * hn


def train_binary(pos, neg, lambda_reg: float = 1e-2, epochs: int = 10, rng_seed: int = 0,
                 batch_size: int = 1) -> LinearSvmModel:
    """Pegasos on the class-balanced hinge loss.

    Each step draws positives or negatives with probability 1/2, uses the step
    size 1/(lambda t) and projects onto the ball of radius 1/sqrt(lambda). The
    returned model is the average of the last 10% of iterates.
    """
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.ndim == 1:
        pos = pos[:, None]
    if neg.ndim == 1:
        neg = neg[:, None]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("both classes need at least one sample")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise ValueError("non-finite feature value")
    if lambda_reg <= 0:
        raise ValueError("lambda_reg must be positive")

    dim = pos.shape[1]
    steps = max(10, epochs * (len(pos) + len(neg)) // batch_size)
    rng = np.random.default_rng(rng_seed)
    use_pos = rng.random((steps, batch_size)) < 0.5
    pick_pos = rng.integers(len(pos), size=(steps, batch_size))
    pick_neg = rng.integers(len(neg), size=(steps, batch_size))

    # augmented weight vector: [w, b]
    theta = np.zeros(dim + 1)
    avg = np.zeros(dim + 1)
    tail_start = steps - max(1, steps // 10)
    radius = 1.0 / np.sqrt(lambda_reg)
    for t in range(1, steps + 1):
        up = use_pos[t - 1]
        xb = np.where(up[:, None], pos[pick_pos[t - 1]], neg[pick_neg[t - 1]])
        yb = np.where(up, 1.0, -1.0)
        margin = yb * (xb @ theta[:-1] + theta[-1])
        viol = margin < 1.0
        eta = 1.0 / (lambda_reg * t)
        theta *= 1.0 - eta * lambda_reg
        if viol.any():
            g = (yb[viol, None] * xb[viol]).sum(axis=0)
            theta[:-1] += (eta / batch_size) * g
            theta[-1] += (eta / batch_size) * yb[viol].sum()
        nrm = np.linalg.norm(theta)
        if nrm > radius:
            theta *= radius / nrm
        if t > tail_start:
            avg += theta
    avg /= steps - tail_start
    return LinearSvmModel(avg[:-1].copy(), float(avg[-1]), lambda_reg)


def score(model: LinearSvmModel, x) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.w.shape[0]:
        raise ValueError(f"dimension mismatch: model {model.w.shape[0]}, input {x.shape[-1]}")
    s = x @ model.w + model.b
    return float(s) if np.ndim(s) == 0 else s


def fires(model: LinearSvmModel, x):
    s = score(model, x)
    return s > FIRE_THRESHOLD


def train_ovr(data, labels, num_classes: int, lambda_reg: float = 1e-4, epochs: int = 20,
              seed: int = 0, batch_size: int = 1) -> OvrModel:
    data = np.asarray(data, dtype=np.float64)
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=num_classes)
    if np.any(counts[:num_classes] == 0):
        missing = np.flatnonzero(counts[:num_classes] == 0).tolist()
        raise ValueError(f"classes without samples: {missing}")
    if num_classes == 1:
        return OvrModel([LinearSvmModel(np.zeros(data.shape[1]), 0.0, lambda_reg)])
    models = []
    for c in range(num_classes):
        models.append(train_binary(data[labels == c], data[labels != c], lambda_reg, epochs,
                                   rng_seed=seed * 1009 + c, batch_size=batch_size))
    return OvrModel(models)


def decision_scores(model: OvrModel, x) -> np.ndarray:
    w, b = model.weights()
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[1]:
        raise ValueError("dimension mismatch")
    return x @ w.T + b


def predict(model: OvrModel, x):
    """argmax over per-class scores; np.argmax resolves ties to the smallest id."""
    s = decision_scores(model, x)
    out = np.argmax(s, axis=-1)
    return int(out) if np.ndim(out) == 0 else out
