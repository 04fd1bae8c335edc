"""
Micro classifier with hand-derived gradients.

One hidden ReLU layer (or a plain linear map when hidden == 0), a softmax
head, and three losses: cross-entropy ("bce", used on 2-logit heads and on
multi-class heads alike), focal loss, and temperature-scaled distillation loss.
Everything is float64 and deterministic under the run seed.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from django.core.exceptions import ValidationError

from .rng import make_rng
from .validators import validate_dimension, validate_finite, validate_positive

logger = logging.getLogger("moekd")

PROB_FLOOR = 1e-12
LOSS_KINDS = ("bce", "focal", "kd")


class TrainingDiverged(FloatingPointError):
    """Training loss became NaN or infinite."""

    def __init__(self, epoch, batch, loss):
        super().__init__(f"Training diverged at epoch {epoch}, batch {batch} (loss={loss!r}).")
        self.epoch = epoch
        self.batch = batch


# ============================================================================
# PARAMETERS
# ============================================================================


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden: int
    classes: int

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden < 0 or self.classes < 2:
            raise ValidationError(f"Invalid architecture {self}.", code="invalid_architecture")

    @property
    def parameter_count(self):
        if self.hidden == 0:
            return self.input_dim * self.classes + self.classes
        return self.input_dim * self.hidden + self.hidden + self.hidden * self.classes + self.classes

    def to_dict(self):
        return {"input_dim": self.input_dim, "hidden": self.hidden, "classes": self.classes}


@dataclass(frozen=True, eq=False)
class ClassifierParams:
    """
    Dense parameter set. With hidden == 0, w1 is (D, 0), b1 is empty and w2 is
    (D, C): the model is the single layer x.w2 + b2.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    arch: Architecture

    def __post_init__(self):
        d, h, c = self.arch.input_dim, self.arch.hidden, self.arch.classes
        expected = {"w1": (d, h), "b1": (h,), "w2": (h if h else d, c), "b2": (c,)}
        for name, shape in expected.items():
            block = np.asarray(getattr(self, name), dtype=np.float64)
            if block.shape != shape:
                raise ValidationError(
                    f"{name} has shape {block.shape}, expected {shape}.", code="shape"
                )
            validate_finite(block, name)
            object.__setattr__(self, name, block)

    def blocks(self):
        return (self.w1, self.b1, self.w2, self.b2)

    def replace(self, blocks):
        return ClassifierParams(*blocks, arch=self.arch)

    def equals(self, other):
        return self.arch == other.arch and all(
            np.array_equal(a, b) for a, b in zip(self.blocks(), other.blocks())
        )


def zero_params(arch):
    d, h, c = arch.input_dim, arch.hidden, arch.classes
    return ClassifierParams(
        np.zeros((d, h)), np.zeros(h), np.zeros((h if h else d, c)), np.zeros(c), arch
    )


def init_params(arch, seed):
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer, biases zero."""
    rng = make_rng(seed, "init")
    d, h, c = arch.input_dim, arch.hidden, arch.classes
    if h == 0:
        bound = 1.0 / math.sqrt(d)
        return ClassifierParams(
            np.zeros((d, 0)), np.zeros(0), rng.uniform(-bound, bound, size=(d, c)), np.zeros(c), arch
        )
    bound1 = 1.0 / math.sqrt(d)
    bound2 = 1.0 / math.sqrt(h)
    w1 = rng.uniform(-bound1, bound1, size=(d, h))
    w2 = rng.uniform(-bound2, bound2, size=(h, c))
    return ClassifierParams(w1, np.zeros(h), w2, np.zeros(c), arch)


# ============================================================================
# FORWARD PASS
# ============================================================================


def _as_matrix(x, params):
    values = np.asarray(getattr(x, "values", x), dtype=np.float64)
    validate_dimension(values, params.arch.input_dim)
    return values


def forward_batch(params, X):
    """Logits for an (n, D) matrix; also returns the hidden activations."""
    X = _as_matrix(X, params)
    if params.arch.hidden == 0:
        return X @ params.w2 + params.b2, None
    hidden = np.maximum(X @ params.w1 + params.b1, 0.0)
    return hidden @ params.w2 + params.b2, hidden


def forward(params, x):
    """
    Logits for one feature vector.

    Raises:
        ValidationError: x does not have the model's input dimension
    """
    logits, _ = forward_batch(params, _as_matrix(x, params)[np.newaxis, :])
    return logits[0]


def predict(params, x):
    return int(np.argmax(forward(params, x)))


# ============================================================================
# SOFTMAX AND LOSSES
# ============================================================================


def softmax_t(logits, temperature=1.0):
    """
    Temperature softmax, max-shifted for stability.

    Raises:
        ValidationError: non-finite logit or temperature <= 0
    """
    validate_positive(temperature, "temperature")
    scaled = validate_finite(logits, "logits") / temperature
    shifted = np.exp(scaled - scaled.max())
    return shifted / shifted.sum()


class LossValue(NamedTuple):
    loss: float
    grad: np.ndarray  # d loss / d logits
    clamped: bool = False


def focal_loss(probs, target, alpha, gamma):
    """
    Single-sample focal loss -alpha_t (1 - p_t)^gamma log p_t.

    The gradient is taken with respect to the pre-softmax logits that produced
    ``probs`` (softmax at T=1). p_t below 1e-12 is clamped and flagged.
    """
    probs = np.asarray(probs, dtype=np.float64)
    alpha_t = float(alpha[target]) if alpha is not None else 1.0
    validate_positive(alpha_t, "alpha")
    validate_positive(gamma, "gamma", allow_zero=True)

    p_t = float(probs[target])
    clamped = p_t < PROB_FLOOR
    if clamped:
        logger.warning(f"Focal loss clamped p_t={p_t!r} to {PROB_FLOOR}")
        p_t = PROB_FLOOR
    log_p = math.log(p_t)

    one_hot = np.zeros_like(probs)
    one_hot[target] = 1.0
    if gamma == 0:
        loss = -alpha_t * log_p
        coef = alpha_t
    else:
        remaining = 1.0 - p_t
        modulator = remaining ** gamma
        slope = gamma * remaining ** (gamma - 1.0) if remaining > 0.0 else 0.0
        loss = -alpha_t * modulator * log_p
        coef = alpha_t * (modulator - slope * p_t * log_p)
    return LossValue(loss, coef * (probs - one_hot), clamped)


def cross_entropy(probs, target):
    """Softmax cross-entropy; on a 2-logit head this is the binary CE."""
    return focal_loss(probs, target, None, 0.0)


def kd_loss(student_logits, teacher_logits, temperature):
    """
    Soft cross-entropy between softened distributions, scaled by T^2.

    Differs from KL(teacher || student) by the constant teacher entropy, so the
    gradient T (p_student - p_teacher) is the same. Teacher logits are constants.
    """
    student_logits = validate_finite(student_logits, "student logits")
    teacher_logits = validate_finite(teacher_logits, "teacher logits")
    if student_logits.shape != teacher_logits.shape:
        raise ValidationError("Student and teacher logits differ in length.", code="dimension_mismatch")
    p_student = softmax_t(student_logits, temperature)
    p_teacher = softmax_t(teacher_logits, temperature)
    log_student = np.log(np.maximum(p_student, PROB_FLOOR))
    loss = -float(np.dot(p_teacher, log_student)) * temperature * temperature
    return LossValue(loss, (p_student - p_teacher) * temperature)


def entropy(probs):
    probs = np.asarray(probs, dtype=np.float64)
    nonzero = probs[probs > 0]
    return -float(np.dot(nonzero, np.log(nonzero)))


# ============================================================================
# TRAINING CONFIG
# ============================================================================


@dataclass(frozen=True)
class LossSpec:
    kind: str
    alpha: tuple | None = None
    gamma: float = 2.0
    temperature: float = 2.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValidationError(f"Unknown loss kind {self.kind!r}.", code="invalid")
        validate_positive(self.gamma, "gamma", allow_zero=True)
        validate_positive(self.temperature, "temperature")
        if self.alpha is not None:
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
            for value in self.alpha:
                validate_positive(value, "alpha")

    def to_dict(self):
        data = {"kind": self.kind}
        if self.kind == "focal":
            data.update(alpha=list(self.alpha) if self.alpha is not None else None, gamma=self.gamma)
        if self.kind == "kd":
            data["temperature"] = self.temperature
        return data

    def sample_loss(self, logits, target):
        """LossValue for one row of logits against a class index or teacher logits."""
        if self.kind == "kd":
            return kd_loss(logits, target, self.temperature)
        probs = softmax_t(logits, 1.0)
        if self.kind == "focal":
            return focal_loss(probs, int(target), self.alpha, self.gamma)
        return cross_entropy(probs, int(target))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    momentum: float
    seed: int
    loss: LossSpec
    patience: int | None = None
    min_delta: float = 1e-5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1.", code="invalid")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1.", code="invalid")
        validate_positive(self.learning_rate, "learning_rate", allow_zero=True)
        validate_positive(self.momentum, "momentum", allow_zero=True)

    def with_loss(self, loss):
        return TrainConfig(
            self.epochs, self.batch_size, self.learning_rate, self.momentum,
            self.seed, loss, self.patience, self.min_delta,
        )

    def with_seed(self, seed):
        return TrainConfig(
            self.epochs, self.batch_size, self.learning_rate, self.momentum,
            seed, self.loss, self.patience, self.min_delta,
        )


@dataclass(frozen=True, eq=False)
class TrainResult:
    params: ClassifierParams
    loss_trace: list = field(default_factory=list)
    epochs_run: int = 0


# ============================================================================
# GRADIENTS AND TRAINING
# ============================================================================


def loss_and_gradients(params, X, targets, loss):
    """
    Mean loss over a batch and its gradient for every parameter block.

    Args:
        params: ClassifierParams
        X: (n, D) feature matrix
        targets: n class indices, or an (n, C) matrix of teacher logits for kd
        loss: LossSpec

    Returns:
        (mean loss, [dw1, db1, dw2, db2])
    """
    logits, hidden = forward_batch(params, X)
    n = logits.shape[0]
    dlogits = np.empty_like(logits)
    total = 0.0
    for row in range(n):
        value = loss.sample_loss(logits[row], targets[row])
        total += value.loss
        dlogits[row] = value.grad
    dlogits /= n

    if params.arch.hidden == 0:
        grads = [np.zeros_like(params.w1), np.zeros_like(params.b1), X.T @ dlogits, dlogits.sum(axis=0)]
    else:
        dhidden = (dlogits @ params.w2.T) * (hidden > 0.0)
        grads = [X.T @ dhidden, dhidden.sum(axis=0), hidden.T @ dlogits, dlogits.sum(axis=0)]
    return total / n, grads


def _stack(data, loss):
    X = np.stack([np.asarray(getattr(x, "values", x), dtype=np.float64) for x, _ in data])
    if loss.kind == "kd":
        targets = np.stack([np.asarray(t, dtype=np.float64) for _, t in data])
    else:
        targets = np.asarray([int(t) for _, t in data], dtype=np.int64)
    return X, targets


def train(init, data, cfg):
    """
    Mini-batch SGD with momentum.

    Each epoch visits the data in a permutation drawn from the stream
    (cfg.seed, "epoch", epoch). With cfg.patience set, training stops once the
    full-data loss fails to improve by cfg.min_delta for that many epochs.

    Args:
        init: starting ClassifierParams (not modified)
        data: non-empty list of (FeatureVector, target) pairs
        cfg: TrainConfig

    Returns:
        TrainResult with final params and the per-epoch full-data loss trace

    Raises:
        ValidationError: empty data or mismatched dimensions
        TrainingDiverged: a batch loss became non-finite
    """
    if not data:
        raise ValidationError("Training data is empty.", code="empty")
    X, targets = _stack(data, cfg.loss)
    validate_dimension(X, init.arch.input_dim)
    n = X.shape[0]

    blocks = [block.copy() for block in init.blocks()]
    velocity = [np.zeros_like(block) for block in blocks]
    trace = []
    best = math.inf
    stale = 0
    epochs_run = 0

    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, "epoch", epoch).permutation(n)
        for batch, start in enumerate(range(0, n, cfg.batch_size)):
            rows = order[start:start + cfg.batch_size]
            current = init.replace(blocks)
            batch_loss, grads = loss_and_gradients(current, X[rows], targets[rows], cfg.loss)
            if not math.isfinite(batch_loss):
                raise TrainingDiverged(epoch, batch, batch_loss)
            for block, speed, grad in zip(blocks, velocity, grads):
                speed *= cfg.momentum
                speed -= cfg.learning_rate * grad
                block += speed
            if not all(np.all(np.isfinite(block)) for block in blocks):
                raise TrainingDiverged(epoch, batch, batch_loss)

        epochs_run = epoch + 1
        epoch_loss, _ = loss_and_gradients(init.replace(blocks), X, targets, cfg.loss)
        trace.append(epoch_loss)
        logger.debug(f"epoch {epoch}: loss={epoch_loss:.6f}")

        if cfg.patience is not None:
            if epoch_loss < best - cfg.min_delta:
                best = epoch_loss
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    logger.info(f"Early stop after epoch {epoch} (loss plateau at {epoch_loss:.6f})")
                    break

    return TrainResult(init.replace(blocks), trace, epochs_run)


def accuracy(params, X, labels):
    """Argmax accuracy over a matrix of features; None for an empty set."""
    if len(labels) == 0:
        return None
    logits, _ = forward_batch(params, X)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


# ============================================================================
# GRADIENT CHECK
# ============================================================================


def grad_check(params, x, loss, target, h=1e-5):
    """
    Largest relative error between analytic and central-difference gradients.

    Relative error is |g_a - g_n| / max(1, |g_a|, |g_n|) over every parameter.
    """
    X = _as_matrix(x, params).reshape(1, -1)
    targets = np.asarray([target], dtype=np.float64 if loss.kind == "kd" else np.int64)
    _, analytic = loss_and_gradients(params, X, targets, loss)

    worst = 0.0
    blocks = [block.copy() for block in params.blocks()]
    for block, grad in zip(blocks, analytic):
        flat = block.reshape(-1)
        grad_flat = grad.reshape(-1)
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + h
            plus, _ = loss_and_gradients(params.replace(blocks), X, targets, loss)
            flat[index] = original - h
            minus, _ = loss_and_gradients(params.replace(blocks), X, targets, loss)
            flat[index] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = grad_flat[index]
            error = abs(exact - numeric) / max(1.0, abs(exact), abs(numeric))
            worst = max(worst, error)
    return worst
