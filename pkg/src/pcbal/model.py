"""Classification over frozen embeddings and the trainable per-class residuals.

Prediction is a temperature-scaled softmax over cosine similarities between an
image embedding and per-class text embeddings. Adaptation trains one residual
vector per class; the residual is added to that class's text embeddings and the
sum is re-normalized, so a zero residual reproduces zero-shot behaviour
exactly. Multiple descriptions per class are combined either by averaging
per-description softmax mass (average-similarity) or by classifying against
the normalized mean description embedding (average-embedding).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .dataset import ClassTextBank, EmbeddingDataset, NORM_TOL
from .errors import (
    AggregationMismatch,
    ConfigError,
    DimMismatch,
    EmptyInput,
    IndexOutOfRange,
    NormViolation,
    ZeroVector,
)

LOG_FLOOR = 1e-12


class Aggregation(str, Enum):
    """How multiple per-class descriptions are folded into one prediction."""

    NONE = "none"
    AVG_SIMILARITY = "as"
    AVG_EMBEDDING = "ae"


@dataclass(frozen=True)
class PromptModel:
    """Per-class residual vectors plus the softmax temperature."""

    residuals: np.ndarray  # (K, dim) float64
    temperature: float
    aggregation: Aggregation = Aggregation.NONE

    def __post_init__(self) -> None:
        object.__setattr__(self, "residuals", np.asarray(self.residuals, dtype=np.float64))
        if self.residuals.ndim != 2:
            raise DimMismatch("residuals must be a (K, dim) matrix")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))

    @property
    def num_classes(self) -> int:
        return int(self.residuals.shape[0])

    @property
    def dim(self) -> int:
        return int(self.residuals.shape[1])


def zero_model(num_classes: int, dim: int, tau: float, aggregation: Aggregation = Aggregation.NONE) -> PromptModel:
    """Model with all-zero residuals: predicts exactly like the raw text bank."""
    return PromptModel(np.zeros((num_classes, dim)), tau, aggregation)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.002
    epochs: int = 200
    init_std: float = 0.02
    batch_size: int | None = None  # None = full batch
    lr_schedule: str = "cosine"  # "cosine" | "constant"
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.init_std < 0:
            raise ConfigError("init_std must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError("lr_schedule must be 'cosine' or 'constant'")


def _check_model_bank(model: PromptModel, bank: ClassTextBank) -> None:
    if model.num_classes != bank.num_classes or model.dim != bank.dim:
        raise DimMismatch(
            f"model is ({model.num_classes}, {model.dim}) but bank is ({bank.num_classes}, {bank.dim})"
        )


def effective_text_embeddings(model: PromptModel, bank: ClassTextBank) -> list[np.ndarray]:
    """Residual-shifted, re-normalized description embeddings, grouped by class.

    A class whose residual is exactly zero keeps its stored rows bit-for-bit.
    """
    _check_model_bank(model, bank)
    out: list[np.ndarray] = []
    for k, group in enumerate(bank.per_class):
        w = model.residuals[k]
        if not w.any():
            out.append(np.asarray(group, dtype=np.float64))
            continue
        shifted = np.asarray(group, dtype=np.float64) + w[None, :]
        norms = np.linalg.norm(shifted, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise ZeroVector(f"class {k}: residual cancels a description embedding")
        out.append(shifted / norms)
    return out


def effective_class_embeddings(model: PromptModel, bank: ClassTextBank) -> np.ndarray:
    """Average-embedding classifier rows: normalize(mean of descriptions + residual)."""
    _check_model_bank(model, bank)
    rows = np.empty((bank.num_classes, bank.dim), dtype=np.float64)
    for k, group in enumerate(bank.per_class):
        w = model.residuals[k]
        if not w.any() and group.shape[0] == 1:
            rows[k] = np.asarray(group[0], dtype=np.float64)
            continue
        mean = np.asarray(group, dtype=np.float64).mean(axis=0) + w
        n = float(np.linalg.norm(mean))
        if n < 1e-12:
            raise ZeroVector(f"class {k}: mean description embedding cancels to zero")
        rows[k] = mean / n
    return rows


# --- internal similarity tables -------------------------------------------------

@dataclass(frozen=True)
class _PairTable:
    """Effective classifier rows plus bookkeeping for gradients.

    ``rows`` holds one unit row per (class, description) pair (or per class in
    average-embedding mode); ``inv_norms`` is 1/||unnormalized row||, the factor
    the normalization Jacobian contributes.
    """

    rows: np.ndarray  # (P, dim)
    inv_norms: np.ndarray  # (P,)
    pair_class: np.ndarray  # (P,) class index of each row
    deltas: np.ndarray  # (K,)


def _pair_table(model: PromptModel, bank: ClassTextBank) -> _PairTable:
    _check_model_bank(model, bank)
    deltas = bank.counts
    stacked = np.asarray(bank.stacked(), dtype=np.float64)
    pair_class = np.repeat(np.arange(bank.num_classes), deltas)
    shifted = stacked + model.residuals[pair_class]
    norms = np.linalg.norm(shifted, axis=1)
    if np.any(norms < 1e-12):
        raise ZeroVector("a residual cancels a description embedding")
    rows = shifted / norms[:, None]
    zero_pairs = ~model.residuals.any(axis=1)[pair_class]
    rows[zero_pairs] = stacked[zero_pairs]
    return _PairTable(rows=rows, inv_norms=1.0 / norms, pair_class=pair_class, deltas=deltas)


def _mean_table(model: PromptModel, bank: ClassTextBank) -> _PairTable:
    deltas = bank.counts
    means = np.vstack([np.asarray(g, dtype=np.float64).mean(axis=0) for g in bank.per_class])
    shifted = means + model.residuals
    norms = np.linalg.norm(shifted, axis=1)
    if np.any(norms < 1e-12):
        raise ZeroVector("a residual cancels a mean description embedding")
    rows = shifted / norms[:, None]
    exact = (~model.residuals.any(axis=1)) & (deltas == 1)
    for k in np.flatnonzero(exact):
        rows[k] = np.asarray(bank.per_class[k][0], dtype=np.float64)
    return _PairTable(rows=rows, inv_norms=1.0 / norms, pair_class=np.arange(bank.num_classes), deltas=deltas)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_unit_rows(x: np.ndarray) -> None:
    norms = np.linalg.norm(x, axis=1)
    if np.any(np.abs(norms - 1.0) > NORM_TOL):
        raise NormViolation("image embeddings must be unit-norm")


def _as_batch(e_img: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(e_img, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimMismatch(f"image embeddings must have dim {dim}")
    return x


def predict_proba_batch(model: PromptModel, bank: ClassTextBank, images: np.ndarray) -> np.ndarray:
    """Class probabilities for a batch of unit image embeddings, shape (B, K)."""
    x = _as_batch(images, bank.dim)
    _check_unit_rows(x)
    agg = model.aggregation
    if agg is Aggregation.NONE:
        if np.any(bank.counts != 1):
            raise AggregationMismatch("aggregation 'none' requires exactly one description per class")
        table = _pair_table(model, bank)
        return _softmax((x @ table.rows.T) / model.temperature)
    if agg is Aggregation.AVG_EMBEDDING:
        table = _mean_table(model, bank)
        return _softmax((x @ table.rows.T) / model.temperature)
    # average similarity: softmax over all (class, description) pairs,
    # per-class mass averaged within the class then renormalized
    table = _pair_table(model, bank)
    q = _softmax((x @ table.rows.T) / model.temperature)
    agg_mat = np.zeros((len(table.pair_class), bank.num_classes))
    agg_mat[np.arange(len(table.pair_class)), table.pair_class] = 1.0 / table.deltas[table.pair_class]
    s = q @ agg_mat
    return s / s.sum(axis=1, keepdims=True)


def predict_proba(model: PromptModel, bank: ClassTextBank, e_img: np.ndarray) -> np.ndarray:
    """Class probabilities for a single unit image embedding, shape (K,)."""
    return predict_proba_batch(model, bank, e_img)[0]


def zero_shot_proba(bank: ClassTextBank, aggregation: Aggregation, tau: float, e_img: np.ndarray) -> np.ndarray:
    """Prediction with all-zero residuals (the unadapted classifier)."""
    return predict_proba(zero_model(bank.num_classes, bank.dim, tau, aggregation), bank, e_img)


def predict_labels(model: PromptModel, bank: ClassTextBank, images: np.ndarray) -> np.ndarray:
    """Argmax class per image; ties resolve to the lowest class index."""
    return np.argmax(predict_proba_batch(model, bank, images), axis=1)


def cross_entropy(proba: Sequence[float] | np.ndarray, y: int) -> float:
    """-log p[y] with the probability floored at 1e-12."""
    p = np.asarray(proba, dtype=np.float64)
    if not 0 <= y < p.shape[0]:
        raise IndexOutOfRange(f"class index {y} outside [0, {p.shape[0]})")
    return float(-math.log(max(float(p[y]), LOG_FLOOR)))


def mean_loss(model: PromptModel, bank: ClassTextBank, images: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of a labeled batch."""
    p = predict_proba_batch(model, bank, images)
    y = np.asarray(labels, dtype=np.int64)
    picked = np.maximum(p[np.arange(len(y)), y], LOG_FLOOR)
    return float(-np.log(picked).mean())


def loss_gradient(
    model: PromptModel, bank: ClassTextBank, images: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Mean gradient of the cross-entropy loss w.r.t. the residual matrix.

    Differentiates through the re-normalization of the shifted text embeddings
    and through the configured aggregation. For a unit image x and effective
    row e with pre-normalization norm n, d cos/d residual = (x - cos * e) / n.
    """
    x = _as_batch(images, bank.dim)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise EmptyInput("gradient requires a non-empty batch")
    if y.shape != (x.shape[0],):
        raise DimMismatch("labels must align with the image batch")
    if np.any(y < 0) or np.any(y >= bank.num_classes):
        raise IndexOutOfRange("label outside class range")
    agg = model.aggregation
    tau = model.temperature
    b = x.shape[0]

    if agg is Aggregation.AVG_SIMILARITY:
        table = _pair_table(model, bank)
        cos = x @ table.rows.T  # (B, P)
        q = _softmax(cos / tau)
        ind = np.zeros((len(table.pair_class), bank.num_classes))
        ind[np.arange(len(table.pair_class)), table.pair_class] = 1.0
        class_mass = q @ ind  # (B, K): total softmax mass per class
        inv_delta = 1.0 / table.deltas
        total = class_mass @ inv_delta  # (B,)
        mass_true = np.maximum(class_mass[np.arange(b), y], 1e-300)
        # dL/dz per pair: q * (1/(delta_k * total) - [class == y]/mass_true)
        coeff = q * (inv_delta[table.pair_class][None, :] / total[:, None])
        is_true = table.pair_class[None, :] == y[:, None]
        coeff -= np.where(is_true, q / mass_true[:, None], 0.0)
    else:
        if agg is Aggregation.NONE:
            if np.any(bank.counts != 1):
                raise AggregationMismatch("aggregation 'none' requires exactly one description per class")
            table = _pair_table(model, bank)
        else:
            table = _mean_table(model, bank)
        cos = x @ table.rows.T  # (B, K)
        p = _softmax(cos / tau)
        coeff = p.copy()
        coeff[np.arange(b), y] -= 1.0

    # chain rule through cosine and normalization, summed over the batch
    lhs = coeff.T @ x  # (P, dim)
    scale = (coeff * cos).sum(axis=0)  # (P,)
    per_row = (lhs - scale[:, None] * table.rows) * table.inv_norms[:, None]
    grad = np.zeros((bank.num_classes, bank.dim))
    np.add.at(grad, table.pair_class, per_row)
    return grad / (b * tau)


def train_with_trace(
    bank: ClassTextBank,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    aggregation: Aggregation,
    tau: float,
) -> tuple[PromptModel, np.ndarray]:
    """Gradient-descent training of the residuals; returns (model, loss per epoch).

    Residuals start from N(0, init_std^2) drawn with cfg.seed; the learning
    rate follows cosine annealing eta_t = eta0 * (1 + cos(pi t / T)) / 2 unless
    a constant schedule is configured. The loss trace holds the mean training
    cross-entropy before any step and after each epoch (length epochs + 1).
    """
    x = _as_batch(images, bank.dim)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise EmptyInput("training requires at least one labeled example")
    if np.any(y < 0) or np.any(y >= bank.num_classes):
        raise IndexOutOfRange("label outside class range")

    rng = np.random.default_rng(cfg.seed)
    w = rng.normal(0.0, cfg.init_std, size=(bank.num_classes, bank.dim))
    agg = Aggregation(aggregation)

    def current() -> PromptModel:
        return PromptModel(w.copy(), tau, agg)

    losses = [mean_loss(current(), bank, x, y)]
    for t in range(cfg.epochs):
        if cfg.lr_schedule == "cosine":
            lr = cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * t / cfg.epochs))
        else:
            lr = cfg.learning_rate
        if cfg.batch_size is None:
            w -= lr * loss_gradient(current(), bank, x, y)
        else:
            order = rng.permutation(x.shape[0])
            for start in range(0, len(order), cfg.batch_size):
                chunk = order[start : start + cfg.batch_size]
                w -= lr * loss_gradient(current(), bank, x[chunk], y[chunk])
        losses.append(mean_loss(current(), bank, x, y))
    return current(), np.asarray(losses)


def train(
    bank: ClassTextBank,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    aggregation: Aggregation,
    tau: float,
) -> PromptModel:
    """Train residuals on a labeled batch and return the final-epoch model."""
    return train_with_trace(bank, images, labels, cfg, aggregation, tau)[0]


def evaluate(model: PromptModel, bank: ClassTextBank, test: EmbeddingDataset) -> float:
    """Fraction of test items whose argmax prediction matches the true label."""
    if test.dim != bank.dim:
        raise DimMismatch("test set and bank dims differ")
    preds = predict_labels(model, bank, test.items.astype(np.float64))
    return float(np.mean(preds == test.labels.astype(np.int64)))
