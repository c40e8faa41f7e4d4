"""Query strategies: random, entropy, greedy k-center coreset, and BADGE.

Every selector returns distinct dataset indices drawn from the given pool and
is a pure function of its inputs plus the supplied RNG stream, so a fixed seed
reproduces the same selection regardless of available parallelism. Ties are
broken by the lowest dataset index throughout, which keeps brute-force test
oracles exact.
"""

from __future__ import annotations

from enum import Enum
from typing import Sequence

import numpy as np

from .dataset import ClassTextBank
from .errors import BudgetExceedsPool, NotADistribution
from .model import PromptModel, predict_proba_batch

class StrategyKind(str, Enum):
    RANDOM = "random"
    ENTROPY = "entropy"
    CORESET = "coreset"
    BADGE = "badge"


def entropy(p: np.ndarray) -> float:
    """Shannon entropy -sum(p log p) in nats, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if abs(float(p.sum()) - 1.0) > 1e-6 or np.any(p < -1e-9):
        raise NotADistribution("entropy input must be a probability vector")
    pos = p[p > 0]
    return float(-(pos * np.log(pos)).sum())


def _entropy_rows(p: np.ndarray) -> np.ndarray:
    safe = np.where(p > 0, p, 1.0)
    return -(p * np.log(safe)).sum(axis=1)


def _check_budget(n: int, pool_size: int) -> None:
    if n < 0:
        raise BudgetExceedsPool("selection size must be non-negative")
    if n > pool_size:
        raise BudgetExceedsPool(f"asked for {n} selections from a pool of {pool_size}")


def select_random(pool: Sequence[int], n: int, rng: np.random.Generator) -> list[int]:
    """n distinct indices drawn uniformly without replacement from the pool."""
    pool_arr = np.asarray(pool, dtype=np.int64)
    _check_budget(n, len(pool_arr))
    return [int(i) for i in rng.choice(pool_arr, size=n, replace=False)]


def select_entropy(
    model: PromptModel,
    bank: ClassTextBank,
    items: np.ndarray,
    pool: Sequence[int],
    n: int,
) -> list[int]:
    """The n pool indices with the highest prediction entropy.

    Output is ordered by descending entropy, then ascending dataset index.
    """
    pool_arr = np.asarray(pool, dtype=np.int64)
    _check_budget(n, len(pool_arr))
    proba = predict_proba_batch(model, bank, np.asarray(items, dtype=np.float64)[pool_arr])
    scores = _entropy_rows(proba)
    order = np.lexsort((pool_arr, -scores))
    return [int(i) for i in pool_arr[order[:n]]]


def select_coreset(
    items: np.ndarray,
    labeled: Sequence[int],
    pool: Sequence[int],
    n: int,
) -> list[int]:
    """Greedy k-center selection over Euclidean distances.

    Each pick maximizes the distance to the nearest already-covered point
    (labeled set plus earlier picks). With an empty labeled set the first
    center is the lowest pool index. Returned in greedy pick order.
    """
    pool_arr = np.asarray(pool, dtype=np.int64)
    _check_budget(n, len(pool_arr))
    if n == 0:
        return []
    pts = np.asarray(items, dtype=np.float64)[pool_arr]

    def dist_to(center: np.ndarray) -> np.ndarray:
        diff = pts - center[None, :]
        return np.sqrt((diff * diff).sum(axis=1))

    active = np.ones(len(pool_arr), dtype=bool)
    picked: list[int] = []

    labeled = list(labeled)
    if labeled:
        min_dist = np.full(len(pool_arr), np.inf)
        centers = np.asarray(items, dtype=np.float64)[np.asarray(labeled, dtype=np.int64)]
        for c in centers:
            min_dist = np.minimum(min_dist, dist_to(c))
    else:
        first = int(np.argmin(pool_arr))
        picked.append(int(pool_arr[first]))
        active[first] = False
        min_dist = dist_to(pts[first])

    while len(picked) < n:
        masked = np.where(active, min_dist, -np.inf)
        best = float(masked.max())
        cands = np.flatnonzero(masked == best)
        j = int(cands[np.argmin(pool_arr[cands])])
        picked.append(int(pool_arr[j]))
        active[j] = False
        min_dist = np.minimum(min_dist, dist_to(pts[j]))
    return picked


def gradient_embedding(
    model: PromptModel, bank: ClassTextBank, e_img: np.ndarray, pseudo_label: int
) -> np.ndarray:
    """Cross-entropy gradient w.r.t. a linear output head at the pseudo-label.

    Closed form (p - onehot) outer e_img flattened row-major over classes; the
    magnitude carries the model's uncertainty about the item and the direction
    its feature, which is what the k-means++ stage clusters.
    """
    p = predict_proba_batch(model, bank, e_img)[0]
    coeff = p.copy()
    coeff[pseudo_label] -= 1.0  # IndexOutOfRange surfaces via numpy bounds check
    return np.outer(coeff, np.asarray(e_img, dtype=np.float64)).ravel()


def kmeanspp_select(vectors: np.ndarray, n: int, rng: np.random.Generator) -> list[int]:
    """k-means++ seeding: positions proportional to squared distance to the nearest pick.

    The first index is uniform; each later index is drawn with probability
    proportional to its squared Euclidean distance to the closest
    already-selected vector. If every remaining distance is zero the draw
    falls back to uniform over the unselected indices. Seeding only, no Lloyd
    iterations.
    """
    v = np.asarray(vectors, dtype=np.float64)
    m = v.shape[0]
    _check_budget(n, m)
    if n == 0:
        return []
    picked = [int(rng.integers(m))]
    taken = np.zeros(m, dtype=bool)
    taken[picked[0]] = True
    diff = v - v[picked[0]][None, :]
    d2 = (diff * diff).sum(axis=1)
    while len(picked) < n:
        d2[taken] = 0.0
        total = float(d2.sum())
        if total <= 0.0:
            remaining = np.flatnonzero(~taken)
            j = int(remaining[rng.integers(len(remaining))])
        else:
            j = int(rng.choice(m, p=d2 / total))
        picked.append(j)
        taken[j] = True
        diff = v - v[j][None, :]
        d2 = np.minimum(d2, (diff * diff).sum(axis=1))
    return picked


def select_badge(
    model: PromptModel,
    bank: ClassTextBank,
    items: np.ndarray,
    pool: Sequence[int],
    n: int,
    rng: np.random.Generator,
) -> list[int]:
    """BADGE: k-means++ seeding in the pseudo-labeled gradient space."""
    pool_arr = np.asarray(pool, dtype=np.int64)
    _check_budget(n, len(pool_arr))
    x = np.asarray(items, dtype=np.float64)[pool_arr]
    proba = predict_proba_batch(model, bank, x)
    pseudo = np.argmax(proba, axis=1)
    coeff = proba.copy()
    coeff[np.arange(len(pool_arr)), pseudo] -= 1.0
    grads = coeff[:, :, None] * x[:, None, :]  # (B, K, dim) -> flatten per item
    picks = kmeanspp_select(grads.reshape(len(pool_arr), -1), n, rng)
    return [int(pool_arr[j]) for j in picks]


def run_strategy(
    kind: StrategyKind,
    *,
    model: PromptModel,
    bank: ClassTextBank,
    items: np.ndarray,
    labeled: Sequence[int],
    pool: Sequence[int],
    n: int,
    rng: np.random.Generator,
) -> list[int]:
    """Dispatch a query strategy over the unlabeled pool."""
    kind = StrategyKind(kind)
    if kind is StrategyKind.RANDOM:
        return select_random(pool, n, rng)
    if kind is StrategyKind.ENTROPY:
        return select_entropy(model, bank, items, pool, n)
    if kind is StrategyKind.CORESET:
        return select_coreset(items, labeled, pool, n)
    return select_badge(model, bank, items, pool, n, rng)
