"""NDCG@m, mean NDCG and top-k positive counts over per-user ranked lists."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class RankedList:
    ids: np.ndarray      # outfit ids, best first
    labels: np.ndarray   # 1 positive, 0 neutral, aligned with ids

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_scores(cls, ids, scores, labels) -> "RankedList":
        """Descending score; ties broken by ascending outfit id."""
        ids, scores, labels = np.asarray(ids), np.asarray(scores), np.asarray(labels)
        order = np.lexsort((ids, -scores))
        return cls(ids[order], labels[order].astype(np.int64))

    @classmethod
    def from_labels(cls, labels) -> "RankedList":
        labels = np.asarray(labels, dtype=np.int64)
        return cls(np.arange(len(labels)), labels)


def _labels(ranked) -> np.ndarray:
    return ranked.labels if isinstance(ranked, RankedList) else np.asarray(ranked, dtype=np.int64)


def _discounts(m: int) -> np.ndarray:
    return np.log2(np.maximum(2, np.arange(1, m + 1)))


def ndcg_curve(ranked) -> np.ndarray:
    """NDCG@m for every m = 1..M at once; 0 everywhere when there are no positives."""
    y = _labels(ranked)
    if len(y) == 0:
        return np.zeros(0)
    disc = _discounts(len(y))
    dcg = np.cumsum((2.0 ** y - 1) / disc)
    ideal = np.cumsum((2.0 ** np.sort(y)[::-1] - 1) / disc)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(ideal > 0, dcg / np.where(ideal > 0, ideal, 1), 0.0)


def ndcg_at_m(ranked, m: int) -> float:
    y = _labels(ranked)
    if not 1 <= m <= len(y):
        raise ValueError(f"m={m} outside 1..{len(y)}")
    return float(ndcg_curve(y)[m - 1])


def mean_ndcg(ranked) -> float:
    y = _labels(ranked)
    if len(y) == 0:
        raise ValueError("mean NDCG of an empty list")
    return float(ndcg_curve(y).mean())


def topk_positive_count(ranked, k: int) -> int:
    y = _labels(ranked)
    if not 0 <= k <= len(y):
        raise ValueError(f"k={k} outside 0..{len(y)}")
    return int(y[:k].sum())


def random_baseline(n_pos: int, n_total: int, trials: int = 2000, seed: int = 0) -> tuple[float, float]:
    """Monte Carlo mean NDCG of a uniformly random ranking: (mean, standard error)."""
    if not 0 <= n_pos <= n_total or n_total < 1:
        raise ValueError(f"need 0 <= n_pos <= n_total, got {n_pos}/{n_total}")
    if trials < 1000:
        raise ValueError("use at least 1000 trials")
    rng = np.random.default_rng(seed)
    base = np.zeros(n_total, dtype=np.int64)
    base[:n_pos] = 1
    vals = np.array([mean_ndcg(rng.permutation(base)) for _ in range(trials)])
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(trials))


def expected_topk_random(n_pos: int, n_total: int, k: int) -> float:
    """Hypergeometric mean of positives in the first k of a random ranking."""
    return k * n_pos / n_total


@dataclass
class Metrics:
    ndcg_at: np.ndarray         # index m-1
    mean_ndcg: float
    topk_positive: np.ndarray   # index k-1

    @classmethod
    def of(cls, ranked) -> "Metrics":
        y = _labels(ranked)
        if len(y) == 0:
            raise ValueError("cannot evaluate an empty test set")
        curve = ndcg_curve(y)
        return cls(curve, float(curve.mean()), np.cumsum(y))


def aggregate(per_user: Sequence[Metrics]) -> Metrics:
    """Unweighted mean over users; curves are truncated to the shortest list."""
    if not per_user:
        raise ValueError("nothing to aggregate")
    m = min(len(x.ndcg_at) for x in per_user)
    return Metrics(np.mean([x.ndcg_at[:m] for x in per_user], axis=0),
                   float(np.mean([x.mean_ndcg for x in per_user])),
                   np.mean([x.topk_positive[:m] for x in per_user], axis=0))
