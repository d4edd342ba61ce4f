"""Leave-one-out ranking metrics over the full item vocabulary."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .backbone import Model, final_hidden, score_items
from .datasets import Dataset, evaluation_batch


@dataclass
class RankingMetrics:
    recall_at: dict[int, float]
    ndcg_at: dict[int, float]
    n_users: int
    ranks: np.ndarray = field(default=None, repr=False)

    def rows(self, split: str) -> list[str]:
        return [
            f"{split}\t{k}\t{self.recall_at[k]:.6f}\t{self.ndcg_at[k]:.6f}\t{self.n_users}"
            for k in sorted(self.recall_at)
        ]


METRICS_HEADER = "split\tK\trecall\tndcg\tn_users"


def rank_of_target(scores: Sequence[float], target: int, exclusions: Iterable[int] = ()) -> int:
    """1-based rank of ``target``; ties go to the smaller item index.

    Item 0 (padding) is always excluded.
    """
    excluded = set(exclusions) | {0}
    if target in excluded:
        raise ValueError(f"target {target} is excluded from ranking")
    s = np.asarray(scores, dtype=np.float64)
    t = s[target]
    idx = np.arange(s.shape[0])
    ahead = (s > t) | ((s == t) & (idx < target))
    if excluded:
        drop = np.fromiter((e for e in excluded if 0 <= e < s.shape[0]), dtype=np.int64)
        ahead[drop] = False
    return int(ahead.sum()) + 1


def batch_ranks(scores: np.ndarray, targets: np.ndarray, exclude: np.ndarray | None = None) -> np.ndarray:
    """Vectorised :func:`rank_of_target` for ``(B, V)`` scores.

    ``exclude`` is an optional ``(B, V)`` boolean mask of extra exclusions.
    """
    B, V = scores.shape
    rows = np.arange(B)
    t = scores[rows, targets][:, None]
    idx = np.arange(V)[None, :]
    ahead = (scores > t) | ((scores == t) & (idx < targets[:, None]))
    ahead[:, 0] = False
    if exclude is not None:
        if exclude[rows, targets].any():
            raise ValueError("a target is excluded from ranking")
        ahead &= ~exclude
    return ahead.sum(axis=1) + 1


def recall_at_k(rank: int, k: int) -> int:
    return int(rank <= k)


def ndcg_at_k(rank: int, k: int) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def metrics_from_ranks(ranks: np.ndarray, ks: Sequence[int] = (5, 10)) -> RankingMetrics:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no users to evaluate")
    recall = {k: float(np.mean(ranks <= k)) for k in ks}
    ndcg = {k: float(np.mean(np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0))) for k in ks}
    return RankingMetrics(recall, ndcg, int(ranks.size), ranks)


def evaluate(
    model: Model,
    dataset: Dataset,
    split: str = "test",
    max_len: int | None = None,
    ks: Sequence[int] = (5, 10),
    exclude_history: bool = False,
    chunk: int = 512,
) -> RankingMetrics:
    """Full-vocabulary Recall@K / NDCG@K from the last position's hidden state."""
    max_len = max_len or model.cfg.max_len
    batch = _cached_batch(dataset, split, max_len)
    ranks = []
    for lo in range(0, len(batch), chunk):
        sub = batch.take(slice(lo, lo + chunk)).trim()
        hidden = final_hidden(model, sub)
        scores = score_items(hidden, model)
        exclude = None
        if exclude_history:
            exclude = np.zeros(scores.shape, dtype=bool)
            rows = np.repeat(np.arange(len(sub)), sub.ids.shape[1])
            exclude[rows, sub.ids.reshape(-1)] = True
            exclude[:, 0] = False
            exclude[np.arange(len(sub)), sub.targets] = False
        ranks.append(batch_ranks(scores, sub.targets, exclude))
    return metrics_from_ranks(np.concatenate(ranks), ks)


def _cached_batch(dataset: Dataset, split: str, max_len: int):
    cache = dataset.__dict__.setdefault("_eval_batches", {})
    key = (split, max_len)
    if key not in cache:
        cache[key] = evaluation_batch(dataset, split, max_len)
    return cache[key]


def write_metrics(path, results: dict[str, RankingMetrics]):
    lines = [METRICS_HEADER]
    for split, m in results.items():
        lines.extend(m.rows(split))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
