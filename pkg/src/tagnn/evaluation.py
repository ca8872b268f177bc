"""Top-k ranking and the hit-rate / reciprocal-rank metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import TrainExample, make_batches


@dataclass(frozen=True)
class Metrics:
    """Percentages in [0, 100], as reported in results tables."""

    precision_at_k: float
    mrr_at_k: float
    k: int
    examples: int

    def as_block(self) -> str:
        return (f"precision_at_{self.k}={self.precision_at_k:.2f}\n"
                f"mrr_at_{self.k}={self.mrr_at_k:.2f}\n"
                f"examples={self.examples}\n")

    def as_table(self) -> str:
        head = f"{'metric':<14}{'value':>10}"
        return "\n".join([
            head,
            "-" * len(head),
            f"{f'P@{self.k}':<14}{self.precision_at_k:>10.2f}",
            f"{f'MRR@{self.k}':<14}{self.mrr_at_k:>10.2f}",
            f"{'examples':<14}{self.examples:>10d}",
        ]) + "\n"


def _check_scores(scores: np.ndarray):
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite values")


def rank_topk(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` best scores; ties go to the lower index."""
    scores = np.asarray(scores)
    _check_scores(scores)
    if not 0 <= k <= scores.shape[-1]:
        raise ValueError(f"k={k} outside [0, {scores.shape[-1]}]")
    return np.argsort(-scores, kind="stable", axis=-1)[..., :k]


def label_rank(scores, labels) -> np.ndarray:
    """1-based rank of each label under the same ordering as :func:`rank_topk`."""
    scores = np.atleast_2d(np.asarray(scores))
    _check_scores(scores)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    target = scores[np.arange(len(labels)), labels][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    ahead = (scores > target) | ((scores == target) & (cols < labels[:, None]))
    return ahead.sum(axis=1) + 1


def metrics_for(ranked: Sequence[int], label: int, k: int) -> tuple[int, float]:
    top = list(ranked[:k])
    if label in top:
        return 1, 1.0 / (top.index(label) + 1)
    return 0, 0.0


def aggregate(ranks: np.ndarray, k: int) -> Metrics:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no test examples to evaluate")
    hit = ranks <= k
    rr = np.where(hit, 1.0 / ranks, 0.0)
    return Metrics(100.0 * float(hit.mean()), 100.0 * float(rr.mean()), k, int(ranks.size))


def rank_labels(model, examples: Sequence[TrainExample], batch_size: int = 100) -> np.ndarray:
    """Rank of every example's label under ``model``'s scores, in input order."""
    if not examples:
        raise ValueError("no test examples to evaluate")
    ranks = []
    for batch in make_batches(examples, batch_size, pad_index=model.pad_index, shuffle=False):
        ranks.append(label_rank(model.logits(batch.graphs).data, batch.labels))
    return np.concatenate(ranks)


def evaluate(model, examples: Sequence[TrainExample], k: int = 20, batch_size: int = 100) -> Metrics:
    """P@k and MRR@k of ``model`` on ``examples``; candidates are all real items."""
    with ad.Tape():  # scratch tape, discarded
        ranks = rank_labels(model, examples, batch_size)
    return aggregate(ranks, k)
