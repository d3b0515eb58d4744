"""Token- and sentence-level loss weights derived from model confidence.

Positions use 1-based target index ``i`` of ``I`` and source prefix
length ``j`` of ``J``. Every function accepts scalars or numpy arrays.
"""
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class WeightConfig:
    lam: float = 1.0  # diagonal regularisation exponent
    gamma: float = 0.25  # confidence scaling exponent
    eps: float = 1e-6  # floor for the batch standard deviation
    use_sentence_weight: bool = True
    use_diagonal: bool = True

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")


def diagonal_distance(i, big_i, j, big_j):
    return np.abs(np.divide(i, big_i) - np.divide(j, big_j))


def diagonal_regularizer(d, lam):
    return 1.0 - np.power(d, lam)


def token_weight(p, diag, gamma):
    return np.power(p, gamma) * diag


def reorder_cost(i, big_i, j, big_j):
    return np.maximum(0.0, np.divide(i, big_i) - np.divide(j, big_j))


def cell_grid(rows, big_i, big_j):
    """Broadcast (j, i) grids for the sampled prefix rows and all target positions."""
    j = np.asarray(rows, dtype=np.float64)[:, None]
    i = np.arange(1, big_i + 1, dtype=np.float64)[None, :]
    return i, j


def sentence_reorder_score(probs, rows, big_i, big_j):
    """Sum of probability times reordering cost over the available cells."""
    i, j = cell_grid(rows, big_i, big_j)
    return float((np.asarray(probs, dtype=np.float64) * reorder_cost(i, big_i, j, big_j)).sum())


def batch_statistics(batch_scores):
    scores = np.asarray(batch_scores, dtype=np.float64)
    return float(scores.mean()), float(scores.std())


def sentence_weight(score, batch_scores, eps=1e-6):
    """``max(0, 1 - (C - mean) / std)`` with the std floored at ``eps``; single sentence -> 1."""
    if len(batch_scores) <= 1:
        return 1.0
    mu, sigma = batch_statistics(batch_scores)
    return max(0.0, 1.0 - (score - mu) / max(sigma, eps))
