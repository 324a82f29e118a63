"""Exploration: score views, keep the confident ones, vote, pick candidates.

All tie-breaks are deterministic: entropy ties go to the lower view index,
argmax ties to the lower class index, vote ties to the higher mean retained
posterior and then the lower class index. The same routine runs both the
candidate search (top-K over the full label space) and the final prediction
(top-1 over the candidate set with the calibrated context).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import as_float64, entropy_rows, softmax

AGGREGATION_VOTING = "voting"
AGGREGATION_MEAN = "mean"


@dataclass
class ExploreConfig:
    rho: float = 0.3
    top_k: int = 10
    aggregation: str = AGGREGATION_VOTING

    def __post_init__(self):
        if not (0.0 < self.rho <= 1.0):
            raise ValueError("retained fraction rho must be in (0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.aggregation not in (AGGREGATION_VOTING, AGGREGATION_MEAN):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")


@dataclass
class CandidateSet:
    """Ordered class hypotheses with their vote fractions."""

    class_ids: list[int]
    vote_fractions: np.ndarray
    retained_views: np.ndarray        # indices into the view axis
    mean_posteriors: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.class_ids)

    @property
    def winner(self) -> int:
        return self.class_ids[0]


def restricted_posterior(scores_row: np.ndarray,
                         candidates: np.ndarray | list[int]) -> np.ndarray:
    """Softmax over the candidate columns of one score row."""
    candidates = np.asarray(candidates, dtype=int)
    if candidates.size == 0:
        raise ValueError("candidate set must be non-empty")
    return softmax(as_float64(scores_row)[candidates])


def retention_count(n_views: int, rho: float) -> int:
    return max(1, int(np.floor(rho * n_views)))


def filter_low_entropy(scores: np.ndarray, rho: float) -> np.ndarray:
    """Indices of the max(1, floor(rho*N)) lowest-entropy views.

    scores is already restricted to the candidate columns; entropy ties are
    broken by the lower view index (stable sort).
    """
    scores = np.atleast_2d(as_float64(scores))
    ent = entropy_rows(softmax(scores))
    keep = retention_count(scores.shape[0], rho)
    order = np.argsort(ent, kind="stable")
    return np.sort(order[:keep])


def vote(scores: np.ndarray, retained: np.ndarray,
         aggregation: str = AGGREGATION_VOTING) -> np.ndarray:
    """Per-class support from the retained views.

    voting: each retained view casts one vote for its restricted argmax
    (ties to the lower class index); returns vote fractions.
    mean: returns the mean restricted posterior over retained views.
    """
    scores = np.atleast_2d(as_float64(scores))
    retained = np.asarray(retained, dtype=int)
    posts = softmax(scores[retained])
    if aggregation == AGGREGATION_MEAN:
        return posts.mean(axis=0)
    if aggregation != AGGREGATION_VOTING:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    counts = np.zeros(scores.shape[1])
    winners = np.argmax(posts, axis=1)     # np.argmax takes the lowest index on ties
    for w in winners:
        counts[w] += 1.0
    return counts / retained.size


def explore_topk(scores: np.ndarray, class_ids: list[int] | np.ndarray,
                 cfg: ExploreConfig) -> CandidateSet:
    """Full exploration pass over an (N, |C|) score matrix.

    Returns the top-min(K, |C|) classes ordered by vote fraction, ties by
    higher mean retained posterior, then lower class id.
    """
    scores = np.atleast_2d(as_float64(scores))
    class_ids = np.asarray(class_ids, dtype=int)
    if class_ids.size == 0:
        raise ValueError("class set must be non-empty")
    if scores.shape[1] != class_ids.size:
        raise ValueError("score columns must match the class list")

    retained = filter_low_entropy(scores, cfg.rho)
    fractions = vote(scores, retained, cfg.aggregation)
    mean_post = softmax(scores[retained]).mean(axis=0)

    # lexsort uses the last key as primary; negate for descending order
    order = np.lexsort((np.arange(class_ids.size), -mean_post, -fractions))
    k = min(cfg.top_k, class_ids.size)
    top = order[:k]
    return CandidateSet(
        class_ids=[int(class_ids[i]) for i in top],
        vote_fractions=fractions[top],
        retained_views=retained,
        mean_posteriors=mean_post[top],
    )
