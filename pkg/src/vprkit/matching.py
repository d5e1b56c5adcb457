"""Descriptor similarity, mutual matching, and the MM image score.

The image similarity between a database image and a query image is

    S = (1 / sqrt(|D_db| * |D_q|)) * sum_ij w_ij * cos(D_db_i, D_q_j)

where mutual matching sets w_ij = 1 exactly when i and j are each other's
nearest neighbor by cosine similarity.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Iterator

import numpy as np

from .errors import DataError
from .model import ImageFeatureSet


@dataclasses.dataclass
class MatchSet:
    """Mutual matches as parallel index arrays plus their cosine values.

    Each database index and each query index appears at most once, so the
    match set is a partial bijection.
    """

    db_indices: np.ndarray
    q_indices: np.ndarray
    cosines: np.ndarray

    def __len__(self) -> int:
        return len(self.db_indices)

    def pairs(self) -> Iterator[tuple[int, int, float]]:
        for i, j, c in zip(self.db_indices, self.q_indices, self.cosines):
            yield int(i), int(j), float(c)

    @classmethod
    def empty(cls) -> "MatchSet":
        return cls(
            np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp), np.zeros(0)
        )


def normalized_rows(descriptors: np.ndarray) -> np.ndarray:
    """Rows scaled to unit length, in float64; rejects zero-norm rows."""
    A = np.asarray(descriptors, dtype=np.float64)
    norms = np.linalg.norm(A, axis=1)
    if A.shape[0] and norms.min() == 0.0:
        raise DataError("zero-norm descriptor has no cosine similarity")
    return A / norms[:, None]


def cosine_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity, |A| x |B|.  Computed in float64."""
    A = np.asarray(A)
    B = np.asarray(B)
    if A.shape[1] != B.shape[1]:
        raise DataError(f"descriptor lengths differ: {A.shape[1]} vs {B.shape[1]}")
    return normalized_rows(A) @ normalized_rows(B).T


def mutual_matches(M: np.ndarray) -> MatchSet:
    """Pairs (i, j) where j = argmax of row i and i = argmax of column j.

    Argmax ties break toward the lowest index, making the result
    deterministic across platforms.
    """
    M = np.asarray(M)
    if M.size == 0:
        return MatchSet.empty()
    best_col = M.argmax(axis=1)
    best_row = M.argmax(axis=0)
    rows = np.arange(M.shape[0])
    keep = best_row[best_col] == rows
    db_idx = rows[keep]
    q_idx = best_col[keep]
    return MatchSet(db_idx, q_idx, M[db_idx, q_idx].astype(np.float64))


def match_features(db: ImageFeatureSet, q: ImageFeatureSet) -> MatchSet:
    """Mutual matching between the descriptor sets of two images."""
    if len(db) == 0 or len(q) == 0:
        return MatchSet.empty()
    return mutual_matches(cosine_matrix(db.descriptors, q.descriptors))


def score_mm(db: ImageFeatureSet, q: ImageFeatureSet) -> float:
    """Image similarity with mutual-match weights.  Empty sets score 0."""
    if len(db) == 0 or len(q) == 0:
        return 0.0
    matches = match_features(db, q)
    return float(matches.cosines.sum()) / math.sqrt(len(db) * len(q))
