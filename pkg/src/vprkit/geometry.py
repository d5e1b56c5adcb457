"""RANSAC fundamental-matrix verification of mutual-match positions.

Candidates come from normalized 8-point solves on random minimal samples;
support is measured with the first-order (Sampson) epipolar distance in
normalized position units.  The whole candidate batch is vectorized, with
an adaptive confidence-based early exit between chunks, so the loop stays
deterministic for a fixed seed.  Underdetermined geometry (too few matches,
zero parallax, rank-deficient samples throughout) falls back to treating
every match as an inlier, which makes the score degrade to plain mutual
matching.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import DataError
from .matching import match_features
from .model import ImageFeatureSet

_FIRST_CHUNK = 256  # small first batch lets clean geometry exit early
_MAX_CHUNK = 8192
_SOLVE_LIMIT = 1e12  # reject fast-path solutions that exploded


@dataclasses.dataclass(frozen=True)
class RansacParams:
    max_iterations: int = 2000
    inlier_threshold: float = 2.0
    confidence: float = 0.99
    min_matches: int = 8

    def __post_init__(self) -> None:
        if self.inlier_threshold <= 0:
            raise DataError("inlier threshold must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise DataError("confidence must lie strictly between 0 and 1")


@dataclasses.dataclass
class FundamentalEstimate:
    """Estimated 3x3 fundamental matrix (rank 2, unit Frobenius norm).

    `F` is None when the geometry was underdetermined; the mask then marks
    every match as an inlier (`degenerate` set).
    """

    F: np.ndarray | None
    inlier_mask: np.ndarray
    degenerate: bool


def _homogeneous(pts: np.ndarray) -> np.ndarray:
    return np.concatenate([pts, np.ones((len(pts), 1))], axis=1)


def _hartley_transform(pts: np.ndarray) -> np.ndarray | None:
    """Translate centroid to the origin, scale mean distance to sqrt(2)."""
    centroid = pts.mean(axis=0)
    dist = np.linalg.norm(pts - centroid, axis=1).mean()
    if dist < 1e-12:
        return None
    s = math.sqrt(2.0) / dist
    return np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )


def _constraint_rows(h1: np.ndarray, h2: np.ndarray) -> np.ndarray:
    """Rows of the epipolar system: row . vec(F) = x2^T F x1, F row-major."""
    return (h2[:, :, None] * h1[:, None, :]).reshape(len(h1), 9)


def _solve_null_vectors(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Null vectors for a batch of 8x9 systems; returns (f, rejected).

    The fast path pins f9 = 1 and solves the remaining 8x8 system; if LAPACK
    reports an exactly singular member, the whole batch falls back to the
    eigenvector route, where samples with a multi-dimensional null space
    (rank-deficient: collinear or repeated points) are rejected.
    """
    try:
        x8 = np.linalg.solve(A[:, :, :8], -A[:, :, 8:])[..., 0]
        f = np.concatenate([x8, np.ones((len(A), 1), dtype=A.dtype)], axis=1)
        rejected = ~np.isfinite(x8).all(axis=1) | (
            np.abs(x8).max(axis=1) > _SOLVE_LIMIT
        )
        return f, rejected
    except np.linalg.LinAlgError:
        ata = A.transpose(0, 2, 1) @ A
        eigvals, eigvecs = np.linalg.eigh(ata)
        f = eigvecs[:, :, 0]
        scale = np.maximum(eigvals[:, -1], 1.0)
        rejected = eigvals[:, 1] <= scale * 1e-10
        return f, rejected


def _candidate_models(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rank-2 candidate matrices (normalized space) for a batch of samples.

    Rank-2 is enforced per candidate before support counting; otherwise a
    contaminated sample can look strong through its rank-3 solution and
    collapse once the constraint is applied at the end.  The truncation uses
    F(I - v3 v3^T) with v3 the smallest eigenvector of F^T F, which equals
    zeroing the smallest singular value but needs only a batched 3x3 eigh.
    """
    f, rejected = _solve_null_vectors(A)
    Fh = f.reshape(-1, 3, 3)
    _, eigvecs = np.linalg.eigh(Fh.transpose(0, 2, 1) @ Fh)
    v3 = eigvecs[:, :, 0]
    Fh2 = Fh - (Fh @ v3[:, :, None]) @ v3[:, None, :]
    return Fh2, rejected


def _sample_indices(rng: np.random.Generator, count: int, n: int) -> np.ndarray:
    """`count` uniform samples of 8 distinct indices from range(n)."""
    picks = np.empty((count, 8), dtype=np.intp)
    taken = np.zeros((count, n), dtype=bool)
    rows = np.arange(count)
    for col, j in enumerate(range(n - 8, n)):
        t = rng.integers(0, j + 1, size=count)
        chosen = np.where(taken[rows, t], j, t)
        taken[rows, chosen] = True
        picks[:, col] = chosen
    return picks


def _sampson_sq_batch(
    F: np.ndarray, h1: np.ndarray, h2: np.ndarray, rows: np.ndarray
) -> np.ndarray:
    """Squared epipolar error per match per candidate; nan/inf where undefined."""
    b, n = len(F), len(h1)
    err = F.reshape(b, 9) @ rows.T
    np.square(err, out=err)
    Fx = (F.reshape(b * 3, 3) @ h1.T).reshape(b, 3, n)
    Ftx = (F.transpose(0, 2, 1).reshape(b * 3, 3) @ h2.T).reshape(b, 3, n)
    den = np.square(Fx[:, 0])
    den += np.square(Fx[:, 1])
    den += np.square(Ftx[:, 0])
    den += np.square(Ftx[:, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        err /= den
    return err


def sampson_distance(F: np.ndarray, pts1: np.ndarray, pts2: np.ndarray) -> np.ndarray:
    """Sampson distances of correspondences pts1 -> pts2 under F (units)."""
    h1 = _homogeneous(np.asarray(pts1, dtype=np.float64))
    h2 = _homogeneous(np.asarray(pts2, dtype=np.float64))
    rows = _constraint_rows(h1, h2)
    d2 = _sampson_sq_batch(np.asarray(F, dtype=np.float64)[None], h1, h2, rows)[0]
    return np.sqrt(np.where(np.isfinite(d2), d2, np.inf))


def _enforce_rank2(F: np.ndarray) -> np.ndarray:
    """Zero the smallest singular value and normalize to unit Frobenius norm."""
    u, s, vt = np.linalg.svd(F)
    s[2] = 0.0
    F2 = (u * s) @ vt
    return F2 / np.linalg.norm(F2)


def _iterations_needed(inlier_ratio: float, confidence: float) -> float:
    if inlier_ratio >= 1.0:
        return 0.0
    p_good = inlier_ratio**8
    if p_good < 1e-12:
        return math.inf
    return math.log(1.0 - confidence) / math.log(1.0 - p_good)


def ransac_fundamental(
    pts_db: np.ndarray,
    pts_q: np.ndarray,
    params: RansacParams | None = None,
    seed: int = 0,
) -> FundamentalEstimate:
    """Estimate F from matched positions; deterministic for a fixed seed."""
    params = params or RansacParams()
    p1 = np.asarray(pts_db, dtype=np.float64).reshape(-1, 2)
    p2 = np.asarray(pts_q, dtype=np.float64).reshape(-1, 2)
    if len(p1) != len(p2):
        raise DataError(f"match arrays disagree: {len(p1)} vs {len(p2)}")
    n = len(p1)
    all_inliers = np.ones(n, dtype=bool)
    if n < params.min_matches:
        return FundamentalEstimate(None, all_inliers, True)
    if np.abs(p1 - p2).max() < 1e-9:
        # zero parallax: any skew-symmetric F fits, the geometry says nothing
        return FundamentalEstimate(None, all_inliers, True)
    T1 = _hartley_transform(p1)
    T2 = _hartley_transform(p2)
    if T1 is None or T2 is None:
        return FundamentalEstimate(None, all_inliers, True)

    h1 = _homogeneous(p1)
    h2 = _homogeneous(p2)
    rows = _constraint_rows(h1, h2)
    h1n = h1 @ T1.T
    h2n = h2 @ T2.T

    # the candidate loop runs in float32 (support counting tolerates it and
    # it roughly halves the linear-algebra cost); the returned estimate is
    # recomputed in float64 below
    h1n32 = h1n.astype(np.float32)
    h2n32 = h2n.astype(np.float32)
    t1_32 = T1.astype(np.float32)
    t2t_32 = T2.T.astype(np.float32)

    # block-diagonal right-hand side: one GEMM per chunk yields the epipolar
    # residual and the four Sampson gradient components for every candidate
    R = np.zeros((21, 5 * n), dtype=np.float32)
    R[0:9, 0:n] = rows.T
    R[9:12, n : 2 * n] = h1.T
    R[12:15, 2 * n : 3 * n] = h1.T
    R[15:18, 3 * n : 4 * n] = h2.T
    R[18:21, 4 * n : 5 * n] = h2.T

    rng = np.random.default_rng(seed)
    tau = params.inlier_threshold
    tau_sq = np.float32(tau * tau)
    best_count = 0
    best_F = None
    done = 0
    while done < params.max_iterations:
        b = min(params.max_iterations - done, _FIRST_CHUNK if done == 0 else _MAX_CHUNK)
        picks = _sample_indices(rng, b, n)
        A = _constraint_rows(
            h1n32[picks].reshape(-1, 3), h2n32[picks].reshape(-1, 3)
        ).reshape(b, 8, 9)
        f_hat, rejected = _candidate_models(A)
        F_cand = t2t_32 @ f_hat @ t1_32
        f9 = F_cand.reshape(b, 9)
        fe = np.empty((b, 21), dtype=np.float32)
        fe[:, 0:9] = f9
        fe[:, 9:12] = f9[:, 0:3]  # row 0 of F -> (Fx)_1
        fe[:, 12:15] = f9[:, 3:6]  # row 1 of F -> (Fx)_2
        fe[:, 15:18] = f9[:, 0::3]  # col 0 of F -> (F^T x')_1
        fe[:, 18:21] = f9[:, 1::3]  # col 1 of F -> (F^T x')_2
        parts = fe @ R
        err = parts[:, 0:n]
        np.square(err, out=err)
        den = np.square(parts[:, n : 2 * n])
        den += np.square(parts[:, 2 * n : 3 * n])
        den += np.square(parts[:, 3 * n : 4 * n])
        den += np.square(parts[:, 4 * n : 5 * n])
        with np.errstate(divide="ignore", invalid="ignore"):
            err /= den
        counts = (err <= tau_sq).sum(axis=1)
        counts[rejected] = -1
        top = int(counts.argmax())
        if counts[top] > best_count or best_F is None and counts[top] >= 0:
            best_count = max(int(counts[top]), 0)
            best_F = F_cand[top]
        done += b
        if best_count and done >= _iterations_needed(
            best_count / n, params.confidence
        ):
            break
    if best_F is None:
        return FundamentalEstimate(None, all_inliers, True)

    F_final = _enforce_rank2(best_F.astype(np.float64))
    mask = sampson_distance(F_final, p1, p2) <= tau
    if mask.sum() >= params.min_matches:
        # consensus refit: least-squares null vector over all current inliers
        t_rows = _constraint_rows(h1n, h2n)
        ata = t_rows[mask].T @ t_rows[mask]
        eigvals, eigvecs = np.linalg.eigh(ata)
        if eigvals[1] > max(eigvals[-1], 1.0) * 1e-12:
            F_refit = _enforce_rank2(T2.transpose() @ eigvecs[:, 0].reshape(3, 3) @ T1)
            refit_mask = sampson_distance(F_refit, p1, p2) <= tau
            if refit_mask.sum() >= mask.sum():
                F_final, mask = F_refit, refit_mask
    return FundamentalEstimate(F_final, mask, False)


def score_ransac(
    db: ImageFeatureSet,
    q: ImageFeatureSet,
    params: RansacParams | None = None,
    seed: int = 0,
) -> float:
    """Image similarity counting only epipolar-consistent mutual matches.

    Pairs whose geometry cannot be estimated keep all mutual matches, so the
    score never silently drops below its mutual-matching fallback for
    degenerate inputs.  Empty sets score 0.
    """
    params = params or RansacParams()
    if len(db) == 0 or len(q) == 0:
        return 0.0
    matches = match_features(db, q)
    if len(matches) == 0:
        return 0.0
    denom = math.sqrt(len(db) * len(q))
    estimate = ransac_fundamental(
        db.positions[matches.db_indices],
        q.positions[matches.q_indices],
        params,
        seed,
    )
    return float(matches.cosines[estimate.inlier_mask].sum()) / denom
