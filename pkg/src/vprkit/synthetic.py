"""Seeded generators for desk-scale test worlds and epipolar fixtures.

Worlds plant a known correspondence: every query is a perturbed copy of one
database image, with spherical descriptor noise (renormalized), fixed-radius
position jitter in a random direction, and optional replacement of a
fraction of features by outliers.  The same seed always reproduces the same
stores bit for bit.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import DataError
from .model import POSITION_SCALE, GroundTruth, ImageFeatureSet

# largest float32 below the position upper bound, so quantized positions stay valid
_MAX_POS32 = float(np.nextafter(np.float32(POSITION_SCALE), np.float32(0.0)))


@dataclasses.dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    db_size: int = 10
    query_size: int = 5
    features_per_image: int = 200
    d_loc: int = 1024
    descriptor_noise: float = 0.0
    position_jitter: float = 0.0
    outlier_fraction: float = 0.0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if min(self.db_size, self.query_size, self.features_per_image, self.d_loc) < 1:
            raise DataError("world counts must be positive")
        if (
            self.descriptor_noise < 0
            or self.position_jitter < 0
            or not 0.0 <= self.outlier_fraction <= 1.0
        ):
            raise DataError("perturbation parameters out of range")


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    rows = rng.standard_normal((n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _quantize_positions(pos: np.ndarray) -> np.ndarray:
    """Snap to float32 (the file grid) while keeping values inside the range."""
    return np.minimum(pos.astype(np.float32), np.float32(_MAX_POS32)).astype(np.float64)


def gen_world(
    cfg: WorldConfig,
) -> tuple[list[ImageFeatureSet], list[ImageFeatureSet], GroundTruth]:
    """Database store, query store, and the ground truth linking them."""
    rng = np.random.default_rng(cfg.seed)
    dtype = np.dtype(cfg.dtype)
    n = cfg.features_per_image
    # keep jittered positions in range without clipping the displacement model
    margin = min(cfg.position_jitter, POSITION_SCALE / 2 - 1.0)

    db_sets = []
    for i in range(cfg.db_size):
        pos = _quantize_positions(
            rng.uniform(margin, POSITION_SCALE - margin, (n, 2))
        )
        desc = _unit_rows(rng, n, cfg.d_loc).astype(dtype)
        db_sets.append(ImageFeatureSet(f"db_{i:06d}", pos, desc))

    queries = []
    gt: dict[str, set[str]] = {}
    for j in range(cfg.query_size):
        src = db_sets[j % cfg.db_size]
        positions = src.positions
        descriptors = src.descriptors
        if cfg.position_jitter > 0:
            theta = rng.uniform(0.0, 2.0 * math.pi, n)
            shift = cfg.position_jitter * np.stack(
                [np.cos(theta), np.sin(theta)], axis=1
            )
            positions = _quantize_positions(
                np.clip(positions + shift, 0.0, _MAX_POS32)
            )
        if cfg.descriptor_noise > 0:
            noisy = descriptors.astype(
                np.float64
            ) + cfg.descriptor_noise * rng.standard_normal((n, cfg.d_loc))
            noisy /= np.linalg.norm(noisy, axis=1, keepdims=True)
            descriptors = noisy.astype(dtype)
        if cfg.outlier_fraction > 0:
            k = int(round(cfg.outlier_fraction * n))
            if k:
                positions = positions.copy()
                descriptors = descriptors.copy()
                idx = rng.choice(n, size=k, replace=False)
                positions[idx] = _quantize_positions(
                    rng.uniform(0.0, POSITION_SCALE, (k, 2))
                )
                descriptors[idx] = _unit_rows(rng, k, cfg.d_loc).astype(dtype)
        query_id = f"query_{j:06d}"
        queries.append(ImageFeatureSet(query_id, positions, descriptors))
        gt[query_id] = {src.image_id}
    return db_sets, queries, GroundTruth.from_mapping(gt)


@dataclasses.dataclass
class EpipolarPairs:
    """Matched positions from two synthetic views plus the generating truth."""

    pts_db: np.ndarray
    pts_q: np.ndarray
    labels: np.ndarray
    f_true: np.ndarray


def _rotation(angles: np.ndarray) -> np.ndarray:
    ax, ay, az = angles
    rx = np.array(
        [[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]]
    )
    ry = np.array(
        [[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]]
    )
    rz = np.array(
        [[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]]
    )
    return rz @ ry @ rx


def _skew(t: np.ndarray) -> np.ndarray:
    return np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])


def gen_epipolar_pairs(
    seed: int, n_inliers: int, n_outliers: int = 0
) -> EpipolarPairs:
    """Project one random 3-D cloud through two cameras; outliers are uniform.

    Inlier correspondences satisfy the true epipolar constraint exactly (up
    to roundoff); positions of both views land in the normalized range.
    """
    if n_inliers < 8:
        raise DataError(f"need at least 8 inliers for an epipolar fixture, got {n_inliers}")
    if n_outliers < 0:
        raise DataError("outlier count cannot be negative")
    rng = np.random.default_rng(seed)
    focal = 60.0
    K = np.array([[focal, 0.0, 50.0], [0.0, focal, 50.0], [0.0, 0.0, 1.0]])
    R = _rotation(rng.uniform(-0.12, 0.12, 3))
    t = rng.uniform(-1.5, 1.5, 3)
    while np.linalg.norm(t) < 0.5:
        t = rng.uniform(-1.5, 1.5, 3)

    pts1, pts2 = [], []
    while len(pts1) < n_inliers:
        X = rng.uniform([-4.0, -4.0, 6.0], [4.0, 4.0, 14.0])
        x1 = K @ X
        x1 = x1[:2] / x1[2]
        X2 = R @ X + t
        if X2[2] < 1.0:
            continue
        x2 = K @ X2
        x2 = x2[:2] / x2[2]
        if (
            0.0 <= x1.min()
            and x1.max() < POSITION_SCALE
            and 0.0 <= x2.min()
            and x2.max() < POSITION_SCALE
        ):
            pts1.append(x1)
            pts2.append(x2)
    pts1 = np.array(pts1)
    pts2 = np.array(pts2)
    if n_outliers:
        out1 = rng.uniform(0.0, POSITION_SCALE, (n_outliers, 2))
        out2 = rng.uniform(0.0, POSITION_SCALE, (n_outliers, 2))
        pts1 = np.concatenate([pts1, out1])
        pts2 = np.concatenate([pts2, out2])
    labels = np.concatenate(
        [np.ones(n_inliers, dtype=bool), np.zeros(n_outliers, dtype=bool)]
    )
    perm = rng.permutation(len(pts1))
    k_inv = np.linalg.inv(K)
    f_true = k_inv.T @ _skew(t) @ R @ k_inv
    f_true = f_true / np.linalg.norm(f_true)
    return EpipolarPairs(pts1[perm], pts2[perm], labels[perm], f_true)
