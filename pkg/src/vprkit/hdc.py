"""Holistic descriptors by hyperdimensional binding of features and positions.

Each local descriptor is projected into the high-dimensional space with a
seeded Gaussian matrix and bound (elementwise product) to a position code;
the bound vectors are bundled (summed) and L2-normalized into one holistic
descriptor per image.  Position codes interpolate bilinearly between the
products of +/-1 anchor hypervectors laid out on a uniform grid, so nearby
features receive similar codes while distant ones stay near-orthogonal.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from .errors import DataError
from .model import POSITION_SCALE, ImageFeatureSet

DEFAULT_DIM = 4096
DEFAULT_NX = 5
DEFAULT_NY = 9


@dataclasses.dataclass
class HDCCodebook:
    """Seeded projection plus positional anchor hypervectors.

    Regenerating with the same seed and dimensions is bit-identical;
    anchors hold only +1/-1 entries, so each has norm sqrt(dim).
    """

    seed: int
    dim: int
    n_x: int
    n_y: int
    d_loc: int
    projection: np.ndarray
    x_anchors: np.ndarray
    y_anchors: np.ndarray
    _projection_f32: np.ndarray | None = dataclasses.field(
        default=None, repr=False, compare=False
    )
    _node_products: np.ndarray | None = dataclasses.field(
        default=None, repr=False, compare=False
    )
    _node_products_f32: np.ndarray | None = dataclasses.field(
        default=None, repr=False, compare=False
    )

    def projection_for(self, dtype: np.dtype) -> np.ndarray:
        if dtype == np.float32:
            if self._projection_f32 is None:
                self._projection_f32 = self.projection.astype(np.float32)
            return self._projection_f32
        return self.projection

    def node_products(self, dtype: np.dtype) -> np.ndarray:
        """Anchor products per grid node, laid out as node = ix * n_y + iy."""
        if self._node_products is None:
            self._node_products = (
                self.x_anchors[:, None, :] * self.y_anchors[None, :, :]
            ).reshape(self.n_x * self.n_y, self.dim)
        if dtype == np.float32:
            if self._node_products_f32 is None:
                self._node_products_f32 = self._node_products.astype(np.float32)
            return self._node_products_f32
        return self._node_products


def hdc_init(
    seed: int,
    d_loc: int,
    dim: int = DEFAULT_DIM,
    n_x: int = DEFAULT_NX,
    n_y: int = DEFAULT_NY,
) -> HDCCodebook:
    """Deterministic codebook: Gaussian projection, then x and y anchors."""
    if min(dim, n_x, n_y, d_loc) < 1 or n_x < 2 or n_y < 2:
        raise DataError("codebook dimensions must be positive (grids at least 2)")
    rng = np.random.default_rng(seed)
    projection = rng.standard_normal((dim, d_loc))
    x_anchors = rng.integers(0, 2, size=(n_x, dim)).astype(np.float64) * 2.0 - 1.0
    y_anchors = rng.integers(0, 2, size=(n_y, dim)).astype(np.float64) * 2.0 - 1.0
    return HDCCodebook(seed, dim, n_x, n_y, d_loc, projection, x_anchors, y_anchors)


def _interp_anchor(coord: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Linear interpolation between the two grid anchors flanking each coord."""
    n = len(anchors)
    step = POSITION_SCALE / (n - 1)
    t = coord / step
    idx = np.minimum(t.astype(np.int64), n - 2)
    frac = (t - idx)[:, None]
    return anchors[idx] * (1.0 - frac) + anchors[idx + 1] * frac


def encode_positions(cb: HDCCodebook, positions: np.ndarray) -> np.ndarray:
    """Position codes, one row per (x, y); bilinear between anchor products."""
    pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    if pos.size and (pos.min() < 0.0 or pos.max() >= POSITION_SCALE):
        raise DataError(f"positions must lie in [0, {POSITION_SCALE:g})")
    cx = _interp_anchor(pos[:, 0], cb.x_anchors)
    cy = _interp_anchor(pos[:, 1], cb.y_anchors)
    return cx * cy


def encode_position(cb: HDCCodebook, pos: tuple[float, float]) -> np.ndarray:
    return encode_positions(cb, np.asarray(pos, dtype=np.float64).reshape(1, 2))[0]


def hdc_aggregate(cb: HDCCodebook, feats: ImageFeatureSet) -> np.ndarray:
    """Bundle all features of one image into a unit-norm holistic descriptor.

    Equivalent to summing bind(projected descriptor, position code) over all
    features, but the bilinear position weights are accumulated per anchor
    grid node first, which turns the position binding into one small matrix
    product instead of materializing a code per feature.  Empty feature sets
    aggregate to the zero vector, the degenerate marker for blank images.
    """
    if len(feats) == 0:
        return np.zeros(cb.dim)
    if feats.d_loc != cb.d_loc:
        raise DataError(f"codebook expects d_loc={cb.d_loc}, got {feats.d_loc}")
    desc = feats.descriptors
    proj = cb.projection_for(desc.dtype)
    bound = proj @ desc.T

    pos = np.asarray(feats.positions, dtype=np.float64)
    if pos.min() < 0.0 or pos.max() >= POSITION_SCALE:
        raise DataError(f"positions must lie in [0, {POSITION_SCALE:g})")
    tx = pos[:, 0] / (POSITION_SCALE / (cb.n_x - 1))
    ty = pos[:, 1] / (POSITION_SCALE / (cb.n_y - 1))
    ix = np.minimum(tx.astype(np.int64), cb.n_x - 2)
    iy = np.minimum(ty.astype(np.int64), cb.n_y - 2)
    fx, fy = tx - ix, ty - iy

    n = len(feats)
    node = ix * cb.n_y + iy
    weights = np.zeros((n, cb.n_x * cb.n_y))
    rows = np.arange(n)
    weights[rows, node] = (1.0 - fx) * (1.0 - fy)
    weights[rows, node + cb.n_y] = fx * (1.0 - fy)
    weights[rows, node + 1] = (1.0 - fx) * fy
    weights[rows, node + cb.n_y + 1] = fx * fy

    per_node = bound @ weights.astype(bound.dtype)
    h = (per_node * cb.node_products(bound.dtype).T).sum(axis=1, dtype=np.float64)
    norm = np.linalg.norm(h)
    return h / norm if norm > 0 else h


def aggregate_store(
    cb: HDCCodebook, sets: Sequence[ImageFeatureSet]
) -> list[ImageFeatureSet]:
    """New feature sets with the holistic slot filled (inputs untouched)."""
    return [s.with_holistic(hdc_aggregate(cb, s)) for s in sets]


def holistic_rank(
    query_h: np.ndarray, db_holistics: np.ndarray, db_ids: Sequence[str]
) -> list[tuple[str, float]]:
    """All database ids ordered by cosine to the query, ties by lowest id."""
    db = np.asarray(db_holistics, dtype=np.float64)
    if db.ndim != 2 or len(db) == 0:
        raise DataError("empty database")
    q = np.asarray(query_h, dtype=np.float64)
    qn = np.linalg.norm(q)
    norms = np.linalg.norm(db, axis=1)
    safe = np.where(norms > 0, norms, 1.0) * (qn if qn > 0 else 1.0)
    sims = (db @ q) / safe
    order = sorted(range(len(db)), key=lambda i: (-sims[i], db_ids[i]))
    return [(db_ids[i], float(sims[i])) for i in order]


def holistic_topk(
    query_h: np.ndarray,
    db_holistics: np.ndarray,
    db_ids: Sequence[str],
    k: int,
) -> list[str]:
    """Ids of the K database images most similar to the query descriptor."""
    if k < 1:
        raise DataError(f"k must be at least 1, got {k}")
    return [db_id for db_id, _ in holistic_rank(query_h, db_holistics, db_ids)[:k]]
