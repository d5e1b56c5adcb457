"""Local positional graphs: spatial-context re-ranking of mutual matches.

Every database feature becomes the root of a star graph whose leaves are
the other features inside an h x h window around it (built offline).  For a
matched root pair, corresponding query leaves are found through the mutual
matches; leaves without a match are dropped.  With both graphs overlaid at
their roots, each of the K matched leaves contributes a displacement

    delta_k = (p_k_db - p_root_db) - (p_k_q - p_root_q)

scored by the unnormalized Gaussian exp(-|delta_k|^2 / (2 sigma^2)), and the
match weight w_ij is the mean score over the K leaves.  Root-relative
coordinates make the weights invariant to global translation of the query.
"""

from __future__ import annotations

import dataclasses
import io
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _binio
from .errors import DataError, InvalidStoreData
from .matching import MatchSet, cosine_matrix, match_features
from .model import ImageFeatureSet

GRAPH_MAGIC = b"VPRG"
GRAPH_VERSION = 1

DEFAULT_SIGMA = 1.0
DEFAULT_WINDOW = 60.0
LUT_SIZE = 4096


@dataclasses.dataclass(frozen=True)
class StarGraph:
    root: int
    leaves: np.ndarray


@dataclasses.dataclass
class StarGraphSet:
    """One star graph per feature of one database image.

    Leaf lists are stored flat (CSR style): the leaves of root i are
    `leaves[offsets[i]:offsets[i+1]]`.
    """

    h: float
    offsets: np.ndarray
    leaves: np.ndarray

    def __len__(self) -> int:
        return len(self.offsets) - 1

    def graph(self, i: int) -> StarGraph:
        return StarGraph(i, self.leaves[self.offsets[i] : self.offsets[i + 1]])

    def leaf_count(self, i: int) -> int:
        return int(self.offsets[i + 1] - self.offsets[i])


def build_star_graphs(feats: ImageFeatureSet, h: float = DEFAULT_WINDOW) -> StarGraphSet:
    """Star graph per feature: leaves are all others within the h x h window."""
    if h <= 0:
        raise DataError(f"window size must be positive, got {h}")
    pos = feats.positions
    n = len(feats)
    if n == 0:
        return StarGraphSet(h, np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int32))
    half = h / 2.0
    dx = np.abs(pos[:, 0][:, None] - pos[:, 0][None, :]) <= half
    dy = np.abs(pos[:, 1][:, None] - pos[:, 1][None, :]) <= half
    adj = dx & dy
    np.fill_diagonal(adj, False)
    counts = adj.sum(axis=1)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    leaves = np.nonzero(adj)[1].astype(np.int32)
    return StarGraphSet(h, offsets, leaves)


@dataclasses.dataclass(frozen=True)
class GaussianLUT:
    """Sampled exp(-r2 / (2 sigma^2)) over quantized squared displacements.

    Entries sample r2 uniformly on [0, domain_max]; lookups interpolate
    linearly between the two surrounding samples, which keeps the absolute
    error well under 1e-3 for 4096 entries.  Values past domain_max map to 0
    (the true tail there is below 2e-11).
    """

    sigma: float
    domain_max: float
    entries: np.ndarray

    @classmethod
    def build(cls, sigma: float, size: int = LUT_SIZE) -> "GaussianLUT":
        if sigma <= 0:
            raise DataError(f"sigma must be positive, got {sigma}")
        domain_max = 50.0 * sigma * sigma
        r2 = np.linspace(0.0, domain_max, size)
        return cls(sigma, domain_max, np.exp(-r2 / (2.0 * sigma * sigma)))

    def lookup(self, delta_sq: np.ndarray) -> np.ndarray:
        r2 = np.asarray(delta_sq, dtype=np.float64)
        step = self.domain_max / (len(self.entries) - 1)
        t = np.clip(r2, 0.0, self.domain_max) / step
        idx = np.minimum(t.astype(np.int64), len(self.entries) - 2)
        frac = t - idx
        out = self.entries[idx] * (1.0 - frac) + self.entries[idx + 1] * frac
        return np.where(r2 > self.domain_max, 0.0, out)


def gaussian_weight(
    delta_sq, sigma: float, lut: GaussianLUT | None = None
):
    """Displacement score in [0, 1]; exact by default, table-based with `lut`."""
    if sigma <= 0:
        raise DataError(f"sigma must be positive, got {sigma}")
    if lut is not None:
        if not math.isclose(lut.sigma, sigma):
            raise DataError(f"LUT built for sigma={lut.sigma}, not {sigma}")
        return lut.lookup(delta_sq)
    return np.exp(-np.asarray(delta_sq, dtype=np.float64) / (2.0 * sigma * sigma))


def _match_weights(
    graphs: StarGraphSet,
    db_pos: np.ndarray,
    q_pos: np.ndarray,
    matches: MatchSet,
    sigma: float,
    lut: GaussianLUT | None = None,
) -> np.ndarray:
    """Weight per match pair, aligned with the order inside `matches`."""
    m = len(matches)
    if m == 0:
        return np.zeros(0)
    db_to_q = np.full(len(graphs), -1, dtype=np.int64)
    db_to_q[matches.db_indices] = matches.q_indices

    roots_db = np.asarray(matches.db_indices, dtype=np.int64)
    roots_q = np.asarray(matches.q_indices, dtype=np.int64)
    starts = graphs.offsets[roots_db]
    counts = graphs.offsets[roots_db + 1] - starts
    total = int(counts.sum())
    if total == 0:
        return np.ones(m)  # every matched root is isolated

    slot = np.repeat(np.arange(m), counts)
    within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    leaf_db = graphs.leaves[np.repeat(starts, counts) + within]
    leaf_q = db_to_q[leaf_db]
    valid = leaf_q >= 0

    gsum = np.zeros(m)
    kcount = np.bincount(slot[valid], minlength=m).astype(np.float64)
    if valid.any():
        sv = slot[valid]
        delta = (db_pos[leaf_db[valid]] - db_pos[roots_db[sv]]) - (
            q_pos[leaf_q[valid]] - q_pos[roots_q[sv]]
        )
        dsq = delta[:, 0] ** 2 + delta[:, 1] ** 2
        g = lut.lookup(dsq) if lut is not None else np.exp(-dsq / (2.0 * sigma * sigma))
        gsum = np.bincount(sv, weights=g, minlength=m)

    # roots with no leaves degrade to plain mutual matching (weight 1);
    # roots whose leaves all went unmatched carry no supporting evidence (0)
    weights = np.divide(gsum, kcount, out=np.zeros(m), where=kcount > 0)
    weights[counts == 0] = 1.0
    return weights


def lpg_weights(
    db_graphs: StarGraphSet,
    db: ImageFeatureSet,
    q: ImageFeatureSet,
    matches: MatchSet,
    sigma: float = DEFAULT_SIGMA,
    lut: GaussianLUT | None = None,
) -> dict[tuple[int, int], float]:
    """Weight per matched (db index, query index) pair; unmatched pairs are 0."""
    if sigma <= 0:
        raise DataError(f"sigma must be positive, got {sigma}")
    w = _match_weights(db_graphs, db.positions, q.positions, matches, sigma, lut)
    return {
        (int(i), int(j)): float(wv)
        for i, j, wv in zip(matches.db_indices, matches.q_indices, w)
    }


def score_lpg(
    db_graphs: StarGraphSet,
    db: ImageFeatureSet,
    q: ImageFeatureSet,
    sigma: float = DEFAULT_SIGMA,
    lut: GaussianLUT | None = None,
) -> float:
    """Image similarity with graph-context weights.  Empty sets score 0."""
    if len(db) == 0 or len(q) == 0:
        return 0.0
    matches = match_features(db, q)
    if len(matches) == 0:
        return 0.0
    w = _match_weights(db_graphs, db.positions, q.positions, matches, sigma, lut)
    return float(w @ matches.cosines) / math.sqrt(len(db) * len(q))


def write_graphs(
    graph_sets: Sequence[StarGraphSet], path: str | Path
) -> int:
    """Persist per-image star graphs to a VPRG cache file.

    Records are positional: they follow the image order of the store the
    graphs were built from.  All graph sets must share one window size.
    """
    hs = {gs.h for gs in graph_sets}
    if len(hs) > 1:
        raise InvalidStoreData(f"mixed window sizes in one cache: {sorted(hs)}")
    h = hs.pop() if hs else DEFAULT_WINDOW
    buf = io.BytesIO()
    buf.write(GRAPH_MAGIC)
    _binio.write_u32(buf, GRAPH_VERSION)
    _binio.write_f32(buf, np.array([h]))
    _binio.write_u32(buf, len(graph_sets))
    for gs in graph_sets:
        if len(gs) > 0xFFFF:
            raise InvalidStoreData("more than 65535 features in one image")
        _binio.write_u32(buf, len(gs))
        for i in range(len(gs)):
            leaves = gs.graph(i).leaves
            _binio.write_u16(buf, len(leaves))
            buf.write(np.asarray(leaves, dtype="<u2").tobytes())
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return len(data)


def read_graphs(path: str | Path) -> list[StarGraphSet]:
    with open(path, "rb") as fh:
        _binio.check_magic(fh, GRAPH_MAGIC)
        _binio.check_version(fh, GRAPH_VERSION)
        h = float(_binio.read_f32(fh, 1)[0])
        image_count = _binio.read_u32(fh)
        out = []
        for _ in range(image_count):
            n = _binio.read_u32(fh)
            offsets = np.zeros(n + 1, dtype=np.int64)
            chunks = []
            for i in range(n):
                count = _binio.read_u16(fh)
                raw = _binio.read_exact(fh, 2 * count)
                chunks.append(np.frombuffer(raw, dtype="<u2").astype(np.int32))
                offsets[i + 1] = offsets[i] + count
            leaves = (
                np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int32)
            )
            out.append(StarGraphSet(h, offsets, leaves))
    return out
