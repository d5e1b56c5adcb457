"""Dense map to sparse features: NMS detection, patch pooling, PCA compression.

The input is an externally produced dense feature tensor plus an attention
map (VPRD container).  Keypoints are strict local maxima of the attention
map under a 3x3 sliding window; descriptors are the row-major flattening of
the d x d x C window around each keypoint, PCA-compressed and L2-normalized.
Detected grid coordinates map to normalized positions via the pixel-center
transform (x + 0.5) * 100 / W.
"""

from __future__ import annotations

import dataclasses
import io
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import _binio
from .errors import DataError
from .model import POSITION_SCALE, DenseFeatureMap, ImageFeatureSet

DENSE_MAGIC = b"VPRD"
DENSE_VERSION = 1
PCA_MAGIC = b"VPRP"

DEFAULT_PATCH_SIZE = 7


class Keypoint(NamedTuple):
    """Grid cell (row y, col x) plus its attention value."""

    y: int
    x: int
    attention: float


def softmax_normalize(attention: np.ndarray) -> np.ndarray:
    """Normalize an attention map so all entries are positive and sum to 1."""
    a = np.asarray(attention, dtype=np.float64)
    if a.size == 0:
        raise DataError("cannot normalize an empty attention map")
    e = np.exp(a - a.max())
    return e / e.sum()


def global_descriptor(dense: DenseFeatureMap, s: np.ndarray) -> np.ndarray:
    """Attention-weighted sum of all dense descriptors, one value per channel."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape != dense.values.shape[:2]:
        raise DataError(f"weight map {s.shape} does not match tensor {dense.values.shape[:2]}")
    return np.einsum("yx,yxc->c", s, np.asarray(dense.values, dtype=np.float64))


def nms_detect(
    attention: np.ndarray, max_features: int | None = None
) -> list[Keypoint]:
    """Strict local maxima of a 3x3 sliding window, sorted by attention.

    A cell qualifies only if it is strictly greater than every existing
    8-neighbor, so plateaus (including constant maps) yield no keypoints.
    Ties in attention are ordered row-major.
    """
    a = np.asarray(attention, dtype=np.float64)
    H, W = a.shape
    padded = np.full((H + 2, W + 2), -np.inf)
    padded[1:-1, 1:-1] = a
    mask = np.ones((H, W), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            mask &= a > padded[1 + dy : H + 1 + dy, 1 + dx : W + 1 + dx]
    ys, xs = np.nonzero(mask)
    values = a[ys, xs]
    order = np.lexsort((xs, ys, -values))
    if max_features is not None:
        order = order[:max_features]
    return [Keypoint(int(ys[i]), int(xs[i]), float(values[i])) for i in order]


def extract_patch_descriptors(
    dense: DenseFeatureMap,
    keypoints: Sequence[Keypoint],
    d: int = DEFAULT_PATCH_SIZE,
) -> list[tuple[Keypoint, np.ndarray]]:
    """Row-major flattening of the d x d x C window centered on each keypoint.

    Keypoints whose window would leave the map are discarded, keeping the
    flattened dimensionality fixed at d*d*C.
    """
    if d % 2 == 0 or d < 1:
        raise DataError(f"patch size must be odd and positive, got {d}")
    r = d // 2
    values = np.asarray(dense.values, dtype=np.float64)
    H, W = values.shape[:2]
    out = []
    for kp in keypoints:
        if kp.y < r or kp.y >= H - r or kp.x < r or kp.x >= W - r:
            continue
        patch = values[kp.y - r : kp.y + r + 1, kp.x - r : kp.x + r + 1, :]
        out.append((kp, patch.reshape(-1).copy()))
    return out


@dataclasses.dataclass
class PCAModel:
    """Mean vector plus orthonormal principal directions (rows of `components`)."""

    mean: np.ndarray
    components: np.ndarray
    variances: np.ndarray | None = None

    @property
    def d_in(self) -> int:
        return self.components.shape[1]

    @property
    def d_out(self) -> int:
        return self.components.shape[0]


def pca_fit(samples: np.ndarray, d_out: int) -> PCAModel:
    """Top-d_out principal directions of the samples, variance non-increasing.

    Sign convention: the largest-magnitude entry of every component is made
    positive, so refits of the same data are bit-identical.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2:
        raise DataError(f"samples must be (n, d_in), got shape {X.shape}")
    n, d_in = X.shape
    if d_out > min(n - 1, d_in) or d_out < 1:
        raise DataError(
            f"d_out={d_out} not in [1, min(n-1={n - 1}, d_in={d_in})]"
        )
    mean = X.mean(axis=0)
    Xc = X - mean
    _, svals, vt = np.linalg.svd(Xc, full_matrices=False)
    components = vt[:d_out].copy()
    flip = components[np.arange(d_out), np.abs(components).argmax(axis=1)] < 0
    components[flip] *= -1.0
    variances = (svals[:d_out] ** 2) / (n - 1)
    return PCAModel(mean, components, variances)


def pca_apply(model: PCAModel, vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project, then L2-normalize.  Returns (projected, zero_mask).

    Vectors that land exactly on the origin (for example the training mean)
    stay zero and are flagged in `zero_mask` instead of being divided.
    """
    X = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if X.shape[1] != model.d_in:
        raise DataError(f"expected d_in={model.d_in}, got {X.shape[1]}")
    Y = (X - model.mean) @ model.components.T
    norms = np.linalg.norm(Y, axis=1)
    zero = norms == 0.0
    Y[~zero] /= norms[~zero, None]
    return Y, zero


def build_feature_set(
    image_id: str,
    dense: DenseFeatureMap,
    model: PCAModel,
    d: int = DEFAULT_PATCH_SIZE,
    max_features: int | None = None,
) -> ImageFeatureSet:
    """Full post-processing chain: NMS -> patch pooling -> PCA -> positions."""
    if model.d_in != d * d * dense.channels:
        raise DataError(
            f"PCA d_in={model.d_in} does not match d*d*C={d * d * dense.channels}"
        )
    keypoints = nms_detect(dense.attention, max_features)
    pooled = extract_patch_descriptors(dense, keypoints, d)
    if not pooled:
        return ImageFeatureSet.empty(image_id, d_loc=model.d_out)
    patches = np.stack([vec for _, vec in pooled])
    descriptors, _ = pca_apply(model, patches)
    H, W = dense.height, dense.width
    positions = np.array(
        [
            ((kp.x + 0.5) * POSITION_SCALE / W, (kp.y + 0.5) * POSITION_SCALE / H)
            for kp, _ in pooled
        ],
        dtype=np.float64,
    )
    return ImageFeatureSet(image_id, positions, descriptors)


def write_dense_maps(
    items: Sequence[tuple[str, DenseFeatureMap]], path: str | Path
) -> int:
    """Write (image_id, dense map) records to a VPRD container file."""
    buf = io.BytesIO()
    buf.write(DENSE_MAGIC)
    _binio.write_u32(buf, DENSE_VERSION)
    _binio.write_u32(buf, len(items))
    for image_id, dense in items:
        _binio.write_id(buf, image_id)
        _binio.write_u32(buf, dense.height)
        _binio.write_u32(buf, dense.width)
        _binio.write_u32(buf, dense.channels)
        _binio.write_f32(buf, dense.values)
        _binio.write_f32(buf, dense.attention)
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return len(data)


def read_dense_maps(path: str | Path) -> list[tuple[str, DenseFeatureMap]]:
    with open(path, "rb") as fh:
        _binio.check_magic(fh, DENSE_MAGIC)
        _binio.check_version(fh, DENSE_VERSION)
        count = _binio.read_u32(fh)
        items = []
        for _ in range(count):
            image_id = _binio.read_id(fh)
            H = _binio.read_u32(fh)
            W = _binio.read_u32(fh)
            C = _binio.read_u32(fh)
            values = _binio.read_f32(fh, H * W * C).reshape(H, W, C)
            attention = _binio.read_f32(fh, H * W).reshape(H, W)
            items.append((image_id, DenseFeatureMap(values, attention)))
    return items


def write_pca(model: PCAModel, path: str | Path) -> int:
    buf = io.BytesIO()
    buf.write(PCA_MAGIC)
    _binio.write_u32(buf, model.d_in)
    _binio.write_u32(buf, model.d_out)
    _binio.write_f32(buf, model.mean)
    _binio.write_f32(buf, model.components)
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return len(data)


def read_pca(path: str | Path) -> PCAModel:
    with open(path, "rb") as fh:
        _binio.check_magic(fh, PCA_MAGIC)
        d_in = _binio.read_u32(fh)
        d_out = _binio.read_u32(fh)
        mean = _binio.read_f32(fh, d_in)
        components = _binio.read_f32(fh, d_out * d_in).reshape(d_out, d_in)
    return PCAModel(mean, components)
