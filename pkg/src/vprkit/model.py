"""Core domain types and the VPRF feature-store interchange format.

A feature store is an ordered collection of per-image feature sets.  Each
local feature is a 2-D position in normalized coordinates [0, 100) per axis
plus a fixed-length descriptor; an optional holistic vector summarizes the
whole image for fast candidate selection.  Files hold float32; arrays are
widened to float64 when loaded.
"""

from __future__ import annotations

import dataclasses
import io
import json
import os
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from . import _binio
from .errors import DataError, InvalidStoreData

POSITION_SCALE = 100.0  # upper bound (exclusive) of the normalized position range

STORE_MAGIC = b"VPRF"
STORE_VERSION = 1

STAGE_HOLISTIC = "holistic"
STAGE_RERANKED = "reranked"


class LocalFeature(NamedTuple):
    """A keypoint position plus its descriptor vector."""

    x: float
    y: float
    desc: np.ndarray

    @property
    def pos(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclasses.dataclass
class ImageFeatureSet:
    """All local features of one image, plus an optional holistic descriptor.

    `positions` is (N, 2) with columns x, y; `descriptors` is (N, d_loc).
    Treated as immutable after construction; downstream code never mutates
    a loaded set.
    """

    image_id: str
    positions: np.ndarray
    descriptors: np.ndarray
    holistic: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        self.descriptors = np.atleast_2d(np.asarray(self.descriptors))
        if self.positions.size == 0:
            self.positions = self.positions.reshape(0, 2)
        if self.positions.shape[1] != 2:
            raise ValueError(f"positions must be (N, 2), got {self.positions.shape}")
        if self.descriptors.shape[0] != self.positions.shape[0]:
            raise ValueError(
                f"{self.descriptors.shape[0]} descriptors for "
                f"{self.positions.shape[0]} positions"
            )
        if self.holistic is not None:
            self.holistic = np.asarray(self.holistic).reshape(-1)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def d_loc(self) -> int:
        return self.descriptors.shape[1]

    def feature(self, i: int) -> LocalFeature:
        return LocalFeature(self.positions[i, 0], self.positions[i, 1], self.descriptors[i])

    def features(self) -> Iterator[LocalFeature]:
        for i in range(len(self)):
            yield self.feature(i)

    @classmethod
    def empty(cls, image_id: str, d_loc: int = 0) -> "ImageFeatureSet":
        return cls(
            image_id,
            np.zeros((0, 2), dtype=np.float64),
            np.zeros((0, d_loc), dtype=np.float64),
        )

    def with_holistic(self, holistic: np.ndarray) -> "ImageFeatureSet":
        return ImageFeatureSet(self.image_id, self.positions, self.descriptors, holistic)


@dataclasses.dataclass
class DenseFeatureMap:
    """Dense H x W x C feature tensor with its H x W attention map."""

    values: np.ndarray
    attention: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        self.attention = np.asarray(self.attention)
        if self.values.ndim != 3:
            raise ValueError(f"values must be (H, W, C), got {self.values.shape}")
        if self.attention.shape != self.values.shape[:2]:
            raise ValueError(
                f"attention {self.attention.shape} does not match tensor "
                f"{self.values.shape[:2]}"
            )

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def check_positions(positions: np.ndarray) -> None:
    """Raise if any position lies outside [0, POSITION_SCALE) on either axis."""
    if positions.size and (
        positions.min() < 0.0 or positions.max() >= POSITION_SCALE
    ):
        raise InvalidStoreData(
            f"positions must lie in [0, {POSITION_SCALE:g}) per axis"
        )


def _store_dims(sets: Sequence[ImageFeatureSet]) -> tuple[int, int]:
    """Validate homogeneity and return (d_loc, holistic_dim) for a collection."""
    d_locs = {s.d_loc for s in sets if len(s) > 0}
    if len(d_locs) > 1:
        raise InvalidStoreData(f"heterogeneous descriptor lengths: {sorted(d_locs)}")
    d_loc = d_locs.pop() if d_locs else 0

    hol_dims = {0 if s.holistic is None else s.holistic.shape[0] for s in sets}
    if len(hol_dims) > 1:
        raise InvalidStoreData(
            "holistic descriptors must be present for all images or none"
        )
    holistic_dim = hol_dims.pop() if hol_dims else 0
    return d_loc, holistic_dim


def write_store(sets: Sequence[ImageFeatureSet], path: str | Path) -> int:
    """Write a collection to a VPRF file. Returns the byte count written."""
    sets = list(sets)
    d_loc, holistic_dim = _store_dims(sets)
    for s in sets:
        check_positions(s.positions)

    buf = io.BytesIO()
    buf.write(STORE_MAGIC)
    _binio.write_u32(buf, STORE_VERSION)
    _binio.write_u32(buf, len(sets))
    _binio.write_u32(buf, d_loc)
    _binio.write_u32(buf, holistic_dim)
    for s in sets:
        _binio.write_id(buf, s.image_id)
        _binio.write_u32(buf, len(s))
        if len(s):
            rows = np.concatenate([s.positions, s.descriptors], axis=1)
            _binio.write_f32(buf, rows)
        if holistic_dim:
            _binio.write_f32(buf, s.holistic)
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return len(data)


def read_store(path: str | Path) -> list[ImageFeatureSet]:
    """Read a VPRF file back into a list of feature sets (exact inverse of write)."""
    with open(path, "rb") as fh:
        _binio.check_magic(fh, STORE_MAGIC)
        _binio.check_version(fh, STORE_VERSION)
        image_count = _binio.read_u32(fh)
        d_loc = _binio.read_u32(fh)
        holistic_dim = _binio.read_u32(fh)
        sets = []
        for _ in range(image_count):
            image_id = _binio.read_id(fh)
            n = _binio.read_u32(fh)
            rows = _binio.read_f32(fh, n * (2 + d_loc)).reshape(n, 2 + d_loc)
            holistic = _binio.read_f32(fh, holistic_dim) if holistic_dim else None
            sets.append(
                ImageFeatureSet(
                    image_id,
                    rows[:, :2],
                    rows[:, 2:].reshape(n, d_loc),
                    holistic,
                )
            )
        if fh.read(1):
            raise InvalidStoreData("trailing bytes after the last image record")
    return sets


@dataclasses.dataclass
class GroundTruth:
    """Per-query set of database image ids considered correct matches."""

    matches: dict[str, frozenset[str]]

    @classmethod
    def from_mapping(cls, mapping: dict[str, Iterable[str]]) -> "GroundTruth":
        return cls({q: frozenset(ids) for q, ids in mapping.items()})

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruth":
        with open(path) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise DataError("ground truth must be a JSON object")
        return cls.from_mapping(raw)

    def save(self, path: str | Path) -> None:
        obj = {q: sorted(ids) for q, ids in sorted(self.matches.items())}
        Path(path).write_text(json.dumps(obj, indent=1) + "\n")

    def positives_for(self, query_id: str) -> frozenset[str]:
        return self.matches.get(query_id, frozenset())

    def validate(
        self, db_ids: Iterable[str], query_ids: Iterable[str] | None = None
    ) -> None:
        """Check that every referenced id exists in the corresponding store."""
        known = set(db_ids)
        for q, ids in self.matches.items():
            missing = ids - known
            if missing:
                raise DataError(f"ground truth for {q!r} references unknown ids {sorted(missing)[:3]}")
        if query_ids is not None:
            unknown = set(self.matches) - set(query_ids)
            if unknown:
                raise DataError(f"ground truth queries not in store: {sorted(unknown)[:3]}")


class RankedEntry(NamedTuple):
    db_id: str
    score: float
    stage: str


@dataclasses.dataclass
class RetrievalResult:
    """Ranked database ids for one query, with stage provenance per entry."""

    query_id: str
    entries: list[RankedEntry]

    def validate(self) -> None:
        ids = [e.db_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate db ids in result for {self.query_id!r}")
        scores = [e.score for e in self.entries]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise DataError(f"scores increase down the ranking for {self.query_id!r}")

    def top(self, k: int) -> list[str]:
        return [e.db_id for e in self.entries[:k]]

    def to_json_obj(self) -> dict:
        return {
            "query_id": self.query_id,
            "ranking": [
                {"db_id": e.db_id, "score": e.score, "stage": e.stage}
                for e in self.entries
            ],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "RetrievalResult":
        return cls(
            obj["query_id"],
            [RankedEntry(r["db_id"], float(r["score"]), r["stage"]) for r in obj["ranking"]],
        )


def write_results(
    results: Sequence[RetrievalResult],
    path: str | Path,
    manifest: dict | None = None,
) -> None:
    """Write results as JSON lines; an optional manifest becomes line one."""
    with open(path, "w") as fh:
        if manifest is not None:
            fh.write(json.dumps({"manifest": manifest}) + "\n")
        for r in results:
            fh.write(json.dumps(r.to_json_obj()) + "\n")


def read_results(path: str | Path) -> tuple[list[RetrievalResult], dict | None]:
    results = []
    manifest = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "manifest" in obj and "query_id" not in obj:
                manifest = obj["manifest"]
            else:
                results.append(RetrievalResult.from_json_obj(obj))
    return results, manifest


def atomic_write(path: str | Path, writer) -> None:
    """Run `writer(tmp_path)` then rename, so failures leave no partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
