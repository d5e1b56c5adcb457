"""Hierarchical query engine: holistic top-K selection, then re-ranking.

Stage one ranks the whole database by holistic cosine similarity and keeps
the top K candidates.  Stage two re-scores only those candidates with the
chosen local-feature scorer and replaces their holistic scores.  Every
non-candidate keeps its holistic ordering but is squeezed strictly below
the weakest re-ranked candidate, so the final list is a total ordering over
the whole database (needed for precision-recall evaluation), while the
candidate set itself never changes.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

from .errors import DataError
from .geometry import RansacParams, ransac_fundamental
from .hdc import holistic_rank
from .lpg import (
    DEFAULT_SIGMA,
    DEFAULT_WINDOW,
    GaussianLUT,
    StarGraphSet,
    _match_weights,
    build_star_graphs,
)
from .matching import mutual_matches, normalized_rows
from .model import (
    STAGE_HOLISTIC,
    STAGE_RERANKED,
    ImageFeatureSet,
    RankedEntry,
    RetrievalResult,
)

RERANKER_KINDS = ("mm", "lpg", "ransac")
DEFAULT_TOP_K = 100


@dataclasses.dataclass(frozen=True)
class RerankerChoice:
    """Which local-feature scorer re-ranks candidates, plus its parameters."""

    kind: str = "mm"
    sigma: float = DEFAULT_SIGMA
    h: float = DEFAULT_WINDOW
    use_lut: bool = True
    ransac: RansacParams = dataclasses.field(default_factory=RansacParams)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in RERANKER_KINDS:
            raise DataError(f"unknown reranker {self.kind!r}, want one of {RERANKER_KINDS}")


class PairScorer:
    """Binds a reranker choice to a database: score one (db image, query) pair.

    Star graphs are precomputed once per database, and normalized descriptor
    matrices are cached (per database image, and for the most recent query)
    so that the similarity matrix costs one matrix product per pair.  RANSAC
    seeds derive from the base seed xor the database index so results do not
    depend on the order in which pairs are evaluated.  Scores are bit-equal
    to the standalone score_mm / score_lpg / score_ransac functions.
    """

    def __init__(
        self,
        db_sets: Sequence[ImageFeatureSet],
        choice: RerankerChoice,
        db_graphs: Sequence[StarGraphSet] | None = None,
    ):
        self.db_sets = list(db_sets)
        self.choice = choice
        self.lut = (
            GaussianLUT.build(choice.sigma)
            if choice.kind == "lpg" and choice.use_lut
            else None
        )
        if choice.kind == "lpg" and db_graphs is None:
            db_graphs = [build_star_graphs(s, choice.h) for s in self.db_sets]
        if db_graphs is not None and len(db_graphs) != len(self.db_sets):
            raise DataError("graph cache does not match the database store")
        self.db_graphs = db_graphs
        self._db_normalized: list[object] = [None] * len(self.db_sets)
        self._last_query: tuple[ImageFeatureSet | None, object] = (None, None)

    def _normalized_db(self, i: int):
        cached = self._db_normalized[i]
        if cached is None:
            cached = normalized_rows(self.db_sets[i].descriptors)
            self._db_normalized[i] = cached
        return cached

    def _normalized_query(self, query: ImageFeatureSet):
        owner, cached = self._last_query
        if owner is not query:
            cached = normalized_rows(query.descriptors)
            self._last_query = (query, cached)
        return cached

    def score(self, db_index: int, query: ImageFeatureSet) -> float:
        db_set = self.db_sets[db_index]
        if len(db_set) == 0 or len(query) == 0:
            return 0.0
        matches = mutual_matches(
            self._normalized_db(db_index) @ self._normalized_query(query).T
        )
        denom = math.sqrt(len(db_set) * len(query))
        choice = self.choice
        if choice.kind == "mm":
            return float(matches.cosines.sum()) / denom
        if choice.kind == "lpg":
            if len(matches) == 0:
                return 0.0
            weights = _match_weights(
                self.db_graphs[db_index],
                db_set.positions,
                query.positions,
                matches,
                choice.sigma,
                self.lut,
            )
            return float(weights @ matches.cosines) / denom
        if len(matches) == 0:
            return 0.0
        estimate = ransac_fundamental(
            db_set.positions[matches.db_indices],
            query.positions[matches.q_indices],
            choice.ransac,
            choice.seed ^ db_index,
        )
        return float(matches.cosines[estimate.inlier_mask].sum()) / denom


def exhaustive_query(
    q: ImageFeatureSet,
    db_sets: Sequence[ImageFeatureSet],
    choice: RerankerChoice,
    db_graphs: Sequence[StarGraphSet] | None = None,
    scorer: PairScorer | None = None,
) -> RetrievalResult:
    """Score the query against every database image with the chosen scorer."""
    if len(db_sets) == 0:
        raise DataError("empty database")
    scorer = scorer or PairScorer(db_sets, choice, db_graphs)
    scored = [
        (scorer.score(i, q), s.image_id) for i, s in enumerate(db_sets)
    ]
    scored.sort(key=lambda kv: (-kv[0], kv[1]))
    return RetrievalResult(
        q.image_id,
        [RankedEntry(db_id, float(sc), STAGE_RERANKED) for sc, db_id in scored],
    )


def hierarchical_query(
    q: ImageFeatureSet,
    db_sets: Sequence[ImageFeatureSet],
    k_top: int,
    choice: RerankerChoice,
    db_graphs: Sequence[StarGraphSet] | None = None,
    scorer: PairScorer | None = None,
) -> RetrievalResult:
    """Holistic top-K selection followed by local-feature re-ranking."""
    if len(db_sets) == 0:
        raise DataError("empty database")
    if k_top < 1:
        raise DataError(f"k_top must be at least 1, got {k_top}")
    if q.holistic is None or any(s.holistic is None for s in db_sets):
        raise DataError("hierarchical retrieval requires holistic descriptors")
    scorer = scorer or PairScorer(db_sets, choice, db_graphs)

    index_of = {s.image_id: i for i, s in enumerate(db_sets)}
    ranked = holistic_rank(
        q.holistic, [s.holistic for s in db_sets], [s.image_id for s in db_sets]
    )
    candidates = ranked[:k_top]
    rest = ranked[k_top:]

    rescored = [
        (scorer.score(index_of[db_id], q), db_id) for db_id, _ in candidates
    ]
    rescored.sort(key=lambda kv: (-kv[0], kv[1]))
    entries = [
        RankedEntry(db_id, float(sc), STAGE_RERANKED) for sc, db_id in rescored
    ]
    if rest:
        # squeeze non-candidates strictly below the weakest candidate while
        # preserving their holistic order
        floor = rescored[-1][0] - 1.0
        step = 1.0 / (len(rest) + 1)
        entries.extend(
            RankedEntry(db_id, float(floor - (t + 1) * step), STAGE_HOLISTIC)
            for t, (db_id, _) in enumerate(rest)
        )
    return RetrievalResult(q.image_id, entries)


def run_queries(
    queries: Sequence[ImageFeatureSet],
    db_sets: Sequence[ImageFeatureSet],
    choice: RerankerChoice,
    k_top: int | None = DEFAULT_TOP_K,
    db_graphs: Sequence[StarGraphSet] | None = None,
    jobs: int = 1,
) -> list[RetrievalResult]:
    """Batch driver: k_top None means exhaustive, otherwise hierarchical."""
    scorer = PairScorer(db_sets, choice, db_graphs)

    def one(q: ImageFeatureSet) -> RetrievalResult:
        if k_top is None:
            return exhaustive_query(q, db_sets, choice, scorer=scorer)
        return hierarchical_query(q, db_sets, k_top, choice, scorer=scorer)

    if jobs <= 1:
        return [one(q) for q in queries]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, queries))
