"""Retrieval metrics, hyper-parameter sweeps, and the comparison benchmark.

The precision-recall AUC pools all (query, database) pairs globally and
integrates precision over recall with the trapezoid rule, anchored at
(recall 0, precision of the first prefix).  Ranking ties always break by
id so every metric is reproducible across platforms.
"""

from __future__ import annotations

import dataclasses
import io
import json
import time
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError
from .lpg import GaussianLUT, build_star_graphs, score_lpg
from .model import GroundTruth, ImageFeatureSet, RetrievalResult
from .retrieval import PairScorer, RerankerChoice, hierarchical_query

ScoreTable = Mapping[str, Mapping[str, float]]


@dataclasses.dataclass
class PRCurve:
    """Precision/recall at every prefix of the global ranking, plus the AUC."""

    precision: np.ndarray
    recall: np.ndarray
    auc: float

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.precision.tolist(), self.recall.tolist()))

    def to_gnuplot(self) -> str:
        """Two-column recall/precision dump, one point per line."""
        buf = io.StringIO()
        buf.write("# recall precision\n")
        for p, r in zip(self.precision, self.recall):
            buf.write(f"{r:.9f} {p:.9f}\n")
        return buf.getvalue()


def _as_score_table(
    scores: ScoreTable | Sequence[RetrievalResult],
) -> ScoreTable:
    if isinstance(scores, Mapping):
        return scores
    return {r.query_id: {e.db_id: e.score for e in r.entries} for r in scores}


def pr_auc(
    scores: ScoreTable | Sequence[RetrievalResult], gt: GroundTruth
) -> PRCurve:
    """Precision-recall curve over the global pool of scored pairs.

    Every scored pair must have a ground-truth label (its query must appear
    in the ground truth), and at least one pair must be positive.
    """
    table = _as_score_table(scores)
    pool = []
    labels = []
    for query_id in table:
        if query_id not in gt.matches:
            raise DataError(f"query {query_id!r} has no ground-truth entry")
        positives = gt.matches[query_id]
        for db_id, score in table[query_id].items():
            pool.append((-score, query_id, db_id))
            labels.append(db_id in positives)
    if not pool:
        raise DataError("no scored pairs to evaluate")
    n_pos = sum(labels)
    if n_pos == 0:
        raise DataError("ground truth labels no scored pair as positive")
    order = sorted(range(len(pool)), key=lambda i: pool[i])
    hits = np.cumsum([labels[i] for i in order])
    ranks = np.arange(1, len(pool) + 1)
    precision = hits / ranks
    recall = hits / n_pos
    prev_r = np.concatenate([[0.0], recall[:-1]])
    prev_p = np.concatenate([[precision[0]], precision[:-1]])
    auc = float(((recall - prev_r) * (precision + prev_p) / 2.0).sum())
    return PRCurve(precision, recall, auc)


@dataclasses.dataclass
class RecallReport:
    values: dict[int, float]
    skipped_queries: int


def recall_at_k(
    results: Sequence[RetrievalResult], gt: GroundTruth, ks: Sequence[int]
) -> RecallReport:
    """Fraction of queries with at least one correct id in their top K.

    Queries missing from the ground truth are excluded and counted in
    `skipped_queries`.
    """
    if any(k < 1 for k in ks):
        raise DataError("every K must be at least 1")
    usable = [r for r in results if r.query_id in gt.matches]
    skipped = len(results) - len(usable)
    values = {}
    for k in ks:
        hit = sum(
            1
            for r in usable
            if any(db_id in gt.matches[r.query_id] for db_id in r.top(k))
        )
        values[k] = hit / len(usable) if usable else 0.0
    return RecallReport(values, skipped)


@dataclasses.dataclass
class SweepGrid:
    """Exhaustive-LPG AUC for every (sigma, window) combination."""

    sigmas: list[float]
    hs: list[float]
    auc: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("sigma\\h," + ",".join(f"{h:g}" for h in self.hs) + "\n")
        for i, s in enumerate(self.sigmas):
            row = ",".join(f"{v:.4f}" for v in self.auc[i])
            buf.write(f"{s:g},{row}\n")
        return buf.getvalue()

    def to_json_obj(self) -> dict:
        return {
            "sigmas": self.sigmas,
            "hs": self.hs,
            "auc": [[float(v) for v in row] for row in self.auc],
        }


def sweep_lpg(
    db_sets: Sequence[ImageFeatureSet],
    q_sets: Sequence[ImageFeatureSet],
    gt: GroundTruth,
    sigmas: Sequence[float],
    hs: Sequence[float],
    use_lut: bool = False,
) -> SweepGrid:
    """Grid of exhaustive-LPG AUC values; cells are order-independent."""
    if not sigmas or not hs:
        raise DataError("sweep grids must be non-empty")
    auc = np.zeros((len(sigmas), len(hs)))
    for j, h in enumerate(hs):
        graphs = [build_star_graphs(s, h) for s in db_sets]
        for i, sigma in enumerate(sigmas):
            lut = GaussianLUT.build(sigma) if use_lut else None
            table = {
                q.image_id: {
                    s.image_id: score_lpg(graphs[d], s, q, sigma, lut)
                    for d, s in enumerate(db_sets)
                }
                for q in q_sets
            }
            auc[i, j] = pr_auc(table, gt).auc
    return SweepGrid(list(sigmas), list(hs), auc)


@dataclasses.dataclass
class TimingReport:
    """Feature-comparison timing for one pipeline configuration.

    Only the query-time comparison work is measured (holistic ranking plus
    candidate re-scoring); store loading, holistic aggregation, and graph
    construction happen offline and are excluded.  Wall time comes from
    time.perf_counter (nanosecond-resolution monotonic clock).
    """

    reranker: str
    total_seconds: float
    per_repetition: list[float]
    query_count: int
    avg_query_ms: float
    pairs_per_second: float
    config: dict

    def to_json_obj(self) -> dict:
        return dataclasses.asdict(self)


def bench_compare(
    db_sets: Sequence[ImageFeatureSet],
    q_sets: Sequence[ImageFeatureSet],
    k_top: int,
    choices: Sequence[RerankerChoice],
    repetitions: int = 1,
) -> list[TimingReport]:
    """Mean comparison time per reranker over `repetitions` runs."""
    if repetitions < 1:
        raise DataError("repetitions must be at least 1")
    reports = []
    for choice in choices:
        scorer = PairScorer(db_sets, choice)  # graphs/LUT built here, untimed
        if q_sets:  # warm caches before measuring
            hierarchical_query(q_sets[0], db_sets, k_top, choice, scorer=scorer)
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            for q in q_sets:
                hierarchical_query(q, db_sets, k_top, choice, scorer=scorer)
            times.append(time.perf_counter() - t0)
        total = float(np.mean(times))
        pairs = len(q_sets) * min(k_top, len(db_sets))
        reports.append(
            TimingReport(
                reranker=choice.kind,
                total_seconds=total,
                per_repetition=times,
                query_count=len(q_sets),
                avg_query_ms=1000.0 * total / len(q_sets),
                pairs_per_second=pairs / total if total > 0 else float("inf"),
                config={
                    "k_top": k_top,
                    "sigma": choice.sigma,
                    "h": choice.h,
                    "use_lut": choice.use_lut,
                    "ransac_iters": choice.ransac.max_iterations,
                    "ransac_tau": choice.ransac.inlier_threshold,
                    "seed": choice.seed,
                    "repetitions": repetitions,
                    "db_size": len(db_sets),
                    "parallelism": 1,
                },
            )
        )
    return reports


def metrics_to_json(
    curve: PRCurve | None, recall: RecallReport | None, manifest: dict | None = None
) -> str:
    """Bundle evaluation outputs into one JSON document."""
    obj: dict = {}
    if manifest is not None:
        obj["manifest"] = manifest
    if curve is not None:
        obj["auc"] = curve.auc
    if recall is not None:
        obj["recall"] = {str(k): v for k, v in recall.values.items()}
        obj["skipped_queries"] = recall.skipped_queries
    return json.dumps(obj, indent=1)
