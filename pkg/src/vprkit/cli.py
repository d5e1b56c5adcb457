"""Batch command-line surface for the retrieval pipeline.

One subcommand per pipeline stage so the offline artifacts (PCA model,
holistic stores, star-graph caches) can be produced once and reused:

    gen         synthetic world -> db.vprf, queries.vprf, gt.json
    postprocess VPRD dense maps (+ optional VPRP PCA) -> VPRF store
    aggregate   VPRF -> VPRF with holistic descriptors
    graphs      VPRF -> VPRG star-graph cache
    retrieve    stores -> results.jsonl (exhaustive or hierarchical)
    evaluate    results + ground truth -> metrics (AUC, Recall@K)
    sweep       sigma x window AUC grid (exhaustive LPG)
    bench       feature-comparison timing per reranker

Exit codes: 0 success, 1 usage error, 2 data error.  Outputs are written to
a temp file and renamed, so a failed run leaves no partial artifact.  Every
artifact carries the run manifest: JSON outputs embed it, binary formats
get a `<name>.manifest.json` sidecar.  A JSON file passed with --config
overrides the command-line flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .errors import DataError, VprError
from .evaluation import bench_compare, metrics_to_json, pr_auc, recall_at_k, sweep_lpg
from .geometry import RansacParams
from .hdc import DEFAULT_DIM, DEFAULT_NX, DEFAULT_NY, aggregate_store, hdc_init
from .lpg import DEFAULT_SIGMA, DEFAULT_WINDOW, build_star_graphs, read_graphs, write_graphs
from .model import GroundTruth, atomic_write, read_results, read_store, write_results, write_store
from .postproc import (
    DEFAULT_PATCH_SIZE,
    PCAModel,
    build_feature_set,
    extract_patch_descriptors,
    nms_detect,
    pca_fit,
    read_dense_maps,
    read_pca,
    write_pca,
)
from .retrieval import DEFAULT_TOP_K, RerankerChoice, run_queries
from .synthetic import WorldConfig, gen_world


@dataclasses.dataclass
class RunManifest:
    """Provenance block serialized into every output artifact."""

    subcommand: str
    inputs: dict
    params: dict
    outputs: dict
    parallelism: int
    version: str = __version__

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _sidecar(path: Path, manifest: RunManifest) -> None:
    side = path.with_name(path.name + ".manifest.json")
    side.write_text(json.dumps(manifest.to_dict(), indent=1) + "\n")


def _write_text_atomic(path: Path, text: str) -> None:
    atomic_write(path, lambda tmp: Path(tmp).write_text(text))


def _reranker_from_args(args) -> RerankerChoice:
    return RerankerChoice(
        kind=args.reranker,
        sigma=args.sigma,
        h=args.h,
        use_lut=not args.lpg_exact,
        ransac=RansacParams(
            max_iterations=args.ransac_iters, inlier_threshold=args.ransac_tau
        ),
        seed=args.ransac_seed,
    )


def _reranker_params(args) -> dict:
    return {
        "reranker": args.reranker,
        "sigma": args.sigma,
        "h": args.h,
        "lpg_exact": args.lpg_exact,
        "ransac_iters": args.ransac_iters,
        "ransac_tau": args.ransac_tau,
        "ransac_seed": args.ransac_seed,
    }


def _add_reranker_flags(sub: argparse.ArgumentParser, with_choice: bool = True) -> None:
    if with_choice:
        sub.add_argument(
            "--reranker", choices=("mm", "lpg", "ransac"), default="mm",
            help="local-feature scorer for re-ranking (default mm)",
        )
    sub.add_argument("--sigma", type=float, default=DEFAULT_SIGMA,
                     help="width of the displacement Gaussian (default 1.0)")
    sub.add_argument("--h", type=float, default=DEFAULT_WINDOW,
                     help="star-graph window size in position units (default 60)")
    sub.add_argument("--lpg-exact", action="store_true",
                     help="evaluate the Gaussian exactly instead of via the LUT")
    sub.add_argument("--ransac-iters", type=int, default=2000)
    sub.add_argument("--ransac-tau", type=float, default=2.0)
    sub.add_argument("--ransac-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vprkit", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="subcommand", required=True)

    p = subs.add_parser("gen", help="generate a synthetic world")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--db-size", type=int, default=10)
    p.add_argument("--query-size", type=int, default=5)
    p.add_argument("--features", type=int, default=200)
    p.add_argument("--d-loc", type=int, default=1024)
    p.add_argument("--noise", type=float, default=0.0,
                   help="descriptor perturbation before renormalization")
    p.add_argument("--jitter", type=float, default=0.0,
                   help="position displacement radius in position units")
    p.add_argument("--outliers", type=float, default=0.0,
                   help="fraction of features replaced per query")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config")

    p = subs.add_parser("postprocess", help="dense maps to a sparse feature store")
    p.add_argument("--dense", required=True, help="VPRD input file")
    p.add_argument("--pca-in", help="existing VPRP model (otherwise fit here)")
    p.add_argument("--pca-out", help="where to store a freshly fit VPRP model")
    p.add_argument("--d", type=int, default=DEFAULT_PATCH_SIZE,
                   help="pooling window side length, odd (default 7)")
    p.add_argument("--d-loc", type=int, default=1024,
                   help="descriptor length after compression (default 1024)")
    p.add_argument("--max-features", type=int)
    p.add_argument("--out", required=True, help="VPRF output store")
    p.add_argument("--config")

    p = subs.add_parser("aggregate", help="fill the holistic descriptor slot")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hdc-seed", type=int, default=0)
    p.add_argument("--hdc-dim", type=int, default=DEFAULT_DIM)
    p.add_argument("--nx", type=int, default=DEFAULT_NX)
    p.add_argument("--ny", type=int, default=DEFAULT_NY)
    p.add_argument("--config")

    p = subs.add_parser("graphs", help="precompute the star-graph cache")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--h", type=float, default=DEFAULT_WINDOW)
    p.add_argument("--config")

    p = subs.add_parser("retrieve", help="run queries against a database store")
    p.add_argument("--db", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--graphs", help="VPRG cache (built on the fly if omitted)")
    p.add_argument("--topk", type=int, default=DEFAULT_TOP_K,
                   help="candidates re-ranked per query (default 100)")
    p.add_argument("--exhaustive", action="store_true",
                   help="skip candidate selection and score the whole database")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", required=True, help="results file (JSON lines)")
    _add_reranker_flags(p)
    p.add_argument("--config")

    p = subs.add_parser("evaluate", help="metrics from results and ground truth")
    p.add_argument("--results", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--ks", default="1,5,10,100",
                   help="comma-separated recall cutoffs (default 1,5,10,100)")
    p.add_argument("--pr-curve-out", help="optional gnuplot-style curve dump")
    p.add_argument("--out", required=True, help="metrics JSON output")
    p.add_argument("--config")

    p = subs.add_parser("sweep", help="AUC grid over sigma and window size")
    p.add_argument("--db", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--sigmas", default="0.5,1.0,2.0,3.0")
    p.add_argument("--hs", default="10,20,40,60,80")
    p.add_argument("--out", required=True,
                   help="grid output (.json embeds the manifest, else CSV)")
    p.add_argument("--config")

    p = subs.add_parser("bench", help="feature-comparison timing per reranker")
    p.add_argument("--db", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--topk", type=int, default=DEFAULT_TOP_K)
    p.add_argument("--rerankers", default="mm,lpg,ransac")
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1,
                   help="benchmark parallelism (default 1, recorded in the report)")
    p.add_argument("--out", required=True)
    _add_reranker_flags(p, with_choice=False)
    p.add_argument("--config")

    return parser


def _apply_config(args: argparse.Namespace) -> None:
    """A config JSON file overrides flag values (keys use flag spelling)."""
    if not getattr(args, "config", None):
        return
    with open(args.config) as fh:
        overrides = json.load(fh)
    if not isinstance(overrides, dict):
        raise DataError("config file must hold a JSON object")
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise DataError(f"config key {key!r} is not a flag of {args.subcommand}")
        setattr(args, attr, value)


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v != ""]
    except ValueError as exc:
        raise DataError(f"expected comma-separated numbers, got {text!r}") from exc


def _cmd_gen(args) -> None:
    cfg = WorldConfig(
        seed=args.seed,
        db_size=args.db_size,
        query_size=args.query_size,
        features_per_image=args.features,
        d_loc=args.d_loc,
        descriptor_noise=args.noise,
        position_jitter=args.jitter,
        outlier_fraction=args.outliers,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    db, queries, gt = gen_world(cfg)
    outputs = {
        "db": str(out_dir / "db.vprf"),
        "queries": str(out_dir / "queries.vprf"),
        "gt": str(out_dir / "gt.json"),
    }
    manifest = RunManifest(
        "gen", {}, dataclasses.asdict(cfg), outputs, parallelism=1
    )
    atomic_write(outputs["db"], lambda tmp: write_store(db, tmp))
    atomic_write(outputs["queries"], lambda tmp: write_store(queries, tmp))
    atomic_write(outputs["gt"], lambda tmp: gt.save(tmp))
    for key in outputs:
        _sidecar(Path(outputs[key]), manifest)


def _cmd_postprocess(args) -> None:
    items = read_dense_maps(args.dense)
    if args.pca_in:
        model = read_pca(args.pca_in)
    else:
        pooled = []
        for _, dense in items:
            kps = nms_detect(dense.attention, args.max_features)
            pooled.extend(vec for _, vec in extract_patch_descriptors(dense, kps, args.d))
        if len(pooled) < 2:
            raise DataError("not enough patches to fit a PCA model")
        samples = np.stack(pooled)
        d_out = min(args.d_loc, samples.shape[0] - 1, samples.shape[1])
        if d_out < args.d_loc:
            print(
                f"note: clamping descriptor length to {d_out} "
                f"({samples.shape[0]} patches available)",
                file=sys.stderr,
            )
        model = pca_fit(samples, d_out)
        # quantize like the on-disk model, so the store does not depend on
        # whether the model was freshly fit or reloaded from a VPRP file
        model = PCAModel(
            model.mean.astype(np.float32).astype(np.float64),
            model.components.astype(np.float32).astype(np.float64),
            model.variances,
        )
        if args.pca_out:
            atomic_write(args.pca_out, lambda tmp: write_pca(model, tmp))
    sets = [
        build_feature_set(image_id, dense, model, args.d, args.max_features)
        for image_id, dense in items
    ]
    manifest = RunManifest(
        "postprocess",
        {"dense": args.dense, "pca_in": args.pca_in},
        {"d": args.d, "d_loc": model.d_out, "max_features": args.max_features},
        {"out": args.out, "pca_out": args.pca_out},
        parallelism=1,
    )
    atomic_write(args.out, lambda tmp: write_store(sets, tmp))
    _sidecar(Path(args.out), manifest)
    if args.pca_out:
        _sidecar(Path(args.pca_out), manifest)


def _cmd_aggregate(args) -> None:
    sets = read_store(args.store)
    d_locs = {s.d_loc for s in sets if len(s) > 0}
    if not d_locs:
        raise DataError("store holds no features to aggregate")
    cb = hdc_init(args.hdc_seed, d_loc=d_locs.pop(), dim=args.hdc_dim,
                  n_x=args.nx, n_y=args.ny)
    out_sets = aggregate_store(cb, sets)
    manifest = RunManifest(
        "aggregate",
        {"store": args.store},
        {"hdc_seed": args.hdc_seed, "hdc_dim": args.hdc_dim,
         "nx": args.nx, "ny": args.ny},
        {"out": args.out},
        parallelism=1,
    )
    atomic_write(args.out, lambda tmp: write_store(out_sets, tmp))
    _sidecar(Path(args.out), manifest)


def _cmd_graphs(args) -> None:
    sets = read_store(args.store)
    graphs = [build_star_graphs(s, args.h) for s in sets]
    manifest = RunManifest(
        "graphs", {"store": args.store}, {"h": args.h}, {"out": args.out},
        parallelism=1,
    )
    atomic_write(args.out, lambda tmp: write_graphs(graphs, tmp))
    _sidecar(Path(args.out), manifest)


def _cmd_retrieve(args) -> None:
    db = read_store(args.db)
    queries = read_store(args.queries)
    choice = _reranker_from_args(args)
    graphs = None
    if args.graphs:
        graphs = read_graphs(args.graphs)
        if graphs and abs(graphs[0].h - args.h) > 1e-6:
            raise DataError(
                f"graph cache was built with h={graphs[0].h:g}, flags say {args.h:g}"
            )
    k_top = None if args.exhaustive else args.topk
    results = run_queries(queries, db, choice, k_top=k_top,
                          db_graphs=graphs, jobs=args.jobs)
    manifest = RunManifest(
        "retrieve",
        {"db": args.db, "queries": args.queries, "graphs": args.graphs},
        {**_reranker_params(args),
         "topk": None if args.exhaustive else args.topk,
         "exhaustive": args.exhaustive},
        {"out": args.out},
        parallelism=args.jobs,
    )
    atomic_write(
        args.out, lambda tmp: write_results(results, tmp, manifest.to_dict())
    )


def _cmd_evaluate(args) -> None:
    results, _ = read_results(args.results)
    gt = GroundTruth.load(args.gt)
    gt.validate(db_ids={e.db_id for r in results for e in r.entries})
    ks = [int(v) for v in _parse_floats(args.ks)]
    curve = pr_auc(results, gt)
    recall = recall_at_k(results, gt, ks)
    manifest = RunManifest(
        "evaluate",
        {"results": args.results, "gt": args.gt},
        {"ks": ks},
        {"out": args.out, "pr_curve_out": args.pr_curve_out},
        parallelism=1,
    )
    _write_text_atomic(
        Path(args.out), metrics_to_json(curve, recall, manifest.to_dict()) + "\n"
    )
    if args.pr_curve_out:
        _write_text_atomic(Path(args.pr_curve_out), curve.to_gnuplot())
        _sidecar(Path(args.pr_curve_out), manifest)


def _cmd_sweep(args) -> None:
    db = read_store(args.db)
    queries = read_store(args.queries)
    gt = GroundTruth.load(args.gt)
    sigmas = _parse_floats(args.sigmas)
    hs = _parse_floats(args.hs)
    grid = sweep_lpg(db, queries, gt, sigmas, hs)
    manifest = RunManifest(
        "sweep",
        {"db": args.db, "queries": args.queries, "gt": args.gt},
        {"sigmas": sigmas, "hs": hs},
        {"out": args.out},
        parallelism=1,
    )
    out = Path(args.out)
    if out.suffix == ".json":
        payload = {"manifest": manifest.to_dict(), **grid.to_json_obj()}
        _write_text_atomic(out, json.dumps(payload, indent=1) + "\n")
    else:
        _write_text_atomic(out, grid.to_csv())
        _sidecar(out, manifest)


def _cmd_bench(args) -> None:
    db = read_store(args.db)
    queries = read_store(args.queries)
    kinds = [k.strip() for k in args.rerankers.split(",") if k.strip()]
    base = argparse.Namespace(**vars(args))
    choices = []
    for kind in kinds:
        base.reranker = kind
        choices.append(_reranker_from_args(base))
    reports = bench_compare(db, queries, args.topk, choices,
                            repetitions=args.repetitions)
    manifest = RunManifest(
        "bench",
        {"db": args.db, "queries": args.queries},
        {"topk": args.topk, "rerankers": kinds, "repetitions": args.repetitions,
         "sigma": args.sigma, "h": args.h},
        {"out": args.out},
        parallelism=args.jobs,
    )
    payload = {
        "manifest": manifest.to_dict(),
        "reports": [r.to_json_obj() for r in reports],
    }
    _write_text_atomic(Path(args.out), json.dumps(payload, indent=1) + "\n")


_HANDLERS = {
    "gen": _cmd_gen,
    "postprocess": _cmd_postprocess,
    "aggregate": _cmd_aggregate,
    "graphs": _cmd_graphs,
    "retrieve": _cmd_retrieve,
    "evaluate": _cmd_evaluate,
    "sweep": _cmd_sweep,
    "bench": _cmd_bench,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        _apply_config(args)
        _HANDLERS[args.subcommand](args)
    except (VprError, OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"vprkit {args.subcommand}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
