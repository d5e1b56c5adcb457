"""Hierarchical visual place recognition with local-feature re-ranking."""

from .errors import (
    BadMagicError,
    DataError,
    InvalidStoreData,
    StoreError,
    TruncatedStoreError,
    VersionMismatchError,
    VprError,
)
from .evaluation import (
    PRCurve,
    RecallReport,
    SweepGrid,
    TimingReport,
    bench_compare,
    pr_auc,
    recall_at_k,
    sweep_lpg,
)
from .geometry import (
    FundamentalEstimate,
    RansacParams,
    ransac_fundamental,
    sampson_distance,
    score_ransac,
)
from .hdc import (
    HDCCodebook,
    aggregate_store,
    encode_position,
    encode_positions,
    hdc_aggregate,
    hdc_init,
    holistic_rank,
    holistic_topk,
)
from .lpg import (
    GaussianLUT,
    StarGraph,
    StarGraphSet,
    build_star_graphs,
    gaussian_weight,
    lpg_weights,
    read_graphs,
    score_lpg,
    write_graphs,
)
from .matching import MatchSet, cosine_matrix, match_features, mutual_matches, score_mm
from .model import (
    DenseFeatureMap,
    GroundTruth,
    ImageFeatureSet,
    LocalFeature,
    RankedEntry,
    RetrievalResult,
    read_results,
    read_store,
    write_results,
    write_store,
)
from .postproc import (
    Keypoint,
    PCAModel,
    build_feature_set,
    extract_patch_descriptors,
    global_descriptor,
    nms_detect,
    pca_apply,
    pca_fit,
    read_dense_maps,
    read_pca,
    softmax_normalize,
    write_dense_maps,
    write_pca,
)
from .retrieval import (
    PairScorer,
    RerankerChoice,
    exhaustive_query,
    hierarchical_query,
    run_queries,
)
from .synthetic import EpipolarPairs, WorldConfig, gen_epipolar_pairs, gen_world

__version__ = "0.1.0"
