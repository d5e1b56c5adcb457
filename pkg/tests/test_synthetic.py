"""World generator: planted correspondences, perturbation models, determinism."""

import math

import numpy as np
import pytest

from vprkit import (
    ImageFeatureSet,
    WorldConfig,
    build_star_graphs,
    gen_world,
    lpg_weights,
    match_features,
    read_store,
    score_lpg,
    score_mm,
    write_store,
)
from vprkit.errors import DataError


class TestGenWorld:
    def test_zero_perturbation_exact_copies(self):
        cfg = WorldConfig(seed=1, db_size=6, query_size=4, features_per_image=15, d_loc=8)
        db, queries, gt = gen_world(cfg)
        assert len(db) == 6 and len(queries) == 4
        for j, q in enumerate(queries):
            src = db[j % 6]
            assert gt.positives_for(q.image_id) == {src.image_id}
            np.testing.assert_array_equal(q.positions, src.positions)
            np.testing.assert_array_equal(q.descriptors, src.descriptors)
            assert score_mm(src, q) == pytest.approx(1.0, abs=1e-9)
            graphs = build_star_graphs(src, h=60.0)
            assert score_lpg(graphs, src, q) == pytest.approx(1.0, abs=1e-9)

    def test_deterministic_per_seed(self, tmp_path):
        cfg = WorldConfig(
            seed=9,
            db_size=4,
            query_size=3,
            features_per_image=10,
            d_loc=6,
            descriptor_noise=0.2,
            position_jitter=0.7,
            outlier_fraction=0.2,
        )
        db1, q1, gt1 = gen_world(cfg)
        db2, q2, gt2 = gen_world(cfg)
        write_store(db1 + q1, tmp_path / "a.vprf")
        write_store(db2 + q2, tmp_path / "b.vprf")
        assert (tmp_path / "a.vprf").read_bytes() == (tmp_path / "b.vprf").read_bytes()
        assert gt1 == gt2

    def test_positions_in_range_and_unit_descriptors(self):
        cfg = WorldConfig(
            seed=3,
            db_size=3,
            query_size=6,
            features_per_image=50,
            d_loc=12,
            descriptor_noise=0.5,
            position_jitter=3.0,
            outlier_fraction=0.3,
        )
        db, queries, _ = gen_world(cfg)
        for s in db + queries:
            assert s.positions.min() >= 0.0 and s.positions.max() < 100.0
            np.testing.assert_allclose(
                np.linalg.norm(s.descriptors, axis=1), 1.0, atol=1e-6
            )

    def test_store_round_trip_exact(self, tmp_path):
        cfg = WorldConfig(seed=4, db_size=3, query_size=2, features_per_image=8, d_loc=4)
        db, queries, _ = gen_world(cfg)
        write_store(db, tmp_path / "db.vprf")
        back = read_store(tmp_path / "db.vprf")
        for a, b in zip(db, back):
            np.testing.assert_array_equal(a.positions, b.positions)
            np.testing.assert_array_equal(
                a.descriptors.astype(np.float64), b.descriptors
            )

    def test_jitter_weights_respect_analytic_bound(self):
        # fixed-radius jitter of 0.5 units: the mean Gaussian displacement
        # score stays below 1 but above the Jensen bound exp(-r^2 / sigma^2)
        jitter, sigma = 0.5, 1.0
        cfg = WorldConfig(
            seed=5,
            db_size=4,
            query_size=40,
            features_per_image=60,
            d_loc=16,
            position_jitter=jitter,
        )
        db, queries, gt = gen_world(cfg)
        weights = []
        for j, q in enumerate(queries):
            src = db[j % 4]
            graphs = build_star_graphs(src, h=60.0)
            matches = match_features(src, q)
            w = lpg_weights(graphs, src, q, matches, sigma=sigma)
            weights.extend(w.values())
        mean_w = float(np.mean(weights))
        bound = math.exp(-(2 * jitter**2) / (2 * sigma**2))
        assert bound < mean_w < 1.0

    def test_outliers_break_self_similarity(self):
        cfg = WorldConfig(
            seed=6, db_size=2, query_size=2, features_per_image=40,
            d_loc=16, outlier_fraction=0.5,
        )
        db, queries, _ = gen_world(cfg)
        s = score_mm(db[0], queries[0])
        assert 0.3 < s < 0.9  # half the features were replaced

    def test_config_validation(self):
        with pytest.raises(DataError):
            WorldConfig(db_size=0)
        with pytest.raises(DataError):
            WorldConfig(descriptor_noise=-0.1)
        with pytest.raises(DataError):
            WorldConfig(outlier_fraction=1.5)
