"""Feature post-processing: softmax, NMS, patch pooling, PCA."""

import numpy as np
import pytest

from vprkit import (
    DenseFeatureMap,
    Keypoint,
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
from vprkit.errors import DataError

from oracles import naive_nms


class TestSoftmax:
    def test_uniform_map(self):
        out = softmax_normalize(np.zeros((2, 2)))
        np.testing.assert_allclose(out, 0.25)

    def test_closed_form(self):
        out = softmax_normalize(np.array([[np.log(2.0), 0.0]]))
        np.testing.assert_allclose(out, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-12)

    def test_sum_and_order(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((4, 6)) * 10
        s = softmax_normalize(a)
        assert abs(s.sum() - 1.0) <= 1e-9
        assert (s > 0).all()
        assert np.unravel_index(s.argmax(), s.shape) == np.unravel_index(
            a.argmax(), a.shape
        )
        # order preserved on the flattened maps
        assert (np.argsort(s.ravel()) == np.argsort(a.ravel())).all()

    def test_large_values_stable(self):
        s = softmax_normalize(np.array([[1000.0, 1000.0]]))
        np.testing.assert_allclose(s, 0.5)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            softmax_normalize(np.zeros((0, 3)))


class TestGlobalDescriptor:
    def test_uniform_weights_give_mean(self):
        rng = np.random.default_rng(1)
        dense = DenseFeatureMap(rng.standard_normal((3, 4, 5)), np.zeros((3, 4)))
        s = np.full((3, 4), 1.0 / 12.0)
        np.testing.assert_allclose(
            global_descriptor(dense, s), dense.values.mean(axis=(0, 1)), atol=1e-12
        )

    def test_one_hot_selects_cell(self):
        rng = np.random.default_rng(2)
        dense = DenseFeatureMap(rng.standard_normal((3, 4, 5)), np.zeros((3, 4)))
        s = np.zeros((3, 4))
        s[1, 2] = 1.0
        np.testing.assert_allclose(
            global_descriptor(dense, s), dense.values[1, 2], atol=1e-15
        )

    def test_matches_double_loop(self):
        rng = np.random.default_rng(3)
        dense = DenseFeatureMap(rng.standard_normal((5, 6, 3)), np.zeros((5, 6)))
        s = softmax_normalize(rng.standard_normal((5, 6)))
        ref = np.zeros(3)
        for y in range(5):
            for x in range(6):
                ref += s[y, x] * dense.values[y, x]
        np.testing.assert_allclose(global_descriptor(dense, s), ref, atol=1e-9)

    def test_shape_mismatch(self):
        dense = DenseFeatureMap(np.zeros((3, 4, 5)), np.zeros((3, 4)))
        with pytest.raises(DataError):
            global_descriptor(dense, np.zeros((4, 3)))


class TestNms:
    def test_single_peak(self):
        a = np.zeros((5, 5))
        a[2, 3] = 1.0
        assert nms_detect(a) == [Keypoint(2, 3, 1.0)]

    def test_constant_map_empty(self):
        assert nms_detect(np.ones((4, 4))) == []

    def test_two_peaks_ordered_by_value(self):
        a = np.zeros((5, 5))
        a[1, 1] = 0.5
        a[3, 3] = 0.9
        assert nms_detect(a) == [Keypoint(3, 3, 0.9), Keypoint(1, 1, 0.5)]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            h, w = rng.integers(1, 12, 2)
            a = rng.standard_normal((h, w))
            if rng.random() < 0.3:  # inject plateaus
                a = np.round(a)
            got = [(kp.y, kp.x, kp.attention) for kp in nms_detect(a)]
            assert got == naive_nms(a)

    def test_max_features_truncates(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((20, 20))
        full = nms_detect(a)
        assert nms_detect(a, max_features=3) == full[:3]


class TestPatches:
    def test_center_patch_shape(self):
        rng = np.random.default_rng(6)
        dense = DenseFeatureMap(rng.standard_normal((14, 14, 8)), np.zeros((14, 14)))
        out = extract_patch_descriptors(dense, [Keypoint(7, 7, 1.0)], d=7)
        assert len(out) == 1
        assert out[0][1].shape == (7 * 7 * 8,)

    def test_border_keypoint_discarded(self):
        dense = DenseFeatureMap(np.zeros((14, 14, 2)), np.zeros((14, 14)))
        assert extract_patch_descriptors(dense, [Keypoint(2, 7, 1.0)], d=7) == []
        assert extract_patch_descriptors(dense, [Keypoint(7, 11, 1.0)], d=7) == []

    def test_flattening_matches_indexing(self):
        H, W, C, d = 9, 10, 3, 5
        values = np.arange(H * W * C, dtype=np.float64).reshape(H, W, C)
        dense = DenseFeatureMap(values, np.zeros((H, W)))
        [(kp, vec)] = extract_patch_descriptors(dense, [Keypoint(4, 5, 1.0)], d=d)
        r = d // 2
        k = 0
        for y in range(4 - r, 4 + r + 1):
            for x in range(5 - r, 5 + r + 1):
                for c in range(C):
                    assert vec[k] == values[y, x, c]
                    k += 1

    def test_even_d_rejected(self):
        dense = DenseFeatureMap(np.zeros((8, 8, 1)), np.zeros((8, 8)))
        with pytest.raises(DataError):
            extract_patch_descriptors(dense, [], d=4)


class TestPca:
    def test_exact_subspace_recovery(self):
        rng = np.random.default_rng(7)
        basis = np.linalg.qr(rng.standard_normal((5, 2)))[0].T  # (2, 5) orthonormal
        coeffs = rng.standard_normal((40, 2)) * [3.0, 1.5]
        offset = rng.standard_normal(5)
        X = coeffs @ basis + offset
        model = pca_fit(X, 2)
        proj = (X - model.mean) @ model.components.T
        recon = proj @ model.components + model.mean
        assert np.abs(recon - X).max() <= 1e-9

    def test_mean_maps_to_zero_with_flag(self):
        rng = np.random.default_rng(8)
        X = rng.standard_normal((20, 6))
        model = pca_fit(X, 3)
        y, zero = pca_apply(model, model.mean[None, :])
        np.testing.assert_allclose(y, 0.0)
        assert zero.tolist() == [True]

    def test_full_rank_rotation_preserves_distances(self):
        rng = np.random.default_rng(9)
        X = rng.standard_normal((30, 4))
        model = pca_fit(X, 4)
        proj = (X - model.mean) @ model.components.T
        d_orig = np.linalg.norm(X[:, None] - X[None, :], axis=-1)
        d_proj = np.linalg.norm(proj[:, None] - proj[None, :], axis=-1)
        assert np.abs(d_orig - d_proj).max() <= 1e-6

    def test_orthonormal_components_and_variance_order(self):
        rng = np.random.default_rng(10)
        X = rng.standard_normal((50, 8)) * np.linspace(5, 0.5, 8)
        model = pca_fit(X, 5)
        gram = model.components @ model.components.T
        assert np.abs(gram - np.eye(5)).max() <= 1e-6
        assert (np.diff(model.variances) <= 1e-12).all()

    def test_sign_convention_deterministic(self):
        rng = np.random.default_rng(11)
        X = rng.standard_normal((25, 6))
        m1 = pca_fit(X, 4)
        m2 = pca_fit(X.copy(), 4)
        np.testing.assert_array_equal(m1.components, m2.components)
        peaks = np.abs(m1.components).argmax(axis=1)
        assert (m1.components[np.arange(4), peaks] > 0).all()

    def test_d_out_bound(self):
        rng = np.random.default_rng(12)
        with pytest.raises(DataError):
            pca_fit(rng.standard_normal((5, 8)), 5)  # d_out > n-1
        with pytest.raises(DataError):
            pca_fit(rng.standard_normal((20, 4)), 5)  # d_out > d_in

    def test_apply_normalizes_and_batches(self):
        rng = np.random.default_rng(13)
        X = rng.standard_normal((30, 6))
        model = pca_fit(X, 3)
        batch, zero = pca_apply(model, X)
        assert not zero.any()
        np.testing.assert_allclose(np.linalg.norm(batch, axis=1), 1.0, atol=1e-6)
        for i in range(len(X)):
            single, _ = pca_apply(model, X[i : i + 1])
            np.testing.assert_allclose(single[0], batch[i], atol=1e-12)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(14)
        model = pca_fit(rng.standard_normal((10, 4)), 2)
        with pytest.raises(DataError):
            pca_apply(model, np.zeros((1, 5)))


class TestBuildFeatureSet:
    @staticmethod
    def _dense_with_peaks(rng, peaks, H=20, W=20, C=3):
        # flat base: plateaus are suppressed, so only the planted peaks remain
        attention = np.zeros((H, W))
        for y, x in peaks:
            attention[y, x] = 1.0 + rng.random()
        return DenseFeatureMap(rng.standard_normal((H, W, C)), attention)

    def test_three_isolated_peaks(self):
        rng = np.random.default_rng(15)
        dense = self._dense_with_peaks(rng, [(5, 5), (10, 14), (15, 4)])
        model = pca_fit(rng.standard_normal((40, 7 * 7 * 3)), 8)
        feats = build_feature_set("img", dense, model)
        assert len(feats) == 3
        np.testing.assert_allclose(
            np.linalg.norm(feats.descriptors, axis=1), 1.0, atol=1e-6
        )
        assert (feats.positions >= 0).all() and (feats.positions < 100).all()

    def test_no_peaks_gives_empty_set(self):
        rng = np.random.default_rng(16)
        dense = DenseFeatureMap(rng.standard_normal((10, 10, 2)), np.ones((10, 10)))
        model = pca_fit(rng.standard_normal((40, 7 * 7 * 2)), 4)
        feats = build_feature_set("img", dense, model)
        assert len(feats) == 0
        assert feats.image_id == "img"

    def test_position_mapping(self):
        rng = np.random.default_rng(17)
        H = W = 100
        attention = np.zeros((H, W))
        attention[50, 49] = 1.0
        dense = DenseFeatureMap(rng.standard_normal((H, W, 1)), attention)
        model = pca_fit(rng.standard_normal((60, 49)), 4)
        feats = build_feature_set("img", dense, model)
        assert len(feats) == 1
        assert feats.positions[0, 0] == pytest.approx(49.5)
        assert feats.positions[0, 1] == pytest.approx(50.5)

    def test_pca_dimension_check(self):
        rng = np.random.default_rng(18)
        dense = DenseFeatureMap(rng.standard_normal((10, 10, 2)), np.zeros((10, 10)))
        model = pca_fit(rng.standard_normal((40, 10)), 4)
        with pytest.raises(DataError):
            build_feature_set("img", dense, model)


class TestDenseAndPcaFiles:
    def test_dense_round_trip(self, tmp_path):
        rng = np.random.default_rng(19)
        items = []
        for i in range(3):
            H, W, C = rng.integers(2, 7, 3)
            values = rng.standard_normal((H, W, C)).astype(np.float32)
            attention = rng.standard_normal((H, W)).astype(np.float32)
            items.append((f"img{i}", DenseFeatureMap(values, attention)))
        path = tmp_path / "maps.vprd"
        write_dense_maps(items, path)
        assert path.read_bytes()[:4] == b"VPRD"
        back = read_dense_maps(path)
        for (id_a, a), (id_b, b) in zip(items, back):
            assert id_a == id_b
            np.testing.assert_array_equal(a.values.astype(np.float64), b.values)
            np.testing.assert_array_equal(a.attention.astype(np.float64), b.attention)

    def test_pca_round_trip(self, tmp_path):
        rng = np.random.default_rng(20)
        model = pca_fit(rng.standard_normal((30, 6)).astype(np.float32), 3)
        path = tmp_path / "model.vprp"
        write_pca(model, path)
        assert path.read_bytes()[:4] == b"VPRP"
        back = read_pca(path)
        np.testing.assert_allclose(back.mean, model.mean, atol=1e-6)
        np.testing.assert_allclose(back.components, model.components, atol=1e-6)
        assert back.d_in == 6 and back.d_out == 3
