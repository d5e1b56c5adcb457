"""Store format round-trips and the core container contracts."""

import io
import json
import struct

import numpy as np
import pytest

from vprkit import (
    BadMagicError,
    GroundTruth,
    ImageFeatureSet,
    InvalidStoreData,
    RankedEntry,
    RetrievalResult,
    TruncatedStoreError,
    VersionMismatchError,
    read_results,
    read_store,
    write_results,
    write_store,
)
from vprkit.errors import DataError
from vprkit.model import STAGE_RERANKED


def random_set(rng, image_id, n=3, d=4, holistic_dim=0):
    pos = rng.uniform(0, 100, (n, 2)).astype(np.float32).astype(np.float64)
    desc = rng.standard_normal((n, d)).astype(np.float32).astype(np.float64)
    hol = None
    if holistic_dim:
        hol = rng.standard_normal(holistic_dim).astype(np.float32).astype(np.float64)
    return ImageFeatureSet(image_id, pos, desc, hol)


class TestStoreFormat:
    def test_header_layout(self, tmp_path):
        rng = np.random.default_rng(0)
        sets = [random_set(rng, f"im{i}", n=3, d=4) for i in range(2)]
        path = tmp_path / "two.vprf"
        nbytes = write_store(sets, path)
        raw = path.read_bytes()
        assert nbytes == len(raw)
        assert raw[:4] == b"VPRF"
        version, count, d_loc, hol = struct.unpack("<IIII", raw[4:20])
        assert (version, count, d_loc, hol) == (1, 2, 4, 0)
        # payload per image: id header + feature_count + 3 rows of (2 + 4) f32
        expected = 20
        for s in sets:
            expected += 2 + len(s.image_id.encode()) + 4 + 3 * (2 + 4) * 4
        assert len(raw) == expected

    def test_empty_collection(self, tmp_path):
        path = tmp_path / "empty.vprf"
        write_store([], path)
        assert read_store(path) == []

    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        sets = []
        for i in range(100):
            n = int(rng.integers(0, 12))
            s = random_set(rng, f"image-{i:03d}", n=max(n, 0), d=8, holistic_dim=16)
            if n == 0:
                s = ImageFeatureSet(
                    s.image_id, np.zeros((0, 2)), np.zeros((0, 8)), s.holistic
                )
            sets.append(s)
        path = tmp_path / "rt.vprf"
        write_store(sets, path)
        back = read_store(path)
        assert len(back) == len(sets)
        for a, b in zip(sets, back):
            assert a.image_id == b.image_id
            np.testing.assert_array_equal(a.positions, b.positions)
            np.testing.assert_array_equal(a.descriptors, b.descriptors)
            np.testing.assert_array_equal(a.holistic, b.holistic)
        # byte-level: writing what was read reproduces the file exactly
        path2 = tmp_path / "rt2.vprf"
        write_store(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.vprf"
        rng = np.random.default_rng(1)
        write_store([random_set(rng, "a")], path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            read_store(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v9.vprf"
        rng = np.random.default_rng(1)
        write_store([random_set(rng, "a")], path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 9)
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError):
            read_store(path)

    def test_truncation_at_random_offsets(self, tmp_path):
        rng = np.random.default_rng(3)
        path = tmp_path / "full.vprf"
        write_store([random_set(rng, f"i{i}", n=5, d=6) for i in range(4)], path)
        raw = path.read_bytes()
        cut = tmp_path / "cut.vprf"
        for offset in rng.integers(4, len(raw) - 1, size=12):
            cut.write_bytes(raw[: int(offset)])
            with pytest.raises(TruncatedStoreError):
                read_store(cut)

    def test_heterogeneous_d_loc_rejected(self, tmp_path):
        rng = np.random.default_rng(4)
        sets = [random_set(rng, "a", d=4), random_set(rng, "b", d=5)]
        with pytest.raises(InvalidStoreData):
            write_store(sets, tmp_path / "x.vprf")

    def test_position_out_of_range_rejected(self, tmp_path):
        s = ImageFeatureSet("a", [[0.0, 100.0]], [[1.0, 0.0]])
        with pytest.raises(InvalidStoreData):
            write_store([s], tmp_path / "x.vprf")
        s = ImageFeatureSet("a", [[-0.1, 5.0]], [[1.0, 0.0]])
        with pytest.raises(InvalidStoreData):
            write_store([s], tmp_path / "x.vprf")

    def test_mixed_holistic_rejected(self, tmp_path):
        rng = np.random.default_rng(5)
        sets = [random_set(rng, "a", holistic_dim=8), random_set(rng, "b")]
        with pytest.raises(InvalidStoreData):
            write_store(sets, tmp_path / "x.vprf")

    def test_unicode_ids_survive(self, tmp_path):
        rng = np.random.default_rng(6)
        s = random_set(rng, "night/ieee-café_01.png")
        path = tmp_path / "uni.vprf"
        write_store([s], path)
        assert read_store(path)[0].image_id == "night/ieee-café_01.png"


class TestContainers:
    def test_feature_accessors(self):
        s = ImageFeatureSet("a", [[1.0, 2.0], [3.0, 4.0]], [[1, 0], [0, 1]])
        assert len(s) == 2 and s.d_loc == 2
        f = s.feature(1)
        assert f.pos == (3.0, 4.0)
        np.testing.assert_array_equal(f.desc, [0, 1])

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            ImageFeatureSet("a", [[1.0, 2.0, 3.0]], [[1.0]])
        with pytest.raises(ValueError):
            ImageFeatureSet("a", [[1.0, 2.0]], np.zeros((2, 3)))

    def test_ground_truth_json_round_trip(self, tmp_path):
        gt = GroundTruth.from_mapping({"q1": ["a", "b"], "q2": ["c"]})
        path = tmp_path / "gt.json"
        gt.save(path)
        assert json.loads(path.read_text()) == {"q1": ["a", "b"], "q2": ["c"]}
        assert GroundTruth.load(path) == gt

    def test_ground_truth_validation(self):
        gt = GroundTruth.from_mapping({"q1": ["a", "z"]})
        with pytest.raises(DataError):
            gt.validate(db_ids=["a", "b"])
        gt2 = GroundTruth.from_mapping({"q1": ["a"]})
        gt2.validate(db_ids=["a"], query_ids=["q1"])
        with pytest.raises(DataError):
            gt2.validate(db_ids=["a"], query_ids=["other"])

    def test_result_validation(self):
        r = RetrievalResult(
            "q",
            [
                RankedEntry("a", 0.9, STAGE_RERANKED),
                RankedEntry("b", 0.5, STAGE_RERANKED),
            ],
        )
        r.validate()
        bad = RetrievalResult(
            "q",
            [
                RankedEntry("a", 0.1, STAGE_RERANKED),
                RankedEntry("b", 0.5, STAGE_RERANKED),
            ],
        )
        with pytest.raises(DataError):
            bad.validate()
        dup = RetrievalResult(
            "q",
            [
                RankedEntry("a", 0.9, STAGE_RERANKED),
                RankedEntry("a", 0.5, STAGE_RERANKED),
            ],
        )
        with pytest.raises(DataError):
            dup.validate()

    def test_results_jsonl_round_trip(self, tmp_path):
        results = [
            RetrievalResult("q1", [RankedEntry("a", 0.75, "reranked")]),
            RetrievalResult("q2", [RankedEntry("b", 0.25, "holistic")]),
        ]
        path = tmp_path / "res.jsonl"
        write_results(results, path, manifest={"subcommand": "retrieve"})
        back, manifest = read_results(path)
        assert manifest == {"subcommand": "retrieve"}
        assert back == results
