import json
import struct

import numpy as np
import pytest

from hrrs.tensor_store import (
    ManifestError,
    TensorFormatError,
    gen_synthetic,
    load_manifest,
    read_tensor,
    write_synthetic,
    write_tensor,
)


class TestTensorRoundTrip:
    def test_round_trip_bit_exact(self, tmp_path):
        arr = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        path = tmp_path / "t.ftns"
        write_tensor(path, arr)
        back = read_tensor(path)
        assert back.shape == (2, 2)
        assert back.tobytes() == arr.tobytes()

    def test_round_trip_random_shapes(self, tmp_path):
        rng = np.random.default_rng(7)
        for shape in [(5,), (3, 4), (2, 3, 4), (1, 1, 1, 6)]:
            arr = rng.standard_normal(shape).astype(np.float32)
            path = tmp_path / "t.ftns"
            write_tensor(path, arr)
            back = read_tensor(path)
            assert back.shape == shape
            assert back.tobytes() == arr.tobytes()

    def test_header_and_payload_byte_count(self, tmp_path):
        # fixed header 16 bytes, one u64 per dim, then 4 bytes per value
        path = tmp_path / "t.ftns"
        write_tensor(path, np.zeros((2, 2), dtype=np.float32))
        assert path.stat().st_size == 16 + 2 * 8 + 16

    def test_conv5_map_payload_size(self, tmp_path):
        # 6*6*512 float32 values -> 73728 payload bytes
        arr = np.zeros((6, 6, 512), dtype=np.float32)
        path = tmp_path / "big.ftns"
        write_tensor(path, arr)
        expected_payload = 6 * 6 * 512 * 4
        assert expected_payload == 73728
        assert path.stat().st_size == 16 + 3 * 8 + expected_payload

    def test_loaded_tensor_is_read_only(self, tmp_path):
        path = tmp_path / "t.ftns"
        write_tensor(path, np.ones(3, dtype=np.float32))
        back = read_tensor(path)
        with pytest.raises(ValueError):
            back[0] = 2.0


class TestTensorValidation:
    def test_empty_dimension_rejected(self, tmp_path):
        with pytest.raises(TensorFormatError, match="empty dimension"):
            write_tensor(tmp_path / "t.ftns", np.zeros((0,), dtype=np.float32))

    def test_rank_zero_rejected(self, tmp_path):
        with pytest.raises(TensorFormatError, match="rank"):
            write_tensor(tmp_path / "t.ftns", np.float32(1.0))

    def test_non_finite_rejected_on_write(self, tmp_path):
        with pytest.raises(TensorFormatError, match="non-finite"):
            write_tensor(tmp_path / "t.ftns", np.array([1.0, np.nan]))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.ftns"
        write_tensor(path, np.ones(2, dtype=np.float32))
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(TensorFormatError, match="magic"):
            read_tensor(path)

    def test_unknown_version(self, tmp_path):
        path = tmp_path / "t.ftns"
        write_tensor(path, np.ones(2, dtype=np.float32))
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 9)
        path.write_bytes(bytes(blob))
        with pytest.raises(TensorFormatError, match="version"):
            read_tensor(path)

    def test_unknown_dtype(self, tmp_path):
        path = tmp_path / "t.ftns"
        write_tensor(path, np.ones(2, dtype=np.float32))
        blob = bytearray(path.read_bytes())
        blob[8:12] = struct.pack("<I", 7)
        path.write_bytes(bytes(blob))
        with pytest.raises(TensorFormatError, match="dtype"):
            read_tensor(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.ftns"
        write_tensor(path, np.ones(4, dtype=np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[:-1])
        with pytest.raises(TensorFormatError, match="length mismatch"):
            read_tensor(path)

    def test_non_finite_payload_rejected_on_read(self, tmp_path):
        path = tmp_path / "t.ftns"
        write_tensor(path, np.ones(2, dtype=np.float32))
        blob = bytearray(path.read_bytes())
        blob[-8:] = struct.pack("<ff", np.inf, 1.0)
        path.write_bytes(bytes(blob))
        with pytest.raises(TensorFormatError, match="non-finite"):
            read_tensor(path)


def _write_manifest(path, entries):
    path.write_text(json.dumps({"entries": entries}))


class TestManifest:
    def test_ucmd_shaped_manifest(self, tmp_path):
        entries = [
            {"id": f"c{c:02d}-{i:03d}", "class": f"class{c:02d}", "path": "x.ftns", "split": "all"}
            for c in range(21)
            for i in range(100)
        ]
        path = tmp_path / "manifest.json"
        _write_manifest(path, entries)
        manifest = load_manifest(path)
        assert len(manifest.entries) == 2100
        assert manifest.n_classes == 21

    def test_singleton(self, tmp_path):
        path = tmp_path / "m.json"
        _write_manifest(path, [{"id": "a", "class": "only", "path": "a.ftns", "split": "train"}])
        manifest = load_manifest(path)
        assert manifest.n_classes == 1
        assert manifest.class_index == {"only": 0}

    def test_duplicate_id(self, tmp_path):
        path = tmp_path / "m.json"
        _write_manifest(
            path,
            [
                {"id": "a", "class": "x", "path": "a.ftns", "split": "all"},
                {"id": "a", "class": "y", "path": "b.ftns", "split": "all"},
            ],
        )
        with pytest.raises(ManifestError, match="duplicate id"):
            load_manifest(path)

    def test_unknown_split(self, tmp_path):
        path = tmp_path / "m.json"
        _write_manifest(path, [{"id": "a", "class": "x", "path": "a.ftns", "split": "dev"}])
        with pytest.raises(ManifestError, match="split"):
            load_manifest(path)

    def test_empty_class_label(self, tmp_path):
        path = tmp_path / "m.json"
        _write_manifest(path, [{"id": "a", "class": "", "path": "a.ftns", "split": "all"}])
        with pytest.raises(ManifestError, match="empty class"):
            load_manifest(path)

    def test_class_index_lexicographic_and_order_invariant(self, tmp_path):
        entries = [
            {"id": "1", "class": "zebra", "path": "a.ftns", "split": "all"},
            {"id": "2", "class": "apple", "path": "b.ftns", "split": "all"},
            {"id": "3", "class": "mango", "path": "c.ftns", "split": "all"},
        ]
        p1, p2 = tmp_path / "m1.json", tmp_path / "m2.json"
        _write_manifest(p1, entries)
        _write_manifest(p2, entries[::-1])
        m1, m2 = load_manifest(p1), load_manifest(p2)
        assert m1.class_index == {"apple": 0, "mango": 1, "zebra": 2}
        assert m1.class_index == m2.class_index

    def test_tensor_paths_resolve_relative_to_manifest_dir(self, tmp_path):
        sub = tmp_path / "data"
        sub.mkdir()
        path = sub / "m.json"
        _write_manifest(path, [{"id": "a", "class": "x", "path": "maps/a.ftns", "split": "all"}])
        manifest = load_manifest(path)
        assert manifest.entries[0].tensor_path == sub / "maps" / "a.ftns"

    def test_split_selection(self, tmp_path):
        path = tmp_path / "m.json"
        _write_manifest(
            path,
            [
                {"id": "a", "class": "x", "path": "a.ftns", "split": "train"},
                {"id": "b", "class": "x", "path": "b.ftns", "split": "test"},
                {"id": "c", "class": "x", "path": "c.ftns", "split": "all"},
            ],
        )
        manifest = load_manifest(path)
        assert [e.image_id for e in manifest.select("train")] == ["a", "c"]
        assert [e.image_id for e in manifest.select("test")] == ["b", "c"]
        assert len(manifest.select("all")) == 3


class TestGenSynthetic:
    def test_deterministic(self):
        m1, maps1 = gen_synthetic(2, 3, (2, 2, 4), 5.0, seed=11)
        m2, maps2 = gen_synthetic(2, 3, (2, 2, 4), 5.0, seed=11)
        assert m1.entries == m2.entries
        for image_id in maps1:
            assert maps1[image_id].tobytes() == maps2[image_id].tobytes()

    def test_different_seed_differs(self):
        _, maps1 = gen_synthetic(2, 3, (2, 2, 4), 5.0, seed=11)
        _, maps2 = gen_synthetic(2, 3, (2, 2, 4), 5.0, seed=12)
        assert maps1["class00-000"].tobytes() != maps2["class00-000"].tobytes()

    def test_zero_separation_classes_statistically_identical(self):
        _, maps = gen_synthetic(3, 200, (4, 4, 6), 0.0, seed=3)
        for j in range(3):
            stack = np.stack([maps[f"class{j:02d}-{i:03d}"] for i in range(200)])
            # With zero separation every map is pure unit noise.
            assert abs(stack.mean()) < 0.05
            assert abs(stack.std() - 1.0) < 0.05

    def test_channel_mean_separation(self):
        classes, per_class = 3, 200
        sep = 6.0
        _, maps = gen_synthetic(classes, per_class, (4, 4, 8), sep, seed=5)
        means = [
            np.stack(
                [maps[f"class{j:02d}-{i:03d}"].astype(np.float64) for i in range(per_class)]
            ).mean(axis=(0, 1, 2))
            for j in range(classes)
        ]
        for a in range(classes):
            for b in range(a + 1, classes):
                dist = np.linalg.norm(means[a] - means[b])
                assert abs(dist - sep) < 0.2

    def test_split_fractions(self):
        manifest, _ = gen_synthetic(2, 20, (2, 2, 4), 1.0, seed=0)
        for label in ("class00", "class01"):
            train = [e for e in manifest.entries if e.class_label == label and e.split == "train"]
            test = [e for e in manifest.entries if e.class_label == label and e.split == "test"]
            assert len(train) == 16
            assert len(test) == 4

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            gen_synthetic(0, 5, (2, 2, 4), 1.0, seed=0)
        with pytest.raises(ValueError):
            gen_synthetic(2, 0, (2, 2, 4), 1.0, seed=0)
        with pytest.raises(ValueError):
            gen_synthetic(5, 2, (2, 2, 4), 1.0, seed=0)  # more classes than channels
        with pytest.raises(ValueError):
            gen_synthetic(2, 2, (2, 2, 4), -1.0, seed=0)

    def test_write_and_reload(self, tmp_path):
        manifest, maps = gen_synthetic(2, 4, (2, 2, 4), 3.0, seed=9)
        manifest_path = write_synthetic(tmp_path / "ds", manifest, maps)
        loaded = load_manifest(manifest_path)
        assert loaded.ids() == manifest.ids()
        arr = read_tensor(loaded.entries[0].tensor_path)
        assert arr.tobytes() == maps[loaded.entries[0].image_id].tobytes()
