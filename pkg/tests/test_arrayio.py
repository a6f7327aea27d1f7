"""Array interchange format and manifest validation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infocam.arrayio import (
    BadMagicError,
    ManifestError,
    NonFiniteDataError,
    TruncatedPayloadError,
    UnsupportedFormatError,
    load_manifest,
    peek_shape,
    read_array,
    save_manifest,
    write_array,
)


class TestRoundTrip:
    def test_known_values(self, tmp_path):
        p = tmp_path / "a.npy"
        write_array(p, np.array([[1.0, 2.0], [3.0, 4.0]]))
        a = read_array(p)
        assert a.shape == (2, 2)
        assert a.tolist() == [[1.0, 2.0], [3.0, 4.0]]

    def test_empty_array(self, tmp_path):
        p = tmp_path / "e.npy"
        write_array(p, np.zeros((0,)))
        a = read_array(p)
        assert a.shape == (0,)
        assert a.size == 0

    def test_f64_bitwise(self, tmp_path):
        rng = np.random.default_rng(42)
        original = rng.normal(size=1000)
        p = tmp_path / "r.npy"
        write_array(p, original, dtype="f8")
        back = read_array(p)
        assert back.tobytes() == original.tobytes()

    def test_f32_within_one_ulp(self, tmp_path):
        rng = np.random.default_rng(7)
        original = rng.normal(size=500) * 10.0
        p = tmp_path / "n.npy"
        write_array(p, original, dtype="f4")
        back = read_array(p)
        # Narrowing is round-to-nearest-even, identical to a float32 cast.
        assert np.array_equal(back, original.astype(np.float32).astype(np.float64))
        ulp = np.abs(np.spacing(original.astype(np.float32))).astype(np.float64)
        assert np.all(np.abs(back - original) <= ulp)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False,
                              width=64, min_value=-1e300, max_value=1e300),
                    min_size=0, max_size=64))
    def test_roundtrip_property(self, tmp_path_factory, values):
        p = tmp_path_factory.mktemp("rt") / "x.npy"
        a = np.asarray(values, dtype=np.float64)
        write_array(p, a, dtype="f8")
        assert read_array(p).tobytes() == a.tobytes()

    def test_payload_sizes(self, tmp_path):
        p64 = tmp_path / "one64.npy"
        p32 = tmp_path / "one32.npy"
        write_array(p64, np.array([1.0]), dtype="f8")
        write_array(p32, np.array([1.0]), dtype="f4")
        # header block is padded to a multiple of 64 bytes
        assert p64.stat().st_size % 64 == 8
        assert p32.stat().st_size % 64 == 4


class TestNumpyInterop:
    """numpy's own reader/writer is the independent oracle for the format."""

    def test_numpy_reads_ours(self, tmp_path):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(4, 5))
        p = tmp_path / "ours.npy"
        write_array(p, a)
        assert np.array_equal(np.load(p), a)

    def test_we_read_numpys(self, tmp_path):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(3, 2, 2)).astype(np.float32)
        p = tmp_path / "theirs.npy"
        np.save(p, a)
        back = read_array(p)
        assert back.dtype == np.float64
        assert np.array_equal(back, a.astype(np.float64))

    def test_peek_shape(self, tmp_path):
        p = tmp_path / "s.npy"
        write_array(p, np.zeros((2, 7, 3)))
        assert peek_shape(p) == (2, 7, 3)


class TestErrorTaxonomy:
    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.npy"
        p.write_bytes(b"NOTNPY\x01\x00" + b"\x00" * 64)
        with pytest.raises(BadMagicError):
            read_array(p)

    def test_unsupported_version(self, tmp_path):
        p = tmp_path / "v2.npy"
        write_array(p, np.array([1.0]))
        raw = bytearray(p.read_bytes())
        raw[6:8] = b"\x02\x00"
        p.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedFormatError):
            read_array(p)

    def test_unsupported_dtype(self, tmp_path):
        p = tmp_path / "i8.npy"
        np.save(p, np.array([1, 2, 3], dtype=np.int64))
        with pytest.raises(UnsupportedFormatError):
            read_array(p)

    def test_fortran_order_rejected(self, tmp_path):
        p = tmp_path / "f.npy"
        np.save(p, np.asfortranarray(np.ones((3, 4))))
        with pytest.raises(UnsupportedFormatError):
            read_array(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.npy"
        write_array(p, np.arange(10.0))
        raw = p.read_bytes()
        p.write_bytes(raw[:-8])
        with pytest.raises(TruncatedPayloadError):
            read_array(p)

    def test_trailing_garbage(self, tmp_path):
        p = tmp_path / "g.npy"
        write_array(p, np.arange(4.0))
        p.write_bytes(p.read_bytes() + b"\x00" * 8)
        with pytest.raises(TruncatedPayloadError):
            read_array(p)

    def test_non_finite(self, tmp_path):
        p = tmp_path / "nan.npy"
        np.save(p, np.array([1.0, np.nan]))
        with pytest.raises(NonFiniteDataError):
            read_array(p)

    def test_bad_dtype_argument(self, tmp_path):
        with pytest.raises(ValueError):
            write_array(tmp_path / "x.npy", np.ones(3), dtype="f2")


def _write_sample_manifest(tmp_path, features_shape=(3, 4, 4), **overrides):
    write_array(tmp_path / "feat.npy", np.random.default_rng(0).normal(
        size=features_shape))
    write_array(tmp_path / "w.npy", np.zeros((5, features_shape[-3])))
    doc = {
        "samples": [{
            "id": "s0",
            "features": "feat.npy",
            "image_size": [32, 32],
            "labels": [2],
            "gt_boxes": [[1.0, 1.0, 8.0, 9.0]],
        }],
        "weights": "w.npy",
        "num_classes": 5,
    }
    doc.update(overrides)
    path = tmp_path / "manifest.json"
    save_manifest(path, doc)
    return path


class TestManifest:
    def test_single_entry(self, tmp_path):
        man = load_manifest(_write_sample_manifest(tmp_path))
        assert len(man.samples) == 1
        assert man.num_classes == 5
        assert man.load_features(man.samples[0]).shape == (3, 4, 4)
        assert man.load_weights().shape == (5, 3)

    def test_shape_mismatch(self, tmp_path):
        path = _write_sample_manifest(tmp_path)
        write_array(tmp_path / "feat.npy", np.zeros((4,)))
        with pytest.raises(ManifestError):
            load_manifest(path)

    def test_dangling_path(self, tmp_path):
        path = _write_sample_manifest(tmp_path)
        (tmp_path / "feat.npy").unlink()
        with pytest.raises(ManifestError):
            load_manifest(path)

    def test_weights_rank_checked(self, tmp_path):
        path = _write_sample_manifest(tmp_path)
        write_array(tmp_path / "w.npy", np.zeros((4, 3)))  # wrong class count
        with pytest.raises(ManifestError):
            load_manifest(path)

    def test_label_out_of_range(self, tmp_path):
        path = _write_sample_manifest(tmp_path, num_classes=2)
        with pytest.raises(ManifestError):
            load_manifest(path)

    def test_degenerate_gt_box(self, tmp_path):
        write_array(tmp_path / "feat.npy", np.zeros((1, 2, 2)))
        save_manifest(tmp_path / "m.json", {
            "samples": [{"id": "a", "features": "feat.npy",
                         "image_size": [8, 8], "labels": [0],
                         "gt_boxes": [[5.0, 1.0, 2.0, 3.0]]}],
            "num_classes": 2,
        })
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "m.json")

    def test_packed_rank4_with_index(self, tmp_path):
        write_array(tmp_path / "pack.npy",
                    np.arange(2 * 3 * 2 * 2, dtype=np.float64).reshape(2, 3, 2, 2))
        save_manifest(tmp_path / "m.json", {
            "samples": [
                {"id": f"s{i}", "features": "pack.npy", "index": i,
                 "image_size": [2, 2], "labels": [0], "gt_boxes": []}
                for i in range(2)
            ],
            "num_classes": 1,
        })
        man = load_manifest(tmp_path / "m.json")
        a = man.load_features(man.samples[1])
        assert a.shape == (3, 2, 2)
        assert a.flat[0] == 12.0

    def test_rank4_requires_index(self, tmp_path):
        write_array(tmp_path / "pack.npy", np.zeros((2, 3, 2, 2)))
        save_manifest(tmp_path / "m.json", {
            "samples": [{"id": "s", "features": "pack.npy",
                         "image_size": [2, 2], "labels": [0], "gt_boxes": []}],
            "num_classes": 1,
        })
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "m.json")

    def test_index_out_of_range(self, tmp_path):
        write_array(tmp_path / "pack.npy", np.zeros((2, 3, 2, 2)))
        save_manifest(tmp_path / "m.json", {
            "samples": [{"id": "s", "features": "pack.npy", "index": 5,
                         "image_size": [2, 2], "labels": [0], "gt_boxes": []}],
            "num_classes": 1,
        })
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "m.json")

    def test_missing_num_classes(self, tmp_path):
        save_manifest(tmp_path / "m.json", {"samples": []})
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "m.json")
