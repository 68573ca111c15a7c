"""Tests for the dense-array codec and the artifact store."""

import numpy as np
import pandas as pd
import pytest

from src.storage import (
    ArtifactStore,
    MissingArtifactError,
    decode_array,
    encode_array,
    load_array,
    save_array,
)


class TestArrayCodec:

    def test_header_format(self):
        blob = encode_array(np.zeros((2, 3), dtype=np.float32))
        header, _, payload = blob.partition(b"\n")
        assert header == b"v1 f32 2 2 3"
        assert len(payload) == 24

    def test_payload_is_little_endian(self):
        blob = encode_array(np.array([1], dtype=">i8"))
        assert blob.endswith(b"\x01" + b"\x00" * 7)

    @pytest.mark.parametrize("dtype", [np.float32, np.float64, np.uint8, np.int64])
    def test_supported_dtypes(self, dtype, tmp_path):
        array = np.arange(24).reshape(2, 3, 4).astype(dtype)
        save_array(tmp_path / "a.arr", array)
        loaded = load_array(tmp_path / "a.arr")
        assert loaded.dtype == np.dtype(dtype)
        np.testing.assert_array_equal(loaded, array)

    def test_scalar_shape(self):
        loaded = decode_array(encode_array(np.float64(2.5)))
        assert loaded.shape == ()
        assert loaded == 2.5

    def test_unsupported_dtype_rejected(self):
        with pytest.raises(ValueError):
            encode_array(np.zeros(3, dtype=np.int16))

    @pytest.mark.parametrize("blob", [
        b"v2 f32 1 3\n" + b"\x00" * 12,
        b"v1 c64 1 3\n" + b"\x00" * 12,
        b"v1 f32 2 3\n" + b"\x00" * 12,
        b"v1 f32 1 4\n" + b"\x00" * 12,
    ])
    def test_malformed_input_rejected(self, blob):
        with pytest.raises(ValueError):
            decode_array(blob)


class TestArtifactStore:

    def test_png_planes(self, tmp_path):
        store = ArtifactStore(tmp_path)
        plane = np.array([[0, 128, 255]], dtype=np.uint8)
        store.save_png("pseudo/00001.png", plane)
        np.testing.assert_array_equal(store.load_png("pseudo/00001.png"), plane)

    def test_checkpoint(self, tmp_path):
        store = ArtifactStore(tmp_path)
        state = {"head.weight": np.ones((4, 3), dtype=np.float32), "head.bias": np.zeros(4, dtype=np.float32)}
        directory = store.save_checkpoint("net", state, {"kind": "classifier", "seed": 3})
        assert (directory / "manifest.json").exists()
        loaded, manifest = store.load_checkpoint("net")
        assert manifest["kind"] == "classifier"
        assert manifest["parameters"] == ["head.bias", "head.weight"]
        np.testing.assert_array_equal(loaded["head.weight"], state["head.weight"])

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            ArtifactStore(tmp_path).load_checkpoint("absent")

    def test_require_lists_every_missing_path(self, tmp_path):
        store = ArtifactStore(tmp_path)
        store.save_text("present.txt", "x")
        with pytest.raises(MissingArtifactError) as info:
            store.require([store.path("present.txt"), store.path("a.arr"), store.path("b.arr")])
        assert [p.name for p in info.value.missing] == ["a.arr", "b.arr"]
        assert isinstance(info.value, FileNotFoundError)

    def test_tables_and_json(self, tmp_path):
        store = ArtifactStore(tmp_path)
        frame = pd.DataFrame({"step": [0, 1], "loss": [1.5, 0.5]})
        store.save_table("logs/loss.csv", frame)
        pd.testing.assert_frame_equal(store.load_table("logs/loss.csv"), frame)
        store.save_json("report.json", {"b": 1, "a": 0.5})
        assert store.load_json("report.json") == {"a": 0.5, "b": 1}
        assert store.path("report.json").read_text().index('"a"') < store.path("report.json").read_text().index('"b"')

    def test_list_files(self, tmp_path):
        store = ArtifactStore(tmp_path)
        assert store.list_files("masks", "*.arr") == []
        store.save_array("masks/00002.arr", np.zeros(2, dtype=np.float32))
        store.save_array("masks/00001.arr", np.zeros(2, dtype=np.float32))
        assert [p.name for p in store.list_files("masks", "*.arr")] == ["00001.arr", "00002.arr"]
