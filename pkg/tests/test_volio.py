"""RVOL1 volumes and manifest+blob checkpoints."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from coattreg.errors import DataError, ShapeError
from coattreg.volio import Volume, checkpoint_load, checkpoint_save, read_volume, write_volume

GOOD_HEADER = {
    "magic": "RVOL1",
    "shape": [2, 2, 2],
    "channels": 1,
    "spacing_mm": [1.0, 1.0, 1.0],
    "dtype": "f32le",
    "order": "c,x,y,z",
}


def _write_raw(tmp_path, header, n_floats=8, stem="vol"):
    (tmp_path / f"{stem}.json").write_text(header if isinstance(header, str) else json.dumps(header))
    (tmp_path / f"{stem}.raw").write_bytes(np.zeros(n_floats, dtype="<f4").tobytes())
    return tmp_path / stem


class TestVolume:
    def test_golden_single_float(self, tmp_path):
        write_volume(Volume(np.full((1, 1, 1, 1), 1.5)), tmp_path / "one")
        assert (tmp_path / "one.raw").read_bytes() == bytes([0x00, 0x00, 0xC0, 0x3F])
        header = json.loads((tmp_path / "one.json").read_text())
        assert header == {**GOOD_HEADER, "shape": [1, 1, 1]}

    def test_layout_offsets(self, tmp_path):
        c, w, h, d = 2, 3, 4, 2
        data = np.arange(c * w * h * d, dtype=np.float32).reshape(c, w, h, d)
        write_volume(Volume(data, (1.5, 1.5, 3.15)), tmp_path / "v")
        raw = np.frombuffer((tmp_path / "v.raw").read_bytes(), dtype="<f4")
        for ch, x, y, z in np.ndindex(c, w, h, d):
            assert raw[ch + c * (x + w * (y + h * z))] == data[ch, x, y, z]

    @settings(max_examples=30, deadline=None)
    @given(
        hnp.arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3)),
                   elements=st.floats(-1e6, 1e6, width=32)),
        st.tuples(*[st.floats(0.1, 5.0)] * 3),
    )
    def test_roundtrip_bit_exact(self, tmp_path_factory, data, spacing):
        stem = tmp_path_factory.mktemp("rt") / "v"
        write_volume(Volume(data, spacing), stem)
        back = read_volume(stem)
        assert back.data.tobytes() == data.tobytes()
        assert back.spacing_mm == tuple(float(s) for s in spacing)

    def test_writes_are_byte_deterministic(self, tmp_path, rng):
        vol = Volume(rng.random((2, 3, 3, 2)), (1.5, 1.5, 3.15))
        write_volume(vol, tmp_path / "a")
        write_volume(vol, tmp_path / "b")
        for ext in (".json", ".raw"):
            assert (tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes()

    def test_byte_count_mismatch(self, tmp_path):
        with pytest.raises(DataError, match="byte count"):
            read_volume(_write_raw(tmp_path, GOOD_HEADER, n_floats=7))

    def test_thirty_one_floats_for_two_cubed(self, tmp_path):
        header = {**GOOD_HEADER, "channels": 4}
        with pytest.raises(DataError, match="byte count"):
            read_volume(_write_raw(tmp_path, header, n_floats=31))

    @pytest.mark.parametrize(
        "field, value",
        [
            ("magic", "RVOL2"),
            ("dtype", "f64le"),
            ("order", "x,y,z,c"),
            ("shape", [2, 2]),
            ("shape", [2, 0, 2]),
            ("shape", [2, 2.5, 2]),
            ("channels", 0),
            ("channels", True),
            ("spacing_mm", [1.0, -1.0, 1.0]),
            ("spacing_mm", [1.0, 1.0]),
            ("spacing_mm", "1,1,1"),
        ],
    )
    def test_bad_field_value_names_field(self, tmp_path, field, value):
        with pytest.raises(DataError, match=field):
            read_volume(_write_raw(tmp_path, {**GOOD_HEADER, field: value}))

    @pytest.mark.parametrize("field", ["magic", "dtype", "shape", "channels", "spacing_mm"])
    def test_missing_field_names_field(self, tmp_path, field):
        header = {k: v for k, v in GOOD_HEADER.items() if k != field}
        with pytest.raises(DataError, match=field):
            read_volume(_write_raw(tmp_path, header))

    @pytest.mark.parametrize("text", ["{not json", "[1, 2, 3]", ""])
    def test_malformed_header(self, tmp_path, text):
        with pytest.raises(DataError):
            read_volume(_write_raw(tmp_path, text))

    def test_non_finite_payload(self, tmp_path):
        stem = _write_raw(tmp_path, GOOD_HEADER)
        payload = np.zeros(8, dtype="<f4")
        payload[3] = np.inf
        (tmp_path / "vol.raw").write_bytes(payload.tobytes())
        with pytest.raises(DataError):
            read_volume(stem)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_volume(tmp_path / "absent")

    def test_volume_validation(self):
        with pytest.raises(ShapeError):
            Volume(np.zeros((2, 2)))
        with pytest.raises(DataError):
            Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))


class TestCheckpoint:
    def _tensors(self, rng):
        return {"a": rng.normal(size=(2, 3)).astype(np.float32), "opt.m.a": np.zeros((2, 3), np.float32),
                "b": rng.normal(size=(4,)).astype(np.float32)}

    def test_save_load_save_identical(self, tmp_path, rng):
        meta = {"iteration": 3, "seed": 7, "config_hash": "abc"}
        checkpoint_save(tmp_path / "c1", self._tensors(rng), meta)
        tensors, meta_back = checkpoint_load(tmp_path / "c1")
        checkpoint_save(tmp_path / "c2", tensors, meta_back)
        for ext in (".json", ".bin"):
            assert (tmp_path / f"c1{ext}").read_bytes() == (tmp_path / f"c2{ext}").read_bytes()
        assert meta_back == meta

    def test_manifest_layout(self, tmp_path, rng):
        checkpoint_save(tmp_path / "c", self._tensors(rng), {})
        manifest = json.loads((tmp_path / "c.json").read_text())
        assert manifest["format"] == "RCKPT1"
        entries = manifest["tensors"]
        assert [e["name"] for e in entries] == ["a", "opt.m.a", "b"]
        assert [e["offset"] for e in entries] == [0, 24, 48]
        assert (tmp_path / "c.bin").stat().st_size == 64

    def _corrupt(self, tmp_path, rng, mutate):
        checkpoint_save(tmp_path / "c", self._tensors(rng), {"iteration": 1})
        manifest = json.loads((tmp_path / "c.json").read_text())
        mutate(manifest)
        (tmp_path / "c.json").write_text(json.dumps(manifest))
        return tmp_path / "c"

    def test_tensor_beyond_blob(self, tmp_path, rng):
        path = self._corrupt(tmp_path, rng, lambda m: m["tensors"][-1].update(offset=1000))
        with pytest.raises(DataError, match="past the end"):
            checkpoint_load(path)

    def test_truncated_blob(self, tmp_path, rng):
        checkpoint_save(tmp_path / "c", self._tensors(rng), {})
        blob = (tmp_path / "c.bin").read_bytes()
        (tmp_path / "c.bin").write_bytes(blob[:-4])
        with pytest.raises(DataError, match="truncated"):
            checkpoint_load(tmp_path / "c")

    @pytest.mark.parametrize(
        "mutate, match",
        [
            (lambda m: m.update(format="OTHER"), "format"),
            (lambda m: m.update(tensors={}), "tensors"),
            (lambda m: m["tensors"][0].pop("shape"), "shape"),
            (lambda m: m["tensors"][0].update(length=8), "length"),
            (lambda m: m["tensors"][0].update(shape=[2, -3]), "shape"),
            (lambda m: m["tensors"][0].update(offset=-4), "offset"),
            (lambda m: m["tensors"].append(dict(m["tensors"][0])), "twice"),
            (lambda m: m.update(meta=[1]), "meta"),
        ],
    )
    def test_malformed_manifest(self, tmp_path, rng, mutate, match):
        with pytest.raises(DataError, match=match):
            checkpoint_load(self._corrupt(tmp_path, rng, mutate))

    def test_malformed_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{")
        (tmp_path / "c.bin").write_bytes(b"")
        with pytest.raises(DataError):
            checkpoint_load(tmp_path / "c")
