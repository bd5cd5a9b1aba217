import struct

import numpy as np
import pytest

from ildet.checkpoint import load_checkpoint, save_checkpoint
from ildet.container import MAGIC, ContainerError, read_container, write_container
from ildet.losses import FisherDiagonal
from ildet.model import ClassSet, DetectorModel, extend_model


class TestContainer:
    def test_layout(self, tmp_path, rng):
        t = {"a": rng.normal(size=(2, 3)), "b": np.array(7.5)}
        path = write_container(tmp_path / "x.ildet", {"kind": "demo"}, t)
        raw = path.read_bytes()
        assert raw[:6] == MAGIC
        assert struct.unpack_from("<I", raw, 6)[0] == 1
        header, back = read_container(path)
        assert header["kind"] == "demo"
        assert [e["name"] for e in header["tensors"]] == ["a", "b"]
        assert all(np.array_equal(t[k], back[k]) and t[k].shape == back[k].shape for k in t)

    def test_special_values_bit_exact(self, tmp_path):
        v = np.array([np.nan, np.inf, -0.0, 5e-324, np.finfo(float).max])
        _, back = read_container(write_container(tmp_path / "x", {}, {"v": v}))
        assert back["v"].tobytes() == v.tobytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad"
        p.write_bytes(b"NOPE" + b"\0" * 20)
        with pytest.raises(ContainerError):
            read_container(p)

    def test_truncated(self, tmp_path, rng):
        p = write_container(tmp_path / "x", {}, {"a": rng.normal(size=100)})
        p.write_bytes(p.read_bytes()[:-16])
        with pytest.raises(ContainerError):
            read_container(p)

    def test_unsupported_version(self, tmp_path):
        p = write_container(tmp_path / "x", {}, {})
        raw = bytearray(p.read_bytes())
        raw[6:10] = struct.pack("<I", 99)
        p.write_bytes(bytes(raw))
        with pytest.raises(ContainerError, match="version"):
            read_container(p)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        m = extend_model(DetectorModel(7, ClassSet((2, 4)), seed=1), (1, 3), seed=2)
        for v in m.store.params.values():
            v += rng.normal(size=v.shape)
        path = save_checkpoint(tmp_path / "m.ildet", m, meta={"note": "x"})
        back, fisher, meta = load_checkpoint(path)
        assert fisher is None and meta == {"note": "x"}
        assert back.class_set == m.class_set and back.hidden == m.hidden
        for k, v in m.store.params.items():
            assert back.store[k].tobytes() == v.tobytes()
        x = rng.normal(size=(4, 7))
        assert all(np.array_equal(a, b) for a, b in zip(m.forward(x), back.forward(x)))

    def test_fisher_round_trip(self, tmp_path, rng):
        m = DetectorModel(4, ClassSet((1,)), hidden=(3,))
        F = FisherDiagonal({k: rng.uniform(size=v.shape) for k, v in m.store.params.items()},
                           {k: v.copy() for k, v in m.store.params.items()})
        _, back, _ = load_checkpoint(save_checkpoint(tmp_path / "f", m, F))
        for k in F.values:
            assert np.array_equal(F.values[k], back.values[k])
            assert np.array_equal(F.anchor[k], back.anchor[k])

    def test_rejects_dataset_file(self, tmp_path):
        p = write_container(tmp_path / "d", {"kind": "dataset"}, {})
        with pytest.raises(ContainerError):
            load_checkpoint(p)
