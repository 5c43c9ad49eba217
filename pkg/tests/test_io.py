import json
import os
from pathlib import Path

import numpy as np
import pytest

from drmkit import (CorruptFileError, DeepRM, EvoDRM, SchemaError, ShallowRM,
                    VersionMismatchError, collapse)
from drmkit import io
from drmkit.deep import random_deep
from drmkit.forest import TreeConfig, forest_train, infomax_train
from drmkit.relax import FeedforwardNet, Layer, relax

FIXTURES = Path(__file__).parent / "fixtures"


def shallow():
    rng = np.random.default_rng(0)
    return ShallowRM(rng.dirichlet([1, 1]), rng.dirichlet([1, 1, 1]), rng.normal(size=(2, 3, 4)),
                     0.1 + 1e-17, image_shape=(1, 2, 2))


def evo():
    rng = np.random.default_rng(1)
    return EvoDRM(rng.normal(size=(2, 3)), [rng.normal(size=(2, 3))], [0.5, 0.5], [[0.3, 0.7]],
                  0.2, leaf_histograms=rng.dirichlet([1, 1], size=4))


def conv_net():
    rng = np.random.default_rng(2)
    conv = Layer(rng.normal(size=(2, 1, 2, 2)), rng.normal(size=2), kind="conv", in_shape=(1, 3, 3),
                 activation="relu", pool="max", groups=np.repeat(np.arange(2), 4))
    loc = Layer(rng.normal(size=(3, 2)), rng.normal(size=3), mask=[[1, 0], [0, 1], [1, 1]])
    return FeedforwardNet([conv, loc], rng.normal(size=(2, 3)), rng.normal(size=2), (1, 3, 3),
                          {"note": "test"})


def forest():
    rng = np.random.default_rng(3)
    X, y = rng.normal(size=(30, 3)), rng.integers(0, 2, 30)
    return forest_train(X, y, 3, TreeConfig(depth=2, candidates=4), seed=0)


OBJECTS = {
    "shallow": shallow,
    "deep": lambda: random_deep((2, 3, 4), (2, 2), 2, seed=5),
    "evo": evo,
    "net": lambda: relax(random_deep((2, 3, 4), (2, 2), 2, seed=6), switching=True),
    "conv_net": conv_net,
    "tree": lambda: infomax_train(np.random.default_rng(4).normal(size=(20, 3)),
                                  np.arange(20) % 2, seed=0),
    "forest": forest,
}


@pytest.mark.parametrize("name", sorted(OBJECTS))
def test_roundtrip_bitwise(tmp_path, name):
    obj = OBJECTS[name]()
    path = tmp_path / "obj.json"
    io.save(obj, path)
    back = io.load(path)
    assert type(back) is type(obj)
    assert back == obj
    io.save(back, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_no_temp_files_left(tmp_path):
    io.save(shallow(), tmp_path / "m.json")
    assert os.listdir(tmp_path) == ["m.json"]


def test_truncated(tmp_path):
    path = tmp_path / "m.json"
    io.save(shallow(), path)
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(CorruptFileError):
        io.load(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"format": "other", "version": 2}))
    with pytest.raises(CorruptFileError):
        io.load(path)


def test_checksum(tmp_path):
    path = tmp_path / "m.json"
    io.save(shallow(), path)
    doc = json.loads(path.read_text())
    doc["payload"]["image_shape"] = [1, 4, 1]
    path.write_text(json.dumps(doc))
    with pytest.raises(CorruptFileError):
        io.load(path)


def test_future_version(tmp_path):
    path = tmp_path / "m.json"
    io.save(shallow(), path)
    doc = json.loads(path.read_text())
    doc["version"] = 3
    path.write_text(json.dumps(doc))
    with pytest.raises(VersionMismatchError):
        io.load(path)


def rewrite(path, edit):
    doc = json.loads(path.read_text())
    edit(doc["payload"])
    doc["checksum"] = __import__("hashlib").sha256(io._canonical(doc["payload"])).hexdigest()
    path.write_text(json.dumps(doc))


def test_schema_violations(tmp_path):
    path = tmp_path / "m.json"
    io.save(shallow(), path)
    rewrite(path, lambda p: p.pop("templates"))
    with pytest.raises(SchemaError):
        io.load(path)
    io.save(shallow(), path)
    rewrite(path, lambda p: p["templates"].update(hex="00"))
    with pytest.raises(SchemaError):
        io.load(path)
    io.save(shallow(), path)
    rewrite(path, lambda p: p.update(class_prior=[0.9, 0.9]))
    with pytest.raises(SchemaError):
        io.load(path)


def test_expected_kind(tmp_path):
    io.save(shallow(), tmp_path / "m.json")
    with pytest.raises(SchemaError):
        io.load(tmp_path / "m.json", DeepRM)


class TestVersionOne:
    def test_shallow_fixture(self):
        m = io.load(FIXTURES / "shallow_v1.json", ShallowRM)
        assert m.class_prior.tolist() == [0.25, 0.75]
        assert m.templates[1, 0].tolist() == [-1.0, 3.0, 0.125]
        assert m.noise_var == 0.5 and m.image_shape is None

    def test_evo_fixture(self):
        m = io.load(FIXTURES / "evo_v1.json", EvoDRM)
        assert collapse(m).templates[1, 1].tolist() == [3.0, 1.0]

    def test_upgrade_writes_version_two(self, tmp_path):
        m = io.load(FIXTURES / "shallow_v1.json")
        io.save(m, tmp_path / "m.json")
        assert json.loads((tmp_path / "m.json").read_text())["version"] == 2
        assert io.load(tmp_path / "m.json") == m


class TestDataset:
    def make(self, paths=True):
        rng = np.random.default_rng(0)
        imgs = rng.normal(size=(5, 1, 2, 3)).astype(np.float32).astype(np.float64)
        return io.Dataset(imgs, [0, 1, 1, 0, 2], rng.integers(0, 3, (5, 3)) if paths else None,
                          seed=7, config={"model": "test"})

    @pytest.mark.parametrize("paths", [True, False])
    def test_roundtrip(self, tmp_path, paths):
        ds = self.make(paths)
        io.save_dataset(ds, tmp_path / "d.drm")
        assert io.load_dataset(tmp_path / "d.drm") == ds

    def test_layout(self, tmp_path):
        ds = self.make()
        raw = io.dataset_bytes(ds)
        assert raw[:8] == b"DRMDATA1"
        n = int.from_bytes(raw[8:16], "little")
        header = json.loads(raw[16:16 + n])
        assert header["image_shape"] == [1, 2, 3] and header["dtype"] == "float32-le"
        assert len(raw) == 16 + n + 5 * 6 * 4 + 5 * 8 + 15 * 8

    def test_truncated(self, tmp_path):
        path = tmp_path / "d.drm"
        io.save_dataset(self.make(), path, manifest=False)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(CorruptFileError):
            io.load_dataset(path)

    def test_bad_magic(self):
        with pytest.raises(CorruptFileError):
            io.parse_dataset(b"DRMDATA0" + bytes(20))

    def test_manifest_mismatch(self, tmp_path):
        path = tmp_path / "d.drm"
        io.save_dataset(self.make(), path)
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 1
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptFileError):
            io.load_dataset(path)
        assert io.load_dataset(path, verify=False).paths[-1, -1] != self.make().paths[-1, -1]
