import json
import zlib

import numpy as np
import pytest

from rlsmerge.adapters import LayerId, TaskVector, WeightMatrix
from rlsmerge.covariance import CumulativeCovariance, compress_covariance
from rlsmerge.errors import (
    ChecksumError,
    NumericalError,
    StoreError,
    TruncatedBlobError,
    UnknownKindError,
    VersionError,
)
from rlsmerge.store import KINDS, blob_path, load_bundle, read_manifest, save_bundle

from factories import random_object, same


def test_zero_task_vector_round_trip(tmp_path, layer):
    tv = TaskVector.zeros(layer, 3, 4)
    save_bundle(tv, tmp_path / "z.bundle")
    assert load_bundle(tmp_path / "z.bundle") == tv


def test_compressed_covariance_byte_count(tmp_path, rng, layer):
    X = rng.standard_normal((3, 16))
    cov = compress_covariance(CumulativeCovariance(layer, 16, 1, matrix=X.T @ X), 1.0)
    assert cov.spectral.rank == 3
    m = save_bundle(cov, tmp_path / "c.bundle")
    assert blob_path(tmp_path / "c.bundle").stat().st_size == 4 * (16 * 3 + 3) == 204
    assert m["payload"]["entries"][0]["rank"] == 3
    assert m["payload"]["entries"][0]["storage_ratio"] == (16 * 3 + 3) / 256


def test_corruption_detected(tmp_path, rng):
    obj = random_object("task_vector", rng)
    path = tmp_path / "t.bundle"
    save_bundle(obj, path)
    raw = bytearray(blob_path(path).read_bytes())
    raw[0] ^= 0x01
    blob_path(path).write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_bundle(path)


def test_truncation_detected(tmp_path, rng):
    path = tmp_path / "t.bundle"
    save_bundle(random_object("adapter", rng), path)
    raw = blob_path(path).read_bytes()
    blob_path(path).write_bytes(raw[:-1])
    with pytest.raises(TruncatedBlobError):
        load_bundle(path)


def test_manifest_checks(tmp_path, rng):
    path = tmp_path / "t.bundle"
    save_bundle(random_object("task_vector", rng), path)
    doc = json.loads(path.read_text())
    path.write_text(json.dumps({**doc, "version": 2}))
    with pytest.raises(VersionError):
        read_manifest(path)
    path.write_text(json.dumps({**doc, "kind": "mystery"}))
    with pytest.raises(UnknownKindError):
        load_bundle(path)
    path.write_text("{")
    with pytest.raises(StoreError):
        load_bundle(path)


def test_unknown_object(tmp_path):
    with pytest.raises(UnknownKindError):
        save_bundle(object(), tmp_path / "x.bundle")
    with pytest.raises(UnknownKindError):
        save_bundle({}, tmp_path / "x.bundle")


def test_float32_overflow_rejected(tmp_path, layer):
    with pytest.raises(NumericalError):
        save_bundle(TaskVector(layer, [[1e39]]), tmp_path / "x.bundle")


def test_metadata_and_self_description(tmp_path, rng):
    path = tmp_path / "b.bundle"
    m = save_bundle({LayerId(0): WeightMatrix(np.eye(2))}, path, metadata={"seed": 7, "lambda": 3.0})
    doc = read_manifest(path)
    assert doc == m
    assert doc["metadata"] == {"seed": 7, "lambda": 3.0}
    assert doc["blob"] == "b.bundle.bin" and doc["blob_size"] == 16
    assert all(t["dtype"] == "float32" for t in doc["tensors"])


@pytest.mark.parametrize("kind", KINDS)
def test_round_trip_after_normalisation(tmp_path, kind):
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    for i in range(10):
        obj = random_object(kind, rng)
        p1, p2 = tmp_path / f"{i}a.bundle", tmp_path / f"{i}b.bundle"
        save_bundle(obj, p1)
        once = load_bundle(p1)
        save_bundle(once, p2)
        assert same(load_bundle(p2), once)
        assert blob_path(p1).read_bytes() == blob_path(p2).read_bytes()


def test_single_objects_unwrap(tmp_path, layer):
    tv = TaskVector(layer, np.ones((2, 2)))
    save_bundle(tv, tmp_path / "s.bundle")
    assert isinstance(load_bundle(tmp_path / "s.bundle"), TaskVector)
    save_bundle({layer: tv}, tmp_path / "m.bundle")
    assert isinstance(load_bundle(tmp_path / "m.bundle"), dict)


def test_no_partial_files_left(tmp_path, rng):
    save_bundle(random_object("registry", rng), tmp_path / "r.bundle")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["r.bundle", "r.bundle.bin"]
