"""Bundle persistence: a JSON manifest plus a raw little-endian float32 blob.

A bundle saved at ``path`` consists of ``path`` (the manifest) and
``path + ".bin"`` (the blob). Every tensor is stored row-major with its
offset, length and CRC32 recorded in the manifest, so a bundle can be read
without any out-of-band knowledge. Numbers are float64 in memory and rounded
to float32 on save; one save/load pass normalises a value so later round
trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import tempfile
import zlib
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .adapters import LayerId, LowRankAdapter, TaskVector, WeightMatrix
from .covariance import CumulativeCovariance, FeatureBatch
from .cpm import Projector, ProjectorRegistry, Prototype
from .errors import (
    ChecksumError,
    NumericalError,
    StoreError,
    TruncatedBlobError,
    UnknownKindError,
    VersionError,
)
from .lpm import LayerState, MergedState
from .numerics import SpectralDecomposition

FORMAT = "rlsmerge-bundle"
VERSION = 1
DTYPE = "<f4"
KINDS = ("base_weights", "adapter", "task_vector", "features", "covariance", "merged_state", "registry")

_LAYERED = {
    WeightMatrix: "base_weights",
    LowRankAdapter: "adapter",
    TaskVector: "task_vector",
    FeatureBatch: "features",
    CumulativeCovariance: "covariance",
}


def atomic_write(path: Path, data: bytes):
    """Write via a temporary sibling and rename, so readers never see a partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _BlobWriter:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.tensors: list[dict] = []
        self.offset = 0

    def add(self, name: str, arr) -> str:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        with np.errstate(over="ignore"):
            raw = arr.astype(DTYPE)
        if not np.all(np.isfinite(raw)):
            raise NumericalError(f"tensor {name!r} is not representable in float32")
        data = raw.tobytes(order="C")
        self.tensors.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "float32",
                "offset": self.offset,
                "length": len(data),
                "crc32": zlib.crc32(data),
            }
        )
        self.chunks.append(data)
        self.offset += len(data)
        return name


class _BlobReader:
    def __init__(self, tensors: list[dict], blob: bytes):
        self.arrays = {}
        end = 0
        for t in sorted(tensors, key=lambda t: t["offset"]):
            offset, length = int(t["offset"]), int(t["length"])
            if offset < end:
                raise StoreError(f"tensor {t['name']!r} overlaps its predecessor")
            if offset + length > len(blob):
                raise TruncatedBlobError(f"tensor {t['name']!r} runs past the end of the blob")
            expected = int(np.prod(t["shape"], dtype=np.int64)) * 4
            if length != expected:
                raise StoreError(f"tensor {t['name']!r} declares {length} bytes for shape {t['shape']}")
            data = blob[offset : offset + length]
            if zlib.crc32(data) != int(t["crc32"]):
                raise ChecksumError(f"checksum mismatch in tensor {t['name']!r}")
            end = offset + length
            self.arrays[t["name"]] = np.frombuffer(data, dtype=DTYPE).astype(np.float64).reshape(t["shape"])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]


# encoders: object -> JSON structure referencing tensors in the writer


def _encode_cov(w: _BlobWriter, prefix: str, cov: CumulativeCovariance) -> dict:
    doc = {"dim": cov.dim, "task_count": cov.task_count, "storage_ratio": cov.storage_ratio()}
    if cov.compressed:
        doc.update(
            form="compressed",
            gamma=cov.gamma,
            rank=cov.spectral.rank,
            basis=w.add(f"{prefix}/basis", cov.spectral.basis),
            energies=w.add(f"{prefix}/energies", cov.spectral.energies),
        )
    else:
        doc.update(form="full", matrix=w.add(f"{prefix}/matrix", cov.matrix))
    doc["momentum"] = None if cov.momentum is None else w.add(f"{prefix}/momentum", cov.momentum)
    return doc


def _decode_cov(r: _BlobReader, layer: LayerId, doc: dict) -> CumulativeCovariance:
    momentum = None if doc["momentum"] is None else r[doc["momentum"]]
    common = dict(layer=layer, dim=int(doc["dim"]), task_count=int(doc["task_count"]), momentum=momentum)
    if doc["form"] == "compressed":
        spectral = SpectralDecomposition(r[doc["basis"]], r[doc["energies"]])
        return CumulativeCovariance(spectral=spectral, gamma=float(doc["gamma"]), **common)
    if doc["form"] != "full":
        raise StoreError(f"unknown covariance form {doc['form']!r}")
    return CumulativeCovariance(matrix=r[doc["matrix"]], **common)


def _encode_layer_value(w: _BlobWriter, kind: str, prefix: str, value) -> dict:
    if kind == "base_weights":
        return {"values": w.add(f"{prefix}/values", value.values)}
    if kind == "adapter":
        return {"down": w.add(f"{prefix}/down", value.down), "up": w.add(f"{prefix}/up", value.up)}
    if kind == "task_vector":
        return {"delta": w.add(f"{prefix}/delta", value.delta)}
    if kind == "features":
        return {"samples": w.add(f"{prefix}/samples", value.samples)}
    return _encode_cov(w, prefix, value)


def _decode_layer_value(r: _BlobReader, kind: str, layer: LayerId, doc: dict):
    if kind == "base_weights":
        return WeightMatrix(r[doc["values"]])
    if kind == "adapter":
        return LowRankAdapter(layer, r[doc["down"]], r[doc["up"]])
    if kind == "task_vector":
        return TaskVector(layer, r[doc["delta"]])
    if kind == "features":
        return FeatureBatch(layer, r[doc["samples"]])
    return _decode_cov(r, layer, doc)


def infer_kind(obj) -> str:
    if isinstance(obj, MergedState):
        return "merged_state"
    if isinstance(obj, ProjectorRegistry):
        return "registry"
    if type(obj) in _LAYERED and not isinstance(obj, WeightMatrix):
        return _LAYERED[type(obj)]
    if isinstance(obj, Mapping) and obj:
        kinds = {_LAYERED.get(type(v)) for v in obj.values()}
        if len(kinds) == 1 and None not in kinds:
            return kinds.pop()
    raise UnknownKindError(f"cannot persist object of type {type(obj).__name__}")


def _encode(w: _BlobWriter, kind: str, obj) -> dict:
    if kind == "merged_state":
        entries = []
        for layer, st in sorted(obj.layers.items()):
            p = f"{layer.index}.{layer.name}"
            entries.append(
                {
                    "layer": layer.to_json(),
                    "tau_star": w.add(f"{p}/tau_star", st.tau_star.delta),
                    "covariance": _encode_cov(w, f"{p}/cov", st.cov),
                }
            )
        return {"tasks_merged": obj.tasks_merged, "entries": entries}
    if kind == "registry":
        entries = []
        for proto, proj in obj.entries:
            p = f"task{proto.task}"
            layers = [
                {"weight": w.add(f"{p}/proj{i}/weight", W), "bias": w.add(f"{p}/proj{i}/bias", b)}
                for i, (W, b) in enumerate(proj.layers)
            ]
            entries.append(
                {
                    "task": proto.task,
                    "prototype": {"mean": w.add(f"{p}/mean", proto.mean), "sample_count": proto.sample_count},
                    "projector": {"activation": proj.activation, "layers": layers},
                }
            )
        return {"temperature": obj.temperature, "entries": entries}
    single = not isinstance(obj, Mapping)
    items = [(obj.layer, obj)] if single else list(obj.items())
    entries = []
    for layer, value in sorted(items, key=lambda kv: kv[0]):
        doc = _encode_layer_value(w, kind, f"{layer.index}.{layer.name}", value)
        entries.append({"layer": layer.to_json(), **doc})
    return {"single": single, "entries": entries}


def _decode(r: _BlobReader, kind: str, payload: dict):
    if kind == "merged_state":
        layers = {}
        for e in payload["entries"]:
            layer = LayerId.from_json(e["layer"])
            layers[layer] = LayerState(TaskVector(layer, r[e["tau_star"]]), _decode_cov(r, layer, e["covariance"]))
        return MergedState(layers)
    if kind == "registry":
        entries = []
        for e in payload["entries"]:
            proto = Prototype(int(e["task"]), r[e["prototype"]["mean"]], int(e["prototype"]["sample_count"]))
            layers = tuple((r[l["weight"]], r[l["bias"]]) for l in e["projector"]["layers"])
            entries.append((proto, Projector(int(e["task"]), layers, e["projector"]["activation"])))
        return ProjectorRegistry(tuple(entries), float(payload["temperature"]))
    out = {}
    for e in payload["entries"]:
        layer = LayerId.from_json(e["layer"])
        out[layer] = _decode_layer_value(r, kind, layer, e)
    if payload.get("single"):
        return next(iter(out.values()))
    return out


def blob_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".bin")


def save_bundle(obj, path, metadata: Mapping[str, Any] | None = None, kind: str | None = None) -> dict:
    """Persist ``obj`` at ``path``; returns the manifest that was written.

    Per-layer kinds accept either a single value or a ``{LayerId: value}``
    mapping (base weights must be a mapping). ``metadata`` is stored verbatim
    and must be JSON-serialisable.
    """
    kind = kind or infer_kind(obj)
    if kind not in KINDS:
        raise UnknownKindError(f"unknown bundle kind {kind!r}")
    path = Path(path)
    w = _BlobWriter()
    payload = _encode(w, kind, obj)
    blob = b"".join(w.chunks)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "blob": blob_path(path).name,
        "blob_size": len(blob),
        "metadata": dict(metadata or {}),
        "tensors": w.tensors,
        "payload": payload,
    }
    atomic_write(blob_path(path), blob)
    atomic_write(path, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return manifest


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise StoreError(f"{path}: manifest is not valid JSON ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise StoreError(f"{path}: not a {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise VersionError(f"{path}: bundle version {manifest.get('version')} != supported {VERSION}")
    if manifest.get("kind") not in KINDS:
        raise UnknownKindError(f"{path}: unknown bundle kind {manifest.get('kind')!r}")
    return manifest


def load_bundle(path):
    """Load and fully verify a bundle; raises before returning anything on corruption."""
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path.parent / manifest["blob"]).read_bytes()
    if len(blob) != int(manifest["blob_size"]):
        raise TruncatedBlobError(f"{path}: blob has {len(blob)} bytes, manifest declares {manifest['blob_size']}")
    reader = _BlobReader(manifest["tensors"], blob)
    try:
        return _decode(reader, manifest["kind"], manifest["payload"])
    except (KeyError, TypeError) as exc:
        raise StoreError(f"{path}: malformed payload ({exc})") from exc
