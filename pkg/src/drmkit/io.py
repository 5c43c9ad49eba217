"""Versioned persistence for models, nets, forests and datasets.

Models, nets and forests are UTF-8 JSON documents whose arrays are stored as
little-endian float64/int64 bytes in base 16, so a round trip is bit-exact.
Version 2 adds ``image_shape`` and a SHA-256 checksum of the payload; version 1
files are still read.

Datasets use a binary layout: the 8-byte magic ``DRMDATA1``, a little-endian
uint64 header length, a JSON header, then raw row-major arrays (images as
float32, labels and optional paths as int64, all little-endian).
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (CorruptFileError, DRMError, SchemaError, ValidationError,
                     VersionMismatchError)
from .forest import DecisionTree, Forest
from .model import DeepLevel, DeepRM, EvoDRM, ShallowRM
from .relax import FeedforwardNet, Layer

FORMAT = "drmkit"
VERSION = 2
READABLE_VERSIONS = (1, 2)
DATA_MAGIC = b"DRMDATA1"

_DTYPES = {"float64": "<f8", "int64": "<i8", "bool": "|b1"}


def encode_array(a):
    a = np.asarray(a)
    kind = "bool" if a.dtype == bool else "int64" if a.dtype.kind in "iu" else "float64"
    data = np.ascontiguousarray(a, dtype=_DTYPES[kind])
    return {"dtype": kind, "shape": list(a.shape), "hex": data.tobytes().hex()}


def decode_array(obj, dtype="float64"):
    """Array from ``{"dtype", "shape", "hex"}`` or from a plain nested list."""
    if isinstance(obj, dict):
        try:
            kind, shape, raw = obj["dtype"], tuple(obj["shape"]), bytes.fromhex(obj["hex"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed array record: {exc}") from exc
        if kind not in _DTYPES:
            raise SchemaError(f"unknown array dtype {kind!r}")
        if len(raw) != np.dtype(_DTYPES[kind]).itemsize * int(np.prod(shape)):
            raise SchemaError("array byte length does not match its shape")
        a = np.frombuffer(raw, dtype=_DTYPES[kind])
        return a.reshape(shape).astype(kind if kind != "bool" else bool)
    if isinstance(obj, list):
        try:
            return np.array(obj, dtype=dtype)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"malformed array list: {exc}") from exc
    raise SchemaError("array must be an object or a list")


# --- encoders ---------------------------------------------------------------

def _shape(s):
    return None if s is None else list(s)


def _encode(obj):
    if isinstance(obj, ShallowRM):
        return "ShallowRM", {"class_prior": encode_array(obj.class_prior),
                             "nuisance_prior": encode_array(obj.nuisance_prior),
                             "templates": encode_array(obj.templates),
                             "noise_var": encode_array(np.float64(obj.noise_var)),
                             "image_shape": _shape(obj.image_shape)}
    if isinstance(obj, DeepRM):
        return "DeepRM", {"levels": [{"transforms": encode_array(lv.transforms),
                                      "biases": encode_array(lv.biases),
                                      "noise": encode_array(lv.noise),
                                      "prior": encode_array(lv.prior)} for lv in obj.levels],
                          "top_templates": encode_array(obj.top_templates),
                          "top_prior": encode_array(obj.top_prior),
                          "pixel_noise": encode_array(np.float64(obj.pixel_noise)),
                          "image_shape": _shape(obj.image_shape)}
    if isinstance(obj, EvoDRM):
        return "EvoDRM", {"root_templates": encode_array(obj.root_templates),
                          "mutations": [encode_array(m) for m in obj.mutations],
                          "class_prior": encode_array(obj.class_prior),
                          "nuisance_priors": [encode_array(p) for p in obj.nuisance_priors],
                          "pixel_noise": encode_array(np.float64(obj.pixel_noise)),
                          "leaf_histograms": (None if obj.leaf_histograms is None
                                              else encode_array(obj.leaf_histograms)),
                          "image_shape": _shape(obj.image_shape)}
    if isinstance(obj, FeedforwardNet):
        layers = []
        for lay in obj.layers:
            layers.append({"weights": encode_array(lay.weights), "biases": encode_array(lay.biases),
                           "connectivity": "convolutional" if lay.kind == "conv" else
                           ("local" if lay.mask is not None else "fully"),
                           "activation": lay.activation, "pooling": lay.pool, "stride": lay.stride,
                           "groups": None if lay.groups is None else encode_array(lay.groups),
                           "in_shape": _shape(lay.in_shape),
                           "mask": None if lay.mask is None else encode_array(lay.mask)})
        return "FeedforwardNet", {"layers": layers,
                                  "softmax_head": {"weights": encode_array(obj.head_weights),
                                                   "biases": encode_array(obj.head_biases)},
                                  "image_shape": _shape(obj.input_shape), "meta": obj.meta}
    if isinstance(obj, DecisionTree):
        return "DecisionTree", _tree(obj)
    if isinstance(obj, Forest):
        return "Forest", {"trees": [_tree(t) for t in obj.trees],
                          "samples": [encode_array(s) for s in obj.samples]}
    raise TypeError(f"cannot persist {type(obj).__name__}")


def _tree(t):
    return {"filters": encode_array(t.filters), "biases": encode_array(t.biases),
            "children": [list(c) for c in t.children], "histograms": encode_array(t.histograms)}


# --- decoders ---------------------------------------------------------------

def _scalar(x):
    a = decode_array(x) if isinstance(x, (dict, list)) else np.float64(x)
    return float(np.asarray(a).reshape(()))


def _opt_shape(p, version):
    s = p.get("image_shape") if version >= 2 else None
    return None if s is None else tuple(int(v) for v in s)


def _decode(kind, p, version):
    if kind == "ShallowRM":
        return ShallowRM(decode_array(p["class_prior"]), decode_array(p["nuisance_prior"]),
                         decode_array(p["templates"]), _scalar(p["noise_var"]),
                         image_shape=_opt_shape(p, version))
    if kind == "DeepRM":
        levels = [DeepLevel(decode_array(lv["transforms"]), decode_array(lv["biases"]),
                            decode_array(lv["noise"]), decode_array(lv["prior"])) for lv in p["levels"]]
        return DeepRM(levels, decode_array(p["top_templates"]), decode_array(p["top_prior"]),
                      _scalar(p["pixel_noise"]), image_shape=_opt_shape(p, version))
    if kind == "EvoDRM":
        lh = p.get("leaf_histograms")
        return EvoDRM(decode_array(p["root_templates"]), [decode_array(m) for m in p["mutations"]],
                      decode_array(p["class_prior"]), [decode_array(q) for q in p["nuisance_priors"]],
                      _scalar(p["pixel_noise"]), None if lh is None else decode_array(lh),
                      image_shape=_opt_shape(p, version))
    if kind == "FeedforwardNet":
        layers = []
        for lay in p["layers"]:
            conn = lay.get("connectivity", "fully")
            if conn not in ("fully", "local", "convolutional"):
                raise SchemaError(f"unknown connectivity {conn!r}")
            groups, mask = lay.get("groups"), lay.get("mask")
            layers.append(Layer(decode_array(lay["weights"]), decode_array(lay["biases"]),
                                "conv" if conn == "convolutional" else "dense",
                                lay.get("activation", "none"), lay.get("pooling", "none"),
                                None if groups is None else decode_array(groups, "int64"),
                                int(lay.get("stride", 1)),
                                None if lay.get("in_shape") is None else tuple(lay["in_shape"]),
                                None if mask is None else decode_array(mask, "bool").astype(bool)))
        head = p["softmax_head"]
        return FeedforwardNet(layers, decode_array(head["weights"]), decode_array(head["biases"]),
                              _opt_shape(p, version), dict(p.get("meta", {})))
    if kind == "DecisionTree":
        return _untree(p)
    if kind == "Forest":
        return Forest([_untree(t) for t in p["trees"]],
                      [decode_array(s, "int64") for s in p.get("samples", [])])
    raise SchemaError(f"unknown object kind {kind!r}")


def _untree(p):
    return DecisionTree(decode_array(p["filters"]), decode_array(p["biases"]), p["children"],
                        decode_array(p["histograms"]))


# --- documents ----------------------------------------------------------------

def _canonical(payload):
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_document(obj) -> str:
    kind, payload = _encode(obj)
    doc = {"format": FORMAT, "version": VERSION, "kind": kind, "payload": payload,
           "checksum": hashlib.sha256(_canonical(payload)).hexdigest()}
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def from_document(text: str, expect=None):
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptFileError(f"not a readable document: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CorruptFileError("missing drmkit format marker")
    version = doc.get("version")
    if version not in READABLE_VERSIONS:
        raise VersionMismatchError(f"format version {version!r}; this reader handles "
                                   f"{list(READABLE_VERSIONS)}")
    payload, kind = doc.get("payload"), doc.get("kind")
    if not isinstance(payload, dict) or not isinstance(kind, str):
        raise SchemaError("document needs a 'kind' and a 'payload' object")
    if version >= 2:
        if hashlib.sha256(_canonical(payload)).hexdigest() != doc.get("checksum"):
            raise CorruptFileError("payload checksum mismatch")
    try:
        obj = _decode(kind, payload, version)
    except SchemaError:
        raise
    except (KeyError, TypeError, IndexError) as exc:
        raise SchemaError(f"{kind} payload missing or malformed field: {exc}") from exc
    except ValidationError as exc:
        raise SchemaError(f"{kind} payload violates invariants: {exc}") from exc
    if expect is not None and not isinstance(obj, expect):
        raise SchemaError(f"expected {getattr(expect, '__name__', expect)}, found {kind}")
    return obj


def atomic_write(path, data: bytes):
    """Write through a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(obj, path):
    atomic_write(path, to_document(obj).encode("utf-8"))


def load(path, expect=None):
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise DRMError(f"cannot read {path}: {exc}") from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptFileError(f"{path} is not UTF-8") from exc
    return from_document(text, expect)


# --- datasets -------------------------------------------------------------------

@dataclass(eq=False)
class Dataset:
    """Images ``(N, C, H, W)``, integer labels and optional true paths ``(N, L+1)``."""

    images: np.ndarray
    labels: np.ndarray
    paths: Optional[np.ndarray] = None
    seed: Optional[int] = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim == 2:
            self.images = self.images.reshape(self.images.shape[0], 1, 1, -1)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.paths is not None:
            self.paths = np.asarray(self.paths, dtype=np.int64)
        problems = []
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            problems.append("images must be a non-empty (N, C, H, W) array")
        elif self.labels.shape != (self.images.shape[0],):
            problems.append("one label per image required")
        elif self.labels.min() < 0:
            problems.append("labels must be non-negative")
        if self.paths is not None and (self.paths.ndim != 2 or self.paths.shape[0] != self.labels.size):
            problems.append("paths must be (N, L+1)")
        if problems:
            raise ValidationError(problems)

    @property
    def n(self):
        return self.images.shape[0]

    @property
    def flat(self):
        return self.images.reshape(self.n, -1)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        same_paths = ((self.paths is None and other.paths is None) or
                      (self.paths is not None and other.paths is not None
                       and np.array_equal(self.paths, other.paths)))
        return (np.array_equal(self.images, other.images) and np.array_equal(self.labels, other.labels)
                and same_paths and self.seed == other.seed and self.config == other.config)


def dataset_bytes(ds: Dataset) -> bytes:
    header = {"n": int(ds.n), "image_shape": list(ds.images.shape[1:]), "dtype": "float32-le",
              "label_dtype": "int64-le", "paths": None if ds.paths is None else list(ds.paths.shape),
              "seed": ds.seed, "generator": ds.config}
    h = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [DATA_MAGIC, struct.pack("<Q", len(h)), h,
             ds.images.astype("<f4").tobytes(), ds.labels.astype("<i8").tobytes()]
    if ds.paths is not None:
        parts.append(ds.paths.astype("<i8").tobytes())
    return b"".join(parts)


def save_dataset(ds: Dataset, path, manifest=True):
    data = dataset_bytes(ds)
    atomic_write(path, data)
    if manifest:
        m = {"file": os.path.basename(os.fspath(path)), "sha256": hashlib.sha256(data).hexdigest(),
             "bytes": len(data)}
        atomic_write(manifest_path(path), (json.dumps(m, sort_keys=True, indent=1) + "\n").encode())


def manifest_path(path):
    return os.fspath(path) + ".manifest.json"


def load_dataset(path, verify=True) -> Dataset:
    """Read a dataset; when a manifest exists next to it, its checksum must match."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise DRMError(f"cannot read {path}: {exc}") from exc
    if verify and os.path.exists(manifest_path(path)):
        try:
            with open(manifest_path(path)) as f:
                want = json.load(f)["sha256"]
        except (OSError, ValueError, KeyError) as exc:
            raise CorruptFileError(f"unreadable manifest for {path}") from exc
        if hashlib.sha256(raw).hexdigest() != want:
            raise CorruptFileError(f"{path} does not match its manifest checksum")
    return parse_dataset(raw)


def parse_dataset(raw: bytes) -> Dataset:
    if len(raw) < 16 or raw[:8] != DATA_MAGIC:
        raise CorruptFileError("bad dataset magic")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CorruptFileError("truncated dataset header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        n = int(header["n"])
        shape = tuple(int(s) for s in header["image_shape"])
        pshape = header.get("paths")
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CorruptFileError(f"unreadable dataset header: {exc}") from exc
    if header.get("dtype") != "float32-le":
        raise SchemaError(f"unsupported image dtype {header.get('dtype')!r}")
    d = int(np.prod(shape))
    off = 16 + hlen
    need = off + 4 * n * d + 8 * n + (8 * int(np.prod(pshape)) if pshape else 0)
    if len(raw) != need:
        raise CorruptFileError(f"dataset body has {len(raw)} bytes, expected {need}")
    images = np.frombuffer(raw, "<f4", n * d, off).astype(np.float64).reshape((n,) + shape)
    off += 4 * n * d
    labels = np.frombuffer(raw, "<i8", n, off).astype(np.int64)
    off += 8 * n
    paths = (np.frombuffer(raw, "<i8", int(np.prod(pshape)), off).astype(np.int64).reshape(pshape)
             if pshape else None)
    try:
        return Dataset(images, labels, paths, header.get("seed"), header.get("generator") or {})
    except ValidationError as exc:
        raise SchemaError(str(exc)) from exc
