"""Little-endian binary containers.

``PFNT``  tensor:       magic, u8 version, u8 ndim, ndim x u32 extents, f32 payload
``PFNM``  model:        magic, u8 version, u32 count, count x (u16 name length,
                        name bytes, PFNT), then an optional JSON config trailer
                        (u32 length + UTF-8 bytes) for fields not implied by shapes
``PFND``  dataset:      magic, u8 version, u32 samples, u16 C, per sample
                        PFNT image, PFNT labels, PFNT instance ids, u16 boxes,
                        boxes x 5 f32 (category, lx, ly, rx, ry), PFNT counts
``PFNP``  predictions:  magic, u8 version, u32 samples, per sample PFNT labels,
                        PFNT locations, PFNT counts, u8 flag, [PFNT probs]
``PFNI``  instances:    magic, u8 version, u32 samples, per sample u16 count,
                        count x (u16 category, f32 score, PFNT mask)

Box ``j`` of a dataset sample belongs to instance id ``j + 1``.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

VERSION = 1


class FormatError(ValueError):
    """Raised on bad magic, unsupported version or truncated payloads."""


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.buf = memoryview(data)
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated (wanted {n} bytes at offset {self.pos})")
        out = bytes(self.buf[self.pos : self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def magic(self, magic: bytes) -> int:
        got = self.take(4)
        if got != magic:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {magic!r}")
        (version,) = self.unpack("<B")
        if version != VERSION:
            raise FormatError(f"{self.what}: unsupported version {version}")
        return version

    def at_end(self) -> bool:
        return self.pos == len(self.buf)


# -- PFNT ---------------------------------------------------------------------


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    out = io.BytesIO()
    out.write(b"PFNT")
    out.write(struct.pack("<BB", VERSION, arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


def _read_tensor(r: _Reader) -> np.ndarray:
    r.magic(b"PFNT")
    (ndim,) = r.unpack("<B")
    shape = r.unpack(f"<{ndim}I")
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    payload = r.take(4 * count)
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def tensor_from_bytes(data: bytes) -> np.ndarray:
    r = _Reader(data, "PFNT")
    arr = _read_tensor(r)
    if not r.at_end():
        raise FormatError("PFNT: trailing bytes")
    return arr


def save_tensor(arr: np.ndarray, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(read_file(path))


def read_file(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


# -- PFNM ---------------------------------------------------------------------


def model_to_bytes(model) -> bytes:
    out = io.BytesIO()
    out.write(b"PFNM")
    out.write(struct.pack("<BI", VERSION, len(model)))
    for name in model.names():
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(tensor_to_bytes(model[name].data))
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    out.write(struct.pack("<I", len(cfg)))
    out.write(cfg)
    return out.getvalue()


def model_from_bytes(data: bytes):
    from .net import ModelParams, NetConfig

    r = _Reader(data, "PFNM")
    r.magic(b"PFNM")
    (count,) = r.unpack("<I")
    named = []
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        named.append((name, _read_tensor(r)))
    if r.at_end():
        raise FormatError("PFNM: missing config trailer")
    (n,) = r.unpack("<I")
    try:
        cfg = NetConfig.from_dict(json.loads(r.take(n).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"PFNM: bad config trailer: {exc}") from exc
    model = ModelParams(cfg)
    for name, arr in named:
        model.add(name, arr)
    return model


def save_model(model, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path):
    return model_from_bytes(read_file(path))


# -- PFND ---------------------------------------------------------------------


def dataset_to_bytes(samples: Sequence, num_categories: Optional[int] = None) -> bytes:
    if num_categories is None:
        num_categories = samples[0].num_categories if samples else 0
    out = io.BytesIO()
    out.write(b"PFND")
    out.write(struct.pack("<BIH", VERSION, len(samples), num_categories))
    for s in samples:
        ids = sorted(s.boxes)
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError("instance ids must be 1..n to serialise boxes positionally")
        out.write(tensor_to_bytes(s.image))
        out.write(tensor_to_bytes(s.labels))
        out.write(tensor_to_bytes(s.instance_ids))
        out.write(struct.pack("<H", len(ids)))
        for iid in ids:
            cat, (lx, ly, rx, ry) = s.boxes[iid]
            out.write(struct.pack("<5f", cat, lx, ly, rx, ry))
        out.write(tensor_to_bytes(s.counts))
    return out.getvalue()


def dataset_from_bytes(data: bytes):
    from .synth import Sample

    r = _Reader(data, "PFND")
    r.magic(b"PFND")
    n, _c = r.unpack("<IH")
    samples = []
    for _ in range(n):
        image = _read_tensor(r)
        labels = _read_tensor(r).astype(np.uint16)
        ids = _read_tensor(r).astype(np.uint16)
        (nb,) = r.unpack("<H")
        boxes = {}
        for j in range(nb):
            cat, lx, ly, rx, ry = r.unpack("<5f")
            boxes[j + 1] = (int(cat), (float(lx), float(ly), float(rx), float(ry)))
        counts = _read_tensor(r)
        samples.append(Sample(image, labels, ids, boxes, counts))
    if not r.at_end():
        raise FormatError("PFND: trailing bytes")
    return samples


def save_dataset(samples: Sequence, path, num_categories: Optional[int] = None) -> None:
    Path(path).write_bytes(dataset_to_bytes(samples, num_categories))


def load_dataset(path):
    return dataset_from_bytes(read_file(path))


# -- PFNP ---------------------------------------------------------------------


class Prediction(NamedTuple):
    labels: np.ndarray  # H x W
    locations: np.ndarray  # dims x H x W
    counts: np.ndarray  # C
    probs: Optional[np.ndarray] = None  # (C+1) x H x W


def predictions_to_bytes(preds: Sequence[Prediction]) -> bytes:
    out = io.BytesIO()
    out.write(b"PFNP")
    out.write(struct.pack("<BI", VERSION, len(preds)))
    for p in preds:
        out.write(tensor_to_bytes(p.labels))
        out.write(tensor_to_bytes(p.locations))
        out.write(tensor_to_bytes(p.counts))
        out.write(struct.pack("<B", 0 if p.probs is None else 1))
        if p.probs is not None:
            out.write(tensor_to_bytes(p.probs))
    return out.getvalue()


def predictions_from_bytes(data: bytes) -> list[Prediction]:
    r = _Reader(data, "PFNP")
    r.magic(b"PFNP")
    (n,) = r.unpack("<I")
    out = []
    for _ in range(n):
        labels = _read_tensor(r)
        locs = _read_tensor(r)
        counts = _read_tensor(r)
        (flag,) = r.unpack("<B")
        if flag not in (0, 1):
            raise FormatError(f"PFNP: bad presence flag {flag}")
        probs = _read_tensor(r) if flag else None
        out.append(Prediction(labels, locs, counts, probs))
    if not r.at_end():
        raise FormatError("PFNP: trailing bytes")
    return out


def save_predictions(preds: Sequence[Prediction], path) -> None:
    Path(path).write_bytes(predictions_to_bytes(preds))


def load_predictions(path) -> list[Prediction]:
    return predictions_from_bytes(read_file(path))


# -- PFNI ---------------------------------------------------------------------


def instances_to_bytes(per_image: Sequence[Sequence]) -> bytes:
    out = io.BytesIO()
    out.write(b"PFNI")
    out.write(struct.pack("<BI", VERSION, len(per_image)))
    for insts in per_image:
        out.write(struct.pack("<H", len(insts)))
        for cat, mask, score in insts:
            out.write(struct.pack("<Hf", int(cat), float(score)))
            out.write(tensor_to_bytes(np.asarray(mask, dtype=np.float32)))
    return out.getvalue()


def instances_from_bytes(data: bytes):
    from .decoder import Instance

    r = _Reader(data, "PFNI")
    r.magic(b"PFNI")
    (n,) = r.unpack("<I")
    out = []
    for _ in range(n):
        (k,) = r.unpack("<H")
        insts = []
        for _ in range(k):
            cat, score = r.unpack("<Hf")
            insts.append(Instance(int(cat), _read_tensor(r) > 0.5, float(score)))
        out.append(insts)
    if not r.at_end():
        raise FormatError("PFNI: trailing bytes")
    return out


def save_instances(per_image, path) -> None:
    Path(path).write_bytes(instances_to_bytes(per_image))


def load_instances(path):
    return instances_from_bytes(read_file(path))
