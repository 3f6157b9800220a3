"""Binary checkpoint format.

Layout, all integers little-endian::

    b"AMCK"                       magic
    uint32  version               (1)
    uint32  n                     byte length of the config snapshot
    n bytes UTF-8 JSON            {"kind", "model", "train", "meta"}
    uint32  count                 number of parameter tensors
    count x:
        uint16 name length, name bytes (UTF-8)
        uint8  ndim, ndim x uint32 extents
        float32 little-endian values, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig, TrainConfig
from .errors import IngestionError, IntegrityError
from .model import AttentiveMatcher, TemplateMatcher
from .params import ModelParams, param_shapes
from .tensor import Tensor

MAGIC = b"AMCK"
VERSION = 1


def save_checkpoint(path, model, train_cfg: TrainConfig | None = None, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "kind": model.kind,
        "model": model.config.to_dict() if hasattr(model, "config") else {"scale": model.scale},
        "train": train_cfg.to_dict() if train_cfg is not None else None,
        "meta": meta or {},
    }
    blob = json.dumps(snapshot, sort_keys=True).encode("utf-8")
    tensors = model.params.tensors if hasattr(model, "params") else {}
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise IntegrityError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path):
    """Return ``(snapshot dict, {name: float32 array})``."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"checkpoint {path} does not exist")
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (bad magic)")
    version, n = r.unpack("<II")
    if version != VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {version}")
    try:
        snapshot = json.loads(r.take(n).decode("utf-8"))
    except ValueError as exc:
        raise IntegrityError(f"{path}: corrupt config snapshot ({exc})") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode("utf-8")
        (nd,) = r.unpack("<B")
        shape = r.unpack(f"<{nd}I") if nd else ()
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.data):
        raise IntegrityError(f"{path}: trailing bytes after parameter table")
    return snapshot, arrays


def load_checkpoint(path):
    """Rebuild the scorer stored at ``path``; returns ``(model, snapshot)``."""
    snapshot, arrays = read_checkpoint(path)
    kind = snapshot.get("kind", "attentive_matcher")
    if kind == "template":
        return TemplateMatcher(**snapshot.get("model", {})), snapshot
    if kind != "attentive_matcher":
        raise IntegrityError(f"{path}: unknown model kind {kind!r}")
    cfg = ModelConfig.from_dict(snapshot["model"])
    expected = param_shapes(cfg)
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise IntegrityError(f"{path}: parameter table does not match its config (missing {missing[:3]}, extra {extra[:3]})")
    tensors = {}
    for name, shape in expected.items():
        if tuple(arrays[name].shape) != tuple(shape):
            raise IntegrityError(f"{path}: {name} has shape {arrays[name].shape}, config implies {shape}")
        tensors[name] = Tensor(arrays[name], requires_grad=True)
    return AttentiveMatcher(ModelParams(cfg, tensors)), snapshot
