"""Versioned checkpoint container.

Layout: ``b"FOFACKPT"``, u16 version, u32 header length, a JSON header with
sorted keys (configs, RNG state, tensor index), the raw little-endian float32
tensor data in index order, then a CRC32 of everything before it. Writing the
same content twice gives the same bytes.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .model import ForwardOFA, ModelConfig
from .rng import RngState

MAGIC = b"FOFACKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    arrays: dict[str, np.ndarray]
    train_config: dict | None = None
    rng: dict | None = None
    meta: dict = field(default_factory=dict)

    def model(self) -> ForwardOFA:
        cfg = ModelConfig.from_dict(self.model_config)
        model = ForwardOFA.init(cfg, 0)
        model.load_arrays({k: v for k, v in self.arrays.items() if not k.startswith("adam.")})
        return model

    def rng_state(self) -> RngState | None:
        return None if self.rng is None else RngState.from_dict(self.rng)


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def to_bytes(ckpt: Checkpoint) -> bytes:
    index, blobs, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f4")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = _dumps({"model_config": ckpt.model_config, "train_config": ckpt.train_config,
                     "rng": ckpt.rng, "meta": ckpt.meta, "tensors": index})
    body = MAGIC + struct.pack("<HI", VERSION, len(header)) + header + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(blob: bytes) -> Checkpoint:
    fixed = len(MAGIC) + 6
    if len(blob) < fixed + 4:
        raise CheckpointError("checkpoint truncated")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    version, hlen = struct.unpack("<HI", blob[len(MAGIC):fixed])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(body[fixed:fixed + hlen])
    data = body[fixed + hlen:]
    arrays = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(data):
            raise CheckpointError(f"tensor {entry['name']} runs past the end of the data")
        arr = np.frombuffer(data, dtype="<f4", count=n // 4, offset=start).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.float32)
    return Checkpoint(header["model_config"], arrays, header["train_config"], header["rng"], header["meta"])


def capture(model: ForwardOFA, train_config=None, rng: RngState | None = None, optimizer=None,
            meta: dict | None = None) -> Checkpoint:
    arrays = {name: t.data for name, t in model.named_tensors().items()}
    if optimizer is not None:
        arrays.update(optimizer.state())
    tc = train_config.to_dict() if hasattr(train_config, "to_dict") else train_config
    return Checkpoint(model.cfg.to_dict(), arrays, tc, None if rng is None else rng.to_dict(), dict(meta or {}))


def save(path: str | os.PathLike, ckpt: Checkpoint) -> int:
    blob = to_bytes(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return len(blob)


def load(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
