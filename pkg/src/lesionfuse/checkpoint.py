"""Binary checkpoint format.

    magic       8 bytes  b"LFCKPT\\r\\n"
    version     uint32
    json_len    uint32, then a UTF-8 JSON blob {"config": ..., "extras": ...}
    n_tensors   uint32
    per tensor: name_len uint16, name, ndim uint8, dims uint32*ndim,
                float32 values (little-endian, row-major)

Every integer is little-endian.  Identical states give identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict

import numpy as np

from .errors import FormatError, ShapeError, VersionError
from .model import ModelBundle, ModelConfig, parameter_shapes
from .tensor import Tensor

MAGIC = b"LFCKPT\r\n"
VERSION = 1


def checkpoint_bytes(bundle: ModelBundle) -> bytes:
    meta = json.dumps({"config": bundle.config.to_dict(), "extras": bundle.extras},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors: Dict[str, np.ndarray] = OrderedDict((k, p.data) for k, p in bundle.params.items())
    for k in sorted(bundle.buffers):
        tensors[k] = bundle.buffers[k]
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def save_checkpoint(bundle: ModelBundle, path) -> None:
    """Atomic write: a crash mid-save never leaves a half-written file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(checkpoint_bytes(bundle))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> ModelBundle:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != MAGIC:
        raise VersionError(f"{path}: bad magic bytes, not a checkpoint")
    try:
        version, meta_len = struct.unpack_from("<II", blob, 8)
        if version != VERSION:
            raise VersionError(f"{path}: unsupported checkpoint version {version}")
        pos = 16
        meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tensors = OrderedDict()
        for _ in range(count):
            (k,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + k].decode("utf-8")
            pos += k
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if pos + 4 * n > len(blob):
                raise FormatError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos) \
                .reshape(shape).astype(np.float32)
            pos += 4 * n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc

    config = ModelConfig.from_dict(meta["config"]).validate()
    params = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name not in tensors:
            raise ShapeError(f"{path}: missing parameter {name}")
        if tensors[name].shape != shape:
            raise ShapeError(f"{path}: parameter {name} has shape {tensors[name].shape}, "
                             f"config implies {shape}")
        params[name] = Tensor(tensors.pop(name), requires_grad=True, name=name)
    return ModelBundle(config, params, meta.get("extras", {}), dict(tensors))
