"""Binary checkpoint format.

Layout: magic, u32 version, u32 length + JSON header (config, step, extras),
then for every tensor: u32 name length, name, u32 ndim, u32 dims, and a
little-endian payload.  Parameters live under ``params/``, EMA weights under
``ema/`` and Adam moments under ``adam_m/`` and ``adam_v/``.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelParams
from .tokens import NetConfig

MAGIC = b"TRKDIFF\0"
VERSION = 1
_DTYPES = {"f4": "<f4", "f8": "<f8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: NetConfig
    params: ModelParams
    ema: ModelParams | None = None
    adam_m: dict[str, np.ndarray] | None = None
    adam_v: dict[str, np.ndarray] | None = None
    step: int = 0
    extra: dict = field(default_factory=dict)


def _pack_tensor(fh, name: str, arr: np.ndarray) -> None:
    code = "f8" if arr.dtype == np.float64 else "f4"
    raw = name.encode()
    fh.write(struct.pack("<I", len(raw)) + raw)
    fh.write(code.encode())
    fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Write atomically (temp file then rename) so a crash never leaves a torn checkpoint."""
    path = Path(path)
    header = json.dumps({"config": ckpt.config.to_dict(), "step": ckpt.step, "extra": ckpt.extra},
                        sort_keys=True).encode()
    tensors: list[tuple[str, np.ndarray]] = [(f"params/{k}", v) for k, v in ckpt.params.values.items()]
    if ckpt.ema is not None:
        tensors += [(f"ema/{k}", v) for k, v in ckpt.ema.values.items()]
    for prefix, moments in (("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        if moments is not None:
            tensors += [(f"{prefix}/{k}", v) for k, v in moments.items()]
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _pack_tensor(fh, name, arr)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    off = len(MAGIC)
    try:
        version, hlen = struct.unpack_from("<II", data, off)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off += 8
        header = json.loads(data[off:off + hlen])
        off += hlen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    groups: dict[str, dict[str, np.ndarray]] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode()
            off += nlen
            code = data[off:off + 2].decode()
            off += 2
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            dtype = np.dtype(_DTYPES[code])
            size = int(np.prod(shape)) * dtype.itemsize
            if off + size > len(data):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=off).reshape(shape)
            off += size
            group, _, key = name.partition("/")
            groups.setdefault(group, {})[key] = arr.astype(dtype.newbyteorder("="))
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    config = NetConfig(**header["config"])
    ema = ModelParams(groups["ema"]) if "ema" in groups else None
    return Checkpoint(config, ModelParams(groups["params"]), ema, groups.get("adam_m"), groups.get("adam_v"),
                      int(header["step"]), header.get("extra", {}))
