"""Versioned binary checkpoint container: named float32 arrays + JSON metadata.

Layout (all integers little-endian):
    magic      8 bytes  b"RMCKPT\\x00\\x01"
    version    u32
    meta_len   u32, then meta_len bytes of UTF-8 JSON metadata
    n_arrays   u32
    per array:
        name_len u32, name bytes
        ndim     u32, ndim x u64 shape dims
        byte_len u64, then raw little-endian float32 payload

Round trips are bit-exact for every array.
"""

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointFormatError

MAGIC = b"RMCKPT\x00\x01"
VERSION = 1


def save_arrays(path, meta: dict, arrays: dict[str, torch.Tensor]) -> None:
    path = Path(path)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(arrays)))
        for name, tensor in arrays.items():
            # np.ascontiguousarray would promote 0-dim arrays to 1-dim and
            # lose the shape; tobytes() below copies in C order anyway.
            arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<Q", d))
            payload = arr.tobytes()
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointFormatError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def load_arrays(path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = _read_exact(f, len(MAGIC))
        if magic != MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise CheckpointFormatError(
                f"unsupported checkpoint version {version}, expected {VERSION}"
            )
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4))
        meta = json.loads(_read_exact(f, meta_len).decode("utf-8"))
        (n_arrays,) = struct.unpack("<I", _read_exact(f, 4))
        arrays = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4))
            shape = tuple(
                struct.unpack("<Q", _read_exact(f, 8))[0] for _ in range(ndim)
            )
            (byte_len,) = struct.unpack("<Q", _read_exact(f, 8))
            expected = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
            if byte_len != expected:
                raise CheckpointFormatError(
                    f"array {name!r}: declared {byte_len} bytes, shape implies {expected}"
                )
            payload = _read_exact(f, byte_len)
            arr = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
            arrays[name] = torch.from_numpy(arr)
    return meta, arrays
