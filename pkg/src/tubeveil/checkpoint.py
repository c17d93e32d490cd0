"""Binary checkpoint files.

Layout: 4-byte magic "STPV", u32 format version, u64 metadata length,
UTF-8 JSON metadata, then one record per tensor:

    u16 name length | name bytes | u8 dtype code | u8 ndim
    | ndim x u64 dims | raw little-endian payload

The metadata carries the tensor count, the config snapshot, the phase
and epoch, and the rng state, so a load resumes exactly where the save
left off.  Bad magic, unknown version and short files each raise their
own error type so callers can tell corruption from version skew.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["Checkpoint", "CheckpointError", "BadMagicError", "VersionError",
           "TruncatedError", "save_checkpoint", "load_checkpoint", "MAGIC", "VERSION"]

MAGIC = b"STPV"
VERSION = 1

_DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.int64): 2,
    np.dtype(np.uint8): 3,
    np.dtype(np.int32): 4,
    np.dtype(np.uint32): 5,
    np.dtype(np.uint64): 6,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(RuntimeError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    metadata: dict
    tensors: dict[str, np.ndarray]


def save_checkpoint(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    metadata = dict(metadata or {})
    metadata["tensor_count"] = len(tensors)
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(meta_bytes)))
        f.write(meta_bytes)
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            shape = arr.shape          # ascontiguousarray promotes 0-d to 1-d
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name}")
            nb = name.encode("utf-8")
            if len(nb) > 0xFFFF:
                raise CheckpointError(f"tensor name too long: {name[:40]}...")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], len(shape)))
            f.write(struct.pack(f"<{len(shape)}Q", *shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _need(buf: bytes, pos: int, count: int, what: str) -> int:
    if pos + count > len(buf):
        raise TruncatedError(f"file ends inside {what} (need {count} bytes at offset {pos})")
    return pos + count


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    pos = 0
    end = _need(buf, pos, 4, "magic")
    if buf[pos:end] != MAGIC:
        raise BadMagicError(f"not a checkpoint file: magic {buf[pos:end]!r}")
    pos = end
    end = _need(buf, pos, 4, "version")
    (version,) = struct.unpack("<I", buf[pos:end])
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    pos = end
    end = _need(buf, pos, 8, "metadata length")
    (meta_len,) = struct.unpack("<Q", buf[pos:end])
    pos = end
    end = _need(buf, pos, meta_len, "metadata")
    metadata = json.loads(buf[pos:end].decode("utf-8"))
    pos = end

    tensors: dict[str, np.ndarray] = {}
    while pos < len(buf):
        end = _need(buf, pos, 2, "record name length")
        (name_len,) = struct.unpack("<H", buf[pos:end])
        pos = end
        end = _need(buf, pos, name_len, "record name")
        name = buf[pos:end].decode("utf-8")
        pos = end
        end = _need(buf, pos, 2, "record header")
        code, ndim = struct.unpack("<BB", buf[pos:end])
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} in record {name}")
        pos = end
        end = _need(buf, pos, 8 * ndim, "record dims")
        shape = struct.unpack(f"<{ndim}Q", buf[pos:end])
        pos = end
        dtype = _CODE_DTYPES[code]
        payload = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        end = _need(buf, pos, payload, f"record payload for {name}")
        arr = np.frombuffer(buf[pos:end], dtype=dtype.newbyteorder("<")).astype(dtype)
        tensors[name] = arr.reshape(shape)
        pos = end

    expected = metadata.get("tensor_count")
    if expected is not None and expected != len(tensors):
        raise TruncatedError(f"metadata lists {expected} tensors, file holds {len(tensors)}")
    return Checkpoint(metadata=metadata, tensors=tensors)
