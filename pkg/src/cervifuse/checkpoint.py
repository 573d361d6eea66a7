"""Binary checkpoint container.

Layout: magic ``CFCK``, version u32, then one record per tensor until EOF.
Record: name length u32 + UTF-8 name, dtype tag u8 (0 = f32, 1 = f64),
rank u32, dims as u64 each, then the row-major little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ArtifactError

MAGIC = b"CFCK"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            tag = _TAG_FOR_KIND.get(arr.dtype.newbyteorder("="))
            if tag is None:
                raise ArtifactError(
                    f"checkpoint tensors must be f32 or f64, {name} is {arr.dtype}")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BI", tag, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.astype(_DTYPE_TAGS[tag], copy=False).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 8 or data[:4] != MAGIC:
        raise ArtifactError(f"{path}: not a CFCK checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ArtifactError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> int:
        nonlocal pos
        if pos + n > len(data):
            raise ArtifactError(f"{path}: truncated checkpoint")
        pos += n
        return pos - n

    while pos < len(data):
        (name_len,) = struct.unpack_from("<I", data, take(4))
        name = data[take(name_len):pos].decode("utf-8")
        tag, rank = struct.unpack_from("<BI", data, take(5))
        dims = struct.unpack_from(f"<{rank}Q", data, take(8 * rank))
        dtype = _DTYPE_TAGS.get(tag)
        if dtype is None:
            raise ArtifactError(f"{path}: unknown dtype tag {tag} for {name}")
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(data, dtype=dtype, count=count,
                            offset=take(count * dtype.itemsize)).reshape(dims)
        out[name] = arr.astype(dtype.newbyteorder("="))
    return out
