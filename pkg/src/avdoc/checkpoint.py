"""Binary checkpoint container with a JSON sidecar.

Layout, all little-endian:

    magic "DVLM" | version u32 | stage-tag (u32 length + UTF-8)
    | seed u64 | parameter count u32 | entries...

Each entry: name (u32 length + UTF-8), dtype code u8 (0 = float32,
1 = float64), rank u32, one u32 extent per dimension, then the
row-major payload. Arrays round-trip bit-exactly.

Run bookkeeping that is not a parameter (loss history, step count,
stage lineage, model configuration, adapter hyperparameters) lives in
a JSON sidecar at ``<path>.meta.json`` with sorted keys and no
timestamps, so rewriting an identical checkpoint yields identical
bytes in both files.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
from typing import Dict, Optional

import numpy as np

from .errors import ContractError, DataFormatError

MAGIC = b"DVLM"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclasses.dataclass
class CheckpointData:
    stage: str
    seed: int
    params: Dict[str, np.ndarray]
    meta: Optional[dict] = None


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via a sibling temp file and rename, never a partial file."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def meta_path(path: str) -> str:
    return path + ".meta.json"


def save_checkpoint(path: str, ckpt: CheckpointData) -> None:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    stage = ckpt.stage.encode("utf-8")
    parts.append(struct.pack("<I", len(stage)))
    parts.append(stage)
    if ckpt.seed < 0:
        raise ContractError("checkpoint seed must be non-negative")
    parts.append(struct.pack("<Q", ckpt.seed))
    parts.append(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        if arr.dtype not in _CODES:
            raise ContractError(f"{name}: dtype {arr.dtype} not storable")
        if arr.ndim not in (1, 2):
            raise ContractError(f"{name}: rank {arr.ndim} not storable")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", _CODES[arr.dtype]))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    atomic_write_bytes(path, b"".join(parts))
    if ckpt.meta is not None:
        atomic_write_text(meta_path(path),
                          json.dumps(ckpt.meta, sort_keys=True, indent=1) + "\n")


class _Reader:
    def __init__(self, blob: bytes, origin: str):
        self.blob = blob
        self.pos = 0
        self.origin = origin

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataFormatError(f"{self.origin}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def text(self) -> str:
        n = self.u32()
        if n > 1 << 20:
            raise DataFormatError(f"{self.origin}: implausible string length {n}")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataFormatError(f"{self.origin}: bad UTF-8: {exc}") from exc


def load_checkpoint(path: str) -> CheckpointData:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint file")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported format version {version}")
    stage = r.text()
    seed = r.u64()
    count = r.u32()
    params: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.text()
        code = r.u8()
        if code not in _DTYPES:
            raise DataFormatError(f"{path}: unknown dtype code {code}")
        rank = r.u32()
        if rank not in (1, 2):
            raise DataFormatError(f"{path}: parameter rank {rank} unsupported")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        if any(e == 0 for e in shape):
            raise DataFormatError(f"{path}: zero extent in {name}")
        dtype = _DTYPES[code]
        payload = r.take(int(np.prod(shape)) * dtype.itemsize)
        if name in params:
            raise DataFormatError(f"{path}: duplicate parameter {name}")
        params[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if r.pos != len(blob):
        raise DataFormatError(f"{path}: {len(blob) - r.pos} trailing bytes")

    meta = None
    mp = meta_path(path)
    if os.path.exists(mp):
        try:
            with open(mp, "r", encoding="utf-8") as fh:
                meta = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"{mp}: unreadable sidecar: {exc}") from exc
    return CheckpointData(stage, seed, params, meta)
