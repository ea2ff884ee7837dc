"""Binary weight container.

Layout (little-endian): magic ``b"S3MW"``, version u32, count u32, then per
entry: name length u32, utf-8 name, rank u32, dims u32 x rank, f64 payload.
"""

from __future__ import annotations

import struct
from dataclasses import fields, is_dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ShapeMismatch, WeightFormatError
from .tensor import Tensor

MAGIC = b"S3MW"
VERSION = 1


def dumps(entries: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise WeightFormatError("bad magic")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise WeightFormatError(f"unsupported version {version}")
    pos = 12
    entries: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims)
            pos += 8 * size
            entries[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as e:
        raise WeightFormatError(f"truncated container: {e}") from None
    if pos != len(buf):
        raise WeightFormatError("trailing bytes after last entry")
    return entries


def save(path, entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(entries))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def named_tensors(obj, prefix: str) -> dict[str, Tensor]:
    """Walk dataclass fields (and lists of dataclasses) collecting tensors by dotted name."""
    found: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        found[prefix] = obj
    elif is_dataclass(obj):
        for f in fields(obj):
            found.update(named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}"))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            found.update(named_tensors(item, f"{prefix}.{i}"))
    return found


def state_dict(obj, prefix: str) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in named_tensors(obj, prefix).items()}


def load_into(obj, prefix: str, entries: Mapping[str, np.ndarray], strict: bool = True) -> None:
    for name, t in named_tensors(obj, prefix).items():
        if name not in entries:
            if strict:
                raise WeightFormatError(f"missing weight {name}")
            continue
        arr = entries[name]
        if arr.shape != t.shape:
            raise ShapeMismatch(f"{name}: stored {arr.shape}, expected {t.shape}")
        t.data = np.array(arr, dtype=t.data.dtype)
