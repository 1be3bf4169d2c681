"""Named parameter storage and the FTZ1 checkpoint format.

Layout (little-endian, no padding, no checksum)::

    b"FTZ1"  u32 count
    count x { u16 name_len, name (utf-8), u8 dtype, u8 frozen, u8 rank, rank x u64 extent }
    raw row-major tensor data, in manifest order

dtype codes: 0 = float32, 1 = float64.
"""
from __future__ import annotations

import hashlib
import os
import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"FTZ1"
NAMESPACES = ("anchor", "augment", "fusion", "connector", "lm")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    """Malformed checkpoint file or inconsistent parameter set."""


class ParameterStore:
    """Insertion-ordered mapping of names to tensors, each flagged frozen or trainable."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {}

    def add(self, name: str, data, frozen: bool = False) -> Tensor:
        if name in self._tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.name = name
        t.requires_grad = not frozen
        self._tensors[name] = t
        self._frozen[name] = bool(frozen)
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise CheckpointError(f"missing parameter {name!r}") from None

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self, prefix: str | None = None) -> list[str]:
        if prefix is None:
            return list(self._tensors)
        return [n for n in self._tensors if n == prefix or n.startswith(prefix + ".")]

    def items(self):
        return self._tensors.items()

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def set_frozen(self, name: str, frozen: bool) -> None:
        self._frozen[name] = bool(frozen)
        self._tensors[name].requires_grad = not frozen

    def frozen_names(self):
        return [n for n, f in self._frozen.items() if f]

    def trainable_names(self):
        return [n for n, f in self._frozen.items() if not f]

    def remove_prefix(self, prefix: str) -> None:
        for n in self.names(prefix):
            del self._tensors[n]
            del self._frozen[n]

    def update(self, other: "ParameterStore") -> None:
        for n, t in other.items():
            self.add(n, t, frozen=other.is_frozen(n))

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for n, t in self._tensors.items():
            out.add(n, Tensor(t.data.copy(), dtype=t.data.dtype), frozen=self._frozen[n])
        return out

    def sha256(self, prefixes=None) -> str:
        """Digest over names and raw bytes of the selected tensors."""
        h = hashlib.sha256()
        for n, t in self._tensors.items():
            if prefixes is None or n.split(".", 1)[0] in prefixes:
                h.update(n.encode())
                h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> None:
        for t in self._tensors.values():
            t.data = t.data.astype(dtype)


def save_checkpoint(params: ParameterStore, path) -> None:
    header = [MAGIC, struct.pack("<I", len(params))]
    blobs = []
    for name, t in params.items():
        dt = t.data.dtype
        if dt not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {dt}")
        raw = name.encode("utf-8")
        header.append(struct.pack("<H", len(raw)) + raw)
        header.append(struct.pack("<BBB", _CODES[dt], params.is_frozen(name), t.ndim))
        header.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        blobs.append(np.ascontiguousarray(t.data, dtype=_DTYPES[_CODES[dt]]).tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(header))
        fh.write(b"".join(blobs))
    os.replace(tmp, path)


def read_manifest(buf: bytes):
    """Parse the header; returns (records, data_offset). Each record is
    (name, dtype_code, frozen, shape)."""
    if len(buf) < 8:
        raise CheckpointError("truncated checkpoint header")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (count,) = struct.unpack_from("<I", buf, 4)
    off = 8
    records = []
    seen = set()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            if off + nlen > len(buf):
                raise CheckpointError("truncated checkpoint manifest")
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            code, frozen, rank = struct.unpack_from("<BBB", buf, off)
            off += 3
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            if code not in _DTYPES:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            if name in seen:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            seen.add(name)
            records.append((name, code, bool(frozen), tuple(shape)))
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint manifest") from exc
    return records, off


def load_checkpoint(path, dtype=None) -> ParameterStore:
    """Read a checkpoint; tensors keep their stored dtype unless ``dtype`` is given."""
    with open(path, "rb") as fh:
        buf = fh.read()
    records, off = read_manifest(buf)
    store = ParameterStore()
    for name, code, frozen, shape in records:
        dt = _DTYPES[code]
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(buf):
            raise CheckpointError(f"truncated tensor data for {name!r}")
        arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape)
        off += nbytes
        target = dtype or dt.newbyteorder("=")
        store.add(name, Tensor(arr.astype(target), dtype=target), frozen=frozen)
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after tensor data")
    return store
