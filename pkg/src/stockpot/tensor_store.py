"""Reading, writing and schema checks for the checkpoint container.

File layout::

    [u64 little-endian header length H][H bytes UTF-8 JSON header][data]

The header maps each tensor name to ``{"dtype", "shape", "data_offsets"}``
(offsets relative to the data region) plus an optional ``"__metadata__"``
string-to-string object. This is the same layout framework exporters use
for ``.safetensors`` files, so those load without conversion.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

MAX_HEADER_BYTES = 100 * 1024 * 1024
METADATA_KEY = "__metadata__"

ITEMSIZE = {"F16": 2, "BF16": 2, "F32": 4, "F64": 8}
_NUMPY_DTYPE = {"F16": np.dtype("<f2"), "F32": np.dtype("<f4"), "F64": np.dtype("<f8")}


class FormatError(ValueError):
    """A container file (or in-memory record) violates the format rules."""

    def __init__(self, message: str, tensor: Optional[str] = None):
        self.tensor = tensor
        if tensor is not None:
            message = f"tensor {tensor!r}: {message}"
        super().__init__(message)


class SchemaError(ValueError):
    """Checkpoints that must share a schema do not."""


def _name_key(name: str) -> bytes:
    return name.encode("utf-8")


def _numel(shape: Sequence[int]) -> int:
    return math.prod(shape)


def decode(data: bytes, dtype: str, shape: Sequence[int]) -> np.ndarray:
    """Raw little-endian bytes to a float64 array of ``shape``."""
    if dtype == "BF16":
        bits = np.frombuffer(data, dtype="<u2").astype(np.uint32) << 16
        values = bits.view(np.float32).astype(np.float64)
    else:
        values = np.frombuffer(data, dtype=_NUMPY_DTYPE[dtype]).astype(np.float64)
    return values.reshape(tuple(shape))


def _round_bf16(x: np.ndarray) -> np.ndarray:
    # Round float64 directly to bfloat16 bit patterns (nearest, ties to even).
    # Going through float32 first would double-round.
    x = np.ascontiguousarray(x, dtype=np.float64).ravel()
    out = np.empty(x.size, dtype=np.uint16)
    nan = np.isnan(x)
    tiny = np.abs(x) < 2.0**-126
    normal = ~nan & ~tiny

    bits = x[normal].view(np.uint64)
    lsb = (bits >> np.uint64(45)) & np.uint64(1)
    bits = (bits + np.uint64((1 << 44) - 1) + lsb) & ~np.uint64((1 << 45) - 1)
    with np.errstate(over="ignore"):
        f32 = bits.view(np.float64).astype(np.float32)
    out[normal] = (f32.view(np.uint32) >> 16).astype(np.uint16)

    sub = np.rint(x[tiny] * 2.0**133) * 2.0**-133
    out[tiny] = (sub.astype(np.float32).view(np.uint32) >> 16).astype(np.uint16)
    out[nan] = 0x7FC0
    return out


def encode(values: np.ndarray, dtype: str) -> bytes:
    """Float values to raw little-endian bytes, rounding to nearest-even."""
    if dtype not in ITEMSIZE:
        raise FormatError(f"unknown dtype {dtype!r}")
    values = np.asarray(values)
    if dtype == "BF16":
        return _round_bf16(values).astype("<u2").tobytes()
    with np.errstate(over="ignore"):
        return np.ascontiguousarray(values, dtype=_NUMPY_DTYPE[dtype]).tobytes()


@dataclass(frozen=True)
class TensorRecord:
    name: str
    dtype: str
    shape: Tuple[int, ...]
    data: bytes = field(repr=False)

    def __post_init__(self):
        if not isinstance(self.name, str):
            raise FormatError("tensor name must be a string")
        if self.dtype not in ITEMSIZE:
            raise FormatError(f"unknown dtype {self.dtype!r}", self.name)
        shape = tuple(self.shape)
        if any(isinstance(d, bool) or not isinstance(d, (int, np.integer)) or d < 0 for d in shape):
            raise FormatError(f"invalid shape {list(shape)}", self.name)
        object.__setattr__(self, "shape", tuple(int(d) for d in shape))
        object.__setattr__(self, "data", bytes(self.data))
        expected = ITEMSIZE[self.dtype] * self.numel
        if len(self.data) != expected:
            raise FormatError(
                f"data holds {len(self.data)} bytes, {self.dtype}{list(self.shape)} needs {expected}",
                self.name,
            )

    @property
    def numel(self) -> int:
        return _numel(self.shape)

    @property
    def rank(self) -> int:
        return len(self.shape)

    @cached_property
    def values(self) -> np.ndarray:
        """Read-only float64 view of the tensor."""
        arr = decode(self.data, self.dtype, self.shape)
        arr.flags.writeable = False
        return arr

    @classmethod
    def from_array(cls, name: str, array, dtype: str = "F64") -> "TensorRecord":
        array = np.asarray(array)
        return cls(name, dtype, tuple(array.shape), encode(array, dtype))


@dataclass(frozen=True)
class Checkpoint:
    """Immutable, name-ordered collection of tensors plus string metadata."""

    tensors: Tuple[TensorRecord, ...] = ()
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        records = sorted(self.tensors, key=lambda r: _name_key(r.name))
        for prev, cur in zip(records, records[1:]):
            if prev.name == cur.name:
                raise FormatError("duplicate tensor name", cur.name)
        meta = dict(self.metadata or {})
        for k, v in meta.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise FormatError("metadata must map strings to strings")
        object.__setattr__(self, "tensors", tuple(records))
        object.__setattr__(self, "metadata", meta)

    @classmethod
    def from_arrays(
        cls,
        arrays: Mapping[str, np.ndarray],
        dtype="F64",
        metadata: Optional[Mapping[str, str]] = None,
    ) -> "Checkpoint":
        """Build from name -> array. ``dtype`` is one dtype or a name -> dtype map."""
        records = []
        for name, arr in arrays.items():
            dt = dtype if isinstance(dtype, str) else dtype[name]
            records.append(TensorRecord.from_array(name, arr, dt))
        return cls(tuple(records), metadata or {})

    @cached_property
    def _index(self) -> Dict[str, TensorRecord]:
        return {r.name: r for r in self.tensors}

    def __getitem__(self, name: str) -> TensorRecord:
        return self._index[name]

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def __iter__(self) -> Iterator[TensorRecord]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def names(self) -> List[str]:
        return [r.name for r in self.tensors]

    @property
    def schema(self) -> Dict[str, Tuple[int, ...]]:
        return {r.name: r.shape for r in self.tensors}

    @property
    def dtypes(self) -> Dict[str, str]:
        return {r.name: r.dtype for r in self.tensors}

    def arrays(self) -> Dict[str, np.ndarray]:
        return {r.name: r.values for r in self.tensors}

    @property
    def numel(self) -> int:
        return sum(r.numel for r in self.tensors)

    @cached_property
    def digest(self) -> str:
        """SHA-256 over names, dtypes, shapes and data. Metadata is excluded."""
        h = hashlib.sha256()
        for r in self.tensors:
            head = json.dumps([r.name, r.dtype, list(r.shape)], ensure_ascii=False)
            h.update(struct.pack("<Q", len(head.encode("utf-8"))))
            h.update(head.encode("utf-8"))
            h.update(r.data)
        return h.hexdigest()

    def with_metadata(self, metadata: Mapping[str, str]) -> "Checkpoint":
        return Checkpoint(self.tensors, metadata)


def serialize(ckpt: Checkpoint) -> bytes:
    header: Dict[str, object] = {}
    if ckpt.metadata:
        header[METADATA_KEY] = dict(sorted(ckpt.metadata.items()))
    offset = 0
    for r in ckpt.tensors:
        end = offset + len(r.data)
        header[r.name] = {"dtype": r.dtype, "shape": list(r.shape), "data_offsets": [offset, end]}
        offset = end
    raw = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    raw += b" " * (-len(raw) % 8)
    return struct.pack("<Q", len(raw)) + raw + b"".join(r.data for r in ckpt.tensors)


def _reject_duplicates(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise FormatError("duplicate tensor name", key)
        seen[key] = value
    return seen


def parse(buf: bytes) -> Checkpoint:
    if len(buf) < 8:
        raise FormatError("file shorter than the 8-byte header length")
    (hlen,) = struct.unpack("<Q", buf[:8])
    if hlen == 0:
        raise FormatError("empty header")
    if hlen > MAX_HEADER_BYTES:
        raise FormatError(f"header length {hlen} exceeds the {MAX_HEADER_BYTES}-byte cap")
    if 8 + hlen > len(buf):
        raise FormatError("header length runs past end of file")
    try:
        header = json.loads(buf[8 : 8 + hlen].decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except FormatError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed header JSON: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError("malformed header JSON: top level is not an object")

    data = memoryview(buf)[8 + hlen :]
    metadata = header.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise FormatError("__metadata__ must map strings to strings")

    spans = []
    records = []
    for name, entry in header.items():
        if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "data_offsets"}:
            raise FormatError("entry must have exactly dtype, shape, data_offsets", name)
        dtype, shape, offsets = entry["dtype"], entry["shape"], entry["data_offsets"]
        if dtype not in ITEMSIZE:
            raise FormatError(f"unknown dtype {dtype!r}", name)
        if not isinstance(shape, list) or any(
            isinstance(d, bool) or not isinstance(d, int) or d < 0 for d in shape
        ):
            raise FormatError(f"invalid shape {shape!r}", name)
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or any(isinstance(o, bool) or not isinstance(o, int) for o in offsets)
        ):
            raise FormatError(f"invalid data_offsets {offsets!r}", name)
        begin, end = offsets
        if begin < 0 or end < begin or end > len(data):
            raise FormatError(f"data_offsets {offsets} exceed the {len(data)}-byte data region", name)
        if end - begin != ITEMSIZE[dtype] * _numel(shape):
            raise FormatError(f"data_offsets {offsets} do not match {dtype}{shape}", name)
        spans.append((begin, end, name))
        records.append(TensorRecord(name, dtype, tuple(shape), bytes(data[begin:end])))

    spans.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0 and e1 > b1:
            raise FormatError(f"data_offsets overlap with {n0!r}", n1)
    return Checkpoint(tuple(records), metadata)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse(fh.read())


def atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write(path, serialize(ckpt))


@dataclass(frozen=True)
class Mismatch:
    tensor: str
    field: str
    values: Tuple[object, ...]


@dataclass(frozen=True)
class SchemaReport:
    compatible: bool
    mismatches: Tuple[Mismatch, ...] = ()

    def describe(self) -> str:
        return "; ".join(f"{m.tensor}: {m.field} {list(m.values)}" for m in self.mismatches)


def validate_schema(ensemble: Sequence[Checkpoint]) -> SchemaReport:
    if not ensemble:
        raise ValueError("validate_schema needs at least one checkpoint")
    names = sorted({n for c in ensemble for n in c.names}, key=_name_key)
    mismatches = []
    for name in names:
        present = [name in c for c in ensemble]
        if not all(present):
            mismatches.append(Mismatch(name, "present", tuple(present)))
            continue
        shapes = tuple(list(c[name].shape) for c in ensemble)
        if any(s != shapes[0] for s in shapes):
            mismatches.append(Mismatch(name, "shape", shapes))
        dtypes = tuple(c[name].dtype for c in ensemble)
        if any(d != dtypes[0] for d in dtypes):
            mismatches.append(Mismatch(name, "dtype", dtypes))
    return SchemaReport(not mismatches, tuple(mismatches))


def require_compatible(ensemble: Sequence[Checkpoint]) -> None:
    report = validate_schema(ensemble)
    if not report.compatible:
        raise SchemaError(f"incompatible checkpoints: {report.describe()}")
