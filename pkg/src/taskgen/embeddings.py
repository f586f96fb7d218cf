"""Per-sample embedding ingestion and reduction to class embeddings.

Two on-disk formats are supported:

* CSV with a ``class_id,f0,f1,...`` header, one sample per line.
* A little-endian binary format: magic ``ATGE``, ``u16`` version (1),
  ``u32`` number of samples, ``u32`` dim, then for every sample a ``u32``
  class id followed by ``dim`` float32 values.
"""
from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from taskgen.errors import (
    EmptyInputError,
    InconsistentWidthError,
    InvalidInputError,
    MalformedRowError,
    NonFiniteValueError,
    SampleParseError,
)

MAGIC = b"ATGE"
VERSION = 1
_HEADER = struct.Struct("<4sHII")
_U32_MAX = 2**32 - 1


def _frozen(arr):
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    """Sample embeddings in file order.

    ``vectors`` keeps the precision it was read with (float64 from CSV,
    float32 from the binary format) so that binary round trips are exact.
    """

    class_ids: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.class_ids)
        vecs = np.asarray(self.vectors)
        if vecs.ndim != 2 or vecs.shape[1] < 1:
            raise InvalidInputError("vectors must be a 2-D array with dim >= 1")
        if ids.shape != (vecs.shape[0],):
            raise InvalidInputError("one class id is required per sample")
        if ids.size and (not np.issubdtype(ids.dtype, np.integer) or ids.min() < 0):
            raise InvalidInputError("class ids must be non-negative integers")
        if vecs.dtype not in (np.float32, np.float64):
            vecs = vecs.astype(np.float64)
        object.__setattr__(self, "class_ids", _frozen(ids.astype(np.int64)))
        object.__setattr__(self, "vectors", _frozen(vecs))

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self):
        return int(self.class_ids.shape[0])

    def classes(self) -> np.ndarray:
        return np.unique(self.class_ids)

    def indices_of(self, class_id) -> np.ndarray:
        return np.flatnonzero(self.class_ids == class_id)


@dataclass(frozen=True, eq=False)
class ClassEmbeddingSet:
    """One (optionally unit-norm) mean embedding per class, rows sorted by id."""

    class_ids: np.ndarray
    means: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        ids = np.asarray(self.class_ids, dtype=np.int64)
        means = np.asarray(self.means, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] != ids.shape[0] or means.shape[0] == 0:
            raise InvalidInputError("means must be (M, dim) with one row per class id")
        if np.unique(ids).size != ids.size:
            raise InvalidInputError("class ids must be distinct")
        if not np.all(np.isfinite(means)):
            raise InvalidInputError("class embeddings must be finite")
        object.__setattr__(self, "class_ids", _frozen(ids))
        object.__setattr__(self, "means", _frozen(means))

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    def __len__(self):
        return int(self.class_ids.shape[0])


def _check_finite(values, where):
    for v in values:
        if not math.isfinite(v):
            raise NonFiniteValueError(f"non-finite value {v!r} at {where}")


def _load_csv(text: str) -> EmbeddingTable:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise EmptyInputError("no samples") from None
    header = [h.strip() for h in header]
    if len(header) < 2 or header[0] != "class_id":
        raise MalformedRowError("line 1: header must be 'class_id,f0,f1,...'")
    expected = [f"f{j}" for j in range(len(header) - 1)]
    if header[1:] != expected:
        raise MalformedRowError(f"line 1: feature columns must be named {expected[0]}..{expected[-1]}")
    dim = len(header) - 1

    ids, rows = [], []
    for row in reader:
        line = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != dim + 1:
            raise InconsistentWidthError(f"line {line}: expected {dim + 1} fields, got {len(row)}")
        try:
            cid = int(row[0])
        except ValueError:
            raise MalformedRowError(f"line {line}: class_id {row[0]!r} is not an integer") from None
        if cid < 0 or cid > _U32_MAX:
            raise MalformedRowError(f"line {line}: class_id {cid} out of range")
        try:
            vec = [float(cell) for cell in row[1:]]
        except ValueError as exc:
            raise MalformedRowError(f"line {line}: {exc}") from None
        _check_finite(vec, f"line {line}")
        ids.append(cid)
        rows.append(vec)
    if not rows:
        raise EmptyInputError("no samples")
    return EmbeddingTable(np.array(ids, dtype=np.int64), np.array(rows, dtype=np.float64))


def _load_binary(data: bytes) -> EmbeddingTable:
    if not data:
        raise EmptyInputError("no samples")
    if len(data) < _HEADER.size:
        raise MalformedRowError(f"offset 0: truncated header ({len(data)} bytes)")
    magic, version, n, dim = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise MalformedRowError(f"offset 0: bad magic {magic!r}")
    if version != VERSION:
        raise MalformedRowError(f"offset 4: unsupported version {version}")
    if n == 0:
        raise EmptyInputError("no samples")
    if dim == 0:
        raise MalformedRowError("offset 10: dim must be positive")
    record = np.dtype([("class_id", "<u4"), ("vector", "<f4", (dim,))])
    expected = _HEADER.size + n * record.itemsize
    if len(data) != expected:
        raise InconsistentWidthError(
            f"offset {min(len(data), expected)}: expected {expected} bytes for {n} samples of dim {dim}, "
            f"got {len(data)}"
        )
    recs = np.frombuffer(data, dtype=record, count=n, offset=_HEADER.size)
    vectors = recs["vector"].astype(np.float32)
    bad = ~np.isfinite(vectors)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        offset = _HEADER.size + i * record.itemsize + 4 + 4 * j
        raise NonFiniteValueError(f"offset {offset}: non-finite value in sample {i}")
    return EmbeddingTable(recs["class_id"].astype(np.int64), vectors)


def load_samples(source, format: str = "csv") -> EmbeddingTable:
    """Read an :class:`EmbeddingTable` from a binary stream or a bytes object."""
    data = source if isinstance(source, (bytes, bytearray)) else source.read()
    if format == "csv":
        try:
            text = bytes(data).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedRowError(f"offset {exc.start}: invalid UTF-8") from None
        return _load_csv(text)
    if format == "binary":
        return _load_binary(bytes(data))
    raise SampleParseError(f"unknown sample format {format!r}")


def save_samples(table: EmbeddingTable, sink, format: str = "csv") -> None:
    """Write ``table`` to the binary stream ``sink``.

    The binary format stores float32; float64 tables are rounded.
    """
    if format == "csv":
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["class_id"] + [f"f{j}" for j in range(table.dim)])
        for cid, vec in zip(table.class_ids, table.vectors):
            writer.writerow([int(cid)] + [repr(float(v)) for v in vec])
        sink.write(out.getvalue().encode("utf-8"))
    elif format == "binary":
        if table.class_ids.size and table.class_ids.max() > _U32_MAX:
            raise InvalidInputError("class ids must fit in u32 for the binary format")
        record = np.dtype([("class_id", "<u4"), ("vector", "<f4", (table.dim,))])
        recs = np.empty(len(table), dtype=record)
        recs["class_id"] = table.class_ids
        recs["vector"] = table.vectors
        sink.write(_HEADER.pack(MAGIC, VERSION, len(table), table.dim))
        sink.write(recs.tobytes())
    else:
        raise InvalidInputError(f"unknown sample format {format!r}")


def detect_format(path) -> str:
    with open(path, "rb") as fh:
        head = fh.read(4)
    return "binary" if head == MAGIC else "csv"


def read_samples(path, format: str | None = None) -> EmbeddingTable:
    fmt = format or detect_format(path)
    with open(path, "rb") as fh:
        return load_samples(fh, fmt)


def class_means(table: EmbeddingTable) -> ClassEmbeddingSet:
    """Average the samples of every class, in float64, rows sorted by class id."""
    if len(table) == 0:
        raise InvalidInputError("no samples")
    ids, inverse = np.unique(table.class_ids, return_inverse=True)
    counts = np.bincount(inverse, minlength=ids.size).astype(np.float64)
    sums = np.zeros((ids.size, table.dim), dtype=np.float64)
    # sequential per-row accumulation keeps the summation order fixed
    np.add.at(sums, inverse, table.vectors.astype(np.float64))
    return ClassEmbeddingSet(ids, sums / counts[:, None], normalized=False)


def normalize_unit(emb: ClassEmbeddingSet) -> ClassEmbeddingSet:
    norms = np.linalg.norm(emb.means, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise InvalidInputError(f"class {int(emb.class_ids[zero[0]])} has a zero-norm embedding")
    return ClassEmbeddingSet(emb.class_ids, emb.means / norms[:, None], normalized=True)
