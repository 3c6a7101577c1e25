"""Binary embedding file format (EMB1), class splits, and the in-memory dataset model.

Every pipeline stage exchanges data as an :class:`EmbeddingSet`: a labeled
collection of float32 feature vectors plus the class-name table that acts as
the join key between files. Vectors are stored on disk exactly as held in
memory, so write/read round-trips are bit-identical.

EMB1 layout (all integers little-endian):
    bytes 0-3   ASCII "EMB1"
    u32         version (currently 1)
    u32         dim
    u32         class_count C
    u32         record_count N
    C entries   (u32 byte_len, UTF-8 name bytes)
    N records   (u32 class_index, dim x f32)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EMB1"
VERSION = 1

_HEADER = struct.Struct("<4sIIII")
_U32 = struct.Struct("<I")


class EmbeddingFormatError(ValueError):
    """Base class for EMB1 parse failures."""


class BadMagicError(EmbeddingFormatError):
    pass


class UnsupportedVersionError(EmbeddingFormatError):
    pass


class TruncatedFileError(EmbeddingFormatError):
    """Payload ended early; ``offset`` is the byte position where data ran out."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ClassIndexOutOfRangeError(EmbeddingFormatError):
    pass


@dataclass
class EmbeddingSet:
    """Labeled feature vectors over an ordered class-name table.

    ``labels[i]`` indexes into ``class_names``; ``vectors[i]`` is the float32
    feature row for record i. Instances are treated as read-only after
    construction and may be shared across threads.
    """

    dim: int
    class_names: list[str]
    labels: np.ndarray  # (N,) uint32
    vectors: np.ndarray  # (N, dim) float32

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            self.vectors = self.vectors.reshape(len(self.labels), self.dim)

    @classmethod
    def from_records(cls, dim: int, class_names: list[str],
                     records: list[tuple[int, np.ndarray]]) -> "EmbeddingSet":
        labels = np.array([r[0] for r in records], dtype=np.uint32)
        if records:
            vectors = np.stack([np.asarray(r[1], dtype=np.float32) for r in records])
        else:
            vectors = np.zeros((0, dim), dtype=np.float32)
        return cls(dim=dim, class_names=list(class_names), labels=labels, vectors=vectors)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.labels)

    def records(self):
        """Iterate (class_index, vector) pairs in stored order."""
        for i in range(len(self.labels)):
            yield int(self.labels[i]), self.vectors[i]

    def validate(self) -> None:
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if not self.class_names:
            raise ValueError("class table must not be empty")
        if any(not n for n in self.class_names):
            raise ValueError("class names must be non-empty")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("class names must be unique")
        if self.vectors.shape != (len(self.labels), self.dim):
            raise ValueError(
                f"vector block has shape {self.vectors.shape}, "
                f"expected {(len(self.labels), self.dim)}")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            bad = int(np.argmax(self.labels >= self.num_classes))
            raise ValueError(
                f"record {bad} has class_index {int(self.labels[bad])} "
                f">= class count {self.num_classes}")

    def vectors_for_class(self, class_index: int) -> np.ndarray:
        return self.vectors[self.labels == class_index]


@dataclass
class SplitSpec:
    """Disjoint base/new class-name lists, serialized as JSON."""

    base: list[str]
    new: list[str]

    def validate(self) -> None:
        if not self.base or not self.new:
            raise ValueError("both base and new class lists must be non-empty")
        overlap = set(self.base) & set(self.new)
        if overlap:
            raise ValueError(f"base and new classes overlap: {sorted(overlap)}")

    @classmethod
    def load(cls, path) -> "SplitSpec":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        spec = cls(base=list(data["base"]), new=list(data["new"]))
        spec.validate()
        return spec

    def save(self, path) -> None:
        self.validate()
        Path(path).write_text(
            json.dumps({"base": self.base, "new": self.new}, indent=2) + "\n",
            encoding="utf-8")

    @property
    def all_names(self) -> list[str]:
        return list(self.base) + list(self.new)


def write_emb1(emb_set: EmbeddingSet, path) -> None:
    """Write ``emb_set`` to ``path`` in the EMB1 layout.

    The file reproduces the set bit-exactly under :func:`read_emb1`.
    """
    emb_set.validate()
    parts = [_HEADER.pack(MAGIC, VERSION, emb_set.dim, emb_set.num_classes, len(emb_set))]
    for name in emb_set.class_names:
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
    record_dtype = np.dtype([("label", "<u4"), ("vec", "<f4", (emb_set.dim,))])
    block = np.empty(len(emb_set), dtype=record_dtype)
    block["label"] = emb_set.labels
    block["vec"] = emb_set.vectors
    parts.append(block.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_emb1(path) -> EmbeddingSet:
    """Parse an EMB1 file, raising a distinct error per failure category."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise TruncatedFileError("file shorter than header", offset=len(data))
    magic, version, dim, class_count, record_count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if dim == 0:
        raise EmbeddingFormatError("dim must be positive")
    if class_count == 0:
        raise EmbeddingFormatError("class count must be positive")

    offset = _HEADER.size
    names = []
    for i in range(class_count):
        if offset + 4 > len(data):
            raise TruncatedFileError(f"class name {i} length field missing", offset=offset)
        (name_len,) = _U32.unpack_from(data, offset)
        offset += 4
        if offset + name_len > len(data):
            raise TruncatedFileError(f"class name {i} bytes missing", offset=offset)
        names.append(data[offset:offset + name_len].decode("utf-8"))
        offset += name_len

    record_dtype = np.dtype([("label", "<u4"), ("vec", "<f4", (dim,))])
    payload = record_count * record_dtype.itemsize
    if offset + payload > len(data):
        raise TruncatedFileError(
            f"record payload needs {payload} bytes, file ends early", offset=len(data))
    if offset + payload < len(data):
        raise EmbeddingFormatError(
            f"{len(data) - offset - payload} trailing bytes after record payload")
    block = np.frombuffer(data, dtype=record_dtype, count=record_count, offset=offset)
    labels = block["label"].copy()
    vectors = block["vec"].copy().reshape(record_count, dim)
    if record_count and int(labels.max()) >= class_count:
        bad = int(np.argmax(labels >= class_count))
        raise ClassIndexOutOfRangeError(
            f"record {bad} has class_index {int(labels[bad])} >= class count {class_count}")

    emb_set = EmbeddingSet(dim=dim, class_names=names, labels=labels, vectors=vectors)
    emb_set.validate()
    return emb_set


def normalize(emb_set: EmbeddingSet) -> EmbeddingSet:
    """Return a copy with every vector scaled to unit Euclidean norm.

    Directions are unchanged; norms are computed in float64 before casting
    back to float32, which makes the operation idempotent to within float32
    rounding. A zero vector has no direction and raises, naming the record.
    """
    vec64 = emb_set.vectors.astype(np.float64)
    norms = np.linalg.norm(vec64, axis=1)
    zero = np.where(norms == 0.0)[0]
    if zero.size:
        raise ValueError(f"record {int(zero[0])} is a zero vector and cannot be normalized")
    unit = (vec64 / norms[:, None]).astype(np.float32)
    return EmbeddingSet(dim=emb_set.dim, class_names=list(emb_set.class_names),
                        labels=emb_set.labels.copy(), vectors=unit)


def apply_split(emb_set: EmbeddingSet, split: SplitSpec) -> tuple[EmbeddingSet, EmbeddingSet]:
    """Partition records into (base, new) sets keyed by class name.

    Vectors are regrouped untouched; class indices are re-mapped so each
    returned set's labels index its own name table (ordered as listed in the
    split).
    """
    split.validate()
    known = set(emb_set.class_names)
    missing = [n for n in split.all_names if n not in known]
    if missing:
        raise KeyError(f"split names not present in set: {missing}")
    name_to_old = {n: i for i, n in enumerate(emb_set.class_names)}

    def take(names: list[str]) -> EmbeddingSet:
        old_ids = np.array([name_to_old[n] for n in names], dtype=np.uint32)
        remap = np.full(emb_set.num_classes, -1, dtype=np.int64)
        remap[old_ids] = np.arange(len(names))
        mask = np.isin(emb_set.labels, old_ids)
        return EmbeddingSet(
            dim=emb_set.dim,
            class_names=list(names),
            labels=remap[emb_set.labels[mask]].astype(np.uint32),
            vectors=emb_set.vectors[mask].copy(),
        )

    return take(split.base), take(split.new)


def concat_sets(first: EmbeddingSet, second: EmbeddingSet) -> EmbeddingSet:
    """Stack two sets over the union of their class tables (names joined by key)."""
    if first.dim != second.dim:
        raise ValueError(f"dim mismatch: {first.dim} vs {second.dim}")
    names = list(first.class_names)
    for n in second.class_names:
        if n not in names:
            names.append(n)
    index = {n: i for i, n in enumerate(names)}

    def relabel(s: EmbeddingSet) -> np.ndarray:
        lut = np.array([index[n] for n in s.class_names], dtype=np.uint32)
        return lut[s.labels]

    return EmbeddingSet(
        dim=first.dim,
        class_names=names,
        labels=np.concatenate([relabel(first), relabel(second)]),
        vectors=np.concatenate([first.vectors, second.vectors], axis=0),
    )
