"""Checkpoint containers and trajectory manifests.

Container layout (all integers little-endian)::

    u64 header_len | header_len bytes of JSON | data section

The JSON header maps every tensor name to ``{"dtype", "offsets", "shape"}``
plus a ``"__metadata__"`` string map.  Keys are sorted and no whitespace is
emitted, so a given logical container has exactly one byte encoding.
Offsets are relative to the start of the data section and tensors are laid
out contiguously in name order.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

METADATA_KEY = "__metadata__"
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
REQUIRED_METADATA = ("step", "tokens")

# 8 MiB per read keeps streaming consumers at constant memory.
CHUNK_BYTES = 8 << 20


class ContainerError(ValueError):
    """Malformed container, or a request the container cannot satisfy."""


@dataclass(frozen=True)
class TensorRecord:
    name: str
    dtype: str
    shape: tuple[int, ...]
    byte_range: tuple[int, int]

    @property
    def itemsize(self) -> int:
        return DTYPES[self.dtype].itemsize

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.byte_range[1] - self.byte_range[0]


@dataclass
class CheckpointContainer:
    """Parsed header of a container file. Payloads stay on disk."""

    path: Path
    tensors: dict[str, TensorRecord]
    metadata: dict[str, str]
    data_start: int

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def step(self) -> int:
        return int(self.metadata["step"])

    @property
    def tokens(self) -> int:
        return int(self.metadata["tokens"])


def _canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _check_metadata(metadata: Mapping[str, str]) -> dict[str, str]:
    out = {}
    for key, value in metadata.items():
        if not isinstance(key, str) or not isinstance(value, str):
            raise ContainerError(f"metadata must map strings to strings, got {key!r}: {value!r}")
        out[key] = value
    for key in REQUIRED_METADATA:
        if key not in out:
            raise ContainerError(f"metadata missing required key {key!r}")
        try:
            int(out[key])
        except ValueError:
            raise ContainerError(f"metadata {key!r} must be an integer string, got {out[key]!r}") from None
    return out


def layout(specs: Iterable[tuple[str, str, tuple[int, ...]]]) -> dict[str, TensorRecord]:
    """Assign contiguous byte ranges to ``(name, dtype, shape)`` triples in name order."""
    by_name: dict[str, tuple[str, tuple[int, ...]]] = {}
    for name, dtype, shape in specs:
        if not isinstance(name, str) or not name:
            raise ContainerError("tensor names must be non-empty strings")
        if name == METADATA_KEY:
            raise ContainerError(f"{METADATA_KEY!r} is reserved")
        if name in by_name:
            raise ContainerError(f"duplicate tensor name {name!r}")
        if dtype not in DTYPES:
            raise ContainerError(f"unknown dtype {dtype!r}")
        shape = tuple(int(s) for s in shape)
        if any(s < 0 for s in shape):
            raise ContainerError(f"negative dimension in shape of {name!r}")
        by_name[name] = (dtype, shape)
    if not by_name:
        raise ContainerError("no tensors")
    records = {}
    offset = 0
    for name in sorted(by_name):
        dtype, shape = by_name[name]
        end = offset + math.prod(shape) * DTYPES[dtype].itemsize
        records[name] = TensorRecord(name, dtype, shape, (offset, end))
        offset = end
    return records


def encode_header(records: Mapping[str, TensorRecord], metadata: Mapping[str, str]) -> bytes:
    """Length prefix plus canonical JSON header for ``records``."""
    header: dict[str, Any] = {
        r.name: {"dtype": r.dtype, "offsets": list(r.byte_range), "shape": list(r.shape)}
        for r in records.values()
    }
    header[METADATA_KEY] = _check_metadata(metadata)
    body = _canonical_json(header)
    return struct.pack("<Q", len(body)) + body


def write_container(
    tensors: Mapping[str, tuple[str, Iterable[int], Any]],
    metadata: Mapping[str, str],
    path: str | os.PathLike,
) -> Path:
    """Write ``{name: (dtype, shape, values)}`` as a container file.

    ``values`` may be anything ``numpy.asarray`` accepts; it is cast to the
    declared dtype (round-to-nearest-even for f64 -> f32).
    """
    items = [(name, dtype, tuple(shape)) for name, (dtype, shape, _) in tensors.items()]
    records = layout(items)
    payloads = []
    for name, rec in records.items():
        values = np.asarray(tensors[name][2], dtype=DTYPES[rec.dtype])
        if values.size != rec.numel:
            raise ContainerError(
                f"tensor {name!r}: shape {list(rec.shape)} needs {rec.numel} values, got {values.size}"
            )
        payloads.append(np.ascontiguousarray(values).reshape(-1).tobytes())
    header = encode_header(records, metadata)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header)
        for chunk in payloads:
            fh.write(chunk)
    return path


def read_container(path: str | os.PathLike) -> CheckpointContainer:
    """Parse and validate a container header without touching the data section."""
    path = Path(path)
    file_size = os.stat(path).st_size
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) < 8:
            raise ContainerError("truncated header length")
        (header_len,) = struct.unpack("<Q", prefix)
        if 8 + header_len > file_size:
            raise ContainerError("truncated header")
        raw = fh.read(header_len)
    try:
        pairs = json.loads(raw.decode("utf-8"), object_pairs_hook=list)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"header not valid JSON: {exc}") from None
    if not isinstance(pairs, list):
        raise ContainerError("header must be a JSON object")

    keys = [k for k, _ in pairs]
    if len(set(keys)) != len(keys):
        raise ContainerError("duplicate key in header")
    if keys != sorted(keys):
        raise ContainerError("header keys not in lexicographic order")
    header = dict(pairs)
    meta_pairs = header.pop(METADATA_KEY, None)
    if meta_pairs is None:
        raise ContainerError("header has no __metadata__ entry")
    try:
        metadata = _check_metadata(dict(meta_pairs))
    except (TypeError, ValueError) as exc:
        raise ContainerError(f"invalid __metadata__: {exc}") from None
    if not header:
        raise ContainerError("no tensors")

    records = []
    for name, entry in header.items():
        try:
            entry = dict(entry)
        except (TypeError, ValueError):
            raise ContainerError(f"invalid entry for tensor {name!r}") from None
        dtype = entry.get("dtype")
        shape = entry.get("shape")
        offsets = entry.get("offsets")
        if dtype not in DTYPES:
            raise ContainerError(f"unknown dtype {dtype!r} for tensor {name!r}")
        if not (isinstance(shape, list) and all(isinstance(s, int) and s >= 0 for s in shape)):
            raise ContainerError(f"invalid shape for tensor {name!r}")
        if not (
            isinstance(offsets, list)
            and len(offsets) == 2
            and all(isinstance(o, int) and o >= 0 for o in offsets)
            and offsets[0] <= offsets[1]
        ):
            raise ContainerError(f"invalid offsets for tensor {name!r}")
        rec = TensorRecord(name, dtype, tuple(shape), (offsets[0], offsets[1]))
        if rec.nbytes != rec.numel * rec.itemsize:
            raise ContainerError(f"tensor {name!r}: byte range does not match shape and dtype")
        records.append(rec)

    data_start = 8 + header_len
    data_len = file_size - data_start
    by_offset = sorted(records, key=lambda r: (r.byte_range, r.name))
    cursor = 0
    for rec in by_offset:
        begin, end = rec.byte_range
        if begin < cursor:
            raise ContainerError("overlapping tensors")
        if begin > cursor:
            raise ContainerError("gap between tensors")
        cursor = end
    if cursor > data_len:
        raise ContainerError("truncated data section")
    if cursor < data_len:
        raise ContainerError("trailing bytes after data section")
    if [r.name for r in by_offset] != sorted(r.name for r in records):
        raise ContainerError("tensor data not laid out in name order")
    if raw != encode_header({r.name: r for r in records}, metadata)[8:]:
        raise ContainerError("header is not in canonical form")

    return CheckpointContainer(
        path=path,
        tensors={r.name: r for r in sorted(records, key=lambda r: r.name)},
        metadata=metadata,
        data_start=data_start,
    )


def _record(container: CheckpointContainer, name: str) -> TensorRecord:
    try:
        return container.tensors[name]
    except KeyError:
        raise ContainerError(f"unknown tensor {name!r}") from None


def load_array(container: CheckpointContainer, name: str) -> np.ndarray:
    """Tensor ``name`` in its stored dtype and shape."""
    rec = _record(container, name)
    with open(container.path, "rb") as fh:
        fh.seek(container.data_start + rec.byte_range[0])
        buf = fh.read(rec.nbytes)
    if len(buf) != rec.nbytes:
        raise ContainerError(f"tensor {name!r}: payload length mismatch")
    return np.frombuffer(buf, dtype=DTYPES[rec.dtype]).reshape(rec.shape).copy()


def load_tensor(container: CheckpointContainer, name: str) -> np.ndarray:
    """Flat f64 view of tensor ``name``; f32 widening is exact."""
    return load_array(container, name).reshape(-1).astype(np.float64)


def iter_chunks(container: CheckpointContainer, name: str, chunk_elems: int):
    """Yield consecutive flat f64 chunks of ``name`` with at most ``chunk_elems`` elements."""
    rec = _record(container, name)
    dtype = DTYPES[rec.dtype]
    with open(container.path, "rb") as fh:
        fh.seek(container.data_start + rec.byte_range[0])
        remaining = rec.numel
        while remaining > 0:
            count = min(chunk_elems, remaining)
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise ContainerError(f"tensor {name!r}: payload length mismatch")
            yield np.frombuffer(buf, dtype=dtype).astype(np.float64)
            remaining -= count


def load_state(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """All tensors of a container, stored dtype and shape."""
    c = read_container(path)
    return {name: load_array(c, name) for name in c.tensors}


def save_state(
    state: Mapping[str, np.ndarray], metadata: Mapping[str, str], path: str | os.PathLike, dtype: str = "f64"
) -> Path:
    return write_container(
        {name: (dtype, np.shape(value), value) for name, value in state.items()}, metadata, path
    )


# -- trajectory manifest ----------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    checkpoint_path: str
    step: int
    tokens: int
    lr: float
    train_loss: float
    grad_norm: float


@dataclass
class TrajectoryManifest:
    """Ordered checkpoints of one run.

    ``checkpoint_path`` values are stored relative to ``root`` (the directory
    holding ``trajectory.json``) when possible.
    """

    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        for prev, cur in zip(self.entries, self.entries[1:]):
            self._check_order(prev, cur)
        for e in self.entries:
            self._check_entry(e)

    @staticmethod
    def _check_entry(e: ManifestEntry) -> None:
        if e.tokens < 0:
            raise ValueError(f"negative token count at step {e.step}")
        if e.lr < 0:
            raise ValueError(f"negative learning rate at step {e.step}")
        if e.grad_norm < 0:
            raise ValueError(f"negative grad_norm at step {e.step}")

    @staticmethod
    def _check_order(prev: ManifestEntry, cur: ManifestEntry) -> None:
        if cur.step <= prev.step:
            raise ValueError(f"manifest steps must strictly increase ({prev.step} -> {cur.step})")
        if cur.tokens < prev.tokens:
            raise ValueError(f"manifest tokens must not decrease ({prev.tokens} -> {cur.tokens})")

    def append(self, entry: ManifestEntry) -> None:
        self._check_entry(entry)
        if self.entries:
            self._check_order(self.entries[-1], entry)
        self.entries.append(entry)

    def path_of(self, entry: ManifestEntry) -> Path:
        p = Path(entry.checkpoint_path)
        return p if p.is_absolute() else self.root / p

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def to_json(self) -> str:
        return json.dumps({"entries": [vars(e) for e in self.entries]}, indent=1)

    def save(self, path: str | os.PathLike | None = None) -> Path:
        path = Path(path) if path is not None else self.root / "trajectory.json"
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrajectoryManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "trajectory.json"
        raw = json.loads(path.read_text())
        entries = [
            ManifestEntry(
                checkpoint_path=str(e["checkpoint_path"]),
                step=int(e["step"]),
                tokens=int(e["tokens"]),
                lr=float(e["lr"]),
                train_loss=float(e["train_loss"]),
                grad_norm=float(e["grad_norm"]),
            )
            for e in raw["entries"]
        ]
        return cls(entries=entries, root=path.parent)
