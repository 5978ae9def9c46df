"""Merge weights (SMA / EMA / WMA / custom) and deterministic checkpoint merging.

Checkpoints are indexed oldest first.  Every output element is the
left-to-right f64 sum ``w_1*x_1 + ... + w_N*x_N`` rounded once to the
tensor's stored dtype, so a fixed ordered input produces the same bytes in
both execution modes and on any IEEE-754 platform.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import store

STRATEGY_KINDS = ("SMA", "EMA", "WMA", "CUSTOM")
WEIGHT_SUM_TOL = 1e-12


class MergeError(ValueError):
    pass


@dataclass(frozen=True)
class MergeStrategy:
    kind: str
    alpha: float | None = None
    custom_weights: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        kind = self.kind.upper()
        object.__setattr__(self, "kind", kind)
        if kind not in STRATEGY_KINDS:
            raise MergeError(f"unknown strategy {self.kind!r}")
        if kind == "EMA":
            if self.alpha is None or not (0.0 < self.alpha <= 1.0):
                raise MergeError(f"EMA requires 0 < alpha <= 1, got {self.alpha!r}")
        elif self.alpha is not None:
            raise MergeError(f"alpha is only valid for EMA, not {kind}")
        if kind == "CUSTOM":
            if not self.custom_weights:
                raise MergeError("CUSTOM strategy requires custom_weights")
            weights = tuple(float(w) for w in self.custom_weights)
            if not all(w > 0 and np.isfinite(w) for w in weights):
                raise MergeError("custom weights must be finite and > 0")
            object.__setattr__(self, "custom_weights", weights)
        elif self.custom_weights is not None:
            raise MergeError(f"custom_weights are only valid for CUSTOM, not {kind}")

    @classmethod
    def sma(cls) -> "MergeStrategy":
        return cls("SMA")

    @classmethod
    def wma(cls) -> "MergeStrategy":
        return cls("WMA")

    @classmethod
    def ema(cls, alpha: float) -> "MergeStrategy":
        return cls("EMA", alpha=alpha)

    @classmethod
    def custom(cls, weights: Sequence[float]) -> "MergeStrategy":
        return cls("CUSTOM", custom_weights=tuple(weights))

    def label(self) -> str:
        if self.kind == "EMA":
            return f"EMA(alpha={self.alpha!r})"
        return self.kind

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.alpha is not None:
            d["alpha"] = self.alpha
        if self.custom_weights is not None:
            d["custom_weights"] = list(self.custom_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MergeStrategy":
        cw = d.get("custom_weights")
        return cls(d["kind"], alpha=d.get("alpha"), custom_weights=tuple(cw) if cw is not None else None)


@dataclass(frozen=True)
class WeightVector:
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if not w:
            raise MergeError("weight vector is empty")
        if any(not np.isfinite(x) or x < 0 for x in w):
            raise MergeError("weights must be finite and >= 0")
        if abs(sum(w) - 1.0) > WEIGHT_SUM_TOL:
            raise MergeError(f"weights sum to {sum(w)!r}, not 1")

    def __len__(self) -> int:
        return len(self.weights)

    def __iter__(self):
        return iter(self.weights)

    def __getitem__(self, i):
        return self.weights[i]

    def as_array(self) -> np.ndarray:
        return np.array(self.weights, dtype=np.float64)


def compute_weights(strategy: MergeStrategy, n: int) -> WeightVector:
    """Normalized weights for ``n`` checkpoints, oldest first.

    EMA weights are those obtained by unrolling
    ``avg_i = alpha * M_i + (1 - alpha) * avg_{i-1}`` from ``avg_1 = M_1``:
    the oldest checkpoint keeps ``(1 - alpha)**(n - 1)`` and checkpoint
    ``i >= 2`` gets ``alpha * (1 - alpha)**(n - i)``.
    """
    if n < 1:
        raise MergeError(f"need at least one checkpoint, got n={n}")
    kind = strategy.kind
    if kind == "SMA":
        w = np.full(n, 1.0 / n)
    elif kind == "WMA":
        w = np.arange(1, n + 1, dtype=np.float64) / (n * (n + 1) / 2)
    elif kind == "EMA":
        a = strategy.alpha
        w = a * (1.0 - a) ** np.arange(n - 1, -1, -1, dtype=np.float64)
        w[0] = (1.0 - a) ** (n - 1)
    else:
        if len(strategy.custom_weights) != n:
            raise MergeError(f"{len(strategy.custom_weights)} custom weights for n={n} checkpoints")
        raw = np.array(strategy.custom_weights, dtype=np.float64)
        if np.all(raw == raw[0]):
            # the rounded sum of equal weights need not be exactly n * c
            w = np.full(n, 1.0 / n)
        else:
            w = raw / raw.sum()
    return WeightVector(tuple(w.tolist()))


def ema_update(running, new, alpha: float) -> np.ndarray:
    """One EMA step, ``alpha * new + (1 - alpha) * running`` in f64."""
    running = np.asarray(running, dtype=np.float64)
    new = np.asarray(new, dtype=np.float64)
    if running.shape != new.shape:
        raise MergeError(f"shape mismatch: {running.shape} vs {new.shape}")
    if not (0.0 < alpha <= 1.0):
        raise MergeError(f"alpha must be in (0, 1], got {alpha!r}")
    return alpha * new + (1.0 - alpha) * running


def weighted_sum(arrays: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Left-to-right f64 accumulation of ``w_i * x_i``; the primitive both merge modes share."""
    acc = np.zeros(np.shape(arrays[0]), dtype=np.float64)
    for w, x in zip(weights, arrays):
        acc += w * np.asarray(x, dtype=np.float64)
    return acc


def _validate_inputs(containers: Sequence[store.CheckpointContainer]) -> None:
    ref = containers[0]
    for c in containers[1:]:
        for name, rec in ref.tensors.items():
            other = c.tensors.get(name)
            if other is None:
                raise MergeError(f"tensor {name!r} missing from {c.path}")
            if other.dtype != rec.dtype:
                raise MergeError(f"tensor {name!r}: dtype {other.dtype} in {c.path} vs {rec.dtype} in {ref.path}")
            if other.shape != rec.shape:
                raise MergeError(
                    f"tensor {name!r}: shape {list(other.shape)} in {c.path} vs {list(rec.shape)} in {ref.path}"
                )
        extra = sorted(set(c.tensors) - set(ref.tensors))
        if extra:
            raise MergeError(f"tensor {extra[0]!r} in {c.path} is not present in {ref.path}")


def _output_metadata(
    containers: Sequence[store.CheckpointContainer],
    paths: Sequence[str],
    weights: WeightVector,
    strategy: MergeStrategy | None,
) -> dict[str, str]:
    newest = containers[-1]
    return {
        "step": newest.metadata["step"],
        "tokens": newest.metadata["tokens"],
        "merge.sources": json.dumps(list(paths)),
        "merge.weights": json.dumps(list(weights.weights)),
        "merge.strategy": strategy.label() if strategy is not None else "unspecified",
    }


class _HashingWriter:
    def __init__(self, fh):
        self.fh = fh
        self.sha = hashlib.sha256()

    def write(self, data: bytes) -> None:
        self.sha.update(data)
        self.fh.write(data)


def merge(
    paths: Sequence[str | os.PathLike],
    weights: WeightVector,
    out_path: str | os.PathLike,
    mode: str = "streaming",
    strategy: MergeStrategy | None = None,
    chunk_elems: int = 1 << 20,
) -> dict:
    """Merge checkpoints ``paths`` (oldest first) into ``out_path``.

    ``mode="in_memory"`` loads every tensor of every input up front;
    ``mode="streaming"`` holds one chunk per tensor at a time.  Both write
    identical bytes.  A JSON report is written to ``<out_path>.report.json``
    and also returned.
    """
    if mode not in ("in_memory", "streaming"):
        raise MergeError(f"unknown merge mode {mode!r}")
    if not paths:
        raise MergeError("nothing to merge")
    if len(weights) != len(paths):
        raise MergeError(f"{len(weights)} weights for {len(paths)} checkpoints")
    str_paths = [str(p) for p in paths]
    containers = [store.read_container(p) for p in paths]
    _validate_inputs(containers)

    records = containers[0].tensors
    metadata = _output_metadata(containers, str_paths, weights, strategy)
    header = store.encode_header(records, metadata)
    w = weights.weights
    out_path = Path(out_path)

    with open(out_path, "wb") as fh:
        sink = _HashingWriter(fh)
        sink.write(header)
        if mode == "in_memory":
            loaded = [{name: store.load_tensor(c, name) for name in records} for c in containers]
            for name, rec in records.items():
                merged = weighted_sum([state[name] for state in loaded], w)
                sink.write(merged.astype(store.DTYPES[rec.dtype]).tobytes())
        else:
            for name, rec in records.items():
                readers = [store.iter_chunks(c, name, chunk_elems) for c in containers]
                for chunks in zip(*readers):
                    sink.write(weighted_sum(chunks, w).astype(store.DTYPES[rec.dtype]).tobytes())

    report = {
        "inputs": str_paths,
        "weights": list(w),
        "strategy": strategy.to_dict() if strategy is not None else None,
        "per_tensor": [{"name": name, "elements": rec.numel} for name, rec in records.items()],
        "sha256": sink.sha.hexdigest(),
    }
    Path(str(out_path) + ".report.json").write_text(json.dumps(report, indent=1) + "\n")
    return report


def merge_states(states: Sequence[dict[str, np.ndarray]], weights: WeightVector) -> dict[str, np.ndarray]:
    """In-memory f64 merge of parameter dicts, same accumulation order as ``merge``."""
    if len(states) != len(weights):
        raise MergeError(f"{len(weights)} weights for {len(states)} states")
    names = list(states[0])
    for s in states[1:]:
        if list(s) != names:
            raise MergeError("parameter names differ between states")
        for name in names:
            if np.shape(s[name]) != np.shape(states[0][name]):
                raise MergeError(f"shape mismatch for {name!r}")
    return {name: weighted_sum([s[name] for s in states], weights.weights) for name in names}
