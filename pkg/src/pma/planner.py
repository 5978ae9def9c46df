"""Choose which checkpoints of a trajectory to merge."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .merging import MergeStrategy, WeightVector, compute_weights
from .store import ManifestEntry, TrajectoryManifest

DEFAULT_N = 10

# (total parameters, merge interval in tokens) observed for 0.7B/7B, 1.3B/13B and 10B/100B MoE models.
INTERVAL_ANCHORS = ((7e9, 4e9), (13e9, 8e9), (100e9, 80e9))


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class MergePlan:
    strategy: MergeStrategy
    n: int
    interval_tokens: int
    resolved: tuple[ManifestEntry, ...]
    weights: WeightVector
    root: str = "."

    def paths(self) -> list[Path]:
        root = Path(self.root)
        return [Path(e.checkpoint_path) if Path(e.checkpoint_path).is_absolute() else root / e.checkpoint_path
                for e in self.resolved]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.to_dict(),
            "n": self.n,
            "interval_tokens": self.interval_tokens,
            "root": self.root,
            "resolved": [vars(e) for e in self.resolved],
            "weights": list(self.weights.weights),
        }

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MergePlan":
        d = json.loads(Path(path).read_text())
        return cls(
            strategy=MergeStrategy.from_dict(d["strategy"]),
            n=int(d["n"]),
            interval_tokens=int(d["interval_tokens"]),
            resolved=tuple(ManifestEntry(**e) for e in d["resolved"]),
            weights=WeightVector(tuple(d["weights"])),
            root=d.get("root", "."),
        )


def plan(
    manifest: TrajectoryManifest,
    strategy: MergeStrategy,
    n: int = DEFAULT_N,
    interval_tokens: int = 0,
    anchor_tokens: int | None = None,
) -> MergePlan:
    """Pick ``n`` checkpoints spaced ``interval_tokens`` apart, ending at the anchor.

    The anchor is the latest checkpoint at or before ``anchor_tokens`` (the
    last entry by default).  Walking back, target ``k`` is
    ``anchor - k * interval_tokens`` and the checkpoint nearest to it is
    taken, ties going to the later one.  A target with no checkpoint within
    half an interval means the history is too short.
    """
    entries = list(manifest.entries)
    if not entries:
        raise PlanError("manifest is empty")
    if n < 1:
        raise PlanError(f"n must be >= 1, got {n}")
    if interval_tokens <= 0:
        raise PlanError(f"interval_tokens must be > 0, got {interval_tokens}")

    if anchor_tokens is None:
        anchor = entries[-1]
    else:
        eligible = [e for e in entries if e.tokens <= anchor_tokens]
        if not eligible:
            raise PlanError(f"no checkpoint at or before anchor {anchor_tokens} tokens")
        anchor = eligible[-1]

    chosen: list[ManifestEntry] = []
    for k in range(n):
        target = anchor.tokens - k * interval_tokens
        # reversed() so that min() keeps the later checkpoint on ties
        best = min(reversed(entries), key=lambda e: abs(e.tokens - target))
        if 2 * abs(best.tokens - target) > interval_tokens:
            raise PlanError(
                f"insufficient history: no checkpoint within {interval_tokens / 2:g} tokens of "
                f"{target} for k={k} (have {k} of {n}); reduce N or V"
            )
        if chosen and best.step >= chosen[-1].step:
            raise PlanError(
                f"duplicate selection of step {best.step}: checkpoint spacing is coarser than "
                f"interval {interval_tokens}"
            )
        chosen.append(best)

    chosen.reverse()
    if strategy.kind == "CUSTOM" and len(strategy.custom_weights) != n:
        raise PlanError(f"{len(strategy.custom_weights)} custom weights for n={n}")
    return MergePlan(
        strategy=strategy,
        n=n,
        interval_tokens=int(interval_tokens),
        resolved=tuple(chosen),
        weights=compute_weights(strategy, n),
        root=str(manifest.root),
    )


def recommend_interval(model_params_total: float) -> int:
    """Suggested merge interval in tokens for a model with this many total parameters.

    Log-log linear interpolation between the observed anchors, clamped at
    both ends, rounded to the nearest billion tokens.
    """
    if model_params_total <= 0:
        raise PlanError("model_params_total must be > 0")
    xs = np.log([a for a, _ in INTERVAL_ANCHORS])
    ys = np.log([b for _, b in INTERVAL_ANCHORS])
    tokens = math.exp(np.interp(math.log(model_params_total), xs, ys))
    return int(round(tokens / 1e9)) * 10**9
