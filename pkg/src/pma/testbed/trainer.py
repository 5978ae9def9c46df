"""Mini-batch SGD with momentum on the toy models, emitting real checkpoint trajectories.

Randomness is keyed by purpose: the dataset comes from ``(seed, 0)``, the
initial weights from ``(seed, 1)`` and the batch of update ``u`` from
``(seed, 2, u)``.  A run resumed at any checkpoint therefore sees exactly the
batches the original run saw.

Update ``u`` (0-based) evaluates loss and gradient at the current weights,
then applies ``v = momentum * v + g; theta -= lr * v``.  After it, ``u + 1``
steps are complete; checkpoints and manifest entries are labelled with the
completed step count.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .. import merging as merge_core
from .. import store
from ..store import ManifestEntry, TrajectoryManifest
from . import toy
from .schedule import WsdSchedule, lr_at
from .toy import DataConfig, ModelConfig

log = logging.getLogger(__name__)

SPIKE_FACTOR = 5.0
SPIKE_WINDOW = 100
# don't flag spikes before this many losses exist to take a median over
SPIKE_MIN_HISTORY = 10


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SpikeConfig:
    """Multiply the learning rate by ``lr_multiplier`` from update ``at_step`` on.

    ``duration`` limits the high-lr window to that many updates; ``None``
    keeps it until the run ends.
    """

    lr_multiplier: float
    at_step: int
    duration: int | None = None
    mode: str = "high_lr"

    def __post_init__(self) -> None:
        if self.mode != "high_lr":
            raise ValueError(f"unknown spike mode {self.mode!r}")
        if not self.lr_multiplier > 1:
            raise ValueError("spike lr_multiplier must be > 1")
        if self.duration is not None and self.duration < 1:
            raise ValueError("spike duration must be >= 1")

    def active(self, step: int) -> bool:
        if step < self.at_step:
            return False
        return self.duration is None or step < self.at_step + self.duration


@dataclass(frozen=True)
class InitConfig:
    """Where the starting weights come from.

    ``random``: fresh init from the seed.  ``pma_init``: merge ``paths``
    (oldest first) with ``strategy``; momentum starts at zero unless
    ``optimizer_paths`` are given, in which case it is merged the same way.
    ``checkpoint``: load ``paths[0]``, and momentum from ``optimizer_state``
    if given (zero otherwise).
    """

    kind: str = "random"
    paths: tuple[str, ...] = ()
    strategy: dict | None = None
    optimizer_state: str | None = None
    optimizer_paths: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "paths", tuple(str(p) for p in self.paths))
        object.__setattr__(self, "optimizer_paths", tuple(str(p) for p in self.optimizer_paths))
        if self.kind not in ("random", "pma_init", "checkpoint"):
            raise ValueError(f"unknown init kind {self.kind!r}")
        if self.kind == "pma_init" and (not self.paths or self.strategy is None):
            raise ValueError("pma_init needs checkpoint paths and a strategy")
        if self.kind == "checkpoint" and len(self.paths) != 1:
            raise ValueError("checkpoint init needs exactly one path")
        if self.optimizer_paths and len(self.optimizer_paths) != len(self.paths):
            raise ValueError("need one optimizer state per merged checkpoint")

    @classmethod
    def pma_init(cls, paths, strategy: merge_core.MergeStrategy, optimizer_paths=()) -> "InitConfig":
        return cls("pma_init", tuple(str(p) for p in paths), strategy.to_dict(),
                   optimizer_paths=tuple(str(p) for p in optimizer_paths))

    @classmethod
    def checkpoint(cls, path, optimizer_state=None) -> "InitConfig":
        return cls("checkpoint", (str(path),), None, str(optimizer_state) if optimizer_state else None)


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    model: ModelConfig
    data: DataConfig
    steps: int
    batch_size: int
    schedule: WsdSchedule
    checkpoint_every: int
    tokens_per_step: int = 1
    spike: SpikeConfig | None = None
    init: InitConfig = field(default_factory=InitConfig)
    start_step: int = 0
    momentum: float = 0.9
    save_optimizer_state: bool = True
    # extra val-loss evaluations in metrics.csv (checkpoint steps are always evaluated)
    eval_every: int | None = None

    def __post_init__(self) -> None:
        if self.steps < 1 or self.checkpoint_every < 1:
            raise ValueError("steps and checkpoint_every must be >= 1")
        if self.steps % self.checkpoint_every:
            raise ValueError(f"checkpoint_every={self.checkpoint_every} does not divide steps={self.steps}")
        if self.start_step < 0:
            raise ValueError("start_step must be >= 0")
        if self.end_step > self.schedule.total_steps:
            raise ValueError(
                f"run ends at step {self.end_step} but the schedule only covers {self.schedule.total_steps}"
            )
        if self.spike is not None and self.spike.at_step >= self.end_step:
            raise ValueError("spike.at_step must fall inside the run")
        if self.eval_every is not None and self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.batch_size < 1 or self.tokens_per_step < 0:
            raise ValueError("batch_size must be >= 1 and tokens_per_step >= 0")

    @property
    def end_step(self) -> int:
        return self.start_step + self.steps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["init"]["paths"] = list(self.init.paths)
        d["init"]["optimizer_paths"] = list(self.init.optimizer_paths)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig(**d["model"])
        d["data"] = DataConfig(**d.get("data", {}))
        d["schedule"] = WsdSchedule.from_dict(d["schedule"])
        if d.get("spike") is not None:
            d["spike"] = SpikeConfig(**d["spike"])
        init = d.get("init") or {"kind": "random"}
        d["init"] = InitConfig(**{**init, "paths": tuple(init.get("paths", ()))})
        return cls(**d)

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- shared helpers -----------------------------------------------------------


def dataset_for(config: TrainConfig) -> toy.Dataset:
    return toy.make_dataset(config.model, config.data, np.random.default_rng([config.seed, 0]))


def batch_indices(config: TrainConfig, step: int) -> np.ndarray:
    """Training-set rows used by update ``step``."""
    rng = np.random.default_rng([config.seed, 2, step])
    return rng.integers(0, config.data.n_train, size=config.batch_size)


def val_loss(params: toy.Params, config: TrainConfig, data: toy.Dataset | None = None) -> float:
    data = data if data is not None else dataset_for(config)
    with np.errstate(over="ignore", invalid="ignore"):
        return toy.loss(params, data.x_val, data.y_val, config.model, config.data.task)


def load_params(path: str | os.PathLike) -> toy.Params:
    return {name: np.asarray(v, dtype=np.float64) for name, v in store.load_state(path).items()}


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:08d}.pma"


def optimizer_name(step: int) -> str:
    return f"optim_{step:08d}.pma"


def _initial_state(config: TrainConfig) -> tuple[toy.Params, toy.Params]:
    init = config.init
    zeros = lambda p: {k: np.zeros_like(v) for k, v in p.items()}  # noqa: E731
    if init.kind == "random":
        params = toy.init_params(config.model, np.random.default_rng([config.seed, 1]))
        return params, zeros(params)
    if init.kind == "pma_init":
        strategy = merge_core.MergeStrategy.from_dict(init.strategy)
        weights = merge_core.compute_weights(strategy, len(init.paths))
        params = merge_core.merge_states([load_params(p) for p in init.paths], weights)
        if not init.optimizer_paths:
            return params, zeros(params)
        merged = merge_core.merge_states([load_params(p) for p in init.optimizer_paths], weights)
        return params, {name: merged[f"momentum.{name}"] for name in params}
    params = load_params(init.paths[0])
    if init.optimizer_state:
        raw = load_params(init.optimizer_state)
        velocity = {name: raw[f"momentum.{name}"] for name in params}
    else:
        velocity = zeros(params)
    return params, velocity


def _check_shapes(params: toy.Params, config: TrainConfig) -> None:
    expected = toy.param_shapes(config.model)
    got = {k: v.shape for k, v in params.items()}
    if got != expected:
        raise ValueError(f"initial weights do not match model {config.model.layer_widths}: {got}")


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


# -- train --------------------------------------------------------------------


def train(config: TrainConfig, out_dir: str | os.PathLike) -> TrajectoryManifest:
    """Run ``config`` and write its trajectory under ``out_dir``.

    Emits ``config.json``, one ``ckpt_*.pma`` container (parameters only, f64)
    per checkpoint with a matching ``optim_*.pma`` momentum container,
    ``trajectory.json``, ``metrics.csv`` and ``summary.json``.

    A non-finite loss stops the run.  Without a spike directive that raises
    :class:`TrainingDiverged` after the partial manifest is saved; with one
    the run ends early and ``summary.json`` records it.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")

    data = dataset_for(config)
    params, velocity = _initial_state(config)
    _check_shapes(params, config)
    manifest = TrajectoryManifest(root=out)
    rows = []
    diverged_at = None

    for u in range(config.start_step, config.end_step):
        lr = lr_at(config.schedule, u)
        if config.spike is not None and config.spike.active(u):
            lr *= config.spike.lr_multiplier
        idx = batch_indices(config, u)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = toy.loss_and_grad(params, data.x_train[idx], data.y_train[idx], config.model, data.task)
            gnorm = toy.global_norm(grads)
        if not (np.isfinite(loss) and np.isfinite(gnorm)):
            diverged_at = u
            break
        for name in params:
            velocity[name] = config.momentum * velocity[name] + grads[name]
            params[name] = params[name] - lr * velocity[name]

        step = u + 1
        tokens = step * config.tokens_per_step
        row = {"step": step, "tokens": tokens, "lr": lr, "loss": loss, "grad_norm": gnorm, "val_loss": None}
        if (step - config.start_step) % config.checkpoint_every == 0:
            meta = {"step": str(step), "tokens": str(tokens)}
            store.save_state(params, meta, out / checkpoint_name(step))
            if config.save_optimizer_state:
                store.save_state({f"momentum.{k}": v for k, v in velocity.items()}, meta, out / optimizer_name(step))
            row["val_loss"] = val_loss(params, config, data)
            manifest.append(ManifestEntry(checkpoint_name(step), step, tokens, lr, loss, gnorm))
        elif config.eval_every and (step - config.start_step) % config.eval_every == 0:
            row["val_loss"] = val_loss(params, config, data)
        rows.append(row)

    manifest.save()
    _write_metrics(out / "metrics.csv", rows)
    summary = {
        "completed_steps": (rows[-1]["step"] if rows else config.start_step),
        "diverged": diverged_at is not None,
        "diverged_at_update": diverged_at,
        "spike_configured": config.spike is not None,
        "spike_detected_at_update": detect_spike([r["loss"] for r in rows], offset=config.start_step),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    if diverged_at is not None:
        if config.spike is None:
            raise TrainingDiverged(f"diverged: non-finite loss at update {diverged_at}")
        log.info("run with spike directive stopped at update %d (non-finite loss)", diverged_at)
    return manifest


def _write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "tokens", "lr", "loss", "grad_norm", "val_loss"])
        for r in rows:
            writer.writerow([r["step"], r["tokens"], _fmt(r["lr"]), _fmt(r["loss"]), _fmt(r["grad_norm"]),
                             _fmt(r["val_loss"])])


def read_metrics(run_dir: str | os.PathLike) -> list[dict]:
    rows = []
    with open(Path(run_dir) / "metrics.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({
                "step": int(r["step"]),
                "tokens": int(r["tokens"]),
                "lr": float(r["lr"]),
                "loss": float(r["loss"]),
                "grad_norm": float(r["grad_norm"]),
                "val_loss": float(r["val_loss"]) if r["val_loss"] else None,
            })
    return rows


def detect_spike(
    losses, offset: int = 0, factor: float = SPIKE_FACTOR, window: int = SPIKE_WINDOW
) -> int | None:
    """Update index of the first loss above ``factor`` times the trailing-``window`` median.

    ``losses[i]`` is the loss of update ``offset + i``.  Non-finite losses
    count as spikes.
    """
    losses = list(losses)
    for i in range(SPIKE_MIN_HISTORY, len(losses)):
        x = losses[i]
        if not np.isfinite(x):
            return offset + i
        if x > factor * statistics.median(losses[max(0, i - window) : i]):
            return offset + i
    return None


# -- fork / resume --------------------------------------------------------------


def fork(
    manifest: TrajectoryManifest,
    at_tokens: int,
    new_schedule: WsdSchedule | None = None,
    steps: int | None = None,
    config: TrainConfig | None = None,
) -> TrainConfig:
    """Config that continues ``manifest``'s run from its checkpoint at ``at_tokens``.

    The checkpoint must lie within half a checkpoint period of ``at_tokens``.
    Weights and momentum are restored, step/token counters continue, and the
    schedule is replaced by ``new_schedule`` if given.  ``steps`` defaults to
    running until the schedule ends.
    """
    config = config or TrainConfig.load(manifest.root / "config.json")
    if not manifest.entries:
        raise ValueError("manifest has no checkpoints to fork from")
    period_tokens = config.checkpoint_every * config.tokens_per_step
    entry = min(reversed(manifest.entries), key=lambda e: abs(e.tokens - at_tokens))
    if 2 * abs(entry.tokens - at_tokens) > period_tokens:
        raise ValueError(f"no checkpoint near {at_tokens} tokens (closest is at {entry.tokens})")
    schedule = new_schedule or config.schedule
    if steps is None:
        steps = schedule.total_steps - entry.step
    opt = manifest.root / optimizer_name(entry.step)
    spike = config.spike
    if spike is not None and spike.at_step >= entry.step + steps:
        spike = None
    return replace(
        config,
        schedule=schedule,
        steps=steps,
        start_step=entry.step,
        spike=spike,
        init=InitConfig.checkpoint(manifest.path_of(entry), opt if opt.exists() else None),
    )


def pma_init_resume(
    manifest: TrajectoryManifest,
    n: int,
    strategy: merge_core.MergeStrategy,
    resume_config: TrainConfig,
    out_dir: str | os.PathLike,
    resume_step: int | None = None,
    reset_optimizer: bool = True,
) -> TrajectoryManifest:
    """Merge the last ``n`` usable checkpoints and train on from the merged weights.

    With ``resume_step=None`` the resume point is the first loss spike in the
    run's ``metrics.csv``; only checkpoints taken strictly before the update
    that spiked are usable.  Otherwise checkpoints at or before
    ``resume_step`` are used.  Momentum is reset unless
    ``reset_optimizer=False``, which merges the saved momentum with the same
    weights instead.  The choice is recorded in the resumed ``config.json``.  The resumed run starts at
    the newest merged checkpoint's step and ends at ``resume_config.end_step``
    under ``resume_config``'s schedule.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if resume_step is None:
        rows = read_metrics(manifest.root)
        spike = detect_spike([r["loss"] for r in rows], offset=rows[0]["step"] - 1 if rows else 0)
        if spike is None:
            raise ValueError("no loss spike found in the trajectory")
        usable = [e for e in manifest.entries if e.step < spike]
    else:
        usable = [e for e in manifest.entries if e.step <= resume_step]
    if len(usable) < n:
        raise ValueError(f"only {len(usable)} usable checkpoints before the resume point, need {n}")
    chosen = usable[-n:]
    start = chosen[-1].step
    if resume_config.end_step <= start:
        raise ValueError(f"resume config ends at step {resume_config.end_step}, before resume point {start}")
    config = replace(
        resume_config,
        start_step=start,
        steps=resume_config.end_step - start,
        init=InitConfig.pma_init(
            [manifest.path_of(e) for e in chosen],
            strategy,
            () if reset_optimizer else [manifest.root / optimizer_name(e.step) for e in chosen],
        ),
    )
    return train(config, out_dir)
