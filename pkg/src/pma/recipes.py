"""Scripted multi-seed experiments, one per merging phenomenon.

Each recipe runs its per-seed experiment, writes ``result.json`` plus CSVs
for plotting under its output directory, and judges the collected per-seed
metrics against fixed criteria.  Everything is determined by
``(recipe_id, seeds)``.

====  =====================================================================
R1    stable-phase merging: SMA of the last 10 checkpoints vs its members
R2    merge vs anneal: cosine-decay fork vs constant-lr fork + rolling SMA
R3    strategy ablation: SMA / WMA / EMA(0.1) / EMA(0.2), early and late
R4    interval V and count N ablation
R5    spike recovery with PMA-init vs resuming from the last checkpoint
R6    PMA-init for a continued-training stage under two lr schedules
R7    Taylor sweep on random quadratic instances
====  =====================================================================
"""

from __future__ import annotations

import csv
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import analysis, merging, planner
from .merging import MergeStrategy
from .testbed import toy, trainer
from .testbed.schedule import WsdSchedule
from .testbed.toy import DataConfig, ModelConfig
from .testbed.trainer import InitConfig, SpikeConfig, TrainConfig

log = logging.getLogger(__name__)

DEFAULT_SEEDS = tuple(range(10))

# d = 161 parameters keeps dense Hessians under the analysis cap
MODEL = ModelConfig("mlp", (8, 16, 1))
# wider net for the spike recipe: the narrow one often absorbs the high-lr burst without spiking
WIDE_MODEL = ModelConfig("mlp", (8, 32, 1))
DATA = DataConfig("regression", n_train=2048, n_val=1024, noise_std=0.5)
BATCH = 16
TOKENS_PER_STEP = 1024
EVERY = 50
WARMUP = 100
STABLE_LR = 0.02
N_MERGE = planner.DEFAULT_N
INTERVAL = EVERY * TOKENS_PER_STEP

STRATEGIES = (MergeStrategy.sma(), MergeStrategy.wma(), MergeStrategy.ema(0.1), MergeStrategy.ema(0.2))


class RecipeError(RuntimeError):
    pass


@dataclass(frozen=True)
class Criterion:
    name: str
    metric: str  # boolean per-seed metric
    required: int  # seeds that must satisfy it, out of len(seeds) (scaled for fewer seeds)


@dataclass
class RecipeResult:
    recipe_id: str
    seeds: list[int]
    per_seed: list[dict]
    criteria: list[dict] = field(default_factory=list)
    passed: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def judge(per_seed: list[dict], criteria: tuple[Criterion, ...], n_ref: int = 10) -> tuple[list[dict], bool]:
    """Count seeds meeting each criterion; thresholds are stated per ``n_ref`` seeds."""
    n = len(per_seed)
    out = []
    for c in criteria:
        hits = sum(bool(m[c.metric]) for m in per_seed)
        need = -(-c.required * n // n_ref)  # ceil
        out.append({"name": c.name, "metric": c.metric, "count": hits, "of": n, "required": need,
                    "passed": hits >= need})
    return out, all(c["passed"] for c in out)


# -- shared pieces --------------------------------------------------------------


def stable_config(
    seed: int, steps: int, lr: float = STABLE_LR, total: int | None = None, model: ModelConfig = MODEL, **kw
) -> TrainConfig:
    """Warmup then constant ``lr``; the schedule covers ``total`` steps (default ``steps``)."""
    total = total or steps
    return TrainConfig(
        seed=seed, model=model, data=DATA, steps=steps, batch_size=BATCH,
        schedule=WsdSchedule(lr, 0.0, WARMUP, total - WARMUP, 0),
        checkpoint_every=EVERY, tokens_per_step=TOKENS_PER_STEP, **kw,
    )


def _val(path: Path, config: TrainConfig, data) -> float:
    return trainer.val_loss(trainer.load_params(path), config, data)


def _merge_plan(p: planner.MergePlan, out: Path) -> Path:
    merging.merge(p.paths(), p.weights, out, mode="streaming", strategy=p.strategy)
    return out


def _rel(a: float, b: float) -> float:
    return abs(a - b) / abs(b)


def _flat(path: Path) -> np.ndarray:
    return toy.flatten(trainer.load_params(path))


# -- per-seed experiments ---------------------------------------------------------


R1_ANNEAL = 1000


def r1_seed(seed: int, out: Path) -> dict:
    cfg = stable_config(seed, 3000)
    man = trainer.train(cfg, out / "run")
    data = trainer.dataset_for(cfg)
    p = planner.plan(man, MergeStrategy.sma(), N_MERGE, INTERVAL)
    p.save(out / "plan.json")
    merged = _merge_plan(p, out / "merged.pma")
    members = [_val(path, cfg, data) for path in p.paths()]
    merged_val = _val(merged, cfg, data)

    # an annealed continuation gives a reference optimum that is not built from the members
    anneal = WsdSchedule(STABLE_LR, 0.0, WARMUP, cfg.steps - WARMUP, R1_ANNEAL)
    a_man = trainer.train(trainer.fork(man, man.entries[-1].tokens, anneal, steps=R1_ANNEAL), out / "anneal")
    loss_fn = lambda v: toy.loss(toy.unflatten(v, MODEL), data.x_val, data.y_val, MODEL, DATA.task)  # noqa: E731
    report = analysis.trajectory_report(
        loss_fn, [_flat(path) for path in p.paths()], [_flat(a_man.path_of(a_man.entries[-1]))]
    )
    report.save(out / "taylor.json")
    return {
        "seed": seed,
        "merged_val": merged_val,
        "members_mean_val": float(np.mean(members)),
        "final_val": members[-1],
        "cross_over_diag": report.cross_ratio,
        "taylor_condition": report.condition_holds,
        "taylor_reference": report.notes["reference_index"],
        "merged_le_mean": merged_val <= np.mean(members),
        "merged_le_final": merged_val <= members[-1],
    }


R2_FORK, R2_DECAY = 2000, 500


def r2_seed(seed: int, out: Path) -> dict:
    cfg = stable_config(seed, R2_FORK, total=R2_FORK + R2_DECAY)
    man = trainer.train(cfg, out / "stable")
    fork_tokens = R2_FORK * TOKENS_PER_STEP
    anneal = WsdSchedule(STABLE_LR, 0.0, WARMUP, R2_FORK - WARMUP, R2_DECAY)
    a_man = trainer.train(trainer.fork(man, fork_tokens, anneal, steps=R2_DECAY), out / "anneal")
    b_man = trainer.train(trainer.fork(man, fork_tokens, None, steps=R2_DECAY), out / "constant")
    data = trainer.dataset_for(cfg)
    p = planner.plan(b_man, MergeStrategy.sma(), N_MERGE, INTERVAL)
    merged_val = _val(_merge_plan(p, out / "constant_merged.pma"), cfg, data)
    anneal_val = _val(a_man.path_of(a_man.entries[-1]), cfg, data)
    constant_val = _val(b_man.path_of(b_man.entries[-1]), cfg, data)
    rel = _rel(merged_val, anneal_val)
    return {
        "seed": seed,
        "anneal_val": anneal_val,
        "constant_merged_val": merged_val,
        "constant_last_val": constant_val,
        "rel_gap": rel,
        "within_5pct": rel <= 0.05,
    }


R3_EARLY, R3_LATE = 600, 3000


def r3_seed(seed: int, out: Path) -> dict:
    cfg = stable_config(seed, R3_LATE)
    man = trainer.train(cfg, out / "run")
    data = trainer.dataset_for(cfg)
    metrics: dict = {"seed": seed}
    for stage, anchor in (("early", R3_EARLY), ("late", R3_LATE)):
        vals = []
        for s in STRATEGIES:
            p = planner.plan(man, s, N_MERGE, INTERVAL, anchor * TOKENS_PER_STEP)
            tag = s.label().replace("(alpha=", "").replace(")", "")
            v = _val(_merge_plan(p, out / f"{stage}_{tag}.pma"), cfg, data)
            metrics[f"{stage}_{tag}"] = v
            vals.append(v)
        metrics[f"{stage}_anchor_val"] = _val(p.paths()[-1], cfg, data)
        metrics[f"{stage}_spread"] = (max(vals) - min(vals)) / min(vals)
    metrics["late_within_2pct"] = metrics["late_spread"] <= 0.02
    return metrics


R4_INTERVALS = (1, 2, 4, 8)  # in units of the checkpoint period
R4_COUNTS = (3, 6, 10, 15)


def _plan_fallback(man, strategy, n, interval, anchor) -> planner.MergePlan:
    # mirror the practice of shrinking N when the history is too short
    for m in range(n, 0, -1):
        try:
            return planner.plan(man, strategy, m, interval, anchor)
        except planner.PlanError:
            continue
    raise RecipeError("no feasible plan")


def r4_seed(seed: int, out: Path) -> dict:
    cfg = stable_config(seed, 3000)
    man = trainer.train(cfg, out / "run")
    data = trainer.dataset_for(cfg)
    metrics: dict = {"seed": seed}
    for stage, anchor in (("early", 800), ("late", 3000)):
        anchor_tokens = anchor * TOKENS_PER_STEP
        metrics[f"{stage}_anchor_val"] = _val(man.root / trainer.checkpoint_name(anchor), cfg, data)
        for mult in R4_INTERVALS:
            p = _plan_fallback(man, MergeStrategy.sma(), N_MERGE, mult * INTERVAL, anchor_tokens)
            metrics[f"{stage}_V{mult}x_n"] = p.n
            metrics[f"{stage}_V{mult}x"] = _val(_merge_plan(p, out / f"{stage}_V{mult}.pma"), cfg, data)
        for n in R4_COUNTS:
            p = _plan_fallback(man, MergeStrategy.sma(), n, INTERVAL, anchor_tokens)
            metrics[f"{stage}_N{n}_n"] = p.n
            metrics[f"{stage}_N{n}"] = _val(_merge_plan(p, out / f"{stage}_N{n}.pma"), cfg, data)
    metrics["late_default_beats_anchor"] = metrics["late_N10"] <= metrics["late_anchor_val"]
    return metrics


R5_LR, R5_STEPS, R5_SPIKE_AT, R5_SPIKE_LEN, R5_MULT = 0.005, 4000, 2000, 100, 60.0


def r5_seed(seed: int, out: Path) -> dict:
    ref_cfg = stable_config(seed, R5_STEPS, lr=R5_LR, model=WIDE_MODEL)
    ref = trainer.train(ref_cfg, out / "reference")
    spike_cfg = replace(ref_cfg, spike=SpikeConfig(R5_MULT, R5_SPIKE_AT, R5_SPIKE_LEN))
    spiked = trainer.train(spike_cfg, out / "spiked")
    rows = trainer.read_metrics(out / "spiked")
    spike_at = trainer.detect_spike([r["loss"] for r in rows])
    pre = rows[R5_SPIKE_AT - 100 : R5_SPIKE_AT]
    post = rows[R5_SPIKE_AT:]
    gn_ratio = max(r["grad_norm"] for r in post) / float(np.median([r["grad_norm"] for r in pre]))
    loss_ratio = max(r["loss"] for r in post) / float(np.median([r["loss"] for r in pre]))

    data = trainer.dataset_for(ref_cfg)
    ref_val = _val(ref.path_of(ref.entries[-1]), ref_cfg, data)
    pma = trainer.pma_init_resume(spiked, 3, MergeStrategy.sma(), ref_cfg, out / "pma_init")
    pma_val = _val(pma.path_of(pma.entries[-1]), ref_cfg, data)

    # the state the run is in once the high-lr episode is over
    last = [e for e in spiked.entries if e.step <= R5_SPIKE_AT + R5_SPIKE_LEN][-1]
    plain_cfg = replace(ref_cfg, start_step=last.step, steps=R5_STEPS - last.step,
                        init=InitConfig.checkpoint(spiked.path_of(last)))
    plain = trainer.train(plain_cfg, out / "resume_last")
    plain_val = _val(plain.path_of(plain.entries[-1]), ref_cfg, data)
    return {
        "seed": seed,
        "spike_detected_at_update": spike_at,
        "grad_norm_ratio": gn_ratio,
        "loss_ratio": loss_ratio,
        "spiked": gn_ratio > 5 and loss_ratio > 5,
        "reference_val": ref_val,
        "pma_init_val": pma_val,
        "resume_last_step": last.step,
        "resume_last_val": plain_val,
        "pma_rel_gap": _rel(pma_val, ref_val),
        "resume_last_rel_gap": _rel(plain_val, ref_val),
        "pma_recovers": _rel(pma_val, ref_val) <= 0.10,
        "resume_last_fails": not (_rel(plain_val, ref_val) <= 0.10),
    }


R6_BASE, R6_CT = 3000, 1000
R6_PEAKS = (0.02, 0.005)


def r6_seed(seed: int, out: Path) -> dict:
    cfg = stable_config(seed, R6_BASE)
    man = trainer.train(cfg, out / "base")
    p = planner.plan(man, MergeStrategy.sma(), N_MERGE, INTERVAL)
    inits = {
        "merged": InitConfig.pma_init(p.paths(), MergeStrategy.sma()),
        "last": InitConfig.checkpoint(p.paths()[-1]),
    }
    metrics: dict = {"seed": seed}
    for peak in R6_PEAKS:
        schedule = WsdSchedule(peak, 0.0, 0, R6_BASE, R6_CT)
        finals, first = {}, {}
        for label, init in inits.items():
            ct = replace(cfg, schedule=schedule, start_step=R6_BASE, steps=R6_CT,
                         checkpoint_every=R6_CT, eval_every=1, init=init)
            trainer.train(ct, out / f"ct_{peak:g}_{label}")
            rows = trainer.read_metrics(out / f"ct_{peak:g}_{label}")
            first[label], finals[label] = rows[0]["val_loss"], rows[-1]["val_loss"]
        tag = f"lr{peak:g}"
        metrics[f"{tag}_merged_final"] = finals["merged"]
        metrics[f"{tag}_last_final"] = finals["last"]
        metrics[f"{tag}_merged_step1"] = first["merged"]
        metrics[f"{tag}_last_step1"] = first["last"]
        metrics[f"{tag}_final_within_2pct"] = _rel(finals["merged"], finals["last"]) <= 0.02
        metrics[f"{tag}_merged_lower_step1"] = first["merged"] < first["last"]
    return metrics


R7_INSTANCES, R7_DIM = 1000, 10


def r7_seed(seed: int, out: Path, instances: int = R7_INSTANCES) -> dict:
    rng = np.random.default_rng([seed, 7])
    rows = []
    worst_rel, agree, ties, holds = 0.0, 0, 0, 0
    for i in range(instances):
        oracle = analysis.QuadraticOracle.random(rng, R7_DIM)
        k = int(rng.integers(2, 9))
        thetas = [oracle.theta_star + rng.standard_normal(R7_DIM) for _ in range(k)]
        rep = analysis.taylor_report(oracle, thetas)
        rel = abs(rep.merged_loss_predicted - rep.merged_loss_exact) / abs(rep.merged_loss_exact)
        worst_rel = max(worst_rel, rel)
        # independent route: evaluate every member and the mean directly
        direct_avg = float(np.mean([analysis.quadratic_loss(oracle, t) for t in thetas]))
        direct_merged = analysis.quadratic_loss(oracle, np.mean(thetas, axis=0))
        gap = direct_avg - direct_merged
        tie = abs(gap) <= analysis.TIE_BAND * max(abs(direct_avg), abs(direct_merged))
        ties += tie
        holds += rep.condition_holds
        agree += tie or (rep.condition_holds == (direct_merged < direct_avg))
        rows.append((i, k, rep.diag_sum, rep.cross_sum, rep.merged_loss_predicted, rep.merged_loss_exact,
                     direct_avg, int(rep.condition_holds)))
    with open(out / "instances.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", "k", "diag_sum", "cross_sum", "merged_predicted", "merged_exact",
                    "avg_individual", "condition_holds"])
        w.writerows([a, b, *(repr(float(x)) for x in rest[:-1]), rest[-1]] for a, b, *rest in rows)
    return {
        "seed": seed,
        "instances": instances,
        "worst_rel_error": worst_rel,
        "verdict_agreement": agree / instances,
        "ties": ties,
        "condition_true": holds,
        "prediction_exact": worst_rel <= 1e-9,
        "verdict_all_agree": agree == instances,
    }


@dataclass(frozen=True)
class Recipe:
    run_seed: Callable[[int, Path], dict]
    criteria: tuple[Criterion, ...]
    default_seeds: tuple[int, ...] = DEFAULT_SEEDS


RECIPES: dict[str, Recipe] = {
    "R1": Recipe(r1_seed, (Criterion("merged <= mean of members", "merged_le_mean", 9),
                           Criterion("merged <= final checkpoint", "merged_le_final", 8))),
    "R2": Recipe(r2_seed, (Criterion("constant+SMA within 5% of anneal", "within_5pct", 7),)),
    "R3": Recipe(r3_seed, (Criterion("late strategies within 2%", "late_within_2pct", 8),)),
    "R4": Recipe(r4_seed, (Criterion("late N=10 merge <= anchor checkpoint", "late_default_beats_anchor", 8),)),
    "R5": Recipe(r5_seed, (Criterion("PMA-init rejoins reference within 10%", "pma_recovers", 7),
                           Criterion("resume-from-last misses the 10% band", "resume_last_fails", 7))),
    "R6": Recipe(r6_seed, tuple(
        c for peak in R6_PEAKS for c in (
            Criterion(f"lr {peak:g}: final val within 2%", f"lr{peak:g}_final_within_2pct", 8),
            Criterion(f"lr {peak:g}: merged init lower at step 1", f"lr{peak:g}_merged_lower_step1", 8),
        ))),
    "R7": Recipe(r7_seed, (Criterion("predicted == exact within 1e-9", "prediction_exact", 10),
                           Criterion("verdict agrees on all non-tie instances", "verdict_all_agree", 10)),
                 default_seeds=(0,)),
}


def _run_one(recipe_id: str, seed: int, seed_dir: str) -> dict:
    path = Path(seed_dir)
    path.mkdir(parents=True, exist_ok=True)
    return RECIPES[recipe_id].run_seed(seed, path)


def _write_csv(path: Path, rows: list[dict]) -> None:
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in
                        (r.get(k, "") for k in keys)])


def _jsonable(x):
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    raise TypeError(f"not JSON serializable: {type(x)}")


def run_recipe(recipe_id: str, seeds=None, out_dir: str | os.PathLike = "runs", threads: int | None = None) -> RecipeResult:
    """Run ``recipe_id`` for ``seeds`` and write ``result.json`` + ``per_seed.csv`` in ``out_dir``.

    Seeds run in up to ``threads`` worker processes (``PMA_THREADS`` by
    default).  If a seed fails, the results gathered so far are written
    and :class:`RecipeError` is raised.
    """
    recipe_id = recipe_id.upper()
    if recipe_id not in RECIPES:
        raise KeyError(f"unknown recipe {recipe_id!r}; known: {', '.join(RECIPES)}")
    recipe = RECIPES[recipe_id]
    seeds = list(recipe.default_seeds if seeds is None else seeds)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    threads = threads or int(os.environ.get("PMA_THREADS", "1"))

    per_seed: list[dict] = []
    error = None
    jobs = [(recipe_id, s, str(out / f"seed_{s}")) for s in seeds]
    try:
        if threads > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                futures = [pool.submit(_run_one, *job) for job in jobs]
                for fut in futures:
                    per_seed.append(fut.result())
        else:
            for job in jobs:
                per_seed.append(_run_one(*job))
    except Exception as exc:  # keep partial results on disk
        error = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        log.error("recipe %s failed: %s", recipe_id, error)

    criteria, passed = judge(per_seed, recipe.criteria) if per_seed else ([], False)
    result = RecipeResult(recipe_id, seeds, per_seed, criteria, passed and error is None)
    payload = result.to_dict()
    if error is not None:
        payload["error"] = error
    (out / "result.json").write_text(json.dumps(payload, indent=1, default=_jsonable) + "\n")
    if per_seed:
        _write_csv(out / "per_seed.csv", per_seed)
    if error is not None:
        raise RecipeError(error)
    return result
