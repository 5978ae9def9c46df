"""Command line for checkpoint merging: train, plan, merge, recipe.

Exit codes: 0 success / recipe passed, 1 usage error, 2 recipe failed its
criteria, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import merging, planner, recipes, store
from .merging import MergeStrategy
from .testbed import trainer

EXIT_OK, EXIT_USAGE, EXIT_FAIL, EXIT_RUNTIME = 0, 1, 2, 3

MODES = {"memory": "in_memory", "streaming": "streaming"}


class UsageError(Exception):
    pass


def _tokens(text: str) -> int:
    """Accept ``8000000000``, ``8e9`` or ``8B``."""
    t = text.strip().upper()
    scale = 1
    for suffix, mult in (("B", 10**9), ("M", 10**6), ("K", 10**3)):
        if t.endswith(suffix):
            t, scale = t[:-1], mult
            break
    try:
        value = float(t) * scale
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a token count: {text!r}") from None
    if value != int(value):
        raise argparse.ArgumentTypeError(f"token count must be whole: {text!r}")
    return int(value)


def _seeds(text: str) -> list[int]:
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return seeds


def _strategy(args) -> MergeStrategy:
    kind = args.strategy.upper()
    if kind == "EMA":
        if args.alpha is None:
            raise UsageError("--strategy ema needs --alpha")
        return MergeStrategy.ema(args.alpha)
    if kind == "CUSTOM":
        if not args.weights:
            raise UsageError("--strategy custom needs --weights")
        return MergeStrategy.custom([float(w) for w in args.weights.split(",")])
    return MergeStrategy(kind)


def _add_strategy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", choices=["sma", "ema", "wma", "custom"], default="sma")
    p.add_argument("--alpha", type=float, help="EMA smoothing factor in (0, 1]")
    p.add_argument("--weights", help="comma-separated positive weights for --strategy custom, oldest first")


def _add_plan_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", help="trajectory.json or the run directory holding it")
    p.add_argument("--n", type=int, default=planner.DEFAULT_N, help="number of checkpoints to merge")
    p.add_argument("--interval-tokens", type=_tokens, help="token spacing V between merged checkpoints")
    p.add_argument("--anchor-tokens", type=_tokens, help="merge the checkpoints ending at or before this")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pma", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the toy trainer from a TrainConfig JSON file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("plan", help="select checkpoints to merge and write plan.json")
    _add_plan_flags(p)
    _add_strategy_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("merge", help="merge checkpoints from plan.json, a manifest, or explicit files")
    p.add_argument("--plan", help="plan.json written by `pma plan`")
    p.add_argument("--inputs", nargs="+", help="checkpoint files, oldest first")
    _add_plan_flags(p)
    _add_strategy_flags(p)
    p.add_argument("--mode", choices=sorted(MODES), default="streaming")
    p.add_argument("--out", required=True)

    p = sub.add_parser("recipe", help="run a multi-seed experiment recipe")
    p.add_argument("recipe_id", help=", ".join(recipes.RECIPES))
    p.add_argument("--seeds", type=_seeds, help="e.g. 0-9 or 0,3,5 (default: the recipe's own)")
    p.add_argument("--out", required=True)
    return parser


def cmd_train(args) -> int:
    config_path = Path(args.config)
    if not config_path.is_file():
        print(f"error: config file not found: {config_path}", file=sys.stderr)
        return EXIT_USAGE
    try:
        config = trainer.TrainConfig.load(config_path)
    except (ValueError, TypeError, KeyError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        manifest = trainer.train(config, args.out)
    except trainer.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    summary = json.loads((Path(args.out) / "summary.json").read_text())
    line = f"wrote {len(manifest)} checkpoints to {args.out}"
    if summary["spike_detected_at_update"] is not None:
        line += f"; loss spike detected at update {summary['spike_detected_at_update']}"
    if summary["diverged"]:
        line += f"; stopped on non-finite loss at update {summary['diverged_at_update']}"
    print(line)
    return EXIT_OK


def _plan_from_flags(args) -> planner.MergePlan:
    if not args.manifest:
        raise UsageError("--manifest is required")
    if args.interval_tokens is None:
        raise UsageError("--interval-tokens is required")
    manifest = store.TrajectoryManifest.load(args.manifest)
    return planner.plan(manifest, _strategy(args), args.n, args.interval_tokens, args.anchor_tokens)


def cmd_plan(args) -> int:
    p = _plan_from_flags(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p.save(out / "plan.json")
    tokens = ", ".join(str(e.tokens) for e in p.resolved)
    print(f"plan: {p.strategy.label()} over {p.n} checkpoints at tokens [{tokens}] -> {out / 'plan.json'}")
    return EXIT_OK


def cmd_merge(args) -> int:
    if args.plan and args.inputs:
        raise UsageError("give either --plan or --inputs, not both")
    if args.plan:
        p = planner.MergePlan.load(args.plan)
        paths, weights, strategy = p.paths(), p.weights, p.strategy
    elif args.inputs:
        strategy = _strategy(args)
        paths = [Path(x) for x in args.inputs]
        weights = merging.compute_weights(strategy, len(paths))
    else:
        p = _plan_from_flags(args)
        paths, weights, strategy = p.paths(), p.weights, p.strategy
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = merging.merge(paths, weights, out / "merged.pma", MODES[args.mode], strategy)
    print(f"merged {len(paths)} checkpoints -> {out / 'merged.pma'} sha256={report['sha256']}")
    return EXIT_OK


def cmd_recipe(args) -> int:
    if args.recipe_id.upper() not in recipes.RECIPES:
        print(f"error: unknown recipe {args.recipe_id!r}; known: {', '.join(recipes.RECIPES)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        result = recipes.run_recipe(args.recipe_id, args.seeds, args.out)
    except recipes.RecipeError as exc:
        print(f"error: recipe aborted, partial results in {args.out}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for c in result.criteria:
        status = "PASS" if c["passed"] else "FAIL"
        print(f"{status} {result.recipe_id} {c['name']}: {c['count']}/{c['of']} (need {c['required']})")
    return EXIT_OK if result.passed else EXIT_FAIL


COMMANDS = {"train": cmd_train, "plan": cmd_plan, "merge": cmd_merge, "recipe": cmd_recipe}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
