"""Command line interface: solve-dims, gen-data, train, eval, decode, gradcheck.

Results go to stdout as JSON (or a table for solve-dims); progress logs go to
stderr as line-oriented JSON.  Exit codes: 0 success, 1 usage error, 2 data
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bundled_tree_path
from .conversion import solve_conv_dims, solve_pool_dims
from .data import LoadOptions, SyntheticRecipe, generate, load
from .decode import beam_search, select_paths_by_threshold
from .errors import (ConfigError, DataError, DimensionError, NumericError,
                     ScheduleError, TreeParseError, UsageError)
from .model import (build_bundle, load_bundle, merge_config, save_bundle,
                    SCHEMA_VERSION)
from .training import (TrainingSchedule, Phase, default_alternating_schedule,
                       evaluate, fit, joint_schedule, toy_loss_fn)
from .tree import load_tree

USAGE_ERRORS = (UsageError, ConfigError, ScheduleError, DimensionError)
DATA_ERRORS = (TreeParseError, DataError, FileNotFoundError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _log(record: dict):
    print(json.dumps(record), file=sys.stderr)


def _emit(document: dict):
    document.setdefault("schema_version", SCHEMA_VERSION)
    print(json.dumps(document, indent=2))


def _read_config(path) -> dict:
    if path is None:
        return merge_config(None)
    with open(path, "r", encoding="utf-8") as fh:
        return merge_config(json.load(fh))


def _schedule_from_config(config: dict, seed: int) -> TrainingSchedule:
    tr = config["training"]
    kwargs = {
        "optimizer": tr.get("optimizer", "sgd"),
        "lr": tr.get("lr", 0.01),
        "momentum": tr.get("momentum", 0.9),
        "clip": tr.get("clip", 5.0),
        "seed": seed,
        "batch_size": tr.get("batch_size", 32),
    }
    epochs = tr.get("epochs", 20)
    if "phases" in tr:
        phases = [Phase(p["epochs"], frozenset(p.get("frozen", []))) for p in tr["phases"]]
        return TrainingSchedule(phases, **kwargs)
    if tr.get("alternating", True) and epochs >= 3:
        return default_alternating_schedule(epochs, **kwargs)
    return joint_schedule(epochs, **kwargs)


# -- subcommands -------------------------------------------------------------


def cmd_solve_dims(args) -> int:
    if args.kind == "conv":
        options = solve_conv_dims(args.depth, args.width, args.height, args.target_p)
    else:
        options = solve_pool_dims(args.depth, args.width, args.height, args.target_p)
    rows = [o.as_dict() for o in options]
    if args.format == "json":
        _emit({"kind": args.kind, "depth": args.depth, "width": args.width,
               "height": args.height, "target_p": args.target_p, "options": rows})
        return 0
    if not rows:
        print("no valid parameter tuples")
        return 0
    cols = list(rows[0])
    print("  ".join(f"{c:>6}" for c in cols))
    for row in rows:
        print("  ".join(f"{row[c]:>6}" for c in cols))
    return 0


def cmd_gen_data(args) -> int:
    tree = load_tree(args.tree)
    recipe = SyntheticRecipe(tree, image_size=args.size, noise_sigma=args.sigma,
                             seed=args.seed)
    manifests = generate(recipe, args.out, args.per_leaf, multilabel=args.multilabel)
    _emit({"out": args.out,
           "splits": {s: len(m.records) for s, m in manifests.items()},
           "multilabel": args.multilabel, "seed": args.seed})
    return 0


def cmd_train(args) -> int:
    config = _read_config(args.config)
    seed = args.seed if args.seed is not None else config["training"].get("seed", 0)
    _log({"resolved_config": config, "seed": seed})
    tree, train_samples = load(args.data, "train")
    _, val_samples = load(args.data, "val")
    bundle = build_bundle(config, tree, seed=seed)
    schedule = _schedule_from_config(config, seed)
    state = fit(bundle, train_samples, schedule, val_samples=val_samples, log=_log)
    save_bundle(args.out, bundle)
    _emit({"checkpoint": args.out, "epochs": state.epoch,
           "final_loss": state.history[-1]["loss"] if state.history else None,
           "best_val_metric": state.best_metric, "best_epoch": state.best_epoch})
    return 0


def cmd_eval(args) -> int:
    if args.compare:
        return _compare(args)
    bundle = load_bundle(args.checkpoint)
    _, samples = load(args.data, args.split)
    kwargs = {"beam_width": args.beam_width}
    if bundle.mode == "multilabel":
        if args.threshold is not None:
            kwargs["threshold"] = args.threshold
        else:
            _, kwargs["val_samples"] = load(args.data, "val")
    reports = evaluate(bundle, samples, **kwargs)
    _emit({"split": args.split, "mode": bundle.mode,
           "metrics": {k: r.as_dict() for k, r in reports.items()}})
    return 0


def _compare(args) -> int:
    """Directional residual-vs-plain comparison averaged over seeds."""
    if args.config is None:
        raise UsageError("--compare requires --config")
    config = _read_config(args.config)
    tree, train_samples = load(args.data, "train")
    _, val_samples = load(args.data, "val")
    _, test_samples = load(args.data, "test")
    seeds = [int(s) for s in args.seeds.split(",")]
    results = {"residual": [], "plain": []}
    for variant in results:
        for seed in seeds:
            cfg = json.loads(json.dumps(config))
            cfg["head"]["residual"] = variant == "residual"
            bundle = build_bundle(cfg, tree, seed=seed)
            schedule = _schedule_from_config(cfg, seed)
            fit(bundle, train_samples, schedule, val_samples=None, log=_log)
            reports = evaluate(bundle, test_samples, beam_width=args.beam_width)
            score = reports["path_accuracy"].score
            results[variant].append(score)
            _log({"variant": variant, "seed": seed, "test_path_accuracy": score})
    means = {v: float(np.mean(scores)) for v, scores in results.items()}
    _emit({"comparison": results, "means": means,
           "residual_minus_plain": means["residual"] - means["plain"]})
    return 0


def cmd_decode(args) -> int:
    bundle = load_bundle(args.checkpoint)
    tree = bundle.tree
    _, samples = load(args.data, args.split)
    from .training import _predict_logits
    logits = _predict_logits(bundle, samples)
    lines = []
    for (_, _, sample_id), lg in zip(samples, logits):
        if bundle.mode == "multilabel":
            tau = args.threshold if args.threshold is not None else 0.5
            paths = sorted(select_paths_by_threshold(lg, tree, tau))
        elif bundle.mode == "flat":
            paths = [tree.path_to(int(np.argmax(lg[0])) + 1)]
        else:
            mode = "fixed" if bundle.mode == "fpl" else "general"
            paths = [beam_search(lg, tree, args.beam_width, mode=mode)]
        names = "|".join(tree.path_names(p) for p in paths)
        lines.append(f"{sample_id}\t{names}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        _emit({"out": args.out, "samples": len(lines)})
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    config = _read_config(args.config)
    tree = load_tree(args.tree) if args.tree else load_tree(str(bundled_tree_path("fixed12")))
    bundle = build_bundle(config, tree, seed=args.seed)
    results = _gradcheck_bundle(bundle, seed=args.seed, max_coords=args.max_coords,
                                tolerance=args.tolerance)
    worst = max(r["max_relative_error"] for r in results.values())
    _emit({"parameter_groups": results, "max_relative_error": worst,
           "passed": all(r["passed"] for r in results.values())})
    return 0 if all(r["passed"] for r in results.values()) else 3


def _gradcheck_bundle(bundle, seed=0, max_coords=10, tolerance=1e-4,
                      batch=2) -> dict:
    """Finite-difference check of the full model loss per parameter tensor."""
    loss_fn = toy_loss_fn(bundle, seed=seed, batch=batch)
    loss = loss_fn()
    for t in bundle.parameters().values():
        t.zero_grad()
    loss.backward()
    rng = np.random.default_rng(seed)
    results = {}
    for name, t in sorted(bundle.parameters().items()):
        ad = t.grad
        count = min(max_coords, t.size)
        coords = rng.choice(t.size, size=count, replace=False)
        worst = 0.0
        base = t.data.copy()
        for c in coords:
            # multi-index assignment: reshape(-1) copies non-contiguous data
            idx = np.unravel_index(c, t.shape)
            h = 1e-5
            t.data[idx] = base[idx] + h
            up = loss_fn().item()
            t.data[idx] = base[idx] - h
            down = loss_fn().item()
            t.data[idx] = base[idx]
            fd = (up - down) / (2 * h)
            denom = max(abs(fd), abs(ad.reshape(-1)[c]), 1.0)
            worst = max(worst, abs(fd - ad.reshape(-1)[c]) / denom)
        results[name] = {"max_relative_error": float(worst),
                         "passed": bool(worst < tolerance),
                         "checked_coordinates": int(count)}
    return results


# -- parser ------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="hierpath", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve-dims", help="enumerate conversion parameter tuples")
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--target-p", type=int, required=True)
    p.add_argument("--kind", choices=["conv", "pool"], required=True)
    p.add_argument("--format", choices=["table", "json"], default="table")
    p.set_defaults(func=cmd_solve_dims)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--tree", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-leaf", type=int, default=50)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--multilabel", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or compare variants")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--beam-width", type=int, default=5)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--compare", action="store_true")
    p.add_argument("--config", default=None)
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decode", help="write a prediction file for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", default=None)
    p.add_argument("--beam-width", type=int, default=5)
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("gradcheck", help="finite-difference check of a model config")
    p.add_argument("--config", default=None)
    p.add_argument("--tree", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-coords", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args) or 0
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
