"""Command-line front end.

Exit codes: 0 success, 1 domain or validation error, 2 I/O or format error,
3 invalid usage. Diagnostics go to stderr; data goes to files or stdout.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import analysis
from .calib import ToyDims, calibrate, gen_toy_model, load_toy_model, make_batch, score_model
from .checkpoint import Checkpoint, PRESETS, open_model
from .errors import MoePruneError
from .pruning import PLAN_FILE, REPORT_FILE, apply_plan, make_plan, prune_model, verify_pruned
from .scoring import CALIBRATED, DEFAULT_SEED, WEIGHT_ONLY, ScoreTable, score_checkpoint

EXIT_OK, EXIT_DOMAIN, EXIT_IO, EXIT_USAGE = 0, 1, 2, 3
THREADS_ENV = "MOEPRUNE_THREADS"
DEFAULT_PARAM_BUDGET = 50_000_000

log = logging.getLogger("moeprune")

_CALIB_ALIASES = {"freq": "frequency"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _open_ratio(text: str) -> float:
    r = float(text)
    if not 0 < r < 1:
        raise argparse.ArgumentTypeError(f"ratio must lie strictly between 0 and 1, got {text}")
    return r


def _unit_ratio(text: str) -> float:
    r = float(text)
    if not 0 <= r < 1:
        raise argparse.ArgumentTypeError(f"ratio must lie in [0, 1), got {text}")
    return r


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s]
    except ValueError:
        raise argparse.ArgumentTypeError(f"sizes must be comma-separated integers: {text}")
    if not sizes or sizes != sorted(sizes) or sizes[0] < 1:
        raise argparse.ArgumentTypeError("sizes must be positive and ascending")
    return sizes


def _calib_criterion(text: str) -> str:
    name = _CALIB_ALIASES.get(text, text)
    if name not in CALIBRATED:
        raise argparse.ArgumentTypeError(
            f"invalid calibration criterion {text!r} (choose from freq, seer, ean, reap)")
    return name


def _any_criterion(text: str) -> str:
    name = _CALIB_ALIASES.get(text, text)
    if name not in WEIGHT_ONLY + CALIBRATED:
        raise argparse.ArgumentTypeError(f"unknown criterion {text!r}")
    return name


def _layout_arg(p):
    p.add_argument("--layout", default=None,
                   help=f"preset ({', '.join(PRESETS)}) or layout JSON; "
                        "defaults to the config's layout_preset, else qwen3-like")


def _resolve_layout(args, model_dir) -> str:
    if args.layout:
        return args.layout
    cfg = Path(model_dir) / "config.json"
    if cfg.exists():
        try:
            return json.loads(cfg.read_text()).get("layout_preset", "qwen3-like")
        except json.JSONDecodeError:
            pass
    return "qwen3-like"


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    return max(1, int(env)) if env and env.isdigit() else 1


def _write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


def _summary(table: ScoreTable) -> None:
    print(f"criterion={table.criterion.id} prune_end={table.criterion.prune_end} "
          f"layers={table.num_layers} time={table.timing_seconds:.3f}s")
    for l, s in enumerate(table.layers):
        print(f"  layer {l:3d}: n={s.size} min={s.min():.6g} mean={s.mean():.6g} max={s.max():.6g}")


# --------------------------------------------------------------------------
# commands


def cmd_score(args) -> int:
    ckpt, layout, _ = open_model(args.model, _resolve_layout(args, args.model))
    table = score_checkpoint(ckpt, layout, args.criterion,
                             seed=args.seed if args.criterion == "random" else None,
                             threads=_threads(args))
    table.save(args.out)
    _summary(table)
    return EXIT_OK


def cmd_prune(args) -> int:
    ckpt, layout, _ = open_model(args.model, _resolve_layout(args, args.model))
    table = ScoreTable.load(args.scores)
    plan = make_plan(table, args.ratio, layout)
    out = apply_plan(ckpt, layout, plan, args.out)
    plan.save(out / PLAN_FILE)
    report = verify_pruned(ckpt, Checkpoint(out), plan, layout)
    _write_json(out / REPORT_FILE, report.to_dict())
    print(f"pruned {plan.prune_count} of {layout.num_experts} experts per layer "
          f"({layout.num_layers} layers) -> {out}")
    print(f"expert params {report.original_expert_params} -> {report.pruned_expert_params}")
    if not report.ok:
        for f in report.failures:
            print(f"verification failed: {f}", file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


def cmd_gen_toy(args) -> int:
    if args.topk > args.experts:
        raise UsageError(f"--topk {args.topk} exceeds --experts {args.experts}")
    dims = ToyDims(args.layers, args.experts, args.topk, args.dim, args.hidden)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise UsageError(f"{out} is not empty")
    gen_toy_model(args.seed, dims, out, layout=args.layout, dtype=args.dtype,
                  shard_limit=args.shard_size, materialize=False)
    print(f"wrote toy checkpoint L={dims.layers} n={dims.experts} k={dims.top_k} "
          f"d={dims.hidden} m={dims.expert_hidden} seed={args.seed} -> {out}")
    return EXIT_OK


def _load_toy(args):
    ckpt, layout, config = open_model(args.model, _resolve_layout(args, args.model))
    params = layout.num_layers * layout.num_experts * (layout.expert_numel + layout.hidden_dim)
    if params > args.max_params:
        raise MoePruneError(
            f"model has {params} routed parameters, above the toy budget of {args.max_params}; "
            "calibration runs only on toy-scale models (raise --max-params to override)"
        )
    return ckpt, layout, load_toy_model(ckpt, layout, config)


def cmd_calibrate(args) -> int:
    ckpt, layout, model = _load_toy(args)
    table, stats = calibrate(model, args.criterion, args.tokens, args.seed,
                             layout.hash(), ckpt.fingerprint(layout))
    table.save(args.out)
    out = Path(args.out)
    stats.save(out.with_name(out.stem + ".stats.json"))
    _summary(table)
    return EXIT_OK


def cmd_profile(args) -> int:
    tables = [ScoreTable.load(p) for p in args.scores]
    prefix = Path(args.out)
    for t in tables:
        name = prefix if len(tables) == 1 else prefix.with_name(f"{prefix.name}_{t.criterion.id}")
        for p in analysis.export(analysis.rank_profile(t), name):
            print(p)
    for p in analysis.export(analysis.separation_report(tables),
                             prefix.with_name(prefix.name + "_separation")):
        print(p)
    return EXIT_OK


def cmd_variance(args) -> int:
    _, layout, model = _load_toy(args)
    batch = make_batch(args.tokens, model.hidden_dim, args.seed)
    variants = {}
    for crit in args.criterion or ["aimer"]:
        if crit in CALIBRATED:
            table, _ = calibrate(model, crit, args.tokens, args.seed)
        else:
            table = score_model(model, crit, args.seed)
        plan = make_plan(table, args.prune_ratio, layout.with_experts(model.num_experts))
        variants[f"{crit}@{args.prune_ratio:g}"] = prune_model(model, plan)
    curves = analysis.layer_variance(model, batch, variants)
    for p in analysis.export(curves, args.out):
        print(p)
    return EXIT_OK


def cmd_stability(args) -> int:
    _, _, model = _load_toy(args)
    result = analysis.stability_study(model, args.criterion, args.sizes, args.seed, args.ratio)
    for p in analysis.export(result, args.out):
        print(p)
    mt = result.mean_tau()
    print("mean tau over layers:")
    for i, s in enumerate(result.sizes):
        print(f"  {s:>7d}: " + " ".join(f"{v:+.3f}" for v in mt[i]))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="moeprune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=_positive, default=None,
                        help=f"worker threads (default: ${THREADS_ENV} or 1)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("score", help="weight-only expert scores")
    p.add_argument("--model", required=True)
    _layout_arg(p)
    p.add_argument("--criterion", required=True, choices=WEIGHT_ONLY)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("prune", help="apply a score table at a pruning ratio")
    p.add_argument("--model", required=True)
    _layout_arg(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--ratio", required=True, type=_open_ratio)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("gen-toy", help="write a seeded toy MoE checkpoint")
    p.add_argument("--layers", type=_positive, default=4)
    p.add_argument("--experts", type=_positive, default=8)
    p.add_argument("--topk", type=_positive, default=2)
    p.add_argument("--dim", type=_positive, default=64)
    p.add_argument("--hidden", type=_positive, default=32)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--layout", default="qwen3-like", choices=sorted(PRESETS))
    p.add_argument("--dtype", default="F32", choices=["F32", "F16", "BF16"])
    p.add_argument("--shard-size", type=_positive, default=None, help="max data bytes per shard")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_toy)

    budget = dict(type=_positive, default=DEFAULT_PARAM_BUDGET,
                  help="refuse models with more routed parameters than this")

    p = sub.add_parser("calibrate", help="calibration-based scores on a toy model")
    p.add_argument("--model", required=True)
    _layout_arg(p)
    p.add_argument("--criterion", required=True, type=_calib_criterion)
    p.add_argument("--tokens", type=_nonneg, default=1024)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--max-params", **budget)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("profile", help="rank profiles and separation from score tables")
    p.add_argument("--scores", required=True, nargs="+")
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("variance", help="layer-wise hidden-state variance, full vs pruned")
    p.add_argument("--model", required=True)
    _layout_arg(p)
    p.add_argument("--prune-ratio", type=_unit_ratio, default=0.5)
    p.add_argument("--criterion", action="append", type=_any_criterion)
    p.add_argument("--tokens", type=_positive, default=4096)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--max-params", **budget)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_variance)

    p = sub.add_parser("stability", help="ranking stability across calibration sizes")
    p.add_argument("--model", required=True)
    _layout_arg(p)
    p.add_argument("--criterion", default="reap", type=_any_criterion)
    p.add_argument("--sizes", type=_sizes, default=[64, 256, 1024, 4096])
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--ratio", type=_unit_ratio, default=0.5)
    p.add_argument("--max-params", **budget)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_stability)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:      # usage errors (3) and --help (0)
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    start = time.perf_counter()
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"moeprune {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MoePruneError as exc:
        print(f"moeprune {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"moeprune {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    log.info("%s finished in %.3fs", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
