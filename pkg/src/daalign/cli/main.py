"""``daalign`` command-line entry point."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from ..toydet.snapshot import generate_snapshot, read_snapshot
from ..toydet.train import TrainingError
from .config import RunConfig, load_config, parse_pairs, resolve_output, toy_benchmark_config
from .runner import VARIANTS, run_ablation, run_eval, run_train

log = logging.getLogger("daalign")


def _overrides(args) -> dict[str, str]:
    pairs = parse_pairs(args.set or [])
    for key in ("seed", "steps"):
        value = getattr(args, key, None)
        if value is not None:
            pairs[key] = str(value)
    if getattr(args, "out", None):
        pairs["out_dir"] = args.out
    return pairs


def _config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = load_config(args.config, None) if args.config else (base or RunConfig())
    return cfg.with_overrides(_overrides(args))


def cmd_train(args) -> int:
    cfg = _config(args)
    res = run_train(cfg, resume=args.resume)
    print(res.report.to_text(), end="")
    print(f"checkpoint: {res.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    scenes = read_snapshot(args.data)[0] if args.data else None
    out = resolve_output(args.out) if args.out else None
    report = run_eval(args.checkpoint, scenes, out)
    print(report.to_text(), end="")
    return 0


def cmd_ablate(args) -> int:
    base = _config(args, toy_benchmark_config())
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    variants = args.variants.split(",") if args.variants else None
    result = run_ablation(base, seeds, variants, progress=lambda msg: log.info(msg))
    print(result.to_text(), end="")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    root = resolve_output(args.out)
    shift = cfg.shift()
    for name, count, sh in (("src-train", cfg.source_size, None), ("tgt-train", cfg.target_size, shift),
                            ("tgt-test", cfg.test_size, shift)):
        path = generate_snapshot(root / name, cfg.seed, name, count, sh, workers=args.workers)
        print(f"{name}: {count} scenes -> {path}")
    print(f"use with: data_dir = {root}")
    return 0


def cmd_check(args) -> int:
    from ..checks import run_checks

    results = run_checks(quick=args.quick)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    if args.ablation:
        seeds = [0, 1, 2] if args.quick else [0, 1, 2, 3, 4]
        base = toy_benchmark_config(out_dir=args.out or "runs/check-ablation")
        if args.quick:
            base = replace(base, pretrain_steps=300, steps=60)
        res = run_ablation(base, seeds)
        print(res.to_text(), end="")
        ok = ok and all(res.orderings().values())
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="daalign", description="Object-aware and transport-based feature "
                                     "alignment on a synthetic two-domain detection benchmark.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_flags(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="train one configuration")
    config_flags(p)
    p.add_argument("--resume", help="continue from a checkpoint written under the same configuration")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="target mAP table for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data", help="snapshot directory (default: regenerate the run's target test split)")
    p.add_argument("--out", help="directory for eval_report.txt / eval_report.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="placement and component ablation over seeds")
    config_flags(p)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--variants", help=f"comma list from: {', '.join(VARIANTS)}")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gen-data", help="write source/target snapshots")
    config_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("check", help="run the invariant and oracle suite")
    p.add_argument("--quick", action="store_true", help="reduced trial counts")
    p.add_argument("--ablation", action="store_true", help="also run the directional ablation study")
    p.add_argument("--out", help="output directory for the ablation runs")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "gen-data" and not args.out:
        args.out = "data"
    try:
        return args.func(args)
    except (ValueError, TrainingError, OSError) as exc:
        print(f"daalign {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
