"""Command-line entry points: ``spinelab <command> [flags]``.

Run directories are created under ``$SPINELAB_RUNS`` (default ``./runs``).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from .adapt import AdaptConfig, ConfigError, coerce_value, config_text, parse_config_text, \
    run_adaptation
from .evaluation import evaluate_pass1
from .policy import load_checkpoint, save_checkpoint
from .pretrain import PretrainConfig, PretrainError, pretrain
from .tasks import dump_instances, extract_answer, generate_instances, grade, make_splits
from .telemetry import PANELS, entropy_histogram, mean_curve, metrics_csv, series_of, svg_line_chart

RUNS_ENV = "SPINELAB_RUNS"
log = logging.getLogger("spinelab")


def runs_root():
    return os.environ.get(RUNS_ENV, "runs")


def _add_data_flags(p):
    g = p.add_argument_group("data")
    g.add_argument("--data-seed", type=int, default=0, help="seed for the task splits")
    g.add_argument("--n-pretrain", type=int, default=8000)
    g.add_argument("--n-adapt", type=int, default=64)
    g.add_argument("--n-eval", type=int, default=200)
    g.add_argument("--modulus", type=int, default=11)


def _add_config_flags(p, skip=()):
    p.add_argument("--config", help="flat key = value file; flags override it")
    g = p.add_argument_group("adaptation config")
    for f in fields(AdaptConfig):
        if f.name in skip:
            continue
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                       metavar=f.type.upper() if isinstance(f.type, str) else None,
                       help=f"default {f.default}")


def resolve_config(args, **forced):
    values = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    for f in fields(AdaptConfig):
        raw = getattr(args, f.name, None)
        if raw is not None:
            values[f.name] = coerce_value(f.name, raw)
    values.update(forced)
    return AdaptConfig(**values)


def _splits(args):
    return make_splits(args.data_seed, args.n_pretrain, args.n_adapt, args.n_eval,
                       modulus=args.modulus)


def _held_out(args, pre, count=300):
    """In-distribution instances disjoint from the pretrain split."""
    return generate_instances("modchain", (1, 3), count, args.data_seed + 99, "eval",
                              args.modulus, exclude={p.prompt_tokens for p in pre})


def _load(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def cmd_pretrain(args):
    pre, adapt, ev = _splits(args)
    held = _held_out(args, pre)
    cfg = PretrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                         pass_floor=args.pass_floor, seed=args.seed, target=args.target)
    try:
        policy, hist = pretrain(pre, cfg, held)
    except PretrainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    out = args.out or os.path.join(runs_root(), "pretrained.npz")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    shifted = evaluate_pass1(policy, ev)
    save_checkpoint(policy, out, extra={"history": hist, "data_seed": args.data_seed,
                                        "shifted_pass_at_1": shifted})
    if args.dump_instances:
        os.makedirs(args.dump_instances, exist_ok=True)
        for name, split in (("pretrain", pre), ("adapt", adapt), ("eval", ev)):
            dump_instances(split, os.path.join(args.dump_instances, f"{name}.jsonl"))
    print(f"in-distribution pass@1 {hist[-1].get('pass_at_1')} shifted pass@1 {shifted}")
    print(f"checkpoint written to {out}")
    return 0


def cmd_adapt(args):
    cfg = resolve_config(args)
    _, adapt, ev = _splits(args)
    policy = _load(args.checkpoint)
    run_dir = os.path.join(runs_root(), args.run_name or f"{cfg.method}-seed{cfg.seed}")
    _, recs = run_adaptation(cfg, [x.unlabeled() for x in adapt], policy, ev, run_dir)
    print(f"{cfg.method} seed {cfg.seed}: pass@1 {recs[0].pass_at_1} -> {recs[-1].pass_at_1}")
    print(f"run directory {run_dir}")
    return 0


def cmd_eval(args):
    pre, adapt, ev = _splits(args)
    data = {"eval": ev, "adapt": adapt, "indist": _held_out(args, pre)}[args.split]
    policy = _load(args.checkpoint)
    acc, outs = evaluate_pass1(policy, data, return_outputs=True)
    if args.dump_outputs:
        with open(args.dump_outputs, "w", encoding="utf-8", newline="\n") as fh:
            for x, r in zip(data, outs):
                a = extract_answer(r)
                fh.write(json.dumps({"id": x.id, "response": list(r.response_tokens),
                                     "terminated": r.terminated, "answer": a.canonical,
                                     "gold": x.gold_answer,
                                     "correct": grade(a, x.gold_answer)}, sort_keys=True) + "\n")
    print(f"pass@1 {acc:.4f} on {len(data)} {args.split} instances")
    return 0


def cmd_analyze_entropy(args):
    pre, adapt, ev = _splits(args)
    data = {"eval": ev, "adapt": adapt, "indist": _held_out(args, pre)}[args.split]
    phases = [("before_adaptation", args.checkpoint)]
    if args.after:
        phases.append(("after_adaptation", args.after))
    out = []
    for phase, path in phases:
        h = entropy_histogram(_load(path), data, args.bins, phase, args.rollouts, seed=args.seed)
        out.append(h.as_dict())
        print(f"{phase}: tokens {h.n_tokens} mean {h.mean:.4f} median {h.median:.4f} "
              f"q80 {h.q80:.4f}")
        print("  " + " ".join(str(int(c)) for c in h.counts))
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(out, fh, indent=2)
    return 0


def _parse_seeds(text):
    try:
        seeds = [int(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError:
        raise ConfigError("seeds", f"expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("seeds", "no seeds given")
    return seeds


def compare_runs(cfg, seeds, prompts, eval_instances, policy, out_dir, methods=("ttrl", "spine")):
    """Run every method on every seed from the same start; write merged CSV and charts."""
    runs = {}
    for m in methods:
        for s in seeds:
            c = cfg.replace(method=m, seed=s)
            _, recs = run_adaptation(c, prompts, policy.copy(), eval_instances,
                                     os.path.join(out_dir, f"{m}-seed{s}"))
            runs[(m, s)] = recs
    write_comparison(runs, out_dir)
    return runs


def write_comparison(runs, out_dir):
    os.makedirs(os.path.join(out_dir, "charts"), exist_ok=True)
    with open(os.path.join(out_dir, "merged.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(metrics_csv([r for key in sorted(runs) for r in runs[key]]))
    methods = sorted({m for m, _ in runs})
    with open(os.path.join(out_dir, "mean_curves.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "quantity", "step", "seed_mean"])
        for m in methods:
            group = [runs[k] for k in sorted(runs) if k[0] == m]
            for key, _ in PANELS:
                for x, y in zip(*mean_curve(group, key)):
                    w.writerow([m, key, x, repr(y)])
    for key, title in PANELS:
        series = {}
        for m in methods:
            group = [runs[k] for k in sorted(runs) if k[0] == m]
            series[f"{m} (mean)"] = mean_curve(group, key)
            for k in sorted(runs):
                if k[0] == m:
                    series[f"{m} seed {k[1]}"] = series_of(runs[k], key)
        with open(os.path.join(out_dir, "charts", f"{key}.svg"), "w", encoding="utf-8") as fh:
            fh.write(svg_line_chart(series, title, "step", key))


def cmd_compare(args):
    cfg = resolve_config(args)
    seeds = _parse_seeds(args.seeds)
    _, adapt, ev = _splits(args)
    policy = _load(args.checkpoint)
    out_dir = os.path.join(runs_root(), args.run_name)
    runs = compare_runs(cfg, seeds, [x.unlabeled() for x in adapt], ev, policy, out_dir)
    for m in ("ttrl", "spine"):
        finals = [runs[(m, s)][-1].pass_at_1 for s in seeds]
        print(f"{m}: final pass@1 per seed {finals} mean {np.mean(finals):.4f}")
    print(f"merged metrics and charts in {out_dir}")
    return 0


def cmd_dump_config(args):
    sys.stdout.write(config_text(resolve_config(args)))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="spinelab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="supervised pretraining on the short-chain split")
    _add_data_flags(p)
    p.add_argument("--out", help="checkpoint path (default $SPINELAB_RUNS/pretrained.npz)")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--pass-floor", type=float, default=0.6)
    p.add_argument("--target", type=float, default=None, help="stop early at this pass@1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-instances", metavar="DIR", help="write split jsonl dumps here")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="label-free adaptation on the shifted split")
    _add_data_flags(p)
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--run-name", help="run directory name (default METHOD-seedSEED)")
    p.set_defaults(func=cmd_adapt)

    for name, func, helptext in (("eval", cmd_eval, "greedy pass@1"),
                                 ("analyze-entropy", cmd_analyze_entropy,
                                  "token-entropy histograms before/after adaptation")):
        p = sub.add_parser(name, help=helptext)
        _add_data_flags(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", choices=("eval", "adapt", "indist"), default="eval")
        if name == "eval":
            p.add_argument("--dump-outputs", metavar="PATH", help="jsonl of greedy outputs")
        else:
            p.add_argument("--after", metavar="CKPT", help="adapted checkpoint")
            p.add_argument("--bins", type=int, default=20)
            p.add_argument("--rollouts", type=int, default=8)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--out", metavar="PATH", help="write histograms as json")
        p.set_defaults(func=func)

    p = sub.add_parser("compare", help="ttrl vs spine over several seeds with charts")
    _add_data_flags(p)
    _add_config_flags(p, skip=("method", "seed"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--run-name", default="compare")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("dump-config", help="print the resolved adaptation config")
    _add_config_flags(p)
    p.set_defaults(func=cmd_dump_config)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"spinelab: error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"spinelab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
