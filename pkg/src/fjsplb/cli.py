"""Command-line entry point: ``fjsplb <command> ...``.

Setting ``FJSPLB_SEED`` overrides every ``--seed`` flag.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import bench
from .baselines import RULES, branch_and_bound, pdr_schedule
from .env import EnvConfig, EpisodeTrace
from .instance import (GeneratorConfig, InstanceError, generate_set, load_instance_dir, parse_size,
                       read_instance, write_instance)
from .net import CheckpointError
from .ppo import TEST_SEED, PPOConfig, finetune, train

SEED_ENV = "FJSPLB_SEED"


def _seed(value: int) -> int:
    env = os.environ.get(SEED_ENV)
    return int(env) if env not in (None, "") else value


def _load_set(path) -> list:
    p = Path(path)
    return load_instance_dir(p) if p.is_dir() else [read_instance(p)]


def _env_config(args) -> EnvConfig:
    return EnvConfig(lam=args.lam, eviction=args.eviction)


def cmd_generate(args) -> int:
    n, m = parse_size(args.size)
    seed = _seed(args.seed)
    if args.tiny:
        cfg = GeneratorConfig.tiny(seed)
    else:
        cfg = GeneratorConfig.for_size(n, m, seed=seed, category_count=args.categories)
    out = Path(args.out)
    if args.count == 1 and out.suffix == ".json":
        insts = generate_set(cfg, 1, seed)
        write_instance(insts[0], out)
        print(out)
        return 0
    out.mkdir(parents=True, exist_ok=True)
    for i, inst in enumerate(generate_set(cfg, args.count, seed)):
        write_instance(inst, out / f"{i:05d}.json")
    print(f"{args.count} instances in {out}")
    return 0


def cmd_solve(args) -> int:
    inst = read_instance(args.inp)
    trace = pdr_schedule(inst, args.rule, _env_config(args))
    text = json.dumps(trace.to_dict(), indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(f"makespan {trace.makespan:g} switches {trace.total_switches}")
    return 0


def cmd_oracle(args) -> int:
    inst = read_instance(args.inp)
    res = branch_and_bound(inst, node_limit=int(float(args.nodes)), time_limit=args.time_limit,
                           env_config=_env_config(args))
    status = "optimal" if res.optimal else "best found (limit reached)"
    print(f"makespan {res.optimal_makespan:g} switches {res.best_switches} nodes {res.nodes_explored} {status}")
    return 0


def _ppo_config(args) -> PPOConfig:
    cfg = PPOConfig()
    if args.config:
        cfg = PPOConfig.from_dict(json.loads(Path(args.config).read_text()))
    overrides = {}
    if getattr(args, "size", None):
        overrides["n_jobs"], overrides["n_machines"] = parse_size(args.size)
    if args.iterations is not None:
        overrides["max_iterations"] = args.iterations
    if args.seed is not None or os.environ.get(SEED_ENV):
        s = _seed(args.seed if args.seed is not None else cfg.seed)
        overrides["seed"] = s
        overrides["net"] = replace(cfg.net, seed=s)
    return replace(cfg, **overrides)


def cmd_train(args) -> int:
    cfg = _ppo_config(args)
    rows = train(cfg, args.out)
    last = next((r for r in reversed(rows) if "best_val_makespan" in r), None)
    if last:
        print(f"best validation makespan {last['best_val_makespan']:.4f}")
    print(f"checkpoints in {args.out}")
    return 0


def cmd_finetune(args) -> int:
    cfg = replace(_ppo_config(args), kl_coeff=args.kl)
    rows = finetune(args.source, cfg, args.out, _load_set(args.data))
    last = next((r for r in reversed(rows) if "best_val_makespan" in r), None)
    if last:
        print(f"best validation makespan {last['best_val_makespan']:.4f}")
    return 0


def _test_set(args):
    if args.data:
        return _load_set(args.data)
    n, m = parse_size(args.size)
    seed = _seed(args.seed)
    return generate_set(GeneratorConfig.for_size(n, m, category_count=args.categories), args.count,
                        TEST_SEED + seed)


def cmd_eval(args) -> int:
    test = _test_set(args)
    env_cfg = _env_config(args)
    ref = bench.reference_values(test, args.reference, env_cfg)
    reports = []
    for spec in args.method:
        method = bench.Method.parse(spec)
        rep = bench.evaluate(method, test, args.strategy, args.samples, _seed(args.seed), ref,
                             args.reference, env_cfg)
        reports.append(rep)
        gap = rep.mean_gap
        print(f"{rep.method:>12} {rep.strategy:>8}  makespan {rep.mean_makespan:9.3f}  "
              f"switches {rep.mean_switches:6.3f}  gap_vs_{args.reference} "
              f"{'n/a' if gap is None else f'{100 * gap:+.2f}%'}")
    if args.out:
        for p in bench.write_reports(reports, args.out):
            print(p)
    return 0


def cmd_ablate(args) -> int:
    test = _test_set(args)
    root = Path(args.runs)
    ckpts = {}
    for v in list(bench.CONNECTIVITY_VARIANTS) + list(bench.FEATURE_VARIANTS):
        found = sorted((root / v).glob("*/best.ckpt")) if (root / v).is_dir() else []
        if found:
            ckpts[v] = found
    rows = bench.ablation_matrix(ckpts, test, _env_config(args))
    for r in rows:
        if r.makespan is None:
            print(f"{r.variant:32} absent")
        else:
            print(f"{r.variant:32} makespan {r.makespan:9.3f} ({'n/a' if r.makespan_gap is None else f'{100 * r.makespan_gap:+.2f}%'})"
                  f"  switches {r.switches:6.3f}")
    if args.out:
        bench.write_ablation(rows, args.out)
    return 0


def cmd_gantt(args) -> int:
    trace = EpisodeTrace.from_dict(json.loads(Path(args.trace).read_text()))
    doc = bench.export_gantt(trace)
    Path(args.out).write_text(bench.dumps_gantt(doc) + "\n")
    if args.svg:
        Path(args.svg).write_text(bench.gantt_svg(doc))
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="fjsplb", description=__doc__, formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def env_flags(sp):
        sp.add_argument("--lam", type=float, default=1.0, help="switch penalty weight in the reward")
        sp.add_argument("--eviction", choices=("demand", "lru", "index"), default="demand",
                        help="which pallet to clear when the buffer is full")

    def set_flags(sp):
        sp.add_argument("--data", help="instance file or directory (default: generate a seeded test set)")
        sp.add_argument("--size", default="10x5", help="jobs x machines for a generated test set")
        sp.add_argument("--count", type=int, default=100, help="instances in a generated test set")
        sp.add_argument("--categories", type=int, default=10, help="part categories for generated instances")
        sp.add_argument("--seed", type=int, default=0, help="seed offset for the test set and sampling")

    g = sub.add_parser("generate", help="write random instances", formatter_class=fmt)
    g.add_argument("--size", default="10x5", help="jobs x machines")
    g.add_argument("--seed", type=int, default=0, help="base seed")
    g.add_argument("--count", type=int, default=1, help="number of instances")
    g.add_argument("--categories", type=int, default=10, help="part categories")
    g.add_argument("--tiny", action="store_true", help="3 jobs, 2 machines, 3 categories, 2 pallets")
    g.add_argument("--out", required=True, help="a .json file (count 1) or a directory")
    g.set_defaults(fn=cmd_generate)

    s = sub.add_parser("solve", help="schedule one instance with a dispatching rule", formatter_class=fmt)
    s.add_argument("--rule", choices=RULES, default="mwr", help="sequencing rule")
    s.add_argument("--in", dest="inp", required=True, help="instance file")
    s.add_argument("--out", help="trace file to write")
    env_flags(s)
    s.set_defaults(fn=cmd_solve)

    o = sub.add_parser("oracle", help="exact branch-and-bound (small instances)", formatter_class=fmt)
    o.add_argument("--in", dest="inp", required=True, help="instance file")
    o.add_argument("--nodes", default="1e7", help="node budget")
    o.add_argument("--time-limit", type=float, default=None, help="seconds")
    env_flags(o)
    o.set_defaults(fn=cmd_oracle)

    t = sub.add_parser("train", help="train a policy with PPO", formatter_class=fmt)
    t.add_argument("--size", default="10x5", help="jobs x machines of training instances")
    t.add_argument("--config", help="JSON training configuration (fields of PPOConfig)")
    t.add_argument("--iterations", type=int, default=None, help="override max_iterations")
    t.add_argument("--seed", type=int, default=None, help="override the configured seed")
    t.add_argument("--out", required=True, help="run directory")
    t.set_defaults(fn=cmd_train)

    f = sub.add_parser("finetune", help="continue training on a fixed instance set with a KL anchor",
                       formatter_class=fmt)
    f.add_argument("--from", dest="source", required=True, help="starting checkpoint")
    f.add_argument("--kl", type=float, default=0.05, help="KL coefficient toward the starting policy")
    f.add_argument("--data", required=True, help="instance directory")
    f.add_argument("--config", help="JSON training configuration")
    f.add_argument("--iterations", type=int, default=None, help="override max_iterations")
    f.add_argument("--seed", type=int, default=None, help="override the configured seed")
    f.add_argument("--out", required=True, help="run directory")
    f.set_defaults(fn=cmd_finetune)

    e = sub.add_parser("eval", help="evaluate methods on a test set", formatter_class=fmt)
    e.add_argument("--method", action="append", required=True,
                   help="fifo|mor|spt|mwr|lwr|random|ckpt:PATH (repeatable)")
    e.add_argument("--strategy", choices=("greedy", "sampling"), default="greedy", help="decoding")
    e.add_argument("--samples", type=int, default=100, help="runs per instance for sampling")
    e.add_argument("--reference", choices=("best_pdr", "oracle"), default="best_pdr",
                   help="gap reference; oracle only for tiny instances")
    e.add_argument("--out", help="report prefix; writes _summary, _detail and _timing CSVs")
    set_flags(e)
    env_flags(e)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="evaluate trained ablation variants", formatter_class=fmt)
    a.add_argument("--runs", required=True, help="directory with <variant>/<run>/best.ckpt")
    a.add_argument("--out", help="CSV file to write")
    set_flags(a)
    env_flags(a)
    a.set_defaults(fn=cmd_ablate)

    gt = sub.add_parser("gantt", help="export a trace as a Gantt document", formatter_class=fmt)
    gt.add_argument("--trace", required=True, help="trace file written by solve")
    gt.add_argument("--out", required=True, help="JSON document")
    gt.add_argument("--svg", help="optional vector image")
    gt.set_defaults(fn=cmd_gantt)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (InstanceError, CheckpointError, bench.ContractError, ValueError, OSError) as exc:
        print(f"fjsplb {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
