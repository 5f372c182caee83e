"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL (or FLAG) line that is echoed in the pytest
terminal summary.  The two training criteria cache their checkpoints under
``.acceptance_cache`` (override with ``FJSPLB_ACCEPTANCE_CACHE``), keyed by
the training config and a hash of the package sources, so a rerun on
unchanged code only evaluates.
"""

import hashlib
import json
import os
import shutil
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import fjsplb
from fjsplb import bench
from fjsplb.baselines import RULES, branch_and_bound, pdr_choose, pdr_schedule, random_policy
from fjsplb.buffer import EMPTY, BufferState, apply_kitting, estimate_switches
from fjsplb.env import EnvConfig, SchedulingEnv, check_schedule, new_trace, record_step, run_policy
from fjsplb.graph import buffer_edge_weight, inverse_edge_weight
from fjsplb.instance import GeneratorConfig, generate_instance, generate_set
from fjsplb.net import NetConfig, PolicyParams
from fjsplb.ppo import TEST_SEED, PPOConfig, collect_rollouts, train

from cases import gradient_check, mid_episode_graphs
from conftest import ACCEPTANCE_LINES
from oracles import enumerate_makespans, kitting_by_single_parts

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("FJSPLB_ACCEPTANCE_CACHE", ROOT / ".acceptance_cache"))


def report(n, ok, detail, flag=False):
    status = "PASS" if ok else ("FLAG" if flag else "FAIL")
    line = f"criterion {n} {status}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def source_hash():
    h = hashlib.sha256()
    for p in sorted(Path(fjsplb.__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def cached_training(config: PPOConfig, tag: str) -> Path:
    """Train once per (config, source) pair; an interrupted run is discarded."""
    key = hashlib.sha256((json.dumps(config.to_dict(), sort_keys=True) + source_hash()).encode()).hexdigest()[:16]
    final = CACHE / f"{tag}-{key}"
    if not (final / "best.ckpt").exists():
        work = CACHE / f"{tag}-{key}.partial"
        shutil.rmtree(work, ignore_errors=True)
        train(config, work)
        shutil.rmtree(final, ignore_errors=True)
        work.rename(final)
    return final / "best.ckpt"


# ---------------------------------------------------------------- 1


def test_simulator_validity():
    t0 = time.perf_counter()
    violations = []
    for ep in range(1000):
        inst = generate_instance(GeneratorConfig(n_jobs=10, n_machines=5, seed=ep))
        env = SchedulingEnv(inst)
        rng = np.random.default_rng(ep)
        s = env.reset()
        trace = new_trace(env, s)
        while not env.done(s):
            acts = env.eligible_actions(s)
            a = acts[int(rng.integers(len(acts)))]
            res = env.step(s, a)
            record_step(env, trace, a, res)
            s = res.state
            violations += [f"episode {ep}: {v}" for v in s.buffer.check()]
        violations += [f"episode {ep}: {v}" for v in check_schedule(env, s, trace)]
    elapsed = time.perf_counter() - t0
    ok = not violations and elapsed < 120
    report(1, ok, f"1000 random 10x5 episodes, {len(violations)} violations, {elapsed:.1f}s (limit 120s)")
    assert not violations, violations[:5]
    assert elapsed < 120


# ---------------------------------------------------------------- 2


def test_kitting_matches_single_part_reference():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(500):
        P = int(rng.integers(1, 8))
        C = int(rng.integers(P, 14))
        cats = [int(c) if rng.random() < 0.7 else EMPTY for c in rng.choice(C, size=P, replace=False)]
        fills = [0 if c == EMPTY else int(rng.integers(1, 6)) for c in cats]
        last = [int(x) for x in rng.integers(0, 30, size=P)]
        buf = BufferState(tuple(cats), tuple(fills), tuple(last), int(rng.integers(0, 10)), 30)
        k = int(rng.integers(0, P + 1))
        parts = [(int(c), int(rng.integers(1, 5))) for c in rng.choice(C, size=k, replace=False)]
        demand = {c: int(rng.integers(0, 5)) for c in range(C)}
        tp, tsw = int(rng.integers(1, 4)), int(rng.integers(1, 9))
        est = estimate_switches(buf, parts)
        res = apply_kitting(buf, parts, tp, tsw, "demand", demand)
        sw, dur, held, _ = kitting_by_single_parts(cats, fills, last, parts, tp, tsw, demand, rng)
        if (res.switches, res.duration) != (sw, dur) or est != res.switches or res.buffer.held() != held:
            mismatches += 1
    report(2, mismatches == 0, f"500 kitting scenarios, {mismatches} mismatches against the single-part reference")
    assert mismatches == 0


# ---------------------------------------------------------------- 3


def test_reward_telescopes():
    worst = 0.0
    lams = (0.0, 0.5, 1.0, 2.0)
    policies = ["random", *RULES]
    for ep in range(160):
        lam = lams[ep % 4]
        cfg = EnvConfig(lam=lam, ps_time_mode=("replace", "additive")[ep % 2])
        env = SchedulingEnv(generate_instance(GeneratorConfig(n_jobs=6, seed=300 + ep)), cfg)
        kind = policies[ep % len(policies)]
        if kind == "random":
            rng = np.random.default_rng(ep)
            trace, _ = run_policy(env, lambda s, acts: acts[int(rng.integers(len(acts)))])
        else:
            trace, _ = run_policy(env, pdr_choose(env, kind))
        total = sum(r.reward for r in trace.records)
        worst = max(worst, abs(total - (trace.est_initial - trace.makespan - lam * trace.total_switches)))
    # the last 40 episodes come from a sampling network policy
    insts = generate_set(GeneratorConfig(n_jobs=6), 40, 500)
    for tr in collect_rollouts(PolicyParams(NetConfig(embed_dim=4, hidden_dim=8, seed=9)), insts, 11):
        total = sum(s.reward for s in tr.steps)
        t = tr.trace
        worst = max(worst, abs(total - (t.est_initial - t.makespan - t.total_switches)))
    report(3, worst <= 1e-6, f"200 mixed-policy episodes, max telescoping residual {worst:.2e} (limit 1e-6)")
    assert worst <= 1e-6


# ---------------------------------------------------------------- 4


def test_oracle_dominance():
    t0 = time.perf_counter()
    bad = []
    for seed in range(100):
        inst = generate_instance(GeneratorConfig.tiny(seed))
        res = branch_and_bound(inst)
        truth = enumerate_makespans(SchedulingEnv(inst))
        if not res.optimal or res.optimal_makespan != truth:
            bad.append(f"instance {seed}: search {res.optimal_makespan} vs enumeration {truth}")
        rollouts = [pdr_schedule(inst, r).makespan for r in RULES]
        rollouts += [random_policy(inst, k).makespan for k in range(10)]
        if min(rollouts) < truth:
            bad.append(f"instance {seed}: rollout {min(rollouts)} below optimum {truth}")
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 300
    report(4, ok, f"100 tiny instances, {len(bad)} disagreements, {elapsed:.1f}s (limit 300s)")
    assert not bad, bad[:5]
    assert elapsed < 300


# ---------------------------------------------------------------- 5


def test_gradients_match_finite_differences():
    analytic, numeric, names = gradient_check(embed_dim=4, layers=2, seed=0)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    worst = int(np.argmax(err))
    ok = err.max() <= 1e-6 and len(set(names)) == len(PolicyParams(
        NetConfig(category_count=4, embed_dim=4, hidden_dim=6, gnn_layers=2)).arrays)
    report(5, ok, f"{len(analytic)} parameters, max relative error {err.max():.2e} at {names[worst]} (limit 1e-6)")
    assert ok


# ---------------------------------------------------------------- 6


def test_edge_weight_law():
    ws = [buffer_edge_weight(k) for k in range(11)]
    inv = [inverse_edge_weight(k) for k in range(11)]
    checks = [ws[0] == 0.5,
              all(a < b for a, b in zip(ws, ws[1:])),
              all(abs(w + v - 1.0) <= 1e-15 for w, v in zip(ws, inv)),
              all(abs((w - 0.5) + (v - 0.5)) <= 1e-15 for w, v in zip(ws, inv))]
    # the graph builder applies the same law to its buffer edges
    for mode, law in (("sort_only_weighted", buffer_edge_weight), ("sort_only_inverse", inverse_edge_weight)):
        for g in mid_episode_graphs(seed=4, mode=mode, count=3):
            sw = g.op_x[:, -1]
            idx = np.flatnonzero(g.buffer_edge)
            checks.append(all(abs(g.buffer_w[i] - law(sw[i])) <= 1e-12 for i in idx))
    ok = all(checks)
    report(6, ok, f"sigmoid(0)={ws[0]}, monotone over 0..10, inverse mirrors around 0.5, graph weights agree")
    assert ok


# ---------------------------------------------------------------- 7

LEARN = PPOConfig(max_iterations=1000, seed=0)


@pytest.mark.slow
def test_desk_scale_learning_signal():
    ckpt = cached_training(LEARN, "learn")
    test_set = generate_set(LEARN.generator(), 100, TEST_SEED)
    rnd = bench.evaluate(bench.Method.parse("random"), test_set, seed=1)
    pdrs = [bench.evaluate(bench.Method.parse(r), test_set) for r in RULES]
    best_ms = min(p.mean_makespan for p in pdrs)
    min_sw = min(p.mean_switches for p in pdrs)
    model = bench.Method.parse(f"ckpt:{ckpt}")
    greedy = bench.evaluate(model, test_set, "greedy")
    sampling = bench.evaluate(model, test_set, "sampling", n_samples=100, seed=0)
    a = greedy.mean_makespan <= 0.97 * rnd.mean_makespan
    b = greedy.mean_makespan <= 1.05 * best_ms and sampling.mean_makespan <= best_ms
    c = greedy.mean_switches <= 0.90 * min_sw
    report(7, a and b and c,
           f"greedy {greedy.mean_makespan:.2f}/{greedy.mean_switches:.2f}sw, sampling {sampling.mean_makespan:.2f}, "
           f"random {rnd.mean_makespan:.2f}, best rule {best_ms:.2f}, fewest rule switches {min_sw:.2f} "
           f"[a={'ok' if a else 'no'} b={'ok' if b else 'no'} c={'ok' if c else 'no'}]")
    assert a, (greedy.mean_makespan, rnd.mean_makespan)
    assert b, (greedy.mean_makespan, sampling.mean_makespan, best_ms)
    assert c, (greedy.mean_switches, min_sw)


# ---------------------------------------------------------------- 8

ABLATION = PPOConfig(max_iterations=200, n_validation=50)
ABLATION_VARIANTS = ("Pallet_SortOnly_Weighted", "Base", "Pallet_AllOps")


@pytest.mark.slow
def test_ablation_order():
    ckpts = {}
    for v in ABLATION_VARIANTS:
        ckpts[v] = []
        for s in range(3):
            cfg = replace(ABLATION, seed=s, net=replace(bench.variant_net_config(v, ABLATION.net), seed=s))
            ckpts[v].append(cached_training(cfg, f"ablate-{v}-seed{s}"))
    test_set = generate_set(ABLATION.generator(), 100, TEST_SEED)
    rows = {r.variant: r for r in bench.ablation_matrix(ckpts, test_set)}
    full = rows["Pallet_SortOnly_Weighted"].makespan
    base, allops = rows["Base"].makespan, rows["Pallet_AllOps"].makespan
    ordered = full < base and full < allops
    report(8, ordered, f"mean over 3 seeds: weighted {full:.2f}, base {base:.2f}, all-ops {allops:.2f}"
           + ("" if ordered else " (order not reproduced; flagged as a discrepancy)"), flag=True)
    for v in ABLATION_VARIANTS:
        assert rows[v].seeds == 3 and np.isfinite(rows[v].makespan)


# ---------------------------------------------------------------- 9


def pipeline(out: Path):
    env = dict(os.environ)
    env.pop("FJSPLB_SEED", None)

    def cli(*args):
        subprocess.run([sys.executable, "-m", "fjsplb", *map(str, args)], check=True, env=env,
                       capture_output=True, text=True)

    cli("generate", "--size", "10x5", "--count", 20, "--seed", 3, "--out", out / "data")
    (out / "cfg.json").write_text(json.dumps({"n_validation": 20}))
    cli("train", "--size", "10x5", "--config", out / "cfg.json", "--iterations", 50, "--seed", 0,
        "--out", out / "run")
    cli("eval", "--method", f"ckpt:{out / 'run' / 'best.ckpt'}", "--method", "mwr", "--data", out / "data",
        "--out", out / "greedy")
    cli("eval", "--method", f"ckpt:{out / 'run' / 'best.ckpt'}", "--strategy", "sampling", "--samples", 8,
        "--data", out / "data", "--out", out / "sampling")
    return [out / "run" / "train_log.csv", out / "run" / "best.ckpt",
            out / "greedy_summary.csv", out / "greedy_detail.csv",
            out / "sampling_summary.csv", out / "sampling_detail.csv"]


@pytest.mark.slow
def test_end_to_end_reproducible(tmp_path):
    a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    differ = [x.name for x, y in zip(a, b) if x.read_bytes() != y.read_bytes()]
    rows = len((tmp_path / "a" / "run" / "train_log.csv").read_text().splitlines()) - 1
    report(9, not differ and rows == 50,
           f"two generate/train/eval runs, {rows} log rows, differing files: {differ or 'none'}")
    assert not differ and rows == 50
