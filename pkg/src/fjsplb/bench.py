"""Evaluation harness: methods over test sets, ablations, Gantt export.

Every metric comes from environment accounting (the episode trace), never
from an independent recomputation.  Gaps are always reported against a
named reference: the exact oracle on tiny sets, otherwise the best
dispatching rule per instance.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import RULES, branch_and_bound, pdr_schedule, random_policy
from .env import EnvConfig, EpisodeTrace
from .graph import FEATURE_GROUPS
from .instance import Instance
from .net import NetConfig, PolicyParams
from .ppo import PPOConfig, run_lockstep, train


class ContractError(ValueError):
    pass


# ---------------------------------------------------------------- methods

@dataclass
class Method:
    """A named way of producing schedules: ``fifo``..``lwr``, ``random`` or ``ckpt:PATH``."""

    name: str
    params: PolicyParams | None = None

    @classmethod
    def parse(cls, spec: str) -> "Method":
        spec = spec.strip()
        if spec.lower() in RULES or spec.lower() == "random":
            return cls(spec.lower())
        if spec.startswith("ckpt:"):
            path = Path(spec[5:])
            params = PolicyParams.load(path)
            # reports name the model by content, not by where it happens to live
            digest = hashlib.sha256(path.read_bytes()).hexdigest()[:8]
            return cls(f"ckpt:{path.parent.name}/{path.name}@{digest}", params)
        raise ValueError(f"unknown method {spec!r}")

    @classmethod
    def from_params(cls, params: PolicyParams, name: str = "policy") -> "Method":
        return cls(name, params)

    def run(self, inst: Instance, strategy: str, n_samples: int, seed: int,
            env_config: EnvConfig | None) -> EpisodeTrace:
        if self.params is not None:
            if self.params.config.category_count != inst.category_count:
                raise ContractError(
                    f"checkpoint expects {self.params.config.category_count} categories, "
                    f"instance {inst.name!r} has {inst.category_count}")
            if strategy == "greedy":
                return run_lockstep(self.params, [inst], greedy=True, env_config=env_config,
                                    keep_steps=False)[0].trace
            rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_samples)]
            trajs = run_lockstep(self.params, [inst] * n_samples, rngs, env_config=env_config, keep_steps=False)
            return best_trace([t.trace for t in trajs])
        if self.name == "random":
            if strategy == "greedy":
                return random_policy(inst, seed, env_config)
            seeds = np.random.SeedSequence(seed).generate_state(n_samples)
            return best_trace([random_policy(inst, int(s), env_config) for s in seeds])
        return pdr_schedule(inst, self.name, env_config)


def best_trace(traces: list[EpisodeTrace]) -> EpisodeTrace:
    """Smallest makespan, ties broken by fewer switches, then by order."""
    return min(traces, key=lambda t: (t.makespan, t.total_switches))


# ---------------------------------------------------------------- reports

@dataclass
class InstanceResult:
    instance: str
    makespan: float
    switches: int
    seconds: float
    reference: float | None
    trace: EpisodeTrace | None = None

    @property
    def gap(self) -> float | None:
        if self.reference is None:
            return None
        return (self.makespan - self.reference) / self.reference


@dataclass
class EvalReport:
    method: str
    strategy: str
    reference_name: str
    rows: list[InstanceResult] = field(default_factory=list)

    @property
    def mean_makespan(self) -> float:
        return float(np.mean([r.makespan for r in self.rows]))

    @property
    def mean_switches(self) -> float:
        return float(np.mean([r.switches for r in self.rows]))

    @property
    def mean_seconds(self) -> float:
        return float(np.mean([r.seconds for r in self.rows]))

    @property
    def mean_gap(self) -> float | None:
        gaps = [r.gap for r in self.rows]
        if any(g is None for g in gaps):
            return None
        return float(np.mean(gaps))

    def summary(self) -> dict:
        return {"method": self.method, "strategy": self.strategy, "instances": len(self.rows),
                "mean_makespan": self.mean_makespan, "mean_switches": self.mean_switches,
                f"mean_gap_vs_{self.reference_name}": self.mean_gap}


def reference_values(test_set: list[Instance], kind: str = "best_pdr", env_config: EnvConfig | None = None,
                     node_limit: int = 2_000_000) -> list[float]:
    """Per-instance reference makespans: ``best_pdr`` or ``oracle``."""
    if kind == "best_pdr":
        return [min(pdr_schedule(i, r, env_config).makespan for r in RULES) for i in test_set]
    if kind == "oracle":
        out = []
        for inst in test_set:
            res = branch_and_bound(inst, node_limit=node_limit, env_config=env_config)
            if not res.optimal:
                raise ContractError(f"oracle did not finish on {inst.name!r}; no gap against it")
            out.append(res.optimal_makespan)
        return out
    raise ValueError(f"unknown reference {kind!r}")


def evaluate(method: Method, test_set: list[Instance], strategy: str = "greedy", n_samples: int = 100,
             seed: int = 0, reference: list[float] | None = None, reference_name: str = "best_pdr",
             env_config: EnvConfig | None = None, keep_traces: bool = False) -> EvalReport:
    """Run ``method`` on every instance and collect makespan, switches, time and gap.

    ``greedy``: one deterministic run (the random method draws once);
    ``sampling``: ``n_samples`` seeded stochastic runs, best kept.
    Instance ``i`` uses the seed stream ``(seed, i)``.
    """
    if strategy not in ("greedy", "sampling"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if reference is None:
        reference = reference_values(test_set, reference_name, env_config)
    if len(reference) != len(test_set):
        raise ValueError("one reference value per instance is required")
    report = EvalReport(method.name, strategy, reference_name)
    for i, (inst, ref) in enumerate(zip(test_set, reference)):
        sub_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        t0 = time.perf_counter()
        tr = method.run(inst, strategy, n_samples, sub_seed, env_config)
        dt = time.perf_counter() - t0
        report.rows.append(InstanceResult(inst.name, tr.makespan, tr.total_switches, dt, ref,
                                          tr if keep_traces else None))
    return report


def _f(v) -> str:
    return "" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v))


def write_reports(reports: list[EvalReport], out_prefix) -> list[Path]:
    """Summary, per-instance detail and timing as comma-separated files.

    Timing lives in its own file so the other two stay byte-reproducible.
    """
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = [Path(f"{out_prefix}_summary.csv"), Path(f"{out_prefix}_detail.csv"), Path(f"{out_prefix}_timing.csv")]
    ref = reports[0].reference_name if reports else "best_pdr"
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "strategy", "instances", "mean_makespan", "mean_switches", f"mean_gap_vs_{ref}"])
        for r in reports:
            w.writerow([r.method, r.strategy, len(r.rows), _f(r.mean_makespan), _f(r.mean_switches), _f(r.mean_gap)])
    with open(paths[1], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "strategy", "instance", "makespan", "switches", f"reference_{ref}", "gap"])
        for r in reports:
            for row in r.rows:
                w.writerow([r.method, r.strategy, row.instance, _f(float(row.makespan)), row.switches,
                            _f(None if row.reference is None else float(row.reference)), _f(row.gap)])
    with open(paths[2], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "strategy", "mean_seconds"])
        for r in reports:
            w.writerow([r.method, r.strategy, _f(r.mean_seconds)])
    return paths


# ---------------------------------------------------------------- ablations

CONNECTIVITY_VARIANTS = {
    "Base": "base",
    "Pallet_AllOps": "all_ops",
    "Pallet_SortOnly": "sort_only",
    "Pallet_SortOnly_InverseWeight": "sort_only_inverse",
    "Pallet_SortOnly_Weighted": "sort_only_weighted",
}
FEATURE_VARIANTS = {
    "PS+SwEst": ("PS", "SwEst"),
    "PS+Type": ("PS", "Type"),
    "Type+SwEst": ("Type", "SwEst"),
    "PS+Type+SwEst": FEATURE_GROUPS,
}
FULL_VARIANT = "Pallet_SortOnly_Weighted"


def variant_net_config(variant: str, base: NetConfig) -> NetConfig:
    if variant in CONNECTIVITY_VARIANTS:
        return replace(base, mode=CONNECTIVITY_VARIANTS[variant], features=FEATURE_GROUPS)
    if variant in FEATURE_VARIANTS:
        return replace(base, mode="sort_only_weighted", features=FEATURE_VARIANTS[variant])
    raise ValueError(f"unknown ablation variant {variant!r}")


def all_variants() -> list[str]:
    return list(CONNECTIVITY_VARIANTS) + [v for v in FEATURE_VARIANTS if v != "PS+Type+SwEst"]


def train_variants(base: PPOConfig, out_dir, variants: list[str], seeds: list[int]) -> dict[str, list[Path]]:
    """Train each variant with an identical budget; checkpoints land in ``out_dir/<variant>/seed<k>``."""
    out = {}
    for v in variants:
        paths = []
        for s in seeds:
            cfg = replace(base, seed=s, net=replace(variant_net_config(v, base.net), seed=s))
            d = Path(out_dir) / v / f"seed{s}"
            if not (d / "best.ckpt").exists():
                train(cfg, d)
            paths.append(d / "best.ckpt")
        out[v] = paths
    return out


@dataclass
class AblationRow:
    variant: str
    makespan: float | None
    switches: float | None
    makespan_gap: float | None
    switches_gap: float | None
    seeds: int = 0


def ablation_matrix(checkpoints: dict[str, list], test_set: list[Instance],
                    env_config: EnvConfig | None = None) -> list[AblationRow]:
    """Greedy evaluation of every variant, averaged over its seeds, with gap to the full model.

    Variants without checkpoints appear as absent rows (all metrics ``None``).
    """
    ref = [0.0] * len(test_set)
    means: dict[str, tuple[float, float, int]] = {}
    for v in list(CONNECTIVITY_VARIANTS) + list(FEATURE_VARIANTS):
        key = FULL_VARIANT if v == "PS+Type+SwEst" else v
        paths = [p for p in checkpoints.get(v, checkpoints.get(key, [])) if p and Path(p).exists()]
        if not paths:
            continue
        if key in means and v != key:
            means[v] = means[key]
            continue
        ms, sw = [], []
        for p in paths:
            params = PolicyParams.load(p)
            expect = variant_net_config(v, params.config)
            if (params.config.mode, params.config.features) != (expect.mode, expect.features):
                raise ContractError(f"checkpoint {p} is not a {v} model")
            rep = evaluate(Method.from_params(params, v), test_set, "greedy", reference=ref,
                           env_config=env_config)
            ms.append(rep.mean_makespan)
            sw.append(rep.mean_switches)
        means[v] = (float(np.mean(ms)), float(np.mean(sw)), len(paths))
    full = means.get(FULL_VARIANT) or means.get("PS+Type+SwEst")
    rows = []
    for v in list(CONNECTIVITY_VARIANTS) + list(FEATURE_VARIANTS):
        if v not in means:
            rows.append(AblationRow(v, None, None, None, None, 0))
            continue
        m, s, n = means[v]
        mg = None if full is None else (m - full[0]) / full[0]
        sg = None if full is None or full[1] == 0 else (s - full[1]) / full[1]
        rows.append(AblationRow(v, m, s, mg, sg, n))
    return rows


def write_ablation(rows: list[AblationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seeds", "makespan", "makespan_gap_to_full", "switches", "switches_gap_to_full"])
        for r in rows:
            if r.makespan is None:
                w.writerow([r.variant, 0, "absent", "", "absent", ""])
            else:
                w.writerow([r.variant, r.seeds, _f(r.makespan), _f(r.makespan_gap), _f(r.switches), _f(r.switches_gap)])


# ---------------------------------------------------------------- Gantt

GANTT_FORMAT = "fjsp-lbmk-gantt"


def export_gantt(trace: EpisodeTrace) -> dict:
    """Machine lanes plus pallet lanes (switch delays and per-job loading blocks).

    Within a kitting run the pallet replacements come first, one after the
    other, each lasting ``switch_time``; the job's categories are then loaded
    one after another, each for ``count * place_time``.
    """
    if not trace.complete:
        raise ContractError(f"trace has {len(trace.records)} of {trace.n_ops} operations")
    machines: dict[int, list] = {m: [] for m in range(trace.machine_count)}
    pallets: dict[int, list] = {}
    tp, tsw = trace.place_time, trace.switch_time
    for r in trace.records:
        machines[r.machine].append({"op": r.op, "job": r.job, "op_index": r.op_index,
                                    "start": r.start, "end": r.end})
        if not r.placed and not r.evicted:
            continue
        t = r.start
        for pallet, old in r.evicted:
            pallets.setdefault(pallet, []).append({"kind": "switch", "job": r.job, "category": old,
                                                   "start": t, "end": t + tsw})
            t += tsw
        for pallet, cat, count in r.placed:
            pallets.setdefault(pallet, []).append({"kind": "load", "job": r.job, "category": cat,
                                                   "count": count, "start": t, "end": t + count * tp})
            t += count * tp
    return {
        "format": GANTT_FORMAT,
        "version": 1,
        "instance": trace.instance_name,
        "makespan": trace.makespan,
        "total_switches": trace.total_switches,
        "switch_time": tsw,
        "machines": [{"machine": m, "intervals": sorted(v, key=lambda x: (x["start"], x["end"]))}
                     for m, v in sorted(machines.items())],
        "pallets": [{"pallet": p, "blocks": sorted(v, key=lambda x: (x["start"], x["end"]))}
                    for p, v in sorted(pallets.items())],
    }


def dumps_gantt(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True)


def loads_gantt(text: str) -> dict:
    doc = json.loads(text)
    if doc.get("format") != GANTT_FORMAT:
        raise ContractError("not a Gantt document")
    return doc


def gantt_check(doc: dict) -> list[str]:
    """Lane disjointness and switch-block lengths."""
    bad = []
    lanes = [(f"machine {m['machine']}", m["intervals"]) for m in doc["machines"]]
    lanes += [(f"pallet {p['pallet']}", p["blocks"]) for p in doc["pallets"]]
    for name, ivs in lanes:
        for a, b in zip(ivs, ivs[1:]):
            if b["start"] < a["end"] - 1e-9:
                bad.append(f"{name}: overlapping blocks at t={b['start']}")
    for p in doc["pallets"]:
        for b in p["blocks"]:
            if b["kind"] == "switch" and abs((b["end"] - b["start"]) - doc["switch_time"]) > 1e-9:
                bad.append(f"pallet {p['pallet']}: switch block of length {b['end'] - b['start']}")
    return bad


def gantt_svg(doc: dict, px_per_sec: float = 4.0, lane_h: int = 22) -> str:
    """Static vector rendering; switch delays are white blocks."""
    lanes = [(f"M{m['machine']}", [(i["start"], i["end"], i["job"], "op") for i in m["intervals"]])
             for m in doc["machines"]]
    lanes += [(f"P{p['pallet']}", [(b["start"], b["end"], b["job"], b["kind"]) for b in p["blocks"]])
              for p in doc["pallets"]]
    width = int(60 + px_per_sec * max(doc["makespan"], 1) + 20)
    height = int(lane_h * len(lanes) + 20)
    palette = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
               "#9c755f", "#bab0ac"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-size="10">']
    for k, (label, blocks) in enumerate(lanes):
        y = 10 + k * lane_h
        out.append(f'<text x="4" y="{y + lane_h * 0.65:.1f}">{label}</text>')
        for s, e, job, kind in blocks:
            fill = "#ffffff" if kind == "switch" else palette[job % len(palette)]
            x = 60 + s * px_per_sec
            out.append(f'<rect x="{x:.1f}" y="{y}" width="{max((e - s) * px_per_sec, 0.5):.1f}" '
                       f'height="{lane_h - 4}" fill="{fill}" stroke="#333" stroke-width="0.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
