"""Heterogeneous graph view of a schedule state.

Node types: operations, machines and a single buffer node.  Edge types:
precedence between consecutive ops of a job, op<->machine compatibility
for unscheduled ops, and weighted buffer->op edges whose presence and
weight depend on the connectivity mode.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .buffer import EMPTY, estimate_switches
from .env import SchedulingEnv, ScheduleState

MODES = ("base", "all_ops", "sort_only", "sort_only_inverse", "sort_only_weighted")
MODE_ALIASES = {
    "Base": "base",
    "Pallet_AllOps": "all_ops", "AllOps": "all_ops",
    "Pallet_SortOnly": "sort_only", "SortOnly": "sort_only",
    "Pallet_SortOnly_InverseWeight": "sort_only_inverse", "SortOnly_InverseWeight": "sort_only_inverse",
    "Pallet_SortOnly_Weighted": "sort_only_weighted", "SortOnly_Weighted": "sort_only_weighted",
}
FEATURE_GROUPS = ("PS", "Type", "SwEst")
N_SCHED = 6
MACHINE_DIM = 4


def canonical_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown connectivity mode {mode!r}")
    return mode


def op_feature_dim(category_count: int) -> int:
    return N_SCHED + category_count + 2


def buffer_feature_dim(category_count: int) -> int:
    return category_count + 1


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def buffer_edge_weight(sw_est: float, alpha: float = 0.3) -> float:
    """Weight of a buffer->op edge; grows with the op's estimated switch count."""
    if sw_est < 0:
        raise ValueError("sw_est must be >= 0")
    return sigmoid(alpha * sw_est)


def inverse_edge_weight(sw_est: float, alpha: float = 0.3) -> float:
    if sw_est < 0:
        raise ValueError("sw_est must be >= 0")
    return sigmoid(-alpha * sw_est)


@dataclass
class HeteroGraph:
    op_x: np.ndarray  # (n_ops, 6 + C + 2)
    machine_x: np.ndarray  # (m, 4)
    buffer_x: np.ndarray  # (C + 1,)
    pred: np.ndarray  # (n_ops,) predecessor op id or -1
    succ: np.ndarray  # (n_ops,) successor op id or -1
    om_edges: np.ndarray  # (E, 2) unscheduled op, compatible machine
    buffer_w: np.ndarray  # (n_ops,) edge weight, 0 where there is no edge
    buffer_edge: np.ndarray  # (n_ops,) bool
    pairs: np.ndarray  # (A, 2) eligible (op, machine)

    @property
    def n_ops(self) -> int:
        return self.op_x.shape[0]

    @property
    def n_machines(self) -> int:
        return self.machine_x.shape[0]

    def buffer_edges(self) -> list[tuple[int, float]]:
        return [(int(o), float(self.buffer_w[o])) for o in np.flatnonzero(self.buffer_edge)]

    def to_dict(self) -> dict:
        return {
            "op_features": self.op_x.tolist(),
            "machine_features": self.machine_x.tolist(),
            "buffer_features": self.buffer_x.tolist(),
            "precedence": [[int(o), int(s)] for o, s in enumerate(self.succ) if s >= 0],
            "op_machine": self.om_edges.tolist(),
            "buffer_edges": [[o, w] for o, w in self.buffer_edges()],
            "eligible": self.pairs.tolist(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


class GraphBuilder:
    """Precomputes the static parts of the graph for one environment."""

    def __init__(self, env: SchedulingEnv, mode: str = "sort_only_weighted",
                 features=FEATURE_GROUPS, alpha: float = 0.3):
        self.env = env
        self.mode = canonical_mode(mode)
        self.features = frozenset(features)
        unknown = self.features - set(FEATURE_GROUPS)
        if unknown:
            raise ValueError(f"unknown feature groups {sorted(unknown)}")
        self.alpha = alpha
        inst = env.inst
        n, C = env.n_ops, inst.category_count
        self.C = C
        self.scale = max(max(env.op_mean, default=1.0), 1e-9)
        self.op_job = np.array(env.op_job, dtype=np.int64)
        self.op_ps = np.array(env.op_ps, dtype=bool)
        self.op_mean = np.array(env.op_mean, dtype=np.float64)
        self.n_compat = np.array([len(c) for c in env.op_compat], dtype=np.float64)
        self.prefix_mean = np.zeros(n)
        self.job_first = np.array(env.job_first, dtype=np.int64)
        self.job_len = np.array(env.job_len, dtype=np.int64)
        pred = np.full(n, -1, dtype=np.int64)
        succ = np.full(n, -1, dtype=np.int64)
        for j in range(env.n_jobs):
            acc = 0.0
            for pos in range(env.job_len[j]):
                g = env.job_first[j] + pos
                acc += env.op_mean[g]
                self.prefix_mean[g] = acc
                if pos > 0:
                    pred[g] = g - 1
                    succ[g - 1] = g
        self.pred, self.succ = pred, succ
        self.type_hot = np.zeros((n, C))
        for g in range(n):
            for c, _ in inst.jobs[env.op_job[g]].parts:
                self.type_hot[g, c] = 1.0
        self.all_edges = np.array([(g, mc) for g in range(n) for mc, _ in env.op_compat[g]],
                                  dtype=np.int64).reshape(-1, 2)
        self.ps_machine = np.zeros(env.n_machines)
        for mc in inst.part_sorting_machines:
            self.ps_machine[mc] = 1.0

    def sw_est_vector(self, state: ScheduleState) -> np.ndarray:
        env = self.env
        out = np.zeros(env.n_ops)
        for g in env.ps_ops:
            if state.op_machine[g] < 0:
                out[g] = estimate_switches(state.buffer, env.op_parts[g])
        return out

    def build(self, state: ScheduleState, actions=None) -> HeteroGraph:
        env = self.env
        n, C = env.n_ops, self.C
        scale = self.scale
        op_machine = np.array(state.op_machine, dtype=np.int64)
        scheduled = op_machine >= 0
        job_ready = np.array(state.job_ready)
        job_next = np.array(state.job_next, dtype=np.int64)
        # prefix of mean times before the job's next op
        nxt = self.job_first + np.minimum(job_next, self.job_len)
        before = np.where(job_next > 0, self.prefix_mean[np.maximum(nxt - 1, 0)], 0.0)
        before = np.where(job_next >= self.job_len, self.prefix_mean[self.job_first + self.job_len - 1], before)
        j = self.op_job
        est_end = np.where(scheduled, np.array(state.op_end), job_ready[j] + self.prefix_mean - before[j])
        job_total = self.prefix_mean[self.job_first + self.job_len - 1]
        remaining_work = job_total - before
        remaining_ops = (self.job_len - job_next).astype(np.float64)

        sw = self.sw_est_vector(state)
        x = np.zeros((n, N_SCHED + C + 2))
        x[:, 0] = scheduled
        x[:, 1] = self.n_compat
        x[:, 2] = self.op_mean / scale
        x[:, 3] = remaining_ops[j]
        x[:, 4] = est_end / scale
        x[:, 5] = remaining_work[j] / scale
        if "Type" in self.features:
            x[:, N_SCHED:N_SCHED + C] = self.type_hot
        if "PS" in self.features:
            x[:, N_SCHED + C] = self.op_ps
        if "SwEst" in self.features:
            x[:, N_SCHED + C + 1] = sw

        if actions is None:
            actions = env.eligible_actions(state)
        pairs = np.array(actions, dtype=np.int64).reshape(-1, 2)

        now = state.now
        mx = np.zeros((env.n_machines, MACHINE_DIM))
        if len(pairs):
            cand = np.zeros(env.n_machines)
            np.add.at(cand, pairs[:, 1], 1.0)
            mx[:, 1] = cand
        # only the running op can extend past now, and it started exactly at its epoch
        ahead = np.maximum(np.array(state.machine_free_at) - now, 0.0)
        mx[:, 0] = ahead / scale
        mx[:, 2] = np.clip((np.array(state.machine_busy) - ahead) / max(now, 1.0), 0.0, 1.0)
        mx[:, 3] = self.ps_machine

        cats = np.array(state.buffer.categories)
        bx = np.zeros(C + 1)
        held = cats[cats != EMPTY]
        bx[held] = 1.0
        bx[C] = len(held) / len(cats)

        unsched = ~scheduled
        om = self.all_edges[unsched[self.all_edges[:, 0]]]

        if self.mode == "base":
            edge = np.zeros(n, dtype=bool)
        elif self.mode == "all_ops":
            edge = unsched.copy()
        else:
            edge = unsched & self.op_ps
        w = np.zeros(n)
        if self.mode in ("all_ops", "sort_only"):
            w[edge] = 1.0
        elif self.mode == "sort_only_weighted":
            w[edge] = 1.0 / (1.0 + np.exp(-self.alpha * sw[edge]))
        elif self.mode == "sort_only_inverse":
            w[edge] = 1.0 / (1.0 + np.exp(self.alpha * sw[edge]))
        return HeteroGraph(x, mx, bx, self.pred, self.succ, om, w, edge, pairs)


def build_graph(env: SchedulingEnv, state: ScheduleState, mode: str = "sort_only_weighted",
                features=FEATURE_GROUPS, alpha: float = 0.3) -> HeteroGraph:
    return GraphBuilder(env, mode, features, alpha).build(state)
