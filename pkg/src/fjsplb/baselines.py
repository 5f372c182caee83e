"""Dispatching rules, a random control policy and an exact search oracle.

All of them drive :class:`~fjsplb.env.SchedulingEnv`, so their schedules obey
exactly the same epoch, kitting and eviction semantics as the learned
policy.  The oracle is therefore optimal *within* that model (non-delay
decisions at epochs, the environment's eviction rule).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .buffer import estimate_switches, kitting_duration
from .env import Action, EnvConfig, EpisodeTrace, SchedulingEnv, ScheduleState, run_policy

RULES = ("fifo", "mor", "spt", "mwr", "lwr")


def op_duration(env: SchedulingEnv, state: ScheduleState, op: int, machine: int) -> float:
    """Duration the op would get if it started now on ``machine``."""
    if not env.op_ps[op]:
        return env.op_time[op][machine]
    sw = estimate_switches(state.buffer, env.op_parts[op])
    d = kitting_duration(env.op_nparts[op], sw, env.inst.place_time, env.inst.switch_time)
    if env.config.ps_time_mode == "additive":
        d += env.op_time[op][machine]
    return d


def rule_key(env: SchedulingEnv, state: ScheduleState, op: int, rule: str):
    """Sort key: the smallest key is dispatched first; job id breaks ties."""
    j = env.op_job[op]
    if rule == "fifo":
        k = state.job_ready[j]
    elif rule == "mor":
        k = -env.remaining_ops(state, j)
    elif rule == "spt":
        k = env.op_mean[op]
    elif rule == "mwr":
        k = -env.remaining_mean(state, j)
    elif rule == "lwr":
        k = env.remaining_mean(state, j)
    else:
        raise ValueError(f"unknown rule {rule!r}")
    return (k, j)


def pdr_choose(env: SchedulingEnv, rule: str):
    def choose(state: ScheduleState, actions: list[Action]) -> Action:
        ops = sorted({a.op for a in actions}, key=lambda o: rule_key(env, state, o, rule))
        op = ops[0]
        machines = [a.machine for a in actions if a.op == op]
        best = min(machines, key=lambda mc: (state.now + op_duration(env, state, op, mc), mc))
        return Action(op, best)
    return choose


def pdr_schedule(inst, rule: str, env_config: EnvConfig | None = None) -> EpisodeTrace:
    """Sequence with ``rule``, assign the machine with the earliest end time."""
    rule = rule.lower()
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}; choose from {RULES}")
    env = SchedulingEnv(inst, env_config)
    trace, _ = run_policy(env, pdr_choose(env, rule))
    return trace


def random_policy(inst, seed: int, env_config: EnvConfig | None = None) -> EpisodeTrace:
    rng = np.random.default_rng(seed)
    env = SchedulingEnv(inst, env_config)
    trace, _ = run_policy(env, lambda s, acts: acts[int(rng.integers(len(acts)))])
    return trace


@dataclass
class OracleResult:
    optimal_makespan: float
    optimal: bool
    nodes_explored: int
    best_schedule: list[Action] = field(default_factory=list)
    best_switches: int = 0


def branch_and_bound(inst, node_limit: int = 10_000_000, time_limit: float | None = None,
                     env_config: EnvConfig | None = None) -> OracleResult:
    """Depth-first search over epoch decisions with lower-bound pruning.

    The incumbent starts from the best dispatching rule.  A node is cut when
    its admissible bound (``SchedulingEnv.makespan_lower_bound(mode="min")``)
    cannot beat the incumbent.  ``optimal`` is true only when the tree was
    exhausted inside both limits.
    """
    env = SchedulingEnv(inst, env_config)
    best_ms, best_seq, best_sw = float("inf"), [], 0
    for rule in RULES:
        tr = pdr_schedule(inst, rule, env_config)
        if tr.makespan < best_ms:
            best_ms, best_seq, best_sw = tr.makespan, tr.actions(), tr.total_switches
    deadline = None if time_limit is None else time.monotonic() + time_limit
    nodes = 0
    complete = True
    path: list[Action] = []

    def dfs(state: ScheduleState) -> None:
        nonlocal best_ms, best_seq, best_sw, nodes, complete
        if not complete:
            return
        nodes += 1
        if nodes > node_limit or (deadline is not None and nodes % 256 == 0 and time.monotonic() > deadline):
            complete = False
            return
        children = []
        for a in env.eligible_actions(state):
            res = env.step(state, a)
            if res.done:
                if res.makespan < best_ms:
                    best_ms, best_seq, best_sw = res.makespan, path + [a], res.state.buffer.total_switches
                continue
            lb = env.makespan_lower_bound(res.state, "min")
            if lb < best_ms:
                children.append((lb, a, res.state))
        children.sort(key=lambda c: c[0])
        for lb, a, child in children:
            if lb >= best_ms:
                break
            path.append(a)
            dfs(child)
            path.pop()

    root = env.reset()
    if env.makespan_lower_bound(root, "min") < best_ms:
        dfs(root)
    return OracleResult(best_ms, complete, nodes, best_seq, best_sw)
