"""Event-driven scheduling environment.

Decisions happen at epochs.  At an epoch ``now`` the eligible actions are
every (operation, machine) pair where the operation is the next one of its
job, its predecessor has finished by ``now``, the machine is compatible and
idle, and, for part-sorting operations, the buffer is not busy with another
kitting run.  After each decision time jumps to the earliest moment with a
non-empty action set.  Exactly one operation is scheduled per step.

The reward is the drop of the makespan estimate plus ``lam`` times the drop
of cumulative pallet switches, so an episode's rewards telescope to
``est(s0) - makespan - lam * switches``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple


from .buffer import BufferState, KittingResult, apply_kitting, estimate_switches
from .instance import Instance, validate_instance, InstanceValidationError

UNSCHEDULED = -1


class IneligibleActionError(ValueError):
    """The action is not in the eligible set of the state it was applied to."""


class Action(NamedTuple):
    op: int
    machine: int


@dataclass
class ScheduleState:
    op_machine: list[int]
    op_start: list[float]
    op_end: list[float]
    job_next: list[int]  # position of the next unscheduled op within the job
    job_ready: list[float]  # end of the job's last scheduled op (0 if none)
    machine_free_at: list[float]
    machine_busy: list[float]
    buffer_free_at: float
    now: float
    buffer: BufferState
    est_cmax: float
    n_scheduled: int = 0

    @property
    def switches_so_far(self) -> int:
        return self.buffer.total_switches

    def copy(self) -> "ScheduleState":
        return ScheduleState(self.op_machine[:], self.op_start[:], self.op_end[:], self.job_next[:],
                             self.job_ready[:], self.machine_free_at[:], self.machine_busy[:],
                             self.buffer_free_at, self.now, self.buffer, self.est_cmax, self.n_scheduled)

    def is_scheduled(self, op: int) -> bool:
        return self.op_machine[op] != UNSCHEDULED


@dataclass
class StepResult:
    state: ScheduleState
    reward: float
    done: bool
    switches: int
    start: float
    end: float
    kitting: KittingResult | None = None
    makespan: float | None = None


@dataclass(frozen=True)
class EnvConfig:
    lam: float = 1.0
    eviction: str = "demand"
    # "replace": a part-sorting op lasts exactly its kitting time;
    # "additive": machine time p plus kitting time
    ps_time_mode: str = "replace"


class SchedulingEnv:
    """Static per-instance tables plus the transition function.

    States are plain values: :meth:`step` never mutates its input.
    """

    def __init__(self, inst: Instance, config: EnvConfig | None = None, validate: bool = True):
        if validate:
            problems = validate_instance(inst)
            if problems:
                raise InstanceValidationError(problems)
        self.inst = inst
        self.config = config or EnvConfig()
        if self.config.ps_time_mode not in ("replace", "additive"):
            raise ValueError(f"unknown ps_time_mode {self.config.ps_time_mode!r}")
        self.lam = float(self.config.lam)
        ops = inst.operations()
        self.n_ops = len(ops)
        self.n_jobs = inst.n_jobs
        self.n_machines = inst.machine_count
        self.ops = ops
        self.job_first = []
        self.job_len = []
        o = 0
        for job in inst.jobs:
            self.job_first.append(o)
            self.job_len.append(len(job.operations))
            o += len(job.operations)
        self.op_job = [op.job_id for op in ops]
        self.op_pos = [op.op_index for op in ops]
        self.op_ps = [op.is_part_sorting for op in ops]
        self.op_compat = [tuple(sorted(op.compatible)) for op in ops]
        self.op_time = [dict(op.compatible) for op in ops]
        # parts placed by each op (empty for ordinary ops)
        self.op_parts: list[tuple[tuple[int, int], ...]] = [() for _ in ops]
        for j in range(self.n_jobs):
            shares = inst.part_shares(j)
            k = 0
            for pos in range(self.job_len[j]):
                g = self.job_first[j] + pos
                if self.op_ps[g]:
                    self.op_parts[g] = shares[k]
                    k += 1
        self.op_nparts = [sum(n for _, n in p) for p in self.op_parts]
        tp = inst.place_time
        additive = self.config.ps_time_mode == "additive"
        self.op_mean = []
        self.op_min = []
        for g, op in enumerate(ops):
            if self.op_ps[g]:
                place = self.op_nparts[g] * tp
                self.op_mean.append(place + (op.mean_time if additive else 0.0))
                self.op_min.append(place + (op.min_time if additive else 0.0))
            else:
                self.op_mean.append(float(op.mean_time))
                self.op_min.append(float(op.min_time))
        # suffix sums of mean / min times along each job (index n = past the end)
        self.suffix_mean = [0.0] * self.n_ops
        self.suffix_min = [0.0] * self.n_ops
        for j in range(self.n_jobs):
            acc_mean = acc_min = 0.0
            for g in range(self.job_first[j] + self.job_len[j] - 1, self.job_first[j] - 1, -1):
                acc_mean += self.op_mean[g]
                acc_min += self.op_min[g]
                self.suffix_mean[g] = acc_mean
                self.suffix_min[g] = acc_min
        self.ps_ops = [g for g in range(self.n_ops) if self.op_ps[g]]

    # ------------------------------------------------------------ helpers
    def next_op(self, state: ScheduleState, job: int) -> int | None:
        pos = state.job_next[job]
        if pos >= self.job_len[job]:
            return None
        return self.job_first[job] + pos

    def remaining_mean(self, state: ScheduleState, job: int) -> float:
        g = self.next_op(state, job)
        return 0.0 if g is None else self.suffix_mean[g]

    def remaining_ops(self, state: ScheduleState, job: int) -> int:
        return self.job_len[job] - state.job_next[job]

    def pending_demand(self, state: ScheduleState, exclude: int | None = None) -> dict[int, int]:
        """Parts per category still to be placed by unscheduled part-sorting ops."""
        dem: dict[int, int] = {}
        for g in self.ps_ops:
            if g != exclude and state.op_machine[g] == UNSCHEDULED:
                for c, n in self.op_parts[g]:
                    dem[c] = dem.get(c, 0) + n
        return dem

    def sw_est(self, state: ScheduleState, op: int) -> int:
        if not self.op_ps[op]:
            return 0
        return estimate_switches(state.buffer, self.op_parts[op])

    def done(self, state: ScheduleState) -> bool:
        return state.n_scheduled == self.n_ops

    def makespan(self, state: ScheduleState) -> float:
        return max((e for e, m in zip(state.op_end, state.op_machine) if m != UNSCHEDULED), default=0.0)

    # ------------------------------------------------------------ bounds
    def makespan_lower_bound(self, state: ScheduleState, mode: str = "mean") -> float:
        """Completion-time estimate of the partial schedule.

        ``mean``: every unscheduled op takes its mean processing time and
        starts right after its predecessor's estimate (part-sorting ops count
        ``parts * place_time``).  This is the shaping estimate used by the
        reward.  Not admissible: a fast machine can beat the mean.

        ``min``: an admissible bound for exact search.  Uses minimum times,
        no unscheduled op starts before ``now``, and all remaining kitting
        runs are serialized through the buffer.
        """
        best = 0.0
        if mode == "mean":
            for j in range(self.n_jobs):
                g = self.next_op(state, j)
                v = state.job_ready[j] + (self.suffix_mean[g] if g is not None else 0.0)
                if v > best:
                    best = v
            return best
        if mode != "min":
            raise ValueError(f"unknown bound mode {mode!r}")
        now = state.now
        for j in range(self.n_jobs):
            g = self.next_op(state, j)
            if g is None:
                v = state.job_ready[j]
            else:
                v = max(state.job_ready[j], now) + self.suffix_min[g]
            if v > best:
                best = v
        kit = sum(self.op_min[g] for g in self.ps_ops if state.op_machine[g] == UNSCHEDULED)
        if kit > 0:
            best = max(best, max(state.buffer_free_at, now) + kit)
        # every unscheduled op pinned to a single machine must run there after it frees up
        load = [0.0] * self.n_machines
        for g in range(self.n_ops):
            if state.op_machine[g] == UNSCHEDULED and len(self.op_compat[g]) == 1:
                load[self.op_compat[g][0][0]] += self.op_min[g]
        for mc, w in enumerate(load):
            if w > 0:
                best = max(best, max(state.machine_free_at[mc], now) + w)
        return best

    # ------------------------------------------------------------ dynamics
    def reset(self) -> ScheduleState:
        n, m = self.n_ops, self.n_machines
        state = ScheduleState(
            op_machine=[UNSCHEDULED] * n, op_start=[0.0] * n, op_end=[0.0] * n,
            job_next=[0] * self.n_jobs, job_ready=[0.0] * self.n_jobs,
            machine_free_at=[0.0] * m, machine_busy=[0.0] * m,
            buffer_free_at=0.0, now=0.0,
            buffer=BufferState.empty(self.inst.pallet_count), est_cmax=0.0,
        )
        state.est_cmax = self.makespan_lower_bound(state)
        return state

    def eligible_actions(self, state: ScheduleState) -> list[Action]:
        now = state.now
        free = [t <= now for t in state.machine_free_at]
        buffer_free = state.buffer_free_at <= now
        out = []
        for j in range(self.n_jobs):
            pos = state.job_next[j]
            if pos >= self.job_len[j] or state.job_ready[j] > now:
                continue
            g = self.job_first[j] + pos
            if self.op_ps[g] and not buffer_free:
                continue
            for mc, _ in self.op_compat[g]:
                if free[mc]:
                    out.append(Action(g, mc))
        return out

    def is_eligible(self, state: ScheduleState, action: Action) -> bool:
        g, mc = action
        if not 0 <= g < self.n_ops or state.op_machine[g] != UNSCHEDULED:
            return False
        j = self.op_job[g]
        if self.job_first[j] + state.job_next[j] != g or state.job_ready[j] > state.now:
            return False
        if mc not in self.op_time[g] or state.machine_free_at[mc] > state.now:
            return False
        if self.op_ps[g] and state.buffer_free_at > state.now:
            return False
        return True

    def _advance(self, state: ScheduleState) -> None:
        while state.n_scheduled < self.n_ops and not self.eligible_actions(state):
            now = state.now
            nxt = [t for t in state.machine_free_at if t > now]
            nxt += [state.job_ready[j] for j in range(self.n_jobs)
                    if state.job_next[j] < self.job_len[j] and state.job_ready[j] > now]
            if state.buffer_free_at > now:
                nxt.append(state.buffer_free_at)
            if not nxt:  # pragma: no cover - impossible for valid instances
                raise RuntimeError("deadlock: no eligible action and no pending event")
            state.now = min(nxt)

    def step(self, state: ScheduleState, action: Action) -> StepResult:
        action = Action(*action)
        if not self.is_eligible(state, action):
            raise IneligibleActionError(f"action {tuple(action)} not eligible at t={state.now}")
        g, mc = action
        s = state.copy()
        kit = None
        switches = 0
        if self.op_ps[g]:
            dem = self.pending_demand(state, exclude=g) if self.config.eviction == "demand" else None
            kit = apply_kitting(state.buffer, self.op_parts[g], self.inst.place_time,
                                self.inst.switch_time, self.config.eviction, dem)
            s.buffer = kit.buffer
            switches = kit.switches
            duration = kit.duration
            if self.config.ps_time_mode == "additive":
                duration += self.op_time[g][mc]
        else:
            duration = self.op_time[g][mc]
        start = max(state.now, state.job_ready[self.op_job[g]], state.machine_free_at[mc])
        end = start + duration
        j = self.op_job[g]
        s.op_machine[g] = mc
        s.op_start[g] = start
        s.op_end[g] = end
        s.job_next[j] += 1
        s.job_ready[j] = end
        s.machine_free_at[mc] = end
        s.machine_busy[mc] += duration
        if self.op_ps[g]:
            s.buffer_free_at = end
        s.n_scheduled += 1
        s.est_cmax = self.makespan_lower_bound(s)
        reward = (state.est_cmax - s.est_cmax) + self.lam * (state.buffer.total_switches - s.buffer.total_switches)
        done = s.n_scheduled == self.n_ops
        if not done:
            self._advance(s)
        return StepResult(s, reward, done, switches, start, end, kit,
                          self.makespan(s) if done else None)


# ---------------------------------------------------------------- traces

@dataclass
class TraceRecord:
    op: int
    job: int
    op_index: int
    machine: int
    start: float
    end: float
    switches: int
    reward: float
    evicted: tuple = ()
    placed: tuple = ()


@dataclass
class EpisodeTrace:
    instance_name: str
    records: list[TraceRecord] = field(default_factory=list)
    makespan: float = 0.0
    total_switches: int = 0
    place_time: float = 0.0
    switch_time: float = 0.0
    pallet_count: int = 0
    machine_count: int = 0
    est_initial: float = 0.0
    n_ops: int = 0

    @property
    def complete(self) -> bool:
        return self.n_ops > 0 and len(self.records) == self.n_ops

    @property
    def total_reward(self) -> float:
        return sum(r.reward for r in self.records)

    def actions(self) -> list[Action]:
        return [Action(r.op, r.machine) for r in self.records]

    def to_dict(self) -> dict:
        return {
            "format": "fjsp-lbmk-trace",
            "version": 1,
            "instance": self.instance_name,
            "machine_count": self.machine_count,
            "pallet_count": self.pallet_count,
            "place_time": self.place_time,
            "switch_time": self.switch_time,
            "makespan": self.makespan,
            "total_switches": self.total_switches,
            "est_initial": self.est_initial,
            "n_ops": self.n_ops,
            "steps": [
                {"op": r.op, "job": r.job, "op_index": r.op_index, "machine": r.machine,
                 "start": r.start, "end": r.end, "switches": r.switches, "reward": r.reward,
                 "evicted": [list(e) for e in r.evicted], "placed": [list(p) for p in r.placed]}
                for r in self.records
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeTrace":
        if d.get("format") != "fjsp-lbmk-trace":
            raise ValueError("not a trace document")
        recs = [TraceRecord(s["op"], s["job"], s["op_index"], s["machine"], s["start"], s["end"],
                            s["switches"], s["reward"], tuple(tuple(e) for e in s["evicted"]),
                            tuple(tuple(p) for p in s["placed"])) for s in d["steps"]]
        return cls(d["instance"], recs, d["makespan"], d["total_switches"], d["place_time"],
                   d["switch_time"], d["pallet_count"], d["machine_count"], d.get("est_initial", 0.0),
                   d.get("n_ops", len(recs)))


def new_trace(env: SchedulingEnv, state: ScheduleState) -> EpisodeTrace:
    inst = env.inst
    return EpisodeTrace(inst.name, [], 0.0, 0, inst.place_time, inst.switch_time,
                        inst.pallet_count, inst.machine_count, state.est_cmax, env.n_ops)


def record_step(env: SchedulingEnv, trace: EpisodeTrace, action: Action, res: StepResult) -> None:
    g, mc = action
    kit = res.kitting
    trace.records.append(TraceRecord(
        g, env.op_job[g], env.op_pos[g], mc, res.start, res.end, res.switches, res.reward,
        kit.evicted if kit else (), kit.placed if kit else ()))
    if res.done:
        trace.makespan = res.makespan
        trace.total_switches = res.state.buffer.total_switches


def run_policy(env: SchedulingEnv, choose) -> tuple[EpisodeTrace, ScheduleState]:
    """Roll out ``choose(state, actions) -> Action`` until every op is scheduled."""
    state = env.reset()
    trace = new_trace(env, state)
    while not env.done(state):
        actions = env.eligible_actions(state)
        a = choose(state, actions)
        res = env.step(state, a)
        record_step(env, trace, a, res)
        state = res.state
    return trace, state


def replay(env: SchedulingEnv, actions) -> tuple[EpisodeTrace, ScheduleState]:
    it = iter(actions)
    return run_policy(env, lambda s, acts: next(it))


def check_schedule(env: SchedulingEnv, state: ScheduleState, trace: EpisodeTrace | None = None) -> list[str]:
    """Independent post-hoc validity audit of a (partial) schedule."""
    bad = []
    inst = env.inst
    for j in range(env.n_jobs):
        prev_end = 0.0
        seen_unscheduled = False
        for pos in range(env.job_len[j]):
            g = env.job_first[j] + pos
            if state.op_machine[g] == UNSCHEDULED:
                seen_unscheduled = True
                continue
            if seen_unscheduled:
                bad.append(f"job {j}: op {pos} scheduled after an unscheduled predecessor")
            if state.op_start[g] < prev_end - 1e-9:
                bad.append(f"job {j}: op {pos} starts before its predecessor ends")
            if state.op_end[g] < state.op_start[g]:
                bad.append(f"job {j}: op {pos} ends before it starts")
            mc = state.op_machine[g]
            if mc not in env.op_time[g]:
                bad.append(f"job {j}: op {pos} on incompatible machine {mc}")
            if env.op_ps[g] and mc not in inst.part_sorting_machines:
                bad.append(f"job {j}: part-sorting op {pos} on ordinary machine {mc}")
            prev_end = state.op_end[g]
    by_machine: dict[int, list] = {}
    for g in range(env.n_ops):
        if state.op_machine[g] != UNSCHEDULED:
            by_machine.setdefault(state.op_machine[g], []).append((state.op_start[g], state.op_end[g], g))
    for mc, ivs in by_machine.items():
        ivs.sort()
        for (s0, e0, g0), (s1, e1, g1) in zip(ivs, ivs[1:]):
            if s1 < e0 - 1e-9:
                bad.append(f"machine {mc}: ops {g0} and {g1} overlap")
    kit_ivs = sorted((state.op_start[g], state.op_end[g], g) for g in env.ps_ops
                     if state.op_machine[g] != UNSCHEDULED)
    for (s0, e0, g0), (s1, e1, g1) in zip(kit_ivs, kit_ivs[1:]):
        if s1 < e0 - 1e-9:
            bad.append(f"buffer: kitting runs of ops {g0} and {g1} overlap")
    buf = state.buffer
    bad += [f"buffer: {b}" for b in buf.check()]
    if buf.pallet_count != inst.pallet_count:
        bad.append("buffer: pallet count changed")
    if trace is not None:
        if sum(r.switches for r in trace.records) != buf.total_switches:
            bad.append("switch count not conserved")
        for r in trace.records:
            if env.op_ps[r.op]:
                expect = env.op_nparts[r.op] * inst.place_time + r.switches * inst.switch_time
                if env.config.ps_time_mode == "additive":
                    expect += env.op_time[r.op][r.machine]
                if abs((r.end - r.start) - expect) > 1e-9:
                    bad.append(f"op {r.op}: kitting time {r.end - r.start} != serialized {expect}")
                if len(r.evicted) != r.switches:
                    bad.append(f"op {r.op}: {len(r.evicted)} evictions for {r.switches} switches")
    return bad
