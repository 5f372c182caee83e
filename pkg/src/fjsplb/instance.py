"""Problem data model for FJSP with limited buffers and material kitting.

An :class:`Instance` is a set of jobs, each an ordered chain of operations
that may run on any machine of a compatible subset.  Every job carries a
multiset of parts (category -> count).  Operations flagged as part-sorting
place the job's parts onto a shared buffer of ``pallet_count`` pallets,
where every pallet holds a single category at a time.

Instances are immutable values.  The synthetic generator follows the usual
Brandimarte-style uniform sampling, extended with part-sorting operations
and part categories.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

FORMAT_NAME = "fjsp-lbmk-instance"
FORMAT_VERSION = 1


class InstanceError(ValueError):
    """Base class for instance related failures."""


class ConfigError(InstanceError):
    """Invalid generator configuration."""


class InstanceFormatError(InstanceError):
    """A document could not be parsed into an instance."""


class InstanceValidationError(InstanceError):
    """A well-formed document describes an instance that breaks invariants."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class Operation:
    job_id: int
    op_index: int
    compatible: tuple[tuple[int, int], ...]  # (machine_id, processing_time)
    is_part_sorting: bool = False

    @property
    def machines(self) -> tuple[int, ...]:
        return tuple(m for m, _ in self.compatible)

    def time_on(self, machine: int) -> int:
        for m, p in self.compatible:
            if m == machine:
                return p
        raise KeyError(f"machine {machine} not compatible with op ({self.job_id},{self.op_index})")

    @property
    def mean_time(self) -> float:
        return sum(p for _, p in self.compatible) / len(self.compatible)

    @property
    def min_time(self) -> int:
        return min(p for _, p in self.compatible)


@dataclass(frozen=True)
class Job:
    operations: tuple[Operation, ...]
    parts: tuple[tuple[int, int], ...] = ()  # (category_id, count), sorted by category

    @property
    def categories(self) -> tuple[int, ...]:
        return tuple(c for c, _ in self.parts)

    @property
    def part_count(self) -> int:
        return sum(n for _, n in self.parts)


@dataclass(frozen=True)
class Instance:
    jobs: tuple[Job, ...]
    machine_count: int
    part_sorting_machines: frozenset[int]
    category_count: int
    pallet_count: int
    place_time: float
    switch_time: float
    name: str = ""

    @property
    def n_jobs(self) -> int:
        return len(self.jobs)

    @property
    def n_ops(self) -> int:
        return sum(len(j.operations) for j in self.jobs)

    def operations(self) -> list[Operation]:
        """All operations, job-major, in the global op-id order used everywhere else."""
        return [op for job in self.jobs for op in job.operations]

    def part_shares(self, job_id: int) -> list[tuple[tuple[int, int], ...]]:
        """Split a job's parts across its part-sorting operations.

        Categories are taken in ascending order and dealt out in contiguous
        blocks, earlier part-sorting ops receiving the larger blocks.  With a
        single part-sorting op that op receives the whole multiset.
        """
        job = self.jobs[job_id]
        n_ps = sum(op.is_part_sorting for op in job.operations)
        if n_ps == 0:
            return []
        base, extra = divmod(len(job.parts), n_ps)
        shares, pos = [], 0
        for k in range(n_ps):
            size = base + (1 if k < extra else 0)
            shares.append(tuple(job.parts[pos:pos + size]))
            pos += size
        return shares


@dataclass(frozen=True)
class GeneratorConfig:
    """Parameters of the synthetic generator; ranges are inclusive integer intervals."""

    n_jobs: int = 10
    n_machines: int = 5
    ops_per_job_range: tuple[int, int] = (4, 6)
    machines_per_op_range: tuple[int, int] = (1, 5)
    proc_time_range: tuple[int, int] = (1, 20)
    n_ps: int = 1
    categories_per_job_range: tuple[int, int] = (3, 5)
    parts_per_category_range: tuple[int, int] = (1, 3)
    category_count: int = 10
    pallet_count: int = 6
    place_time: int = 2
    switch_time: int = 5
    # None -> ceil(m / 5) machines when n_ps > 0, else none
    n_ps_machines: int | None = None
    seed: int = 0

    def ps_machine_count(self) -> int:
        if self.n_ps_machines is not None:
            return self.n_ps_machines
        return math.ceil(self.n_machines / 5) if self.n_ps > 0 else 0

    def check(self) -> None:
        def rng_ok(name, r, low):
            lo, hi = r
            if not (isinstance(lo, (int, np.integer)) and isinstance(hi, (int, np.integer))):
                raise ConfigError(f"{name} must hold integers, got {r!r}")
            if lo > hi or lo < low:
                raise ConfigError(f"{name} must be a non-empty interval with lower end >= {low}, got {r!r}")

        if self.n_jobs < 1 or self.n_machines < 1:
            raise ConfigError("n_jobs and n_machines must be >= 1")
        rng_ok("ops_per_job_range", self.ops_per_job_range, 1)
        rng_ok("machines_per_op_range", self.machines_per_op_range, 1)
        rng_ok("proc_time_range", self.proc_time_range, 1)
        rng_ok("categories_per_job_range", self.categories_per_job_range, 0)
        rng_ok("parts_per_category_range", self.parts_per_category_range, 1)
        if self.category_count < 1 or self.pallet_count < 1:
            raise ConfigError("category_count and pallet_count must be >= 1")
        if self.place_time < 0 or self.switch_time < 0:
            raise ConfigError("place_time and switch_time must be >= 0")
        if self.categories_per_job_range[1] > min(self.category_count, self.pallet_count):
            raise ConfigError("categories_per_job_range max exceeds min(C, P)")
        if self.n_ps < 0 or self.n_ps > self.ops_per_job_range[0]:
            raise ConfigError("n_ps must lie in [0, min ops per job]")
        k = self.ps_machine_count()
        if self.n_ps > 0 and not 1 <= k:
            raise ConfigError("part-sorting operations need at least one part-sorting machine")
        if k > self.n_machines or (k == self.n_machines and self.ops_per_job_range[1] > self.n_ps):
            raise ConfigError("no regular machines left for ordinary operations")

    @classmethod
    def for_size(cls, n_jobs: int, n_machines: int, seed: int = 0, **overrides) -> "GeneratorConfig":
        """Synthetic preset for an ``n_jobs x n_machines`` scale.

        Up to five machines uses the small-scale row (4-6 ops per job),
        larger shops the 8-12 row; all other parameters are shared.
        """
        ops = (4, 6) if n_machines <= 5 else (8, 12)
        cfg = cls(n_jobs=n_jobs, n_machines=n_machines, ops_per_job_range=ops,
                  machines_per_op_range=(1, n_machines), seed=seed)
        return replace(cfg, **overrides)

    @classmethod
    def tiny(cls, seed: int = 0) -> "GeneratorConfig":
        """3 jobs, 2-3 ops, 2 machines, P=2, C=3: small enough for exact search."""
        return cls(n_jobs=3, n_machines=2, ops_per_job_range=(2, 3), machines_per_op_range=(1, 2),
                   proc_time_range=(1, 9), n_ps=1, categories_per_job_range=(1, 2),
                   parts_per_category_range=(1, 2), category_count=3, pallet_count=2,
                   place_time=2, switch_time=5, seed=seed)


def parse_size(text: str) -> tuple[int, int]:
    """``"10x5"`` -> ``(10, 5)``."""
    try:
        n, m = text.lower().replace("×", "x").split("x")
        return int(n), int(m)
    except ValueError:
        raise ConfigError(f"size must look like NxM, got {text!r}") from None


def generate_instance(config: GeneratorConfig) -> Instance:
    config.check()
    rng = np.random.default_rng(np.uint64(config.seed & (2**64 - 1)))
    m = config.n_machines
    k_ps = config.ps_machine_count()
    ps_machines = list(range(m - k_ps, m))
    regular = list(range(m - k_ps))
    lo_t, hi_t = config.proc_time_range

    def draw(r):
        return int(rng.integers(r[0], r[1] + 1))

    jobs = []
    for j in range(config.n_jobs):
        n_ops = draw(config.ops_per_job_range)
        ps_pos = set(rng.choice(n_ops, size=config.n_ps, replace=False).tolist()) if config.n_ps else set()
        ops = []
        for i in range(n_ops):
            if i in ps_pos:
                pool = ps_machines
                chosen = pool
            else:
                pool = regular
                lo, hi = config.machines_per_op_range
                hi = min(hi, len(pool))
                lo = min(lo, hi)
                k = int(rng.integers(lo, hi + 1))
                chosen = sorted(rng.choice(pool, size=k, replace=False).tolist())
            compat = tuple((int(mc), int(rng.integers(lo_t, hi_t + 1))) for mc in chosen)
            ops.append(Operation(j, i, compat, i in ps_pos))
        n_cat = draw(config.categories_per_job_range) if config.n_ps else 0
        cats = sorted(rng.choice(config.category_count, size=n_cat, replace=False).tolist())
        parts = tuple((int(c), draw(config.parts_per_category_range)) for c in cats)
        jobs.append(Job(tuple(ops), parts))

    inst = Instance(
        jobs=tuple(jobs),
        machine_count=m,
        part_sorting_machines=frozenset(ps_machines),
        category_count=config.category_count,
        pallet_count=config.pallet_count,
        place_time=config.place_time,
        switch_time=config.switch_time,
        name=f"syn-{config.n_jobs}x{m}-s{config.seed}",
    )
    problems = validate_instance(inst)
    if problems:  # pragma: no cover - guarded by GeneratorConfig.check
        raise RuntimeError(f"generator produced an invalid instance: {problems}")
    return inst


def generate_set(config: GeneratorConfig, count: int, base_seed: int | None = None) -> list[Instance]:
    """``count`` instances with seeds ``base_seed, base_seed+1, ...``."""
    base = config.seed if base_seed is None else base_seed
    return [generate_instance(replace(config, seed=base + i)) for i in range(count)]


def validate_instance(inst: Instance) -> list[str]:
    """Return human readable invariant violations; an empty list means valid."""
    out: list[str] = []
    C, P, m = inst.category_count, inst.pallet_count, inst.machine_count
    if P < 1:
        out.append(f"instance: pallet_count {P} < 1")
    if C < 1:
        out.append(f"instance: category_count {C} < 1")
    if inst.place_time < 0:
        out.append("instance: negative place_time")
    if inst.switch_time < 0:
        out.append("instance: negative switch_time")
    if m < 1:
        out.append("instance: machine_count < 1")
    for mc in inst.part_sorting_machines:
        if not 0 <= mc < m:
            out.append(f"instance: part-sorting machine {mc} out of range")
    if not inst.jobs:
        out.append("instance: no jobs")
    has_ps = any(op.is_part_sorting for op in inst.operations())
    for j, job in enumerate(inst.jobs):
        where = f"job {j}"
        if not job.operations:
            out.append(f"{where}: no operations")
        cats = [c for c, _ in job.parts]
        if len(set(cats)) != len(cats):
            out.append(f"{where}: duplicate category in parts")
        for c, n in job.parts:
            if not 0 <= c < C:
                out.append(f"{where}: category {c} outside 0..{C - 1}")
            if n < 1:
                out.append(f"{where}: category {c} has count {n} < 1")
        if len(set(cats)) > C:
            out.append(f"{where}: {len(set(cats))} distinct categories exceeds category count {C}")
        if len(set(cats)) > P:
            out.append(f"{where}: {len(set(cats))} distinct categories exceeds pallet count {P}")
        if has_ps and job.parts and not any(op.is_part_sorting for op in job.operations):
            out.append(f"{where}: has parts but no part-sorting operation")
        for i, op in enumerate(job.operations):
            w = f"{where} op {i}"
            if op.job_id != j or op.op_index != i:
                out.append(f"{w}: labelled ({op.job_id},{op.op_index})")
            if not op.compatible:
                out.append(f"{w}: no compatible machine")
            seen = set()
            for mc, p in op.compatible:
                if not 0 <= mc < m:
                    out.append(f"{w}: machine {mc} out of range")
                if mc in seen:
                    out.append(f"{w}: machine {mc} listed twice")
                seen.add(mc)
                if not p >= 1:
                    out.append(f"{w}: processing time {p} < 1 on machine {mc}")
            if op.is_part_sorting and any(mc not in inst.part_sorting_machines for mc, _ in op.compatible):
                out.append(f"{w}: part-sorting op compatible with a non part-sorting machine")
    return out


# ---------------------------------------------------------------- file format

def instance_to_dict(inst: Instance) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "name": inst.name,
        "machine_count": inst.machine_count,
        "part_sorting_machines": sorted(inst.part_sorting_machines),
        "category_count": inst.category_count,
        "pallet_count": inst.pallet_count,
        "place_time": inst.place_time,
        "switch_time": inst.switch_time,
        "jobs": [
            {
                "parts": [[c, n] for c, n in job.parts],
                "operations": [
                    {"part_sorting": op.is_part_sorting, "compatible": [[mc, p] for mc, p in op.compatible]}
                    for op in job.operations
                ],
            }
            for job in inst.jobs
        ],
    }


def save_instance(inst: Instance) -> bytes:
    problems = validate_instance(inst)
    if problems:
        raise InstanceValidationError(problems)
    d = instance_to_dict(inst)
    # one operation per line keeps files diffable without being huge
    lines = ["{"]
    for key in ("format", "version", "name", "machine_count", "part_sorting_machines",
                "category_count", "pallet_count", "place_time", "switch_time"):
        lines.append(f"  {json.dumps(key)}: {json.dumps(d[key])},")
    lines.append('  "jobs": [')
    for j, job in enumerate(d["jobs"]):
        lines.append(f'    {{"parts": {json.dumps(job["parts"])}, "operations": [')
        ops = [f"      {json.dumps(op)}" for op in job["operations"]]
        lines.append(",\n".join(ops))
        lines.append("    ]}" + ("," if j < len(d["jobs"]) - 1 else ""))
    lines.append("  ]")
    lines.append("}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _num(v, path, integer=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise InstanceFormatError(f"{path}: expected a number, got {v!r}")
    if integer and not float(v).is_integer():
        raise InstanceFormatError(f"{path}: expected an integer, got {v!r}")
    return int(v) if integer else v


def instance_from_dict(d: dict) -> Instance:
    if not isinstance(d, dict):
        raise InstanceFormatError("$: expected an object")
    if d.get("format") != FORMAT_NAME:
        raise InstanceFormatError(f"$.format: expected {FORMAT_NAME!r}, got {d.get('format')!r}")
    if d.get("version") != FORMAT_VERSION:
        raise InstanceFormatError(f"$.version: unsupported version {d.get('version')!r}")
    for key in ("machine_count", "part_sorting_machines", "category_count", "pallet_count",
                "place_time", "switch_time", "jobs"):
        if key not in d:
            raise InstanceFormatError(f"$.{key}: missing")
    if not isinstance(d["jobs"], list):
        raise InstanceFormatError("$.jobs: expected a list")
    if not isinstance(d["part_sorting_machines"], list):
        raise InstanceFormatError("$.part_sorting_machines: expected a list")
    jobs = []
    for j, jd in enumerate(d["jobs"]):
        path = f"$.jobs[{j}]"
        if not isinstance(jd, dict) or "operations" not in jd:
            raise InstanceFormatError(f"{path}: expected an object with 'operations'")
        parts = []
        for k, pair in enumerate(jd.get("parts", [])):
            if not isinstance(pair, list) or len(pair) != 2:
                raise InstanceFormatError(f"{path}.parts[{k}]: expected [category, count]")
            parts.append((_num(pair[0], f"{path}.parts[{k}][0]", True), _num(pair[1], f"{path}.parts[{k}][1]", True)))
        ops = []
        if not isinstance(jd["operations"], list):
            raise InstanceFormatError(f"{path}.operations: expected a list")
        for i, od in enumerate(jd["operations"]):
            opath = f"{path}.operations[{i}]"
            if not isinstance(od, dict) or not isinstance(od.get("compatible"), list):
                raise InstanceFormatError(f"{opath}: expected an object with a 'compatible' list")
            compat = []
            for k, pair in enumerate(od["compatible"]):
                if not isinstance(pair, list) or len(pair) != 2:
                    raise InstanceFormatError(f"{opath}.compatible[{k}]: expected [machine, time]")
                compat.append((_num(pair[0], f"{opath}.compatible[{k}][0]", True),
                               _num(pair[1], f"{opath}.compatible[{k}][1]", True)))
            ops.append(Operation(j, i, tuple(compat), bool(od.get("part_sorting", False))))
        jobs.append(Job(tuple(ops), tuple(sorted(parts))))
    return Instance(
        jobs=tuple(jobs),
        machine_count=_num(d["machine_count"], "$.machine_count", True),
        part_sorting_machines=frozenset(_num(x, "$.part_sorting_machines[]", True) for x in d["part_sorting_machines"]),
        category_count=_num(d["category_count"], "$.category_count", True),
        pallet_count=_num(d["pallet_count"], "$.pallet_count", True),
        place_time=_num(d["place_time"], "$.place_time"),
        switch_time=_num(d["switch_time"], "$.switch_time"),
        name=str(d.get("name", "")),
    )


def load_instance(data: bytes | str) -> Instance:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InstanceFormatError(f"byte {exc.start}: not valid UTF-8") from None
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise InstanceFormatError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    inst = instance_from_dict(doc)
    problems = validate_instance(inst)
    if problems:
        raise InstanceValidationError(problems)
    return inst


def read_instance(path) -> Instance:
    with open(path, "rb") as fh:
        return load_instance(fh.read())


def write_instance(inst: Instance, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_instance(inst))


def load_instance_dir(path) -> list[Instance]:
    """All ``*.json`` instances of a directory, in file-name order."""
    from pathlib import Path

    files = sorted(Path(path).glob("*.json"))
    return [read_instance(f) for f in files]
