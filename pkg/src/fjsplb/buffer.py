"""Material-kitting buffer: P pallets, one part category per pallet.

A part-sorting operation places a multiset of parts.  Parts whose category
already sits on a pallet join it; new categories take empty pallets first
and, when those run out, occupied pallets are sent to the warehouse and
replaced by empty ones, one at a time.  The time spent by one kitting call
is defined in exactly one place, :func:`kitting_duration`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

EMPTY = -1
EVICTION_POLICIES = ("demand", "lru", "index")


class KittingError(ValueError):
    """Raised when a part multiset cannot be placed on the buffer at all."""


@dataclass(frozen=True)
class Pallet:
    category: int  # EMPTY when the pallet holds nothing
    fill_count: int = 0


@dataclass(frozen=True)
class BufferState:
    categories: tuple[int, ...]
    fills: tuple[int, ...]
    last_use: tuple[int, ...]
    total_switches: int = 0
    clock: int = 0

    @classmethod
    def empty(cls, pallet_count: int) -> "BufferState":
        return cls((EMPTY,) * pallet_count, (0,) * pallet_count, (0,) * pallet_count)

    @property
    def pallet_count(self) -> int:
        return len(self.categories)

    @property
    def pallets(self) -> tuple[Pallet, ...]:
        return tuple(Pallet(c, f) for c, f in zip(self.categories, self.fills))

    @property
    def n_empty(self) -> int:
        return sum(c == EMPTY for c in self.categories)

    def held(self) -> set[int]:
        return {c for c in self.categories if c != EMPTY}

    def check(self) -> list[str]:
        """Invariant violations of this state (empty when consistent)."""
        bad = []
        held = [c for c in self.categories if c != EMPTY]
        if len(held) != len(set(held)):
            bad.append("two pallets hold the same category")
        for i, (c, f) in enumerate(zip(self.categories, self.fills)):
            if (c == EMPTY) != (f == 0):
                bad.append(f"pallet {i}: category {c} with fill {f}")
        if not len(self.categories) == len(self.fills) == len(self.last_use):
            bad.append("pallet arrays differ in length")
        return bad


@dataclass(frozen=True)
class KittingResult:
    buffer: BufferState
    switches: int
    duration: float
    evicted: tuple[tuple[int, int], ...]  # (pallet, old category), in replacement order
    placed: tuple[tuple[int, int, int], ...]  # (pallet, category, count), in placement order


def _check_parts(parts: Sequence[tuple[int, int]], pallet_count: int, category_count: int | None) -> None:
    cats = [c for c, _ in parts]
    if category_count is not None:
        for c in cats:
            if not 0 <= c < category_count:
                raise KittingError(f"category {c} outside 0..{category_count - 1}")
    if len(set(cats)) > pallet_count:
        raise KittingError(f"{len(set(cats))} distinct categories cannot fit on {pallet_count} pallets")


def estimate_switches(buf: BufferState, parts: Sequence[tuple[int, int]],
                      category_count: int | None = None) -> int:
    """Pallet changes needed to place ``parts`` right now (does not mutate ``buf``)."""
    _check_parts(parts, buf.pallet_count, category_count)
    held = buf.held()
    new = len({c for c, _ in parts if c not in held})
    return max(0, new - buf.n_empty)


def kitting_duration(n_parts: int, switches: int, place_time: float, switch_time: float) -> float:
    """Replacements happen first, one pallet at a time, then every part is placed."""
    return n_parts * place_time + switches * switch_time


def choose_evictions(buf: BufferState, n_needed: int, policy: str = "demand",
                     protected: Sequence[int] = (),
                     demand: Mapping[int, int] | None = None) -> list[int]:
    """Pick ``n_needed`` occupied pallets to send to the warehouse.

    ``protected`` categories (the ones the current job is about to use) are
    never evicted.  Policies: ``demand`` evicts the category with the fewest
    parts still pending in unscheduled part-sorting work (ties by least
    recent use, then index), ``lru`` by least recent use, ``index`` lowest
    pallet index first.
    """
    if n_needed <= 0:
        return []
    if policy not in EVICTION_POLICIES:
        raise ValueError(f"unknown eviction policy {policy!r}")
    prot = set(protected)
    cand = [i for i, c in enumerate(buf.categories) if c != EMPTY and c not in prot]
    if n_needed > len(cand):
        raise KittingError(f"need {n_needed} evictions but only {len(cand)} pallets are evictable")
    if policy == "demand":
        dem = demand or {}
        cand.sort(key=lambda i: (dem.get(buf.categories[i], 0), buf.last_use[i], i))
    elif policy == "lru":
        cand.sort(key=lambda i: (buf.last_use[i], i))
    return cand[:n_needed]


def apply_kitting(buf: BufferState, parts: Sequence[tuple[int, int]], place_time: float,
                  switch_time: float, policy: str = "demand",
                  demand: Mapping[int, int] | None = None,
                  category_count: int | None = None) -> KittingResult:
    """Place a job's parts on the buffer and return the new state and its cost."""
    _check_parts(parts, buf.pallet_count, category_count)
    merged: dict[int, int] = {}
    for c, n in parts:
        merged[c] = merged.get(c, 0) + n
    cats = list(buf.categories)
    fills = list(buf.fills)
    last = list(buf.last_use)
    stamp = buf.clock + 1

    where = {c: i for i, c in enumerate(cats) if c != EMPTY}
    new_cats = sorted(c for c in merged if c not in where)
    empties = [i for i, c in enumerate(cats) if c == EMPTY]
    n_evict = max(0, len(new_cats) - len(empties))
    victims = choose_evictions(buf, n_evict, policy, protected=list(merged), demand=demand)
    evicted = tuple((i, cats[i]) for i in victims)
    for i in victims:
        cats[i], fills[i] = EMPTY, 0
    targets = empties + victims
    for c, i in zip(new_cats, targets):
        cats[i] = c
        where[c] = i

    placed = []
    for c in sorted(merged):
        i = where[c]
        fills[i] += merged[c]
        last[i] = stamp
        placed.append((i, c, merged[c]))

    n_parts = sum(merged.values())
    new_buf = BufferState(tuple(cats), tuple(fills), tuple(last),
                          buf.total_switches + n_evict, stamp)
    return KittingResult(new_buf, n_evict, kitting_duration(n_parts, n_evict, place_time, switch_time),
                         evicted, tuple(placed))
