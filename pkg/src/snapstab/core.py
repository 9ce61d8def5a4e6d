"""Register entries, register arrays and the timestamp order shared by both protocols.

Register arrays are plain tuples of entries so they can be copied, compared
and hashed cheaply. The never-written entry is the explicit ``BOTTOM``
singleton, which keeps "never written" distinguishable from a written value
whose timestamp has been forged to zero.
"""
from __future__ import annotations

from typing import Iterable, NamedTuple, Sequence, Tuple, Union


class _Bottom:
    __slots__ = ()
    value = None
    ts = 0

    def __repr__(self) -> str:
        return "BOTTOM"

    def __reduce__(self):
        return "BOTTOM"

    def __bool__(self) -> bool:
        return False


BOTTOM = _Bottom()


class Entry(NamedTuple):
    """A written register value tagged with its writer's operation index."""

    value: bytes
    ts: int


RegisterEntry = Union[Entry, _Bottom]
RegisterArray = Tuple[RegisterEntry, ...]
VectorClock = Tuple[int, ...]


class ConfigurationError(ValueError):
    """Scenario or state does not fit the configured system (length, n, f...)."""


def bottom_array(n: int) -> RegisterArray:
    return (BOTTOM,) * n


def entry_leq(a: RegisterEntry, b: RegisterEntry) -> bool:
    # values are ignored: (x, t) <= (y, t') iff t <= t'
    return a.ts <= b.ts


def entry_lt(a: RegisterEntry, b: RegisterEntry) -> bool:
    # a < b iff a <= b and a != b under the timestamp order, i.e. a strictly smaller ts
    return a.ts < b.ts


def array_leq(a: Sequence[RegisterEntry], b: Sequence[RegisterEntry]) -> bool:
    if len(a) != len(b):
        raise ConfigurationError(f"register arrays differ in length: {len(a)} != {len(b)}")
    return all(x.ts <= y.ts for x, y in zip(a, b))


def entry_max(a: RegisterEntry, b: RegisterEntry) -> RegisterEntry:
    """Entry with the larger timestamp; ties keep ``a``."""
    return b if b.ts > a.ts else a


def merge_arrays(reg: RegisterArray, received: Iterable[Sequence[RegisterEntry]]) -> RegisterArray:
    out = list(reg)
    n = len(out)
    for r in received:
        if len(r) != n:
            raise ConfigurationError(f"register arrays differ in length: {len(r)} != {n}")
        for k in range(n):
            if r[k].ts > out[k].ts:
                out[k] = r[k]
    return tuple(out)


def merge(
    i: int,
    ts: int,
    reg: RegisterArray,
    received: Iterable[Sequence[RegisterEntry]],
    repair_ts: bool = True,
) -> Tuple[int, RegisterArray]:
    """Fold received arrays into ``(ts, reg)`` of node ``i``.

    With ``repair_ts`` the write index is raised to the largest timestamp of
    the node's own entry seen locally or in any received array; without it
    (the non-stabilizing baseline) only the register array is merged.
    """
    received = list(received)
    if repair_ts:
        ts = max([ts, reg[i].ts] + [r[i].ts for r in received])
    return ts, merge_arrays(reg, received)


def vector_clock(reg: Sequence[RegisterEntry]) -> VectorClock:
    return tuple(e.ts for e in reg)


def observed_writes(current: Sequence[int], sampled: Sequence[int]) -> int:
    """Sum of per-entry timestamp advances, saturating each component at 0."""
    return sum(c - s if c > s else 0 for c, s in zip(current, sampled))


def vc_leq(a: Sequence[int], b: Sequence[int]) -> bool:
    return len(a) == len(b) and all(x <= y for x, y in zip(a, b))


def ts_collisions(arrays: Iterable[Sequence[RegisterEntry]]) -> list:
    """Report (k, ts) pairs that carry two different values across ``arrays``.

    Within a consistent execution a timestamp determines the value per
    writer, so any hit here is corruption residue rather than a tie to break.
    """
    seen: dict = {}
    hits = []
    for arr in arrays:
        for k, e in enumerate(arr):
            if e is BOTTOM:
                continue
            key = (k, e.ts)
            prior = seen.setdefault(key, e.value)
            if prior != e.value and key not in hits:
                hits.append(key)
    return hits
