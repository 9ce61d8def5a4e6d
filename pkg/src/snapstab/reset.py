"""Bounded operation indices: overflow detection, freeze, agreement, zeroing.

Once any node holds an index at or above ``maxint`` the controller freezes
every node (no new invocations are admitted), waits for in-flight operations
to drain, lets the nodes exchange their full states until all of them hold
the same register values and index maxima, and finally rewrites every index
to 0. Register values are kept; only their timestamps drop to 0. This is the
all-nodes-alive variant: a crashed node stalls the reset.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from .core import BOTTOM, Entry, merge_arrays


def check_overflow(node: Any, maxint: int) -> bool:
    return any(v >= maxint for v in node.indices().values())


@dataclass
class ResetRecord:
    detected: int
    frozen_nodes: List[int]
    agreed: Optional[int] = None
    finished: Optional[int] = None
    agreement_rounds: int = 0
    aborted_ops: List[int] = field(default_factory=list)
    maxima_before: Dict[str, int] = field(default_factory=dict)
    values_before: List[List[Any]] = field(default_factory=list)  # per node, agreed register values before zeroing
    values_after: List[List[Any]] = field(default_factory=list)
    maxima_after: Dict[str, int] = field(default_factory=dict)


class ResetController:
    """Drives the freeze / agree / zero sequence from the harness step loop."""

    def __init__(self, maxint: int = 2**16, drain_budget: int = 20000):
        if maxint < 1:
            raise ValueError("maxint must be positive")
        self.maxint = maxint
        self.drain_budget = drain_budget
        self.mode = "normal"  # normal | frozen | stalled
        self.records: List[ResetRecord] = []
        self._frozen_at = 0

    def after_step(self, world: Any, driver: Any = None) -> None:
        step = world.step_index
        if self.mode == "normal":
            if any(check_overflow(nd, self.maxint) for nd in world.nodes):
                self.freeze(world)
            return
        if self.mode != "frozen":
            return
        if not all(world.alive):
            if step - self._frozen_at > self.drain_budget:
                self.mode = "stalled"
                world.record("reset_stalled", -1)
            return
        drained = all(nd.quiescent() for nd in world.nodes)
        if not drained and step - self._frozen_at <= self.drain_budget:
            return
        rec = self.records[-1]
        if not drained:
            for nd in world.nodes:
                if nd.op_kind is not None:
                    op_id = nd.op_id
                    if driver is not None:
                        driver.abort(world, nd.i)
                    if op_id is not None:
                        rec.aborted_ops.append(op_id)
        global_reset(world, rec)
        self.mode = "normal"
        rec.finished = world.step_index
        for nd in world.nodes:
            nd.frozen = False

    def freeze(self, world: Any) -> None:
        self.mode = "frozen"
        self._frozen_at = world.step_index
        self.records.append(ResetRecord(world.step_index, [nd.i for nd in world.nodes]))
        for nd in world.nodes:
            nd.frozen = True
        world.record("freeze", -1)


def agree(world: Any) -> int:
    """Exchange full states pairwise until every node holds identical maxima; return rounds."""
    nodes = world.nodes
    rounds = 0
    while True:
        regs = [nd.reg for nd in nodes]
        maxima = [nd.indices() for nd in nodes]
        if all(r == regs[0] for r in regs) and all(m == maxima[0] for m in maxima):
            return rounds
        rounds += 1
        merged = merge_arrays(regs[0], regs[1:])
        top = {k: max(m[k] for m in maxima) for k in maxima[0]}
        for nd in nodes:
            nd.reg = merged
            for k, v in top.items():
                setattr(nd, k, v)


def global_reset(world: Any, record: Optional[ResetRecord] = None) -> ResetRecord:
    """Agree on register contents, then zero every index while keeping the values."""
    if not all(world.alive):
        raise RuntimeError("global reset needs every node alive")
    rec = record or ResetRecord(world.step_index, [nd.i for nd in world.nodes])
    rec.maxima_before = {
        k: max(nd.indices()[k] for nd in world.nodes) for k in world.nodes[0].indices()
    }
    rec.agreement_rounds = agree(world)
    rec.values_before = [[e.value for e in nd.reg] for nd in world.nodes]
    rec.agreed = world.step_index
    values = tuple(BOTTOM if e is BOTTOM else Entry(e.value, 0) for e in world.nodes[0].reg)
    for c in list(world.main.values()) + list(world.gossip.values()):
        c.buffer.clear()
    for nd in world.nodes:
        nd.restart()
        nd.zero_indices(values)
    rec.values_after = [[e.value for e in nd.reg] for nd in world.nodes]
    rec.maxima_after = {
        k: max(nd.indices()[k] for nd in world.nodes) for k in world.nodes[0].indices()
    }
    rec.maxima_after["reg_ts"] = max(e.ts for nd in world.nodes for e in nd.reg)
    world.record("reset", -1)
    return rec
