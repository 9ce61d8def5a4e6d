"""Non-blocking snapshot object node, self-stabilizing or plain.

With ``selfstab=True`` every tick first purges stale snapshot replies,
repairs ``ts`` from the node's own register entry and gossips ``reg[k]`` to
each peer ``k``; ``merge`` also repairs ``ts``. With ``selfstab=False`` all of
that is skipped, which leaves the plain majority-replication algorithm.

Operations run as generators advanced by one step per node tick.
"""
from __future__ import annotations

import random
from typing import Any, Dict, Generator, Optional, Tuple

from .comms import CommsNode, ContractViolation
from .core import BOTTOM, Entry, RegisterArray, array_leq, bottom_array, merge
from .net_sim import TransientRecipe, random_array, random_entry


class SnapshotNode(CommsNode):
    KINDS = ("GOSSIP", "WRITE", "WRITEack", "SNAPSHOT", "SNAPSHOTack")
    STATE_FIELDS = ("ts", "ssn", "reg")

    def __init__(self, i: int, n: int, world: Any, selfstab: bool = True):
        super().__init__(i, n, world)
        self.selfstab = selfstab
        self.ts = 0
        self.ssn = 0
        self.reg: RegisterArray = bottom_array(n)
        self.op_gen: Optional[Generator] = None
        self.op_kind: Optional[str] = None
        self.op_id: Optional[int] = None
        self.op_result: Any = None
        self.op_done = False
        self.frozen = False

    # -- do-forever body ----------------------------------------------------------
    def tick(self) -> None:
        begin = self.world.step_index
        self.iter_rids = set()
        self.comms_tick()
        if self.selfstab:
            self.housekeeping()
        if self.op_gen is not None and not self.op_done:
            try:
                next(self.op_gen)
            except StopIteration as stop:
                self.op_result = stop.value
                self.op_done = True
                self.op_gen = None
        self.world.record("iter", self.i, begin, tuple(sorted(self.iter_rids)))

    def housekeeping(self) -> None:
        store = self.acks["SNAPSHOTack"]
        for sender in [s for s, p in store.items() if p.get("ssn") != self.ssn]:
            del store[sender]
        self.ts = max(self.ts, self.reg[self.i].ts)
        self.gossip_tick()

    def gossip_payload(self, k: int) -> Dict[str, Any]:
        return {"entry": self.reg[k]}

    def _merge(self, acks: Dict[int, Any]) -> None:
        self.ts, self.reg = merge(self.i, self.ts, self.reg, [acks[s]["reg"] for s in sorted(acks)], self.selfstab)

    def _ops(self) -> Tuple[int, ...]:
        return () if self.op_id is None else (self.op_id,)

    # -- client side ------------------------------------------------------------------
    def write_gen(self, v: bytes):
        self.ts += 1
        reg = list(self.reg)
        reg[self.i] = Entry(v, self.ts)
        self.reg = tuple(reg)
        lreg = self.reg
        acks = yield from self.quorum(
            "WRITE",
            lambda: {"reg": lreg},
            lambda p: array_leq(lreg, p["reg"]),
            ops=self._ops,
        )
        self._merge(acks)
        return None

    def snapshot_gen(self):
        while True:
            prev = self.reg
            self.ssn += 1
            acks = yield from self.quorum(
                "SNAPSHOT",
                lambda: {"reg": self.reg, "ssn": self.ssn},
                lambda p: p["ssn"] == self.ssn and len(p["reg"]) == self.n,
                ops=self._ops,
            )
            self._merge(acks)
            if prev == self.reg:
                return self.reg

    # -- operation interface used by the workload driver ----------------------------------
    def idle(self) -> bool:
        return self.op_kind is None

    def invoke_write(self, v: bytes, op_id: Optional[int] = None) -> None:
        self._start("write", self.write_gen(v), op_id)

    def invoke_snapshot(self, op_id: Optional[int] = None) -> None:
        self._start("snapshot", self.snapshot_gen(), op_id)

    def _start(self, kind: str, gen: Generator, op_id: Optional[int]) -> None:
        if self.op_kind is not None:
            raise ContractViolation(f"node {self.i} already runs a {self.op_kind}")
        self.op_kind, self.op_gen, self.op_id = kind, gen, op_id
        self.op_done, self.op_result = False, None

    def poll(self) -> Optional[Tuple[str, Any]]:
        """Return ``(kind, result)`` once the open operation has completed."""
        if self.op_kind is None or not self.op_done:
            return None
        out = (self.op_kind, self.op_result)
        self.op_kind = self.op_gen = self.op_id = None
        self.op_done = False
        return out

    def abort(self) -> None:
        if self.op_gen is not None:
            self.op_gen.close()
        self.op_kind = self.op_gen = self.op_id = None
        self.op_done = False

    def quiescent(self) -> bool:
        return self.op_kind is None and self.round is None

    def restart(self) -> None:
        """Drop any in-flight operation machinery (used after a global index reset)."""
        self.abort()
        for store in self.acks.values():
            store.clear()

    def indices(self) -> Dict[str, int]:
        return {"ts": self.ts, "ssn": self.ssn}

    def zero_indices(self, values: RegisterArray) -> None:
        self.ts = 0
        self.ssn = 0
        self.reg = values

    # -- server side ---------------------------------------------------------------------
    def _absorb(self, reg_j) -> None:
        if len(reg_j) != self.n:
            raise ValueError("register array length")
        self.reg = tuple(b if b.ts > a.ts else a for a, b in zip(self.reg, reg_j))

    def on_WRITE(self, env) -> None:
        self._absorb(env.payload["reg"])
        self.send("WRITEack", env.src, {"reg": self.reg}, env.rid, env.ops)

    def on_SNAPSHOT(self, env) -> None:
        self._absorb(env.payload["reg"])
        self.send("SNAPSHOTack", env.src, {"reg": self.reg, "ssn": env.payload["ssn"]}, env.rid, env.ops)

    def on_WRITEack(self, env) -> None:
        self.on_reply(env)

    def on_SNAPSHOTack(self, env) -> None:
        self.on_reply(env)

    def on_GOSSIP(self, env) -> None:
        if not self.selfstab:
            return
        e = env.payload["entry"]
        mine = self.reg[self.i]
        if e.ts > mine.ts:
            reg = list(self.reg)
            reg[self.i] = e
            self.reg = tuple(reg)
        self.ts = max(self.ts, self.reg[self.i].ts)

    # -- transient corruption ----------------------------------------------------------------
    def corrupt(self, rng: random.Random, recipe: TransientRecipe) -> None:
        self.ts = rng.randint(0, recipe.index_max)
        self.ssn = rng.randint(0, recipe.index_max)
        self.reg = random_array(rng, recipe, self.n)
        for kind, store in self.acks.items():
            for s in range(self.n):
                if rng.random() < 0.3:
                    store[s] = self.forge_payload(kind, rng, recipe, self.i)

    def forge_payload(self, kind: str, rng: random.Random, recipe: TransientRecipe, dst: int) -> Dict[str, Any]:
        if kind == "GOSSIP":
            return {"entry": random_entry(rng, recipe, dst)}
        payload: Dict[str, Any] = {"reg": random_array(rng, recipe, self.n)}
        if kind in ("SNAPSHOT", "SNAPSHOTack"):
            payload["ssn"] = rng.randint(0, recipe.index_max)
        return payload


def make_nodes(world: Any, selfstab: bool = True):
    nodes = [SnapshotNode(i, world.n, world, selfstab) for i in range(world.n)]
    world.attach(nodes)
    return nodes


__all__ = ["SnapshotNode", "make_nodes", "BOTTOM"]
