"""Self-stabilizing always-terminating snapshot object node with helping threshold δ.

Each node keeps one pending snapshot task per node, ``pnd[k] = (sns, vc, fnl)``.
A task becomes eligible for helping (member of ``delta_set``) once its owner
has sampled a vector clock and at least δ writes have been observed since,
or immediately when δ = 0. The node's own unfinished task is always
eligible at the node itself. Results are stored with SAVE/SAVEack rounds so a
majority of nodes hold them before the helper moves on.

The whole do-forever loop is one generator. A single node tick resumes it
until it yields, which happens after every request broadcast and at the end
of each loop pass.
"""
from __future__ import annotations

import random
from typing import Any, Dict, Generator, Iterable, List, NamedTuple, Optional, Tuple

from .comms import CommsNode, ContractViolation
from .core import (
    Entry,
    RegisterArray,
    VectorClock,
    array_leq,
    bottom_array,
    merge,
    observed_writes,
    vc_leq,
    vector_clock,
)
from .net_sim import TransientRecipe, random_array, random_entry


class PendingTask(NamedTuple):
    sns: int
    vc: Optional[VectorClock]  # None stands for the unset clock
    fnl: Optional[RegisterArray]  # None until a result is stored


IDLE_TASK = PendingTask(0, None, None)
Task = Tuple[int, int, Optional[VectorClock]]  # (owner, sns, vc)


def delta_set(i: int, pnd: List[PendingTask], reg: RegisterArray, delta: int) -> List[Task]:
    """Tasks currently eligible for helping at node ``i``, ordered by owner."""
    VC = vector_clock(reg)
    out: List[Task] = []
    for k, t in enumerate(pnd):
        if t.fnl is not None:
            continue
        if (
            (delta == 0 and t.sns > 0)
            or (t.vc is not None and delta <= observed_writes(VC, t.vc))
            or (k == i and t.sns > 0)
        ):
            out.append((k, t.sns, t.vc))
    return out


class TerminatingNode(CommsNode):
    KINDS = ("GOSSIP", "WRITE", "WRITEack", "SNAPSHOT", "SNAPSHOTack", "SAVE", "SAVEack")
    STATE_FIELDS = ("ts", "ssn", "sns", "reg", "pnd", "write_pending")

    def __init__(self, i: int, n: int, world: Any, delta: int = 1):
        if delta < 0:
            raise ValueError("delta must be >= 0")
        super().__init__(i, n, world)
        self.delta = delta
        self.ts = 0
        self.ssn = 0
        self.sns = 0
        self.reg: RegisterArray = bottom_array(n)
        self.pnd: List[PendingTask] = [IDLE_TASK] * n
        self.write_pending: Optional[bytes] = None
        self.loop = self.do_forever()
        self.op_kind: Optional[str] = None
        self.op_id: Optional[int] = None
        self.op_sns = 0
        self.in_base_snapshot = False
        self.frozen = False
        self.pass_begin = 0

    # -- derived views -----------------------------------------------------------------
    def vc(self) -> VectorClock:
        return vector_clock(self.reg)

    def eligible(self) -> List[Task]:
        return delta_set(self.i, self.pnd, self.reg, self.delta)

    def _task_ops(self, tasks: Iterable[Tuple[int, int, Any]]) -> Tuple[int, ...]:
        lookup = self.world.task_ops
        return tuple(sorted({lookup[(k, s)] for k, s, _ in tasks if (k, s) in lookup}))

    def _write_ops(self) -> Tuple[int, ...]:
        return () if self.op_kind != "write" or self.op_id is None else (self.op_id,)

    # -- do-forever loop ------------------------------------------------------------------
    def tick(self) -> None:
        self.comms_tick()
        next(self.loop)

    def do_forever(self):
        while True:
            self.pass_begin = self.world.step_index
            self.iter_rids = set()
            self.housekeeping()
            if self.write_pending is not None:
                yield from self.base_write(self.write_pending)
                self.write_pending = None
            tasks = self.eligible()
            if tasks:
                yield from self.base_snapshot(tasks)
            self.world.record("iter", self.i, self.pass_begin, tuple(sorted(self.iter_rids)))
            yield

    def housekeeping(self) -> None:
        store = self.acks["SNAPSHOTack"]
        for sender in [s for s, p in store.items() if p.get("ssn") != self.ssn]:
            del store[sender]
        i = self.i
        self.ts = max(self.ts, self.reg[i].ts)
        self.sns = max(self.sns, self.pnd[i].sns)
        VC = self.vc()
        for k, t in enumerate(self.pnd):
            if t.vc is not None and not vc_leq(t.vc, VC):
                self.pnd[k] = t._replace(vc=None)
        if self.sns != self.pnd[i].sns:
            self.pnd[i] = PendingTask(self.sns, None, None)
        self.gossip_tick()

    def gossip_payload(self, k: int) -> Dict[str, Any]:
        return {"entry": self.reg[k], "sns": self.pnd[k].sns}

    def _merge(self, acks: Optional[Dict[int, Any]]) -> None:
        if acks:
            self.ts, self.reg = merge(self.i, self.ts, self.reg, [acks[s]["reg"] for s in sorted(acks)])

    def base_write(self, v: bytes):
        self.ts += 1
        reg = list(self.reg)
        reg[self.i] = Entry(v, self.ts)
        self.reg = tuple(reg)
        lreg = self.reg
        acks = yield from self.quorum(
            "WRITE",
            lambda: {"reg": lreg},
            lambda p: array_leq(lreg, p["reg"]),
            ops=self._write_ops,
        )
        self._merge(acks)

    def base_snapshot(self, S: List[Task]):
        i = self.i
        keys = {(k, s) for k, s, _ in S}

        def current() -> List[Task]:
            return [t for t in self.eligible() if (t[0], t[1]) in keys]

        self.in_base_snapshot = True
        try:
            while True:
                self.ssn += 1
                prev = self.reg
                acks = yield from self.quorum(
                    "SNAPSHOT",
                    lambda: {"tasks": tuple(current()), "reg": self.reg, "ssn": self.ssn},
                    lambda p: p["ssn"] == self.ssn and len(p["reg"]) == self.n,
                    until=lambda: not current(),
                    ops=lambda: self._task_ops(current()),
                )
                self._merge(acks)
                live = current()
                if prev == self.reg and live:
                    A = tuple((k, self.pnd[k].sns, prev) for k, _, _ in S)
                    yield from self.safe_reg(A)
                elif any(k == i for k, _, _ in live) and self.pnd[i].vc is None:
                    self.pnd[i] = self.pnd[i]._replace(vc=self.vc())
                live = current()
                if not live:
                    break
                if len(live) == 1 and live[0][0] == i:
                    own = self.pnd[i]
                    seen = 0 if own.vc is None else observed_writes(self.vc(), own.vc)
                    if own.sns > 0 and own.fnl is None and seen < self.delta:
                        break
        finally:
            self.in_base_snapshot = False

    def safe_reg(self, A: Tuple[Tuple[int, int, RegisterArray], ...]):
        pairs = tuple(sorted({(k, s) for k, s, _ in A}))
        yield from self.quorum(
            "SAVE",
            lambda: {"items": A},
            lambda p: tuple(p["pairs"]) == pairs,
            ops=lambda: self._task_ops(A),
        )

    # -- operation interface used by the workload driver ----------------------------------
    def idle(self) -> bool:
        return self.op_kind is None

    def invoke_write(self, v: bytes, op_id: Optional[int] = None) -> None:
        if self.op_kind is not None:
            raise ContractViolation(f"node {self.i} already runs a {self.op_kind}")
        self.op_kind, self.op_id = "write", op_id
        self.write_pending = v

    def invoke_snapshot(self, op_id: Optional[int] = None) -> None:
        if self.op_kind is not None:
            raise ContractViolation(f"node {self.i} already runs a {self.op_kind}")
        self.op_kind, self.op_id = "snapshot", op_id
        self.sns += 1
        self.pnd[self.i] = PendingTask(self.sns, None, None)
        self.op_sns = self.sns
        if op_id is not None:
            self.world.task_ops[(self.i, self.sns)] = op_id

    def poll(self) -> Optional[Tuple[str, Any]]:
        if self.op_kind == "write" and self.write_pending is None:
            out: Tuple[str, Any] = ("write", None)
        elif self.op_kind == "snapshot" and self.pnd[self.i].fnl is not None:
            out = ("snapshot", self.pnd[self.i].fnl)
        else:
            return None
        self.op_kind = self.op_id = None
        return out

    def abort(self) -> None:
        self.op_kind = self.op_id = None
        self.write_pending = None

    def quiescent(self) -> bool:
        return (
            self.op_kind is None
            and self.round is None
            and self.write_pending is None
            and not self.in_base_snapshot
            and not self.eligible()
        )

    def restart(self) -> None:
        self.loop.close()
        self.abort()
        for store in self.acks.values():
            store.clear()
        self.in_base_snapshot = False
        self.loop = self.do_forever()

    def indices(self) -> Dict[str, int]:
        return {"ts": self.ts, "ssn": self.ssn, "sns": self.sns}

    def zero_indices(self, values: RegisterArray) -> None:
        self.ts = self.ssn = self.sns = 0
        self.reg = values
        self.pnd = [IDLE_TASK] * self.n

    # -- server side ---------------------------------------------------------------------
    def _absorb(self, reg_j) -> None:
        if len(reg_j) != self.n:
            raise ValueError("register array length")
        self.reg = tuple(b if b.ts > a.ts else a for a, b in zip(self.reg, reg_j))

    def on_WRITE(self, env) -> None:
        self._absorb(env.payload["reg"])
        self.send("WRITEack", env.src, {"reg": self.reg}, env.rid, env.ops)

    def on_SNAPSHOT(self, env) -> None:
        p = env.payload
        self._absorb(p["reg"])
        tasks = p["tasks"]
        for s, sn, vc in tasks:
            t = self.pnd[s]
            if t.sns < sn or (t.sns == sn and t.vc is None and t.fnl is None):
                self.pnd[s] = PendingTask(sn, vc, None)
        A = []
        for k in sorted({k for k, _, _ in tasks}):
            t = self.pnd[k]
            if t.fnl is not None:
                A.append((k, t.sns, t.fnl))
        self.send("SNAPSHOTack", env.src, {"reg": self.reg, "ssn": p["ssn"]}, env.rid, env.ops)
        if A:
            self.send("SAVE", env.src, {"items": tuple(A)}, env.rid, env.ops)

    def on_SAVE(self, env) -> None:
        items = env.payload["items"]
        for k, s, r in items:
            if len(r) != self.n:
                raise ValueError("register array length")
        for k, s, r in items:
            t = self.pnd[k]
            if t.sns < s or (t.sns == s and t.fnl is None):
                self.pnd[k] = PendingTask(s, t.vc, tuple(r))
        pairs = tuple(sorted({(k, s) for k, s, _ in items}))
        self.send("SAVEack", env.src, {"pairs": pairs}, env.rid, env.ops)

    def on_WRITEack(self, env) -> None:
        self.on_reply(env)

    def on_SNAPSHOTack(self, env) -> None:
        self.on_reply(env)

    def on_SAVEack(self, env) -> None:
        self.on_reply(env)

    def on_GOSSIP(self, env) -> None:
        e = env.payload["entry"]
        i = self.i
        if e.ts > self.reg[i].ts:
            reg = list(self.reg)
            reg[i] = e
            self.reg = tuple(reg)
        self.ts = max(self.ts, self.reg[i].ts)
        self.sns = max(self.sns, env.payload["sns"])

    # -- transient corruption ----------------------------------------------------------------
    def _random_task(self, rng: random.Random, recipe: TransientRecipe) -> PendingTask:
        sns = rng.randint(0, recipe.index_max)
        vc = None if rng.random() < 0.5 else tuple(rng.randint(0, recipe.index_max) for _ in range(self.n))
        fnl = None if rng.random() < 0.5 else random_array(rng, recipe, self.n)
        return PendingTask(sns, vc, fnl)

    def corrupt(self, rng: random.Random, recipe: TransientRecipe) -> None:
        self.ts = rng.randint(0, recipe.index_max)
        self.ssn = rng.randint(0, recipe.index_max)
        self.sns = rng.randint(0, recipe.index_max)
        self.reg = random_array(rng, recipe, self.n)
        if recipe.forge_tasks:
            self.pnd = [self._random_task(rng, recipe) if rng.random() < 0.5 else IDLE_TASK for _ in range(self.n)]
        for kind, store in self.acks.items():
            for s in range(self.n):
                if rng.random() < 0.3:
                    store[s] = self.forge_payload(kind, rng, recipe, self.i)

    def forge_payload(self, kind: str, rng: random.Random, recipe: TransientRecipe, dst: int) -> Dict[str, Any]:
        hi = recipe.index_max
        if kind == "GOSSIP":
            return {"entry": random_entry(rng, recipe, dst), "sns": rng.randint(0, hi)}
        if kind in ("WRITE", "WRITEack"):
            return {"reg": random_array(rng, recipe, self.n)}
        if kind == "SNAPSHOTack":
            return {"reg": random_array(rng, recipe, self.n), "ssn": rng.randint(0, hi)}
        if kind == "SNAPSHOT":
            tasks = []
            for k in sorted(rng.sample(range(self.n), rng.randint(0, self.n))):
                t = self._random_task(rng, recipe)
                tasks.append((k, t.sns, t.vc))
            return {"tasks": tuple(tasks), "reg": random_array(rng, recipe, self.n), "ssn": rng.randint(0, hi)}
        ks = sorted(rng.sample(range(self.n), rng.randint(1, self.n)))
        if kind == "SAVE":
            return {"items": tuple((k, rng.randint(0, hi), random_array(rng, recipe, self.n)) for k in ks)}
        return {"pairs": tuple((k, rng.randint(0, hi)) for k in ks)}


def make_nodes(world: Any, delta: int = 1):
    nodes = [TerminatingNode(i, world.n, world, delta) for i in range(world.n)]
    world.attach(nodes)
    return nodes
