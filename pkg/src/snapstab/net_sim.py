"""Deterministic interleaving simulator for a fully connected, crash-prone network.

One ``World`` owns every node, every directed channel and the trace. A call
to :meth:`World.step` executes exactly one atomic step: either a node step
(internal computation plus the sends it issues) or the receipt of a single
envelope. Packet omission, duplication and reordering are decided by seeded
PRNGs; a per-logical-message drop counter bounded by ``fairness_cap`` stands
in for fair communication.

Each directed link carries two bounded buffers: one for request/reply
traffic and one for gossip. Gossip deliveries are scheduled from their own
PRNG stream, so the request/reply schedule of a run does not depend on
whether gossip is present.
"""
from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from .core import BOTTOM, ConfigurationError, Entry

KINDS = ("GOSSIP", "WRITE", "WRITEack", "SNAPSHOT", "SNAPSHOTack", "SAVE", "SAVEack")
REQUEST_KINDS = ("WRITE", "SNAPSHOT", "SAVE")
REPLY_OF = {"WRITE": "WRITEack", "SNAPSHOT": "SNAPSHOTack", "SAVE": "SAVEack"}


@dataclass(eq=False, slots=True)
class Envelope:
    kind: str
    src: int
    dst: int
    payload: Dict[str, Any]
    # simulator metadata, never read by protocol logic
    rid: int = 0
    ops: Tuple[int, ...] = ()
    seq: int = 0

    def copy(self) -> "Envelope":
        return Envelope(self.kind, self.src, self.dst, self.payload, self.rid, self.ops, self.seq)

    def logical_key(self) -> tuple:
        return (self.kind, self.rid, self.src, self.dst)

    def digest(self) -> str:
        blob = json.dumps([self.kind, self.src, self.dst, to_jsonable(self.payload)], sort_keys=True)
        return hashlib.blake2b(blob.encode(), digest_size=8).hexdigest()


class Channel:
    """Bounded FIFO buffer; a send to a full buffer evicts the oldest envelope."""

    __slots__ = ("src", "dst", "capacity", "buffer")

    def __init__(self, src: int, dst: int, capacity: int = 8):
        if capacity < 1:
            raise ConfigurationError("channel capacity must be >= 1")
        self.src = src
        self.dst = dst
        self.capacity = capacity
        self.buffer: List[Envelope] = []

    def put(self, env: Envelope) -> Optional[Envelope]:
        evicted = None
        if len(self.buffer) >= self.capacity:
            evicted = self.buffer.pop(0)
        self.buffer.append(env)
        return evicted

    def __len__(self) -> int:
        return len(self.buffer)


@dataclass
class FaultPlan:
    crash_schedule: List[Tuple[int, int, str]] = field(default_factory=list)  # (node, step, "crash"|"resume")
    drop_rate: float = 0.0
    dup_rate: float = 0.0
    reorder: bool = False
    fairness_cap: int = 10
    f: Optional[int] = None  # max simultaneously crashed; defaults to (n-1)//2
    enforce_majority: bool = True

    def validate(self, n: int) -> None:
        for p in (self.drop_rate, self.dup_rate):
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"rate {p} outside [0, 1]")
        if self.dup_rate >= 1.0:
            raise ConfigurationError("dup_rate must be < 1 or nothing is ever consumed")
        if self.fairness_cap < 0:
            raise ConfigurationError("fairness_cap must be >= 0")
        f = self.max_crashed(n)
        if self.enforce_majority and 2 * f >= n:
            raise ConfigurationError(f"f={f} violates 2f < n for n={n}")
        for node, step, action in self.crash_schedule:
            if not 0 <= node < n or action not in ("crash", "resume") or step < 0:
                raise ConfigurationError(f"bad crash schedule entry {(node, step, action)}")

    def max_crashed(self, n: int) -> int:
        return (n - 1) // 2 if self.f is None else self.f


class SchedulingError(RuntimeError):
    """No enabled event: every node is crashed."""


# -- events -----------------------------------------------------------------
TICK, MAIN, GOSSIP = "tick", "main", "gossip"


class World:
    """Nodes, channels, PRNG streams, trace and message accounting for one run."""

    def __init__(
        self,
        n: int,
        *,
        seed: int = 0,
        capacity: int = 8,
        plan: Optional[FaultPlan] = None,
        policy: str = "weighted",
        tick_weight: float = 1.0,
        gossip_weight: float = 1.0,
        verbose_trace: bool = False,
    ):
        if n < 1:
            raise ConfigurationError("n must be >= 1")
        self.n = n
        self.seed = seed
        self.capacity = capacity
        self.plan = plan or FaultPlan()
        self.plan.validate(n)
        self.policy = policy
        self.tick_weight = tick_weight
        self.gossip_weight = gossip_weight
        self.verbose_trace = verbose_trace

        self.rng = random.Random(f"{seed}:main")
        self.gossip_rng = random.Random(f"{seed}:gossip")

        self.nodes: List[Any] = []
        self.alive = [True] * n
        self.main: Dict[Tuple[int, int], Channel] = {}
        self.gossip: Dict[Tuple[int, int], Channel] = {}
        for s in range(n):
            for d in range(n):
                if s != d:
                    self.main[(s, d)] = Channel(s, d, capacity)
                    self.gossip[(s, d)] = Channel(s, d, capacity)
        self._main_list = list(self.main.values())
        self._gossip_list = list(self.gossip.values())

        self.step_index = 0
        self.trace: List[tuple] = []
        self.drop_streak: Dict[tuple, int] = {}
        self.forced_deliveries = 0
        self._seq = 0
        self._rid = 0
        self._rr = 0
        self._crash_plan = sorted(self.plan.crash_schedule, key=lambda c: (c[1], c[0]))
        self._crash_pos = 0
        self.driver: Any = None
        self.task_ops: Dict[Tuple[int, int], int] = {}  # (owner, sns) -> op id, for message attribution
        self.custom_policy: Optional[Callable[["World"], tuple]] = None
        self.adversarial = False

        # accounting of unique logical messages
        self._logical: set = set()
        self.msg_by_kind: Dict[str, int] = {k: 0 for k in KINDS if k != "GOSSIP"}
        self.msg_by_op: Dict[int, Dict[str, int]] = {}
        self.sends_total = 0
        self.gossip_sends = 0

    # -- wiring ---------------------------------------------------------------
    def attach(self, nodes: Sequence[Any]) -> None:
        if len(nodes) != self.n:
            raise ConfigurationError("node count does not match n")
        self.nodes = list(nodes)

    def new_rid(self) -> int:
        self._rid += 1
        return self._rid

    def record(self, *rec) -> None:
        self.trace.append((self.step_index,) + rec)

    # -- communication ------------------------------------------------------------
    def send(self, env: Envelope) -> None:
        self._seq += 1
        env.seq = self._seq
        self.sends_total += 1
        self._account(env)
        if env.src == env.dst:
            # local delivery of a node's own broadcast copy
            if self.verbose_trace:
                self.record("self", env.src, env)
            self.nodes[env.dst].on_message(env)
            return
        ch = (self.gossip if env.kind == "GOSSIP" else self.main)[(env.src, env.dst)]
        evicted = ch.put(env)
        if self.verbose_trace:
            self.record("send", env.src, env)
            if evicted is not None:
                self.record("evict", env.src, evicted)

    def _account(self, env: Envelope) -> None:
        if env.kind == "GOSSIP":
            self.gossip_sends += 1
            return
        key = (env.kind, env.rid, env.src, env.dst)
        if key in self._logical:
            return
        self._logical.add(key)
        self.msg_by_kind[env.kind] += 1
        for op in env.ops:
            per = self.msg_by_op.setdefault(op, {})
            per[env.kind] = per.get(env.kind, 0) + 1

    # -- faults -------------------------------------------------------------------
    def crashed_count(self) -> int:
        return self.alive.count(False)

    def crash(self, i: int) -> None:
        if not self.alive[i]:
            raise ConfigurationError(f"node {i} already crashed")
        if self.plan.enforce_majority:
            c = self.crashed_count() + 1
            if c > self.plan.max_crashed(self.n) or 2 * c >= self.n:
                raise ConfigurationError(f"crashing node {i} exceeds f or breaks 2f < n")
        self.alive[i] = False
        self.record("crash", i)

    def resume(self, i: int) -> None:
        if self.alive[i]:
            raise ConfigurationError(f"node {i} is not crashed")
        self.alive[i] = True
        self.record("resume", i)

    def _apply_crash_plan(self) -> None:
        plan = self._crash_plan
        while self._crash_pos < len(plan) and plan[self._crash_pos][1] <= self.step_index:
            node, _, action = plan[self._crash_pos]
            self._crash_pos += 1
            if action == "crash" and self.alive[node]:
                self.crash(node)
            elif action == "resume" and not self.alive[node]:
                self.resume(node)

    # -- scheduling -----------------------------------------------------------------
    def enabled(self) -> List[tuple]:
        ev: List[tuple] = [(TICK, i) for i in range(self.n) if self.alive[i]]
        ev += [(MAIN, (c.src, c.dst)) for c in self._main_list if c.buffer and self.alive[c.dst]]
        ev += [(GOSSIP, (c.src, c.dst)) for c in self._gossip_list if c.buffer and self.alive[c.dst]]
        return ev

    def _choose_weighted(self) -> tuple:
        alive = self.alive
        gch = [c for c in self._gossip_list if c.buffer and alive[c.dst]]
        ticks = [i for i in range(self.n) if alive[i]]
        mch = [c for c in self._main_list if c.buffer and alive[c.dst]]
        if not ticks:
            raise SchedulingError("no enabled events")
        wm = self.tick_weight * len(ticks) + len(mch)
        if gch:
            wg = self.gossip_weight * len(gch)
            if self.gossip_rng.random() * (wg + wm) < wg:
                c = gch[self.gossip_rng.randrange(len(gch))]
                return (GOSSIP, (c.src, c.dst))
        r = self.rng.random() * wm
        tw = self.tick_weight * len(ticks)
        if r < tw:
            return (TICK, ticks[min(int(r / self.tick_weight), len(ticks) - 1)])
        c = mch[min(int(r - tw), len(mch) - 1)]
        return (MAIN, (c.src, c.dst))

    def _choose_round_robin(self) -> tuple:
        ev = [(TICK, i) for i in range(self.n)] + [(MAIN, k) for k in self.main] + [(GOSSIP, k) for k in self.gossip]
        for _ in range(len(ev)):
            e = ev[self._rr % len(ev)]
            self._rr += 1
            if self._is_enabled(e):
                return e
        raise SchedulingError("no enabled events")

    def _is_enabled(self, e: tuple) -> bool:
        kind, x = e
        if kind == TICK:
            return self.alive[x]
        ch = (self.main if kind == MAIN else self.gossip)[x]
        return bool(ch.buffer) and self.alive[ch.dst]

    def step(self) -> tuple:
        """Execute one atomic step and return the event that ran."""
        self._apply_crash_plan()
        if self.custom_policy is not None:
            e = self.custom_policy(self)
        elif self.policy == "round_robin":
            e = self._choose_round_robin()
        else:
            e = self._choose_weighted()
        kind, x = e
        if kind == TICK:
            self._tick(x)
        elif kind == MAIN:
            self._deliver(self.main[x], self.rng)
        else:
            self._deliver(self.gossip[x], self.gossip_rng)
        self.step_index += 1
        return e

    def _tick(self, i: int) -> None:
        if self.verbose_trace:
            self.record("tick", i)
        if self.driver is not None:
            self.driver.before_tick(self, i)
        self.nodes[i].tick()
        if self.driver is not None:
            self.driver.after_tick(self, i)

    def _deliver(self, ch: Channel, rng: random.Random) -> None:
        buf = ch.buffer
        plan = self.plan
        idx = rng.randrange(len(buf)) if plan.reorder and len(buf) > 1 else 0
        env = buf[idx]
        if plan.drop_rate > 0.0:
            key = (env.src, env.dst, env.kind, env.rid)
            streak = self.drop_streak.get(key, 0)
            if rng.random() < plan.drop_rate:
                if streak < plan.fairness_cap:
                    self.drop_streak[key] = streak + 1
                    del buf[idx]
                    if self.verbose_trace:
                        self.record("drop", ch.dst, env)
                    return
                self.forced_deliveries += 1
            self.drop_streak.pop(key, None)
        if plan.dup_rate > 0.0 and rng.random() < plan.dup_rate:
            env = env.copy()
            if self.verbose_trace:
                self.record("dup", ch.dst, env)
        else:
            del buf[idx]
        if env.kind == "GOSSIP":
            self.record("gossip", ch.dst, env.src)
        elif self.verbose_trace:
            self.record("deliver", ch.dst, env)
        self.nodes[ch.dst].on_message(env)

    def run(self, steps: int) -> None:
        for _ in range(steps):
            self.step()

    # -- inspection -------------------------------------------------------------------
    def in_transit(self):
        for c in self._main_list:
            yield from c.buffer
        for c in self._gossip_list:
            yield from c.buffer

    def channel(self, src: int, dst: int, gossip: bool = False) -> Channel:
        return (self.gossip if gossip else self.main)[(src, dst)]


# -- transient faults -----------------------------------------------------------------
@dataclass
class TransientRecipe:
    """Corruption applied before the first step.

    ``mode="random"`` draws every index from ``[0, index_max]`` and fills
    channels with forged envelopes; ``mode="literal"`` overwrites exactly the
    given node fields, recorded replies and channel contents.
    ``values="initial"`` restricts corrupted register values to one marker
    value per node, so register contents stay attributable to a writer.
    """

    mode: str = "none"  # none | random | literal
    index_max: int = 4096
    p_bottom: float = 0.3
    channel_junk: int = 3
    forge_tasks: bool = True
    values: str = "random"  # random | initial
    value_bytes: int = 8
    nodes: Dict[int, Dict[str, Any]] = field(default_factory=dict)
    channels: Dict[Tuple[int, int], List[Envelope]] = field(default_factory=dict)
    acks: Dict[int, Dict[str, Dict[int, Any]]] = field(default_factory=dict)


def initial_marker(k: int, size: int = 8) -> bytes:
    return (b"init%03d" % k).ljust(size, b"\0")[:size] if size >= 7 else bytes([k % 256]) * size


def random_value(rng: random.Random, recipe: TransientRecipe, k: int) -> bytes:
    if recipe.values == "initial":
        return initial_marker(k, recipe.value_bytes)
    return bytes(rng.randrange(256) for _ in range(recipe.value_bytes))


def random_entry(rng: random.Random, recipe: TransientRecipe, k: int):
    if rng.random() < recipe.p_bottom:
        return BOTTOM
    return Entry(random_value(rng, recipe, k), rng.randint(0, recipe.index_max))


def random_array(rng: random.Random, recipe: TransientRecipe, n: int):
    return tuple(random_entry(rng, recipe, k) for k in range(n))


def inject_transient(world: World, recipe: TransientRecipe, rng: Optional[random.Random] = None) -> None:
    if recipe.mode == "none":
        return
    if world.step_index != 0 and not world.adversarial:
        raise ConfigurationError("transient faults are only injected before the first step")
    rng = rng or random.Random(f"{world.seed}:transient")
    if recipe.mode == "random":
        for node in world.nodes:
            node.corrupt(rng, recipe)
        for (s, d), ch in world.main.items():
            for _ in range(rng.randint(0, recipe.channel_junk)):
                kind = rng.choice([k for k in KINDS if k != "GOSSIP" and k in world.nodes[s].KINDS])
                env = Envelope(kind, s, d, world.nodes[s].forge_payload(kind, rng, recipe, d), rid=0)
                ch.put(env)
        for (s, d), ch in world.gossip.items():
            for _ in range(rng.randint(0, min(1, recipe.channel_junk))):
                ch.put(Envelope("GOSSIP", s, d, world.nodes[s].forge_payload("GOSSIP", rng, recipe, d)))
        return
    if recipe.mode != "literal":
        raise ConfigurationError(f"unknown transient mode {recipe.mode!r}")
    for i, fields in recipe.nodes.items():
        node = world.nodes[i]
        for name, value in fields.items():
            if name not in node.STATE_FIELDS:
                raise ConfigurationError(f"node {i} has no corruptible field {name!r}")
            setattr(node, name, value)
    for i, per_kind in recipe.acks.items():
        node = world.nodes[i]
        for kind, replies in per_kind.items():
            if kind not in node.acks:
                raise ConfigurationError(f"node {i} records no {kind!r} replies")
            node.acks[kind].update(replies)
    for (s, d), envs in recipe.channels.items():
        ch = world.gossip[(s, d)] if envs and envs[0].kind == "GOSSIP" else world.main[(s, d)]
        for env in envs:
            if env.kind not in KINDS:
                raise ConfigurationError(f"unknown envelope kind {env.kind!r}")
            ch.put(env)


# -- serialization ------------------------------------------------------------------------
def to_jsonable(x: Any) -> Any:
    if x is BOTTOM:
        return None
    if isinstance(x, Entry):
        return [x.value.hex(), x.ts]
    if isinstance(x, bytes):
        return x.hex()
    if isinstance(x, dict):
        return {str(k): to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [to_jsonable(v) for v in x]
    if isinstance(x, Envelope):
        return {"kind": x.kind, "src": x.src, "dst": x.dst, "seq": x.seq, "digest": x.digest()}
    return x


def trace_records(trace: Sequence[tuple]) -> List[Dict[str, Any]]:
    out = []
    for rec in trace:
        step, ev, node, *rest = rec
        d: Dict[str, Any] = {"step": step, "event": ev, "node": node}
        if rest:
            d["data"] = to_jsonable(rest if len(rest) > 1 else rest[0])
        out.append(d)
    return out


def trace_jsonl(trace: Sequence[tuple]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in trace_records(trace))
