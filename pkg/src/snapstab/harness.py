"""Scenarios, workload driving, metrics and reports.

``run_scenario`` builds a world for one :class:`Scenario`, injects the
configured transient corruption, runs the scheduler until the workload is
done or the step budget is exhausted, and returns a :class:`Report` (a plain
dict with a stable key order, so identical runs serialize to identical
bytes).
"""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from . import snapshot_at, snapshot_nb
from .checker import (
    History,
    HistoryEvent,
    audit_consistency,
    check_exhaustive,
    check_polynomial,
    count_async_cycles,
    operations,
)
from .core import ConfigurationError
from .net_sim import FaultPlan, TransientRecipe, World, initial_marker, inject_transient, to_jsonable
from .reset import ResetController

ALGORITHMS = ("nb_selfstab", "nb_baseline", "at_selfstab")
CSV_SCHEMA_VERSION = 1


@dataclass
class Workload:
    """Per-node operation scripts.

    ``ops[i]`` is the list of operations node ``i`` runs closed-loop, each
    either ``"write"``/``"snapshot"`` or ``{"op": ..., "at": step}`` to hold
    the invocation until the given step. ``steady_writers`` keep writing
    until every scripted operation has responded (or ``steady_until`` steps,
    or ``steady_writes`` writes each).
    """

    ops: Dict[int, List[Any]] = field(default_factory=dict)
    steady_writers: List[int] = field(default_factory=list)
    steady_until: Optional[int] = None
    steady_writes: Optional[int] = None
    after_stable: bool = False

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "Workload":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown workload keys: {sorted(unknown)}")
        d["ops"] = {int(k): list(v) for k, v in d.get("ops", {}).items()}
        return cls(**d)


@dataclass
class Scenario:
    algorithm: str = "nb_selfstab"
    n: int = 3
    f: int = 0
    delta: int = 1
    capacity: int = 8
    fairness_cap: int = 10
    maxint: int = 2**16
    reset_enabled: bool = False
    drop_rate: float = 0.0
    dup_rate: float = 0.0
    reorder: bool = False
    crash_schedule: List[Tuple[int, int, str]] = field(default_factory=list)
    transient: Dict[str, Any] = field(default_factory=dict)
    workload: Workload = field(default_factory=Workload)
    step_budget: int = 100_000
    seed: int = 0
    policy: str = "weighted"
    tick_weight: float = 1.0
    gossip_weight: float = 1.0
    audit_every: int = 0
    value_bytes: int = 8
    adversary: Optional[str] = None
    adversary_args: Dict[str, Any] = field(default_factory=dict)
    run_past_workload: int = 0
    enforce_majority: bool = True
    name: str = ""
    trace: bool = False

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")
        if self.n < 3 and self.enforce_majority:
            raise ConfigurationError("n must be >= 3")
        if self.f < 0 or (self.enforce_majority and 2 * self.f >= self.n):
            raise ConfigurationError(f"f={self.f} violates 2f < n for n={self.n}")
        if self.delta < 0:
            raise ConfigurationError("delta must be >= 0")
        if self.step_budget < 0:
            raise ConfigurationError("step_budget must be >= 0")
        if self.value_bytes < 4:
            raise ConfigurationError("value_bytes must be >= 4")
        for i in self.workload.ops:
            if not 0 <= i < self.n:
                raise ConfigurationError(f"workload names node {i} outside 0..{self.n - 1}")
        crashing = {c[0] for c in self.crash_schedule if c[2] == "crash"}
        if self.enforce_majority and len(crashing) > self.f:
            raise ConfigurationError(f"crash schedule names {len(crashing)} nodes but f={self.f}")

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "Scenario":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown scenario keys: {sorted(unknown)}")
        if "workload" in d and isinstance(d["workload"], dict):
            d["workload"] = Workload.from_dict(d["workload"])
        if "crash_schedule" in d:
            d["crash_schedule"] = [tuple(c) for c in d["crash_schedule"]]
        return cls(**d)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["crash_schedule"] = [list(c) for c in self.crash_schedule]
        d["workload"]["ops"] = {str(k): v for k, v in self.workload.ops.items()}
        return d


def load_scenario(path: str) -> Scenario:
    with open(path) as fh:
        return Scenario.from_dict(json.load(fh))


def make_value(node: int, k: int, size: int = 8) -> bytes:
    """Unique write value: node id and per-node counter, fixed width."""
    return node.to_bytes(2, "big") + k.to_bytes(size - 2, "big")


# -- workload driver ---------------------------------------------------------------------
class Driver:
    def __init__(self, sc: Scenario):
        self.sc = sc
        self.history = History()
        self.queues: Dict[int, List[Dict[str, Any]]] = {}
        for i, lst in sc.workload.ops.items():
            self.queues[i] = [x if isinstance(x, dict) else {"op": x} for x in lst]
        self.steady = set(sc.workload.steady_writers)
        self.steady_count: Dict[int, int] = {i: 0 for i in self.steady}
        self.value_counter = [0] * sc.n
        self.next_op_id = 0
        self.started = not sc.workload.after_stable
        self.open_ops: Dict[int, Dict[str, Any]] = {}
        self.ops: Dict[int, Dict[str, Any]] = {}
        self.requeue: Dict[int, List[Dict[str, Any]]] = {}
        self.writes_done = 0
        self.write_responses: List[int] = []
        self.last_write: Dict[int, Tuple[int, int]] = {}  # node -> (invoke, respond) of latest completed write

    def scripted_pending(self, alive: Optional[Sequence[bool]] = None) -> bool:
        """Scripted operations still queued or open, ignoring crashed nodes when ``alive`` is given."""

        def live(i: int) -> bool:
            return alive is None or alive[i]

        if any(q and live(i) for i, q in self.queues.items()) or any(q and live(i) for i, q in self.requeue.items()):
            return True
        return any(o["node"] not in self.steady and live(o["node"]) for o in self.open_ops.values())

    def steady_active(self, world: World, i: int) -> bool:
        if i not in self.steady:
            return False
        wl = self.sc.workload
        if wl.steady_until is not None:
            return world.step_index < wl.steady_until
        if wl.steady_writes is not None:
            return self.steady_count[i] < wl.steady_writes
        return self.scripted_pending(world.alive)

    def done(self, world: World) -> bool:
        if not self.started:
            return False
        alive = world.alive
        if self.scripted_pending(alive):
            return False
        if any(o["node"] in self.steady and alive[o["node"]] for o in self.open_ops.values()):
            return False
        return not any(self.steady_active(world, i) and alive[i] for i in self.steady)

    def _next(self, world: World, i: int) -> Optional[Dict[str, Any]]:
        rq = self.requeue.get(i)
        if rq:
            return rq.pop(0)
        q = self.queues.get(i)
        if q:
            head = q[0]
            if head.get("at") is not None and world.step_index < head["at"]:
                return None
            return q.pop(0)
        if self.steady_active(world, i):
            self.steady_count[i] += 1
            return {"op": "write", "steady": True}
        return None

    def before_tick(self, world: World, i: int) -> None:
        if not self.started:
            return
        node = world.nodes[i]
        if not node.idle() or node.frozen:
            return
        spec = self._next(world, i)
        if spec is None:
            return
        op_id = self.next_op_id
        self.next_op_id += 1
        step = world.step_index
        if spec["op"] == "write":
            self.value_counter[i] += 1
            v = make_value(i, self.value_counter[i], self.sc.value_bytes)
            node.invoke_write(v, op_id)
        elif spec["op"] == "snapshot":
            v = None
            node.invoke_snapshot(op_id)
        else:
            raise ConfigurationError(f"unknown operation {spec['op']!r}")
        self.history.record(HistoryEvent(i, spec["op"], "invoke", step, v, op_id))
        rec = {"op_id": op_id, "node": i, "kind": spec["op"], "invoke": step, "respond": None, "steady": bool(spec.get("steady"))}
        self.open_ops[op_id] = rec
        self.ops[op_id] = rec
        world.record("invoke", i, op_id)

    def after_tick(self, world: World, i: int) -> None:
        node = world.nodes[i]
        op_id = node.op_id
        res = node.poll()
        if res is None:
            return
        kind, result = res
        step = world.step_index
        self.history.record(HistoryEvent(i, kind, "respond", step, result, op_id))
        rec = self.open_ops.pop(op_id)
        rec["respond"] = step
        if kind == "snapshot":
            rec["result"] = result
        else:
            self.writes_done += 1
            self.write_responses.append(step)
            self.last_write[i] = (rec["invoke"], step)
        world.record("respond", i, op_id)

    def abort(self, world: World, i: int) -> None:
        node = world.nodes[i]
        op_id = node.op_id
        kind = node.op_kind
        node.abort()
        if op_id is None or op_id not in self.open_ops:
            return
        rec = self.open_ops.pop(op_id)
        rec["aborted"] = world.step_index
        self.history.record(HistoryEvent(i, kind, "abort", world.step_index, None, op_id))
        world.record("abort", i, op_id)
        if not rec["steady"]:
            self.requeue.setdefault(i, []).append({"op": kind})


# -- adversarial schedules -----------------------------------------------------------------
class StarvationPolicy:
    """Hold the snapshotter's query traffic until the writer completes a fresh write.

    Every query round of ``snapshotter`` then observes a register array that
    changed since the round began, so the non-blocking snapshot keeps
    retrying. Once the writer stops, nothing is held.
    """

    def __init__(self, driver: Driver, snapshotter: int = 0, writer: int = 1):
        self.driver = driver
        self.s = snapshotter
        self.w = writer
        self.round_seen: Dict[int, int] = {}

    def __call__(self, world: World) -> tuple:
        hold = False
        rnd = world.nodes[self.s].round
        writer_live = self.driver.steady_active(world, self.w) or any(
            o["node"] == self.w for o in self.driver.open_ops.values()
        )
        if rnd is not None and rnd.kind == "SNAPSHOT" and writer_live:
            # release only after a write that was invoked once this round was under way
            seen = self.round_seen.setdefault(rnd.rid, world.step_index)
            last = self.driver.last_write.get(self.w)
            hold = last is None or last[0] < seen
        events = world.enabled()
        if hold:
            events = [
                e
                for e in events
                if not (e[0] == "main" and ((e[1][0] == self.s and world.main[e[1]].buffer[0].kind == "SNAPSHOT") or (e[1][1] == self.s and world.main[e[1]].buffer[0].kind == "SNAPSHOTack")))
            ]
        return events[world.rng.randrange(len(events))]


# -- metrics ------------------------------------------------------------------------------------
def block_phases(trace: Sequence[tuple]) -> List[Tuple[int, int, int]]:
    """Write-blocking phases as (node, begin, end) from recorded block transitions."""
    open_: Dict[int, int] = {}
    out = []
    for rec in trace:
        if rec[1] == "block":
            node, on = rec[2], rec[3]
            if on:
                open_[node] = rec[0]
            elif node in open_:
                out.append((node, open_.pop(node), rec[0]))
    for node, b in open_.items():
        out.append((node, b, -1))
    return sorted(out, key=lambda x: x[1])


def writes_between_phases(phases: Sequence[Tuple[int, int, int]], write_responses: Sequence[int]) -> List[int]:
    """Completed writes strictly after one phase ends and up to the next phase's start."""
    merged: List[List[int]] = []
    for _, b, e in phases:
        e = math.inf if e < 0 else e
        if merged and b <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([b, e])
    out = []
    for (b0, e0), (b1, _) in zip(merged, merged[1:]):
        out.append(sum(1 for t in write_responses if e0 < t <= b1))
    return out


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    slope, _ = statistics.linear_regression([math.log(x) for x in xs], [math.log(y) for y in ys])
    return slope


def measure_messages(report: Dict[str, Any], op_kind: str) -> List[Dict[str, int]]:
    """Per-operation counts of unique request/reply messages, by message kind."""
    return [o["messages"] for o in report["ops"] if o["kind"] == op_kind and o["respond"] is not None]


# -- run ----------------------------------------------------------------------------------------
def build_world(sc: Scenario) -> World:
    plan = FaultPlan(
        crash_schedule=list(sc.crash_schedule),
        drop_rate=sc.drop_rate,
        dup_rate=sc.dup_rate,
        reorder=sc.reorder,
        fairness_cap=sc.fairness_cap,
        f=sc.f,
        enforce_majority=sc.enforce_majority,
    )
    world = World(
        sc.n,
        seed=sc.seed,
        capacity=sc.capacity,
        plan=plan,
        policy=sc.policy,
        tick_weight=sc.tick_weight,
        gossip_weight=sc.gossip_weight,
        verbose_trace=sc.trace,
    )
    if sc.algorithm == "at_selfstab":
        snapshot_at.make_nodes(world, sc.delta)
    else:
        snapshot_nb.make_nodes(world, selfstab=sc.algorithm == "nb_selfstab")
    return world


def run_scenario(sc: Scenario, keep_world: bool = False) -> Dict[str, Any]:
    sc.validate()
    world = build_world(sc)
    driver = Driver(sc)
    world.driver = driver
    recipe = TransientRecipe(**sc.transient) if sc.transient else TransientRecipe()
    recipe.value_bytes = sc.value_bytes
    inject_transient(world, recipe)
    if sc.adversary == "starvation":
        world.custom_policy = StarvationPolicy(driver, **sc.adversary_args)
    elif sc.adversary is not None:
        raise ConfigurationError(f"unknown adversary {sc.adversary!r}")
    reset = ResetController(sc.maxint) if sc.reset_enabled else None
    terminating = sc.algorithm == "at_selfstab"
    audit_every = sc.audit_every or sc.n
    audits: List[Tuple[int, int]] = []
    v0 = audit_consistency(world)
    audits.append((0, len(v0)))
    first_violations = v0[:5]
    blocked = [False] * sc.n
    tail = None
    has_work = bool(any(sc.workload.ops.values()) or sc.workload.steady_writers)
    while world.step_index < sc.step_budget:
        if not any(world.alive):
            break
        world.step()
        if terminating:
            for nd in world.nodes:
                b = nd.in_base_snapshot and nd.write_pending is not None
                if b != blocked[nd.i]:
                    blocked[nd.i] = b
                    world.record("block", nd.i, b)
        if reset is not None:
            reset.after_step(world, driver)
        if world.step_index % audit_every == 0:
            bad = len(audit_consistency(world))
            audits.append((world.step_index, bad))
            if not driver.started and bad == 0:
                driver.started = True
        if has_work and driver.done(world):
            if tail is None:
                tail = world.step_index + sc.run_past_workload
            if world.step_index >= tail:
                break
    final_bad = audit_consistency(world)
    audits.append((world.step_index, len(final_bad)))

    cycles = count_async_cycles(world.trace, sc.n, gossip=sc.algorithm != "nb_baseline")
    stab_step = None
    for step, bad in audits:
        if bad == 0 and stab_step is None:
            stab_step = step
        elif bad:
            stab_step = None
    report: Dict[str, Any] = {
        "name": sc.name,
        "algorithm": sc.algorithm,
        "n": sc.n,
        "f": sc.f,
        "delta": sc.delta,
        "seed": sc.seed,
        "steps": world.step_index,
        "workload_done": driver.done(world),
        "cycles": len(cycles),
        "cycle_boundaries": cycles.boundaries,
        "stabilization_step": stab_step,
        "stabilization_cycle": None if stab_step is None else (0 if stab_step == 0 else cycles.cycle_of(stab_step)),
        "initial_violations": len(v0),
        "initial_violation_sample": first_violations,
        "final_violations": final_bad[:5],
        "messages": dict(world.msg_by_kind),
        "gossip_sends": world.gossip_sends,
        "iterations": sum(1 for r in world.trace if r[1] == "iter"),
        "forced_deliveries": world.forced_deliveries,
    }
    ops = []
    for op_id in sorted(driver.ops):
        o = driver.ops[op_id]
        row = {
            "op_id": op_id,
            "node": o["node"],
            "kind": o["kind"],
            "invoke": o["invoke"],
            "respond": o["respond"],
            "aborted": o.get("aborted"),
            "steady": o["steady"],
            "invoke_cycle": cycles.cycle_of(o["invoke"]),
            "respond_cycle": None if o["respond"] is None else cycles.cycle_of(o["respond"]),
            "messages": dict(sorted(world.msg_by_op.get(op_id, {}).items())),
        }
        row["latency_steps"] = None if o["respond"] is None else o["respond"] - o["invoke"]
        row["latency_cycles"] = None if o["respond"] is None else row["respond_cycle"] - row["invoke_cycle"] + 1
        ops.append(row)
    report["ops"] = ops
    report["unterminated"] = [o["op_id"] for o in ops if o["respond"] is None and o["aborted"] is None]
    report["aborted"] = [o["op_id"] for o in ops if o["aborted"] is not None]
    initial = None
    if recipe.mode != "none" and recipe.values == "initial":
        initial = [initial_marker(k, sc.value_bytes) for k in range(sc.n)]
    events = driver.history.events
    poly = check_polynomial(events, sc.n, initial)
    report["verdict"] = poly.to_json()
    if poly.operations <= 10:
        exh = check_exhaustive(events, sc.n, initial)
        report["exhaustive_verdict"] = exh.linearizable
        report["checkers_agree"] = exh.linearizable == poly.linearizable
    if terminating:
        phases = block_phases(world.trace)
        report["block_phases"] = [list(p) for p in phases]
        report["writes_between_blocks"] = writes_between_phases(phases, driver.write_responses)
    if reset is not None:
        report["resets"] = [
            {
                "detected": r.detected,
                "finished": r.finished,
                "agreement_rounds": r.agreement_rounds,
                "aborted_ops": r.aborted_ops,
                "maxima_before": r.maxima_before,
                "maxima_after": r.maxima_after,
                "values_before": r.values_before,
                "values_after": r.values_after,
            }
            for r in reset.records
        ]
        report["reset_mode"] = reset.mode
    phases_by_node: Dict[int, List[Tuple[int, float]]] = {}
    for node, b, e in report.get("block_phases", []):
        phases_by_node.setdefault(node, []).append((b, math.inf if e < 0 else e))
    report["deferred_writes"] = sum(
        1
        for o in ops
        if o["kind"] == "write" and any(b <= o["invoke"] <= e for b, e in phases_by_node.get(o["node"], []))
    )
    if keep_world:
        report["_world"] = world
        report["_driver"] = driver
        report["_cycles"] = cycles
    return report


def report_json(report: Dict[str, Any]) -> str:
    clean = {k: v for k, v in report.items() if not k.startswith("_")}
    return json.dumps(to_jsonable(clean), sort_keys=True)


def report_ok(report: Dict[str, Any]) -> bool:
    """All verdicts positive and the workload finished inside the step budget."""
    return (
        bool(report["verdict"]["linearizable"])
        and report.get("checkers_agree", True) is not False
        and bool(report["workload_done"])
    )


# -- sweeps -------------------------------------------------------------------------------------
CSV_COLUMNS = (
    "schema",
    "axis",
    "value",
    "algorithm",
    "n",
    "delta",
    "seed",
    "steps",
    "cycles",
    "stabilization_cycle",
    "linearizable",
    "snapshot_msgs_mean",
    "write_msgs_mean",
    "snapshot_latency_cycles_max",
    "gossip_sends",
    "block_phases",
)


def summary_row(axis: str, value: Any, r: Dict[str, Any]) -> Dict[str, Any]:
    snaps = [sum(m.values()) for m in measure_messages(r, "snapshot")]
    writes = [sum(m.values()) for m in measure_messages(r, "write")]
    lat = [o["latency_cycles"] for o in r["ops"] if o["kind"] == "snapshot" and o["latency_cycles"] is not None]
    return {
        "schema": CSV_SCHEMA_VERSION,
        "axis": axis,
        "value": value,
        "algorithm": r["algorithm"],
        "n": r["n"],
        "delta": r["delta"],
        "seed": r["seed"],
        "steps": r["steps"],
        "cycles": r["cycles"],
        "stabilization_cycle": r["stabilization_cycle"],
        "linearizable": r["verdict"]["linearizable"],
        "snapshot_msgs_mean": statistics.fmean(snaps) if snaps else None,
        "write_msgs_mean": statistics.fmean(writes) if writes else None,
        "snapshot_latency_cycles_max": max(lat) if lat else None,
        "gossip_sends": r["gossip_sends"],
        "block_phases": len(r.get("block_phases", [])),
    }


def sweep(template: Scenario, axis: str, values: Sequence[Any]) -> List[Dict[str, Any]]:
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    if axis not in ("n", "delta"):
        raise ConfigurationError(f"cannot sweep over {axis!r}")
    rows = []
    for v in values:
        d = template.to_dict()
        d[axis] = v
        sc = Scenario.from_dict(d)
        rows.append(summary_row(axis, v, run_scenario(sc)))
    return rows


def rows_csv(rows: Sequence[Dict[str, Any]]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(CSV_COLUMNS), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


# -- built-in scenarios --------------------------------------------------------------------------
def starvation_scenario(writes: int = 260, seed: int = 0, n: int = 3) -> Scenario:
    """A non-blocking snapshot at node 0 chased by a writer at node 1."""
    return Scenario(
        name="starvation",
        algorithm="nb_selfstab",
        n=n,
        seed=seed,
        workload=Workload(ops={0: [{"op": "snapshot", "at": 5}]}, steady_writers=[1], steady_writes=writes),
        adversary="starvation",
        adversary_args={"snapshotter": 0, "writer": 1},
        step_budget=400_000,
        run_past_workload=0,
    )


BUILTIN: Dict[str, Callable[..., Scenario]] = {"starvation": starvation_scenario}
