"""History recording, linearizability checking, consistency audit and cycle counting.

Two linearizability checkers are provided. ``check_exhaustive`` is a
backtracking search over linearization orders with memoization on the set of
placed operations; it is exact and meant for short histories. ``check_polynomial``
exploits the single-writer structure: with one value per write, every
snapshot result pins down which writes precede it, so the history is
linearizable iff the precedence graph built from real-time order plus those
reads-from constraints is acyclic. It runs in O(m^2) for m operations.
"""
from __future__ import annotations

import bisect
import heapq
import json
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from .core import BOTTOM, Entry, vc_leq, vector_clock

INF = float("inf")


class RecordingError(ValueError):
    """An event sequence that breaks the one-open-operation-per-node rule."""


@dataclass(frozen=True)
class HistoryEvent:
    node: int
    op: str  # "write" | "snapshot"
    kind: str  # "invoke" | "respond" | "abort"
    step: int
    value: Any = None  # written bytes for writes, returned register array for snapshot responses
    op_id: int = -1


class History:
    """Append-only event log with per-node open-operation tracking."""

    def __init__(self) -> None:
        self.events: List[HistoryEvent] = []
        self.open: Dict[int, HistoryEvent] = {}

    def record(self, ev: HistoryEvent) -> None:
        if self.events and ev.step < self.events[-1].step:
            raise RecordingError("events must be recorded in step order")
        cur = self.open.get(ev.node)
        if ev.kind == "invoke":
            if cur is not None:
                raise RecordingError(f"node {ev.node} invoked {ev.op} while {cur.op} is open")
            self.open[ev.node] = ev
        elif ev.kind in ("respond", "abort"):
            if cur is None or cur.op != ev.op or (ev.op_id >= 0 and cur.op_id != ev.op_id):
                raise RecordingError(f"node {ev.node} {ev.kind} for {ev.op} without a matching invoke")
            del self.open[ev.node]
        else:
            raise RecordingError(f"unknown event kind {ev.kind!r}")
        self.events.append(ev)

    def __len__(self) -> int:
        return len(self.events)


def record_event(history: History, event: HistoryEvent) -> History:
    history.record(event)
    return history


@dataclass
class Operation:
    op_id: int
    node: int
    kind: str
    inv: float
    resp: float  # INF while pending
    value: Any = None  # bytes for writes
    result: Any = None  # register array for snapshots


def operations(events: Iterable[HistoryEvent]) -> Tuple[List[Operation], List[Operation]]:
    """Pair events into operations; returns (completed, pending).

    Aborted operations count as pending: an aborted write may still have
    reached some replicas, an aborted snapshot returned nothing.
    """
    open_: Dict[int, Operation] = {}
    done: List[Operation] = []
    aborted: List[Operation] = []
    auto = 0
    for ev in events:
        if ev.kind == "invoke":
            oid = ev.op_id if ev.op_id >= 0 else 10**9 + auto
            auto += 1
            open_[ev.node] = Operation(oid, ev.node, ev.op, ev.step, INF, ev.value if ev.op == "write" else None)
        elif ev.kind == "respond":
            op = open_.pop(ev.node)
            op.resp = ev.step
            if op.kind == "snapshot":
                op.result = tuple(ev.value)
            done.append(op)
        else:
            op = open_.pop(ev.node, None)
            if op is not None:
                aborted.append(op)
    return done, aborted + list(open_.values())


@dataclass
class Verdict:
    linearizable: bool
    witness: List[int] = field(default_factory=list)
    certificate: Dict[str, Any] = field(default_factory=dict)
    method: str = ""
    operations: int = 0

    def to_json(self) -> Dict[str, Any]:
        return {
            "linearizable": self.linearizable,
            "method": self.method,
            "operations": self.operations,
            "witness": list(self.witness),
            "certificate": _jsonable(self.certificate),
        }


def _jsonable(x: Any) -> Any:
    if isinstance(x, bytes):
        return x.hex()
    if x is BOTTOM:
        return None
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and x == INF:
        return None
    return x


# -- preparation shared by both checkers --------------------------------------------------
@dataclass
class _Prepared:
    ops: List[Operation]
    writes_by_node: Dict[int, List[Operation]]
    index_of_value: Dict[Tuple[int, bytes], int]  # (node, value) -> 1-based write index
    vectors: Dict[int, Tuple[int, ...]]  # snapshot op_id -> per-entry write index
    error: Optional[Dict[str, Any]] = None


def _prepare(events: Sequence[HistoryEvent], n: int, initial: Optional[Sequence[Any]]) -> _Prepared:
    done, pending = operations(events)
    snaps = [o for o in done if o.kind == "snapshot"]
    returned = set()
    for s in snaps:
        for k, e in enumerate(s.result):
            if e is not BOTTOM:
                returned.add((k, e.value))
    ops = list(done) + [o for o in pending if o.kind == "write" and (o.node, o.value) in returned]
    ops.sort(key=lambda o: (o.inv, o.op_id))
    writes_by_node: Dict[int, List[Operation]] = {}
    index_of_value: Dict[Tuple[int, bytes], int] = {}
    for o in ops:
        if o.kind == "write":
            lst = writes_by_node.setdefault(o.node, [])
            lst.append(o)
            key = (o.node, o.value)
            if key in index_of_value:
                return _Prepared(ops, writes_by_node, index_of_value, {}, {"reason": "duplicate write value", "node": o.node, "value": o.value})
            index_of_value[key] = len(lst)
    vectors: Dict[int, Tuple[int, ...]] = {}
    for s in snaps:
        if len(s.result) != n:
            return _Prepared(ops, writes_by_node, index_of_value, {}, {"reason": "result length", "op": s.op_id})
        vec = []
        for k, e in enumerate(s.result):
            if e is BOTTOM or (initial is not None and e.value == initial[k]):
                vec.append(0)
            elif (k, e.value) in index_of_value:
                vec.append(index_of_value[(k, e.value)])
            else:
                return _Prepared(ops, writes_by_node, index_of_value, {}, {"reason": "value never written", "op": s.op_id, "entry": k, "value": e.value})
        vectors[s.op_id] = tuple(vec)
    return _Prepared(ops, writes_by_node, index_of_value, vectors)


# -- exhaustive search ----------------------------------------------------------------------
def check_exhaustive(
    events: Sequence[HistoryEvent], n: int, initial: Optional[Sequence[Any]] = None, limit: int = 14
) -> Verdict:
    prep = _prepare(events, n, initial)
    m = len(prep.ops)
    if prep.error is not None:
        return Verdict(False, certificate=prep.error, method="exhaustive", operations=m)
    if m > limit:
        raise ValueError(f"exhaustive search limited to {limit} operations, got {m}")
    ops = prep.ops
    # write index of each write op within its node's sequence
    widx = {o.op_id: prep.index_of_value[(o.node, o.value)] for o in ops if o.kind == "write"}
    full = (1 << m) - 1
    seen: set = set()
    order: List[int] = []

    def search(mask: int, latest: Tuple[int, ...]) -> bool:
        if mask == full:
            return True
        if (mask, latest) in seen:
            return False
        min_resp = min(ops[j].resp for j in range(m) if not mask >> j & 1)
        for j in range(m):
            if mask >> j & 1:
                continue
            o = ops[j]
            if o.inv > min_resp:
                continue  # some unplaced op finished before this one started
            if o.kind == "write":
                if widx[o.op_id] != latest[o.node] + 1:
                    continue
                nxt = latest[: o.node] + (widx[o.op_id],) + latest[o.node + 1 :]
            else:
                if prep.vectors[o.op_id] != latest:
                    continue
                nxt = latest
            order.append(o.op_id)
            if search(mask | 1 << j, nxt):
                return True
            order.pop()
        seen.add((mask, latest))
        return False

    ok = search(0, (0,) * n)
    if ok:
        return Verdict(True, witness=list(order), method="exhaustive", operations=m)
    return Verdict(False, certificate={"reason": "no valid order", "ops": [o.op_id for o in ops]}, method="exhaustive", operations=m)


# -- polynomial single-writer checker ----------------------------------------------------------
def check_polynomial(events: Sequence[HistoryEvent], n: int, initial: Optional[Sequence[Any]] = None) -> Verdict:
    prep = _prepare(events, n, initial)
    ops = prep.ops
    m = len(ops)
    if prep.error is not None:
        return Verdict(False, certificate=prep.error, method="polynomial", operations=m)
    snaps = [o for o in ops if o.kind == "snapshot"]
    vec = prep.vectors
    # returned vectors must be pairwise comparable
    ordered = sorted(snaps, key=lambda s: (sum(vec[s.op_id]), s.inv))
    for a, b in zip(ordered, ordered[1:]):
        if not vc_leq(vec[a.op_id], vec[b.op_id]):
            return Verdict(
                False,
                certificate={"reason": "incomparable snapshots", "ops": [a.op_id, b.op_id], "vectors": [vec[a.op_id], vec[b.op_id]]},
                method="polynomial",
                operations=m,
            )
    pos = {o.op_id: j for j, o in enumerate(ops)}
    succ: List[List[int]] = [[] for _ in range(m)]
    # real-time order; ops are sorted by invocation so only later ops can follow
    invs = [o.inv for o in ops]
    for a in range(m):
        start = bisect.bisect_right(invs, ops[a].resp)
        succ[a].extend(range(start, m))
    # reads-from: writes up to the returned index precede, later writes follow
    for s in snaps:
        js = pos[s.op_id]
        for k, ws in prep.writes_by_node.items():
            cut = vec[s.op_id][k]
            for idx, w in enumerate(ws, start=1):
                if idx <= cut:
                    succ[pos[w.op_id]].append(js)
                else:
                    succ[js].append(pos[w.op_id])
    indeg = [0] * m
    for a in range(m):
        for b in succ[a]:
            indeg[b] += 1
    order: List[int] = []
    heap = [(ops[a].inv, ops[a].op_id, a) for a in range(m) if indeg[a] == 0]
    heapq.heapify(heap)
    while heap:
        _, _, a = heapq.heappop(heap)
        order.append(a)
        for b in succ[a]:
            indeg[b] -= 1
            if indeg[b] == 0:
                heapq.heappush(heap, (ops[b].inv, ops[b].op_id, b))
    if len(order) == m:
        return Verdict(True, witness=[ops[a].op_id for a in order], method="polynomial", operations=m)
    stuck = sorted(ops[a].op_id for a in range(m) if indeg[a] > 0)
    return Verdict(False, certificate={"reason": "cyclic precedence", "ops": stuck}, method="polynomial", operations=m)


def check_linearizable(
    events: Sequence[HistoryEvent], n: int, initial: Optional[Sequence[Any]] = None, method: str = "auto"
) -> Verdict:
    if isinstance(events, History):
        events = events.events
    if method == "exhaustive":
        return check_exhaustive(events, n, initial)
    if method == "polynomial":
        return check_polynomial(events, n, initial)
    if method != "auto":
        raise ValueError(f"unknown method {method!r}")
    poly = check_polynomial(events, n, initial)
    if poly.operations <= 10:
        exh = check_exhaustive(events, n, initial)
        if exh.linearizable != poly.linearizable:
            raise AssertionError("linearizability checkers disagree")
    return poly


def verdict_json(v: Verdict) -> str:
    return json.dumps(v.to_json(), sort_keys=True)


def _value_out(op: str, kind: str, value: Any) -> Any:
    if value is None:
        return None
    if op == "write":
        return value.hex()
    return [None if e is BOTTOM else [e.value.hex(), e.ts] for e in value]


def _value_in(op: str, kind: str, value: Any) -> Any:
    if value is None:
        return None
    if op == "write":
        return bytes.fromhex(value)
    return tuple(BOTTOM if e is None else Entry(bytes.fromhex(e[0]), int(e[1])) for e in value)


def history_to_json(events: Iterable[HistoryEvent]) -> List[Dict[str, Any]]:
    """Plain-JSON form of an event list; byte values are hex strings."""
    return [
        {
            "node": e.node,
            "op": e.op,
            "kind": e.kind,
            "step": e.step,
            "value": _value_out(e.op, e.kind, e.value),
            "op_id": e.op_id,
        }
        for e in events
    ]


def history_from_json(rows: Iterable[Dict[str, Any]]) -> History:
    """Rebuild (and re-validate) a history from ``history_to_json`` output."""
    h = History()
    for r in rows:
        h.record(
            HistoryEvent(
                int(r["node"]),
                r["op"],
                r["kind"],
                int(r["step"]),
                _value_in(r["op"], r["kind"], r.get("value")),
                int(r.get("op_id", -1)),
            )
        )
    return h


# -- consistency audit -----------------------------------------------------------------------
def _arrays_in(payload: Dict[str, Any]):
    # SAVE items carry finished snapshot results; like stored results they are
    # historical and may hold any earlier timestamps, so they are not audited
    if "reg" in payload:
        yield payload["reg"]


def audit_consistency(world: Any) -> List[str]:
    """Return every violated index-consistency condition; empty iff consistent.

    Only live nodes are audited, both as holders of state and as owners of
    indices: a crashed node's counters are frozen and cannot be repaired.
    """
    nodes = world.nodes
    n = world.n
    live = list(world.alive)
    out: List[str] = []
    ts = [nd.ts for nd in nodes]
    ssn = [nd.ssn for nd in nodes]
    terminating = hasattr(nodes[0], "pnd")
    sns = [nd.sns for nd in nodes] if terminating else None

    def check_array(arr, where: str) -> None:
        if len(arr) != n:
            out.append(f"{where}: array of length {len(arr)}")
            return
        for k, e in enumerate(arr):
            if live[k] and e.ts > ts[k]:
                out.append(f"{where}: ts {e.ts} for node {k} exceeds {ts[k]}")

    for j, nd in enumerate(nodes):
        if not live[j]:
            continue
        check_array(nd.reg, f"reg@{j}")
        for kind, store in nd.acks.items():
            for sender, p in store.items():
                for arr in _arrays_in(p):
                    check_array(arr, f"{kind} from {sender} recorded@{j}")
                if kind == "SNAPSHOTack" and p.get("ssn", 0) > ssn[j]:
                    out.append(f"SNAPSHOTack recorded@{j}: ssn {p['ssn']} exceeds {ssn[j]}")
                if kind == "SAVEack":
                    for k, s in p.get("pairs", ()):
                        if live[k] and s > sns[k]:
                            out.append(f"SAVEack recorded@{j}: sns {s} for node {k} exceeds {sns[k]}")
        if terminating:
            VC = vector_clock(nd.reg)
            for k, t in enumerate(nd.pnd):
                if not live[k]:
                    continue
                if t.sns > sns[k]:
                    out.append(f"pnd@{j}[{k}]: sns {t.sns} exceeds {sns[k]}")
                if t.sns > nodes[k].pnd[k].sns:
                    out.append(f"pnd@{j}[{k}]: sns {t.sns} ahead of owner record {nodes[k].pnd[k].sns}")
                if t.vc is not None and not vc_leq(t.vc, VC):
                    out.append(f"pnd@{j}[{k}]: vc {t.vc} not below {VC}")
            if nd.sns != nd.pnd[j].sns:
                out.append(f"node {j}: sns {nd.sns} differs from own task index {nd.pnd[j].sns}")

    for env in world.in_transit():
        p = env.payload
        where = f"{env.kind} {env.src}->{env.dst}"
        if not live[env.dst]:
            continue
        if env.kind == "GOSSIP":
            e = p["entry"]
            if e.ts > ts[env.dst]:
                out.append(f"{where}: ts {e.ts} exceeds {ts[env.dst]}")
            if terminating and p.get("sns", 0) > sns[env.dst]:
                out.append(f"{where}: sns {p['sns']} exceeds {sns[env.dst]}")
            continue
        for arr in _arrays_in(p):
            check_array(arr, where)
        if env.kind == "SNAPSHOT" and live[env.src] and p["ssn"] > ssn[env.src]:
            out.append(f"{where}: ssn {p['ssn']} exceeds {ssn[env.src]}")
        if env.kind == "SNAPSHOTack" and p["ssn"] > ssn[env.dst]:
            out.append(f"{where}: ssn {p['ssn']} exceeds {ssn[env.dst]}")
        if terminating:
            pairs = []
            if env.kind == "SNAPSHOT":
                pairs = [(k, s) for k, s, _ in p["tasks"]]
            elif env.kind == "SAVE":
                pairs = [(k, s) for k, s, _ in p["items"]]
            elif env.kind == "SAVEack":
                pairs = list(p["pairs"])
            for k, s in pairs:
                if live[k] and s > sns[k]:
                    out.append(f"{where}: sns {s} for node {k} exceeds {sns[k]}")
    return out


# -- asynchronous cycles ---------------------------------------------------------------------------
@dataclass
class CycleTrace:
    boundaries: List[int]
    incomplete_tail: bool = True

    def cycle_of(self, step: float) -> int:
        """1-based index of the cycle containing ``step`` (len+1 for the open tail)."""
        return bisect.bisect_left(self.boundaries, step) + 1

    def __len__(self) -> int:
        return len(self.boundaries)


def count_async_cycles(trace: Sequence[tuple], n: int, gossip: bool = True, start: int = 0) -> CycleTrace:
    """Greedily cut the trace into minimal windows of complete iterations.

    A window starting at ``w`` ends once every node alive at ``w`` has begun an
    iteration at or after ``w`` and finished it, including every round that
    iteration broadcast, and (when ``gossip``) once a gossip message from it
    has arrived at each peer alive at ``w`` after that iteration began.
    """
    iters: List[List[Tuple[int, int, tuple]]] = [[] for _ in range(n)]
    closes: Dict[int, int] = {}
    arrivals: Dict[Tuple[int, int], List[int]] = {}
    crash_events: List[Tuple[int, int, str]] = []
    last = 0
    for rec in trace:
        step, ev, node = rec[0], rec[1], rec[2]
        last = step
        if ev == "iter":
            iters[node].append((rec[3], step, rec[4]))
        elif ev == "close":
            closes.setdefault(rec[3], step)
        elif ev == "gossip":
            arrivals.setdefault((rec[3], node), []).append(step)
        elif ev in ("crash", "resume"):
            crash_events.append((step, node, ev))

    begins = [[b for b, _, _ in lst] for lst in iters]
    eff_end: List[List[float]] = []
    for lst in iters:
        row = []
        for b, e, rids in lst:
            t = float(e)
            for r in rids:
                t = max(t, closes.get(r, INF))
            row.append(t)
        eff_end.append(row)

    def alive_at(i: int, s: int) -> bool:
        state = True
        for step, node, ev in crash_events:
            if step > s:
                break
            if node == i:
                state = ev == "resume"
        return state

    def next_crash(i: int, s: int) -> float:
        for step, node, ev in crash_events:
            if step >= s and node == i and ev == "crash":
                return step
        return INF

    boundaries: List[int] = []
    w = start
    while True:
        live = [i for i in range(n) if alive_at(i, w)]
        if not live:
            break
        bound = float(w)
        for i in live:
            c = next_crash(i, w)
            j = bisect.bisect_left(begins[i], w)
            t = eff_end[i][j] if j < len(begins[i]) else INF
            if gossip and t < INF:
                b = begins[i][j]
                for p in live:
                    if p == i:
                        continue
                    arr = arrivals.get((i, p), [])
                    a = bisect.bisect_left(arr, b)
                    t = max(t, arr[a] if a < len(arr) else min(INF, next_crash(p, w)))
            bound = max(bound, min(t, c))
        if bound == INF or bound > last:
            break
        boundaries.append(int(bound))
        w = int(bound) + 1
    return CycleTrace(boundaries)
