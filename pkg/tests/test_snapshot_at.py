from __future__ import annotations

from helpers import finish, world

from snapstab.core import BOTTOM, Entry, bottom_array, vc_leq, vector_clock
from snapstab.harness import Scenario, Workload, measure_messages, run_scenario
from snapstab.net_sim import Envelope
from snapstab.snapshot_at import IDLE_TASK, PendingTask, delta_set


def E(v, ts):
    return Entry(v, ts)


def at(n=3, seed=0, delta=1):
    return world("at_selfstab", n=n, seed=seed, delta=delta)


# -- Δ -------------------------------------------------------------------------------------
def brute_delta(i, pnd, VC, delta):
    """Set-builder oracle written straight from the eligibility rule."""
    out = set()
    for k, (sns, vc, fnl) in enumerate(pnd):
        if fnl is not None:
            continue
        cond = delta == 0 and sns > 0
        if vc is not None:
            cond = cond or delta <= sum(max(a - b, 0) for a, b in zip(VC, vc))
        if cond:
            out.add((k, sns, vc))
    if pnd[i].sns > 0 and pnd[i].fnl is None:
        out.add((i, pnd[i].sns, pnd[i].vc))
    return out


def test_delta_set_empty_when_all_finished():
    pnd = [PendingTask(2, None, bottom_array(2)), PendingTask(0, None, bottom_array(2))]
    assert delta_set(0, pnd, bottom_array(2), 0) == []


def test_delta_set_zero_delta_example():
    pnd = [PendingTask(1, None, None), PendingTask(0, None, None)]
    assert brute_delta(0, pnd, (0, 0), 0) == {(0, 1, None)}
    assert delta_set(0, pnd, bottom_array(2), 0) == [(0, 1, None)]


def test_delta_set_threshold_example():
    reg = (E(b"a", 2), E(b"b", 3))
    pnd = [IDLE_TASK, PendingTask(3, (1, 1), None)]
    assert brute_delta(0, pnd, vector_clock(reg), 2) == {(1, 3, (1, 1))}
    assert (1, 3, (1, 1)) in delta_set(0, pnd, reg, 2)
    assert delta_set(0, pnd, reg, 4) == []


def test_delta_set_matches_oracle_randomly():
    import random

    rnd = random.Random(0)
    for _ in range(500):
        n = 3
        reg = tuple(BOTTOM if rnd.random() < 0.3 else E(b"v", rnd.randint(1, 6)) for _ in range(n))
        pnd = [
            PendingTask(
                rnd.randint(0, 3),
                None if rnd.random() < 0.5 else tuple(rnd.randint(0, 6) for _ in range(n)),
                None if rnd.random() < 0.6 else bottom_array(n),
            )
            for _ in range(n)
        ]
        i, d = rnd.randrange(n), rnd.randint(0, 4)
        assert set(delta_set(i, pnd, reg, d)) == brute_delta(i, pnd, vector_clock(reg), d)


# -- write and snapshot -----------------------------------------------------------------------
def test_parked_write_clears_after_base_write():
    w = at(seed=1)
    a = w.nodes[0]
    a.invoke_write(b"a")
    assert a.write_pending == b"a"
    assert finish(w, a) == ("write", None)
    assert a.write_pending is None and a.reg[0] == E(b"a", 1)


def test_snapshot_sets_new_sns():
    w = at()
    a = w.nodes[2]
    a.invoke_snapshot()
    assert a.sns == 1 and a.pnd[2] == PendingTask(1, None, None)
    _, res = finish(w, a)
    assert res == bottom_array(3)
    assert a.pnd[2].fnl == res


def test_two_concurrent_writers_linearizable():
    sc = Scenario(algorithm="at_selfstab", n=3, seed=3, workload=Workload(ops={0: ["write"] * 3, 1: ["write"] * 3, 2: ["snapshot"] * 2}))
    r = run_scenario(sc)
    assert r["workload_done"] and r["verdict"]["linearizable"]


def lone_snapshot_messages(n, delta, seed=0):
    sc = Scenario(algorithm="at_selfstab", n=n, delta=delta, seed=seed, workload=Workload(ops={0: ["snapshot"]}), run_past_workload=3000)
    (m,) = measure_messages(run_scenario(sc), "snapshot")
    return m


def test_zero_delta_every_node_participates():
    m = lone_snapshot_messages(3, 0)
    # helpers broadcast their own SNAPSHOT rounds, so requests exceed one broadcast
    assert m["SNAPSHOT"] > 3


def test_large_delta_only_initiator_queries():
    m = lone_snapshot_messages(3, 100)
    assert m["SNAPSHOT"] <= 2 * 3 and m.get("SAVE", 0) <= 3


# -- server handlers ---------------------------------------------------------------------------
def last(w, src, dst):
    return w.main[(src, dst)].buffer


def test_on_snapshot_adopts_unknown_tasks():
    w = at()
    s = w.nodes[1]
    s.on_message(Envelope("SNAPSHOT", 0, 1, {"tasks": ((0, 4, None), (2, 1, (0, 0, 0))), "reg": bottom_array(3), "ssn": 3}))
    assert s.pnd[0] == PendingTask(4, None, None) and s.pnd[2] == PendingTask(1, (0, 0, 0), None)
    (ack,) = last(w, 1, 0)
    assert ack.kind == "SNAPSHOTack" and ack.payload["ssn"] == 3


def test_on_snapshot_stale_task_untouched():
    w = at()
    s = w.nodes[1]
    s.pnd[0] = PendingTask(5, (1, 0, 0), None)
    s.on_message(Envelope("SNAPSHOT", 0, 1, {"tasks": ((0, 4, None),), "reg": bottom_array(3), "ssn": 1}))
    assert s.pnd[0] == PendingTask(5, (1, 0, 0), None)


def test_on_snapshot_piggybacks_save_when_result_known():
    w = at()
    s = w.nodes[1]
    res = (E(b"a", 1), BOTTOM, BOTTOM)
    s.pnd[0] = PendingTask(4, None, res)
    s.on_message(Envelope("SNAPSHOT", 0, 1, {"tasks": ((0, 4, None),), "reg": bottom_array(3), "ssn": 1}, rid=9))
    ack, save = last(w, 1, 0)
    assert (ack.kind, save.kind) == ("SNAPSHOTack", "SAVE")
    assert save.payload["items"] == ((0, 4, res),) and save.rid == ack.rid == 9


def test_on_save_rule():
    w = at()
    s = w.nodes[1]
    r1, r2 = (E(b"a", 1), BOTTOM, BOTTOM), (E(b"b", 2), BOTTOM, BOTTOM)
    s.pnd[0] = PendingTask(2, (0, 0, 0), None)
    s.on_message(Envelope("SAVE", 0, 1, {"items": ((0, 3, r1),)}))  # newer sns adopted, vc kept
    assert s.pnd[0] == PendingTask(3, (0, 0, 0), r1)
    s.on_message(Envelope("SAVE", 0, 1, {"items": ((0, 3, r2),)}))  # equal sns, fnl set: untouched
    assert s.pnd[0].fnl == r1
    s.pnd[2] = PendingTask(1, None, None)
    s.on_message(Envelope("SAVE", 0, 1, {"items": ((2, 1, r2),)}))  # equal sns, fnl unset: filled
    assert s.pnd[2] == PendingTask(1, None, r2)
    acks = [e for e in last(w, 1, 0) if e.kind == "SAVEack"]
    assert [a.payload["pairs"] for a in acks] == [((0, 3),), ((0, 3),), ((2, 1),)]


def test_save_to_self_sets_result_immediately():
    w = at()
    s = w.nodes[0]
    s.invoke_snapshot()
    res = bottom_array(3)
    s.send("SAVE", 0, {"items": ((0, 1, res),)})
    assert s.pnd[0].fnl == res


def test_gossip_sns_residue_realigns_own_task():
    w = at()
    s = w.nodes[1]
    s.on_message(Envelope("GOSSIP", 0, 1, {"entry": BOTTOM, "sns": 900}))
    assert s.sns == 900 and s.ts == 0 and s.reg[1] is BOTTOM
    s.tick()
    assert s.pnd[1] == PendingTask(900, None, None)


def test_housekeeping_resets_bad_vc():
    w = at()
    s = w.nodes[0]
    s.reg = (E(b"a", 2), E(b"b", 3), BOTTOM)
    s.ts = 2
    s.pnd[1] = PendingTask(1, (9, 9, 0), bottom_array(3))
    s.housekeeping()
    assert s.pnd[1].vc is None


def test_housekeeping_realigns_sns():
    w = at()
    s = w.nodes[0]
    s.sns = 5
    s.pnd[0] = PendingTask(3, None, None)
    s.housekeeping()
    assert s.pnd[0] == PendingTask(5, None, None)


def test_consistent_idle_tick_only_gossips():
    w = at()
    s = w.nodes[0]
    s.tick()
    assert w.gossip_sends == 2 and w.sends_total == 2


def vc_samples(seed):
    w = at(seed=seed, delta=1000)
    snap, writer = w.nodes[0], w.nodes[1]
    writer.invoke_write(b"first")
    finish(w, writer)
    snap.invoke_snapshot()
    start_vc = vector_clock(snap.reg)
    samples, prev_vc, k = 0, None, 0
    for _ in range(200_000):
        if writer.idle():
            k += 1
            writer.invoke_write(b"w%06d" % k)
        w.step()
        writer.poll()
        vc = snap.pnd[0].vc
        if vc is not None and vc != prev_vc:
            samples += 1
            # sampled after a completed query round, so never older than the task's start
            assert vc_leq(start_vc, vc)
        prev_vc = vc
        if snap.poll() is not None:
            return samples
    raise AssertionError("snapshot did not terminate")


def test_vc_sampled_at_most_once_per_task_under_writes():
    counts = [vc_samples(seed) for seed in range(15)]
    assert max(counts) == 1
