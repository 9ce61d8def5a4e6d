from __future__ import annotations

from helpers import finish, world

from snapstab.core import BOTTOM, Entry, bottom_array
from snapstab.harness import Scenario, Workload, measure_messages, run_scenario
from snapstab.net_sim import Envelope


def E(v, ts):
    return Entry(v, ts)


# -- write ---------------------------------------------------------------------------------
def test_fresh_write_reaches_a_majority():
    w = world(seed=1)
    a = w.nodes[0]
    a.invoke_write(b"a")
    assert finish(w, a) == ("write", None)
    assert a.reg[0] == E(b"a", 1) and a.ts == 1
    holders = sum(1 for nd in w.nodes if nd.reg[0] == E(b"a", 1))
    assert holders >= 2


def test_sequential_writes_supersede():
    w = world(seed=2)
    a = w.nodes[0]
    a.invoke_write(b"a")
    finish(w, a)
    a.invoke_write(b"b")
    finish(w, a)
    assert a.ts == 2
    w.run(500)
    assert all(nd.reg[0] == E(b"b", 2) for nd in w.nodes)


def test_corrupted_ts_next_write_uses_successor():
    w = world(seed=3)
    a = w.nodes[0]
    a.ts = 500
    a.invoke_write(b"a")
    finish(w, a)
    assert a.reg[0] == E(b"a", 501)


def test_write_message_count_fault_free():
    sc = Scenario(n=5, seed=1, workload=Workload(ops={0: ["write"]}), run_past_workload=2000)
    r = run_scenario(sc)
    (m,) = measure_messages(r, "write")
    assert m == {"WRITE": 5, "WRITEack": 5}


# -- snapshot ----------------------------------------------------------------------------------
def test_quiescent_snapshot_one_or_two_iterations():
    for seed in range(10):
        w = world(seed=seed)
        a = w.nodes[1]
        a.invoke_snapshot()
        kind, res = finish(w, a)
        assert res == bottom_array(3)
        assert a.ssn in (1, 2)


def test_snapshot_between_two_writes():
    w = world(seed=4)
    a, b = w.nodes[0], w.nodes[1]
    a.invoke_write(b"x1")
    finish(w, a)
    b.invoke_snapshot()
    _, res = finish(w, b)
    a.invoke_write(b"x2")
    finish(w, a)
    assert res[0] == E(b"x1", 1)


def test_two_initiators_match_their_own_ssn():
    w = world(seed=5)
    a, b = w.nodes[0], w.nodes[1]
    a.ssn, b.ssn = 10, 20
    a.invoke_snapshot()
    b.invoke_snapshot()
    done = {}
    for _ in range(20_000):
        w.step()
        for nd in (a, b):
            res = nd.poll()
            if res is not None:
                done[nd.i] = res
        for nd in (a, b):
            assert all(p["ssn"] == nd.ssn for p in nd.acks["SNAPSHOTack"].values())
        if len(done) == 2:
            break
    assert set(done) == {0, 1}


# -- server handlers ---------------------------------------------------------------------------
def sent(w, src, dst):
    return w.main[(src, dst)].buffer[-1]


def test_on_write_same_reg_replies_with_reg():
    w = world()
    s = w.nodes[1]
    s.reg = (E(b"a", 1), BOTTOM, BOTTOM)
    s.on_message(Envelope("WRITE", 0, 1, {"reg": s.reg}, rid=4))
    ack = sent(w, 1, 0)
    assert ack.kind == "WRITEack" and ack.payload["reg"] == s.reg and ack.rid == 4


def test_on_write_adopts_newer_entry():
    w = world()
    s = w.nodes[1]
    s.on_message(Envelope("WRITE", 0, 1, {"reg": (E(b"a", 2), BOTTOM, BOTTOM)}))
    assert s.reg[0] == E(b"a", 2)


def test_on_write_stale_still_replies_with_newer_state():
    w = world()
    s = w.nodes[1]
    s.reg = (E(b"a", 5), E(b"b", 3), BOTTOM)
    s.on_message(Envelope("WRITE", 0, 1, {"reg": (E(b"z", 1), BOTTOM, BOTTOM)}))
    assert sent(w, 1, 0).payload["reg"] == (E(b"a", 5), E(b"b", 3), BOTTOM)


def test_on_snapshot_echoes_ssn():
    w = world()
    s = w.nodes[2]
    s.on_message(Envelope("SNAPSHOT", 0, 2, {"reg": bottom_array(3), "ssn": 999}))
    ack = sent(w, 2, 0)
    assert ack.kind == "SNAPSHOTack" and ack.payload["ssn"] == 999


# -- gossip and housekeeping ---------------------------------------------------------------------
def test_gossip_stale_and_bottom_are_no_ops():
    w = world()
    s = w.nodes[1]
    s.reg = (BOTTOM, E(b"b", 4), BOTTOM)
    s.ts = 4
    for entry in (E(b"old", 2), BOTTOM):
        s.on_message(Envelope("GOSSIP", 0, 1, {"entry": entry}))
        assert s.reg[1] == E(b"b", 4) and s.ts == 4


def test_gossip_residue_raises_ts():
    w = world(seed=7)
    s = w.nodes[1]
    s.ts = 3
    s.on_message(Envelope("GOSSIP", 0, 1, {"entry": E(b"junk", 500)}))
    assert s.ts == 500
    s.invoke_write(b"v")
    finish(w, s)
    assert s.reg[1] == E(b"v", 501)


def test_baseline_ignores_gossip_and_skips_repair():
    w = world("nb_baseline")
    s = w.nodes[1]
    s.on_message(Envelope("GOSSIP", 0, 1, {"entry": E(b"junk", 500)}))
    assert s.ts == 0 and s.reg[1] is BOTTOM
    s.reg = (BOTTOM, E(b"x", 9), BOTTOM)
    s.tick()
    assert s.ts == 0
    assert w.gossip_sends == 0


def test_housekeeping_repairs_ts_and_drops_stale_acks():
    w = world()
    s = w.nodes[0]
    s.reg = (E(b"x", 9), BOTTOM, BOTTOM)
    s.acks["SNAPSHOTack"][1] = {"reg": bottom_array(3), "ssn": 77}
    s.tick()
    assert s.ts == 9 and not s.acks["SNAPSHOTack"]
    assert w.gossip_sends == 2


def test_consistent_tick_only_gossips():
    w = world()
    s = w.nodes[0]
    before = (s.ts, s.ssn, s.reg)
    s.tick()
    assert (s.ts, s.ssn, s.reg) == before
    assert w.gossip_sends == 2 and w.sends_total == 2
