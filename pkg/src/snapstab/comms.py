"""Gossip and retransmit-until-majority request/reply rounds, embedded in each node.

A round is a generator: it broadcasts its request (own copy handled locally),
yields control back to the scheduler, and on every resumption checks whether
enough matching replies have been recorded; if not it re-broadcasts. Replies
are recorded per sender in ``node.acks[reply_kind]`` only while a round of
that reply kind is active and only if they satisfy the round's predicate.
The record is wiped when the round returns.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Generator, Optional, Tuple

from .net_sim import REPLY_OF, Envelope


class ContractViolation(RuntimeError):
    """A node tried to run two request/reply rounds at once."""


def majority(n: int) -> int:
    return n // 2 + 1


@dataclass
class QuorumRound:
    rid: int
    kind: str
    reply_kind: str
    payload: Callable[[], Dict[str, Any]]
    predicate: Callable[[Dict[str, Any]], bool]
    until: Optional[Callable[[], bool]] = None
    ops: Callable[[], Tuple[int, ...]] = tuple
    opened: int = 0
    broadcasts: int = 0
    matched: Dict[int, Any] = field(default_factory=dict)


class CommsNode:
    """Base class holding the communication sub-state of one node."""

    KINDS: Tuple[str, ...] = ()
    STATE_FIELDS: Tuple[str, ...] = ()

    def __init__(self, i: int, n: int, world: Any):
        self.i = i
        self.n = n
        self.world = world
        self.acks: Dict[str, Dict[int, Any]] = {k: {} for k in REPLY_OF.values() if k in self.KINDS}
        self.round: Optional[QuorumRound] = None
        self.iter_rids: set = set()

    # -- sending ----------------------------------------------------------------
    def send(self, kind: str, dst: int, payload: Dict[str, Any], rid: int = 0, ops: Tuple[int, ...] = ()) -> None:
        self.world.send(Envelope(kind, self.i, dst, payload, rid, ops))

    def broadcast(self, kind: str, payload: Dict[str, Any], rid: int, ops: Tuple[int, ...] = ()) -> None:
        # own copy first, so the initiator counts its own reply like any server
        order = [self.i] + [k for k in range(self.n) if k != self.i]
        for k in order:
            self.send(kind, k, payload, rid, ops)

    def gossip_tick(self) -> None:
        for k in range(self.n):
            if k != self.i:
                self.send("GOSSIP", k, self.gossip_payload(k))

    def gossip_payload(self, k: int) -> Dict[str, Any]:
        raise NotImplementedError

    # -- rounds -------------------------------------------------------------------
    def comms_tick(self) -> None:
        """Drop recorded replies that no active round could use."""
        rnd = self.round
        for kind, store in self.acks.items():
            if not store:
                continue
            if rnd is None or rnd.reply_kind != kind:
                store.clear()
            else:
                keep = self._matched(rnd)
                if len(keep) != len(store):
                    store.clear()
                    store.update(keep)

    def on_reply(self, env: Envelope) -> None:
        rnd = self.round
        if rnd is None or rnd.reply_kind != env.kind:
            return
        try:
            ok = rnd.predicate(env.payload)
        except (KeyError, TypeError, ValueError):
            ok = False
        if ok:
            self.acks[env.kind][env.src] = env.payload

    def _matched(self, rnd: QuorumRound) -> Dict[int, Any]:
        out = {}
        for sender, payload in self.acks[rnd.reply_kind].items():
            try:
                if rnd.predicate(payload):
                    out[sender] = payload
            except (KeyError, TypeError, ValueError):
                pass
        return out

    def quorum(
        self,
        kind: str,
        payload: Callable[[], Dict[str, Any]],
        predicate: Callable[[Dict[str, Any]], bool],
        until: Optional[Callable[[], bool]] = None,
        ops: Callable[[], Tuple[int, ...]] = tuple,
    ) -> Generator[None, None, Optional[Dict[int, Any]]]:
        """Broadcast ``kind`` until a majority of matching replies (or ``until()``).

        Returns the matching replies keyed by sender, or ``None`` when the
        alternative exit condition fired first.
        """
        if self.round is not None:
            raise ContractViolation(f"node {self.i} already runs round {self.round.rid}")
        world = self.world
        rnd = QuorumRound(world.new_rid(), kind, REPLY_OF[kind], payload, predicate, until, ops, world.step_index)
        self.round = rnd
        need = majority(self.n)
        result: Optional[Dict[int, Any]] = None
        try:
            while True:
                if until is not None and until():
                    break
                matched = self._matched(rnd)
                if rnd.broadcasts and len(matched) >= need:
                    result = matched
                    break
                self.broadcast(kind, payload(), rnd.rid, ops())
                rnd.broadcasts += 1
                self.iter_rids.add(rnd.rid)
                matched = self._matched(rnd)
                if len(matched) >= need:
                    result = matched
                    break
                yield
        finally:
            self.acks[rnd.reply_kind].clear()
            self.round = None
            world.record("close", self.i, rnd.rid)
        return result

    # -- dispatch -------------------------------------------------------------------
    def on_message(self, env: Envelope) -> None:
        handler = getattr(self, "on_" + env.kind, None)
        if handler is None or env.kind not in self.KINDS:
            return  # kinds foreign to this protocol are junk
        try:
            handler(env)
        except (KeyError, TypeError, ValueError, IndexError):
            # malformed payload left over from corruption
            return
