"""Acceptor state machine: the fixed, in-place distributed storage cell.

One acceptor hosts any number of independent register cells keyed by name,
each created on first touch with the initial state ((0,nil), empty, (0,nil),
nil). The machine processes exactly one message at a time; distinct
acceptors share nothing.

Stale prepares and votes produce explicit Nacks carrying the current
promise so proposers can retry without waiting for a timeout.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

from .core import (
    EMPTY,
    MUT_VOTE_BELOW_PROMISE,
    Config,
    Ordering,
    ProcessId,
    ReqID,
    Round,
    ROUND_ZERO,
    Value,
    round_compare,
)
from .messages import Ack, Learned, Nack, PaxosPrep, Prepare, ReqKind, Vote, Voted

Send = Tuple[ProcessId, object]


@dataclass(frozen=True)
class AcceptorState:
    """(r_ack, val, r_voted, req): everything an acceptor stores per register.

    r_ack never decreases; (val, r_voted, req) change only together, when a
    vote is cast.
    """

    r_ack: Round = ROUND_ZERO
    val: Value = EMPTY
    r_voted: Round = ROUND_ZERO
    req: Optional[ReqID] = None


INITIAL_STATE = AcceptorState()


class Acceptor:
    def __init__(self, pid: ProcessId, config: Config):
        self.pid = pid
        self.config = config
        self.cells: Dict[bytes, AcceptorState] = {}

    # -- state access -------------------------------------------------------

    def cell(self, key: bytes) -> AcceptorState:
        return self.cells.get(key, INITIAL_STATE)

    def state_hash(self) -> str:
        """Digest over all cells; used to verify reads leave no trace."""
        h = hashlib.sha256()
        for key in sorted(self.cells):
            h.update(key)
            h.update(repr(self.cells[key]).encode())
        return h.hexdigest()

    def snapshot(self) -> Dict[bytes, AcceptorState]:
        return dict(self.cells)

    def restore(self, cells: Dict[bytes, AcceptorState]) -> None:
        self.cells = dict(cells)

    # -- message handling ---------------------------------------------------

    def handle(self, msg) -> List[Send]:
        if isinstance(msg, Prepare):
            return self.handle_prepare(msg)
        if isinstance(msg, PaxosPrep):
            return self.handle_prepare_explicit(msg)
        if isinstance(msg, Vote):
            return self.handle_vote(msg)
        return []

    def handle_prepare(self, msg: Prepare) -> List[Send]:
        state = self.cell(msg.key)
        if msg.kind is ReqKind.WRITE:
            state = replace(state, r_ack=Round(state.r_ack.n + 1, msg.src))
            self.cells[msg.key] = state
            incremented = True
        else:
            # Reads leave the cell untouched so they cannot interfere with
            # concurrent requests.
            incremented = False
        return [(msg.src, self._ack(msg.key, msg.ticket, state, incremented))]

    def handle_prepare_explicit(self, msg: PaxosPrep) -> List[Send]:
        state = self.cell(msg.key)
        if round_compare(state.r_ack, msg.round) is Ordering.LESS:
            state = replace(state, r_ack=msg.round)
            self.cells[msg.key] = state
            return [(msg.src, self._ack(msg.key, msg.ticket, state, True))]
        # Incomparable rounds are rejected too: acknowledging them would
        # allow two proposals to share a round number.
        return [(msg.src, Nack(msg.key, self.pid, msg.ticket, state.r_ack))]

    def handle_vote(self, msg: Vote) -> List[Send]:
        state = self.cell(msg.key)
        accept = round_compare(msg.round, state.r_ack) is Ordering.EQUAL
        if MUT_VOTE_BELOW_PROMISE in self.config.mutations:
            accept = True
        if not accept:
            return [(msg.src, Nack(msg.key, self.pid, msg.ticket, state.r_ack))]

        assert round_compare(msg.round, state.r_ack) is not Ordering.LESS or (
            MUT_VOTE_BELOW_PROMISE in self.config.mutations
        ), "acceptor must never vote below its promise"

        r_ack = state.r_ack
        if self.config.fast_writes:
            # Behave as if a Prepare from the same proposer arrived right
            # after voting, so it may skip phase 1 next time.
            r_ack = Round(msg.round.n + 1, msg.round.id)
        self.cells[msg.key] = AcceptorState(
            r_ack=r_ack, val=msg.value, r_voted=msg.round, req=msg.req_cur
        )
        out: List[Send] = [
            (msg.src, Voted(msg.key, self.pid, msg.ticket, msg.round, msg.value))
        ]
        if msg.req_prev is not None:
            out.append((msg.req_prev.pid, Learned(msg.key, self.pid, msg.req_prev)))
        return out

    def _ack(self, key: bytes, ticket, state: AcceptorState, incremented: bool) -> Ack:
        return Ack(
            key=key,
            src=self.pid,
            ticket=ticket,
            r_ack=state.r_ack,
            val=state.val,
            r_voted=state.r_voted,
            req=state.req,
            incremented=incremented,
        )
