"""Proposer/learner state machine for all three register modes.

The proposer drives the two-phase protocol for each admitted client
request and acts as that request's sole learner. It is a logical
single-threaded machine: callers feed it one message (or timer, or request
admission) at a time and apply the returned effects.

Effects are descriptions, not actions: `Send` messages, `Reply` to a
client, `SetTimer` for a wakeup. The transport (simulator or socket
server) interprets them.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .core import (
    EMPTY,
    MUT_DROP_LEARNED,
    MUT_REUSE_ROUND,
    MUT_SKIP_WRITE_THROUGH,
    MUT_SUB_QUORUM,
    Config,
    Mode,
    ProcessId,
    ReqID,
    Round,
    UpdateCommand,
    Value,
    apply_command,
    next_explicit_round,
)
from .messages import (
    Ack,
    Learned,
    Nack,
    PaxosPrep,
    Prepare,
    ReqKind,
    Status,
    Ticket,
    Vote,
    Voted,
)
from .quorum import (
    EmptyConfirmed,
    Fresh,
    INCONSISTENT,
    MustWriteThrough,
    QuorumView,
    ReadyToPropose,
    Retry,
    ValueChosen,
    classify,
    cons,
    find_chosen_in_pool,
    find_empty_in_pool,
    quorum_size,
)

REQUEST_TIMEOUT_TICKS = 60


# ---------------------------------------------------------------------------
# effects


@dataclass(frozen=True)
class Send:
    dst: ProcessId
    msg: object


@dataclass(frozen=True)
class Reply:
    client: object
    status: Status
    value: Value
    client_seq: int


@dataclass(frozen=True)
class SetTimer:
    delay: int
    token: tuple


Effect = Union[Send, Reply, SetTimer]


@dataclass(frozen=True)
class FastToken:
    """Phase-1 skip: a round usable without negotiation, plus the chosen
    base value and its ReqID. Invalidated by any Nack."""

    round: Round
    base: Value
    base_req: Optional[ReqID]


@dataclass
class Proposal:
    round: Round
    value: Value
    req_cur: Optional[ReqID]
    req_prev: Optional[ReqID]
    writethrough: bool = False


@dataclass
class Request:
    """One admitted client request and its protocol attempt state."""

    rid: int
    key: bytes
    kind: ReqKind
    cmds: List[UpdateCommand] = field(default_factory=list)
    clients: List[Tuple[object, int]] = field(default_factory=list)
    reqid: Optional[ReqID] = None
    own_value: Optional[Value] = None  # write-once literal, fixed at admission

    instance: int = 0
    phase: str = "p1"  # p1 | p1x | p2 | done
    acks: Dict[ProcessId, Ack] = field(default_factory=dict)
    pool: List[Ack] = field(default_factory=list)  # reads: replies across attempts
    evidence: List[Round] = field(default_factory=list)
    proposal: Optional[Proposal] = None
    voters: set = field(default_factory=set)
    retry_count: int = 0
    prev_rounds: Optional[tuple] = None
    escalated: bool = False  # read forced onto the write path
    proposed: bool = False  # some instance of this request reached phase 2
    backoff: int = 0
    pending_round: Optional[Round] = None  # explicit round waiting on backoff
    pending_clients: List[Tuple[object, int]] = field(default_factory=list)
    replied: set = field(default_factory=set)  # (client, seq) answered already

    @property
    def done(self) -> bool:
        return self.phase == "done"

    @property
    def read_origin(self) -> bool:
        return self.kind is ReqKind.READ


@dataclass
class ProposerStats:
    submitted: int = 0
    completed: int = 0
    write_throughs: int = 0
    fast_writes: int = 0
    restarts: int = 0
    read_retries: int = 0
    read_escalations: int = 0  # reads forced onto the write-through path


class Proposer:
    def __init__(self, pid: ProcessId, config: Config, rng: Optional[random.Random] = None):
        self.pid = pid
        self.config = config
        self.rng = rng or random.Random(pid)
        self.requests: Dict[int, Request] = {}
        self.next_rid = 0
        self.next_seq = 0  # ReqID counter; never reused, survives recovery
        self.fast: Dict[bytes, FastToken] = {}
        self.learned: Dict[ReqID, bool] = {}
        self.batch_reads: Dict[bytes, List[Tuple[object, int]]] = {}
        self.batch_writes: Dict[bytes, List[Tuple[UpdateCommand, object, int]]] = {}
        self.batch_timer_armed = False
        self.stats = ProposerStats()

    # -- configuration helpers ----------------------------------------------

    @property
    def quorum(self) -> int:
        if MUT_SUB_QUORUM in self.config.mutations:
            return 1
        return quorum_size(self.config.n_acceptors)

    def _acceptors(self) -> range:
        # Acceptors are addressed 0..N-1 by convention; the transport maps
        # pids to endpoints.
        return range(self.config.n_acceptors)

    # -- admission ------------------------------------------------------------

    def submit(
        self,
        key: bytes,
        kind: ReqKind,
        cmd: Optional[UpdateCommand],
        client: object,
        client_seq: int,
    ) -> List[Effect]:
        """Admit one client request. Writes carry an update command."""
        self.stats.submitted += 1
        if self.config.batch_interval > 0:
            return self._enqueue_batch(key, kind, cmd, client, client_seq)
        if kind is ReqKind.READ:
            req = self._new_request(key, ReqKind.READ, [], [(client, client_seq)])
        else:
            req = self._new_request(key, ReqKind.WRITE, [cmd], [(client, client_seq)])
        return self._start(req)

    def _new_request(self, key, kind, cmds, clients) -> Request:
        rid = self.next_rid
        self.next_rid += 1
        req = Request(rid=rid, key=key, kind=kind, cmds=list(cmds), clients=list(clients))
        # Request ids drive the exactly-once machinery, which exists only in
        # RMW mode; the other modes never emit LEARNED.
        if kind is ReqKind.WRITE and self.config.register_mode is Mode.RMW:
            req.reqid = ReqID(self.pid, self.next_seq)
            self.next_seq += 1
        self.requests[rid] = req
        return req

    def _start(self, req: Request) -> List[Effect]:
        if req.kind is ReqKind.WRITE:
            if self.config.register_mode is Mode.WRITE_ONCE:
                req.own_value = apply_command(req.cmds[0], EMPTY)
                if req.own_value is None:
                    return self._reply_all(req, Status.NOOP, EMPTY)
            token = self.fast.get(req.key)
            if token is not None and self.config.fast_writes:
                if self.config.register_mode is Mode.WRITE_ONCE:
                    # The token proves a value is chosen; a second write can
                    # be answered without touching the network.
                    return self._finish_write_once(req, token.base)
                return self._fast_write(req, token)
        return self._broadcast_prepare(req)

    def _broadcast_prepare(self, req: Request) -> List[Effect]:
        kind = ReqKind.WRITE if (req.kind is ReqKind.WRITE or req.escalated) else ReqKind.READ
        ticket = Ticket(req.rid, req.instance)
        effects: List[Effect] = [
            Send(a, Prepare(req.key, self.pid, kind, ticket)) for a in self._acceptors()
        ]
        effects.append(self._arm_timer(req))
        return effects

    def _arm_timer(self, req: Request) -> SetTimer:
        delay = REQUEST_TIMEOUT_TICKS + self.rng.randint(0, REQUEST_TIMEOUT_TICKS // 2)
        return SetTimer(delay, ("req", req.rid, req.instance))

    def _fast_write(self, req: Request, token: FastToken) -> List[Effect]:
        del self.fast[req.key]  # consumed; refreshed on success
        if self.config.register_mode is Mode.RMW and req.reqid in self.learned:
            return self._finish(req, Status.DONE, token.base)
        self.stats.fast_writes += 1
        # This instance starts without a phase-1 broadcast, so it has no
        # timeout armed yet.
        effects = self._propose_successor(req, token.round, token.base, token.base_req)
        if not req.done:
            effects.append(self._arm_timer(req))
        return effects

    # -- message handling -----------------------------------------------------

    def on_message(self, msg) -> List[Effect]:
        if isinstance(msg, Ack):
            return self.on_ack(msg)
        if isinstance(msg, Voted):
            return self.on_voted(msg)
        if isinstance(msg, Nack):
            return self.on_nack(msg)
        if isinstance(msg, Learned):
            return self.on_learned(msg)
        return []

    def on_ack(self, ack: Ack) -> List[Effect]:
        req = self.requests.get(ack.ticket.request)
        if req is None or req.done:
            return []
        if req.read_origin:
            req.pool.append(ack)
        if ack.ticket.instance != req.instance or req.phase not in ("p1", "p1x"):
            if req.read_origin:
                return self._evaluate_read_pool(req)
            return []
        req.acks[ack.src] = ack
        req.evidence.append(ack.r_ack)
        req.evidence.append(ack.r_voted)
        if req.read_origin and not req.escalated:
            return self._evaluate_read(req)
        if len(req.acks) >= self.quorum:
            return self._classify_and_dispatch(req)
        return []

    def on_nack(self, nack: Nack) -> List[Effect]:
        req = self.requests.get(nack.ticket.request)
        if req is None or req.done or nack.ticket.instance != req.instance:
            return []
        # Foreign round evidence: any outstanding fast-write grant is stale.
        self.fast.pop(nack.key, None)
        req.evidence.append(nack.r_ack)
        if req.read_origin and not req.escalated:
            return []  # reads are never nacked; stale ticket noise
        return self._retry_explicit(req)

    def on_voted(self, voted: Voted) -> List[Effect]:
        req = self.requests.get(voted.ticket.request)
        if (
            req is None
            or req.done
            or req.phase != "p2"
            or voted.ticket.instance != req.instance
            or req.proposal is None
            or voted.round != req.proposal.round
        ):
            return []
        req.voters.add(voted.src)
        if len(req.voters) < self.quorum:
            return []
        return self._proposal_chosen(req)

    def on_learned(self, learned: Learned) -> List[Effect]:
        if MUT_DROP_LEARNED in self.config.mutations:
            return []
        # Only record the fact. LEARNED does not say which of this request's
        # proposals was chosen, so the reply value has to come from a later
        # quorum view; the dedup checks finish the request from there.
        if any(not r.done and r.reqid == learned.req for r in self.requests.values()):
            self.learned[learned.req] = True
        return []

    def on_recover(self) -> List[Effect]:
        """Crash window ended; messages sent to this proposer meanwhile are
        gone. An RMW write that already proposed may have been absorbed by
        another proposer's write-through, and the Learned notice proving it
        may be among the lost messages, so retrying could apply the command
        twice. Such requests are abandoned: the client never hears back and
        must treat the outcome as unknown. Fast-write grants predate the
        crash and are dropped as stale."""
        self.fast.clear()
        if self.config.register_mode is not Mode.RMW:
            return []
        for req in self.requests.values():
            if req.done or not req.proposed or req.kind is ReqKind.READ:
                continue
            req.phase = "done"
            if req.reqid is not None:
                self.learned.pop(req.reqid, None)
        return []

    def on_timer(self, token: tuple) -> List[Effect]:
        if token[0] == "batch":
            return self._flush_batches()
        kind, rid, instance = token
        req = self.requests.get(rid)
        if req is None or req.done or req.instance != instance:
            return []
        if kind == "retry":
            # Backoff expired; run the deferred explicit-round phase 1.
            ticket = Ticket(req.rid, req.instance)
            effects: List[Effect] = [
                Send(a, PaxosPrep(req.key, self.pid, req.pending_round, ticket))
                for a in self._acceptors()
            ]
            effects.append(self._arm_timer(req))
            return effects
        # Messages may have been lost (or a quorum crashed); start over.
        self.stats.restarts += 1
        self._reset_instance(req)
        return self._broadcast_prepare(req)

    # -- read path --------------------------------------------------------------

    def _evaluate_read_pool(self, req: Request) -> List[Effect]:
        chosen = find_chosen_in_pool(req.pool, self.quorum)
        if chosen is not None:
            return self._finish(req, Status.DONE, chosen[0])
        if find_empty_in_pool(req.pool, self.quorum):
            return self._finish(req, Status.EMPTY, EMPTY)
        return []

    def _evaluate_read(self, req: Request) -> List[Effect]:
        effects = self._evaluate_read_pool(req)
        if effects or req.done:
            return effects
        if len(req.acks) < self.quorum:
            return []
        return self._read_retry(req)

    def _read_retry(self, req: Request) -> List[Effect]:
        """Contention management: retry round-less while the writer makes
        progress, escalate to a write-through once it looks crashed or the
        retry budget is spent."""
        def _rkey(r: Round):
            return (r.n, -1 if r.id is None else r.id)

        rounds = tuple(
            sorted((_rkey(a.r_ack), _rkey(a.r_voted)) for a in req.acks.values())
        )
        progressed = req.prev_rounds is None or rounds != req.prev_rounds
        if req.retry_count < self.config.read_retry_limit and progressed:
            req.prev_rounds = rounds
            req.retry_count += 1
            self.stats.read_retries += 1
            self._reset_instance(req)
            return self._broadcast_prepare(req)
        req.escalated = True
        self.stats.read_escalations += 1
        self._reset_instance(req)
        return self._broadcast_prepare(req)

    # -- write path ----------------------------------------------------------

    def _classify_and_dispatch(self, req: Request) -> List[Effect]:
        view = QuorumView(required=self.quorum, replies=dict(req.acks))
        outcome = classify(view, ReqKind.WRITE, self.pid)

        if isinstance(outcome, ValueChosen):
            return self._on_value_chosen(req, view, outcome)
        if isinstance(outcome, ReadyToPropose):
            mode = outcome.mode
            if isinstance(mode, MustWriteThrough) and MUT_SKIP_WRITE_THROUGH in self.config.mutations:
                mode = Fresh()
            if isinstance(mode, Fresh):
                return self._on_fresh(req, outcome.round)
            return self._on_write_through(req, outcome.round, mode)
        if isinstance(outcome, Retry):
            return self._retry_explicit(req)
        # EmptyConfirmed cannot occur: the write path always classifies with
        # request kind WRITE.
        raise AssertionError(f"unexpected outcome {outcome!r}")

    def _on_value_chosen(self, req: Request, view: QuorumView, outcome: ValueChosen) -> List[Effect]:
        base = outcome.value
        base_req = cons(view, "req")
        if base_req is INCONSISTENT:
            base_req = None
        if req.escalated:
            return self._finish(req, Status.DONE, base)
        if self.config.register_mode is Mode.WRITE_ONCE:
            return self._finish_write_once(req, base)
        if self.config.register_mode is Mode.RMW:
            if base_req is not None and base_req == req.reqid:
                return self._finish(req, Status.DONE, base)
            if req.reqid in self.learned:
                return self._finish(req, Status.DONE, base)
        c_ack = cons(view, "r_ack")
        if c_ack is not INCONSISTENT and all(a.incremented for a in view.replies.values()):
            return self._propose_successor(req, c_ack, base, base_req)
        return self._retry_explicit(req)

    def _on_fresh(self, req: Request, round: Round) -> List[Effect]:
        if req.escalated:
            # A consistent, fully unvoted quorum: nothing was ever chosen,
            # so the read may return empty without proposing anything.
            return self._finish(req, Status.EMPTY, EMPTY)
        if self.config.register_mode is Mode.RMW and req.reqid in self.learned:
            return self._finish(req, Status.DONE, EMPTY)
        if self.config.register_mode is Mode.WRITE_ONCE:
            return self._propose(req, round, req.own_value, req.reqid, None)
        return self._propose_successor(req, round, EMPTY, None)

    def _on_write_through(self, req: Request, round: Round, wt: MustWriteThrough) -> List[Effect]:
        self.stats.write_throughs += 1
        return self._propose(req, round, wt.value, wt.req, None, writethrough=True)

    def _propose_successor(
        self, req: Request, round: Round, base: Value, base_req: Optional[ReqID]
    ) -> List[Effect]:
        value, replies = self._apply_commands(req, base)
        if value is None:
            # Every command reduced to a no-op; phase 2 is unnecessary.
            self._complete(req)
            return replies
        return self._propose(req, round, value, req.reqid, base_req, pre_replies=replies)

    def _apply_commands(self, req: Request, base: Value):
        """Apply the request's commands in admission order; returns the final
        value (None when nothing changed) plus immediate NOOP replies."""
        current = base
        changed = False
        replies: List[Effect] = []
        pending: List[Tuple[object, int]] = []
        for cmd, (client, seq) in zip(req.cmds, req.clients):
            result = apply_command(cmd, current)
            if result is None:
                if (client, seq) not in req.replied:
                    req.replied.add((client, seq))
                    replies.append(Reply(client, Status.NOOP, current, seq))
            else:
                current = result
                changed = True
                pending.append((client, seq))
        req.pending_clients = pending
        if not changed:
            return None, replies
        return current, replies

    def _propose(
        self,
        req: Request,
        round: Round,
        value: Value,
        req_cur: Optional[ReqID],
        req_prev: Optional[ReqID],
        writethrough: bool = False,
        pre_replies: Optional[List[Effect]] = None,
    ) -> List[Effect]:
        req.phase = "p2"
        req.proposed = True
        req.voters = set()
        req.proposal = Proposal(round, value, req_cur, req_prev, writethrough)
        ticket = Ticket(req.rid, req.instance)
        effects: List[Effect] = list(pre_replies or [])
        vote = Vote(req.key, self.pid, round, value, req_cur, req_prev, ticket)
        effects.extend(Send(a, vote) for a in self._acceptors())
        return effects

    def _proposal_chosen(self, req: Request) -> List[Effect]:
        prop = req.proposal
        chosen = prop.value
        if self.config.fast_writes:
            if MUT_REUSE_ROUND in self.config.mutations:
                next_round = prop.round
            else:
                next_round = Round(prop.round.n + 1, prop.round.id)
            self.fast[req.key] = FastToken(next_round, chosen, prop.req_cur)
        if not prop.writethrough:
            return self._finish(req, Status.DONE, chosen)

        # A write-through only consolidates someone's unfinished consensus;
        # the client's own command still has to be processed.
        if req.escalated:
            return self._finish(req, Status.DONE, chosen)
        if self.config.register_mode is Mode.WRITE_ONCE:
            return self._finish_write_once(req, chosen)
        if self.config.register_mode is Mode.RMW:
            if prop.req_cur is not None and prop.req_cur == req.reqid:
                return self._finish(req, Status.DONE, chosen)
            if req.reqid in self.learned:
                return self._finish(req, Status.DONE, chosen)
        token = self.fast.get(req.key)
        if token is not None and self.config.fast_writes:
            return self._fast_write(req, token)
        self._reset_instance(req)
        return self._broadcast_prepare(req)

    def _retry_explicit(self, req: Request) -> List[Effect]:
        evidence = list(req.evidence)
        if req.proposal is not None:
            evidence.append(req.proposal.round)
        next_round = next_explicit_round(evidence, self.pid)
        self._reset_instance(req)
        req.phase = "p1x"
        req.pending_round = next_round
        # Retrying immediately lets duelling proposers invalidate each other
        # forever; a randomized, growing pause lets one of them finish.
        req.backoff = min(max(2 * req.backoff, 4), REQUEST_TIMEOUT_TICKS)
        return [SetTimer(self.rng.randint(1, req.backoff), ("retry", req.rid, req.instance))]

    # -- completion ----------------------------------------------------------

    def _reset_instance(self, req: Request) -> None:
        req.instance += 1
        req.acks = {}
        req.voters = set()
        req.proposal = None
        req.phase = "p1"
        req.evidence = []

    def _finish_write_once(self, req: Request, chosen: Value) -> List[Effect]:
        if req.own_value is not None and chosen == req.own_value:
            return self._finish(req, Status.DONE, chosen)
        return self._finish(req, Status.ALREADY_CHOSEN, chosen)

    def _finish(self, req: Request, status: Status, value: Value) -> List[Effect]:
        targets = req.pending_clients or req.clients
        effects = [
            Reply(client, status, value, seq)
            for client, seq in targets
            if (client, seq) not in req.replied
        ]
        req.replied.update((client, seq) for client, seq in targets)
        self._complete(req)
        return effects

    def _reply_all(self, req: Request, status: Status, value: Value) -> List[Effect]:
        effects = [
            Reply(client, status, value, seq)
            for client, seq in req.clients
            if (client, seq) not in req.replied
        ]
        req.replied.update(req.clients)
        self._complete(req)
        return effects

    def _complete(self, req: Request) -> None:
        req.phase = "done"
        self.stats.completed += 1
        if req.reqid is not None:
            # LEARNED only matters while its request may still retry.
            self.learned.pop(req.reqid, None)

    # -- batching --------------------------------------------------------------

    def _enqueue_batch(self, key, kind, cmd, client, client_seq) -> List[Effect]:
        if kind is ReqKind.READ:
            self.batch_reads.setdefault(key, []).append((client, client_seq))
        else:
            self.batch_writes.setdefault(key, []).append((cmd, client, client_seq))
        if not self.batch_timer_armed:
            self.batch_timer_armed = True
            return [SetTimer(self.config.batch_interval, ("batch",))]
        return []

    def _flush_batches(self) -> List[Effect]:
        effects: List[Effect] = []
        reads, self.batch_reads = self.batch_reads, {}
        writes, self.batch_writes = self.batch_writes, {}
        for key, clients in reads.items():
            req = self._new_request(key, ReqKind.READ, [], clients)
            effects.extend(self._start(req))
        for key, entries in writes.items():
            cmds = [cmd for cmd, _, _ in entries]
            clients = [(client, seq) for _, client, seq in entries]
            req = self._new_request(key, ReqKind.WRITE, cmds, clients)
            effects.extend(self._start(req))
        if self.batch_reads or self.batch_writes:
            effects.append(SetTimer(self.config.batch_interval, ("batch",)))
        else:
            self.batch_timer_armed = False
        return effects
