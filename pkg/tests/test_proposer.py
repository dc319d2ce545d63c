"""Proposer flows driven through a synchronous loopback network: effects
are applied immediately and in order, so each test controls exactly which
messages exist."""
import random
from collections import deque

from rmwreg.acceptor import Acceptor
from rmwreg.core import EMPTY, Config, FnCommand, Mode, Round, Value
from rmwreg.kv import AddCmd, SetCmd, append_token
from rmwreg.core import ReqID
from rmwreg.messages import Learned, PaxosPrep, Prepare, ReqKind, Status, Ticket, Vote
from rmwreg.proposer import Proposer, Reply, Send, SetTimer


class Loopback:
    def __init__(self, config, pid=1000, seed=0):
        self.config = config
        self.acceptors = {i: Acceptor(i, config) for i in range(config.n_acceptors)}
        self.proposer = Proposer(pid, config, random.Random(seed))
        self.replies = []
        self.sent = []
        self.timers = []
        self.queue = deque()

    def _absorb(self, effects):
        for eff in effects:
            if isinstance(eff, Send):
                self.sent.append(eff)
                self.queue.append(eff)
            elif isinstance(eff, Reply):
                self.replies.append(eff)
            elif isinstance(eff, SetTimer):
                self.timers.append(eff)

    def pump(self):
        while self.queue:
            eff = self.queue.popleft()
            if eff.dst in self.acceptors:
                for dst, out in self.acceptors[eff.dst].handle(eff.msg):
                    self._absorb([Send(dst, out)])
            else:
                self._absorb(self.proposer.on_message(eff.msg))

    def submit(self, key, kind, cmd=None, client=0, seq=0):
        self._absorb(self.proposer.submit(key, kind, cmd, client, seq))
        self.pump()

    def fire_timers(self):
        timers, self.timers = self.timers, []
        for t in timers:
            self._absorb(self.proposer.on_timer(t.token))
        self.pump()


def appender(token):
    return append_token(token)


def test_solo_write_then_read():
    net = Loopback(Config(n_acceptors=3, register_mode=Mode.RMW))
    net.submit(b"k", ReqKind.WRITE, appender("a"), seq=0)
    assert net.replies[-1].status is Status.DONE
    assert net.replies[-1].value == Value(b'["a"]')
    net.submit(b"k", ReqKind.READ, seq=1)
    assert net.replies[-1].status is Status.DONE
    assert net.replies[-1].value == Value(b'["a"]')


def test_read_on_fresh_register_is_empty():
    net = Loopback(Config(n_acceptors=3, register_mode=Mode.RMW))
    net.submit(b"k", ReqKind.READ)
    assert net.replies[-1].status is Status.EMPTY


def test_fast_write_skips_phase_one():
    net = Loopback(Config(n_acceptors=3, register_mode=Mode.RMW))
    net.submit(b"k", ReqKind.WRITE, appender("a"), seq=0)
    prepares_before = sum(isinstance(s.msg, (Prepare, PaxosPrep)) for s in net.sent)
    net.submit(b"k", ReqKind.WRITE, appender("b"), seq=1)
    prepares_after = sum(isinstance(s.msg, (Prepare, PaxosPrep)) for s in net.sent)
    assert prepares_after == prepares_before  # no phase 1 for the second write
    assert net.replies[-1].value == Value(b'["a","b"]')
    assert net.proposer.stats.fast_writes == 1


def test_no_fast_write_when_disabled():
    net = Loopback(Config(n_acceptors=3, register_mode=Mode.RMW, fast_writes=False))
    net.submit(b"k", ReqKind.WRITE, appender("a"), seq=0)
    net.submit(b"k", ReqKind.WRITE, appender("b"), seq=1)
    assert net.proposer.stats.fast_writes == 0
    assert net.replies[-1].value == Value(b'["a","b"]')


def test_noop_command_answered_without_protocol():
    net = Loopback(Config(n_acceptors=3, register_mode=Mode.RMW))
    net.submit(b"k", ReqKind.WRITE, SetCmd(5), seq=0)
    sent_before = len(net.sent)
    # cas-style no-op: command returns None on the current value
    net.submit(b"k", ReqKind.WRITE, FnCommand(lambda v: None), seq=1)
    assert net.replies[-1].status is Status.NOOP
    # one phase (vote) would add sends; a fast-write no-op adds none
    assert len(net.sent) == sent_before


def test_write_once_already_chosen():
    cfg = Config(n_acceptors=3, register_mode=Mode.WRITE_ONCE)
    net = Loopback(cfg)
    net.submit(b"k", ReqKind.WRITE, SetCmd("first"), seq=0)
    assert net.replies[-1].status is Status.DONE
    net.submit(b"k", ReqKind.WRITE, SetCmd("second"), seq=1)
    assert net.replies[-1].status is Status.ALREADY_CHOSEN
    assert net.replies[-1].value == Value(b'"first"')
    # same literal as the chosen one reports DONE
    net.submit(b"k", ReqKind.WRITE, SetCmd("first"), seq=2)
    assert net.replies[-1].status is Status.DONE


def test_write_once_noop_guard():
    net = Loopback(Config(n_acceptors=3, register_mode=Mode.WRITE_ONCE))
    net.submit(b"k", ReqKind.WRITE, FnCommand(lambda v: None), seq=0)
    assert net.replies[-1].status is Status.NOOP
    assert net.sent == []


def test_nack_triggers_explicit_round_retry():
    cfg = Config(n_acceptors=3, register_mode=Mode.RMW)
    net = Loopback(cfg)
    # Another proposer steals the promise between phases by raising r_ack.
    net._absorb(net.proposer.submit(b"k", ReqKind.WRITE, appender("a"), 0, 0))
    # Deliver prepares and their acks, but hold the resulting votes.
    while net.queue and isinstance(net.queue[0].msg, Prepare):
        eff = net.queue.popleft()
        for dst, out in net.acceptors[eff.dst].handle(eff.msg):
            net._absorb([Send(dst, out)])
    while net.queue and not isinstance(net.queue[0].msg, Vote):
        net._absorb(net.proposer.on_message(net.queue.popleft().msg))
    for a in net.acceptors.values():
        a.handle(PaxosPrep(b"k", 2000, Round(9, 2000), Ticket(0, 0)))
    net.pump()  # held votes are now stale and get nacked
    net.fire_timers()  # nack defers the retry behind a backoff timer
    # The proposer's vote got nacked; it must have retried with an explicit
    # round above 9 and finished.
    assert net.replies and net.replies[-1].status is Status.DONE
    explicit = [s.msg for s in net.sent if isinstance(s.msg, PaxosPrep)]
    assert explicit and all(p.round.n > 9 for p in explicit)


def test_read_escalates_after_retry_budget():
    cfg = Config(n_acceptors=3, register_mode=Mode.RMW, read_retry_limit=1)
    net = Loopback(cfg)
    net.submit(b"k", ReqKind.WRITE, appender("a"), seq=0)
    # Poison one acceptor so phase-1 replies never agree: acceptor 0 holds a
    # higher promise from a phantom writer that never proposes.

    net.acceptors[0].handle(Prepare(b"k", 2000, ReqKind.WRITE, Ticket(0, 0)))
    net.submit(b"k", ReqKind.READ, seq=1)
    # The pooled votes still form a consistent quorum (acceptors 1 and 2
    # agree), so the read finishes without escalation.
    assert net.replies[-1].status is Status.DONE
    assert net.proposer.stats.write_throughs == 0


def test_read_write_through_consolidates_partial_write():
    cfg = Config(n_acceptors=3, register_mode=Mode.RMW, read_retry_limit=0)
    net = Loopback(cfg)

    # Two phantom writers each got a single vote in: no value is chosen and
    # no unvoted quorum exists, so the read cannot settle from replies alone.
    net.acceptors[0].handle(Prepare(b"k", 2000, ReqKind.WRITE, Ticket(0, 0)))
    net.acceptors[0].handle(
        Vote(b"k", 2000, Round(1, 2000), Value(b'["x"]'), None, None, Ticket(0, 0)))
    net.acceptors[1].handle(Prepare(b"k", 2001, ReqKind.WRITE, Ticket(0, 0)))
    net.acceptors[1].handle(Prepare(b"k", 2001, ReqKind.WRITE, Ticket(0, 0)))
    net.acceptors[1].handle(
        Vote(b"k", 2001, Round(2, 2001), Value(b'["x","y"]'), None, None, Ticket(0, 0)))
    net.submit(b"k", ReqKind.READ, seq=0)
    for _ in range(5):  # escalation may route retries through backoff timers
        if net.replies:
            break
        net.fire_timers()
    # The read escalated and wrote through the newest partial value.
    assert net.replies[-1].status is Status.DONE
    assert net.replies[-1].value == Value(b'["x","y"]')
    assert net.proposer.stats.write_throughs == 1
    voted = {a.cell(b"k").val for a in net.acceptors.values()}
    assert voted == {Value(b'["x","y"]')}


def test_timer_restart_completes_after_total_loss():
    cfg = Config(n_acceptors=3, register_mode=Mode.RMW)
    net = Loopback(cfg)
    net._absorb(net.proposer.submit(b"k", ReqKind.WRITE, appender("a"), 0, 0))
    net.queue.clear()  # every prepare lost
    assert not net.replies
    net.fire_timers()  # restart delivers normally
    assert net.replies[-1].status is Status.DONE


def test_batched_writes_form_one_proposal():
    cfg = Config(n_acceptors=3, register_mode=Mode.RMW, batch_interval=5)
    net = Loopback(cfg)
    for i in range(4):
        net._absorb(net.proposer.submit(b"k", ReqKind.WRITE, AddCmd(1), i, 0))
    assert net.queue == deque()  # nothing sent until the flush timer
    net.fire_timers()
    votes = [s.msg for s in net.sent if isinstance(s.msg, Vote)]
    assert len(votes) == 3  # one proposal broadcast to three acceptors
    assert len(net.replies) == 4
    assert all(r.status is Status.DONE for r in net.replies)
    assert net.replies[-1].value == Value(b"4")


def test_batched_reads_share_one_quorum():
    cfg = Config(n_acceptors=3, register_mode=Mode.RMW, batch_interval=5)
    net = Loopback(cfg)
    net._absorb(net.proposer.submit(b"k", ReqKind.WRITE, SetCmd(1), 0, 0))
    net.fire_timers()
    sent_before = len(net.sent)
    for i in range(5):
        net._absorb(net.proposer.submit(b"k", ReqKind.READ, None, 10 + i, 0))
    net.fire_timers()
    reads = [r for r in net.replies if r.client >= 10]
    assert len(reads) == 5
    assert {r.value for r in reads} == {Value(b"1")}
    assert len(net.sent) - sent_before == 6  # one prepare + one ack per acceptor


def test_exactly_once_dedup_via_learned():
    """If the proposer already holds a LEARNED for its request, a retry must
    not re-propose the command."""
    cfg = Config(n_acceptors=3, register_mode=Mode.RMW)
    net = Loopback(cfg)
    net._absorb(net.proposer.submit(b"k", ReqKind.WRITE, appender("a"), 0, 0))
    net.pump()
    assert net.replies[-1].value == Value(b'["a"]')
    net._absorb(net.proposer.submit(b"k", ReqKind.WRITE, appender("b"), 0, 1))
    # Deliver the votes so the value is chosen at the acceptors, but drop
    # every reply: the proposer never hears about it directly.
    for eff in list(net.queue):
        if isinstance(eff.msg, Vote):
            net.acceptors[eff.dst].handle(eff.msg)
    net.queue.clear()


    reqid = net.proposer.requests[1].reqid
    net._absorb(net.proposer.on_message(Learned(b"k", 0, reqid)))
    net.fire_timers()  # restart: sees chosen value, must dedup
    assert net.replies[-1].status is Status.DONE
    final = net.replies[-1].value
    assert final == Value(b'["a","b"]')  # applied once, not twice
