import random

import pytest

from rmwreg.acceptor import Acceptor, AcceptorState, INITIAL_STATE
from rmwreg.core import (
    EMPTY,
    MUT_VOTE_BELOW_PROMISE,
    Config,
    ReqID,
    ROUND_ZERO,
    Round,
    Value,
)
from rmwreg.messages import (
    Ack,
    Learned,
    Nack,
    PaxosPrep,
    Prepare,
    ReqKind,
    Ticket,
    Vote,
    Voted,
)

KEY = b"k"
T = Ticket(0, 0)


def make(fast_writes=True, mutations=frozenset()):
    return Acceptor(0, Config(n_acceptors=3, fast_writes=fast_writes, mutations=mutations))


def test_initial_state():
    a = make()
    assert a.cell(KEY) == AcceptorState(ROUND_ZERO, EMPTY, ROUND_ZERO, None)
    assert a.cell(KEY) is INITIAL_STATE


def test_prepare_write_increments_and_takes_ownership():
    a = make()
    a.cells[KEY] = AcceptorState(r_ack=Round(5, 7))
    [(dst, reply)] = a.handle(Prepare(KEY, 9, ReqKind.WRITE, T))
    assert dst == 9
    assert reply.r_ack == Round(6, 9)
    assert reply.incremented
    assert a.cell(KEY).r_ack == Round(6, 9)


def test_prepare_fresh_write():
    a = make()
    [(_, reply)] = a.handle(Prepare(KEY, 3, ReqKind.WRITE, T))
    assert reply.r_ack == Round(1, 3)


def test_prepare_read_leaves_state_untouched():
    a = make()
    a.cells[KEY] = AcceptorState(r_ack=Round(5, 7), val=Value(b"v"), r_voted=Round(5, 7))
    before = a.cell(KEY)
    [(_, reply)] = a.handle(Prepare(KEY, 9, ReqKind.READ, T))
    assert a.cell(KEY) == before
    assert not reply.incremented
    assert reply.val == Value(b"v")


def test_prepare_explicit_higher_accepted():
    a = make()
    a.cells[KEY] = AcceptorState(r_ack=Round(3, 1))
    [(_, reply)] = a.handle(PaxosPrep(KEY, 3, Round(6, 3), T))
    assert isinstance(reply, Ack)
    assert a.cell(KEY).r_ack == Round(6, 3)


def test_prepare_explicit_stale_and_incomparable_nacked():
    a = make()
    a.cells[KEY] = AcceptorState(r_ack=Round(6, 3))
    [(_, stale)] = a.handle(PaxosPrep(KEY, 2, Round(4, 2), T))
    assert isinstance(stale, Nack) and stale.r_ack == Round(6, 3)
    [(_, incomp)] = a.handle(PaxosPrep(KEY, 4, Round(6, 4), T))
    assert isinstance(incomp, Nack)
    assert a.cell(KEY).r_ack == Round(6, 3)


def test_vote_at_promise_with_fast_writes():
    a = make()
    a.cells[KEY] = AcceptorState(r_ack=Round(6, 9))
    v = Value(b"v")
    out = a.handle(Vote(KEY, 9, Round(6, 9), v, None, None, T))
    assert out == [(9, Voted(KEY, 0, T, Round(6, 9), v))]
    state = a.cell(KEY)
    assert state == AcceptorState(Round(7, 9), v, Round(6, 9), None)


def test_vote_without_fast_writes_keeps_promise():
    a = make(fast_writes=False)
    a.cells[KEY] = AcceptorState(r_ack=Round(6, 9))
    a.handle(Vote(KEY, 9, Round(6, 9), Value(b"v"), None, None, T))
    assert a.cell(KEY).r_ack == Round(6, 9)


def test_vote_below_or_incomparable_promise_nacked():
    a = make()
    a.cells[KEY] = AcceptorState(r_ack=Round(8, 2))
    [(_, reply)] = a.handle(Vote(KEY, 1, Round(6, 1), Value(b"v"), None, None, T))
    assert isinstance(reply, Nack) and reply.r_ack == Round(8, 2)
    [(_, reply2)] = a.handle(Vote(KEY, 1, Round(8, 1), Value(b"v"), None, None, T))
    assert isinstance(reply2, Nack)
    assert a.cell(KEY).r_voted == ROUND_ZERO


def test_vote_emits_learned_to_previous_owner():
    a = make()
    a.cells[KEY] = AcceptorState(r_ack=Round(6, 9))
    prev = ReqID(1004, 7)
    cur = ReqID(1009, 1)
    out = a.handle(Vote(KEY, 9, Round(6, 9), Value(b"v"), cur, prev, T))
    assert (prev.pid, Learned(KEY, 0, prev)) in out
    assert a.cell(KEY).req == cur


def test_vote_mutation_accepts_below_promise():
    a = make(mutations=frozenset({MUT_VOTE_BELOW_PROMISE}))
    a.cells[KEY] = AcceptorState(r_ack=Round(8, 2))
    [(_, reply)] = a.handle(Vote(KEY, 1, Round(6, 1), Value(b"v"), None, None, T))
    assert isinstance(reply, Voted)


def test_keys_are_independent():
    a = make()
    a.handle(Prepare(b"a", 1, ReqKind.WRITE, T))
    assert a.cell(b"b") == INITIAL_STATE
    assert a.cell(b"a").r_ack == Round(1, 1)


def test_state_hash_tracks_content():
    a, b = make(), make()
    assert a.state_hash() == b.state_hash()
    a.handle(Prepare(KEY, 1, ReqKind.WRITE, T))
    assert a.state_hash() != b.state_hash()
    b.handle(Prepare(KEY, 1, ReqKind.WRITE, T))
    assert a.state_hash() == b.state_hash()


def test_promise_monotone_under_random_messages():
    rng = random.Random(5)
    a = make()
    prev = a.cell(KEY).r_ack
    for _ in range(500):
        roll = rng.random()
        rnd = Round(rng.randint(0, 10), rng.randint(0, 3))
        if roll < 0.4:
            a.handle(Prepare(KEY, rng.randint(0, 3), rng.choice(list(ReqKind)), T))
        elif roll < 0.7:
            a.handle(PaxosPrep(KEY, rnd.id, rnd, T))
        else:
            a.handle(Vote(KEY, rnd.id, rnd, Value(b"v"), None, None, T))
        cur = a.cell(KEY).r_ack
        assert cur.n >= prev.n
        prev = cur


def test_crash_recovery_is_omission():
    """Snapshot/restore across a message gap must equal simply never
    delivering those messages."""
    rng = random.Random(11)
    msgs = []
    for i in range(60):
        rnd = Round(rng.randint(0, 6), rng.randint(0, 2))
        msgs.append(rng.choice([
            Prepare(KEY, rng.randint(0, 3), rng.choice(list(ReqKind)), T),
            PaxosPrep(KEY, rnd.id, rnd, T),
            Vote(KEY, rnd.id, rnd, Value(bytes([i])), None, None, T),
        ]))
    crashed, witness = make(), make()
    for i, m in enumerate(msgs):
        if 20 <= i < 40:
            continue  # lost while down
        witness.handle(m)
    snap = None
    for i, m in enumerate(msgs):
        if i == 20:
            snap = crashed.snapshot()
        if i == 40:
            crashed.restore(snap)
        if 20 <= i < 40:
            crashed.handle(m)  # processed, then wiped by restore
        else:
            crashed.handle(m)
    assert crashed.cell(KEY) == witness.cell(KEY)
    assert crashed.state_hash() == witness.state_hash()
