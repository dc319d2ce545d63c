"""Deterministic seeded network simulator and fault injector.

The simulator is strictly single-threaded: a seeded generator repeatedly
picks one pending event (message delivery, timer, client invocation, crash
or recovery) and feeds it to the target state machine. Identical
(seed, config, workload) inputs yield byte-identical traces.

Two link contracts are supported: unreliable fair-loss links (messages may
be dropped, duplicated, and reordered within a bounded delay) and reliable
FIFO links (per-pair in-order delivery, no loss), the latter being
mandatory for RMW mode.

Simulated time is a tick counter; message delay is sampled uniformly from
[1, max_delay] ticks.
"""
from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from . import codec
from .acceptor import Acceptor, AcceptorState
from .checker import HistoryEvent
from .core import Config, Mode, ProcessId, ReqID, Round, UpdateCommand, Value
from .messages import ReqKind, Status
from .proposer import Proposer, Reply, Send, SetTimer

PROPOSER_BASE = 1000


# ---------------------------------------------------------------------------
# trace events


@dataclass(frozen=True)
class ClientInvokeEv:
    tick: int
    client: int
    op_index: int
    key: bytes
    op: ReqKind
    token: Optional[str]


@dataclass(frozen=True)
class ClientResponseEv:
    tick: int
    client: int
    op_index: int
    key: bytes
    status: Status
    value: Value
    depth: int


@dataclass(frozen=True)
class SendEv:
    idx: int
    tick: int
    src: ProcessId
    dst: ProcessId
    msg: object
    depth: int


@dataclass(frozen=True)
class DeliverEv:
    tick: int
    send_idx: int


@dataclass(frozen=True)
class DropEv:
    tick: int
    send_idx: int
    reason: str  # "loss" | "crashed"


@dataclass(frozen=True)
class DuplicateEv:
    tick: int
    send_idx: int


@dataclass(frozen=True)
class CrashEv:
    tick: int
    pid: ProcessId


@dataclass(frozen=True)
class RecoverEv:
    tick: int
    pid: ProcessId


@dataclass(frozen=True)
class StateSnapshotEv:
    tick: int
    pid: ProcessId
    key: bytes
    state: AcceptorState


# ---------------------------------------------------------------------------
# configuration and workload scripts


@dataclass(frozen=True)
class SimConfig:
    seed: int
    fifo: bool = True
    drop: float = 0.0
    dup: float = 0.0
    max_delay: int = 10
    crash_plan: Tuple[Tuple[int, ProcessId, str], ...] = ()  # (tick, pid, crash|recover)
    max_steps: int = 200_000


@dataclass(frozen=True)
class OpSpec:
    """One scripted client operation.

    For writes either `cmd` is a fixed command (its literal recorded via
    `arg` for the write-once checker) or `make_cmd` builds one from the
    op's unique token (append-log style payloads for the CS checkers).
    """

    kind: ReqKind
    cmd: Optional[UpdateCommand] = None
    arg: Optional[Value] = None
    make_cmd: Optional[Callable[[str], UpdateCommand]] = None


@dataclass(frozen=True)
class ClientScript:
    client: int
    proposer: ProcessId
    ops: Tuple[OpSpec, ...]
    key: bytes = b"r"
    start_tick: int = 0
    think: int = 0
    loop_until: Optional[int] = None  # cycle through ops until this tick


class QuiescenceNotReached(Exception):
    pass


@dataclass
class SimResult:
    trace: List[object]
    histories: Dict[bytes, List[HistoryEvent]]
    quiescent: bool
    world: "World"

    def history(self, key: bytes = b"r") -> List[HistoryEvent]:
        return self.histories.get(key, [])


# ---------------------------------------------------------------------------
# the world


@dataclass
class _ClientState:
    script: ClientScript
    issued: int = 0
    finished: bool = False
    ops_meta: Dict[int, Tuple[bytes, ReqKind, Optional[str]]] = field(default_factory=dict)


class World:
    def __init__(self, config: Config, sim: SimConfig, scripts: Sequence[ClientScript]):
        if config.register_mode is Mode.RMW and not sim.fifo:
            raise ValueError("RMW mode requires reliable FIFO links")
        self.config = config
        self.sim = sim
        self.rng = random.Random(sim.seed)
        self.acceptors = {pid: Acceptor(pid, config) for pid in range(config.n_acceptors)}
        self.proposers: Dict[ProcessId, Proposer] = {}
        for script in scripts:
            if script.proposer not in self.proposers:
                self.proposers[script.proposer] = Proposer(
                    script.proposer, config, random.Random(f"{sim.seed}/{script.proposer}")
                )
        self.down: set = set()
        self.trace: List[object] = []
        self.histories: Dict[bytes, List[HistoryEvent]] = {}
        self.clients = {s.client: _ClientState(s) for s in scripts}
        self.send_count = 0
        self.seq = 0
        self.tick = 0
        self.steps = 0
        self.heap: List[tuple] = []
        self.fifo_last: Dict[Tuple[ProcessId, ProcessId], int] = {}
        for script in scripts:
            self._push(script.start_tick, ("invoke", script.client))
        for tick, pid, action in sim.crash_plan:
            self._push(tick, (action, pid))

    # -- scheduling ----------------------------------------------------------

    def _push(self, tick: int, entry: tuple) -> None:
        heapq.heappush(self.heap, (tick, self.seq, entry))
        self.seq += 1

    def _pop_random(self) -> Tuple[int, tuple]:
        """Pop one event uniformly at random among those due earliest."""
        tick = self.heap[0][0]
        bucket = []
        while self.heap and self.heap[0][0] == tick:
            bucket.append(heapq.heappop(self.heap))
        pick = self.rng.randrange(len(bucket))
        chosen = bucket.pop(pick)
        for item in bucket:
            heapq.heappush(self.heap, item)
        return tick, chosen[2]

    def _schedule_send(self, src: ProcessId, dst: ProcessId, msg, depth: int) -> None:
        idx = self.send_count
        self.send_count += 1
        self.trace.append(SendEv(idx, self.tick, src, dst, msg, depth))
        if self.sim.fifo:
            due = self.tick + self.rng.randint(1, self.sim.max_delay)
            last = self.fifo_last.get((src, dst), 0)
            due = max(due, last + 1)  # strict per-pair order
            self.fifo_last[(src, dst)] = due
            self._push(due, ("deliver", idx, msg, src, dst, depth))
            return
        if self.rng.random() < self.sim.drop:
            self.trace.append(DropEv(self.tick, idx, "loss"))
            return
        due = self.tick + self.rng.randint(1, self.sim.max_delay)
        self._push(due, ("deliver", idx, msg, src, dst, depth))
        if self.rng.random() < self.sim.dup:
            self.trace.append(DuplicateEv(self.tick, idx))
            dup_due = self.tick + self.rng.randint(1, self.sim.max_delay)
            self._push(dup_due, ("deliver", idx, msg, src, dst, depth))

    # -- effect processing ----------------------------------------------------

    def _apply_proposer_effects(self, pid: ProcessId, effects, depth: int) -> None:
        for eff in effects:
            if isinstance(eff, Send):
                self._schedule_send(pid, eff.dst, eff.msg, depth + 1)
            elif isinstance(eff, SetTimer):
                self._push(self.tick + eff.delay, ("timer", pid, eff.token))
            elif isinstance(eff, Reply):
                self._client_response(eff, depth)
            else:
                raise TypeError(f"unknown effect {eff!r}")

    def _client_response(self, reply: Reply, depth: int) -> None:
        client = reply.client
        cs = self.clients[client]
        key, kind, token = cs.ops_meta[reply.client_seq]
        self.trace.append(
            ClientResponseEv(
                self.tick, client, reply.client_seq, key, reply.status, reply.value, depth
            )
        )
        self.histories.setdefault(key, []).append(
            HistoryEvent(
                kind="respond",
                client=client,
                op_index=reply.client_seq,
                op=kind,
                key=key,
                token=token,
                value=reply.value,
                status=reply.status,
                tick=self.tick,
            )
        )
        self._schedule_next_op(cs)

    def _schedule_next_op(self, cs: _ClientState) -> None:
        script = cs.script
        if script.loop_until is not None:
            if self.tick >= script.loop_until:
                cs.finished = True
                return
        elif cs.issued >= len(script.ops):
            cs.finished = True
            return
        self._push(self.tick + 1 + script.think, ("invoke", script.client))

    def _invoke(self, client: int) -> None:
        cs = self.clients[client]
        script = cs.script
        if cs.finished:
            return
        if script.loop_until is None and cs.issued >= len(script.ops):
            cs.finished = True
            return
        spec = script.ops[cs.issued % len(script.ops)]
        op_index = cs.issued
        cs.issued += 1
        token: Optional[str] = None
        cmd = spec.cmd
        if spec.kind is ReqKind.WRITE and spec.make_cmd is not None:
            token = f"{client}.{op_index}"
            cmd = spec.make_cmd(token)
        cs.ops_meta[op_index] = (script.key, spec.kind, token)
        self.trace.append(
            ClientInvokeEv(self.tick, client, op_index, script.key, spec.kind, token)
        )
        self.histories.setdefault(script.key, []).append(
            HistoryEvent(
                kind="invoke",
                client=client,
                op_index=op_index,
                op=spec.kind,
                key=script.key,
                token=token,
                value=spec.arg,
                tick=self.tick,
            )
        )
        if script.proposer in self.down:
            return  # request never admitted; the op stays incomplete
        proposer = self.proposers[script.proposer]
        effects = proposer.submit(script.key, spec.kind, cmd, client, op_index)
        self._apply_proposer_effects(script.proposer, effects, depth=0)

    def _deliver(self, idx: int, msg, src: ProcessId, dst: ProcessId, depth: int) -> None:
        if dst in self.down:
            self.trace.append(DropEv(self.tick, idx, "crashed"))
            return
        self.trace.append(DeliverEv(self.tick, idx))
        if dst in self.acceptors:
            acceptor = self.acceptors[dst]
            before = acceptor.cell(msg.key)
            outs = acceptor.handle(msg)
            after = acceptor.cell(msg.key)
            if after != before:
                self.trace.append(StateSnapshotEv(self.tick, dst, msg.key, after))
            for target, out in outs:
                self._schedule_send(dst, target, out, depth + 1)
        elif dst in self.proposers:
            effects = self.proposers[dst].on_message(msg)
            self._apply_proposer_effects(dst, effects, depth)
        # messages to unknown pids are silently discarded

    # -- main loop -------------------------------------------------------------

    def step(self) -> bool:
        """Process one pending event; False when nothing is pending."""
        if not self.heap:
            return False
        tick, entry = self._pop_random()
        self.tick = tick
        self.steps += 1
        kind = entry[0]
        if kind == "deliver":
            _, idx, msg, src, dst, depth = entry
            self._deliver(idx, msg, src, dst, depth)
        elif kind == "timer":
            _, pid, token = entry
            if pid not in self.down:
                effects = self.proposers[pid].on_timer(token)
                self._apply_proposer_effects(pid, effects, depth=0)
        elif kind == "invoke":
            self._invoke(entry[1])
        elif kind == "crash":
            self.down.add(entry[1])
            self.trace.append(CrashEv(self.tick, entry[1]))
        elif kind == "recover":
            pid = entry[1]
            self.down.discard(pid)
            self.trace.append(RecoverEv(self.tick, pid))
            if pid in self.proposers:
                effects = self.proposers[pid].on_recover()
                self._apply_proposer_effects(pid, effects, depth=0)
        else:
            raise AssertionError(f"unknown entry {entry!r}")
        return True

    def run(self) -> bool:
        """Run to quiescence; False when the step budget ran out first."""
        while self.heap:
            if self.steps >= self.sim.max_steps:
                return False
            self.step()
        return True


def random_crash_plan(
    seed: int,
    n_acceptors: int,
    max_crashes: int,
    horizon: int,
    proposer_pids: Sequence[ProcessId] = (),
) -> Tuple[Tuple[int, ProcessId, str], ...]:
    """Seed-derived fault schedule: up to `max_crashes` acceptor crashes and
    at most one proposer crash, each optionally recovering within the
    horizon. Deterministic in `seed`."""
    rng = random.Random(f"{seed}:crash")
    plan = []
    for pid in rng.sample(range(n_acceptors), rng.randint(0, max_crashes)):
        t = rng.randint(1, horizon)
        plan.append((t, pid, "crash"))
        if rng.random() < 0.7:
            plan.append((t + rng.randint(5, horizon), pid, "recover"))
    if proposer_pids and rng.random() < 0.3:
        pid = rng.choice(list(proposer_pids))
        t = rng.randint(1, horizon)
        plan.append((t, pid, "crash"))
        if rng.random() < 0.5:
            plan.append((t + rng.randint(5, horizon), pid, "recover"))
    return tuple(sorted(plan))


def run_workload(
    config: Config, sim: SimConfig, scripts: Sequence[ClientScript]
) -> SimResult:
    world = World(config, sim, scripts)
    quiescent = world.run()
    return SimResult(world.trace, world.histories, quiescent, world)


# ---------------------------------------------------------------------------
# message-delay accounting


def count_message_delays(trace: Sequence[object], client: int, op_index: int) -> int:
    """Length of the longest causal message chain between a request's
    invocation and its response."""
    for ev in trace:
        if isinstance(ev, ClientResponseEv) and ev.client == client and ev.op_index == op_index:
            return ev.depth
    raise ValueError(f"request {client}/{op_index} did not complete in this trace")


# ---------------------------------------------------------------------------
# trace serialization (newline-delimited canonical records)


def _value_to_json(v: Value) -> dict:
    return {"empty": v.empty, "payload": v.payload.hex()}


def _value_from_json(d: dict) -> Value:
    return Value(bytes.fromhex(d["payload"]), d["empty"])


def _state_to_json(s: AcceptorState) -> dict:
    return {
        "r_ack": [s.r_ack.n, s.r_ack.id],
        "val": _value_to_json(s.val),
        "r_voted": [s.r_voted.n, s.r_voted.id],
        "req": None if s.req is None else [s.req.pid, s.req.seq],
    }


def _state_from_json(d: dict) -> AcceptorState:
    return AcceptorState(
        r_ack=Round(*d["r_ack"]),
        val=_value_from_json(d["val"]),
        r_voted=Round(*d["r_voted"]),
        req=None if d["req"] is None else ReqID(*d["req"]),
    )


def event_to_record(ev) -> dict:
    if isinstance(ev, SendEv):
        return {
            "kind": "send",
            "idx": ev.idx,
            "tick": ev.tick,
            "src": ev.src,
            "dst": ev.dst,
            "msg": codec.encode(ev.msg).hex(),
            "depth": ev.depth,
        }
    if isinstance(ev, DeliverEv):
        return {"kind": "deliver", "tick": ev.tick, "send_idx": ev.send_idx}
    if isinstance(ev, DropEv):
        return {"kind": "drop", "tick": ev.tick, "send_idx": ev.send_idx, "reason": ev.reason}
    if isinstance(ev, DuplicateEv):
        return {"kind": "duplicate", "tick": ev.tick, "send_idx": ev.send_idx}
    if isinstance(ev, CrashEv):
        return {"kind": "crash", "tick": ev.tick, "pid": ev.pid}
    if isinstance(ev, RecoverEv):
        return {"kind": "recover", "tick": ev.tick, "pid": ev.pid}
    if isinstance(ev, StateSnapshotEv):
        return {
            "kind": "snapshot",
            "tick": ev.tick,
            "pid": ev.pid,
            "key": ev.key.hex(),
            "state": _state_to_json(ev.state),
        }
    if isinstance(ev, ClientInvokeEv):
        return {
            "kind": "invoke",
            "tick": ev.tick,
            "client": ev.client,
            "op_index": ev.op_index,
            "key": ev.key.hex(),
            "op": ev.op.value,
            "token": ev.token,
        }
    if isinstance(ev, ClientResponseEv):
        return {
            "kind": "response",
            "tick": ev.tick,
            "client": ev.client,
            "op_index": ev.op_index,
            "key": ev.key.hex(),
            "status": ev.status.value,
            "value": _value_to_json(ev.value),
            "depth": ev.depth,
        }
    raise TypeError(f"unknown trace event {ev!r}")


def event_from_record(rec: dict):
    kind = rec["kind"]
    if kind == "send":
        return SendEv(
            rec["idx"],
            rec["tick"],
            rec["src"],
            rec["dst"],
            codec.decode(bytes.fromhex(rec["msg"])),
            rec["depth"],
        )
    if kind == "deliver":
        return DeliverEv(rec["tick"], rec["send_idx"])
    if kind == "drop":
        return DropEv(rec["tick"], rec["send_idx"], rec["reason"])
    if kind == "duplicate":
        return DuplicateEv(rec["tick"], rec["send_idx"])
    if kind == "crash":
        return CrashEv(rec["tick"], rec["pid"])
    if kind == "recover":
        return RecoverEv(rec["tick"], rec["pid"])
    if kind == "snapshot":
        return StateSnapshotEv(
            rec["tick"], rec["pid"], bytes.fromhex(rec["key"]), _state_from_json(rec["state"])
        )
    if kind == "invoke":
        return ClientInvokeEv(
            rec["tick"],
            rec["client"],
            rec["op_index"],
            bytes.fromhex(rec["key"]),
            ReqKind(rec["op"]),
            rec["token"],
        )
    if kind == "response":
        return ClientResponseEv(
            rec["tick"],
            rec["client"],
            rec["op_index"],
            bytes.fromhex(rec["key"]),
            Status(rec["status"]),
            _value_from_json(rec["value"]),
            rec["depth"],
        )
    raise ValueError(f"unknown trace record kind {kind!r}")


def trace_to_jsonl(trace: Sequence[object]) -> bytes:
    lines = [
        json.dumps(event_to_record(ev), sort_keys=True, separators=(",", ":"))
        for ev in trace
    ]
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def trace_from_jsonl(data: bytes) -> List[object]:
    events = []
    offset = 0
    for line in data.splitlines():
        if line.strip():
            try:
                events.append(event_from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"corrupt trace at byte offset {offset}: {exc}") from exc
        offset += len(line) + 1
    return events
