"""Replicated key-value facade.

Register values store canonical JSON payloads; a small wire-encodable
command algebra (set, cas, add, set_insert, set_remove, append) transforms
them deterministically. Distinct keys map to fully independent register
instances, so the facade is just a typed veneer over the proposer's
read/update operations.

The in-process protocol API accepts arbitrary deterministic functions;
only this fixed algebra crosses the network.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Callable, List, Optional, Tuple

from .core import EMPTY, CommandError, Mode, UpdateCommand, Value
from .messages import ReqKind, Status


def to_payload(obj: Any) -> Value:
    return Value(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8"))


def from_payload(value: Value) -> Any:
    """Decode a register value; the empty register decodes to None."""
    if value.empty:
        return None
    try:
        return json.loads(value.payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CommandError(f"register holds non-JSON payload: {exc}") from exc


def _elem_sort_key(elem: Any) -> str:
    # Stable order for heterogeneous set members keeps payloads canonical.
    return json.dumps(elem, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# command algebra


class KvCommand(UpdateCommand):
    op = ""
    idempotent = True

    def args(self) -> List[Any]:
        raise NotImplementedError

    def encode(self) -> bytes:
        return json.dumps(
            {"op": self.op, "args": self.args()}, sort_keys=True, separators=(",", ":")
        ).encode("utf-8")


@dataclass(frozen=True)
class SetCmd(KvCommand):
    value: Any
    op = "set"

    def args(self) -> List[Any]:
        return [self.value]

    def apply(self, value: Value) -> Optional[Value]:
        return to_payload(self.value)


@dataclass(frozen=True)
class CasCmd(KvCommand):
    expect: Any
    new: Any
    op = "cas"

    def args(self) -> List[Any]:
        return [self.expect, self.new]

    def apply(self, value: Value) -> Optional[Value]:
        if from_payload(value) != self.expect:
            return None
        return to_payload(self.new)


@dataclass(frozen=True)
class AddCmd(KvCommand):
    delta: int
    op = "add"
    idempotent = False

    def args(self) -> List[Any]:
        return [self.delta]

    def apply(self, value: Value) -> Optional[Value]:
        current = from_payload(value)
        if current is None:
            current = 0
        if not isinstance(current, (int, float)) or isinstance(current, bool):
            raise CommandError("add requires a numeric register")
        return to_payload(current + self.delta)


def _as_list(value: Value, what: str) -> List[Any]:
    current = from_payload(value)
    if current is None:
        return []
    if not isinstance(current, list):
        raise CommandError(f"{what} requires a list register")
    return current


@dataclass(frozen=True)
class SetInsertCmd(KvCommand):
    elem: Any
    op = "set_insert"

    def args(self) -> List[Any]:
        return [self.elem]

    def apply(self, value: Value) -> Optional[Value]:
        members = _as_list(value, "set_insert")
        if self.elem in members:
            return None
        return to_payload(sorted(members + [self.elem], key=_elem_sort_key))


@dataclass(frozen=True)
class SetRemoveCmd(KvCommand):
    elem: Any
    op = "set_remove"

    def args(self) -> List[Any]:
        return [self.elem]

    def apply(self, value: Value) -> Optional[Value]:
        members = _as_list(value, "set_remove")
        if self.elem not in members:
            return None
        return to_payload([m for m in members if m != self.elem])


@dataclass(frozen=True)
class AppendCmd(KvCommand):
    elem: Any
    op = "append"
    idempotent = False

    def args(self) -> List[Any]:
        return [self.elem]

    def apply(self, value: Value) -> Optional[Value]:
        return to_payload(_as_list(value, "append") + [self.elem])


_COMMANDS = {
    "set": (SetCmd, 1),
    "cas": (CasCmd, 2),
    "add": (AddCmd, 1),
    "set_insert": (SetInsertCmd, 1),
    "set_remove": (SetRemoveCmd, 1),
    "append": (AppendCmd, 1),
}


def encode_command(cmd: KvCommand) -> bytes:
    return cmd.encode()


def decode_command(data: bytes) -> KvCommand:
    try:
        rec = json.loads(data.decode("utf-8"))
        op = rec["op"]
        args = rec["args"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CommandError(f"malformed command encoding: {exc}") from exc
    if op not in _COMMANDS:
        raise CommandError(f"unknown command op {op!r}")
    cls, arity = _COMMANDS[op]
    if not isinstance(args, list) or len(args) != arity:
        raise CommandError(f"{op} expects {arity} argument(s)")
    return cls(*args)


def append_token(token: str) -> AppendCmd:
    """Append-log update whose effects stay visible in every later value,
    which is what the sequence checkers need."""
    return AppendCmd(token)


# ---------------------------------------------------------------------------
# facade


class ModeError(Exception):
    """Non-idempotent command submitted while running a consensus-sequence
    register, which only guarantees at-least-once application."""


class Unavailable(Exception):
    pass


SubmitFn = Callable[[bytes, ReqKind, Optional[UpdateCommand]], Tuple[Status, Value]]


class KvFacade:
    """get/update API over any transport exposing a blocking submit call.

    The same facade fronts the in-process simulator and the socket client.
    """

    def __init__(self, submit: SubmitFn, mode: Mode):
        self.submit = submit
        self.mode = mode

    def get(self, key: bytes) -> Any:
        status, value = self.submit(key, ReqKind.READ, None)
        if status is Status.EMPTY:
            return None
        if status is Status.DONE:
            return from_payload(value)
        if status is Status.UNAVAILABLE:
            raise Unavailable(f"read of {key!r} could not reach a quorum")
        raise CommandError(f"unexpected read status {status}")

    def update(self, key: bytes, cmd: KvCommand) -> Tuple[str, Any]:
        if self.mode is Mode.SEQUENCE and not cmd.idempotent:
            raise ModeError(
                f"{cmd.op} is not idempotent; sequence mode may apply it twice"
            )
        status, value = self.submit(key, ReqKind.WRITE, cmd)
        if status is Status.DONE:
            return ("done", from_payload(value))
        if status is Status.NOOP:
            return ("noop", None)
        if status is Status.UNAVAILABLE:
            raise Unavailable(f"update of {key!r} could not reach a quorum")
        raise CommandError(f"unexpected update status {status}")

    def put(self, key: bytes, obj: Any) -> Any:
        return self.update(key, SetCmd(obj))[1]


# ---------------------------------------------------------------------------
# synchronous driver over the simulator


class SimDriver:
    """Blocking client against a simulated deployment: submit one request,
    step the world until its reply arrives."""

    def __init__(self, config, sim_config, proposer_pid: Optional[int] = None):
        from .sim import PROPOSER_BASE, ClientResponseEv, ClientScript, World

        self._ResponseEv = ClientResponseEv
        pid = PROPOSER_BASE if proposer_pid is None else proposer_pid
        self.pid = pid
        self.world = World(config, sim_config, [ClientScript(client=0, proposer=pid, ops=())])
        self.seq = 0

    def submit(self, key: bytes, kind: ReqKind, cmd: Optional[UpdateCommand]):
        world = self.world
        cs = world.clients[0]
        seq = self.seq
        self.seq += 1
        cs.ops_meta[seq] = (key, kind, None)
        scan = len(world.trace)  # replies can be emitted synchronously
        effects = world.proposers[self.pid].submit(key, kind, cmd, 0, seq)
        world._apply_proposer_effects(self.pid, effects, depth=0)
        while True:
            while scan < len(world.trace):
                ev = world.trace[scan]
                scan += 1
                if isinstance(ev, self._ResponseEv) and ev.client == 0 and ev.op_index == seq:
                    return ev.status, ev.value
            if not world.step():
                return Status.UNAVAILABLE, EMPTY
            if world.steps >= world.sim.max_steps:
                return Status.UNAVAILABLE, EMPTY

    def facade(self, mode: Optional[Mode] = None) -> KvFacade:
        return KvFacade(self.submit, mode or self.world.config.register_mode)
