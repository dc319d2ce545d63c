"""Canonical binary encoding of protocol types and messages.

Fixed field order (as declared on the dataclasses), big-endian integers,
length-prefixed variable fields. Shared by simulator traces and the socket
demo, which frames each message with a 4-byte big-endian length prefix.
"""
from __future__ import annotations

import io
import struct
from typing import Optional

from .core import ReqID, Round, Value
from .messages import (
    Ack,
    ClientReply,
    ClientRequest,
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


class CodecError(Exception):
    """Malformed or truncated encoding."""


_U8 = struct.Struct(">B")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


def _w_u8(buf: io.BytesIO, v: int) -> None:
    buf.write(_U8.pack(v))


def _w_u32(buf: io.BytesIO, v: int) -> None:
    buf.write(_U32.pack(v))


def _w_u64(buf: io.BytesIO, v: int) -> None:
    buf.write(_U64.pack(v))


def _w_bytes(buf: io.BytesIO, b: bytes) -> None:
    _w_u32(buf, len(b))
    buf.write(b)


def _w_round(buf: io.BytesIO, r: Round) -> None:
    _w_u32(buf, r.n)
    if r.id is None:
        _w_u8(buf, 0)
    else:
        _w_u8(buf, 1)
        _w_u64(buf, r.id)


def _w_req(buf: io.BytesIO, req: Optional[ReqID]) -> None:
    if req is None:
        _w_u8(buf, 0)
    else:
        _w_u8(buf, 1)
        _w_u64(buf, req.pid)
        _w_u64(buf, req.seq)


def _w_value(buf: io.BytesIO, v: Value) -> None:
    _w_u8(buf, 1 if v.empty else 0)
    _w_bytes(buf, v.payload)


def _w_ticket(buf: io.BytesIO, t: Ticket) -> None:
    _w_u64(buf, t.request)
    _w_u32(buf, t.instance)


class _Reader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise CodecError(f"truncated encoding at byte {self._pos}")
        chunk = self._data[self._pos : self._pos + n]
        self._pos += n
        return chunk

    def u8(self) -> int:
        return _U8.unpack(self._take(1))[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def bytes_(self) -> bytes:
        return self._take(self.u32())

    def round(self) -> Round:
        n = self.u32()
        has_id = self.u8()
        return Round(n, self.u64() if has_id else None)

    def req(self) -> Optional[ReqID]:
        if not self.u8():
            return None
        return ReqID(self.u64(), self.u64())

    def value(self) -> Value:
        empty = bool(self.u8())
        payload = self.bytes_()
        if empty and payload:
            raise CodecError("empty value with payload")
        return Value(payload, empty)

    def ticket(self) -> Ticket:
        return Ticket(self.u64(), self.u32())

    def done(self) -> None:
        if self._pos != len(self._data):
            raise CodecError(f"trailing bytes at offset {self._pos}")


_TAG_PREPARE = 1
_TAG_PAXOS_PREP = 2
_TAG_VOTE = 3
_TAG_ACK = 4
_TAG_VOTED = 5
_TAG_NACK = 6
_TAG_LEARNED = 7
_TAG_CLIENT_REQ = 8
_TAG_CLIENT_REPLY = 9


def encode(msg) -> bytes:
    buf = io.BytesIO()
    if isinstance(msg, Prepare):
        _w_u8(buf, _TAG_PREPARE)
        _w_bytes(buf, msg.key)
        _w_u64(buf, msg.src)
        _w_u8(buf, msg.kind.value)
        _w_ticket(buf, msg.ticket)
    elif isinstance(msg, PaxosPrep):
        _w_u8(buf, _TAG_PAXOS_PREP)
        _w_bytes(buf, msg.key)
        _w_u64(buf, msg.src)
        _w_round(buf, msg.round)
        _w_ticket(buf, msg.ticket)
    elif isinstance(msg, Vote):
        _w_u8(buf, _TAG_VOTE)
        _w_bytes(buf, msg.key)
        _w_u64(buf, msg.src)
        _w_round(buf, msg.round)
        _w_value(buf, msg.value)
        _w_req(buf, msg.req_cur)
        _w_req(buf, msg.req_prev)
        _w_ticket(buf, msg.ticket)
    elif isinstance(msg, Ack):
        _w_u8(buf, _TAG_ACK)
        _w_bytes(buf, msg.key)
        _w_u64(buf, msg.src)
        _w_ticket(buf, msg.ticket)
        _w_round(buf, msg.r_ack)
        _w_value(buf, msg.val)
        _w_round(buf, msg.r_voted)
        _w_req(buf, msg.req)
        _w_u8(buf, 1 if msg.incremented else 0)
    elif isinstance(msg, Voted):
        _w_u8(buf, _TAG_VOTED)
        _w_bytes(buf, msg.key)
        _w_u64(buf, msg.src)
        _w_ticket(buf, msg.ticket)
        _w_round(buf, msg.round)
        _w_value(buf, msg.value)
    elif isinstance(msg, Nack):
        _w_u8(buf, _TAG_NACK)
        _w_bytes(buf, msg.key)
        _w_u64(buf, msg.src)
        _w_ticket(buf, msg.ticket)
        _w_round(buf, msg.r_ack)
    elif isinstance(msg, Learned):
        _w_u8(buf, _TAG_LEARNED)
        _w_bytes(buf, msg.key)
        _w_u64(buf, msg.src)
        _w_req(buf, msg.req)
    elif isinstance(msg, ClientRequest):
        _w_u8(buf, _TAG_CLIENT_REQ)
        _w_bytes(buf, msg.key)
        _w_u8(buf, msg.kind.value)
        _w_bytes(buf, msg.command)
        _w_u64(buf, msg.client_seq)
    elif isinstance(msg, ClientReply):
        _w_u8(buf, _TAG_CLIENT_REPLY)
        _w_u8(buf, msg.status.value)
        _w_value(buf, msg.value)
        _w_u64(buf, msg.client_seq)
    else:
        raise CodecError(f"cannot encode {type(msg).__name__}")
    return buf.getvalue()


def decode(data: bytes):
    r = _Reader(data)
    tag = r.u8()
    if tag == _TAG_PREPARE:
        msg = Prepare(r.bytes_(), r.u64(), ReqKind(r.u8()), r.ticket())
    elif tag == _TAG_PAXOS_PREP:
        msg = PaxosPrep(r.bytes_(), r.u64(), r.round(), r.ticket())
    elif tag == _TAG_VOTE:
        msg = Vote(r.bytes_(), r.u64(), r.round(), r.value(), r.req(), r.req(), r.ticket())
    elif tag == _TAG_ACK:
        msg = Ack(
            r.bytes_(), r.u64(), r.ticket(), r.round(), r.value(), r.round(), r.req(), bool(r.u8())
        )
    elif tag == _TAG_VOTED:
        msg = Voted(r.bytes_(), r.u64(), r.ticket(), r.round(), r.value())
    elif tag == _TAG_NACK:
        msg = Nack(r.bytes_(), r.u64(), r.ticket(), r.round())
    elif tag == _TAG_LEARNED:
        msg = Learned(r.bytes_(), r.u64(), r.req())
    elif tag == _TAG_CLIENT_REQ:
        msg = ClientRequest(r.bytes_(), ReqKind(r.u8()), r.bytes_(), r.u64())
    elif tag == _TAG_CLIENT_REPLY:
        msg = ClientReply(Status(r.u8()), r.value(), r.u64())
    else:
        raise CodecError(f"unknown message tag {tag}")
    r.done()
    return msg


# ---------------------------------------------------------------------------
# socket framing: 4-byte big-endian length prefix + canonical encoding


def frame(msg) -> bytes:
    body = encode(msg)
    return _U32.pack(len(body)) + body


def read_frame(sock):
    """Read one framed message from a socket; None on clean EOF."""
    header = _read_exact(sock, 4)
    if header is None:
        return None
    (length,) = _U32.unpack(header)
    body = _read_exact(sock, length)
    if body is None:
        raise CodecError("connection closed mid-frame")
    return decode(body)


def _read_exact(sock, n: int):
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            if chunks:
                raise CodecError("connection closed mid-frame")
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)
