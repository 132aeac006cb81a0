"""Typed client/server messages and their framing.

Frame: u32 body length | u8 message tag | body. Bodies use the same integer,
string and value encodings as the tree format.
"""
from __future__ import annotations

import socket
from dataclasses import dataclass, field
from typing import ClassVar, Mapping

from .anatomize import ITRow, STRow
from .dtree import Reader, Writer
from .errors import FormatError, ProtocolError

HEADER_BYTES = 5
MAX_BODY = 1 << 30

_REGISTRY: dict[int, type] = {}


def _message(tag: int):
    def register(cls):
        if tag in _REGISTRY:
            raise RuntimeError(f"duplicate message tag {tag}")
        cls.TAG = tag
        _REGISTRY[tag] = cls
        return cls
    return register


def _write_instance(w: Writer, inst: Mapping):
    items = sorted(inst.items())
    w.u32(len(items))
    for k, v in items:
        w.str(k)
        w.value(v)


def _read_instance(r: Reader) -> dict:
    return {r.str(): r.value() for _ in range(r.u32())}


def _write_it(w: Writer, rows):
    w.u32(len(rows))
    for row in rows:
        w.u32(len(row.values))
        for v in row.values:
            w.value(v)
        w.value(row.gid)
        w.raw(row.eseq)


def _read_it(r: Reader) -> tuple:
    out = []
    for _ in range(r.u32()):
        values = tuple(r.value() for _ in range(r.u32()))
        gid = r.value()
        out.append(ITRow(values, gid, r.raw()))
    return tuple(out)


def _write_st(w: Writer, rows):
    w.u32(len(rows))
    for row in rows:
        w.value(row.seq)
        w.value(row.gid)
        w.value(row.value)


def _read_st(r: Reader) -> tuple:
    return tuple(STRow(r.value(), r.value(), r.value()) for _ in range(r.u32()))


@dataclass(frozen=True)
class LeafPayload:
    """Everything the client needs to rebuild a base-tree leaf's true tuples.

    ``it_rows`` are the leaf's growing rows and ``prune_rows`` the pruning rows
    routed to it; ``st_rows`` holds every ST row of every group appearing
    among them, sent once per group. Pairing each IT row with the ST rows of
    its group yields all candidate (row, sensitive value) combinations.
    ``default_label`` is the base leaf's majority class, used when the leaf is
    empty.
    """

    it_rows: tuple = ()
    prune_rows: tuple = ()
    st_rows: tuple = ()
    default_label: object = None

    def candidates(self, include_prune: bool = True) -> list[tuple[ITRow, STRow]]:
        by_gid: dict = {}
        for s in self.st_rows:
            by_gid.setdefault(s.gid, []).append(s)
        rows = self.it_rows + (self.prune_rows if include_prune else ())
        return [(t, s) for t in rows for s in by_gid.get(t.gid, ())]

    @property
    def tuples_held(self) -> int:
        return len(self.it_rows) + len(self.prune_rows) + len(self.st_rows)

    def encode(self, w: Writer):
        _write_it(w, self.it_rows)
        _write_it(w, self.prune_rows)
        _write_st(w, self.st_rows)
        if self.default_label is None:
            w.u8(0)
        else:
            w.u8(1)
            w.value(self.default_label)

    @classmethod
    def decode(cls, r: Reader) -> "LeafPayload":
        it_rows, prune_rows, st_rows = _read_it(r), _read_it(r), _read_st(r)
        label = r.value() if r.u8() else None
        return cls(it_rows, prune_rows, st_rows, label)


class Message:
    TAG: ClassVar[int]

    def encode(self, w: Writer):
        pass

    @classmethod
    def decode(cls, r: Reader):
        return cls()

    @property
    def name(self) -> str:
        return type(self).__name__


@_message(1)
@dataclass(frozen=True)
class PredictRequest(Message):
    instance: Mapping = field(default_factory=dict)

    def encode(self, w):
        _write_instance(w, self.instance)

    @classmethod
    def decode(cls, r):
        return cls(_read_instance(r))


@_message(2)
@dataclass(frozen=True)
class RespEncrSubtree(Message):
    leaf_id: str
    blob: bytes

    def encode(self, w):
        w.str(self.leaf_id)
        w.raw(self.blob)

    @classmethod
    def decode(cls, r):
        return cls(r.str(), r.raw())


@_message(3)
@dataclass(frozen=True)
class RespLeafInstances(Message):
    leaf_id: str
    payload: LeafPayload

    def encode(self, w):
        w.str(self.leaf_id)
        self.payload.encode(w)

    @classmethod
    def decode(cls, r):
        return cls(r.str(), LeafPayload.decode(r))


@_message(4)
@dataclass(frozen=True)
class InstallSubtree(Message):
    leaf_id: str
    blob: bytes

    def encode(self, w):
        w.str(self.leaf_id)
        w.raw(self.blob)

    @classmethod
    def decode(cls, r):
        return cls(r.str(), r.raw())


@_message(5)
@dataclass(frozen=True)
class Ack(Message):
    leaf_id: str = ""

    def encode(self, w):
        w.str(self.leaf_id)

    @classmethod
    def decode(cls, r):
        return cls(r.str())


@_message(6)
@dataclass(frozen=True)
class PredictServerOnly(Message):
    instance: Mapping = field(default_factory=dict)

    def encode(self, w):
        _write_instance(w, self.instance)

    @classmethod
    def decode(cls, r):
        return cls(_read_instance(r))


@_message(7)
@dataclass(frozen=True)
class RespLabel(Message):
    label: object

    def encode(self, w):
        w.value(self.label)

    @classmethod
    def decode(cls, r):
        return cls(r.value())


@_message(8)
@dataclass(frozen=True)
class FetchAll(Message):
    pass


@_message(9)
@dataclass(frozen=True)
class RespTables(Message):
    it: tuple
    st: tuple

    def encode(self, w):
        _write_it(w, self.it)
        _write_st(w, self.st)

    @classmethod
    def decode(cls, r):
        return cls(_read_it(r), _read_st(r))


@_message(10)
@dataclass(frozen=True)
class FetchEncrTree(Message):
    pass


@_message(11)
@dataclass(frozen=True)
class RespEncrTree(Message):
    blob: bytes

    def encode(self, w):
        w.raw(self.blob)

    @classmethod
    def decode(cls, r):
        return cls(r.raw())


@_message(12)
@dataclass(frozen=True)
class StoreEncrTree(Message):
    blob: bytes

    def encode(self, w):
        w.raw(self.blob)

    @classmethod
    def decode(cls, r):
        return cls(r.raw())


@_message(13)
@dataclass(frozen=True)
class ErrorResponse(Message):
    message: str

    def encode(self, w):
        w.str(self.message)

    @classmethod
    def decode(cls, r):
        return cls(r.str())


MESSAGE_TYPES = dict(_REGISTRY)


def frame(msg: Message) -> bytes:
    w = Writer()
    msg.encode(w)
    body = w.getvalue()
    return len(body).to_bytes(4, "big") + bytes([msg.TAG]) + body


def parse_header(header: bytes) -> tuple[int, int]:
    if len(header) != HEADER_BYTES:
        raise ProtocolError(f"frame header needs {HEADER_BYTES} bytes, got {len(header)}")
    length = int.from_bytes(header[:4], "big")
    if length > MAX_BODY:
        raise ProtocolError(f"declared body length {length} exceeds limit")
    return length, header[4]


def unframe(data: bytes) -> Message:
    length, tag = parse_header(bytes(data[:HEADER_BYTES]))
    body = data[HEADER_BYTES:]
    if len(body) != length:
        raise ProtocolError(f"frame declares {length} body bytes but carries {len(body)}")
    cls = _REGISTRY.get(tag)
    if cls is None:
        raise ProtocolError(f"unknown message tag {tag}")
    r = Reader(body)
    try:
        msg = cls.decode(r)
        r.done()
    except FormatError as e:
        raise ProtocolError(f"malformed {cls.__name__}: {e}") from None
    return msg


def leaf_id_of(msg: Message) -> str | None:
    return getattr(msg, "leaf_id", None) or None


# stream helpers --------------------------------------------------------------

def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes | None:
    """Next complete frame from ``sock``, or None on a clean close."""
    first = sock.recv(1)
    if not first:
        return None
    header = first + recv_exact(sock, HEADER_BYTES - 1)
    length, _ = parse_header(header)
    return header + recv_exact(sock, length)
