"""Binary request/reply protocol between simulation-unit proxies and model backends.

Frame layout on the stream:

    u32 payload_length (little-endian, counts kind byte + body)
    u8  kind
    ... kind-specific body ...

Primitive encodings, all little-endian: Real = IEEE-754 binary64, Integer =
signed 32-bit, Boolean = one byte (0/1), Text = u32 byte length + UTF-8 with
no terminator, arrays = u32 count + elements.  A reply's kind is the request
kind with the high bit set.  Exactly one reply answers each request; the
strict serial discipline over an ordered stream makes correlation implicit,
so frames carry no request ids.
"""

from __future__ import annotations

import socket
import struct
import time
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional, Sequence, Union

MAX_FRAME_SIZE = 16 * 1024 * 1024  # cap on payload_length; bounds memory for a hostile peer
PROTOCOL_VERSION = 1
DEFAULT_CALL_TIMEOUT = 30.0

REPLY_BIT = 0x80

_U32 = struct.Struct("<I")
_I32 = struct.Struct("<i")
_U16 = struct.Struct("<H")
_F64 = struct.Struct("<d")


class MessageKind(IntEnum):
    HANDSHAKE = 0x01
    SETUP_EXPERIMENT = 0x10
    ENTER_INIT = 0x11
    EXIT_INIT = 0x12
    DO_STEP = 0x13
    SET_REAL = 0x14
    SET_INT = 0x15
    SET_BOOL = 0x16
    SET_STRING = 0x17
    GET_REAL = 0x18
    GET_INT = 0x19
    GET_BOOL = 0x1A
    GET_STRING = 0x1B
    TERMINATE = 0x1C
    FREE_INSTANCE = 0x1D

    @property
    def reply_code(self) -> int:
        return self.value | REPLY_BIT


SET_KINDS = frozenset({
    MessageKind.SET_REAL, MessageKind.SET_INT,
    MessageKind.SET_BOOL, MessageKind.SET_STRING,
})
GET_KINDS = frozenset({
    MessageKind.GET_REAL, MessageKind.GET_INT,
    MessageKind.GET_BOOL, MessageKind.GET_STRING,
})
EMPTY_BODY_KINDS = frozenset({
    MessageKind.ENTER_INIT, MessageKind.EXIT_INIT,
    MessageKind.TERMINATE, MessageKind.FREE_INSTANCE,
})


class Status(IntEnum):
    OK = 0
    WARNING = 1
    DISCARD = 2
    ERROR = 3
    FATAL = 4


class WireError(Exception):
    """Base class for protocol-level failures."""


class ProtocolError(WireError):
    """Fatal protocol violation; the connection must be closed."""


class WireTimeout(WireError):
    """The peer did not produce a full reply within the deadline."""


class ConnectionClosed(WireError):
    """The stream ended while a frame was still owed."""


@dataclass(frozen=True)
class Handshake:
    """First message on every connection; carries version, name and token."""
    instance_name: str
    auth_token: str
    protocol_version: int = PROTOCOL_VERSION
    kind = MessageKind.HANDSHAKE


@dataclass(frozen=True)
class SetupExperiment:
    start_time: float
    stop_time: Optional[float] = None
    tolerance: Optional[float] = None
    kind = MessageKind.SETUP_EXPERIMENT


@dataclass(frozen=True)
class EnterInit:
    kind = MessageKind.ENTER_INIT


@dataclass(frozen=True)
class ExitInit:
    kind = MessageKind.EXIT_INIT


@dataclass(frozen=True)
class DoStep:
    current_time: float
    step_size: float
    kind = MessageKind.DO_STEP


@dataclass(frozen=True)
class Terminate:
    kind = MessageKind.TERMINATE


@dataclass(frozen=True)
class FreeInstance:
    kind = MessageKind.FREE_INSTANCE


@dataclass(frozen=True)
class SetValues:
    """SET_* request; value type is implied by the kind."""
    kind: MessageKind
    vrs: tuple
    values: tuple

    def __post_init__(self):
        if self.kind not in SET_KINDS:
            raise ValueError(f"not a SET kind: {self.kind!r}")
        object.__setattr__(self, "vrs", tuple(self.vrs))
        object.__setattr__(self, "values", tuple(self.values))
        if len(self.vrs) != len(self.values):
            raise ProtocolError(
                f"{self.kind.name}: {len(self.vrs)} value references but "
                f"{len(self.values)} values")


@dataclass(frozen=True)
class GetValues:
    """GET_* request."""
    kind: MessageKind
    vrs: tuple

    def __post_init__(self):
        if self.kind not in GET_KINDS:
            raise ValueError(f"not a GET kind: {self.kind!r}")
        object.__setattr__(self, "vrs", tuple(self.vrs))


@dataclass(frozen=True)
class StatusReply:
    """Reply to any request that returns no values."""
    request_kind: MessageKind
    status: Status

    @property
    def kind(self) -> int:
        return self.request_kind.reply_code


@dataclass(frozen=True)
class ValuesReply:
    """Reply to a GET_* request: status plus the fetched values."""
    request_kind: MessageKind
    status: Status
    values: tuple

    def __post_init__(self):
        if self.request_kind not in GET_KINDS:
            raise ValueError(f"not a GET kind: {self.request_kind!r}")
        object.__setattr__(self, "values", tuple(self.values))

    @property
    def kind(self) -> int:
        return self.request_kind.reply_code


Message = Union[
    Handshake, SetupExperiment, EnterInit, ExitInit, DoStep,
    SetValues, GetValues, Terminate, FreeInstance,
    StatusReply, ValuesReply,
]


def _encode_string(text: str) -> bytes:
    try:
        raw = text.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise ProtocolError(f"string not encodable as UTF-8: {exc}") from None
    return _U32.pack(len(raw)) + raw


def _encode_u32(value: int) -> bytes:
    if not 0 <= value <= 0xFFFFFFFF:
        raise ProtocolError(f"value reference {value} outside unsigned 32-bit range")
    return _U32.pack(value)


def _encode_i32(value: int) -> bytes:
    if not -(2**31) <= value <= 2**31 - 1:
        raise ProtocolError(f"integer {value} outside signed 32-bit range")
    return _I32.pack(value)


def _encode_bool(value) -> bytes:
    return b"\x01" if value else b"\x00"


_VALUE_ENCODERS = {
    MessageKind.SET_REAL: _F64.pack,
    MessageKind.SET_INT: _encode_i32,
    MessageKind.SET_BOOL: _encode_bool,
    MessageKind.SET_STRING: _encode_string,
    MessageKind.GET_REAL: _F64.pack,
    MessageKind.GET_INT: _encode_i32,
    MessageKind.GET_BOOL: _encode_bool,
    MessageKind.GET_STRING: _encode_string,
}


def _encode_value_array(kind: MessageKind, values: Sequence) -> bytes:
    enc = _VALUE_ENCODERS[kind]
    parts = [_U32.pack(len(values))]
    parts.extend(enc(v) for v in values)
    return b"".join(parts)


def _encode_vr_array(vrs: Sequence[int]) -> bytes:
    parts = [_U32.pack(len(vrs))]
    parts.extend(_encode_u32(vr) for vr in vrs)
    return b"".join(parts)


def encode_message(message: Message) -> bytes:
    """Serialize one message into its exact frame bytes.

    Deterministic: identical input yields identical bytes.  Raises
    :class:`ProtocolError` for unencodable field values (mismatched array
    lengths are rejected at message construction).
    """
    if isinstance(message, Handshake):
        kind_code = MessageKind.HANDSHAKE.value
        body = (_U16.pack(message.protocol_version)
                + _encode_string(message.instance_name)
                + _encode_string(message.auth_token))
    elif isinstance(message, SetupExperiment):
        kind_code = MessageKind.SETUP_EXPERIMENT.value
        stop_defined = message.stop_time is not None
        tol_defined = message.tolerance is not None
        body = (_F64.pack(message.start_time)
                + _encode_bool(stop_defined)
                + _F64.pack(message.stop_time if stop_defined else 0.0)
                + _encode_bool(tol_defined)
                + _F64.pack(message.tolerance if tol_defined else 0.0))
    elif isinstance(message, DoStep):
        kind_code = MessageKind.DO_STEP.value
        body = _F64.pack(message.current_time) + _F64.pack(message.step_size)
    elif isinstance(message, (EnterInit, ExitInit, Terminate, FreeInstance)):
        kind_code = message.kind.value
        body = b""
    elif isinstance(message, SetValues):
        kind_code = message.kind.value
        body = _encode_vr_array(message.vrs) + _encode_value_array(message.kind, message.values)
    elif isinstance(message, GetValues):
        kind_code = message.kind.value
        body = _encode_vr_array(message.vrs)
    elif isinstance(message, ValuesReply):
        kind_code = message.request_kind.reply_code
        body = bytes([message.status.value]) + _encode_value_array(
            message.request_kind, message.values)
    elif isinstance(message, StatusReply):
        kind_code = message.request_kind.reply_code
        body = bytes([message.status.value])
    else:
        raise TypeError(f"not a wire message: {message!r}")

    payload_length = 1 + len(body)
    if payload_length > MAX_FRAME_SIZE:
        raise ProtocolError(
            f"frame of {payload_length} bytes exceeds the {MAX_FRAME_SIZE} byte cap")
    return _U32.pack(payload_length) + bytes([kind_code]) + body


class _BodyReader:
    """Cursor over one frame's body; never reads past the declared frame."""

    def __init__(self, data: memoryview, kind_name: str):
        self._data = data
        self._pos = 0
        self._kind_name = kind_name

    def _take(self, n: int) -> memoryview:
        if self._pos + n > len(self._data):
            raise ProtocolError(
                f"{self._kind_name}: body truncated "
                f"(need {n} more bytes at offset {self._pos})")
        chunk = self._data[self._pos:self._pos + n]
        self._pos += n
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return _U16.unpack(self._take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def i32(self) -> int:
        return _I32.unpack(self._take(4))[0]

    def f64(self) -> float:
        return _F64.unpack(self._take(8))[0]

    def boolean(self) -> bool:
        raw = self.u8()
        if raw not in (0, 1):
            raise ProtocolError(f"{self._kind_name}: boolean byte {raw:#x} is not 0 or 1")
        return raw == 1

    def string(self) -> str:
        length = self.u32()
        raw = self._take(length)
        try:
            return str(raw, "utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"{self._kind_name}: invalid UTF-8: {exc}") from None

    def status(self) -> Status:
        raw = self.u8()
        try:
            return Status(raw)
        except ValueError:
            raise ProtocolError(f"{self._kind_name}: unknown status code {raw:#x}") from None

    def finish(self):
        if self._pos != len(self._data):
            raise ProtocolError(
                f"{self._kind_name}: {len(self._data) - self._pos} trailing bytes in frame")


_VALUE_READERS = {
    MessageKind.SET_REAL: _BodyReader.f64,
    MessageKind.SET_INT: _BodyReader.i32,
    MessageKind.SET_BOOL: _BodyReader.boolean,
    MessageKind.SET_STRING: _BodyReader.string,
    MessageKind.GET_REAL: _BodyReader.f64,
    MessageKind.GET_INT: _BodyReader.i32,
    MessageKind.GET_BOOL: _BodyReader.boolean,
    MessageKind.GET_STRING: _BodyReader.string,
}


def _read_value_array(reader: _BodyReader, kind: MessageKind) -> tuple:
    read = _VALUE_READERS[kind]
    count = reader.u32()
    return tuple(read(reader) for _ in range(count))


def _read_vr_array(reader: _BodyReader) -> tuple:
    count = reader.u32()
    return tuple(reader.u32() for _ in range(count))


def _decode_body(kind_code: int, body: memoryview) -> Message:
    is_reply = bool(kind_code & REPLY_BIT)
    try:
        kind = MessageKind(kind_code & ~REPLY_BIT)
    except ValueError:
        raise ProtocolError(f"unknown message kind {kind_code:#04x}") from None
    name = kind.name + ("_REPLY" if is_reply else "")
    reader = _BodyReader(body, name)

    if is_reply:
        status = reader.status()
        if kind in GET_KINDS:
            message: Message = ValuesReply(kind, status, _read_value_array(reader, kind))
        else:
            message = StatusReply(kind, status)
    elif kind is MessageKind.HANDSHAKE:
        version = reader.u16()
        message = Handshake(reader.string(), reader.string(), protocol_version=version)
    elif kind is MessageKind.SETUP_EXPERIMENT:
        start_time = reader.f64()
        stop_defined = reader.boolean()
        stop_time = reader.f64()
        tol_defined = reader.boolean()
        tolerance = reader.f64()
        message = SetupExperiment(start_time,
                                  stop_time if stop_defined else None,
                                  tolerance if tol_defined else None)
    elif kind is MessageKind.DO_STEP:
        message = DoStep(reader.f64(), reader.f64())
    elif kind in EMPTY_BODY_KINDS:
        message = {MessageKind.ENTER_INIT: EnterInit,
                   MessageKind.EXIT_INIT: ExitInit,
                   MessageKind.TERMINATE: Terminate,
                   MessageKind.FREE_INSTANCE: FreeInstance}[kind]()
    elif kind in SET_KINDS:
        vrs = _read_vr_array(reader)
        values = _read_value_array(reader, kind)
        if len(vrs) != len(values):
            raise ProtocolError(
                f"{name}: {len(vrs)} value references but {len(values)} values")
        message = SetValues(kind, vrs, values)
    elif kind in GET_KINDS:
        message = GetValues(kind, _read_vr_array(reader))
    else:  # pragma: no cover - every kind is handled above
        raise ProtocolError(f"unhandled kind {kind!r}")

    reader.finish()
    return message


def decode_message(data) -> Optional[tuple[Message, int]]:
    """Decode the first full frame in ``data``.

    Returns ``(message, bytes_consumed)``, or ``None`` while fewer bytes than
    a full frame are available.  Raises :class:`ProtocolError` for an unknown
    kind code, a frame above the size cap, or malformed body content; all are
    fatal and the connection must be closed.
    """
    view = memoryview(bytes(data) if not isinstance(data, (bytes, bytearray, memoryview)) else data)
    if len(view) < 4:
        return None
    payload_length = _U32.unpack(view[:4])[0]
    if payload_length > MAX_FRAME_SIZE:
        raise ProtocolError(
            f"declared frame of {payload_length} bytes exceeds the "
            f"{MAX_FRAME_SIZE} byte cap")
    if payload_length < 1:
        raise ProtocolError("frame declares an empty payload (no kind byte)")
    total = 4 + payload_length
    if len(view) < total:
        return None
    message = _decode_body(view[4], view[5:total])
    return message, total


class StreamDecoder:
    """Incremental frame decoder over an arbitrarily chunked byte stream."""

    def __init__(self):
        self._buffer = bytearray()

    def feed(self, data: bytes):
        self._buffer.extend(data)

    def next_message(self) -> Optional[Message]:
        decoded = decode_message(memoryview(self._buffer))
        if decoded is None:
            return None
        message, consumed = decoded
        del self._buffer[:consumed]
        return message

    def pending_bytes(self) -> int:
        return len(self._buffer)


def _read_into(sock: socket.socket, decoder: StreamDecoder, timeout: Optional[float]) -> Message:
    """Read one frame from ``sock`` into ``decoder``, honoring the deadline.

    Raises :class:`WireTimeout` when the deadline passes with the frame still
    incomplete and :class:`ConnectionClosed` when the peer closes mid-frame.
    """
    deadline = None if timeout is None else time.monotonic() + timeout
    while True:
        message = decoder.next_message()
        if message is not None:
            return message
        if deadline is not None:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise WireTimeout(f"no full frame within {timeout} s")
            sock.settimeout(remaining)
        else:
            sock.settimeout(None)
        try:
            chunk = sock.recv(65536)
        except socket.timeout:
            raise WireTimeout(f"no full frame within {timeout} s") from None
        if not chunk:
            if decoder.pending_bytes():
                raise ConnectionClosed("connection closed mid-frame")
            raise ConnectionClosed("connection closed")
        decoder.feed(chunk)


class Connection:
    """One side of an established proxy/backend link.

    Owned by exactly one logical task at a time; the request/reply discipline
    is strictly serial, which :meth:`request_reply` enforces.
    """

    def __init__(self, sock: socket.socket):
        if sock.family in (socket.AF_INET, socket.AF_INET6):
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._decoder = StreamDecoder()
        self._in_flight = False
        self.closed = False

    def send_message(self, message: Message):
        self._sock.sendall(encode_message(message))

    def read_message(self, timeout: Optional[float]) -> Message:
        return _read_into(self._sock, self._decoder, timeout)

    def request_reply(self, request: Message, timeout: float = DEFAULT_CALL_TIMEOUT) -> Message:
        """Send one request and read its single reply.

        The reply's kind must be the request kind with the reply bit set;
        anything else is a fatal protocol violation.
        """
        if self._in_flight:
            raise RuntimeError("request already in flight on this connection")
        self._in_flight = True
        try:
            self.send_message(request)
            reply = self.read_message(timeout)
        finally:
            self._in_flight = False
        expected = request.kind if isinstance(request.kind, MessageKind) else None
        reply_request_kind = getattr(reply, "request_kind", None)
        if reply_request_kind is not expected:
            raise ProtocolError(
                f"expected reply to {expected.name if expected else '?'}, "
                f"got {type(reply).__name__} for "
                f"{reply_request_kind.name if reply_request_kind else 'non-reply'}")
        return reply

    def close(self):
        if not self.closed:
            self.closed = True
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()
