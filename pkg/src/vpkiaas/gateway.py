"""Wire protocol: envelopes, framing and a threaded request/response transport.

Frame layout (all integers big-endian)::

    u32 frame_length            # bytes that follow, header included
    u16 version                 # currently 1
    u16 message_type
    u64 correlation_id
    ...  body                   # TLV record, schema per message type

Version and type are checked before the body is touched. Body fields are
TLV-tagged; readers skip tags they do not know, so adding an optional field
never breaks an older peer. Tags ``0x8000`` and above are reserved for
extensions.

A connection carries pipelined requests; responses may come back in any
order and are matched on ``correlation_id``.
"""

from __future__ import annotations

import enum
import itertools
import logging
import socket
import ssl
import struct
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass
from typing import Any, Callable, Mapping

from . import tlv
from .errors import (
    ConnectionFailed,
    DecodeError,
    OversizeFrame,
    Timeout,
    TruncatedFrame,
    UnknownType,
    UnknownVersion,
    VpkiError,
    from_code,
)

logger = logging.getLogger(__name__)

VERSION = 1
DEFAULT_MAX_FRAME = 1 << 20
_LEN = struct.Struct(">I")
_HEADER = struct.Struct(">HHQ")


class MessageType(enum.IntEnum):
    ECHO_REQ = 1
    ECHO_RESP = 2
    REGISTER_REQ = 10
    REGISTER_RESP = 11
    TICKET_REQ = 12
    TICKET_RESP = 13
    RESOLVE_TICKET_REQ = 14
    RESOLVE_TICKET_RESP = 15
    LIST_TICKETS_REQ = 16
    LIST_TICKETS_RESP = 17
    REVOKE_LTC_REQ = 18
    REVOKE_LTC_RESP = 19
    PSEUDONYM_REQ = 20
    PSEUDONYM_RESP = 21
    LOOKUP_TICKET_REQ = 22
    LOOKUP_TICKET_RESP = 23
    REVOKE_BY_TICKET_REQ = 24
    REVOKE_BY_TICKET_RESP = 25
    CRL_REQ = 26
    CRL_RESP = 27
    RA_RESOLVE_REQ = 30
    RA_RESOLVE_RESP = 31
    RA_REVOKE_REQ = 32
    RA_REVOKE_RESP = 33
    ERROR = 255


RESPONSE_TO = {
    t: MessageType(t + 1)
    for t in MessageType
    if t.name.endswith("_REQ")
}


# field kinds
BYTES, STR, INT, U128, BYTES_LIST, U128_LIST = "bytes", "str", "int", "u128", "bytes_list", "u128_list"


@dataclass(frozen=True)
class Field:
    tag: int
    name: str
    kind: str
    optional: bool = False


_RESOLUTION = (
    Field(1, "pseudonym_serial", U128),
    Field(2, "ticket_id", BYTES),
    Field(3, "ltc_serial", U128),
    Field(4, "revoked_pseudonym_serials", U128_LIST, optional=True),
    Field(5, "revoked_ticket_ids", BYTES_LIST, optional=True),
)

SCHEMAS: dict[MessageType, tuple[Field, ...]] = {
    MessageType.ECHO_REQ: (Field(1, "payload", BYTES), Field(2, "sleep_ms", INT, optional=True)),
    MessageType.ECHO_RESP: (Field(1, "payload", BYTES),),
    MessageType.REGISTER_REQ: (
        Field(1, "vehicle_id", STR),
        Field(2, "public_key", BYTES),
        Field(3, "valid_from", INT, optional=True),
        Field(4, "valid_until", INT, optional=True),
    ),
    MessageType.REGISTER_RESP: (Field(1, "ltc", BYTES),),
    MessageType.TICKET_REQ: (Field(1, "signed_request", BYTES),),
    MessageType.TICKET_RESP: (Field(1, "ticket", BYTES),),
    MessageType.RESOLVE_TICKET_REQ: (Field(1, "ticket_id", BYTES), Field(2, "ra_auth", BYTES)),
    MessageType.RESOLVE_TICKET_RESP: (Field(1, "ltc_serial", U128),),
    MessageType.LIST_TICKETS_REQ: (Field(1, "ltc_serial", U128), Field(2, "ra_auth", BYTES)),
    MessageType.LIST_TICKETS_RESP: (Field(1, "ticket_ids", BYTES_LIST),),
    MessageType.REVOKE_LTC_REQ: (Field(1, "ltc_serial", U128), Field(2, "ra_auth", BYTES)),
    MessageType.REVOKE_LTC_RESP: (),
    MessageType.PSEUDONYM_REQ: (Field(1, "batch", BYTES),),
    MessageType.PSEUDONYM_RESP: (Field(1, "pseudonyms", BYTES_LIST),),
    MessageType.LOOKUP_TICKET_REQ: (Field(1, "pseudonym_serial", U128), Field(2, "ra_auth", BYTES)),
    MessageType.LOOKUP_TICKET_RESP: (Field(1, "ticket_id", BYTES),),
    MessageType.REVOKE_BY_TICKET_REQ: (Field(1, "ticket_id", BYTES), Field(2, "ra_auth", BYTES)),
    MessageType.REVOKE_BY_TICKET_RESP: (Field(1, "serials", U128_LIST),),
    MessageType.CRL_REQ: (),
    MessageType.CRL_RESP: (Field(1, "crl", BYTES),),
    MessageType.RA_RESOLVE_REQ: (Field(1, "pseudonym_serial", U128),),
    MessageType.RA_RESOLVE_RESP: _RESOLUTION,
    MessageType.RA_REVOKE_REQ: (Field(1, "pseudonym_serial", U128),),
    MessageType.RA_REVOKE_RESP: _RESOLUTION,
    MessageType.ERROR: (
        Field(1, "code", STR),
        Field(2, "message", STR),
        Field(3, "step", STR, optional=True),
        Field(4, "index", INT, optional=True),
        Field(5, "completed", BYTES_LIST, optional=True),
        Field(6, "failed", STR, optional=True),
    ),
}


def _pack_value(kind: str, value: Any) -> bytes:
    if kind == BYTES:
        return bytes(value)
    if kind == STR:
        return tlv.text(value)
    if kind == INT:
        return tlv.i64(int(value))
    if kind == U128:
        return int(value).to_bytes(16, "big")
    if kind == BYTES_LIST:
        return tlv.encode_list(bytes(v) for v in value)
    if kind == U128_LIST:
        return tlv.encode_list(int(v).to_bytes(16, "big") for v in value)
    raise ValueError(f"unknown field kind {kind}")


def _unpack_value(kind: str, data: bytes) -> Any:
    if kind == BYTES:
        return data
    if kind == STR:
        return tlv.read_text(data)
    if kind == INT:
        return tlv.read_i64(data)
    if kind == U128:
        if len(data) != 16:
            raise DecodeError("bad u128 length")
        return int.from_bytes(data, "big")
    if kind == BYTES_LIST:
        return tlv.decode_list(data)
    if kind == U128_LIST:
        return [int.from_bytes(v, "big") for v in tlv.decode_list(data)]
    raise ValueError(f"unknown field kind {kind}")


def pack_body(message_type: MessageType, values: Mapping[str, Any]) -> bytes:
    fields = {}
    for f in SCHEMAS[MessageType(message_type)]:
        if values.get(f.name) is None:
            if f.optional:
                continue
            raise ValueError(f"{MessageType(message_type).name}: missing field {f.name!r}")
        fields[f.tag] = _pack_value(f.kind, values[f.name])
    return tlv.encode_record(fields)


def unpack_body(message_type: MessageType, body: bytes) -> dict[str, Any]:
    raw = tlv.decode_record(body)
    out: dict[str, Any] = {}
    for f in SCHEMAS[MessageType(message_type)]:
        if f.tag in raw:
            out[f.name] = _unpack_value(f.kind, raw[f.tag])
        elif f.optional:
            out[f.name] = None
        else:
            raise DecodeError(f"{MessageType(message_type).name}: missing field {f.name!r}")
    return out


@dataclass(frozen=True)
class Envelope:
    message_type: MessageType
    correlation_id: int
    body: bytes = b""
    version: int = VERSION

    @classmethod
    def build(cls, message_type: MessageType, correlation_id: int = 0, **values: Any) -> "Envelope":
        return cls(MessageType(message_type), correlation_id, pack_body(message_type, values))

    def fields(self) -> dict[str, Any]:
        return unpack_body(self.message_type, self.body)


def encode(envelope: Envelope, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    payload = _HEADER.pack(envelope.version, int(envelope.message_type),
                           envelope.correlation_id) + envelope.body
    if len(payload) > max_frame:
        raise OversizeFrame(f"frame of {len(payload)} bytes exceeds limit {max_frame}")
    return _LEN.pack(len(payload)) + payload


def _decode_payload(payload: bytes) -> Envelope:
    if len(payload) < _HEADER.size:
        raise TruncatedFrame("frame shorter than envelope header")
    version, mtype, correlation_id = _HEADER.unpack_from(payload, 0)
    if version != VERSION:
        raise UnknownVersion(f"unsupported protocol version {version}")
    try:
        message_type = MessageType(mtype)
    except ValueError:
        raise UnknownType(f"unknown message type {mtype}") from None
    return Envelope(message_type, correlation_id, bytes(payload[_HEADER.size:]), version)


def decode(data: bytes, max_frame: int = DEFAULT_MAX_FRAME) -> Envelope:
    """Decode exactly one frame."""
    if len(data) < _LEN.size:
        raise TruncatedFrame("missing length prefix")
    (length,) = _LEN.unpack_from(data, 0)
    if length > max_frame:
        raise OversizeFrame(f"frame of {length} bytes exceeds limit {max_frame}")
    if len(data) < _LEN.size + length:
        raise TruncatedFrame(f"expected {length} bytes, got {len(data) - _LEN.size}")
    if len(data) > _LEN.size + length:
        raise DecodeError("trailing bytes after frame")
    return _decode_payload(data[_LEN.size:])


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise TruncatedFrame("connection closed mid-frame")
            raise EOFError
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket, max_frame: int = DEFAULT_MAX_FRAME) -> Envelope:
    """Read one frame from a stream socket. Raises ``EOFError`` on clean close."""
    (length,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    if length > max_frame:
        raise OversizeFrame(f"frame of {length} bytes exceeds limit {max_frame}")
    try:
        payload = _recv_exact(sock, length)
    except EOFError:
        raise TruncatedFrame("connection closed mid-frame") from None
    return _decode_payload(payload)


def error_envelope(correlation_id: int, exc: BaseException) -> Envelope:
    if isinstance(exc, VpkiError):
        return Envelope.build(
            MessageType.ERROR, correlation_id,
            code=exc.code, message=exc.message, step=exc.step or None,
            index=getattr(exc, "index", None),
            completed=[c.encode() for c in getattr(exc, "completed", ())] or None,
            failed=getattr(exc, "failed", "") or None,
        )
    return Envelope.build(MessageType.ERROR, correlation_id, code="Internal",
                          message=f"{type(exc).__name__}: {exc}")


def raise_remote(envelope: Envelope) -> None:
    f = envelope.fields()
    err = from_code(f["code"], f["message"], f["step"] or "")
    if f["index"] is not None:
        err.index = f["index"]
    if f["completed"]:
        err.completed = tuple(c.decode() for c in f["completed"])
    if f["failed"]:
        err.failed = f["failed"]
    err.remote = True
    raise err


Handler = Callable[[dict[str, Any]], Mapping[str, Any]]


class GatewayServer:
    """Threaded server dispatching request envelopes to per-type handlers.

    Each request runs on a worker pool, so a slow request does not hold up
    others pipelined on the same connection.
    """

    def __init__(
        self,
        handlers: Mapping[MessageType, Handler],
        host: str = "127.0.0.1",
        port: int = 0,
        ssl_context: ssl.SSLContext | None = None,
        max_frame: int = DEFAULT_MAX_FRAME,
        workers: int = 32,
    ) -> None:
        self.handlers = dict(handlers)
        self.ssl_context = ssl_context
        self.max_frame = max_frame
        self._sock = socket.create_server((host, port))
        self.address = self._sock.getsockname()[:2]
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="gw-worker")
        self._conns: set[socket.socket] = set()
        self._lock = threading.Lock()
        self._closed = threading.Event()
        self._thread = threading.Thread(target=self._accept_loop, name="gw-accept", daemon=True)

    def start(self) -> "GatewayServer":
        self._thread.start()
        return self

    def __enter__(self) -> "GatewayServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn: socket.socket) -> None:
        if self.ssl_context is not None:
            try:
                conn.settimeout(10)
                conn = self.ssl_context.wrap_socket(conn, server_side=True)
                conn.settimeout(None)
            except (ssl.SSLError, OSError) as exc:
                logger.debug("TLS handshake failed: %s", exc)
                conn.close()
                return
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        with self._lock:
            self._conns.add(conn)
        write_lock = threading.Lock()
        try:
            while not self._closed.is_set():
                try:
                    request = read_frame(conn, self.max_frame)
                except EOFError:
                    return
                except DecodeError as exc:
                    # framing is unrecoverable once the stream is out of sync
                    self._send(conn, write_lock, error_envelope(0, exc))
                    return
                self._pool.submit(self._dispatch, conn, write_lock, request)
        except OSError:
            return
        finally:
            with self._lock:
                self._conns.discard(conn)
            try:
                conn.close()
            except OSError:
                pass

    def _dispatch(self, conn: socket.socket, write_lock: threading.Lock, request: Envelope) -> None:
        try:
            handler = self.handlers.get(request.message_type)
            if handler is None or request.message_type not in RESPONSE_TO:
                raise UnknownType(f"no handler for {request.message_type.name}")
            result = handler(request.fields())
            response = Envelope.build(RESPONSE_TO[request.message_type], request.correlation_id,
                                      **dict(result or {}))
        except Exception as exc:  # every failure goes back to the caller
            if not isinstance(exc, VpkiError):
                logger.exception("handler for %s failed", request.message_type.name)
            response = error_envelope(request.correlation_id, exc)
        self._send(conn, write_lock, response)

    def _send(self, conn: socket.socket, write_lock: threading.Lock, envelope: Envelope) -> None:
        try:
            data = encode(envelope, self.max_frame)
        except OversizeFrame as exc:
            data = encode(error_envelope(envelope.correlation_id, exc), self.max_frame)
        try:
            with write_lock:
                conn.sendall(data)
        except OSError:
            pass

    def close(self) -> None:
        self._closed.set()
        try:
            self._sock.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            c.close()
        self._pool.shutdown(wait=False, cancel_futures=True)


class Channel:
    """A client connection carrying pipelined requests, reconnecting on demand."""

    _ids = itertools.count(1 << 32)

    def __init__(
        self,
        address: tuple[str, int],
        ssl_context: ssl.SSLContext | None = None,
        server_hostname: str | None = None,
        max_frame: int = DEFAULT_MAX_FRAME,
    ) -> None:
        self.address = (address[0], int(address[1]))
        self.ssl_context = ssl_context
        self.server_hostname = server_hostname or self.address[0]
        self.max_frame = max_frame
        self._sock: socket.socket | None = None
        self._pending: dict[int, Future] = {}
        self._lock = threading.Lock()
        self._write_lock = threading.Lock()

    def _connect(self, timeout: float) -> socket.socket:
        with self._lock:
            if self._sock is not None:
                return self._sock
            try:
                sock = socket.create_connection(self.address, timeout=timeout)
                if self.ssl_context is not None:
                    sock = self.ssl_context.wrap_socket(sock, server_hostname=self.server_hostname)
            except (OSError, ssl.SSLError) as exc:
                raise ConnectionFailed(f"cannot connect to {self.address}: {exc}") from exc
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._sock = sock
            threading.Thread(target=self._read_loop, args=(sock,), daemon=True).start()
            return sock

    def _read_loop(self, sock: socket.socket) -> None:
        error: BaseException = ConnectionFailed("connection closed by peer")
        try:
            while True:
                response = read_frame(sock, self.max_frame)
                with self._lock:
                    fut = self._pending.pop(response.correlation_id, None)
                if fut is not None and not fut.done():
                    fut.set_result(response)
        except EOFError:
            pass
        except (OSError, DecodeError) as exc:
            error = ConnectionFailed(f"connection lost: {exc}")
        with self._lock:
            if self._sock is sock:
                self._sock = None
            pending, self._pending = self._pending, {}
        for fut in pending.values():
            if not fut.done():
                fut.set_exception(error)
        try:
            sock.close()
        except OSError:
            pass

    def request(self, envelope: Envelope, deadline: float) -> Envelope:
        """Send ``envelope`` and wait up to ``deadline`` seconds for its response."""
        if deadline <= 0:
            raise ValueError("deadline must be positive")
        # a caller-chosen id is kept; 0 means "assign one"
        cid = envelope.correlation_id or next(self._ids) & 0xFFFFFFFFFFFFFFFF
        envelope = Envelope(envelope.message_type, cid, envelope.body, envelope.version)
        data = encode(envelope, self.max_frame)
        sock = self._connect(deadline)
        fut: Future = Future()
        with self._lock:
            if cid in self._pending:
                raise ValueError(f"correlation id {cid} already in flight")
            self._pending[cid] = fut
        try:
            with self._write_lock:
                sock.sendall(data)
        except OSError as exc:
            with self._lock:
                self._pending.pop(cid, None)
            self._drop(sock)
            raise ConnectionFailed(f"send failed: {exc}") from exc
        try:
            response = fut.result(timeout=deadline)
        except FutureTimeout:
            with self._lock:
                self._pending.pop(cid, None)
            raise Timeout(f"{envelope.message_type.name} timed out after {deadline:.3f}s") from None
        if response.message_type is MessageType.ERROR:
            raise_remote(response)
        return response

    def call(self, message_type: MessageType, deadline: float = 30.0, **values: Any) -> dict[str, Any]:
        return self.request(Envelope.build(message_type, **values), deadline).fields()

    def _drop(self, sock: socket.socket) -> None:
        with self._lock:
            if self._sock is sock:
                self._sock = None
        try:
            sock.close()
        except OSError:
            pass

    def close(self) -> None:
        with self._lock:
            sock, self._sock = self._sock, None
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()


def call(
    target: tuple[str, int] | Channel,
    envelope: Envelope,
    deadline: float,
    ssl_context: ssl.SSLContext | None = None,
) -> Envelope:
    """One request/response exchange; opens a throwaway channel for an address."""
    if isinstance(target, Channel):
        return target.request(envelope, deadline)
    channel = Channel(target, ssl_context)
    try:
        return channel.request(envelope, deadline)
    finally:
        channel.close()
