"""Length-prefixed JSON messages and the sessions that carry them.

A frame is a 4-byte big-endian length followed by a UTF-8 JSON object
``{"version": 1, "type": ..., "body": {...}}``. Binary body fields are
base64 strings. Sessions move whole frames over an in-process loopback or a
TCP socket (optionally TLS-wrapped); both decode with the same code path.
"""

from __future__ import annotations

import enum
import json
import queue
import socket
import ssl
import struct
import threading
from dataclasses import dataclass, field
from urllib.parse import urlparse

VERSION = 1
MAX_FRAME = 16 * 1024 * 1024
HEADER = struct.Struct(">I")


class WireError(Exception):
    pass


class MalformedFrame(WireError):
    pass


class FrameTooLarge(MalformedFrame):
    pass


class UnknownType(MalformedFrame):
    pass


class UnknownVersion(MalformedFrame):
    pass


class ConnectionFailure(WireError, ConnectionError):
    pass


class HandshakeFailure(ConnectionFailure):
    pass


class MessageType(str, enum.Enum):
    CHALLENGE = "ChallengeMsg"
    RESPONSE = "ResponseMsg"
    SECRET_REQUEST = "SecretRequestMsg"
    SECRET_REPLY = "SecretReplyMsg"
    ERROR = "ErrorMsg"


REQUIRED_FIELDS = {
    MessageType.CHALLENGE: ("nonce", "prover_id"),
    MessageType.RESPONSE: ("nonce", "pcr", "signature", "boot_id", "records"),
    MessageType.SECRET_REQUEST: ("prover_id", "boot_id"),
    MessageType.SECRET_REPLY: ("secret",),
    MessageType.ERROR: ("error",),
}


@dataclass(frozen=True)
class WireMessage:
    type: MessageType
    body: dict = field(default_factory=dict)
    version: int = VERSION


def encode(msg: WireMessage) -> bytes:
    payload = json.dumps(
        {"version": msg.version, "type": MessageType(msg.type).value, "body": msg.body},
        separators=(",", ":"), ensure_ascii=False, allow_nan=False,
    ).encode("utf-8")
    if len(payload) > MAX_FRAME:
        raise FrameTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(len(payload)) + payload


def decode_payload(payload: bytes) -> WireMessage:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, ValueError, RecursionError) as exc:
        raise MalformedFrame(f"payload is not UTF-8 JSON: {type(exc).__name__}") from None
    if not isinstance(obj, dict) or set(obj) != {"version", "type", "body"}:
        raise MalformedFrame("frame must be an object with exactly version, type and body")
    version = obj["version"]
    if isinstance(version, bool) or not isinstance(version, int):
        raise MalformedFrame("version must be an integer")
    if version != VERSION:
        raise UnknownVersion(f"unsupported version {version}")
    try:
        mtype = MessageType(obj["type"])
    except (ValueError, TypeError):
        raise UnknownType(f"unknown message type {obj['type']!r}") from None
    body = obj["body"]
    if not isinstance(body, dict):
        raise MalformedFrame("body must be an object")
    missing = [k for k in REQUIRED_FIELDS[mtype] if k not in body]
    if missing:
        raise MalformedFrame(f"{mtype.value} body lacks {missing}")
    return WireMessage(mtype, body, version)


def decode(frame: bytes) -> WireMessage:
    """Decode exactly one complete frame."""
    if len(frame) < HEADER.size:
        raise MalformedFrame("truncated header")
    (length,) = HEADER.unpack_from(frame)
    if length > MAX_FRAME:
        raise FrameTooLarge(f"declared length {length} exceeds {MAX_FRAME}")
    if len(frame) - HEADER.size != length:
        raise MalformedFrame(f"declared length {length}, got {len(frame) - HEADER.size} bytes")
    return decode_payload(bytes(frame[HEADER.size:]))


class FrameDecoder:
    """Incremental decoder for a byte stream carrying consecutive frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[WireMessage]:
        self._buf += data
        out = []
        while len(self._buf) >= HEADER.size:
            (length,) = HEADER.unpack_from(self._buf)
            if length > MAX_FRAME:
                raise FrameTooLarge(f"declared length {length} exceeds {MAX_FRAME}")
            end = HEADER.size + length
            if len(self._buf) < end:
                break
            payload = bytes(self._buf[HEADER.size:end])
            del self._buf[:end]
            out.append(decode_payload(payload))
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)

    def close(self) -> None:
        if self._buf:
            raise MalformedFrame(f"stream ended inside a frame ({len(self._buf)} bytes pending)")


def error_message(text: str) -> WireMessage:
    return WireMessage(MessageType.ERROR, {"error": text})


class Session:
    def send(self, msg: WireMessage) -> None:
        raise NotImplementedError

    def receive(self, timeout: float | None = None) -> WireMessage:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_CLOSED = object()


class LoopbackSession(Session):
    """One end of an in-process frame pipe."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self.closed = False

    def send(self, msg: WireMessage) -> None:
        if self.closed:
            raise ConnectionFailure("session is closed")
        self._outbox.put(encode(msg))

    def receive(self, timeout: float | None = None) -> WireMessage:
        if self.closed:
            raise ConnectionFailure("session is closed")
        try:
            frame = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no message within timeout") from None
        if frame is _CLOSED:
            self.closed = True
            raise ConnectionFailure("peer closed the session")
        return decode(frame)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._outbox.put(_CLOSED)


def loopback_pair() -> tuple[LoopbackSession, LoopbackSession]:
    a_to_b, b_to_a = queue.Queue(), queue.Queue()
    return LoopbackSession(b_to_a, a_to_b), LoopbackSession(a_to_b, b_to_a)


class TcpSession(Session):
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.closed = False
        # bytes of a partially received frame survive a receive timeout
        self._buf = bytearray()

    def send(self, msg: WireMessage) -> None:
        if self.closed:
            raise ConnectionFailure("session is closed")
        try:
            self.sock.sendall(encode(msg))
        except OSError as exc:
            raise ConnectionFailure(str(exc)) from exc

    def _fill(self, n: int) -> None:
        while len(self._buf) < n:
            chunk = self.sock.recv(min(n - len(self._buf), 1 << 16))
            if not chunk:
                raise ConnectionFailure("peer closed the connection")
            self._buf += chunk

    def receive(self, timeout: float | None = None) -> WireMessage:
        if self.closed:
            raise ConnectionFailure("session is closed")
        try:
            self.sock.settimeout(timeout)
            self._fill(HEADER.size)
            (length,) = HEADER.unpack_from(self._buf)
            if length > MAX_FRAME:
                self._buf.clear()
                raise FrameTooLarge(f"declared length {length} exceeds {MAX_FRAME}")
            self._fill(HEADER.size + length)
        except socket.timeout:
            raise TimeoutError("no message within timeout") from None
        except ConnectionFailure:
            raise
        except OSError as exc:
            raise ConnectionFailure(str(exc)) from exc
        payload = bytes(self._buf[HEADER.size:HEADER.size + length])
        del self._buf[:HEADER.size + length]
        return decode_payload(payload)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()


def connect(host: str, port: int, timeout: float | None = 10.0,
            ssl_context: ssl.SSLContext | None = None) -> TcpSession:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise ConnectionFailure(f"cannot connect to {host}:{port}: {exc}") from exc
    if ssl_context is not None:
        try:
            sock = ssl_context.wrap_socket(sock, server_hostname=host)
        except (ssl.SSLError, OSError) as exc:
            sock.close()
            raise HandshakeFailure(str(exc)) from exc
    return TcpSession(sock)


class TcpListener:
    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 ssl_context: ssl.SSLContext | None = None):
        self.ssl_context = ssl_context
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._sock.bind((host, port))
        except OSError:
            self._sock.close()
            raise
        self._sock.listen()

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def accept(self, timeout: float | None = None) -> TcpSession:
        self._sock.settimeout(timeout)
        try:
            conn, _ = self._sock.accept()
        except socket.timeout:
            raise TimeoutError("no connection within timeout") from None
        except OSError as exc:
            raise ConnectionFailure(str(exc)) from exc
        conn.settimeout(None)
        if self.ssl_context is not None:
            try:
                conn = self.ssl_context.wrap_socket(conn, server_side=True)
            except (ssl.SSLError, OSError) as exc:
                conn.close()
                raise HandshakeFailure(str(exc)) from exc
        return TcpSession(conn)

    def close(self) -> None:
        self._sock.close()


_loopback_lock = threading.Lock()
_loopback_waiting: dict[str, queue.Queue] = {}


def _loopback_queue(name: str) -> queue.Queue:
    with _loopback_lock:
        return _loopback_waiting.setdefault(name, queue.Queue())


def parse_endpoint(endpoint: str) -> tuple[str, str, int]:
    url = urlparse(endpoint)
    if url.scheme == "loopback":
        return "loopback", url.netloc or url.path, 0
    if url.scheme == "tcp":
        if url.hostname is None or url.port is None:
            raise ValueError(f"tcp endpoint needs host and port: {endpoint}")
        return "tcp", url.hostname, url.port
    raise ValueError(f"unsupported endpoint {endpoint!r}; use tcp://host:port or loopback://name")


def open_session(endpoint: str, role: str, timeout: float | None = 10.0,
                 ssl_context: ssl.SSLContext | None = None) -> Session:
    """Open one session. ``role`` is ``"client"`` (connect) or ``"server"`` (accept one peer)."""
    scheme, host, port = parse_endpoint(endpoint)
    if role not in ("client", "server"):
        raise ValueError(f"role must be client or server, got {role!r}")
    if scheme == "loopback":
        waiting = _loopback_queue(host)
        if role == "client":
            mine, theirs = loopback_pair()
            waiting.put(theirs)
            return mine
        try:
            return waiting.get(timeout=timeout)
        except queue.Empty:
            raise ConnectionFailure(f"no loopback peer on {host!r}") from None
    if role == "client":
        return connect(host, port, timeout, ssl_context)
    listener = TcpListener(host, port, ssl_context)
    try:
        return listener.accept(timeout)
    finally:
        listener.close()
