"""Length-prefixed, checksummed framing plus in-process and TCP connections.

Frame layout (all integers little-endian)::

    magic  b"GRL1"     4 bytes
    kind   u8          message kind
    length u32         payload byte count
    payload            ``length`` bytes
    crc32  u32         crc32 of payload

Both connection kinds carry encoded frames, so the in-process path exercises
exactly the same codec as sockets.
"""

from __future__ import annotations

import heapq
import itertools
import json
import queue
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Iterable

import numpy as np

from .rl import Transition

MAGIC = b"GRL1"
HEADER = struct.Struct("<4sBI")
TRAILER = struct.Struct("<I")
DEFAULT_MAX_PAYLOAD = 64 * 1024 * 1024


class MessageKind(IntEnum):
    GRAD_PUSH = 1
    PARAM_FETCH_REQ = 2
    PARAM_FETCH_RESP = 3
    PUT_EXP = 4
    SAMPLE_REQ = 5
    SAMPLE_RESP = 6
    STATS_REQ = 7
    STATS_RESP = 8
    ACK = 9
    ERR = 10


class ProtocolError(Exception):
    """A frame or payload violates the wire format."""


class BadMagic(ProtocolError):
    pass


class BadChecksum(ProtocolError):
    pass


class UnknownKind(ProtocolError):
    pass


class PayloadTooLarge(ProtocolError):
    pass


class MalformedPayload(ProtocolError):
    pass


class TransportError(ConnectionError):
    pass


class ConnectionClosed(TransportError):
    pass


class TruncatedFrame(ProtocolError, TransportError):
    """The byte stream ended in the middle of a frame."""


class RemoteError(RuntimeError):
    def __init__(self, code: int, message: str):
        super().__init__(f"remote error {code}: {message}")
        self.code = code
        self.message = message


# error codes carried in ERR frames
ERR_PROTOCOL = 1
ERR_NOT_READY = 2
ERR_UNAVAILABLE = 3
ERR_INTERNAL = 4


# --- payload helpers -------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, fmt: str):
        st = struct.Struct("<" + fmt)
        if self.pos + st.size > len(self.data):
            raise MalformedPayload("payload ends inside a field")
        vals = st.unpack_from(self.data, self.pos)
        self.pos += st.size
        return vals if len(vals) > 1 else vals[0]

    def floats(self, n: int) -> np.ndarray:
        if n < 0 or self.pos + 8 * n > len(self.data):
            raise MalformedPayload("payload ends inside a float array")
        arr = np.frombuffer(self.data, dtype="<f8", count=n, offset=self.pos).astype(np.float64)
        self.pos += 8 * n
        return arr

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedPayload("payload ends inside a byte string")
        out = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return out

    def done(self):
        if self.pos != len(self.data):
            raise MalformedPayload(f"{len(self.data) - self.pos} trailing payload bytes")


def _f64(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _encode_transition(t: Transition) -> bytes:
    dims = t.state.shape[0]
    return b"".join([
        struct.pack("<I", dims),
        _f64(t.state),
        struct.pack("<Id", t.action, t.reward),
        _f64(t.next_state),
        struct.pack("<BIQ", int(t.terminal), t.actor_id, t.step),
    ])


def _decode_transition(r: _Reader) -> Transition:
    dims = r.take("I")
    state = r.floats(dims)
    action, reward = r.take("Id")
    next_state = r.floats(dims)
    terminal, actor_id, step = r.take("BIQ")
    if terminal > 1:
        raise MalformedPayload("terminal flag must be 0 or 1")
    return Transition(state, action, reward, next_state, bool(terminal), actor_id, step)


# --- messages ----------------------------------------------------------------


class Message:
    kind: MessageKind

    def payload(self) -> bytes:
        raise NotImplementedError

    @classmethod
    def from_payload(cls, data: bytes) -> "Message":
        raise NotImplementedError

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return self.payload() == other.payload()

    def __hash__(self):
        return hash((self.kind, self.payload()))


@dataclass(eq=False)
class GradPush(Message):
    base_version: int
    slices: list[tuple[int, np.ndarray]]
    kind = MessageKind.GRAD_PUSH

    def payload(self) -> bytes:
        parts = [struct.pack("<QI", self.base_version, len(self.slices))]
        for shard_id, data in self.slices:
            data = np.asarray(data)
            parts.append(struct.pack("<IQ", shard_id, data.shape[0]))
            parts.append(_f64(data))
        return b"".join(parts)

    @classmethod
    def from_payload(cls, data: bytes) -> "GradPush":
        r = _Reader(data)
        base, n = r.take("QI")
        slices = []
        for _ in range(n):
            shard_id, length = r.take("IQ")
            slices.append((shard_id, r.floats(length)))
        r.done()
        return cls(base, slices)


@dataclass(eq=False)
class ParamFetchReq(Message):
    shards: frozenset[int] | None = None
    kind = MessageKind.PARAM_FETCH_REQ

    def payload(self) -> bytes:
        if not self.shards:
            return struct.pack("<I", 0)
        n_bits = max(self.shards) + 1
        bitmap = bytearray((n_bits + 7) // 8)
        for s in self.shards:
            bitmap[s // 8] |= 1 << (s % 8)
        return struct.pack("<I", n_bits) + bytes(bitmap)

    @classmethod
    def from_payload(cls, data: bytes) -> "ParamFetchReq":
        r = _Reader(data)
        n_bits = r.take("I")
        bitmap = r.raw((n_bits + 7) // 8)
        r.done()
        if n_bits == 0:
            return cls(None)
        shards = frozenset(i for i in range(n_bits) if bitmap[i // 8] >> (i % 8) & 1)
        return cls(shards or None)


@dataclass
class ShardSlice:
    shard_id: int
    offset: int
    data: np.ndarray


@dataclass(eq=False)
class ParamFetchResp(Message):
    version: int
    slices: list[ShardSlice]
    kind = MessageKind.PARAM_FETCH_RESP

    def payload(self) -> bytes:
        parts = [struct.pack("<QI", self.version, len(self.slices))]
        for sl in self.slices:
            parts.append(struct.pack("<IQQ", sl.shard_id, sl.offset, sl.data.shape[0]))
            parts.append(_f64(sl.data))
        return b"".join(parts)

    @classmethod
    def from_payload(cls, data: bytes) -> "ParamFetchResp":
        r = _Reader(data)
        version, n = r.take("QI")
        slices = []
        for _ in range(n):
            shard_id, offset, length = r.take("IQQ")
            slices.append(ShardSlice(shard_id, offset, r.floats(length)))
        r.done()
        return cls(version, slices)


@dataclass(eq=False)
class PutExp(Message):
    transition: Transition
    kind = MessageKind.PUT_EXP

    def payload(self) -> bytes:
        return _encode_transition(self.transition)

    @classmethod
    def from_payload(cls, data: bytes) -> "PutExp":
        r = _Reader(data)
        t = _decode_transition(r)
        r.done()
        return cls(t)


@dataclass(eq=False)
class SampleReq(Message):
    batch: int
    kind = MessageKind.SAMPLE_REQ

    def payload(self) -> bytes:
        return struct.pack("<I", self.batch)

    @classmethod
    def from_payload(cls, data: bytes) -> "SampleReq":
        r = _Reader(data)
        batch = r.take("I")
        r.done()
        return cls(batch)


@dataclass(eq=False)
class SampleResp(Message):
    transitions: list[Transition]
    kind = MessageKind.SAMPLE_RESP

    def payload(self) -> bytes:
        return struct.pack("<I", len(self.transitions)) + b"".join(
            _encode_transition(t) for t in self.transitions
        )

    @classmethod
    def from_payload(cls, data: bytes) -> "SampleResp":
        r = _Reader(data)
        n = r.take("I")
        out = [_decode_transition(r) for _ in range(n)]
        r.done()
        return cls(out)


@dataclass(eq=False)
class StatsReq(Message):
    kind = MessageKind.STATS_REQ

    def payload(self) -> bytes:
        return b""

    @classmethod
    def from_payload(cls, data: bytes) -> "StatsReq":
        if data:
            raise MalformedPayload("STATS_REQ carries no payload")
        return cls()


@dataclass(eq=False)
class StatsResp(Message):
    stats: dict = field(default_factory=dict)
    kind = MessageKind.STATS_RESP

    def payload(self) -> bytes:
        return json.dumps(self.stats, sort_keys=True).encode("utf-8")

    @classmethod
    def from_payload(cls, data: bytes) -> "StatsResp":
        try:
            stats = json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise MalformedPayload(f"bad stats json: {exc}") from None
        if not isinstance(stats, dict):
            raise MalformedPayload("stats payload must be a json object")
        return cls(stats)


@dataclass(eq=False)
class Ack(Message):
    code: int = 0
    value: int = 0
    kind = MessageKind.ACK

    def payload(self) -> bytes:
        return struct.pack("<IQ", self.code, self.value)

    @classmethod
    def from_payload(cls, data: bytes) -> "Ack":
        r = _Reader(data)
        code, value = r.take("IQ")
        r.done()
        return cls(code, value)


@dataclass(eq=False)
class Err(Message):
    code: int
    message: str = ""
    kind = MessageKind.ERR

    def payload(self) -> bytes:
        return struct.pack("<H", self.code) + self.message.encode("utf-8")

    @classmethod
    def from_payload(cls, data: bytes) -> "Err":
        r = _Reader(data)
        code = r.take("H")
        text = r.raw(len(data) - 2)
        try:
            return cls(code, text.decode("utf-8"))
        except UnicodeDecodeError:
            raise MalformedPayload("error text is not utf-8") from None


MESSAGE_TYPES: dict[MessageKind, type[Message]] = {
    cls.kind: cls
    for cls in (GradPush, ParamFetchReq, ParamFetchResp, PutExp, SampleReq, SampleResp,
                StatsReq, StatsResp, Ack, Err)
}


# --- framing -----------------------------------------------------------------


def encode(msg: Message, max_payload: int = DEFAULT_MAX_PAYLOAD) -> bytes:
    payload = msg.payload()
    if len(payload) > max_payload:
        raise PayloadTooLarge(f"payload of {len(payload)} bytes exceeds {max_payload}")
    return b"".join([
        HEADER.pack(MAGIC, int(msg.kind), len(payload)),
        payload,
        TRAILER.pack(zlib.crc32(payload)),
    ])


def _check_header(header: bytes, max_payload: int) -> tuple[MessageKind, int]:
    magic, kind, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    try:
        kind = MessageKind(kind)
    except ValueError:
        raise UnknownKind(f"unknown message kind {kind}") from None
    if length > max_payload:
        raise PayloadTooLarge(f"declared payload {length} exceeds {max_payload}")
    return kind, length


def _finish(kind: MessageKind, payload: bytes, crc: bytes) -> Message:
    (expected,) = TRAILER.unpack(crc)
    if zlib.crc32(payload) != expected:
        raise BadChecksum("payload crc32 mismatch")
    return MESSAGE_TYPES[kind].from_payload(payload)


def decode_prefix(data: bytes, max_payload: int = DEFAULT_MAX_PAYLOAD) -> tuple[Message, int]:
    """Decode the first frame in ``data``; return it and the bytes consumed."""
    if len(data) < HEADER.size:
        if MAGIC[:len(data)] != bytes(data[:4]):
            raise BadMagic(f"bad magic {bytes(data[:4])!r}")
        raise TruncatedFrame(f"only {len(data)} header bytes")
    kind, length = _check_header(bytes(data[:HEADER.size]), max_payload)
    end = HEADER.size + length + TRAILER.size
    if len(data) < end:
        raise TruncatedFrame(f"frame needs {end} bytes, have {len(data)}")
    payload = bytes(data[HEADER.size:HEADER.size + length])
    return _finish(kind, payload, bytes(data[end - TRAILER.size:end])), end


def decode(data: bytes, max_payload: int = DEFAULT_MAX_PAYLOAD) -> Message:
    msg, used = decode_prefix(data, max_payload)
    if used != len(data):
        raise ProtocolError(f"{len(data) - used} bytes after the frame")
    return msg


# --- connections -------------------------------------------------------------


class Connection:
    """Ordered, reliable, at-most-once message pipe."""

    def send(self, msg: Message) -> None:
        raise NotImplementedError

    def recv(self, timeout: float | None = None) -> Message:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def request(self, msg: Message, timeout: float | None = None) -> Message:
        self.send(msg)
        reply = self.recv(timeout)
        if isinstance(reply, Err):
            raise RemoteError(reply.code, reply.message)
        return reply

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_CLOSED = object()


class InProcessConnection(Connection):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def send(self, msg: Message) -> None:
        if self._closed:
            raise ConnectionClosed("connection is closed")
        self._outbox.put(encode(msg))

    def send_raw(self, data: bytes) -> None:
        self._outbox.put(data)

    def recv(self, timeout: float | None = None) -> Message:
        if self._closed:
            raise ConnectionClosed("connection is closed")
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no message within timeout") from None
        if item is _CLOSED:
            self._closed = True
            raise ConnectionClosed("peer closed the connection")
        return decode(item)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


def in_process_channel() -> tuple[InProcessConnection, InProcessConnection]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return InProcessConnection(b_to_a, a_to_b), InProcessConnection(a_to_b, b_to_a)


class SocketConnection(Connection):
    def __init__(self, sock: socket.socket, max_payload: int = DEFAULT_MAX_PAYLOAD):
        self.sock = sock
        self.max_payload = max_payload
        self._send_lock = threading.Lock()
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass

    def send(self, msg: Message) -> None:
        self.send_raw(encode(msg, self.max_payload))

    def send_raw(self, data: bytes) -> None:
        with self._send_lock:
            try:
                self.sock.sendall(data)
            except OSError as exc:
                raise ConnectionClosed(f"send failed: {exc}") from None

    def _read_exact(self, n: int, frame_started: bool) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except socket.timeout:
                raise TimeoutError("socket receive timed out") from None
            except OSError as exc:
                raise ConnectionClosed(f"receive failed: {exc}") from None
            if not chunk:
                if not buf and not frame_started:
                    raise ConnectionClosed("peer closed the connection")
                raise TruncatedFrame("connection closed mid-frame")
            buf += chunk
        return bytes(buf)

    def recv(self, timeout: float | None = None) -> Message:
        self.sock.settimeout(timeout)
        header = self._read_exact(HEADER.size, frame_started=False)
        kind, length = _check_header(header, self.max_payload)
        payload = self._read_exact(length, frame_started=True)
        crc = self._read_exact(TRAILER.size, frame_started=True)
        return _finish(kind, payload, crc)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class Listener:
    def __init__(self, sock: socket.socket):
        self.sock = sock

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    def accept(self) -> SocketConnection:
        conn, _ = self.sock.accept()
        return SocketConnection(conn)

    def close(self) -> None:
        self.sock.close()


def socket_listen(host: str = "127.0.0.1", port: int = 0, backlog: int = 64) -> Listener:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    sock.listen(backlog)
    return Listener(sock)


def backoff_delays(retries: int = 6, base: float = 0.1, cap: float = 5.0) -> list[float]:
    """Sleep before each retry: ``base * 2**n`` capped at ``cap``."""
    return [min(base * 2**n, cap) for n in range(retries)]


def socket_connect(
    address: tuple[str, int],
    retries: int = 6,
    base: float = 0.1,
    cap: float = 5.0,
    sleep: Callable[[float], None] = time.sleep,
) -> SocketConnection:
    delays = backoff_delays(retries, base, cap)
    for attempt in range(retries + 1):
        try:
            return SocketConnection(socket.create_connection(address))
        except OSError as exc:
            if attempt == retries:
                raise TransportError(f"could not connect to {address}: {exc}") from None
            sleep(delays[attempt])
    raise AssertionError("unreachable")


# --- serving -----------------------------------------------------------------

Handler = Callable[[Message], Message]


def serve_connection(conn: Connection, handler: Handler) -> None:
    """Answer requests on ``conn`` until the peer goes away.

    A frame that fails to decode gets an ERR reply and the connection is
    dropped, since the stream can no longer be trusted.
    """
    while True:
        try:
            msg = conn.recv()
        except (ConnectionClosed, TruncatedFrame):
            break
        except ProtocolError as exc:
            try:
                conn.send(Err(ERR_PROTOCOL, str(exc)))
            except TransportError:
                pass
            break
        try:
            reply = handler(msg)
        except ProtocolError as exc:
            reply = Err(ERR_PROTOCOL, str(exc))
        except RemoteError as exc:
            reply = Err(exc.code, exc.message)
        except Exception as exc:  # keep serving other requests
            reply = Err(ERR_INTERNAL, f"{type(exc).__name__}: {exc}")
        try:
            conn.send(reply)
        except TransportError:
            break
    conn.close()


class ServiceHost:
    """Runs ``handler`` for any number of in-process or TCP clients."""

    def __init__(self, handler: Handler):
        self.handler = handler
        self._threads: list[threading.Thread] = []
        self._listener: Listener | None = None

    def _spawn(self, conn: Connection) -> None:
        t = threading.Thread(target=serve_connection, args=(conn, self.handler), daemon=True)
        t.start()
        self._threads.append(t)

    def connect_in_process(self) -> InProcessConnection:
        client, server = in_process_channel()
        self._spawn(server)
        return client

    def listen(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        return self.serve(socket_listen(host, port))

    def serve(self, listener: Listener) -> tuple[str, int]:
        """Accept clients on an already bound listener in a background thread."""
        self._listener = listener
        threading.Thread(target=self._accept_loop, daemon=True).start()
        return listener.address

    def _accept_loop(self) -> None:
        while True:
            try:
                conn = self._listener.accept()
            except OSError:
                return
            self._spawn(conn)

    def close(self) -> None:
        if self._listener is not None:
            self._listener.close()
            self._listener = None


class DelayLine:
    """Test shim that holds each request for a random delay before delivery.

    Requests from every client pass through one dispatcher thread in release
    order, so ``log`` is exactly the order in which the upstream service saw
    them.
    """

    def __init__(self, upstream: Connection, delay: Callable[[Message], float]):
        self.upstream = upstream
        self.delay = delay
        self.log: list[Message] = []
        self._heap: list = []
        self._seq = itertools.count()
        self._cond = threading.Condition()
        self._stopped = False
        self._dispatcher = threading.Thread(target=self._dispatch, daemon=True)
        self._dispatcher.start()

    def connect(self) -> InProcessConnection:
        client, shim_end = in_process_channel()
        threading.Thread(target=self._intake, args=(shim_end,), daemon=True).start()
        return client

    def _intake(self, end: InProcessConnection) -> None:
        while True:
            try:
                msg = end.recv()
            except ConnectionClosed:
                return
            release = time.monotonic() + self.delay(msg)
            with self._cond:
                heapq.heappush(self._heap, (release, next(self._seq), msg, end))
                self._cond.notify()

    def _dispatch(self) -> None:
        while True:
            with self._cond:
                while not self._stopped and (
                    not self._heap or self._heap[0][0] > time.monotonic()
                ):
                    wait = self._heap[0][0] - time.monotonic() if self._heap else None
                    self._cond.wait(wait)
                if self._stopped:
                    return
                _, _, msg, end = heapq.heappop(self._heap)
            self.log.append(msg)
            self.upstream.send(msg)
            reply = self.upstream.recv()
            try:
                end.send(reply)
            except ConnectionClosed:
                pass

    def close(self) -> None:
        with self._cond:
            self._stopped = True
            self._cond.notify()


def scripted_exchange(conn: Connection, script: Iterable[Message]) -> list[tuple[str, bytes]]:
    """Send each message, record (kind, payload) of every reply."""
    trace = []
    for msg in script:
        conn.send(msg)
        reply = conn.recv()
        trace.append((reply.kind.name, reply.payload()))
    return trace
