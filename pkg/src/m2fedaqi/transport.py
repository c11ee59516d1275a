"""Wire protocol: frames, messages, the weight codec and mutual-TLS sessions.

Frame layout (little-endian)::

    u32 length | u8 version | u8 kind | u32 round | payload[length] | u32 crc32(payload)

so a frame costs ``14 + len(payload)`` bytes on the wire. Message payloads are
``u32 json_length | json | [weights]`` where weights use :func:`encode_weights`.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import queue
import socket
import ssl
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AuthError, CodecError, ProtocolError

log = logging.getLogger(__name__)

VERSION = 1
HEADER = struct.Struct("<IBBI")
TRAILER = struct.Struct("<I")
FRAME_OVERHEAD = HEADER.size + TRAILER.size
DEFAULT_MAX_FRAME = 64 * 1024 * 1024


class Kind(enum.IntEnum):
    JOIN_REQUEST = 1
    JOIN_ACCEPT = 2
    JOIN_REJECT = 3
    ROUND_START = 4
    ROUND_UPDATE = 5
    ROUND_RESULT = 6
    SHUTDOWN = 7


@dataclass(frozen=True)
class Frame:
    kind: int
    round: int
    payload: bytes
    version: int = VERSION

    @property
    def wire_size(self) -> int:
        return FRAME_OVERHEAD + len(self.payload)


def encode_frame(frame: Frame) -> bytes:
    header = HEADER.pack(len(frame.payload), frame.version, frame.kind, frame.round)
    return header + frame.payload + TRAILER.pack(zlib.crc32(frame.payload))


def parse_header(buf: bytes, max_frame: int = DEFAULT_MAX_FRAME):
    """Validate a frame header; returns ``(length, version, kind, round)``."""
    length, version, kind, rnd = HEADER.unpack(buf)
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    if length > max_frame:
        raise ProtocolError(f"frame of {length} bytes exceeds the {max_frame}-byte limit")
    return length, version, kind, rnd


def decode_frame(buf: bytes, max_frame: int = DEFAULT_MAX_FRAME) -> Frame:
    if len(buf) < FRAME_OVERHEAD:
        raise ProtocolError(f"frame too short: {len(buf)} bytes")
    length, version, kind, rnd = parse_header(buf[: HEADER.size], max_frame)
    if len(buf) != FRAME_OVERHEAD + length:
        raise ProtocolError(f"frame length mismatch: header says {length}, got {len(buf) - FRAME_OVERHEAD}")
    payload = bytes(buf[HEADER.size : HEADER.size + length])
    (crc,) = TRAILER.unpack(buf[HEADER.size + length :])
    if zlib.crc32(payload) != crc:
        raise ProtocolError("crc mismatch")
    return Frame(kind, rnd, payload, version)


# ---------------------------------------------------------------------------
# Weight codec
# ---------------------------------------------------------------------------


def encode_weights(vec) -> bytes:
    """``u64 count`` followed by little-endian float32 values. Rejects NaN/Inf."""
    v = np.asarray(vec, dtype=np.float32).ravel()
    if not np.isfinite(v).all():
        raise CodecError(f"refusing to encode non-finite weight at index {int(np.argmin(np.isfinite(v)))}")
    return struct.pack("<Q", v.size) + v.astype("<f4").tobytes()


def decode_weights(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise CodecError(f"weight blob too short: expected at least 8 bytes, got {len(buf)}")
    (count,) = struct.unpack_from("<Q", buf)
    expected = 8 + 4 * count
    if len(buf) != expected:
        raise CodecError(f"weight blob length mismatch: expected {expected} bytes, got {len(buf)}")
    v = np.frombuffer(buf, dtype="<f4", count=count, offset=8).astype(np.float32)
    if not np.isfinite(v).all():
        raise CodecError(f"non-finite weight at index {int(np.argmin(np.isfinite(v)))}")
    return v


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------


@dataclass
class JoinRequest:
    client_name: str
    d_tab: int
    dataset_size: int
    kind = Kind.JOIN_REQUEST


@dataclass
class JoinAccept:
    client_id: int
    model_config: dict
    federation_config: dict
    kind = Kind.JOIN_ACCEPT


@dataclass
class JoinReject:
    reason: str
    kind = Kind.JOIN_REJECT


@dataclass
class RoundStart:
    round: int
    weights: np.ndarray = field(repr=False)
    layout_hash: str = ""
    kind = Kind.ROUND_START


@dataclass
class RoundUpdate:
    round: int
    weights: np.ndarray = field(repr=False)
    n_samples: int = 0
    loss: float = 0.0
    metrics: dict | None = None
    layout_hash: str = ""
    kind = Kind.ROUND_UPDATE


@dataclass
class RoundResult:
    round: int
    metrics: dict | None = None
    kind = Kind.ROUND_RESULT


@dataclass
class Shutdown:
    final_hash: str
    kind = Kind.SHUTDOWN


MESSAGE_TYPES = {
    Kind.JOIN_REQUEST: JoinRequest,
    Kind.JOIN_ACCEPT: JoinAccept,
    Kind.JOIN_REJECT: JoinReject,
    Kind.ROUND_START: RoundStart,
    Kind.ROUND_UPDATE: RoundUpdate,
    Kind.ROUND_RESULT: RoundResult,
    Kind.SHUTDOWN: Shutdown,
}


def encode_message(msg) -> Frame:
    fields = dict(vars(msg))
    weights = fields.pop("weights", None)
    rnd = int(fields.get("round", 0))
    meta = json.dumps(fields, sort_keys=True).encode("utf-8")
    payload = struct.pack("<I", len(meta)) + meta
    if weights is not None:
        payload += encode_weights(weights)
    return Frame(int(msg.kind), rnd, payload)


def decode_message(frame: Frame):
    try:
        cls = MESSAGE_TYPES[Kind(frame.kind)]
    except ValueError:
        raise ProtocolError(f"unknown message kind {frame.kind}") from None
    p = frame.payload
    if len(p) < 4:
        raise ProtocolError(f"{cls.__name__} payload too short")
    (mlen,) = struct.unpack_from("<I", p)
    if 4 + mlen > len(p):
        raise ProtocolError(f"{cls.__name__} metadata truncated")
    try:
        fields = json.loads(p[4 : 4 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"{cls.__name__} metadata is not valid JSON: {exc}") from exc
    rest = p[4 + mlen :]
    if "weights" in cls.__dataclass_fields__:
        try:
            fields["weights"] = decode_weights(rest)
        except CodecError as exc:
            raise ProtocolError(str(exc)) from exc
    elif rest:
        raise ProtocolError(f"{cls.__name__} carries {len(rest)} unexpected trailing bytes")
    try:
        msg = cls(**fields)
    except TypeError as exc:
        raise ProtocolError(f"malformed {cls.__name__}: {exc}") from exc
    if "round" in fields and fields["round"] != frame.round:
        raise ProtocolError(f"round mismatch: frame {frame.round}, message {fields['round']}")
    return msg


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------


class Session:
    """Framed, byte-counted message channel over a stream-like object.

    ``stream`` needs ``sendall(bytes)``, ``recv(n)``, ``settimeout(t)`` and
    ``close()``: a socket, a TLS socket or a :class:`MemoryPipe` end.
    """

    def __init__(self, stream, peer: str = "", max_frame: int = DEFAULT_MAX_FRAME):
        self.stream = stream
        self.peer = peer
        self.max_frame = max_frame
        self.bytes_sent = 0
        self.bytes_received = 0
        self.frames_sent = 0
        self.frames_received = 0
        self._send_lock = threading.Lock()

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self.stream.recv(n - len(buf))
            if not chunk:
                raise ConnectionError(f"connection closed by {self.peer or 'peer'}")
            buf.extend(chunk)
        return bytes(buf)

    def send_frame(self, frame: Frame) -> int:
        data = encode_frame(frame)
        with self._send_lock:
            self.stream.sendall(data)
            self.bytes_sent += len(data)
            self.frames_sent += 1
        return len(data)

    def recv_frame(self, timeout: float | None = None) -> Frame:
        self.stream.settimeout(timeout)
        header = self._recv_exact(HEADER.size)
        try:
            length, version, kind, rnd = parse_header(header, self.max_frame)
        except ProtocolError:
            self.close()
            raise
        rest = self._recv_exact(length + TRAILER.size)
        self.bytes_received += HEADER.size + len(rest)
        self.frames_received += 1
        payload = rest[:length]
        (crc,) = TRAILER.unpack(rest[length:])
        if zlib.crc32(payload) != crc:
            self.close()
            raise ProtocolError(f"crc mismatch on frame from {self.peer or 'peer'}")
        return Frame(kind, rnd, payload, version)

    def send(self, msg) -> int:
        return self.send_frame(encode_message(msg))

    def recv(self, timeout: float | None = None):
        return decode_message(self.recv_frame(timeout))

    def close(self) -> None:
        try:
            self.stream.close()
        except OSError:
            pass


class MemoryPipe:
    """One end of an in-memory, socket-free duplex byte pipe (for fast tests)."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._in, self._out = inbox, outbox
        self._buf = b""
        self._timeout = None
        self._closed = False

    @classmethod
    def pair(cls):
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b), cls(b, a)

    def sendall(self, data: bytes) -> None:
        if self._closed:
            raise ConnectionError("pipe closed")
        self._out.put(bytes(data))

    def settimeout(self, t) -> None:
        self._timeout = t

    def recv(self, n: int) -> bytes:
        if not self._buf:
            try:
                chunk = self._in.get(timeout=self._timeout)
            except queue.Empty:
                raise TimeoutError("timed out waiting for data") from None
            if chunk is None:
                return b""
            self._buf = chunk
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._out.put(None)


def session_pair(max_frame: int = DEFAULT_MAX_FRAME):
    """Two connected in-memory sessions ``(server_side, client_side)``."""
    a, b = MemoryPipe.pair()
    return Session(a, "client", max_frame), Session(b, "server", max_frame)


# ---------------------------------------------------------------------------
# Mutual TLS
# ---------------------------------------------------------------------------

ENV_PREFIX = "M2FED_"


@dataclass
class TrustConfig:
    """PEM paths for the federation root and this endpoint's identity.

    Each path can be overridden with an environment variable:
    ``M2FED_ROOT_CERT``, ``M2FED_CERT``, ``M2FED_KEY``.
    """

    root_cert: Path
    cert: Path
    key: Path

    @classmethod
    def from_paths(cls, root_cert, cert, key) -> "TrustConfig":
        env = os.environ
        return cls(
            Path(env.get(ENV_PREFIX + "ROOT_CERT", root_cert)),
            Path(env.get(ENV_PREFIX + "CERT", cert)),
            Path(env.get(ENV_PREFIX + "KEY", key)),
        )


def _context(trust: TrustConfig, purpose) -> ssl.SSLContext:
    proto = ssl.PROTOCOL_TLS_SERVER if purpose == "server" else ssl.PROTOCOL_TLS_CLIENT
    ctx = ssl.SSLContext(proto)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    try:
        ctx.load_verify_locations(cafile=str(trust.root_cert))
        ctx.load_cert_chain(certfile=str(trust.cert), keyfile=str(trust.key))
    except (OSError, ssl.SSLError) as exc:
        raise AuthError(f"cannot load TLS credentials: {exc}") from exc
    ctx.verify_mode = ssl.CERT_REQUIRED
    return ctx


def server_context(trust: TrustConfig) -> ssl.SSLContext:
    return _context(trust, "server")


def client_context(trust: TrustConfig) -> ssl.SSLContext:
    ctx = _context(trust, "client")
    ctx.check_hostname = True
    return ctx


def peer_common_name(tls_sock: ssl.SSLSocket) -> str:
    cert = tls_sock.getpeercert() or {}
    for rdn in cert.get("subject", ()):
        for key, value in rdn:
            if key == "commonName":
                return value
    raise AuthError("peer certificate has no common name")


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host or "127.0.0.1", int(port)


def secure_handshake(raw: socket.socket, addr, ctx: ssl.SSLContext, timeout: float | None = 30.0,
                     max_frame: int = DEFAULT_MAX_FRAME) -> Session:
    """Run the server side of the mutual-TLS handshake on an accepted socket.

    Raises :class:`AuthError` when the peer fails authentication; the
    connection is closed before any frame is read.
    """
    raw.settimeout(timeout)
    try:
        tls = ctx.wrap_socket(raw, server_side=True)
    except (ssl.SSLError, OSError) as exc:
        raw.close()
        raise AuthError(f"TLS handshake with {addr[0]}:{addr[1]} failed: {exc}") from exc
    try:
        name = peer_common_name(tls)
    except AuthError:
        tls.close()
        raise
    return Session(tls, name, max_frame)


def accept_secure(listener: socket.socket, ctx: ssl.SSLContext, timeout: float | None = 30.0,
                  max_frame: int = DEFAULT_MAX_FRAME):
    """Accept one TCP connection and authenticate it; returns ``(session, address)``."""
    raw, addr = listener.accept()
    return secure_handshake(raw, addr, ctx, timeout, max_frame), addr


def connect_secure(endpoint: str, trust: TrustConfig, timeout: float | None = 30.0,
                   max_frame: int = DEFAULT_MAX_FRAME) -> Session:
    """Open a mutually authenticated session to ``endpoint``.

    The returned session's ``peer`` is the server certificate's common name.
    """
    host, port = parse_endpoint(endpoint)
    ctx = client_context(trust)
    raw = socket.create_connection((host, port), timeout=timeout)
    try:
        tls = ctx.wrap_socket(raw, server_hostname=host)
    except ssl.SSLError as exc:
        raw.close()
        raise AuthError(f"TLS handshake with {endpoint} failed: {exc}") from exc
    except OSError:
        raw.close()
        raise
    return Session(tls, peer_common_name(tls), max_frame)
