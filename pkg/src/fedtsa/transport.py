"""Length-prefixed binary TCP transport for the federated protocol.

Frame layout (little-endian): payload length u32, frame type u8, payload.
Only parameter vectors, metrics, and control frames have message types; the
vocabulary deliberately has no way to express window samples, so raw data
cannot cross the wire.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

PROTOCOL_VERSION = 1
MAX_PAYLOAD = 1 << 28

HELLO = 0x01
CONFIG = 0x02
GLOBAL = 0x03
LOCAL = 0x04
METRICS = 0x05
DONE = 0x06
ERROR = 0x07

FRAME_TYPES = (HELLO, CONFIG, GLOBAL, LOCAL, METRICS, DONE, ERROR)

# Error frame codes.
ERR_VERSION = 1
ERR_DUPLICATE_CLIENT = 2
ERR_ARCH_MISMATCH = 3
ERR_STALE_ROUND = 4
ERR_TIMEOUT = 5
ERR_MALFORMED = 6


class ProtocolViolation(RuntimeError):
    """Peer broke the wire protocol."""

    def __init__(self, message: str, code: int = ERR_MALFORMED):
        super().__init__(message)
        self.code = code


class FederationTimeout(RuntimeError):
    """A peer failed to deliver its frame within the configured timeout."""


@dataclass(frozen=True)
class Hello:
    client_id: int
    arch_hash: int
    protocol_version: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class ConfigFrame:
    rounds: int
    local_epochs: int
    learning_rate: float
    seed: int


@dataclass(frozen=True)
class GlobalModel:
    round: int
    params: np.ndarray


@dataclass(frozen=True)
class LocalUpdate:
    round: int
    client_id: int
    params: np.ndarray
    train_loss: float
    val_loss: float


@dataclass(frozen=True)
class MetricsFrame:
    round: int
    client_id: int
    test_accuracy: float
    confusion: np.ndarray  # (5, 5) uint64


@dataclass(frozen=True)
class DoneFrame:
    params: np.ndarray


@dataclass(frozen=True)
class ErrorFrame:
    code: int
    message: str


Message = Hello | ConfigFrame | GlobalModel | LocalUpdate | MetricsFrame | DoneFrame | ErrorFrame

#: Frame type -> message class; this registry is the whole wire vocabulary.
MESSAGE_TYPES = {
    HELLO: Hello,
    CONFIG: ConfigFrame,
    GLOBAL: GlobalModel,
    LOCAL: LocalUpdate,
    METRICS: MetricsFrame,
    DONE: DoneFrame,
    ERROR: ErrorFrame,
}


def _params_bytes(params: np.ndarray) -> bytes:
    return struct.pack("<Q", params.size) + params.astype("<f8").tobytes()


def _read_params(payload: bytes, off: int) -> tuple[np.ndarray, int]:
    (count,) = struct.unpack_from("<Q", payload, off)
    off += 8
    if off + 8 * count > len(payload):
        raise ProtocolViolation("parameter block exceeds payload")
    params = np.frombuffer(payload, "<f8", count, off).copy()
    return params, off + 8 * count


def encode(msg: Message) -> tuple[int, bytes]:
    """Message -> (frame type, payload bytes)."""
    if isinstance(msg, Hello):
        return HELLO, struct.pack("<IQH", msg.client_id, msg.arch_hash,
                                  msg.protocol_version)
    if isinstance(msg, ConfigFrame):
        return CONFIG, struct.pack("<IIdQ", msg.rounds, msg.local_epochs,
                                   msg.learning_rate, msg.seed)
    if isinstance(msg, GlobalModel):
        return GLOBAL, struct.pack("<I", msg.round) + _params_bytes(msg.params)
    if isinstance(msg, LocalUpdate):
        return LOCAL, (struct.pack("<II", msg.round, msg.client_id)
                       + _params_bytes(msg.params)
                       + struct.pack("<dd", msg.train_loss, msg.val_loss))
    if isinstance(msg, MetricsFrame):
        confusion = np.asarray(msg.confusion, dtype="<u8")
        if confusion.shape != (5, 5):
            raise ValueError("confusion matrix must be 5x5")
        return METRICS, (struct.pack("<IId", msg.round, msg.client_id,
                                     msg.test_accuracy) + confusion.tobytes())
    if isinstance(msg, DoneFrame):
        return DONE, _params_bytes(msg.params)
    if isinstance(msg, ErrorFrame):
        return ERROR, struct.pack("<H", msg.code) + msg.message.encode()
    raise TypeError(f"not a wire message: {type(msg).__name__}")


def decode(frame_type: int, payload: bytes) -> Message:
    """(frame type, payload bytes) -> message; raises on malformed frames."""
    try:
        if frame_type == HELLO:
            cid, arch_hash, version = struct.unpack("<IQH", payload)
            return Hello(cid, arch_hash, version)
        if frame_type == CONFIG:
            rounds, epochs, lr, seed = struct.unpack("<IIdQ", payload)
            return ConfigFrame(rounds, epochs, lr, seed)
        if frame_type == GLOBAL:
            (rnd,) = struct.unpack_from("<I", payload, 0)
            params, off = _read_params(payload, 4)
            if off != len(payload):
                raise ProtocolViolation("trailing bytes in GLOBAL")
            return GlobalModel(rnd, params)
        if frame_type == LOCAL:
            rnd, cid = struct.unpack_from("<II", payload, 0)
            params, off = _read_params(payload, 8)
            train_loss, val_loss = struct.unpack_from("<dd", payload, off)
            if off + 16 != len(payload):
                raise ProtocolViolation("trailing bytes in LOCAL")
            return LocalUpdate(rnd, cid, params, train_loss, val_loss)
        if frame_type == METRICS:
            rnd, cid, acc = struct.unpack_from("<IId", payload, 0)
            confusion = np.frombuffer(payload, "<u8", 25, 16).reshape(5, 5).copy()
            return MetricsFrame(rnd, cid, acc, confusion)
        if frame_type == DONE:
            params, off = _read_params(payload, 0)
            if off != len(payload):
                raise ProtocolViolation("trailing bytes in DONE")
            return DoneFrame(params)
        if frame_type == ERROR:
            (code,) = struct.unpack_from("<H", payload, 0)
            return ErrorFrame(code, payload[2:].decode("utf-8", "replace"))
    except struct.error as exc:
        raise ProtocolViolation(f"malformed frame type {frame_type:#x}: {exc}") from exc
    raise ProtocolViolation(f"unknown frame type {frame_type:#x}")


class Connection:
    """One framed socket with byte counters and an optional raw capture."""

    def __init__(self, sock: socket.socket, capture=None, capture_lock=None):
        self._sock = sock
        self._capture = capture
        self._capture_lock = capture_lock or threading.Lock()
        self._send_lock = threading.Lock()
        self.bytes_in = 0
        self.bytes_out = 0

    def _tap(self, blob: bytes) -> None:
        if self._capture is not None:
            with self._capture_lock:
                self._capture.write(blob)
                self._capture.flush()

    def send(self, msg: Message) -> None:
        frame_type, payload = encode(msg)
        blob = struct.pack("<IB", len(payload), frame_type) + payload
        with self._send_lock:
            self._sock.sendall(blob)
            self.bytes_out += len(blob)
        self._tap(blob)

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            chunk = self._sock.recv(remaining)
            if not chunk:
                raise ConnectionError("peer closed the connection")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def recv(self, timeout: float | None = None) -> Message:
        self._sock.settimeout(timeout)
        try:
            head = self._recv_exact(5)
            length, frame_type = struct.unpack("<IB", head)
            if length > MAX_PAYLOAD:
                raise ProtocolViolation(f"oversized frame ({length} bytes)")
            payload = self._recv_exact(length)
        except socket.timeout as exc:
            raise FederationTimeout("timed out waiting for a frame") from exc
        self.bytes_in += 5 + length
        self._tap(head + payload)
        return decode(frame_type, payload)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def connect(host: str, port: int, attempts: int = 80,
            delay: float = 0.25, capture=None) -> Connection:
    """Dial the server, retrying while it is still starting up."""
    last: Exception | None = None
    for _ in range(attempts):
        try:
            sock = socket.create_connection((host, port), timeout=10.0)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return Connection(sock, capture=capture)
        except OSError as exc:
            last = exc
            time.sleep(delay)
    raise ConnectionError(f"could not reach {host}:{port}: {last}")


class _Reader(threading.Thread):
    """Drains one connection into a queue so the coordinator never blocks
    on a slow peer while another is ready."""

    def __init__(self, conn: Connection):
        super().__init__(daemon=True)
        self.conn = conn
        self.frames: queue.Queue = queue.Queue()

    def run(self):
        while True:
            try:
                msg = self.conn.recv(timeout=None)
            except Exception as exc:
                self.frames.put(exc)
                return
            self.frames.put(msg)

    def next_frame(self, deadline: float):
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise FederationTimeout("round deadline passed")
        try:
            item = self.frames.get(timeout=remaining)
        except queue.Empty:
            raise FederationTimeout("round deadline passed") from None
        if isinstance(item, Exception):
            raise item
        return item
