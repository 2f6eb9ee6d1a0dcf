"""State-sharing broker: latest-value register per robot id over a binary protocol.

Frame layout (little endian): [len: u32][type: u8][body], where len counts the
type byte plus the body. PUT body = [robot_id u32][seq u64][timestamp u64]
[payload_len u32][payload]; GET body = [count u32][ids ...] with count == 0
meaning ALL; ACK body = [robot_id u32][stored seq u64]; SNAPSHOT body =
[count u32][repeated PUT bodies]. Stale sequence numbers are rejected
silently, the ACK simply carries the stored seq.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

log = logging.getLogger("swarmlab.broker")

MSG_ACK = 0
MSG_PUT = 1
MSG_GET = 2
MSG_SNAPSHOT = 3

MAX_FRAME = 1 << 22


class FrameError(ValueError):
    """Malformed or truncated wire frame."""


@dataclass(frozen=True)
class RobotMessage:
    robot_id: int
    seq: int
    timestamp: int  # microseconds
    payload: bytes

    def vector(self) -> np.ndarray:
        if len(self.payload) < 4:
            raise FrameError("payload too short for length prefix")
        n, = struct.unpack_from("<I", self.payload, 0)
        if len(self.payload) != 4 + 8 * n:
            raise FrameError("payload length mismatch")
        return np.frombuffer(self.payload, dtype="<f8", offset=4, count=n).copy()


def payload_from_vector(vec: np.ndarray) -> bytes:
    vec = np.asarray(vec, dtype=np.float64)
    return struct.pack("<I", vec.size) + vec.astype("<f8").tobytes()


# --- frame encode/decode ---------------------------------------------------


def encode_frame(msg_type: int, body: bytes) -> bytes:
    return struct.pack("<IB", len(body) + 1, msg_type) + body


def encode_put_body(msg: RobotMessage) -> bytes:
    return struct.pack("<IQQI", msg.robot_id, msg.seq, msg.timestamp,
                       len(msg.payload)) + msg.payload


def decode_put_body(body: bytes, offset: int = 0) -> tuple[RobotMessage, int]:
    if len(body) - offset < 24:
        raise FrameError("short PUT body")
    robot_id, seq, ts, plen = struct.unpack_from("<IQQI", body, offset)
    offset += 24
    if len(body) - offset < plen:
        raise FrameError("short PUT payload")
    payload = body[offset: offset + plen]
    return RobotMessage(robot_id, seq, ts, payload), offset + plen


def encode_get_body(ids) -> bytes:
    ids = list(ids or [])
    return struct.pack("<I", len(ids)) + b"".join(struct.pack("<I", i) for i in ids)


def decode_get_body(body: bytes):
    if len(body) < 4:
        raise FrameError("short GET body")
    count, = struct.unpack_from("<I", body, 0)
    if len(body) != 4 + 4 * count:
        raise FrameError("GET body length mismatch")
    return [struct.unpack_from("<I", body, 4 + 4 * i)[0] for i in range(count)]


def encode_snapshot_body(messages) -> bytes:
    return struct.pack("<I", len(messages)) + b"".join(
        encode_put_body(m) for m in messages)


def decode_snapshot_body(body: bytes) -> dict:
    if len(body) < 4:
        raise FrameError("short SNAPSHOT body")
    count, = struct.unpack_from("<I", body, 0)
    offset = 4
    out = {}
    for _ in range(count):
        msg, offset = decode_put_body(body, offset)
        out[msg.robot_id] = msg
    if offset != len(body):
        raise FrameError("trailing bytes in SNAPSHOT")
    return out


def decode_frame(data: bytes) -> tuple[int, bytes]:
    """Decode one full frame from bytes; raises FrameError when malformed."""
    if len(data) < 5:
        raise FrameError("truncated frame header")
    length, msg_type = struct.unpack_from("<IB", data, 0)
    if length < 1 or length > MAX_FRAME:
        raise FrameError("bad frame length")
    if len(data) != 4 + length:
        raise FrameError("frame length mismatch")
    if msg_type not in (MSG_ACK, MSG_PUT, MSG_GET, MSG_SNAPSHOT):
        raise FrameError(f"unknown frame type {msg_type}")
    body = data[5: 4 + length]
    # validate bodies eagerly so fuzzed frames fail here, not in handlers
    if msg_type == MSG_PUT:
        _, end = decode_put_body(body)
        if end != len(body):
            raise FrameError("trailing bytes in PUT")
    elif msg_type == MSG_GET:
        decode_get_body(body)
    elif msg_type == MSG_SNAPSHOT:
        decode_snapshot_body(body)
    elif len(body) != 12:
        raise FrameError("bad ACK body")
    return msg_type, body


def _read_exact(sock, n: int) -> bytes:
    chunks = []
    while n > 0:
        chunk = sock.recv(n)
        if not chunk:
            raise ConnectionError("connection closed")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock) -> tuple[int, bytes]:
    header = _read_exact(sock, 4)
    length, = struct.unpack("<I", header)
    if length < 1 or length > MAX_FRAME:
        raise FrameError("bad frame length")
    rest = _read_exact(sock, length)
    return decode_frame(header + rest)


# --- server ----------------------------------------------------------------


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server: BrokerServer = self.server.broker  # type: ignore[attr-defined]
        sock = self.request
        try:
            while True:
                try:
                    msg_type, body = read_frame(sock)
                except FrameError as exc:
                    log.warning("dropping client after bad frame: %s", exc)
                    return
                if msg_type == MSG_PUT:
                    msg, _ = decode_put_body(body)
                    stored = server.put(msg)
                    sock.sendall(encode_frame(
                        MSG_ACK, struct.pack("<IQ", msg.robot_id, stored)))
                elif msg_type == MSG_GET:
                    ids = decode_get_body(body)
                    snap = server.snapshot(ids or None)
                    sock.sendall(encode_frame(
                        MSG_SNAPSHOT, encode_snapshot_body(list(snap.values()))))
                else:
                    log.warning("unexpected frame type %d from client", msg_type)
                    return
        except (ConnectionError, OSError):
            return


class _TcpServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class BrokerServer:
    """Latest-value buffer of robot_id -> message with last-write-wins by seq."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._buffer: dict[int, RobotMessage] = {}
        self._lock = threading.Lock()
        self._tcp = _TcpServer((host, port), _Handler)
        self._tcp.broker = self  # type: ignore[attr-defined]
        self._thread = threading.Thread(target=self._tcp.serve_forever, daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self._tcp.server_address[:2]

    def start(self):
        self._thread.start()
        return self

    def close(self):
        self._tcp.shutdown()
        self._tcp.server_close()

    def put(self, msg: RobotMessage) -> int:
        with self._lock:
            cur = self._buffer.get(msg.robot_id)
            if cur is None or msg.seq > cur.seq:
                self._buffer[msg.robot_id] = msg
                return msg.seq
            return cur.seq

    def snapshot(self, ids=None) -> dict:
        with self._lock:
            if ids is None:
                return dict(self._buffer)
            return {i: self._buffer[i] for i in ids if i in self._buffer}


def serve(bind_address: tuple[str, int] | str) -> BrokerServer:
    if isinstance(bind_address, str):
        host, _, port = bind_address.partition(":")
        bind_address = (host or "127.0.0.1", int(port or 0))
    return BrokerServer(*bind_address).start()


# --- client ----------------------------------------------------------------


class BrokerClient:
    def __init__(self, address: tuple[str, int] | str, timeout: float = 5.0):
        if isinstance(address, str):
            host, _, port = address.partition(":")
            address = (host, int(port))
        self._sock = socket.create_connection(address, timeout=timeout)

    def close(self):
        self._sock.close()

    def put(self, msg: RobotMessage) -> int:
        """Publish; returns the seq now stored for this id."""
        self._sock.sendall(encode_frame(MSG_PUT, encode_put_body(msg)))
        msg_type, body = read_frame(self._sock)
        if msg_type != MSG_ACK:
            raise FrameError("expected ACK")
        _, stored = struct.unpack("<IQ", body)
        return stored

    def get(self, ids=None) -> dict:
        """Latest message per requested id; missing ids are omitted."""
        self._sock.sendall(encode_frame(MSG_GET, encode_get_body(ids)))
        msg_type, body = read_frame(self._sock)
        if msg_type != MSG_SNAPSHOT:
            raise FrameError("expected SNAPSHOT")
        return decode_snapshot_body(body)


# --- agent process loop ----------------------------------------------------


def run_agent(robot_id: int, params, env, broker_address, steps: int,
              rate_hz: float = 5.0, realtime: bool = False, sync=None,
              publish_sync=None):
    """Policy loop against broker-supplied neighbor states.

    `env` must expose public_state(robot_id) -> (ego vector, shared payload
    vector, neighbor-builder), and send_command(robot_id, command). On broker
    loss the agent acts on an empty neighbor category (degraded mode).
    `publish_sync` (if given) is called between publishing and fetching, and
    `sync` after the command is submitted; lockstep harnesses pass barriers so
    every fetch sees every peer's current-step state.
    """
    from . import encoder as enc
    from .world import BodyCommand

    client = None
    try:
        client = BrokerClient(broker_address)
    except OSError:
        log.warning("robot %d: broker unreachable at start, degraded mode", robot_id)
    seq = 0
    latencies = []
    for _ in range(steps):
        t_start = time.perf_counter()
        ego_vec, payload_vec, build_obs = env.public_state(robot_id)
        neighbors = {}
        if client is not None:
            try:
                seq += 1
                ts = int(time.time() * 1e6)
                client.put(RobotMessage(robot_id, seq, ts,
                                        payload_from_vector(payload_vec)))
                if publish_sync is not None:
                    publish_sync()
                neighbors = {i: m.vector() for i, m in client.get().items()
                             if i != robot_id}
            except (OSError, FrameError) as exc:
                log.warning("robot %d: broker lost (%s), degraded mode", robot_id, exc)
                client = None
                neighbors = {}
        obs = build_obs(ego_vec, neighbors)
        alpha, beta, _, _ = enc.forward(params, obs)
        action = enc.deterministic_action(alpha, beta, params.config.action_bounds)
        latencies.append(time.perf_counter() - t_start)
        env.send_command(robot_id, BodyCommand(*action))
        if sync is not None:
            sync()
        if realtime:
            time.sleep(max(0.0, 1.0 / rate_hz - latencies[-1]))
    if client is not None:
        client.close()
    return latencies
