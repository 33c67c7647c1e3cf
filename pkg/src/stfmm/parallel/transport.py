"""Message transports between ranks: in-process channels and TCP sockets.

Both deliver :class:`Message` objects reliably and without blocking the
receiver. The socket transport frames each message as a little-endian
header ``<u32 magic, u32 sender, u32 cluster_id, u8 kind, u32 payload_len>``
followed by ``payload_len`` bytes of float64 values (a-major, kappa in
graded lexicographic order, clusters in ascending id order).
"""

from __future__ import annotations

import heapq
import itertools
import random
import select
import socket
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

MOMENTS_TO_PARENT = 0
MOMENTS_TO_INTERACTION = 1
LOCALS_TO_CHILD = 2
KIND_NAMES = {
    MOMENTS_TO_PARENT: "moments-to-parent",
    MOMENTS_TO_INTERACTION: "moments-to-interaction",
    LOCALS_TO_CHILD: "locals-to-child",
}

MAGIC = 0x53544D46  # "STMF"
HEADER = struct.Struct("<IIIBI")


class TransportError(RuntimeError):
    """Connection loss or malformed data on the wire."""


class ProtocolError(RuntimeError):
    """A message violates the tag scheme (e.g. duplicate cluster/kind)."""


@dataclass
class Message:
    sender: int
    dest: int
    cluster: int  # temporal cluster id
    kind: int
    payload: np.ndarray

    @property
    def tag(self):
        return (self.cluster, self.kind)


def encode(msg):
    data = np.ascontiguousarray(msg.payload, dtype="<f8").tobytes()
    return HEADER.pack(MAGIC, msg.sender, msg.cluster, msg.kind, len(data)) + data


def decode_header(buf):
    magic, sender, cluster, kind, n = HEADER.unpack(buf)
    if magic != MAGIC:
        raise TransportError(f"bad frame magic {magic:#x}")
    if kind not in KIND_NAMES:
        raise TransportError(f"unknown message kind {kind}")
    if n % 8:
        raise TransportError(f"payload length {n} is not a multiple of 8")
    return sender, cluster, kind, n


class TagRegistry:
    """Rejects a second message with the same (cluster, kind) tag within one run."""

    def __init__(self):
        self._seen = set()
        self._lock = threading.Lock()

    def reset(self):
        with self._lock:
            self._seen.clear()

    def check(self, msg):
        with self._lock:
            if msg.tag in self._seen:
                raise ProtocolError(
                    f"duplicate message tag cluster={msg.cluster} kind={KIND_NAMES[msg.kind]}"
                )
            self._seen.add(msg.tag)


class Endpoint:
    """Per-rank side of a transport."""

    rank: int

    def send(self, msg):
        raise NotImplementedError

    def poll(self):
        raise NotImplementedError

    def start_run(self):
        pass

    def close(self):
        pass


class InProcHub:
    """Channels between ranks living in one process.

    With ``max_delay > 0`` each message is held back for a random time drawn
    from a generator seeded with ``seed``, so deliveries interleave
    arbitrarily while remaining reproducible in distribution.
    """

    def __init__(self, n_ranks, max_delay=0.0, seed=None):
        self.n_ranks = n_ranks
        self.max_delay = float(max_delay)
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self._queues = [[] for _ in range(n_ranks)]
        self._counter = itertools.count()
        self._wake = [None] * n_ranks
        self.closed = False
        self.endpoints = [InProcEndpoint(self, r) for r in range(n_ranks)]

    def register_wakeup(self, rank, event):
        self._wake[rank] = event

    def _push(self, msg):
        if self.closed:
            raise TransportError("transport closed")
        if not 0 <= msg.dest < self.n_ranks:
            raise TransportError(f"no rank {msg.dest}")
        with self._lock:
            delay = self._rng.uniform(0.0, self.max_delay) if self.max_delay > 0 else 0.0
            due = time.monotonic() + delay
            heapq.heappush(self._queues[msg.dest], (due, next(self._counter), msg))
        ev = self._wake[msg.dest]
        if ev is not None:
            ev.set()

    def _pop_ready(self, rank):
        now = time.monotonic()
        out = []
        with self._lock:
            q = self._queues[rank]
            while q and q[0][0] <= now:
                out.append(heapq.heappop(q)[2])
        return out

    def pending(self, rank):
        with self._lock:
            return len(self._queues[rank])

    def close(self):
        self.closed = True


class InProcEndpoint(Endpoint):
    def __init__(self, hub, rank):
        self.hub = hub
        self.rank = rank
        self.tags = TagRegistry()

    def start_run(self):
        self.tags.reset()

    def send(self, msg):
        self.hub._push(msg)

    def poll(self):
        if self.hub.closed:
            raise TransportError("transport closed")
        msgs = self.hub._pop_ready(self.rank)
        for m in msgs:
            self.tags.check(m)
        return msgs


class TcpEndpoint(Endpoint):
    """Socket endpoint; one connection per peer, frames as in the module docstring."""

    def __init__(self, rank, n_ranks, listener):
        self.rank = rank
        self.n_ranks = n_ranks
        self.listener = listener
        self.peers = {}  # rank -> socket
        self._buf = {}
        self._send_lock = threading.Lock()
        self.tags = TagRegistry()
        self.wakeup = None

    def start_run(self):
        self.tags.reset()

    def send(self, msg):
        sock = self.peers.get(msg.dest)
        if sock is None:
            raise TransportError(f"rank {self.rank} has no connection to rank {msg.dest}")
        frame = encode(msg)
        try:
            with self._send_lock:
                sock.sendall(frame)
        except OSError as exc:
            raise TransportError(f"send to rank {msg.dest} failed: {exc}") from exc

    def poll(self):
        socks = list(self.peers.values())
        if not socks:
            return []
        ready, _, _ = select.select(socks, [], [], 0)
        out = []
        for s in ready:
            try:
                chunk = s.recv(1 << 20)
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from exc
            if not chunk:
                raise TransportError(f"rank {self.rank}: peer closed the connection")
            buf = self._buf.get(s, b"") + chunk
            while len(buf) >= HEADER.size:
                sender, cluster, kind, n = decode_header(buf[: HEADER.size])
                if len(buf) < HEADER.size + n:
                    break
                payload = np.frombuffer(buf[HEADER.size : HEADER.size + n], dtype="<f8").copy()
                buf = buf[HEADER.size + n :]
                msg = Message(sender, self.rank, cluster, kind, payload)
                self.tags.check(msg)
                out.append(msg)
            self._buf[s] = buf
        return out

    def close(self):
        for s in self.peers.values():
            try:
                s.close()
            except OSError:
                pass
        self.peers.clear()
        if self.listener is not None:
            self.listener.close()
            self.listener = None


def tcp_mesh(n_ranks, host="127.0.0.1", timeout=10.0):
    """Fully connected TCP endpoints for ``n_ranks`` ranks on the local host."""
    listeners = []
    for _ in range(n_ranks):
        ls = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        ls.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        ls.bind((host, 0))
        ls.listen(n_ranks)
        listeners.append(ls)
    eps = [TcpEndpoint(r, n_ranks, listeners[r]) for r in range(n_ranks)]
    # rank i connects to every j > i and announces itself with a 4-byte rank id
    try:
        for i in range(n_ranks):
            for j in range(i + 1, n_ranks):
                s = socket.create_connection(listeners[j].getsockname(), timeout=timeout)
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                s.sendall(struct.pack("<I", i))
                eps[i].peers[j] = s
        for j in range(n_ranks):
            for _ in range(j):
                listeners[j].settimeout(timeout)
                conn, _ = listeners[j].accept()
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                hdr = b""
                while len(hdr) < 4:
                    part = conn.recv(4 - len(hdr))
                    if not part:
                        raise TransportError("handshake failed")
                    hdr += part
                eps[j].peers[struct.unpack("<I", hdr)[0]] = conn
    except OSError as exc:
        for e in eps:
            e.close()
        raise TransportError(f"cannot set up TCP mesh: {exc}") from exc
    for e in eps:
        for s in e.peers.values():
            s.settimeout(None)
            s.setblocking(True)
    return eps


def make_endpoints(kind, n_ranks, max_delay=0.0, seed=None):
    if kind == "inproc":
        return InProcHub(n_ranks, max_delay, seed).endpoints
    if kind == "tcp":
        return tcp_mesh(n_ranks)
    raise ValueError(f"unknown transport {kind!r}")
