"""Transports, wire framing and network profiles.

Frame layout (little-endian)::

    session: u32 | layer: u32 | kind: u8 | count: u32 | count * u64 payload | crc32(payload): u32

Two transports share the framing: an in-process one built on queues and a TCP
one. Both enforce the party topology and count bytes per directed channel.
"""

from __future__ import annotations

import enum
import json
import logging
import queue
import random
import socket
import struct
import threading
import time
import zlib
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

_HEADER = struct.Struct("<IIBI")
_CRC = struct.Struct("<I")
RECV_TIMEOUT_S = 30.0


class MsgKind(enum.IntEnum):
    E = 1
    UREV = 2
    VMSG = 3
    WMSG = 4
    S_OPEN = 5
    DEBUG = 6


class TransportError(RuntimeError):
    pass


class ChecksumError(TransportError):
    pass


class TopologyError(TransportError):
    pass


class SessionMismatchError(TransportError):
    pass


# ---------------------------------------------------------------------------
# profiles


@dataclass(frozen=True)
class NetworkProfile:
    name: str
    latency_ms: float  # one-way
    bandwidth_bps: float

    def __post_init__(self):
        if self.latency_ms < 0 or self.bandwidth_bps <= 0:
            raise ValueError(f"invalid profile {self}")

    @classmethod
    def from_json(cls, obj: dict) -> "NetworkProfile":
        if "preset" in obj:
            return PRESETS[obj["preset"]]
        lat = obj["latency_ms"] if "latency_ms" in obj else obj["rtt_ms"] / 2
        return cls(obj.get("name", "custom"), float(lat), float(obj["bandwidth_gbps"]) * 1e9)

    def to_json(self) -> dict:
        return {"name": self.name, "latency_ms": self.latency_ms, "bandwidth_gbps": self.bandwidth_bps / 1e9}


# LAN latency is an artifact default; MAN/WAN use half the quoted round trip.
PRESETS = {
    "lan": NetworkProfile("lan", 0.2, 10e9),
    "man": NetworkProfile("man", 2.5, 5e9),
    "wan": NetworkProfile("wan", 17.5, 5e9),
    "ideal": NetworkProfile("ideal", 0.0, float("inf")),
}


def deliver_time(nbytes: int, profile: NetworkProfile) -> float:
    """Milliseconds from send to arrival: fixed latency plus serialization."""
    return profile.latency_ms + nbytes * 8 / profile.bandwidth_bps * 1e3


# ---------------------------------------------------------------------------
# framing


@dataclass
class Frame:
    session: int
    layer: int
    kind: int
    payload: np.ndarray  # flat uint64

    def encode(self) -> bytes:
        data = np.ascontiguousarray(self.payload, dtype="<u8").tobytes()
        return (
            _HEADER.pack(self.session, self.layer, int(self.kind), len(self.payload))
            + data
            + _CRC.pack(zlib.crc32(data))
        )

    @classmethod
    def decode(cls, buf: bytes) -> "Frame":
        session, layer, kind, count = _HEADER.unpack_from(buf)
        lo = _HEADER.size
        hi = lo + 8 * count
        if len(buf) != hi + _CRC.size:
            raise TransportError(f"frame length {len(buf)} does not match count {count}")
        data = buf[lo:hi]
        (crc,) = _CRC.unpack_from(buf, hi)
        if zlib.crc32(data) != crc:
            raise ChecksumError(f"checksum mismatch on frame kind={kind} layer={layer}")
        return cls(session, layer, kind, np.frombuffer(data, dtype="<u8").astype(np.uint64))

    @staticmethod
    def size(count: int) -> int:
        return _HEADER.size + 8 * count + _CRC.size


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("peer disconnected mid-stream")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes:
    head = _read_exact(sock, _HEADER.size)
    count = _HEADER.unpack(head)[3]
    return head + _read_exact(sock, 8 * count + _CRC.size)


# ---------------------------------------------------------------------------
# topology


def topology_channels(kind: str, n: int) -> set[tuple[int, int]]:
    if kind == "full":
        return {(a, b) for a in range(1, n + 1) for b in range(1, n + 1) if a != b}
    if kind == "trio":
        if n != 3:
            raise ValueError("trio topology needs exactly 3 parties")
        # P1->P3 only carries offline material
        return {(1, 2), (1, 3), (2, 3), (3, 2)}
    raise ValueError(f"unknown topology {kind!r}")


# ---------------------------------------------------------------------------
# transports


class Endpoint:
    """One party's handle on the network."""

    def __init__(self, party: int, channels: set[tuple[int, int]]):
        self.party = party
        self.channels = channels
        self.bytes_sent: dict[tuple[int, int], int] = defaultdict(int)
        self._lock = threading.Lock()

    def _check(self, src: int, dst: int):
        if (src, dst) not in self.channels:
            raise TopologyError(f"no channel P{src}->P{dst}")

    def send(self, dst: int, raw: bytes) -> None:
        self._check(self.party, dst)
        with self._lock:
            self.bytes_sent[(self.party, dst)] += len(raw)
        self._send(dst, raw)

    def recv(self, src: int, timeout: float = RECV_TIMEOUT_S) -> bytes:
        self._check(src, self.party)
        return self._recv(src, timeout)

    def close(self):
        pass


class _InProcEndpoint(Endpoint):
    def __init__(self, party, channels, queues, jitter):
        super().__init__(party, channels)
        self._queues = queues
        self._jitter = jitter

    def _send(self, dst, raw):
        q = self._queues[(self.party, dst)]
        if self._jitter:
            q.put((time.monotonic() + random.uniform(0, self._jitter), raw))
        else:
            q.put((0.0, raw))

    def _recv(self, src, timeout):
        try:
            due, raw = self._queues[(src, self.party)].get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"P{self.party}: timed out waiting for P{src}") from None
        delay = due - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        return raw


def connect_inproc(n: int, topology: str = "full", jitter_s: float = 0.0) -> list[Endpoint]:
    """Queue-backed endpoints; ``jitter_s`` delays each delivery randomly while keeping per-channel FIFO."""
    channels = topology_channels(topology, n)
    queues = {c: queue.Queue() for c in channels}
    return [_InProcEndpoint(p, channels, queues, jitter_s) for p in range(1, n + 1)]


class _SocketEndpoint(Endpoint):
    def __init__(self, party, channels, socks: dict[int, socket.socket]):
        super().__init__(party, channels)
        self._socks = socks
        self._inbox: dict[int, queue.Queue] = {p: queue.Queue() for p in socks}
        self._outbox: dict[int, queue.Queue] = {p: queue.Queue() for p in socks}
        self._writers = []
        for peer, s in socks.items():
            threading.Thread(target=self._reader, args=(peer, s), daemon=True).start()
            w = threading.Thread(target=self._writer, args=(peer, s), daemon=True)
            w.start()
            self._writers.append(w)

    def _reader(self, peer, s):
        while True:
            try:
                raw = read_frame(s)
            except (OSError, TransportError) as exc:
                self._inbox[peer].put(exc)
                return
            self._inbox[peer].put(raw)

    def _writer(self, peer, s):
        while True:
            raw = self._outbox[peer].get()
            if raw is None:
                return
            try:
                s.sendall(raw)
            except OSError:
                return

    def _send(self, dst, raw):
        if dst not in self._outbox:
            raise TopologyError(f"P{self.party} has no socket to P{dst}")
        self._outbox[dst].put(raw)

    def _recv(self, src, timeout):
        try:
            item = self._inbox[src].get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"P{self.party}: timed out waiting for P{src}") from None
        if isinstance(item, Exception):
            raise TransportError(f"P{self.party}: link to P{src} failed: {item}") from item
        return item

    def close(self):
        for q in self._outbox.values():
            q.put(None)
        for w in self._writers:
            w.join(timeout=5)
        for s in self._socks.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()


@dataclass
class EndpointConfig:
    party: int
    listen: tuple[str, int]
    peers: dict[int, tuple[str, int]] = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: dict) -> "EndpointConfig":
        host, port = obj["listen"].rsplit(":", 1)
        peers = {}
        for k, addr in obj.get("peers", {}).items():
            h, p = addr.rsplit(":", 1)
            peers[int(k)] = (h, int(p))
        return cls(int(obj["party"]), (host, int(port)), peers)

    def to_json(self) -> dict:
        return {
            "party": self.party,
            "listen": f"{self.listen[0]}:{self.listen[1]}",
            "peers": {str(k): f"{h}:{p}" for k, (h, p) in self.peers.items()},
        }


def connect_socket(cfg: EndpointConfig, n: int, topology: str = "full", timeout: float = 20.0) -> Endpoint:
    """Open TCP links to every topology neighbour.

    Each unordered pair shares one connection: the higher-numbered party
    dials the lower one and announces itself with a u32 party id.
    """
    channels = topology_channels(topology, n)
    neighbours = {b for a, b in channels if a == cfg.party} | {a for a, b in channels if b == cfg.party}
    socks: dict[int, socket.socket] = {}
    lower = sorted(p for p in neighbours if p < cfg.party)
    higher = {p for p in neighbours if p > cfg.party}

    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind(cfg.listen)
    server.listen(len(higher) + 1)
    server.settimeout(timeout)

    deadline = time.monotonic() + timeout
    for peer in lower:
        while True:
            try:
                s = socket.create_connection(cfg.peers[peer], timeout=timeout)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise TransportError(f"P{cfg.party}: cannot reach P{peer} at {cfg.peers[peer]}") from None
                time.sleep(0.05)
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        s.sendall(struct.pack("<I", cfg.party))
        s.settimeout(None)
        socks[peer] = s
    try:
        while higher - socks.keys():
            s, _ = server.accept()
            s.settimeout(timeout)
            (peer,) = struct.unpack("<I", _read_exact(s, 4))
            if peer not in higher:
                s.close()
                raise TransportError(f"P{cfg.party}: unexpected connection from P{peer}")
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            s.settimeout(None)
            socks[peer] = s
    except socket.timeout:
        raise TransportError(f"P{cfg.party}: peers did not connect in time") from None
    finally:
        server.close()
    return _SocketEndpoint(cfg.party, channels, socks)


def free_ports(k: int) -> list[int]:
    ports, socks = [], []
    for _ in range(k):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        ports.append(s.getsockname()[1])
        socks.append(s)
    for s in socks:
        s.close()
    return ports


def local_endpoint_configs(n: int) -> list[EndpointConfig]:
    ports = free_ports(n)
    addrs = {p + 1: ("127.0.0.1", port) for p, port in enumerate(ports)}
    return [EndpointConfig(p, addrs[p], {q: a for q, a in addrs.items() if q != p}) for p in addrs]


# ---------------------------------------------------------------------------
# per-party protocol context


class PartyContext:
    """Everything one party's protocol code touches: identity, transport, counters."""

    def __init__(
        self,
        party: int,
        n: int,
        endpoint: Endpoint | None,
        cfg,
        scheme: str = "additive",
        session: int = 0,
        allow_insecure: bool = False,
    ):
        self.party = party
        self.n = n
        self.endpoint = endpoint
        self.cfg = cfg
        self.scheme = scheme
        self.session = session
        self.layer = 0
        self.allow_insecure = allow_insecure
        self.rounds = 0
        self.payload_bytes: dict[tuple[int, int], int] = defaultdict(int)
        self.messages = 0
        self.insecure_ops: list[str] = []
        self.used_slots: set[str] = set()
        self.trace: list[tuple] = []  # (op, peer, kind, layer) in program order
        self._parked: dict[int, list[Frame]] = defaultdict(list)

    @property
    def peers(self) -> list[int]:
        return [p for p in range(1, self.n + 1) if p != self.party]

    def new_round(self) -> None:
        self.rounds += 1

    def consume(self, slot: str) -> None:
        if slot in self.used_slots:
            raise RuntimeError(f"P{self.party}: offline material {slot!r} reused")
        self.used_slots.add(slot)

    def send(self, dst: int, kind: MsgKind, arr: np.ndarray, layer: int | None = None) -> None:
        if self.endpoint is None:
            raise TransportError("context has no transport")
        flat = np.ascontiguousarray(arr, dtype=np.uint64).reshape(-1)
        layer = self.layer if layer is None else layer
        self.endpoint.send(dst, Frame(self.session, layer, kind, flat).encode())
        self.payload_bytes[(self.party, dst)] += flat.size * self.cfg.element_bytes
        self.messages += 1
        self.trace.append(("send", dst, int(kind), layer))

    def recv(self, src: int, kind: MsgKind, shape, layer: int | None = None) -> np.ndarray:
        """Next frame of (kind, layer) from src.

        Early UREV broadcasts may arrive ahead of the frames a party is waiting
        for; they are parked per sender and handed out in FIFO order. Any other
        out-of-order frame is a protocol error.
        """
        layer = self.layer if layer is None else layer
        if self.endpoint is None:
            raise TransportError("context has no transport")
        parked = self._parked[src]
        for i, fr in enumerate(parked):
            if fr.kind == kind and fr.layer == layer:
                return self._payload(parked.pop(i), src, shape)
        while True:
            frame = Frame.decode(self.endpoint.recv(src))
            if frame.session != self.session:
                raise SessionMismatchError(
                    f"P{self.party}: frame from P{src} has session {frame.session}, expected {self.session}"
                )
            if frame.kind == kind and frame.layer == layer:
                return self._payload(frame, src, shape)
            if frame.kind == MsgKind.UREV:
                parked.append(frame)
                continue
            raise TransportError(
                f"P{self.party}: expected kind {MsgKind(kind).name} layer {layer} from P{src}, "
                f"got kind {frame.kind} layer {frame.layer}"
            )

    def _payload(self, frame: Frame, src: int, shape) -> np.ndarray:
        self.trace.append(("recv", src, int(frame.kind), frame.layer))
        expected = int(np.prod(shape, dtype=np.int64))
        if frame.payload.size != expected:
            raise TransportError(f"P{self.party}: shape mismatch from P{src}: {frame.payload.size} != {expected}")
        return frame.payload.reshape(shape)

    def total_payload_bytes(self) -> int:
        return sum(self.payload_bytes.values())


def causal_rounds(traces: dict) -> int:
    """Longest chain of receives over observed transcripts (party -> trace).

    A receive sits one round above the send it consumed and every event
    follows its party's previous event. Receives are matched to sends by
    channel, kind, layer and occurrence, which is FIFO within each key.
    """
    sends: dict[tuple, list[int]] = defaultdict(list)
    pos = {p: 0 for p in traces}
    depth = {p: 0 for p in traces}
    taken: dict[tuple, int] = defaultdict(int)
    best = 0
    progress = True
    while progress:
        progress = False
        for p, tr in traces.items():
            while pos[p] < len(tr):
                op, peer, kind, layer = tr[pos[p]]
                if op == "send":
                    sends[(p, peer, kind, layer)].append(depth[p])
                else:
                    key = (peer, p, kind, layer)
                    k = taken[key]
                    if k >= len(sends[key]):
                        break  # sender has not got this far yet
                    taken[key] = k + 1
                    depth[p] = max(depth[p], sends[key][k] + 1)
                    best = max(best, depth[p])
                pos[p] += 1
                progress = True
    stuck = [p for p, tr in traces.items() if pos[p] < len(tr)]
    if stuck:
        raise ValueError(f"transcripts of {stuck} contain receives with no matching send")
    return best


def load_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
