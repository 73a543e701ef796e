"""Deterministic test fabric: mock DNS, in-memory channels, fault injection, golden vectors."""

from __future__ import annotations

import asyncio
import random
import socketserver
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from . import codec
from .codec import ClientHello, Direction, ProtocolMessage, Query
from .discovery import DnsAnswer, SrvRecord, fqdn_label_for_key
from .errors import ScapError, TruncatedFrame
from .identity import BUILTIN_SERVICES, ServiceId
from .server import MappingRecord, MappingStore, ScapServer, handle_message
from .session import (
    HALF_SIZE,
    KEY_SIZE,
    ZERO_HALF,
    ClientSession,
    KeyPair,
    ServerSession,
    frame_decode,
    frame_encode,
)

# ---------------------------------------------------------------------------
# fixtures

EXAMPLE_DOMAIN = "example.org"
EXAMPLE_SRV = [
    (10, 65, 4332, "1000vs2nh9b3gz04db4rgpjmzv2cwlnpvh3qzn6xljwyxmnp57j8h0d.example.org"),
    (10, 35, 4332, "100027q245f6cglhdjyy91vk5btyszk6g5fnhz7mvsc6mtfjh2q0c14.example.org"),
    (30, 0, 4332, "10009ydzvtccqmbzw6q0zlgumtr227g0kwb2zk8h5rv7yruj7gg6zh3.example.org"),
]
EXAMPLE_ADDRESS = b"johndoe@example.com"
EXAMPLE_TARGET = b"1NS17iag9jJgTHD1VXjvLCEnZuQ3rJDE9L"
EXAMPLE_TRANSCRIPT = [
    b"1:H,",
    b"1:O,",
    b"92:Q19:johndoe@example.com,64:" + BUILTIN_SERVICES["bitcoin"].encode() + b",,",
    b"35:O1NS17iag9jJgTHD1VXjvLCEnZuQ3rJDE9L,",
]


def example_store() -> MappingStore:
    return MappingStore([MappingRecord(EXAMPLE_ADDRESS, ServiceId(BUILTIN_SERVICES["bitcoin"]), EXAMPLE_TARGET)])


def example_requests() -> list:
    return [ClientHello(), Query(EXAMPLE_ADDRESS, BUILTIN_SERVICES["bitcoin"].encode())]


def example_zone(validated: bool = True) -> "MockZone":
    zone = MockZone(default_validated=validated)
    zone.srv["_scap._tcp.example.org"] = [SrvRecord(p, w, port, t) for p, w, port, t in EXAMPLE_SRV]
    return zone


def deterministic_keypair(rng: random.Random, label_safe: bool = False) -> KeyPair:
    while True:
        pair = KeyPair.from_secret(rng.randbytes(KEY_SIZE))
        if not label_safe or not pair.public[31] & 0x80:
            return pair


# ---------------------------------------------------------------------------
# mock DNS


def _norm(name: str) -> str:
    return name.rstrip(".").lower()


@dataclass
class MockZone:
    srv: dict = field(default_factory=dict)
    cname: dict = field(default_factory=dict)
    addresses: dict = field(default_factory=dict)
    validated: dict = field(default_factory=dict)
    default_validated: bool = True

    def is_validated(self, name: str) -> bool:
        return self.validated.get(_norm(name), self.default_validated)

    def add_server(self, domain: str, fqdn: str, port: int, priority: int = 10, weight: int = 0,
                   address: str = "127.0.0.1") -> None:
        self.srv.setdefault("_scap._tcp." + _norm(domain), []).append(SrvRecord(priority, weight, port, fqdn))
        self.addresses.setdefault(_norm(fqdn), []).append(address)


class MockDnsClient:
    """DnsClient over a MockZone. Logs every query as ``(type, name)``."""

    def __init__(self, zone: MockZone):
        self.zone = zone
        self.queries: list[tuple[str, str]] = []

    def _records(self, table: dict, name: str) -> list:
        for key, value in table.items():
            if _norm(key) == _norm(name):
                return list(value) if isinstance(value, list) else [value]
        return []

    def query_srv(self, name: str) -> DnsAnswer:
        self.queries.append(("SRV", _norm(name)))
        records = [
            SrvRecord(r.priority, r.weight, r.port, r.target, r.ttl, self.zone.is_validated(name))
            for r in self._records(self.zone.srv, name)
        ]
        return DnsAnswer(records, self.zone.is_validated(name))

    def query_cname(self, name: str) -> DnsAnswer:
        self.queries.append(("CNAME", _norm(name)))
        return DnsAnswer(self._records(self.zone.cname, name), self.zone.is_validated(name))

    def query_addresses(self, name: str) -> DnsAnswer:
        self.queries.append(("A", _norm(name)))
        return DnsAnswer(self._records(self.zone.addresses, name), self.zone.is_validated(name))


class MockDnsServer:
    """UDP DNS responder serving a MockZone on loopback.

    Sets the AD bit for validated names, which lets the real resolver
    backend (and the CLI) run against a mock zone.
    """

    def __init__(self, zone: MockZone, host: str = "127.0.0.1"):
        self.zone = zone
        outer = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                data, sock = self.request
                reply = outer.answer(data)
                if reply is not None:
                    sock.sendto(reply, self.client_address)

        self._server = socketserver.ThreadingUDPServer((host, 0), Handler)
        self._server.daemon_threads = True
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return "%s:%d" % (host, port)

    def answer(self, data: bytes) -> Optional[bytes]:
        import dns.flags
        import dns.message
        import dns.rcode
        import dns.rdataclass
        import dns.rdatatype
        import dns.rrset

        try:
            query = dns.message.from_wire(data)
        except Exception:  # noqa: BLE001 - junk datagrams are ignored
            return None
        response = dns.message.make_response(query)
        question = query.question[0]
        name = _norm(question.name.to_text())
        rdtype = dns.rdatatype.to_text(question.rdtype)
        texts = []
        if rdtype == "SRV":
            texts = ["%d %d %d %s." % (r.priority, r.weight, r.port, _norm(r.target))
                     for r in MockDnsClient(self.zone)._records(self.zone.srv, name)]
        elif rdtype == "CNAME":
            texts = [_norm(t) + "." for t in MockDnsClient(self.zone)._records(self.zone.cname, name)]
        elif rdtype in ("A", "AAAA"):
            texts = [a for a in MockDnsClient(self.zone)._records(self.zone.addresses, name)
                     if (":" in a) == (rdtype == "AAAA")]
        if texts:
            response.answer.append(dns.rrset.from_text_list(question.name, 300, "IN", rdtype, texts))
        elif not self._name_exists(name):
            response.set_rcode(dns.rcode.NXDOMAIN)
        if self.zone.is_validated(name):
            response.flags |= dns.flags.AD
        return response.to_wire()

    def _name_exists(self, name: str) -> bool:
        tables = (self.zone.srv, self.zone.cname, self.zone.addresses)
        return any(_norm(k) == name for table in tables for k in table)

    def __enter__(self) -> "MockDnsServer":
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._server.shutdown()
        self._server.server_close()


# ---------------------------------------------------------------------------
# in-memory transport for the resolver


@dataclass
class ServerEndpoint:
    keypair: KeyPair
    store: MappingStore
    extensions: Sequence[str] = ()


class InMemoryConnection:
    """Synchronous duplex channel with a server session on the far end."""

    def __init__(self, endpoint: ServerEndpoint):
        self.endpoint = endpoint
        self.session = ServerSession(endpoint.keypair)
        self._inbox = b""
        self._outbox = b""
        self.closed = False
        self.error: Optional[Exception] = None

    def sendall(self, data: bytes) -> None:
        if self.closed:
            raise BrokenPipeError("connection closed by server")
        self._inbox += data
        while self._inbox and not self.closed:
            expecting = "followup" if self.session.handshake_done else "first"
            try:
                wire, used = frame_decode(self._inbox, expecting)
            except TruncatedFrame:
                return  # wait for the rest
            except ScapError as exc:
                self._teardown(exc)
                return
            self._inbox = self._inbox[used:]
            try:
                request = self.session.open(wire)
            except ScapError as exc:
                self._teardown(exc)
                return
            reply = handle_message(self.endpoint.store, self.endpoint.extensions, request)
            self._outbox += frame_encode(self.session.seal(reply))

    def _teardown(self, exc: Exception) -> None:
        self.error = exc
        self.closed = True

    def recv(self, n: int) -> bytes:
        chunk, self._outbox = self._outbox[:n], self._outbox[n:]
        return chunk

    def close(self) -> None:
        self.closed = True


class InMemoryDialer:
    """Dialer reaching ServerEndpoints by ``(host, port)``; logs every attempt."""

    def __init__(self, endpoints: Optional[dict] = None):
        self.endpoints = dict(endpoints or {})
        self.log: list[tuple[str, int]] = []
        self.connections: list[InMemoryConnection] = []

    def connect(self, host: str, port: int, timeout: float) -> InMemoryConnection:
        self.log.append((host, port))
        endpoint = self.endpoints.get((host, port))
        if endpoint is None:
            raise ConnectionRefusedError("nothing listening on %s:%d" % (host, port))
        conn = InMemoryConnection(endpoint)
        self.connections.append(conn)
        return conn


async def _cancel_pending() -> None:
    # connection handlers outlive Server.close() on older Pythons
    me = asyncio.current_task()
    tasks = [t for t in asyncio.all_tasks() if t is not me]
    for task in tasks:
        task.cancel()
    await asyncio.gather(*tasks, return_exceptions=True)


class ServerThread:
    """Run ScapServers on loopback in a background event loop."""

    def __init__(self, servers: Iterable[ScapServer]):
        self.servers = list(servers)
        self.ports: list[int] = []
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, daemon=True)

    def __enter__(self) -> "ServerThread":
        self._thread.start()
        for server in self.servers:
            future = asyncio.run_coroutine_threadsafe(server.start("127.0.0.1", 0), self._loop)
            self.ports.append(future.result(5)[1])
        return self

    def __exit__(self, *exc) -> None:
        for server in self.servers:
            asyncio.run_coroutine_threadsafe(server.close(), self._loop).result(5)
        asyncio.run_coroutine_threadsafe(_cancel_pending(), self._loop).result(5)
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join(5)
        self._loop.close()


# ---------------------------------------------------------------------------
# transcripts


@dataclass(frozen=True)
class TranscriptEntry:
    direction: Direction
    plaintext: bytes
    nonce: bytes
    frame: bytes

    def line(self) -> str:
        prefix = "C >: " if self.direction is Direction.CLIENT_TO_SERVER else "< S: "
        return prefix + self.plaintext.decode("utf-8", "backslashreplace")


@dataclass
class Transcript:
    entries: list = field(default_factory=list)
    error: Optional[Exception] = None
    client_keypair: Optional[KeyPair] = None
    server_keypair: Optional[KeyPair] = None
    client_counter_start: int = 0
    server_counter_start: int = 0

    @property
    def plaintexts(self) -> list[bytes]:
        return [e.plaintext for e in self.entries]

    @property
    def nonces(self) -> list[bytes]:
        return [e.nonce for e in self.entries]


def _box_of(payload: bytes, first: bool) -> tuple[bytes, bytes]:
    """Split an unframed wire message into (nonce, box) as the receiver sees it."""
    if first:
        half = payload[KEY_SIZE:KEY_SIZE + HALF_SIZE]
        return half + ZERO_HALF, payload[KEY_SIZE + HALF_SIZE:]
    return payload[:2 * HALF_SIZE], payload[2 * HALF_SIZE:]


class _Pair:
    """A client and server session wired back to back with fixed seeds."""

    def __init__(self, seed: int, store, extensions):
        rng = random.Random(seed)
        self.client_keys = deterministic_keypair(rng)
        self.server_keys = deterministic_keypair(rng, label_safe=True)
        self.client_start = 1 + rng.randrange(1 << 47)
        self.server_start = 1 + rng.randrange(1 << 47)
        self.client = ClientSession(self.server_keys.public, self.client_keys, self.client_start)
        self.server = ServerSession(self.server_keys, self.server_start)
        self.store = store
        self.extensions = list(extensions)
        self.frames = 0

    def entry(self, direction: Direction, frame: bytes) -> TranscriptEntry:
        payload, _ = codec.netstring_decode(frame)
        nonce, box = _box_of(payload, self.frames == 0)
        plaintext = ChaCha20Poly1305(self.client.shared_key).decrypt(nonce, box, None)
        self.frames += 1
        return TranscriptEntry(direction, plaintext, nonce, frame)


def run_transcript(store: MappingStore, requests: Sequence[ProtocolMessage], seed: int = 0,
                   extensions: Iterable[str] = ()) -> Transcript:
    """Drive client and server sessions over an in-memory channel.

    Plaintexts are recovered independently by opening each captured box
    with the shared key, so they show exactly what travelled on the wire.
    """
    pair = _Pair(seed, store, extensions)
    transcript = Transcript(client_keypair=pair.client_keys, server_keypair=pair.server_keys,
                            client_counter_start=pair.client_start,
                            server_counter_start=pair.server_start)
    try:
        for request in requests:
            frame = frame_encode(pair.client.seal(request))
            transcript.entries.append(pair.entry(Direction.CLIENT_TO_SERVER, frame))
            expecting = "followup" if pair.server.handshake_done else "first"
            opened = pair.server.open(frame_decode(frame, expecting)[0])
            assert opened == request
            reply = handle_message(pair.store, pair.extensions, opened)
            frame = frame_encode(pair.server.seal(reply))
            transcript.entries.append(pair.entry(Direction.SERVER_TO_CLIENT, frame))
            assert pair.client.open(frame_decode(frame, "server")[0]) == reply
    except ScapError as exc:
        transcript.error = exc
    return transcript


# ---------------------------------------------------------------------------
# fault injection


@dataclass(frozen=True)
class Fault:
    """One attack on the frame with the given index (0 = first client frame).

    ``action`` is ``flip_byte``, ``truncate``, ``replay_previous``,
    ``reorder_swap`` or ``drop``; ``arg`` is the box offset for flips and
    the kept length for truncation. Flips XOR the byte with ``mask``.
    """

    at_message_index: int
    action: str
    arg: int = 0
    mask: int = 0x01


@dataclass
class FaultPlan:
    operations: list = field(default_factory=list)


@dataclass
class FaultOutcome:
    fault: Fault
    error: Optional[str]
    plaintext_leaked: bool
    torn_down: bool


@dataclass
class FaultReport:
    outcomes: list = field(default_factory=list)
    delivered: int = 0

    @property
    def all_rejected(self) -> bool:
        return all(o.torn_down and not o.plaintext_leaked for o in self.outcomes)


def _tamper(frame: bytes, fault: Fault, first: bool) -> bytes:
    payload, _ = codec.netstring_decode(frame)
    header = KEY_SIZE + HALF_SIZE if first else 2 * HALF_SIZE
    if fault.action == "flip_byte":
        if not 0 <= fault.arg < len(payload) - header or not 0 < fault.mask < 256:
            raise ValueError("flip outside the box or with an empty mask")
        mutated = bytearray(payload)
        mutated[header + fault.arg] ^= fault.mask
        return codec.netstring_encode(bytes(mutated))
    if fault.action == "truncate":
        return frame[:fault.arg]
    raise ValueError("unknown tamper action %r" % fault.action)


def run_with_faults(plan: FaultPlan, store: Optional[MappingStore] = None,
                    requests: Optional[Sequence[ProtocolMessage]] = None, seed: int = 0,
                    extensions: Iterable[str] = ()) -> FaultReport:
    """Replay a session, attacking ciphertext frames per *plan*.

    The session ends at the first fault: the receiver must reject the frame
    and close, and nothing it yields may come from a modified frame.
    """
    store = store if store is not None else example_store()
    requests = list(requests) if requests is not None else example_requests()
    faults = {f.at_message_index: f for f in plan.operations}
    for index in faults:
        if index < 0 or index >= 2 * len(requests):
            raise ValueError("fault index %d outside transcript of %d frames" % (index, 2 * len(requests)))
    pair = _Pair(seed, store, extensions)
    report = FaultReport()
    history = {Direction.CLIENT_TO_SERVER: [], Direction.SERVER_TO_CLIENT: []}

    def deliver(direction, frame):
        if direction is Direction.CLIENT_TO_SERVER:
            expecting = "followup" if pair.server.handshake_done else "first"
            return pair.server.open(frame_decode(frame, expecting)[0])
        return pair.client.open(frame_decode(frame, "server")[0])

    index = 0
    received = None
    for request in requests:
        for direction in (Direction.CLIENT_TO_SERVER, Direction.SERVER_TO_CLIENT):
            if direction is Direction.CLIENT_TO_SERVER:
                original = frame_encode(pair.client.seal(request))
            else:
                original = frame_encode(pair.server.seal(handle_message(store, extensions, received)))
            fault = faults.get(index)
            if fault is None:
                received = deliver(direction, original)
                history[direction].append(original)
                report.delivered += 1
                index += 1
                continue

            if fault.action == "drop":
                report.outcomes.append(FaultOutcome(fault, "dropped (peer idles until timeout)", False, True))
                return report
            if fault.action in ("flip_byte", "truncate"):
                attempts = [_tamper(original, fault, index == 0)]
            elif fault.action == "replay_previous":
                if not history[direction]:
                    raise ValueError("nothing to replay before frame %d" % index)
                attempts = [history[direction][-1]]
            elif fault.action == "reorder_swap":
                if not history[direction]:
                    raise ValueError("nothing to swap with before frame %d" % index)
                attempts = [history[direction][-1], original]
            else:
                raise ValueError("unknown fault action %r" % fault.action)

            try:
                deliver(direction, attempts[0])
            except (ScapError, ValueError) as exc:
                report.outcomes.append(FaultOutcome(fault, type(exc).__name__, False, True))
            else:
                report.outcomes.append(FaultOutcome(fault, None, True, False))
            return report
    return report


# ---------------------------------------------------------------------------
# golden vectors

GOLDEN_CLIENT_SECRET = bytes(range(0x40, 0x60))
GOLDEN_SERVER_SECRET = bytes(range(0x80, 0xA0))
GOLDEN_CLIENT_COUNTER = 1
GOLDEN_SERVER_COUNTER = 1
_GOLDEN_NAMES = ["first_client", "server_hello_reply", "followup_client", "server_query_reply"]


def golden_sessions() -> tuple[ClientSession, ServerSession]:
    client_keys = KeyPair.from_secret(GOLDEN_CLIENT_SECRET)
    server_keys = KeyPair.from_secret(GOLDEN_SERVER_SECRET)
    return (ClientSession(server_keys.public, client_keys, GOLDEN_CLIENT_COUNTER),
            ServerSession(server_keys, GOLDEN_SERVER_COUNTER))


def export_golden_vectors(out_dir) -> list[Path]:
    """Write the four frames of the example query with fixed keys and counters.

    Each ``*.bin`` file holds one netstring-framed wire message. ``index.txt``
    has one line of ``key=value`` pairs per frame; ``plaintexts.txt`` holds
    the box contents one per line.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    client, server = golden_sessions()
    store = example_store()
    frames = []
    for request in example_requests():
        frame = frame_encode(client.seal(request))
        frames.append(("client_to_server", frame, codec.message_encode(request)))
        expecting = "followup" if server.handshake_done else "first"
        reply = handle_message(store, (), server.open(frame_decode(frame, expecting)[0]))
        frame = frame_encode(server.seal(reply))
        frames.append(("server_to_client", frame, codec.message_encode(reply)))
        client.open(frame_decode(frame, "server")[0])

    paths = []
    index_lines = []
    for n, (name, (direction, frame, plaintext)) in enumerate(zip(_GOLDEN_NAMES, frames)):
        path = out / ("%02d_%s.bin" % (n, name))
        path.write_bytes(frame)
        paths.append(path)
        payload, _ = codec.netstring_decode(frame)
        nonce, _ = _box_of(payload, n == 0)
        index_lines.append(" ".join([
            "name=%s" % path.name,
            "direction=%s" % direction,
            "client_secret=%s" % client.keypair.secret.hex(),
            "client_public=%s" % client.keypair.public.hex(),
            "server_secret=%s" % server.keypair.secret.hex(),
            "server_public=%s" % server.keypair.public.hex(),
            "shared_key=%s" % client.shared_key.hex(),
            "client_counter_start=%d" % GOLDEN_CLIENT_COUNTER,
            "server_counter_start=%d" % GOLDEN_SERVER_COUNTER,
            "nonce=%s" % nonce.hex(),
            "plaintext_hex=%s" % plaintext.hex(),
        ]))
    index = out / "index.txt"
    index.write_text("\n".join(index_lines) + "\n")
    plaintexts = out / "plaintexts.txt"
    plaintexts.write_bytes(b"\n".join(p for _, _, p in frames) + b"\n")
    return paths + [index, plaintexts]


def label_for(keypair: KeyPair, domain: str) -> str:
    return "%s.%s" % (fqdn_label_for_key(keypair.public), domain)
