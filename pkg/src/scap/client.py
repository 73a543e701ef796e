"""Resolver: cryptoaddress in, target data out."""

from __future__ import annotations

import logging
import random
import socket
from dataclasses import dataclass, field
from typing import Optional, Protocol

from . import codec
from .codec import ClientHello, Ok, PermFail, Query, TempFail
from .discovery import (
    DnsAnswer,
    SecurityPolicy,
    ServerLocator,
    resolve_servers,
    select_server,
)
from .errors import (
    AllServersUnreachable,
    CodecError,
    DnsFailure,
    NoServersAvailable,
    Refused,
    RetryLater,
    SecurityPolicyViolation,
    SessionError,
)
from .identity import CryptoAddress, ServiceId, SpoofReport, format_address, inspect_spoofing
from .session import MAX_FRAME, ClientSession, frame_encode

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 10.0


@dataclass(frozen=True)
class ServerOverride:
    host: str
    port: int
    public_key: bytes

    @classmethod
    def parse(cls, spec: str) -> "ServerOverride":
        """Parse ``host:port:pubkeyhex`` (IPv6 hosts in brackets)."""
        if spec.startswith("["):
            host, _, rest = spec[1:].partition("]")
            port, _, key = rest.lstrip(":").partition(":")
        else:
            host, port, key = spec.rsplit(":", 2) if spec.count(":") >= 2 else (spec, "", "")
        try:
            public_key = bytes.fromhex(key)
            port_number = int(port)
        except ValueError:
            raise ValueError("server override must be host:port:pubkeyhex") from None
        if len(public_key) != 32 or not 1 <= port_number <= 0xFFFF:
            raise ValueError("server override must be host:port:pubkeyhex with a 32-byte key")
        return cls(host, port_number, public_key)


@dataclass
class ResolveRequest:
    address: CryptoAddress
    service: ServiceId
    policy: SecurityPolicy = SecurityPolicy.REQUIRE_DNSSEC
    server_override: Optional[ServerOverride] = None
    timeout: float = DEFAULT_TIMEOUT


@dataclass
class ResolveResult:
    target_data: bytes
    server_used: ServerLocator
    spoof_report: SpoofReport
    dnssec_validated: bool
    extensions: list = field(default_factory=list)


class Connection(Protocol):
    def sendall(self, data: bytes) -> None: ...

    def recv(self, n: int) -> bytes: ...

    def close(self) -> None: ...


class Dialer(Protocol):
    def connect(self, host: str, port: int, timeout: float) -> Connection: ...


class TcpDialer:
    def connect(self, host: str, port: int, timeout: float) -> socket.socket:
        return socket.create_connection((host, port), timeout=timeout)


class _FrameReader:
    def __init__(self, conn: Connection):
        self.conn = conn
        self.buffer = b""

    def _fill(self, want: int) -> None:
        while len(self.buffer) < want:
            chunk = self.conn.recv(max(4096, want - len(self.buffer)))
            if not chunk:
                raise ConnectionError("server closed the connection")
            self.buffer += chunk

    def read_frame(self) -> bytes:
        """Return the payload of the next netstring frame."""
        width = len(str(MAX_FRAME))
        while b":" not in self.buffer[: width + 1]:
            if len(self.buffer) > width:
                raise codec.MalformedNetstring("frame length field too long")
            self._fill(len(self.buffer) + 1)
        colon = self.buffer.index(b":")
        length = codec.parse_length(self.buffer[:colon], MAX_FRAME)
        self._fill(colon + length + 2)
        payload, used = codec.netstring_decode(self.buffer, MAX_FRAME)
        self.buffer = self.buffer[used:]
        return payload


def exchange(conn: Connection, server_public: bytes, requests: list,
             session: Optional[ClientSession] = None) -> list:
    """Run hello plus *requests* over *conn*; returns the replies in order."""
    session = session or ClientSession(server_public)
    reader = _FrameReader(conn)
    replies = []
    for request in [ClientHello(), *requests]:
        conn.sendall(frame_encode(session.seal(request)))
        reply = session.open(reader.read_frame())
        replies.append(reply)
        if not isinstance(reply, Ok):
            break
    return replies


def _lookup_addresses(locator: ServerLocator, dns, policy: SecurityPolicy) -> list[str]:
    answer: DnsAnswer = dns.query_addresses(locator.fqdn)
    if policy is SecurityPolicy.REQUIRE_DNSSEC and not answer.authenticated:
        raise SecurityPolicyViolation("address records of %s are not DNSSEC-validated" % locator.fqdn)
    return list(answer.records)


def resolve(req: ResolveRequest, dns=None, dialer: Optional[Dialer] = None,
            rng: Optional[random.Random] = None) -> ResolveResult:
    """Resolve one cryptoaddress for one service.

    Servers are tried per priority and weight. A connection failure, broken
    session or temporary failure moves on to the next server; a permanent
    failure is authoritative and ends the lookup at once.
    """
    dialer = dialer or TcpDialer()
    rng = rng or random.SystemRandom()
    report = inspect_spoofing(format_address(req.address, "unicode"))

    if req.server_override is not None:
        override = req.server_override
        candidates = [ServerLocator(override.host, override.port, 1, override.public_key)]
        fixed_hosts = {override.host: [override.host]}
    else:
        if dns is None:
            from .discovery import ResolverDnsClient
            dns = ResolverDnsClient()
        candidates = resolve_servers(req.address.domain_ascii, dns, req.policy)
        fixed_hosts = {}

    query = Query(format_address(req.address, "unicode"), req.service.encode())
    excluded: set[str] = set()
    failures: list[tuple[str, Exception]] = []
    temp_failures: list[str] = []
    while True:
        try:
            locator = select_server(candidates, rng, excluded)
        except NoServersAvailable:
            break
        excluded.add(locator.fqdn)
        hosts = fixed_hosts.get(locator.fqdn)
        if hosts is None:
            try:
                hosts = _lookup_addresses(locator, dns, req.policy)
            except DnsFailure as exc:
                failures.append((locator.fqdn, exc))
                continue
        if not hosts:
            failures.append((locator.fqdn, DnsFailure("no address records for %s" % locator.fqdn)))
            continue

        replies = None
        for host in hosts:
            conn = None
            try:
                conn = dialer.connect(host, locator.port, req.timeout)
                replies = exchange(conn, locator.public_key, [query])
                break
            except (OSError, SessionError, CodecError) as exc:
                log.info("server %s (%s) failed: %s", locator.fqdn, host, exc)
                failures.append((locator.fqdn, exc))
            finally:
                if conn is not None:
                    conn.close()
        if replies is None:
            continue

        final = replies[-1]
        if isinstance(final, PermFail):
            raise Refused(final.description, locator)
        if isinstance(final, TempFail):
            temp_failures.append(final.description)
            failures.append((locator.fqdn, RetryLater(final.description)))
            continue
        if isinstance(final, Ok) and len(replies) == 2:
            return ResolveResult(
                final.payload, locator, report, locator.dnssec_validated,
                codec.parse_extension_list(replies[0].payload),
            )
        failures.append((locator.fqdn, CodecError("unexpected reply %r" % (final,))))

    if temp_failures:
        raise RetryLater(temp_failures[-1], failures)
    raise AllServersUnreachable(
        "no server answered: " + "; ".join("%s: %s" % (name, exc) for name, exc in failures), failures
    )
