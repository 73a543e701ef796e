"""Server discovery: SRV lookup, key-in-name labels and weighted selection."""

from __future__ import annotations

import enum
import logging
import os
import random
from dataclasses import dataclass, field
from typing import Generic, Iterable, Optional, Protocol, Sequence, TypeVar

from .codec import base32_decode, base32_encode
from .errors import (
    AliasChainTooLong,
    BadKeyLength,
    DiscoveryError,
    DnsFailure,
    KeyTopBitSet,
    LabelTooShort,
    NoServersAvailable,
    NoSrvRecords,
    SecurityPolicyViolation,
    UnsupportedVersion,
)

log = logging.getLogger(__name__)

SERVICE_LABEL = "_scap._tcp"
DEFAULT_PORT = 4332
PROTOCOL_VERSION = 1
VERSION_CHARS = 4
KEY_CHARS = 51
LABEL_LENGTH = VERSION_CHARS + KEY_CHARS
MAX_ALIAS_HOPS = 8


def srv_name_for(domain_ascii: str) -> str:
    return "%s.%s." % (SERVICE_LABEL, domain_ascii.rstrip("."))


def fqdn_label_for_key(public_key: bytes, version: int = PROTOCOL_VERSION) -> str:
    """Build the leftmost label: base-32 version prefix then the key.

    A 32-byte key with bit 255 clear fits 51 characters; the 52nd character
    the plain encoding would produce is always ``0`` and is dropped.
    """
    if len(public_key) != 32:
        raise BadKeyLength("public key must be 32 bytes, got %d" % len(public_key))
    if public_key[31] & 0x80:
        raise KeyTopBitSet("public key has bit 255 set and cannot be encoded in 51 characters")
    if not 0 <= version <= 0xFFFF:
        raise UnsupportedVersion("version %d does not fit two bytes" % version)
    encoded = base32_encode(public_key)
    assert len(encoded) == KEY_CHARS + 1 and encoded[-1] == "0"
    return base32_encode(version.to_bytes(2, "little")) + encoded[:KEY_CHARS]


def extract_key_from_fqdn(fqdn: str) -> tuple[int, bytes]:
    """Return ``(version, public_key)`` encoded in the leftmost label of *fqdn*."""
    label = fqdn.strip(".").split(".")[0].lower()
    if len(label) < VERSION_CHARS:
        raise LabelTooShort("label %r is shorter than the version prefix" % label)
    version = int.from_bytes(base32_decode(label[:VERSION_CHARS]), "little")
    if version != PROTOCOL_VERSION:
        raise UnsupportedVersion("server label announces version %d" % version)
    key_text = label[VERSION_CHARS:]
    if len(key_text) != KEY_CHARS:
        raise BadKeyLength("key part has %d characters, expected %d" % (len(key_text), KEY_CHARS))
    # restore the implicit zero top bit
    key = base32_decode(key_text + "0")
    if len(key) != 32:
        raise BadKeyLength("decoded key is %d bytes" % len(key))
    return version, key


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class SrvRecord:
    priority: int
    weight: int
    port: int
    target: str
    ttl: int = 0
    dnssec_validated: bool = False

    def __post_init__(self):
        if not 0 <= self.priority <= 0xFFFF or not 0 <= self.weight <= 0xFFFF:
            raise ValueError("SRV priority and weight must be 0-65535")
        if not 1 <= self.port <= 0xFFFF:
            raise ValueError("SRV port must be 1-65535")
        if not self.target:
            raise ValueError("SRV target is empty")


@dataclass(frozen=True)
class ServerLocator:
    fqdn: str
    port: int
    version: int
    public_key: bytes
    priority: int = 0
    weight: int = 0
    dnssec_validated: bool = False

    @classmethod
    def from_fqdn(cls, fqdn: str, port: int = DEFAULT_PORT, priority: int = 0, weight: int = 0,
                  dnssec_validated: bool = False) -> "ServerLocator":
        version, key = extract_key_from_fqdn(fqdn)
        return cls(fqdn.rstrip("."), port, version, key, priority, weight, dnssec_validated)


class SecurityPolicy(enum.Enum):
    REQUIRE_DNSSEC = "require-dnssec"
    INSECURE = "insecure"


T = TypeVar("T")


@dataclass
class DnsAnswer(Generic[T]):
    records: list = field(default_factory=list)
    authenticated: bool = False


class DnsClient(Protocol):
    """Minimal DNS interface. An absent name or type yields an empty answer."""

    def query_srv(self, name: str) -> DnsAnswer[SrvRecord]: ...

    def query_cname(self, name: str) -> DnsAnswer[str]: ...

    def query_addresses(self, name: str) -> DnsAnswer[str]: ...


class ResolverDnsClient:
    """DnsClient backed by a recursive, validating resolver (via dnspython).

    DNSSEC state is taken from the AD bit of each response; no local
    signature validation is done. ``nameserver`` is ``host`` or ``host:port``
    and defaults to ``$SCAP_RESOLVER``, then the system configuration.
    """

    def __init__(self, nameserver: Optional[str] = None, timeout: float = 5.0):
        import dns.flags
        import dns.resolver

        nameserver = nameserver or os.environ.get("SCAP_RESOLVER") or None
        if nameserver:
            resolver = dns.resolver.Resolver(configure=False)
            host, port = _split_hostport(nameserver)
            resolver.nameservers = [host]
            resolver.port = port
        else:
            try:
                resolver = dns.resolver.Resolver()
            except dns.resolver.NoResolverConfiguration as exc:
                raise DnsFailure("no recursive resolver configured: %s" % exc) from exc
        resolver.use_edns(0, dns.flags.DO, 1232)
        resolver.flags = dns.flags.RD | dns.flags.AD
        resolver.lifetime = timeout
        resolver.cache = dns.resolver.Cache()
        self.resolver = resolver

    def _resolve(self, name: str, rdtype: str) -> tuple[list, bool, int]:
        import dns.exception
        import dns.flags
        import dns.resolver

        try:
            answer = self.resolver.resolve(name, rdtype, raise_on_no_answer=False)
        except dns.resolver.NXDOMAIN as exc:
            response = exc.response(exc.qnames()[0]) if exc.qnames() else None
            return [], bool(response is not None and response.flags & dns.flags.AD), 0
        except dns.exception.DNSException as exc:
            raise DnsFailure("DNS %s query for %s failed: %s" % (rdtype, name, exc)) from exc
        authenticated = bool(answer.response.flags & dns.flags.AD)
        if answer.rrset is None:
            return [], authenticated, 0
        return list(answer.rrset), authenticated, answer.rrset.ttl

    def query_srv(self, name: str) -> DnsAnswer[SrvRecord]:
        rdatas, authenticated, ttl = self._resolve(name, "SRV")
        records = [
            SrvRecord(r.priority, r.weight, r.port, r.target.to_text(omit_final_dot=True), ttl, authenticated)
            for r in rdatas
            # "." target means the service is decidedly unavailable
            if r.target.to_text() != "." and r.port
        ]
        return DnsAnswer(records, authenticated)

    def query_cname(self, name: str) -> DnsAnswer[str]:
        rdatas, authenticated, _ = self._resolve(name, "CNAME")
        return DnsAnswer([r.target.to_text(omit_final_dot=True) for r in rdatas], authenticated)

    def query_addresses(self, name: str) -> DnsAnswer[str]:
        addresses = []
        authenticated = True
        for rdtype in ("A", "AAAA"):
            rdatas, ok, _ = self._resolve(name, rdtype)
            addresses += [r.address for r in rdatas]
            authenticated = authenticated and ok
        return DnsAnswer(addresses, authenticated)


def _split_hostport(value: str, default_port: int = 53) -> tuple[str, int]:
    if value.startswith("["):
        host, _, rest = value[1:].partition("]")
        return host, int(rest[1:]) if rest.startswith(":") else default_port
    if value.count(":") == 1:
        host, port = value.split(":")
        return host, int(port)
    return value, default_port


# ---------------------------------------------------------------------------
# resolution


def _require(policy: SecurityPolicy, answer: DnsAnswer, what: str) -> None:
    if policy is SecurityPolicy.REQUIRE_DNSSEC and not answer.authenticated:
        raise SecurityPolicyViolation("%s is not DNSSEC-validated" % what)


def canonical_name(name: str, dns, policy: SecurityPolicy) -> str:
    """Follow CNAME aliases from *name*, at most MAX_ALIAS_HOPS deep."""
    current = name.rstrip(".")
    seen = {current.lower()}
    for _ in range(MAX_ALIAS_HOPS + 1):
        answer = dns.query_cname(current)
        _require(policy, answer, "CNAME lookup for %s" % current)
        if not answer.records:
            return current
        current = answer.records[0].rstrip(".")
        if current.lower() in seen:
            raise AliasChainTooLong("CNAME loop at %s" % current)
        seen.add(current.lower())
    raise AliasChainTooLong("more than %d CNAME hops from %s" % (MAX_ALIAS_HOPS, name))


def resolve_servers(domain_ascii: str, dns, policy: SecurityPolicy = SecurityPolicy.REQUIRE_DNSSEC
                    ) -> list[ServerLocator]:
    """Look up the SCAP servers of a domain, ordered by priority then weight.

    Records whose target cannot yield a usable key are skipped with a
    warning; if none survive, the first such error is raised.
    """
    name = srv_name_for(domain_ascii)
    answer = dns.query_srv(name)
    _require(policy, answer, "SRV answer for %s" % name)
    if not answer.records:
        raise NoSrvRecords("no SCAP SRV records at %s" % name)

    servers = []
    failures = []
    for record in answer.records:
        try:
            target = canonical_name(record.target, dns, policy)
            version, key = extract_key_from_fqdn(target)
        except SecurityPolicyViolation:
            raise
        except (DiscoveryError, ValueError) as exc:
            log.warning("skipping SRV target %s: %s", record.target, exc)
            failures.append(exc)
            continue
        servers.append(ServerLocator(
            target, record.port, version, key, record.priority, record.weight, answer.authenticated,
        ))
    if not servers:
        raise failures[0]
    servers.sort(key=lambda s: (s.priority, -s.weight, s.fqdn))
    return servers


def select_server(candidates: Sequence[ServerLocator], rng: random.Random,
                  excluded: Iterable[str] = ()) -> ServerLocator:
    """Weighted pick within the lowest remaining priority value.

    Candidates are ordered by descending weight then name; a uniform draw in
    ``[0, total_weight]`` selects the first whose running sum reaches it.
    A tier of zero weights is picked from uniformly.
    """
    excluded = set(excluded)
    remaining = [c for c in candidates if c.fqdn not in excluded]
    if not remaining:
        raise NoServersAvailable("no servers left to try")
    best = min(c.priority for c in remaining)
    tier = sorted((c for c in remaining if c.priority == best), key=lambda c: (-c.weight, c.fqdn))
    total = sum(c.weight for c in tier)
    if total == 0:
        return tier[rng.randrange(len(tier))]
    r = rng.uniform(0, total)
    running = 0
    for c in tier:
        running += c.weight
        if running >= r:
            return c
    return tier[-1]
