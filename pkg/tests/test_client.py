import random

import pytest

from scap.client import ResolveRequest, ServerOverride, exchange, resolve
from scap.codec import Ok, PermFail, Query
from scap.discovery import SecurityPolicy
from scap.errors import (
    AllServersUnreachable,
    NoSrvRecords,
    Refused,
    RetryLater,
    SecurityPolicyViolation,
)
from scap.harness import (
    EXAMPLE_ADDRESS,
    EXAMPLE_TARGET,
    InMemoryDialer,
    MockDnsClient,
    MockZone,
    ServerEndpoint,
    ServerThread,
    deterministic_keypair,
    label_for,
    example_store,
)
from scap.identity import builtin_service_id, parse_address
from scap.server import MISS_DESCRIPTION, MappingStore, ScapServer

REQUIRE = SecurityPolicy.REQUIRE_DNSSEC


class Deployment:
    """A zone for example.com plus in-memory servers behind it."""

    def __init__(self, seed=0):
        self.rng = random.Random(seed)
        self.zone = MockZone()
        self.dialer = InMemoryDialer()
        self.names = []

    def add(self, store, priority=10, weight=0, host=None):
        pair = deterministic_keypair(self.rng, label_safe=True)
        fqdn = label_for(pair, "example.com")
        host = host or "10.0.0.%d" % (len(self.names) + 1)
        self.zone.add_server("example.com", fqdn, 4332, priority, weight, host)
        self.dialer.endpoints[(host, 4332)] = ServerEndpoint(pair, store)
        self.names.append(fqdn)
        return fqdn, host

    def resolve(self, address=EXAMPLE_ADDRESS, policy=REQUIRE, service="bitcoin"):
        req = ResolveRequest(parse_address(address), builtin_service_id(service), policy)
        self.dns = MockDnsClient(self.zone)
        return resolve(req, dns=self.dns, dialer=self.dialer, rng=random.Random(3))


def test_resolve_hit():
    dep = Deployment()
    fqdn, host = dep.add(example_store())
    result = dep.resolve()
    assert result.target_data == EXAMPLE_TARGET
    assert result.server_used.fqdn == fqdn
    assert result.dnssec_validated
    assert result.spoof_report.warnings == ()
    assert dep.dialer.log == [(host, 4332)]


def test_resolve_data_is_byte_exact():
    dep = Deployment()
    raw = bytes(range(256))
    store = MappingStore()
    from scap.server import MappingRecord
    from scap.identity import ServiceId, BUILTIN_SERVICES

    store.add(MappingRecord(EXAMPLE_ADDRESS, ServiceId(BUILTIN_SERVICES["bitcoin"]), raw))
    dep.add(store)
    assert dep.resolve().target_data == raw


def test_fallback_to_lower_priority():
    dep = Deployment()
    dep.add(example_store(), priority=10, host="10.9.9.9")
    del dep.dialer.endpoints[("10.9.9.9", 4332)]  # dead
    backup, backup_host = dep.add(example_store(), priority=20)
    result = dep.resolve()
    assert result.server_used.fqdn == backup
    assert dep.dialer.log == [("10.9.9.9", 4332), (backup_host, 4332)]


def test_example_layout_falls_back_to_priority_30():
    dep = Deployment()
    dep.add(example_store(), priority=10, weight=65, host="10.9.9.1")
    dep.add(example_store(), priority=10, weight=35, host="10.9.9.2")
    last, last_host = dep.add(example_store(), priority=30, weight=0)
    del dep.dialer.endpoints[("10.9.9.1", 4332)]
    del dep.dialer.endpoints[("10.9.9.2", 4332)]
    result = dep.resolve()
    assert result.server_used.fqdn == last
    assert sorted(dep.dialer.log[:2]) == [("10.9.9.1", 4332), ("10.9.9.2", 4332)]
    assert dep.dialer.log[2] == (last_host, 4332)


def test_authoritative_miss_stops_retries():
    dep = Deployment()
    dep.add(MappingStore(), priority=10)
    dep.add(example_store(), priority=20)
    with pytest.raises(Refused) as info:
        dep.resolve()
    assert info.value.description == MISS_DESCRIPTION
    assert len(dep.dialer.log) == 1


def test_temporary_failure_continues_then_reports():
    class Flaky(MappingStore):
        def lookup(self, *args):
            raise OSError("down")

    dep = Deployment()
    dep.add(Flaky(), priority=10)
    _, good = dep.add(example_store(), priority=20)
    assert dep.resolve().target_data == EXAMPLE_TARGET
    only_flaky = Deployment()
    only_flaky.add(Flaky())
    with pytest.raises(RetryLater):
        only_flaky.resolve()


def test_wrong_key_in_label_is_a_session_failure():
    dep = Deployment()
    fqdn, host = dep.add(example_store(), priority=10)
    # the server at this address holds a different key than its label announces
    dep.dialer.endpoints[(host, 4332)] = ServerEndpoint(deterministic_keypair(random.Random(99)), example_store())
    with pytest.raises(AllServersUnreachable) as info:
        dep.resolve()
    assert info.value.failures


def test_dnssec_failure_before_any_connection():
    dep = Deployment()
    dep.add(example_store())
    dep.zone.default_validated = False
    with pytest.raises(SecurityPolicyViolation):
        dep.resolve()
    assert dep.dialer.log == []
    result = dep.resolve(policy=SecurityPolicy.INSECURE)
    assert result.target_data == EXAMPLE_TARGET and not result.dnssec_validated


def test_unvalidated_address_records_rejected():
    dep = Deployment()
    fqdn, _ = dep.add(example_store())
    dep.zone.validated[fqdn] = False
    with pytest.raises(SecurityPolicyViolation):
        dep.resolve()
    assert dep.dialer.log == []


def test_no_srv_records():
    with pytest.raises(NoSrvRecords):
        Deployment().resolve(address="user@nodomain", policy=SecurityPolicy.INSECURE)


def test_spoof_report_is_attached():
    dep = Deployment()
    dep.add(example_store())
    with pytest.raises(Refused):
        dep.resolve(address="john\u202edoe@example.com")
    from scap.identity import ServiceId, BUILTIN_SERVICES
    from scap.server import MappingRecord

    store = MappingStore([MappingRecord("a\u0308@example.com".encode(), ServiceId(BUILTIN_SERVICES["bitcoin"]), b"x")])
    dep2 = Deployment()
    dep2.add(store)
    assert dep2.resolve(address="a\u0308@example.com").spoof_report.kinds() == ["NotNfcNormalized"]


def test_server_override_skips_dns(store, server_keys):
    override = ServerOverride.parse("10.1.1.1:4400:" + server_keys.public.hex())
    dialer = InMemoryDialer({("10.1.1.1", 4400): ServerEndpoint(server_keys, store)})
    req = ResolveRequest(parse_address(EXAMPLE_ADDRESS), builtin_service_id("bitcoin"), REQUIRE, override)
    dns = MockDnsClient(MockZone())
    assert resolve(req, dns=dns, dialer=dialer).target_data == EXAMPLE_TARGET
    assert dns.queries == []


def test_server_override_parse_errors():
    for bad in ("host", "host:1", "host:x:" + "00" * 32, "host:1:abcd"):
        with pytest.raises(ValueError):
            ServerOverride.parse(bad)
    assert ServerOverride.parse("[::1]:5:" + "00" * 32).host == "::1"


def test_exchange_over_tcp(store, server_keys):
    from scap.client import TcpDialer

    with ServerThread([ScapServer(server_keys, store, ["FOO"])]) as threads:
        conn = TcpDialer().connect("127.0.0.1", threads.ports[0], 5)
        try:
            replies = exchange(conn, server_keys.public, [
                Query(EXAMPLE_ADDRESS, b"nope"), Query(EXAMPLE_ADDRESS, b"unreached"),
            ])
        finally:
            conn.close()
    assert replies[0] == Ok(b"FOO")
    assert isinstance(replies[1], PermFail)
    assert len(replies) == 2
