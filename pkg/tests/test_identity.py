import pytest
from hypothesis import given, strategies as st

from scap.errors import InvalidDomain, InvalidServiceId, InvalidUtf8, LocalTooLong, NoAtSymbol, UnknownAlias
from scap.identity import (
    BUILTIN_SERVICES,
    ServiceId,
    builtin_service_id,
    escape_for_display,
    format_address,
    inspect_spoofing,
    parse_address,
)


def test_parse_basic():
    addr = parse_address(b"johndoe@example.com")
    assert addr.local == b"johndoe"
    assert addr.domain_ascii == "example.com"


def test_last_at_is_the_separator():
    addr = parse_address("a@b@example.com")
    assert addr.local == b"a@b"
    assert addr.domain_ascii == "example.com"


def test_empty_local_allowed():
    addr = parse_address("@example.com")
    assert addr.local == b""
    assert format_address(addr) == b"@example.com"


def test_local_length_boundary():
    assert len(parse_address(b"x" * 1023 + b"@example.com").local) == 1023
    with pytest.raises(LocalTooLong):
        parse_address(b"x" * 1024 + b"@example.com")
    # the limit is in bytes, not characters
    with pytest.raises(LocalTooLong):
        parse_address("ä" * 512 + "@example.com")


@pytest.mark.parametrize("text, error", [
    ("johndoe", NoAtSymbol),
    ("user@", InvalidDomain),
    ("user@example.com.", InvalidDomain),
    ("user@exa_mple.com", InvalidDomain),
    ("user@-bad.com", InvalidDomain),
    ("user@a..com", InvalidDomain),
    ("user@" + "a" * 64 + ".com", InvalidDomain),
    ("user@" + ".".join(["abcdefghi"] * 26), InvalidDomain),
    (b"\xffuser@example.com", InvalidUtf8),
])
def test_parse_rejects(text, error):
    with pytest.raises(error):
        parse_address(text)


def test_idna_conversion_matches_independent_codec():
    addr = parse_address("jan@müller.example")
    # the stdlib codec implements the older IDNA profile; for this name both agree
    assert addr.domain_ascii == "müller.example".encode("idna").decode() == "xn--mller-kva.example"
    assert format_address(addr, "ascii") == b"jan@xn--mller-kva.example"
    assert format_address(addr, "unicode") == "jan@müller.example".encode()


def test_domain_is_case_insensitive_local_is_not():
    a = parse_address("John@Example.COM")
    b = parse_address("John@example.com")
    assert a == b
    assert parse_address("john@example.com") != a


def test_nontransitional_processing_keeps_sharp_s():
    assert parse_address("x@faß.de").domain_ascii == "xn--fa-hia.de"


@given(
    st.text(max_size=60).filter(lambda s: len(s.encode()) <= 1023),
    st.sampled_from(["example.com", "müller.example", "EXAMPLE.org", "a-b.c-d.net"]),
)
def test_format_parse_round_trip(local, domain):
    addr = parse_address(local + "@" + domain)
    assert addr.local == local.encode()
    again = parse_address(format_address(addr, "unicode"))
    assert again.local == addr.local and again.domain_ascii == addr.domain_ascii
    assert parse_address(format_address(addr, "ascii")) == addr


@pytest.mark.parametrize("alias", sorted(BUILTIN_SERVICES))
def test_builtin_aliases(alias):
    assert builtin_service_id(alias).token == BUILTIN_SERVICES[alias]
    assert builtin_service_id(alias.upper()).alias == alias


def test_table_values():
    assert builtin_service_id("bitcoin").token == "000000000019d6689c085ae165831e934ff763ae46a2a6c172b3f1b60a8ce26f"
    assert builtin_service_id("litecoin").token == "12a765e31ffd4059bada1e25190f6e98c99d9714d334efa41a195a7e7e04bfe2"
    assert builtin_service_id("dogecoin").token == "1a91e3dace36e2be3bf030a65679fe821aa1d6ef92e7c9902eb318182c355691"


def test_raw_hex_and_unknown_alias():
    raw = "AB" * 32
    assert builtin_service_id(raw).token == raw.lower()
    with pytest.raises(UnknownAlias):
        builtin_service_id("bitcoins")
    with pytest.raises(InvalidServiceId):
        ServiceId("")
    with pytest.raises(InvalidServiceId):
        ServiceId("x" * 256)


def test_spoofing_clean():
    assert inspect_spoofing("johndoe@example.com").warnings == ()


def test_spoofing_bidi_override():
    report = inspect_spoofing("john\u202edoe@example.com")
    assert [(w.kind, w.position) for w in report.warnings] == [("BidiOverride", 4)]


def test_spoofing_decomposed_umlaut():
    report = inspect_spoofing("a\u0308bc@example.com")
    assert report.kinds() == ["NotNfcNormalized"]
    assert report.warnings[0].position == 1
    assert inspect_spoofing("äbc@example.com").warnings == ()


def test_spoofing_control_and_format():
    report = inspect_spoofing("jo\x07hn\u200b@example.com")
    assert [(w.kind, w.position) for w in report.warnings] == [("ControlChar", 2), ("FormatChar", 5)]


def test_spoofing_positions_are_byte_offsets():
    report = inspect_spoofing("ää\u202e@example.com")
    assert report.warnings[0].position == 4


def test_spoofed_address_still_parses():
    text = "john\u202edoe@example.com"
    assert inspect_spoofing(text)
    assert parse_address(text).local == "john\u202edoe".encode()


def test_escape_for_display():
    assert escape_for_display("a\x1bb\u202ec") == "a\\u{001B}b\\u{202E}c"
    assert escape_for_display("ä@b") == "ä@b"
