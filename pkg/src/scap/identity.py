"""Cryptoaddresses, service identifiers and spoofing inspection."""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field
from typing import Literal

import idna

from .errors import (
    InvalidDomain,
    InvalidServiceId,
    InvalidUtf8,
    LocalTooLong,
    NoAtSymbol,
    UnknownAlias,
)

MAX_LOCAL_LENGTH = 1023
MAX_DOMAIN_LENGTH = 253
MAX_LABEL_LENGTH = 63
MAX_SERVICE_ID_LENGTH = 255

_LDH_LABEL = re.compile(r"^[a-z0-9](?:[a-z0-9-]*[a-z0-9])?$")
_HEX64 = re.compile(r"^[0-9a-fA-F]{64}$")


def _as_text(value: bytes | str) -> str:
    if isinstance(value, str):
        return value
    try:
        return bytes(value).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InvalidUtf8("not valid UTF-8: %s" % exc) from exc


@dataclass(frozen=True)
class CryptoAddress:
    """``local@domain``. Equality ignores how the domain was spelled."""

    local: bytes
    domain_ascii: str
    domain_unicode: str = field(compare=False)

    def __str__(self) -> str:
        return format_address(self, "unicode").decode("utf-8")


def domain_to_ascii(domain: str) -> str:
    """Convert a domain to its lowercase ASCII form and check FQDN syntax."""
    if not domain:
        raise InvalidDomain("domain part is empty")
    if domain.endswith("."):
        raise InvalidDomain("domain part must not end with a dot")
    try:
        ascii_name = idna.encode(domain, uts46=True, transitional=False).decode("ascii")
    except (idna.IDNAError, UnicodeError) as exc:
        raise InvalidDomain("domain %r rejected by IDNA: %s" % (domain, exc)) from exc
    ascii_name = ascii_name.lower()
    if len(ascii_name) > MAX_DOMAIN_LENGTH:
        raise InvalidDomain("domain is %d bytes, limit %d" % (len(ascii_name), MAX_DOMAIN_LENGTH))
    for label in ascii_name.split("."):
        if not label:
            raise InvalidDomain("domain %r has an empty label" % domain)
        if len(label) > MAX_LABEL_LENGTH:
            raise InvalidDomain("label %r longer than %d bytes" % (label, MAX_LABEL_LENGTH))
        if not _LDH_LABEL.match(label):
            raise InvalidDomain("label %r is not letters, digits and hyphens" % label)
    return ascii_name


def parse_address(text: bytes | str) -> CryptoAddress:
    """Split at the last ``@`` and normalize the domain part."""
    text = _as_text(text)
    local, at, domain = text.rpartition("@")
    if not at:
        raise NoAtSymbol("cryptoaddress %r has no '@'" % text)
    local_bytes = local.encode("utf-8")
    if len(local_bytes) > MAX_LOCAL_LENGTH:
        raise LocalTooLong("local part is %d bytes, limit %d" % (len(local_bytes), MAX_LOCAL_LENGTH))
    return CryptoAddress(local_bytes, domain_to_ascii(domain), domain)


def format_address(addr: CryptoAddress, form: Literal["unicode", "ascii"] = "unicode") -> bytes:
    domain = addr.domain_ascii if form == "ascii" else addr.domain_unicode
    return addr.local + b"@" + domain.encode("utf-8")


# ---------------------------------------------------------------------------
# service identifiers

BUILTIN_SERVICES = {
    "bitcoin": "000000000019d6689c085ae165831e934ff763ae46a2a6c172b3f1b60a8ce26f",
    "litecoin": "12a765e31ffd4059bada1e25190f6e98c99d9714d334efa41a195a7e7e04bfe2",
    "dogecoin": "1a91e3dace36e2be3bf030a65679fe821aa1d6ef92e7c9902eb318182c355691",
}


@dataclass(frozen=True)
class ServiceId:
    token: str

    def __post_init__(self):
        raw = self.token.encode("utf-8")
        if not raw:
            raise InvalidServiceId("service identifier is empty")
        if len(raw) > MAX_SERVICE_ID_LENGTH:
            raise InvalidServiceId("service identifier longer than %d bytes" % MAX_SERVICE_ID_LENGTH)

    def __str__(self) -> str:
        return self.token

    def encode(self) -> bytes:
        return self.token.encode("utf-8")

    @property
    def alias(self) -> str | None:
        for name, token in BUILTIN_SERVICES.items():
            if token == self.token:
                return name
        return None


def builtin_service_id(alias: str) -> ServiceId:
    """Look up a cryptocurrency alias, or accept a raw 64-hex genesis hash."""
    key = alias.strip().lower()
    if key in BUILTIN_SERVICES:
        return ServiceId(BUILTIN_SERVICES[key])
    if _HEX64.match(key):
        return ServiceId(key)
    raise UnknownAlias("unknown service alias %r (known: %s)" % (alias, ", ".join(BUILTIN_SERVICES)))


def service_id_from_wire(raw: bytes) -> ServiceId:
    return ServiceId(_as_text(raw))


# ---------------------------------------------------------------------------
# spoofing signals

BIDI_CONTROLS = frozenset(
    chr(c) for c in (0x061C, 0x200E, 0x200F, *range(0x202A, 0x202F), *range(0x2066, 0x206A))
)


@dataclass(frozen=True)
class SpoofWarning:
    kind: Literal["ControlChar", "FormatChar", "BidiOverride", "NotNfcNormalized"]
    position: int
    detail: str


@dataclass(frozen=True)
class SpoofReport:
    warnings: tuple[SpoofWarning, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.warnings)

    def kinds(self) -> list[str]:
        return [w.kind for w in self.warnings]


def _describe(ch: str) -> str:
    return "U+%04X %s" % (ord(ch), unicodedata.name(ch, "<unnamed>"))


def inspect_spoofing(addr_text: bytes | str) -> SpoofReport:
    """Report control, format and bidi characters and non-NFC text.

    Positions are byte offsets into the UTF-8 text. Nothing is rejected.
    """
    text = _as_text(addr_text)
    warnings = []
    offset = 0
    offsets = []
    for ch in text:
        offsets.append(offset)
        category = unicodedata.category(ch)
        if ch in BIDI_CONTROLS:
            warnings.append(SpoofWarning("BidiOverride", offset, _describe(ch)))
        elif category == "Cc":
            warnings.append(SpoofWarning("ControlChar", offset, _describe(ch)))
        elif category == "Cf":
            warnings.append(SpoofWarning("FormatChar", offset, _describe(ch)))
        offset += len(ch.encode("utf-8"))

    if not unicodedata.is_normalized("NFC", text):
        # first prefix whose composed form differs points at the culprit
        where = 0
        for i in range(len(text)):
            prefix = text[: i + 1]
            if unicodedata.normalize("NFC", prefix) != prefix:
                where = i
                break
        warnings.append(SpoofWarning(
            "NotNfcNormalized",
            offsets[where],
            "%s; text differs from its composed (NFC) form" % _describe(text[where]),
        ))
    return SpoofReport(tuple(warnings))


def escape_for_display(text: str) -> str:
    """Replace control and format characters with ``\\u{XXXX}`` escapes."""
    out = []
    for ch in text:
        if unicodedata.category(ch) in ("Cc", "Cf") or ch in BIDI_CONTROLS:
            out.append("\\u{%04X}" % ord(ch))
        else:
            out.append(ch)
    return "".join(out)
