"""Cryptoaddress resolution over the Simple Cryptoaddress Protocol (SCAP).

Human-friendly ``local@domain`` identifiers are mapped to cryptographic
identifiers by servers found through DNS SRV records whose target names
carry the server's Curve25519 public key.
"""

from .client import ResolveRequest, ResolveResult, ServerOverride, resolve
from .codec import (
    ClientHello,
    Direction,
    NonStandard,
    Ok,
    PermFail,
    Query,
    Reserved,
    TempFail,
    base32_decode,
    base32_encode,
    message_decode,
    message_encode,
    netstring_decode,
    netstring_encode,
)
from .discovery import (
    SecurityPolicy,
    ServerLocator,
    SrvRecord,
    extract_key_from_fqdn,
    fqdn_label_for_key,
    resolve_servers,
    select_server,
)
from .errors import AllServersUnreachable, Refused, RetryLater, ScapError, SecurityPolicyViolation
from .identity import CryptoAddress, ServiceId, builtin_service_id, inspect_spoofing, parse_address
from .session import ClientSession, KeyPair, ServerSession, derive_shared, generate_keypair

__version__ = "0.1.0"

__all__ = [
    "AllServersUnreachable", "Refused", "RetryLater", "ScapError", "SecurityPolicyViolation",
    "ClientHello", "ClientSession", "CryptoAddress", "Direction", "KeyPair", "NonStandard", "Ok",
    "PermFail", "Query", "Reserved", "ResolveRequest", "ResolveResult", "SecurityPolicy",
    "ServerLocator", "ServerOverride", "ServerSession", "ServiceId", "SrvRecord", "TempFail",
    "base32_decode", "base32_encode", "builtin_service_id", "derive_shared", "extract_key_from_fqdn",
    "fqdn_label_for_key", "generate_keypair", "inspect_spoofing", "message_decode", "message_encode",
    "netstring_decode", "netstring_encode", "parse_address", "resolve", "resolve_servers",
    "select_server",
]
