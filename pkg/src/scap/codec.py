"""Byte-level formats: netstrings, DNSCurve base-32 and protocol messages.

Everything here is a pure function over ``bytes``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Union

from .errors import (
    DirectionMismatch,
    EmptyExtensionName,
    FrameTooLarge,
    InvalidCharacter,
    InvalidExtensionName,
    InvalidUtf8,
    MalformedMessage,
    MalformedNetstring,
    NameTooLong,
    NonZeroPadding,
    UnknownMessageType,
)

MAX_NETSTRING_LENGTH = 1 << 20
MAX_EXTENSION_NAME = 31

# ---------------------------------------------------------------------------
# netstrings


def netstring_encode(payload: bytes) -> bytes:
    return b"%d:%s," % (len(payload), payload)


def parse_length(digits: bytes, max_length: int = MAX_NETSTRING_LENGTH) -> int:
    """Validate the decimal length field of a netstring (without the colon)."""
    if not digits or not digits.isdigit():
        raise MalformedNetstring("netstring length must be decimal digits, got %r" % digits[:16])
    if len(digits) > 1 and digits[:1] == b"0":
        raise MalformedNetstring("netstring length has a leading zero")
    if len(digits) > len(str(max_length)):
        raise FrameTooLarge("netstring length field too long")
    length = int(digits)
    if length > max_length:
        raise FrameTooLarge("netstring length %d exceeds cap %d" % (length, max_length))
    return length


def netstring_decode(data: bytes, max_length: int = MAX_NETSTRING_LENGTH) -> tuple[bytes, int]:
    """Decode the netstring at the start of *data*.

    Returns ``(payload, consumed)`` so catenated netstrings can be read one
    after another by slicing off ``consumed`` bytes.
    """
    data = bytes(data)
    # never scan further than the widest legal length field
    colon = data.find(b":", 0, len(str(max_length)) + 1)
    if colon < 0:
        head = data[: len(str(max_length)) + 1]
        if head and not head.isdigit():
            raise MalformedNetstring("missing ':' after netstring length")
        if len(head) > len(str(max_length)):
            raise FrameTooLarge("netstring length field too long")
        raise MalformedNetstring("truncated netstring length")
    length = parse_length(data[:colon], max_length)
    start = colon + 1
    end = start + length
    if len(data) < end + 1:
        raise MalformedNetstring(
            "netstring declares %d bytes but only %d available" % (length, max(0, len(data) - start))
        )
    if data[end:end + 1] != b",":
        raise MalformedNetstring("netstring not terminated by ','")
    return data[start:end], end + 1


def split_netstrings(data: bytes, count: int | None = None) -> list[bytes]:
    """Decode catenated netstrings that must exactly fill *data*."""
    out = []
    pos = 0
    while pos < len(data):
        payload, used = netstring_decode(data[pos:])
        out.append(payload)
        pos += used
    if count is not None and len(out) != count:
        raise MalformedNetstring("expected %d netstrings, found %d" % (count, len(out)))
    return out


# ---------------------------------------------------------------------------
# DNSCurve base-32: 5-bit groups taken least significant bit first

BASE32_ALPHABET = "0123456789bcdfghjklmnpqrstuvwxyz"
_BASE32_VALUES = {c: i for i, c in enumerate(BASE32_ALPHABET)}


def base32_encode(data: bytes) -> str:
    out = []
    acc = 0
    bits = 0
    for byte in data:
        acc |= byte << bits
        bits += 8
        while bits >= 5:
            out.append(BASE32_ALPHABET[acc & 31])
            acc >>= 5
            bits -= 5
    if bits:
        out.append(BASE32_ALPHABET[acc])
    return "".join(out)


def base32_decode(text: str) -> bytes:
    """Inverse of :func:`base32_encode`.

    Leftover bits that do not make a whole byte must be zero, otherwise
    :class:`NonZeroPadding` is raised.
    """
    out = bytearray()
    acc = 0
    bits = 0
    for pos, ch in enumerate(text):
        try:
            value = _BASE32_VALUES[ch]
        except KeyError:
            raise InvalidCharacter("invalid base-32 character %r at %d" % (ch, pos)) from None
        acc |= value << bits
        bits += 5
        if bits >= 8:
            out.append(acc & 0xFF)
            acc >>= 8
            bits -= 8
    if acc:
        raise NonZeroPadding("trailing base-32 bits are not zero")
    return bytes(out)


# ---------------------------------------------------------------------------
# protocol messages


class Direction(enum.Enum):
    CLIENT_TO_SERVER = "client_to_server"
    SERVER_TO_CLIENT = "server_to_client"


@dataclass(frozen=True)
class ClientHello:
    type_byte = b"H"


@dataclass(frozen=True)
class Query:
    address: bytes
    service: bytes
    type_byte = b"Q"


@dataclass(frozen=True)
class Reserved:
    body: bytes = b""
    type_byte = b"E"


@dataclass(frozen=True)
class NonStandard:
    """Proprietary extension message.

    ``name`` is the extension name without its leading ``X``; the type byte
    supplies it on the wire.
    """

    name: bytes
    data: bytes = b""
    type_byte = b"X"

    @property
    def extension(self) -> bytes:
        return b"X" + self.name


@dataclass(frozen=True)
class Ok:
    payload: bytes = b""
    type_byte = b"O"


@dataclass(frozen=True)
class TempFail:
    description: str = ""
    type_byte = b"Z"


@dataclass(frozen=True)
class PermFail:
    description: str = ""
    type_byte = b"D"


ProtocolMessage = Union[ClientHello, Query, Reserved, NonStandard, Ok, TempFail, PermFail]

CLIENT_TYPES = {b"H": ClientHello, b"Q": Query, b"E": Reserved, b"X": NonStandard}
SERVER_TYPES = {b"O": Ok, b"Z": TempFail, b"D": PermFail}


def direction_of(msg: ProtocolMessage) -> Direction:
    if msg.type_byte in CLIENT_TYPES:
        return Direction.CLIENT_TO_SERVER
    return Direction.SERVER_TO_CLIENT


def _check_extension_name(name: bytes) -> None:
    if not name:
        raise EmptyExtensionName("extension name is empty")
    if len(name) > MAX_EXTENSION_NAME:
        raise NameTooLong("extension name is %d bytes, limit %d" % (len(name), MAX_EXTENSION_NAME))
    if b" " in name:
        raise InvalidExtensionName("extension name contains a space")
    try:
        name.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InvalidUtf8("extension name is not valid UTF-8") from exc


def message_body(msg: ProtocolMessage) -> bytes:
    """Serialize *msg* without the outer netstring."""
    if isinstance(msg, ClientHello):
        return b"H"
    if isinstance(msg, Query):
        return b"Q" + netstring_encode(msg.address) + netstring_encode(msg.service)
    if isinstance(msg, Reserved):
        return b"E" + msg.body
    if isinstance(msg, NonStandard):
        _check_extension_name(msg.name)
        return b"X" + msg.name + b" " + msg.data
    if isinstance(msg, Ok):
        return b"O" + msg.payload
    if isinstance(msg, (TempFail, PermFail)):
        return msg.type_byte + msg.description.encode("utf-8")
    raise TypeError("not a protocol message: %r" % (msg,))


def message_encode(msg: ProtocolMessage) -> bytes:
    """Serialize *msg*; the result is the plaintext of a cryptographic box."""
    return netstring_encode(message_body(msg))


def _decode_description(raw: bytes) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InvalidUtf8("failure description is not valid UTF-8") from exc


def message_decode(plaintext: bytes, direction: Direction) -> ProtocolMessage:
    body, used = netstring_decode(plaintext)
    if used != len(plaintext):
        raise MalformedMessage("trailing bytes after message netstring")
    if not body:
        raise MalformedMessage("empty message body")
    kind, rest = body[:1], body[1:]
    if kind not in CLIENT_TYPES and kind not in SERVER_TYPES:
        raise UnknownMessageType("unknown message type %r" % kind)
    allowed = CLIENT_TYPES if direction is Direction.CLIENT_TO_SERVER else SERVER_TYPES
    if kind not in allowed:
        raise DirectionMismatch("message type %r not valid %s" % (kind, direction.value))

    if kind == b"H":
        if rest:
            raise MalformedMessage("hello message carries extra bytes")
        return ClientHello()
    if kind == b"Q":
        address, service = split_netstrings(rest, 2)
        return Query(address, service)
    if kind == b"E":
        return Reserved(rest)
    if kind == b"X":
        name, sep, data = rest.partition(b" ")
        if not sep:
            raise MalformedMessage("non-standard message lacks the space after its name")
        _check_extension_name(name)
        return NonStandard(name, data)
    if kind == b"O":
        return Ok(rest)
    if kind == b"Z":
        return TempFail(_decode_description(rest))
    return PermFail(_decode_description(rest))


# ---------------------------------------------------------------------------
# extension list carried by the reply to hello


@dataclass(frozen=True)
class Extension:
    name: str

    @property
    def proprietary(self) -> bool:
        return self.name.startswith("X")


def parse_extension_list(payload: bytes) -> list[Extension]:
    """Split the payload of an Ok reply to hello into extension names.

    Order is preserved. A bare ``X`` counts as an empty name.
    """
    try:
        payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InvalidUtf8("extension list is not valid UTF-8") from exc
    if not payload:
        return []
    names = []
    for raw in payload.split(b" "):
        if not raw or raw == b"X":
            raise EmptyExtensionName("empty extension name in %r" % payload)
        if len(raw) > MAX_EXTENSION_NAME:
            raise NameTooLong("extension name %r longer than %d bytes" % (raw, MAX_EXTENSION_NAME))
        names.append(Extension(raw.decode("utf-8")))
    return names


def format_extension_list(names) -> bytes:
    encoded = [n.encode("utf-8") if isinstance(n, str) else bytes(n) for n in names]
    for raw in encoded:
        if raw == b"X":
            raise EmptyExtensionName("extension name 'X' is treated as empty")
        _check_extension_name(raw)
    return b" ".join(encoded)
