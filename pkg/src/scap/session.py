"""Session cryptography: X25519 key agreement, split nonces, ChaCha20-Poly1305 boxes.

The 96-bit box nonce is ``client_half || server_half``, each half a 48-bit
little-endian counter. The very first client box uses an all-zero server
half; afterwards each side echoes the other side's latest half.
"""

from __future__ import annotations

import os
import secrets
import struct
from dataclasses import dataclass
from typing import Callable, Optional, Union

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from . import codec
from .codec import ClientHello, Direction, ProtocolMessage
from .errors import (
    AuthenticationFailure,
    CounterExhausted,
    EntropyUnavailable,
    FirstMessageNotHello,
    HandshakeIncomplete,
    MismatchedClientHalf,
    NoClientMessageYet,
    OutOfTurn,
    ReplayedClientHalf,
    StaleServerHalf,
    TruncatedFrame,
    WeakPublicKey,
)

KEY_SIZE = 32
HALF_SIZE = 6
TAG_SIZE = 16
MAX_FRAME = 1 << 20
COUNTER_LIMIT = 1 << 48
ZERO_HALF = bytes(HALF_SIZE)

# ---------------------------------------------------------------------------
# keys


def clamp(secret: bytes) -> bytes:
    k = bytearray(secret)
    k[0] &= 248
    k[31] &= 127
    k[31] |= 64
    return bytes(k)


@dataclass(frozen=True)
class KeyPair:
    secret: bytes
    public: bytes

    @classmethod
    def from_secret(cls, secret: bytes) -> "KeyPair":
        if len(secret) != KEY_SIZE:
            raise ValueError("secret key must be 32 bytes")
        secret = clamp(secret)
        public = X25519PrivateKey.from_private_bytes(secret).public_key().public_bytes_raw()
        return cls(secret, public)


def generate_keypair(entropy: Callable[[int], bytes] = os.urandom) -> KeyPair:
    try:
        raw = entropy(KEY_SIZE)
    except Exception as exc:  # noqa: BLE001 - any entropy failure is fatal here
        raise EntropyUnavailable("entropy source failed: %s" % exc) from exc
    if not isinstance(raw, (bytes, bytearray)) or len(raw) != KEY_SIZE:
        raise EntropyUnavailable("entropy source returned %r bytes" % (len(raw) if raw else raw))
    return KeyPair.from_secret(bytes(raw))


def x25519(scalar: bytes, u: bytes) -> bytes:
    """Raw X25519 scalar multiplication; rejects all-zero results."""
    if len(scalar) != KEY_SIZE or len(u) != KEY_SIZE:
        raise WeakPublicKey("X25519 inputs must be 32 bytes")
    try:
        return X25519PrivateKey.from_private_bytes(scalar).exchange(X25519PublicKey.from_public_bytes(u))
    except ValueError as exc:
        raise WeakPublicKey("peer public key has small order") from exc


def _rotl(v, c):
    return ((v << c) & 0xFFFFFFFF) | (v >> (32 - c))


def _quarter(s, a, b, c, d):
    s[a] = (s[a] + s[b]) & 0xFFFFFFFF
    s[d] = _rotl(s[d] ^ s[a], 16)
    s[c] = (s[c] + s[d]) & 0xFFFFFFFF
    s[b] = _rotl(s[b] ^ s[c], 12)
    s[a] = (s[a] + s[b]) & 0xFFFFFFFF
    s[d] = _rotl(s[d] ^ s[a], 8)
    s[c] = (s[c] + s[d]) & 0xFFFFFFFF
    s[b] = _rotl(s[b] ^ s[c], 7)


def hchacha20(key: bytes, nonce: bytes) -> bytes:
    """HChaCha20: 20 ChaCha rounds, output words 0-3 and 12-15 without the feed-forward."""
    if len(key) != 32 or len(nonce) != 16:
        raise ValueError("hchacha20 takes a 32-byte key and 16-byte input")
    s = [0x61707865, 0x3320646E, 0x79622D32, 0x6B206574]
    s += list(struct.unpack("<8L", key))
    s += list(struct.unpack("<4L", nonce))
    for _ in range(10):
        _quarter(s, 0, 4, 8, 12)
        _quarter(s, 1, 5, 9, 13)
        _quarter(s, 2, 6, 10, 14)
        _quarter(s, 3, 7, 11, 15)
        _quarter(s, 0, 5, 10, 15)
        _quarter(s, 1, 6, 11, 12)
        _quarter(s, 2, 7, 8, 13)
        _quarter(s, 3, 4, 9, 14)
    return struct.pack("<8L", *s[0:4], *s[12:16])


def derive_shared(my_secret: bytes, peer_public: bytes) -> bytes:
    """Session key: HChaCha20 over the X25519 output with a zero input block."""
    if peer_public == bytes(KEY_SIZE):
        raise WeakPublicKey("peer public key is all zero")
    return hchacha20(x25519(my_secret, peer_public), bytes(16))


# ---------------------------------------------------------------------------
# wire messages


@dataclass(frozen=True)
class FirstClientFrame:
    client_public: bytes
    client_half: bytes
    box: bytes

    def to_bytes(self) -> bytes:
        return self.client_public + self.client_half + self.box

    @classmethod
    def from_bytes(cls, raw: bytes) -> "FirstClientFrame":
        if len(raw) < KEY_SIZE + HALF_SIZE + TAG_SIZE:
            raise TruncatedFrame("first client frame is %d bytes" % len(raw))
        return cls(raw[:KEY_SIZE], raw[KEY_SIZE:KEY_SIZE + HALF_SIZE], raw[KEY_SIZE + HALF_SIZE:])


@dataclass(frozen=True)
class _HalvesFrame:
    client_half: bytes
    server_half: bytes
    box: bytes

    def to_bytes(self) -> bytes:
        return self.client_half + self.server_half + self.box

    @classmethod
    def from_bytes(cls, raw: bytes):
        if len(raw) < 2 * HALF_SIZE + TAG_SIZE:
            raise TruncatedFrame("%s is %d bytes" % (cls.__name__, len(raw)))
        return cls(raw[:HALF_SIZE], raw[HALF_SIZE:2 * HALF_SIZE], raw[2 * HALF_SIZE:])


class FollowupClientFrame(_HalvesFrame):
    pass


class ServerFrame(_HalvesFrame):
    pass


WireMessage = Union[FirstClientFrame, FollowupClientFrame, ServerFrame]

_EXPECTING = {"first": FirstClientFrame, "followup": FollowupClientFrame, "server": ServerFrame}


def frame_encode(wire: WireMessage) -> bytes:
    payload = wire.to_bytes()
    if len(payload) > MAX_FRAME:
        raise codec.FrameTooLarge("frame of %d bytes exceeds %d" % (len(payload), MAX_FRAME))
    return codec.netstring_encode(payload)


def frame_decode(data: bytes, expecting: str) -> tuple[WireMessage, int]:
    """Read one netstring-framed wire message; returns it and bytes consumed."""
    try:
        payload, used = codec.netstring_decode(data, MAX_FRAME)
    except codec.FrameTooLarge:
        raise
    except codec.MalformedNetstring as exc:
        # a prefix of a valid frame is a truncation, not garbage
        if _is_netstring_prefix(data):
            raise TruncatedFrame(str(exc)) from exc
        raise
    return _EXPECTING[expecting].from_bytes(payload), used


def _is_netstring_prefix(data: bytes) -> bool:
    colon = data.find(b":")
    if colon < 0:
        return data.isdigit() or not data
    try:
        length = codec.parse_length(data[:colon], MAX_FRAME)
    except codec.MalformedNetstring:
        return False
    return len(data) < colon + 1 + length + 1


# ---------------------------------------------------------------------------
# session state


def _half(value: int) -> bytes:
    return value.to_bytes(HALF_SIZE, "little")


def _half_value(half: bytes) -> int:
    return int.from_bytes(half, "little")


class _Session:
    role = ""

    def __init__(self, counter_start: Optional[int], nonce_log: Optional[list]):
        if counter_start is None:
            counter_start = 1 + secrets.randbelow(1 << 47)
        if not 0 <= counter_start < COUNTER_LIMIT:
            raise ValueError("counter start out of range")
        self._next = counter_start
        self.shared_key: Optional[bytes] = None
        self.last_peer_half: Optional[bytes] = None
        self.last_own_half: Optional[bytes] = None
        self.nonce_log = nonce_log

    def _take_half(self) -> bytes:
        if self._next >= COUNTER_LIMIT:
            raise CounterExhausted("48-bit nonce counter exhausted; open a new session")
        half = _half(self._next)
        self._next += 1
        return half

    def _seal(self, nonce: bytes, msg: ProtocolMessage) -> bytes:
        if self.nonce_log is not None:
            self.nonce_log.append(nonce)
        return ChaCha20Poly1305(self.shared_key).encrypt(nonce, codec.message_encode(msg), None)

    def _open(self, nonce: bytes, box: bytes, direction: Direction) -> ProtocolMessage:
        try:
            plaintext = ChaCha20Poly1305(self.shared_key).decrypt(nonce, box, None)
        except InvalidTag:
            raise AuthenticationFailure("box failed authentication; closing connection") from None
        return codec.message_decode(plaintext, direction)


class ClientSession(_Session):
    """Client half of a connection. Strictly alternates seal() and open()."""

    role = "client"

    def __init__(self, server_public: bytes, keypair: Optional[KeyPair] = None,
                 counter_start: Optional[int] = None, nonce_log: Optional[list] = None):
        super().__init__(counter_start, nonce_log)
        self.keypair = keypair or generate_keypair()
        self.server_public = server_public
        self.shared_key = derive_shared(self.keypair.secret, server_public)
        self.handshake_done = False
        self._awaiting: Optional[bytes] = None

    def seal(self, msg: ProtocolMessage) -> WireMessage:
        if self._awaiting is not None:
            raise OutOfTurn("previous request has not been answered")
        first = self.last_own_half is None
        if not self.handshake_done and not (first and isinstance(msg, ClientHello)):
            raise HandshakeIncomplete("the first client message must be a hello")
        half = self._take_half()
        if first:
            box = self._seal(half + ZERO_HALF, msg)
            wire = FirstClientFrame(self.keypair.public, half, box)
        else:
            box = self._seal(half + self.last_peer_half, msg)
            wire = FollowupClientFrame(half, self.last_peer_half, box)
        self.last_own_half = half
        self._awaiting = half
        return wire

    def open(self, wire: Union[bytes, ServerFrame]) -> ProtocolMessage:
        if isinstance(wire, (bytes, bytearray)):
            wire = ServerFrame.from_bytes(bytes(wire))
        if self._awaiting is None or wire.client_half != self._awaiting:
            raise MismatchedClientHalf("server frame does not echo the outstanding client nonce")
        msg = self._open(wire.client_half + wire.server_half, wire.box, Direction.SERVER_TO_CLIENT)
        self.last_peer_half = wire.server_half
        self._awaiting = None
        self.handshake_done = True
        return msg


class ServerSession(_Session):
    """Server half of a connection; learns the client key from the first frame."""

    role = "server"

    def __init__(self, keypair: KeyPair, counter_start: Optional[int] = None,
                 nonce_log: Optional[list] = None):
        if counter_start == 0:
            raise ValueError("server nonce counter must not start at zero")
        super().__init__(counter_start, nonce_log)
        self.keypair = keypair
        self.remote_public: Optional[bytes] = None
        self._max_client = -1
        self._pending = False

    @property
    def handshake_done(self) -> bool:
        return self.remote_public is not None

    def open(self, wire: Union[bytes, FirstClientFrame, FollowupClientFrame]) -> ProtocolMessage:
        if self._pending:
            raise OutOfTurn("client sent a request before receiving the previous reply")
        if self.remote_public is None:
            if isinstance(wire, (bytes, bytearray)):
                wire = FirstClientFrame.from_bytes(bytes(wire))
            if not isinstance(wire, FirstClientFrame):
                raise FirstMessageNotHello("session must start with the client's first frame")
            shared = derive_shared(self.keypair.secret, wire.client_public)
            self.shared_key = shared
            try:
                msg = self._open(wire.client_half + ZERO_HALF, wire.box, Direction.CLIENT_TO_SERVER)
            except Exception:
                self.shared_key = None
                raise
            if not isinstance(msg, ClientHello):
                self.shared_key = None
                raise FirstMessageNotHello("first message was %r, not hello" % msg.type_byte)
            self.remote_public = wire.client_public
        else:
            if isinstance(wire, (bytes, bytearray)):
                wire = FollowupClientFrame.from_bytes(bytes(wire))
            if wire.server_half != self.last_own_half:
                raise StaleServerHalf("client frame carries a server nonce we did not send last")
            if _half_value(wire.client_half) <= self._max_client:
                raise ReplayedClientHalf("client nonce did not increase")
            msg = self._open(wire.client_half + wire.server_half, wire.box, Direction.CLIENT_TO_SERVER)
        self._max_client = _half_value(wire.client_half)
        self.last_peer_half = wire.client_half
        self._pending = True
        return msg

    def seal(self, msg: ProtocolMessage) -> ServerFrame:
        if not self._pending:
            raise NoClientMessageYet("server speaks only in reply to a client message")
        half = self._take_half()
        box = self._seal(self.last_peer_half + half, msg)
        self.last_own_half = half
        self._pending = False
        return ServerFrame(self.last_peer_half, half, box)
