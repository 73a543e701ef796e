"""Exception hierarchy.

Every error carries a ``stage`` naming the layer that raised it, so the
resolver and CLI can report where a lookup went wrong.
"""


class ScapError(Exception):
    stage = "scap"


# codec

class CodecError(ScapError, ValueError):
    stage = "codec"


class MalformedNetstring(CodecError):
    pass


class InvalidCharacter(CodecError):
    pass


class NonZeroPadding(CodecError):
    pass


class MalformedMessage(CodecError):
    pass


class UnknownMessageType(CodecError):
    pass


class DirectionMismatch(CodecError):
    pass


class InvalidExtensionName(CodecError):
    pass


class EmptyExtensionName(InvalidExtensionName):
    pass


class NameTooLong(InvalidExtensionName):
    pass


class InvalidUtf8(CodecError):
    pass


# identity

class IdentityError(ScapError, ValueError):
    stage = "identity"


class NoAtSymbol(IdentityError):
    pass


class LocalTooLong(IdentityError):
    pass


class InvalidDomain(IdentityError):
    pass


class UnknownAlias(IdentityError):
    pass


class InvalidServiceId(IdentityError):
    pass


# session

class SessionError(ScapError):
    stage = "session"


class EntropyUnavailable(SessionError):
    pass


class WeakPublicKey(SessionError):
    pass


class HandshakeIncomplete(SessionError):
    pass


class OutOfTurn(SessionError):
    """Message sent or received out of strict request/reply alternation."""


class CounterExhausted(SessionError):
    pass


class AuthenticationFailure(SessionError):
    """Box failed to open. The connection must be closed."""


class StaleServerHalf(SessionError):
    pass


class ReplayedClientHalf(SessionError):
    pass


class MismatchedClientHalf(SessionError):
    pass


class FirstMessageNotHello(SessionError):
    pass


class NoClientMessageYet(SessionError):
    pass


class TruncatedFrame(SessionError):
    pass


class FrameTooLarge(MalformedNetstring):
    """Declared netstring length exceeds the configured cap."""


# discovery

class DiscoveryError(ScapError):
    stage = "discovery"


class LabelTooShort(DiscoveryError, ValueError):
    pass


class UnsupportedVersion(DiscoveryError, ValueError):
    pass


class BadKeyLength(DiscoveryError, ValueError):
    pass


class KeyTopBitSet(DiscoveryError, ValueError):
    pass


class DnsFailure(DiscoveryError):
    pass


class NoSrvRecords(DiscoveryError):
    pass


class SecurityPolicyViolation(DiscoveryError):
    pass


class AliasChainTooLong(DiscoveryError):
    pass


class NoServersAvailable(DiscoveryError):
    pass


# server store / config

class StoreError(ScapError):
    stage = "store"


class MalformedStoreFile(StoreError, ValueError):
    pass


class DuplicateKey(StoreError, KeyError):
    pass


class ConfigError(ScapError, ValueError):
    stage = "config"


# client resolution outcomes

class ResolveError(ScapError):
    stage = "resolve"


class Refused(ResolveError):
    """A server answered with a permanent failure."""

    def __init__(self, description, server=None):
        super().__init__(description)
        self.description = description
        self.server = server


class RetryLater(ResolveError):
    """Every reached server answered with a temporary failure."""

    def __init__(self, description, failures=()):
        super().__init__(description)
        self.description = description
        self.failures = list(failures)


class AllServersUnreachable(ResolveError):
    def __init__(self, message, failures=()):
        super().__init__(message)
        self.failures = list(failures)
