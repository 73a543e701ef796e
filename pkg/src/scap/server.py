"""The ``scapd`` daemon: mapping store, request handling and the TCP loop."""

from __future__ import annotations

import argparse
import asyncio
import logging
import os
import signal
import stat
import sys
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional

from . import codec
from .codec import ClientHello, NonStandard, Ok, PermFail, ProtocolMessage, Query, Reserved, TempFail
from .discovery import DEFAULT_PORT, fqdn_label_for_key
from .errors import (
    CodecError,
    ConfigError,
    DuplicateKey,
    IdentityError,
    MalformedStoreFile,
    ScapError,
)
from .identity import CryptoAddress, ServiceId, parse_address, service_id_from_wire
from .session import KEY_SIZE, MAX_FRAME, KeyPair, ServerSession, frame_encode, generate_keypair

log = logging.getLogger(__name__)

MAX_TARGET_DATA = 65536
MISS_DESCRIPTION = "no data for this cryptoaddress and service"

# ---------------------------------------------------------------------------
# mapping store


@dataclass(frozen=True)
class MappingRecord:
    address_text: bytes
    service_id: ServiceId
    target_data: bytes

    def __post_init__(self):
        if len(self.target_data) > MAX_TARGET_DATA:
            raise ValueError("target data longer than %d bytes" % MAX_TARGET_DATA)

    @property
    def address(self) -> CryptoAddress:
        return parse_address(self.address_text)

    def key(self) -> tuple[bytes, str, str]:
        addr = self.address
        return addr.local, addr.domain_ascii, self.service_id.token


class MappingStore:
    """In-memory map of (cryptoaddress, service) to target data.

    Keys are normalized: the domain goes to lowercase IDNA ASCII, the local
    part stays byte-exact.
    """

    def __init__(self, records: Iterable[MappingRecord] = (), source_path: Optional[Path] = None):
        self.source_path = source_path
        self._records: dict[tuple[bytes, str, str], MappingRecord] = {}
        for record in records:
            self.add(record)

    def add(self, record: MappingRecord) -> None:
        key = record.key()
        if key in self._records:
            raise DuplicateKey("duplicate mapping for %r / %s" % (record.address_text, record.service_id))
        self._records[key] = record

    def lookup(self, address: CryptoAddress, service: ServiceId) -> Optional[bytes]:
        record = self._records.get((address.local, address.domain_ascii, service.token))
        return None if record is None else record.target_data

    def records(self) -> list[MappingRecord]:
        return list(self._records.values())

    def __len__(self) -> int:
        return len(self._records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MappingStore):
            return NotImplemented
        return self._records == other._records


def store_dumps(store: MappingStore) -> bytes:
    out = []
    for record in store.records():
        inner = (codec.netstring_encode(record.address_text)
                 + codec.netstring_encode(record.service_id.encode())
                 + codec.netstring_encode(record.target_data))
        out.append(codec.netstring_encode(inner))
    return b"".join(out)


def store_loads(data: bytes, source_path: Optional[Path] = None) -> MappingStore:
    store = MappingStore(source_path=source_path)
    pos = 0
    index = 0
    while pos < len(data):
        try:
            payload, used = codec.netstring_decode(data[pos:])
            address, service, target = codec.split_netstrings(payload, 3)
            record = MappingRecord(address, service_id_from_wire(service), target)
            record.key()
        except (CodecError, IdentityError, ValueError) as exc:
            raise MalformedStoreFile("record %d at byte %d: %s" % (index, pos, exc)) from exc
        store.add(record)
        pos += used
        index += 1
    return store


def store_load(path) -> MappingStore:
    path = Path(path)
    return store_loads(path.read_bytes(), source_path=path)


def store_save(store: MappingStore, path) -> None:
    """Write atomically: temp file in the same directory, fsync, rename."""
    path = Path(path)
    data = store_dumps(store)
    fd, tmp = tempfile.mkstemp(prefix=".%s." % path.name, dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


# ---------------------------------------------------------------------------
# request handling

ExtensionHandler = Callable[[bytes], ProtocolMessage]


def handle_message(store, extensions: Iterable[str], msg: ProtocolMessage,
                   handlers: Optional[Mapping[bytes, ExtensionHandler]] = None) -> ProtocolMessage:
    """Answer one client message. Always returns Ok, TempFail or PermFail."""
    if isinstance(msg, ClientHello):
        return Ok(codec.format_extension_list(extensions))
    if isinstance(msg, Query):
        try:
            address = parse_address(msg.address)
            service = service_id_from_wire(msg.service)
        except IdentityError as exc:
            return PermFail("invalid query: %s" % exc)
        try:
            data = store.lookup(address, service)
        except OSError as exc:
            log.warning("store lookup failed: %s", exc)
            return TempFail("mapping store temporarily unavailable")
        if data is None:
            return PermFail(MISS_DESCRIPTION)
        return Ok(data)
    if isinstance(msg, Reserved):
        return PermFail("extension message not supported")
    if isinstance(msg, NonStandard):
        handler = (handlers or {}).get(msg.extension)
        if handler is None:
            return PermFail("extension %s not supported" % msg.extension.decode("utf-8", "replace"))
        try:
            return handler(msg.data)
        except Exception:  # noqa: BLE001 - an extension bug must not kill the session
            log.exception("extension %r failed", msg.extension)
            return TempFail("extension failed")
    return PermFail("unexpected message type")


# ---------------------------------------------------------------------------
# configuration and keys


@dataclass
class ServerConfig:
    listen_address: str = "0.0.0.0"
    port: int = DEFAULT_PORT
    key_file: Optional[str] = None
    store_file: Optional[str] = None
    extensions: list = field(default_factory=list)
    max_sessions: int = 1024
    io_timeout: float = 30.0

    def validate(self) -> None:
        if not 0 <= self.port <= 0xFFFF:
            raise ConfigError("port %d out of range" % self.port)
        if not self.key_file:
            raise ConfigError("key_file is required")
        if not self.store_file:
            raise ConfigError("store_file is required")
        if self.max_sessions < 1 or self.io_timeout <= 0:
            raise ConfigError("max_sessions and io_timeout must be positive")
        codec.format_extension_list(self.extensions)


_INT_FIELDS = {"port", "max_sessions"}


def load_config(path) -> ServerConfig:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    config = ServerConfig()
    known = set(ServerConfig.__dataclass_fields__)
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or key not in known:
            raise ConfigError("%s:%d: unknown or malformed setting %r" % (path, lineno, line))
        try:
            if key in _INT_FIELDS:
                setattr(config, key, int(value))
            elif key == "io_timeout":
                config.io_timeout = float(value)
            elif key == "extensions":
                config.extensions = value.replace(",", " ").split()
            else:
                setattr(config, key, value)
        except ValueError as exc:
            raise ConfigError("%s:%d: bad value for %s: %s" % (path, lineno, key, exc)) from exc
    return config


def load_secret_key(path) -> KeyPair:
    text = Path(path).read_text().strip()
    try:
        secret = bytes.fromhex(text)
    except ValueError as exc:
        raise ConfigError("key file %s is not hex" % path) from exc
    if len(secret) != KEY_SIZE:
        raise ConfigError("key file %s must hold 64 hex characters" % path)
    return KeyPair.from_secret(secret)


def generate_server_keypair() -> KeyPair:
    """A keypair whose public key fits the 51-character label."""
    while True:
        pair = generate_keypair()
        if not pair.public[31] & 0x80:
            return pair


def keygen_to_file(path) -> tuple[KeyPair, str]:
    """Write a fresh secret key as hex; return the pair and its FQDN label."""
    pair = generate_server_keypair()
    path = Path(path)
    fd = os.open(str(path), os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        fh.write(pair.secret.hex() + "\n")
    mode = stat.S_IMODE(path.stat().st_mode)
    if mode & 0o077:
        warnings.warn("key file %s is accessible to others (mode %o)" % (path, mode))
    return pair, fqdn_label_for_key(pair.public)


# ---------------------------------------------------------------------------
# network service


async def read_netstring(reader: asyncio.StreamReader, max_length: int = MAX_FRAME) -> bytes:
    """Read one netstring from *reader*, returning the full serialized bytes."""
    head = bytearray()
    while True:
        ch = await reader.readexactly(1)
        if ch == b":":
            break
        head += ch
        if len(head) > len(str(max_length)) or not ch.isdigit():
            raise codec.MalformedNetstring("bad netstring length prefix %r" % bytes(head))
    length = codec.parse_length(bytes(head), max_length)
    rest = await reader.readexactly(length + 1)
    return bytes(head) + b":" + rest


class ScapServer:
    """Asyncio TCP server running one ServerSession per connection."""

    def __init__(self, keypair: KeyPair, store: MappingStore, extensions: Iterable[str] = (),
                 handlers: Optional[Mapping[bytes, ExtensionHandler]] = None,
                 io_timeout: float = 30.0, max_sessions: int = 1024):
        self.keypair = keypair
        self.store = store
        self.extensions = list(extensions)
        self.handlers = dict(handlers or {})
        self.io_timeout = io_timeout
        self.max_sessions = max_sessions
        self.connections = 0
        self.active = 0
        self._server: Optional[asyncio.base_events.Server] = None

    @property
    def label(self) -> str:
        return fqdn_label_for_key(self.keypair.public)

    def reload_store(self) -> None:
        if self.store.source_path is None:
            return
        try:
            self.store = store_load(self.store.source_path)
        except (OSError, ScapError) as exc:
            log.error("store reload failed, keeping previous store: %s", exc)
            return
        log.info("reloaded %d mappings from %s", len(self.store), self.store.source_path)

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._handle, host, port)
        sockname = self._server.sockets[0].getsockname()
        return sockname[0], sockname[1]

    async def serve_forever(self) -> None:
        assert self._server is not None
        async with self._server:
            await self._server.serve_forever()

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self.connections += 1
        peer = writer.get_extra_info("peername")
        if self.active >= self.max_sessions:
            log.warning("session limit reached, dropping %s", peer)
            writer.close()
            return
        self.active += 1
        session = ServerSession(self.keypair)
        try:
            while True:
                try:
                    raw = await asyncio.wait_for(read_netstring(reader), self.io_timeout)
                except asyncio.IncompleteReadError:
                    break
                payload, _ = codec.netstring_decode(raw, MAX_FRAME)
                request = session.open(payload)
                reply = handle_message(self.store, self.extensions, request, self.handlers)
                writer.write(frame_encode(session.seal(reply)))
                await writer.drain()
        except asyncio.TimeoutError:
            log.info("idle timeout for %s", peer)
        except (ScapError, ValueError) as exc:
            log.info("closing %s: %s: %s", peer, type(exc).__name__, exc)
        except (ConnectionError, OSError) as exc:
            log.info("connection error from %s: %s", peer, exc)
        finally:
            self.active -= 1
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass


def build_server(config: ServerConfig) -> ScapServer:
    config.validate()
    keypair = load_secret_key(config.key_file)
    try:
        store = store_load(config.store_file)
    except FileNotFoundError:
        raise ConfigError("store file %s does not exist" % config.store_file) from None
    return ScapServer(keypair, store, config.extensions, io_timeout=config.io_timeout,
                      max_sessions=config.max_sessions)


async def serve(config: ServerConfig, ready: Optional[Callable[[tuple[str, int]], None]] = None) -> None:
    """Run until SIGINT/SIGTERM. SIGHUP reloads the store."""
    server = build_server(config)
    address = await server.start(config.listen_address, config.port)
    log.info("scapd listening on %s:%d as %s", address[0], address[1], server.label)
    loop = asyncio.get_running_loop()
    stop = asyncio.Event()
    for signame in ("SIGINT", "SIGTERM"):
        if hasattr(signal, signame):
            loop.add_signal_handler(getattr(signal, signame), stop.set)
    if hasattr(signal, "SIGHUP"):
        loop.add_signal_handler(signal.SIGHUP, server.reload_store)
    if ready is not None:
        ready(address)
    runner = asyncio.ensure_future(server.serve_forever())
    await stop.wait()
    runner.cancel()
    await server.close()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="scapd", description="Simple Cryptoaddress Protocol server")
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument("--listen", help="address to bind")
    parser.add_argument("--port", type=int)
    parser.add_argument("--key-file")
    parser.add_argument("--store-file")
    parser.add_argument("--keygen", metavar="PATH", help="write a new secret key to PATH and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s scapd %(levelname)s %(message)s")

    if args.keygen:
        pair, label = keygen_to_file(args.keygen)
        print("public key: %s" % pair.public.hex())
        print("label:      %s" % label)
        return 0

    try:
        config = load_config(args.config) if args.config else ServerConfig()
        if args.listen:
            config.listen_address = args.listen
        if args.port is not None:
            config.port = args.port
        if args.key_file:
            config.key_file = args.key_file
        if args.store_file:
            config.store_file = args.store_file
        config.validate()
        build_server(config)
    except (ConfigError, ScapError, OSError) as exc:
        print("scapd: configuration error: %s" % exc, file=sys.stderr)
        return 1

    def ready(address):
        print("scapd listening on %s:%d" % address, flush=True)

    try:
        asyncio.run(serve(config, ready))
    except OSError as exc:
        print("scapd: cannot bind %s:%s: %s" % (config.listen_address, config.port, exc), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
