import json
import os
import random
import subprocess
import sys

import pytest

from scap import cli
from scap.harness import (
    EXAMPLE_ADDRESS,
    EXAMPLE_SRV,
    EXAMPLE_TARGET,
    InMemoryDialer,
    MockDnsClient,
    MockDnsServer,
    MockZone,
    ServerEndpoint,
    deterministic_keypair,
    label_for,
    example_store,
)
from scap.server import keygen_to_file, load_secret_key, store_save


def _deployment(store=None, validated=True):
    pair = deterministic_keypair(random.Random(4), label_safe=True)
    zone = MockZone(default_validated=validated)
    fqdn = label_for(pair, "example.com")
    zone.add_server("example.com", fqdn, 4332, address="10.0.0.1")
    dialer = InMemoryDialer({("10.0.0.1", 4332): ServerEndpoint(pair, store or example_store())})
    return MockDnsClient(zone), dialer, fqdn


def test_resolve_plain(capfdbinary):
    dns, dialer, _ = _deployment()
    assert cli.main(["resolve", "johndoe@example.com", "--service", "bitcoin"], dns, dialer) == cli.EXIT_OK
    assert capfdbinary.readouterr().out == EXAMPLE_TARGET + b"\n"


def test_resolve_json(capsys):
    dns, dialer, fqdn = _deployment()
    assert cli.main(["resolve", "johndoe@example.com", "--json"], dns, dialer) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc == {
        "address": "johndoe@example.com",
        "service": "000000000019d6689c085ae165831e934ff763ae46a2a6c172b3f1b60a8ce26f",
        "data_base16": EXAMPLE_TARGET.hex(),
        "server": fqdn + ":4332",
        "warnings": [],
        "dnssec": True,
    }


def test_exit_codes(capsys):
    dns, dialer, _ = _deployment()
    assert cli.main(["resolve", "nobody@example.com"], dns, dialer) == cli.EXIT_REFUSED
    assert cli.main(["resolve", "johndoe@example.com", "--service", "bitcoins"], dns, dialer) == cli.EXIT_USAGE
    assert cli.main(["resolve", "no-at-sign"], dns, dialer) == cli.EXIT_USAGE
    assert cli.main(["resolve"], dns, dialer) == cli.EXIT_USAGE
    empty = MockDnsClient(MockZone())
    assert cli.main(["resolve", "user@nodomain", "--insecure-dns"], empty, dialer) == cli.EXIT_TEMPORARY
    assert "NoSrvRecords" in capsys.readouterr().err
    dns, dialer, _ = _deployment(validated=False)
    assert cli.main(["resolve", "johndoe@example.com"], dns, dialer) == cli.EXIT_POLICY
    assert dialer.log == []
    assert cli.main(["resolve", "johndoe@example.com", "--insecure-dns"], dns, dialer) == cli.EXIT_OK
    assert "not DNSSEC-validated" in capsys.readouterr().err


def test_unreachable_is_temporary(capsys):
    dns, _, _ = _deployment()
    assert cli.main(["resolve", "johndoe@example.com"], dns, InMemoryDialer()) == cli.EXIT_TEMPORARY
    assert "AllServersUnreachable" in capsys.readouterr().err


def test_control_characters_are_escaped(capsys):
    dns, dialer, _ = _deployment()
    code = cli.main(["resolve", "jo\x1bhn\u202e@example.com"], dns, dialer)
    assert code == cli.EXIT_REFUSED
    err = capsys.readouterr().err
    assert "\x1b" not in err and "\u202e" not in err
    assert "ControlChar at byte 2" in err and "BidiOverride at byte 5" in err


def test_error_text_is_escaped(capsys):
    # failure descriptions come from the server and may carry anything
    cli._err("refused: evil\x1b[2J\u202etext")
    err = capsys.readouterr().err
    assert err == "scap: refused: evil\\u{001B}[2J\\u{202E}text\n"


def test_label_and_unlabel(capsys):
    fqdn = EXAMPLE_SRV[0][3]
    assert cli.main(["unlabel", fqdn.split(".")[0]]) == 0
    out = capsys.readouterr().out.split()
    assert out[:2] == ["version", "1"] and out[2] == "key" and len(out[3]) == 64
    assert out[3].startswith("1b0bfa92")
    assert cli.main(["label", out[3]]) == 0
    assert capsys.readouterr().out.strip() == fqdn.split(".")[0]
    assert cli.main(["unlabel", "bogus"]) == cli.EXIT_USAGE
    assert cli.main(["label", "zz"]) == cli.EXIT_USAGE


def test_keygen(tmp_path, capsys):
    assert cli.main(["keygen", "--out", str(tmp_path / "k")]) == 0
    out = capsys.readouterr().out
    pair = load_secret_key(tmp_path / "k")
    assert pair.public.hex() in out


def test_server_override(capfdbinary, server_keys, store):
    dialer = InMemoryDialer({("127.0.0.9", 4332): ServerEndpoint(server_keys, store)})
    argv = ["resolve", "johndoe@example.com", "--server", "127.0.0.9:4332:" + server_keys.public.hex()]
    assert cli.main(argv, None, dialer) == 0
    assert capfdbinary.readouterr().out == EXAMPLE_TARGET + b"\n"


# -- separate processes ------------------------------------------------------

@pytest.fixture
def scapd(tmp_path):
    """A real scapd process on loopback serving the example store."""
    key = tmp_path / "server.key"
    pair, label = keygen_to_file(key)
    store_save(example_store(), tmp_path / "store")
    proc = subprocess.Popen(
        [sys.executable, "-m", "scap.server", "--listen", "127.0.0.1", "--port", "0",
         "--key-file", str(key), "--store-file", str(tmp_path / "store")],
        stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True,
    )
    try:
        line = proc.stdout.readline()
        assert line.startswith("scapd listening on"), line
        port = int(line.rsplit(":", 1)[1])
        yield label, port
    finally:
        proc.terminate()
        assert proc.wait(10) == 0


def _run_scap(args, env_resolver):
    env = dict(os.environ, SCAP_RESOLVER=env_resolver)
    return subprocess.run([sys.executable, "-m", "scap.cli", *args], capture_output=True, env=env, timeout=30)


def test_end_to_end_processes(scapd):
    label, port = scapd
    zone = MockZone()
    zone.add_server("example.com", label + ".example.com", port, address="127.0.0.1")
    with MockDnsServer(zone) as dns:
        done = _run_scap(["resolve", "johndoe@example.com", "--service", "bitcoin"], dns.address)
        assert done.returncode == 0, done.stderr
        assert done.stdout == EXAMPLE_TARGET + b"\n"
        miss = _run_scap(["resolve", "nobody@example.com"], dns.address)
        assert miss.returncode == cli.EXIT_REFUSED
        assert b"no data" in miss.stderr


def test_resolve_uses_resolver_flag(scapd):
    label, port = scapd
    zone = MockZone()
    zone.add_server("example.com", label + ".example.com", port, address="127.0.0.1")
    with MockDnsServer(zone) as dns:
        done = _run_scap(["resolve", EXAMPLE_ADDRESS.decode(), "--resolver", dns.address, "--json"], "127.0.0.1:9")
    assert done.returncode == 0, done.stderr
    assert json.loads(done.stdout)["data_base16"] == EXAMPLE_TARGET.hex()
