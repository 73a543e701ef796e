"""``scap`` command line client.

Exit codes: 0 success, 1 usage or input error, 2 refused (permanent
failure), 3 temporary failure or nothing reachable, 4 security policy.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .client import DEFAULT_TIMEOUT, ResolveRequest, ServerOverride, resolve
from .discovery import (
    ResolverDnsClient,
    SecurityPolicy,
    extract_key_from_fqdn,
    fqdn_label_for_key,
)
from .errors import (
    AllServersUnreachable,
    DiscoveryError,
    IdentityError,
    Refused,
    RetryLater,
    ScapError,
    SecurityPolicyViolation,
)
from .identity import builtin_service_id, escape_for_display, format_address, inspect_spoofing, parse_address

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_REFUSED = 2
EXIT_TEMPORARY = 3
EXIT_POLICY = 4


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scap", description="Resolve cryptoaddresses")
    sub = parser.add_subparsers(dest="command", required=True)

    res = sub.add_parser("resolve", help="resolve a cryptoaddress")
    res.add_argument("address")
    res.add_argument("--service", default="bitcoin", help="bitcoin, litecoin, dogecoin or a 64-hex id")
    res.add_argument("--json", action="store_true", help="print a JSON document")
    res.add_argument("--server", help="skip DNS and use host:port:pubkeyhex")
    res.add_argument("--insecure-dns", action="store_true", help="accept DNS answers without DNSSEC")
    res.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT)
    res.add_argument("--resolver", help="recursive resolver host[:port] (default $SCAP_RESOLVER)")

    label = sub.add_parser("label", help="FQDN label for a public key")
    label.add_argument("pubkey")

    unlabel = sub.add_parser("unlabel", help="decode version and key from a label or FQDN")
    unlabel.add_argument("label")

    keygen = sub.add_parser("keygen", help="generate a server secret key")
    keygen.add_argument("--out", required=True)
    return parser


def _err(message: str) -> None:
    print("scap: %s" % escape_for_display(message), file=sys.stderr)


def _resolve(args, dns=None, dialer=None) -> int:
    try:
        address = parse_address(args.address)
        service = builtin_service_id(args.service)
        override = ServerOverride.parse(args.server) if args.server else None
    except (IdentityError, ValueError) as exc:
        _err(str(exc))
        return EXIT_USAGE

    # warn before any network traffic so a refusal still shows them
    for warning in inspect_spoofing(format_address(address, "unicode")).warnings:
        _err("warning: %s at byte %d: %s" % (warning.kind, warning.position, warning.detail))

    policy = SecurityPolicy.INSECURE if args.insecure_dns else SecurityPolicy.REQUIRE_DNSSEC
    request = ResolveRequest(address, service, policy, override, args.timeout)
    if dns is None and override is None:
        dns = ResolverDnsClient(args.resolver, timeout=args.timeout)
    try:
        result = resolve(request, dns=dns, dialer=dialer)
    except Refused as exc:
        _err("refused by %s: %s" % (exc.server.fqdn if exc.server else "server", exc.description))
        return EXIT_REFUSED
    except SecurityPolicyViolation as exc:
        _err("security policy violation: %s" % exc)
        return EXIT_POLICY
    except (RetryLater, AllServersUnreachable, DiscoveryError) as exc:
        _err("%s: %s" % (type(exc).__name__, exc))
        return EXIT_TEMPORARY
    except ScapError as exc:
        _err("%s failed: %s: %s" % (exc.stage, type(exc).__name__, exc))
        return EXIT_TEMPORARY

    if not result.dnssec_validated:
        _err("warning: server discovery was not DNSSEC-validated")

    if args.json:
        doc = {
            "address": format_address(address, "unicode").decode("utf-8"),
            "service": service.token,
            "data_base16": result.target_data.hex(),
            "server": "%s:%d" % (result.server_used.fqdn, result.server_used.port),
            "warnings": [
                {"kind": w.kind, "position": w.position, "detail": w.detail}
                for w in result.spoof_report.warnings
            ],
            "dnssec": result.dnssec_validated,
        }
        print(json.dumps(doc))
    else:
        sys.stdout.flush()
        sys.stdout.buffer.write(result.target_data + b"\n")
        sys.stdout.flush()
    return EXIT_OK


def main(argv=None, dns=None, dialer=None) -> int:
    """Entry point. *dns* and *dialer* let tests swap the network."""
    logging.basicConfig(level=logging.WARNING, format="scap: %(message)s")
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK

    if args.command == "resolve":
        return _resolve(args, dns, dialer)
    try:
        if args.command == "label":
            print(fqdn_label_for_key(bytes.fromhex(args.pubkey)))
        elif args.command == "unlabel":
            version, key = extract_key_from_fqdn(args.label)
            print("version %d" % version)
            print("key %s" % key.hex())
        elif args.command == "keygen":
            from .server import keygen_to_file

            pair, label = keygen_to_file(args.out)
            print("public key %s" % pair.public.hex())
            print("label %s" % label)
    except (ValueError, ScapError, OSError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    return EXIT_OK


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
