"""``travelrule`` command line.

Every subcommand writes machine-readable JSON lines to stdout and a short
human summary to stderr. Exit status is 0 only on success.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from travelrule.crypto import KeyPair, PublicKey, canonical_bytes, read_key_file, write_key_file
from travelrule.datamodel import ReasonCode
from travelrule.harness import ScenarioError, run_scenario
from travelrule.ledger import (
    diff_ledger_bytes,
    parse_ledger_bytes,
    verify_ledger_file,
)
from travelrule.membership import MembershipError, Registry, issue_credential, new_registry, revoke
from travelrule.node import NodeConfig, NodeError, node_start, ops_request

log = logging.getLogger("travelrule")


class CliError(Exception):
    pass


def emit(record: Any) -> None:
    sys.stdout.write(canonical_bytes(record).decode() + "\n")


def summary(text: str) -> None:
    print(text, file=sys.stderr)


# -- authority -------------------------------------------------------------------


def cmd_authority_init(args: argparse.Namespace) -> int:
    key_path = Path(args.key)
    if key_path.exists() and not args.force:
        raise CliError(f"{key_path} exists; pass --force to overwrite")
    key = KeyPair.generate()
    write_key_file(key_path, key)
    new_registry(key).save(args.registry)
    emit({"authority_pk": key.public_key.hex(), "registry": str(args.registry)})
    summary(f"authority key written to {key_path}, empty registry at {args.registry}")
    return 0


def cmd_authority_issue(args: argparse.Namespace) -> int:
    authority = read_key_file(args.key)
    registry = Registry.load(args.registry)
    if args.public_key:
        pk = PublicKey.fromhex(args.public_key)
    else:
        pk = read_key_file(args.vasp_key).public_key
    cred = issue_credential(
        authority, registry, args.vasp_id, pk, args.display_name or args.vasp_id, args.days
    )
    registry.save(args.registry)
    emit(cred.to_dict())
    summary(f"issued credential for {cred.vasp_id}, valid until {cred.to_dict()['expires_at']}")
    return 0


def cmd_authority_revoke(args: argparse.Namespace) -> int:
    authority = read_key_file(args.key)
    registry = Registry.load(args.registry)
    revoke(authority, registry, args.vasp_id)
    registry.save(args.registry)
    emit({"revoked": args.vasp_id})
    summary(f"revoked {args.vasp_id}")
    return 0


def cmd_keygen(args: argparse.Namespace) -> int:
    path = Path(args.out)
    if path.exists() and not args.force:
        raise CliError(f"{path} exists; pass --force to overwrite")
    key = KeyPair.generate()
    write_key_file(path, key)
    emit({"key_file": str(path), "public_key": key.public_key.hex()})
    summary(f"key written to {path}")
    return 0


# -- node and operations -----------------------------------------------------------


def cmd_node_run(args: argparse.Namespace) -> int:
    config = NodeConfig.load(args.config)
    server = node_start(config)
    emit({"vasp_id": config.vasp_id, "listen": config.listen, "ops_port": config.ops_port})
    summary(f"{config.vasp_id} starting")
    try:
        asyncio.run(server.serve_forever())
    except KeyboardInterrupt:
        summary("stopped")
    return 0


def _ops(args: argparse.Namespace, request: dict[str, Any]) -> Any:
    host, _, port = args.ops.rpartition(":")
    response = asyncio.run(ops_request(host or "127.0.0.1", int(port), request))
    if not response.get("ok"):
        raise CliError(response.get("error", "operation failed"))
    return response["result"]


def cmd_transfer_submit(args: argparse.Namespace) -> int:
    result = _ops(args, {
        "op": "submit_transfer",
        "customer_id": args.customer,
        "beneficiary_address": {"asset": args.asset, "address": args.to},
        "asset": args.asset,
        "amount": args.amount,
    })
    emit(result)
    summary(f"session {result['session_id']} started")
    return 0


def cmd_transfer_status(args: argparse.Namespace) -> int:
    result = _ops(args, {"op": "status", "session_id": args.session})
    emit(result)
    summary(f"session {args.session}: {result['state']}")
    return 0


def cmd_flag(args: argparse.Namespace) -> int:
    result = _ops(args, {"op": "flag", "entry_hash": args.entry_hash, "reason": args.reason})
    emit(result)
    summary(f"additional-info session {result['session_id']} started")
    return 0


# -- ledger --------------------------------------------------------------------------


def cmd_ledger_verify(args: argparse.Namespace) -> int:
    registry = Registry.load(args.registry)
    data_dir = Path(args.data_dir)
    files = sorted((data_dir / "channels").glob("*.jsonl"))
    failures = 0
    for path in files:
        report = verify_ledger_file(path, registry)
        failures += not report.ok
        emit({"channel": path.stem, "seq": report.bad_index, **report.to_dict()})
    status = "ok" if not failures else f"{failures} channel(s) failed"
    summary(f"verified {len(files)} channel file(s): {status}")
    return 0 if not failures else 1


def cmd_ledger_diff(args: argparse.Namespace) -> int:
    report = diff_ledger_bytes(Path(args.a).read_bytes(), Path(args.b).read_bytes())
    emit(report.to_dict())
    if report.identical:
        summary("replicas identical")
        return 0
    summary(f"replicas diverge at seq {report.divergent_seq}")
    return 1


def cmd_ledger_show(args: argparse.Namespace) -> int:
    parsed = parse_ledger_bytes(Path(args.file).read_bytes())
    for entry in parsed.entries:
        emit(entry.to_dict())
    if parsed.bad_index is not None:
        summary(f"stopped at seq {parsed.bad_index}: {parsed.reason}")
        return 1
    summary(f"{len(parsed.entries)} entries")
    return 0


# -- scenario ----------------------------------------------------------------------


def cmd_scenario_run(args: argparse.Namespace) -> int:
    result = run_scenario(args.path, seed=args.seed, out_dir=args.out_dir)
    sys.stdout.buffer.write(result.transcript_bytes())
    sys.stdout.flush()
    summary(f"{result.passed} expectation(s) passed, {result.failed} failed")
    return 0 if result.ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="travelrule", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    auth = sub.add_parser("authority", help="manage the credential registry").add_subparsers(
        dest="action", required=True
    )
    a = auth.add_parser("init")
    a.add_argument("--key", required=True, help="authority key file to create")
    a.add_argument("--registry", required=True)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_authority_init)
    a = auth.add_parser("issue")
    a.add_argument("--key", required=True, help="authority key file")
    a.add_argument("--registry", required=True)
    a.add_argument("--vasp-id", required=True)
    group = a.add_mutually_exclusive_group(required=True)
    group.add_argument("--public-key", help="hex Ed25519 public key")
    group.add_argument("--vasp-key", help="read the public key from this key file")
    a.add_argument("--display-name")
    a.add_argument("--days", type=int, default=365)
    a.set_defaults(func=cmd_authority_issue)
    a = auth.add_parser("revoke")
    a.add_argument("--key", required=True)
    a.add_argument("--registry", required=True)
    a.add_argument("--vasp-id", required=True)
    a.set_defaults(func=cmd_authority_revoke)

    k = sub.add_parser("keygen", help="create a node signing key")
    k.add_argument("--out", required=True)
    k.add_argument("--force", action="store_true")
    k.set_defaults(func=cmd_keygen)

    node = sub.add_parser("node").add_subparsers(dest="action", required=True)
    n = node.add_parser("run")
    n.add_argument("--config", required=True)
    n.set_defaults(func=cmd_node_run)

    transfer = sub.add_parser("transfer").add_subparsers(dest="action", required=True)
    t = transfer.add_parser("submit")
    t.add_argument("--ops", required=True, help="host:port of the node operations socket")
    t.add_argument("--customer", required=True)
    t.add_argument("--asset", required=True)
    t.add_argument("--to", required=True, help="beneficiary address")
    t.add_argument("--amount", required=True)
    t.set_defaults(func=cmd_transfer_submit)
    t = transfer.add_parser("status")
    t.add_argument("--ops", required=True)
    t.add_argument("--session", required=True)
    t.set_defaults(func=cmd_transfer_status)

    f = sub.add_parser("flag", help="request additional info for a finalized record")
    f.add_argument("--ops", required=True)
    f.add_argument("--entry-hash", required=True)
    f.add_argument("--reason", default="STR", choices=[r.value for r in ReasonCode])
    f.set_defaults(func=cmd_flag)

    ledger = sub.add_parser("ledger").add_subparsers(dest="action", required=True)
    lv = ledger.add_parser("verify")
    lv.add_argument("--data-dir", required=True)
    lv.add_argument("--registry", required=True)
    lv.set_defaults(func=cmd_ledger_verify)
    ld = ledger.add_parser("diff")
    ld.add_argument("a")
    ld.add_argument("b")
    ld.set_defaults(func=cmd_ledger_diff)
    ls = ledger.add_parser("show")
    ls.add_argument("file")
    ls.set_defaults(func=cmd_ledger_show)

    scenario = sub.add_parser("scenario").add_subparsers(dest="action", required=True)
    s = scenario.add_parser("run")
    s.add_argument("path")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_scenario_run)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (CliError, NodeError, MembershipError, ScenarioError, OSError, ValueError) as exc:
        emit({"error": str(exc)})
        summary(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
