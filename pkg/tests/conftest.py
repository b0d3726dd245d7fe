from __future__ import annotations

import hashlib
import sys
from collections import deque
from datetime import datetime, timedelta, timezone
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from travelrule.crypto import KeyPair
from travelrule.datamodel import (
    CustomerRecord,
    PartyInfo,
    RealNameInfo,
    RealNameKind,
    TransactionInfo,
    VirtualAssetAddress,
)
from travelrule.ledger import ChannelId, ChannelLedger, TravelRuleRecord
from travelrule.membership import issue_credential, new_registry
from travelrule.node import InMemoryBackend, InMemoryChain, VaspNode

REPO = Path(__file__).resolve().parent.parent
SCENARIOS = REPO / "scenarios"
T0 = datetime(2026, 3, 1, 9, 0, tzinfo=timezone.utc)


def key_for(label: str) -> KeyPair:
    return KeyPair(hashlib.sha256(label.encode()).digest())


def make_registry(*ids: str, now: datetime = T0, days: int = 365):
    authority = key_for("authority")
    registry = new_registry(authority)
    keys = {}
    for vid in ids:
        keys[vid] = key_for(vid)
        issue_credential(authority, registry, vid, keys[vid].public_key, vid.title(), days,
                         now=now - timedelta(days=1))
    return authority, registry, keys


def btc(address: str) -> VirtualAssetAddress:
    return VirtualAssetAddress("BTC", address)


ALICE = CustomerRecord("a-1", "Alice Kim", (btc("bc1q-alice"),),
                       RealNameInfo(RealNameKind.RESIDENT_REGISTRATION, "900101-1234567"))
ANDREW = CustomerRecord("a-2", "Andrew Baek", (btc("bc1q-andrew"),),
                        RealNameInfo(RealNameKind.PASSPORT, "M12345678"))
BOB = CustomerRecord("b-1", "Bob Yang", (btc("bc1q-bob"),),
                     RealNameInfo(RealNameKind.PASSPORT, "M87654321"))
GRACE = CustomerRecord("g-1", "Grace Jung", (btc("bc1q-grace"),),
                       RealNameInfo(RealNameKind.ALIEN_REGISTRATION, "950404-5345678"))


def sample_record(i: int = 0) -> TravelRuleRecord:
    tx = TransactionInfo(
        tx_id=hashlib.sha256(f"tx{i}".encode()).hexdigest(),
        asset="BTC",
        amount=f"{i + 1}.5",
        originator_address=btc("bc1q-alice"),
        beneficiary_address=btc("bc1q-bob"),
        executed_at=T0 + timedelta(seconds=i),
    )
    return TravelRuleRecord(
        session_id=f"{i:032x}",
        originator=PartyInfo("Alice Kim", btc("bc1q-alice")),
        beneficiary=PartyInfo("Bob Yang", btc("bc1q-bob")),
        tx=tx,
    )


def build_chain(n: int, registry, keys, path: Path | None = None, a: str = "alpha", b: str = "beta"):
    """Two replicas of an ``n``-entry channel built through propose/countersign/finalize."""
    cid = ChannelId.of(a, b)
    left = ChannelLedger(cid, path)
    right = ChannelLedger(cid)
    for i in range(n):
        proposer, acceptor = (a, b) if i % 2 == 0 else (b, a)
        p = left.propose(sample_record(i), proposer, keys[proposer], T0 + timedelta(seconds=i))
        entry = right.countersign(p, acceptor, keys[acceptor], registry)
        left.finalize(p, entry.acceptor_sig, registry)
    return left, right


class Clock:
    def __init__(self, start: datetime = T0):
        self.now = start

    def __call__(self) -> datetime:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += timedelta(seconds=seconds)


class Wire:
    """Direct in-memory links between nodes; ``pump`` delivers until quiet."""

    def __init__(self):
        self.queue: deque[tuple[str, str, bytes]] = deque()
        self.nodes: dict[str, VaspNode] = {}
        self.sent: list[tuple[str, str, bytes]] = []
        self.hold: set[str] = set()

    def sender(self, src: str):
        def send(dst: str, frame: bytes) -> None:
            self.sent.append((src, dst, frame))
            self.queue.append((src, dst, frame))
        return send

    def pump(self, limit: int = 1000) -> int:
        n = 0
        while self.queue and n < limit:
            src, dst, frame = self.queue.popleft()
            if dst in self.nodes and dst not in self.hold:
                self.nodes[dst].receive(frame)
            n += 1
        return n


def make_nodes(tmp_path: Path | None = None, ids=("alpha", "beta"), denylists=None, clock=None):
    customers = {"alpha": [ALICE, ANDREW], "beta": [BOB], "gamma": [GRACE]}
    _, registry, keys = make_registry(*ids)
    clock = clock or Clock()
    chain = InMemoryChain()
    wire = Wire()
    routes = {}
    for vid in ids:
        for c in customers[vid]:
            for addr in c.addresses:
                routes[(addr.asset, addr.address)] = vid
    for i, vid in enumerate(ids):
        wire.nodes[vid] = VaspNode(
            vasp_id=vid,
            key=keys[vid],
            registry=registry,
            backend=InMemoryBackend(customers[vid]),
            chain=chain,
            routes=routes,
            send=wire.sender(vid),
            data_dir=tmp_path / vid if tmp_path else None,
            denylist=(denylists or {}).get(vid, ()),
            clock=clock,
            session_ids=_counter(i),
        )
    return wire, registry, keys, clock


def _counter(prefix: int):
    n = iter(range(1, 1 << 30))
    return lambda: f"{prefix:08x}{next(n):024x}"


@pytest.fixture
def registry_ab():
    return make_registry("alpha", "beta")


def free_port() -> int:
    import socket

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def deploy(root: Path, ids=("alpha", "beta"), timeout_s: float = 30, denylists=None) -> dict[str, Path]:
    """Write keys, registry, backends and configs for a local multi-node deployment."""
    import json

    from travelrule.crypto import write_key_file

    customers = {"alpha": [ALICE, ANDREW], "beta": [BOB], "gamma": [GRACE]}
    now = datetime.now(timezone.utc)
    authority, registry, keys = make_registry(*ids, now=now)
    write_key_file(root / "authority.key", authority)
    registry.save(root / "registry.json")
    ports = {vid: (free_port(), free_port()) for vid in ids}
    routes = [
        {"asset": a.asset, "address": a.address, "vasp": vid}
        for vid in ids for c in customers[vid] for a in c.addresses
    ]
    configs = {}
    for vid in ids:
        d = root / vid
        d.mkdir()
        write_key_file(d / "node.key", keys[vid])
        (d / "customers.json").write_text(json.dumps({"customers": [c.to_dict() for c in customers[vid]]}))
        (d / "denylist.json").write_text(json.dumps((denylists or {}).get(vid, [])))
        config = {
            "vasp_id": vid,
            "key_file": "node.key",
            "data_dir": "data",
            "listen": f"127.0.0.1:{ports[vid][0]}",
            "ops_port": ports[vid][1],
            "peers": {p: f"127.0.0.1:{ports[p][0]}" for p in ids if p != vid},
            "routes": routes,
            "registry_path": "../registry.json",
            "backend_path": "customers.json",
            "chain_path": "../chain.jsonl",
            "denylist_path": "denylist.json",
            "timeout_s": timeout_s,
            "registry_refresh_s": 0.5,
        }
        configs[vid] = d / "config.json"
        configs[vid].write_text(json.dumps(config, indent=2))
    return configs


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
