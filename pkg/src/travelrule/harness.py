"""Deterministic multi-node scenarios with fault injection.

A scenario file (JSON) declares the VASPs, the simulated network and an
ordered list of actions. Each action may carry ``expect`` checks that are
evaluated right after it runs. Everything random (keys, session ids,
latency, loss) derives from the scenario seed, so a run is reproducible
byte for byte. Faults are applied to the network and to the files on disk,
never through node internals.
"""

from __future__ import annotations

import json
import logging
import random
import tempfile
from collections.abc import Iterator, Mapping
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from decimal import Decimal
from pathlib import Path
from typing import Any

from travelrule.crypto import Digest, KeyPair, canonical_bytes, sha256
from travelrule.datamodel import (
    CustomerRecord,
    ReasonCode,
    VirtualAssetAddress,
    check_vasp_id,
    format_timestamp,
    parse_timestamp,
)
from travelrule.ledger import (
    AdditionalInfoRecord,
    ChannelId,
    diff_ledger_bytes,
    parse_ledger_bytes,
    verify_ledger_bytes,
)
from travelrule.membership import Registry, issue_credential, new_registry, revoke
from travelrule.node import InMemoryBackend, InMemoryChain, NodeError, VaspNode
from travelrule.protocol import Message, MsgType
from travelrule.transport import FrameError, SimConfig, SimNetwork, decode_frame, encode_frame

log = logging.getLogger(__name__)

DEFAULT_START = "2026-01-01T00:00:00Z"


class ScenarioError(ValueError):
    pass


def derive_seed(seed: int, label: str) -> bytes:
    return bytes(sha256(f"{seed}:{label}".encode()))


@dataclass
class VaspDef:
    vasp_id: str
    customers: list[CustomerRecord]
    denylist: list[str] = field(default_factory=list)
    display_name: str = ""


@dataclass
class Scenario:
    name: str
    seed: int
    vasps: list[VaspDef]
    network: dict[str, Any]
    actions: list[dict[str, Any]]
    start_time: datetime
    tick_ms: int = 100
    timeout_s: float = 30
    registry_refresh_s: float = 60

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base: Path | None = None) -> Scenario:
        try:
            vasps = []
            for v in data["vasps"]:
                if "backend" in v:
                    fixture = json.loads(((base or Path.cwd()) / v["backend"]).read_text())
                    customers = fixture["customers"]
                else:
                    customers = v.get("customers", [])
                vasps.append(
                    VaspDef(
                        vasp_id=check_vasp_id(v["id"]),
                        customers=[CustomerRecord.from_dict(c) for c in customers],
                        denylist=list(v.get("denylist", [])),
                        display_name=v.get("display_name", v["id"]),
                    )
                )
            ids = [v.vasp_id for v in vasps]
            if len(set(ids)) != len(ids):
                raise ScenarioError("duplicate VASP id")
            actions = list(data.get("actions", []))
            for i, action in enumerate(actions):
                for key in ("vasp", "from", "to_vasp", "peer"):
                    if key in action and action[key] not in ids and action.get("do") != "forge_message":
                        raise ScenarioError(f"action {i} references undefined VASP {action[key]!r}")
            return cls(
                name=data.get("name", "scenario"),
                seed=int(data.get("seed", 0)),
                vasps=vasps,
                network=dict(data.get("network", {})),
                actions=actions,
                start_time=parse_timestamp(data.get("start_time", DEFAULT_START)),
                tick_ms=int(data.get("tick_ms", 100)),
                timeout_s=float(data.get("timeout_s", 30)),
                registry_refresh_s=float(data.get("registry_refresh_s", 60)),
            )
        except ScenarioError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"malformed scenario: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> Scenario:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
        return cls.from_dict(data, base=path.parent)


@dataclass
class RunResult:
    transcript: list[dict[str, Any]]
    passed: int
    failed: int

    @property
    def ok(self) -> bool:
        return self.failed == 0

    def transcript_bytes(self) -> bytes:
        return b"".join(canonical_bytes(e) + b"\n" for e in self.transcript)


def _describe(frame: bytes) -> dict[str, Any]:
    try:
        m = decode_frame(frame)
    except FrameError as exc:
        return {"msg_type": None, "error": exc.kind.value}
    return {"msg_type": m.msg_type.value, "session": m.session_id, "sender": m.sender}


def _msg_matcher(msg_type: str | None):
    def match(frame: bytes) -> bool:
        return msg_type is None or _describe(frame).get("msg_type") == msg_type

    return match


class Simulation:
    """Builds the nodes of a scenario on a :class:`SimNetwork` and drives them."""

    def __init__(self, scenario: Scenario, data_root: Path):
        self.scenario = scenario
        self.seed = scenario.seed
        self.data_root = data_root
        self.transcript: list[dict[str, Any]] = []
        self.rng = random.Random(self.seed)
        self.authority = KeyPair(derive_seed(self.seed, "authority"))
        self.registry = new_registry(self.authority)
        self.keys: dict[str, KeyPair] = {}
        self.backends: dict[str, InMemoryBackend] = {}
        self.chain = InMemoryChain()
        self.labels: dict[str, tuple[str, str]] = {}
        self.net = SimNetwork(SimConfig.from_dict(scenario.network, self.seed), describe=_describe)
        self._net_cursor = 0
        self.nodes: dict[str, VaspNode] = {}
        self.routes: dict[tuple[str, str], str] = {}

        issued = self.now() - timedelta(days=1)
        for v in scenario.vasps:
            key = KeyPair(derive_seed(self.seed, f"vasp:{v.vasp_id}"))
            self.keys[v.vasp_id] = key
            issue_credential(self.authority, self.registry, v.vasp_id, key.public_key,
                             v.display_name, 365, now=issued)
            self.backends[v.vasp_id] = InMemoryBackend(v.customers)
            for c in v.customers:
                for addr in c.addresses:
                    self.routes[(addr.asset, addr.address)] = v.vasp_id
        for v in scenario.vasps:
            self.nodes[v.vasp_id] = self._build_node(v.vasp_id)

    # -- plumbing ----------------------------------------------------------------

    def now(self) -> datetime:
        return self.scenario.start_time + timedelta(milliseconds=self.net.tick * self.scenario.tick_ms)

    def snapshot(self) -> Registry:
        return Registry.from_dict(json.loads(canonical_bytes(self.registry.to_dict())))

    def _session_ids(self, vasp_id: str):
        rng = random.Random(derive_seed(self.seed, f"sessions:{vasp_id}"))
        return lambda: f"{rng.getrandbits(128):032x}"

    def _build_node(self, vasp_id: str) -> VaspNode:
        vdef = next(v for v in self.scenario.vasps if v.vasp_id == vasp_id)

        def on_event(event: dict[str, Any]) -> None:
            self.record({"tick": self.net.tick, **event})

        return VaspNode(
            vasp_id=vasp_id,
            key=self.keys[vasp_id],
            registry=self.snapshot(),
            backend=self.backends[vasp_id],
            chain=self.chain,
            routes=self.routes,
            send=lambda to, frame: self.net.send(vasp_id, to, frame),
            data_dir=self.data_root / vasp_id,
            denylist=vdef.denylist,
            clock=self.now,
            timeout=timedelta(seconds=self.scenario.timeout_s),
            session_ids=self._session_ids(vasp_id),
            on_event=on_event,
        )

    def record(self, event: dict[str, Any]) -> None:
        self._flush_net()
        self.transcript.append(event)

    def _flush_net(self) -> None:
        for event in self.net.log[self._net_cursor :]:
            self.transcript.append({"net": True, **event})
        self._net_cursor = len(self.net.log)

    def channel_file(self, vasp_id: str, peer: str) -> Path:
        return self.data_root / vasp_id / "channels" / ChannelId.of(vasp_id, peer).filename

    def advance(self, ticks: int) -> None:
        refresh_every = max(1, round(self.scenario.registry_refresh_s * 1000 / self.scenario.tick_ms))
        for _ in range(ticks):
            for delivery in self.net.step():
                node = self.nodes.get(delivery.dst)
                self._flush_net()
                if node is not None:
                    node.receive(delivery.frame)
            if self.net.tick % refresh_every == 0:
                for node in self.nodes.values():
                    node.set_registry(self.snapshot())
            for vid in sorted(self.nodes):
                self.nodes[vid].tick()
        self._flush_net()

    def session(self, label: str, vasp_id: str | None = None):
        if label not in self.labels:
            raise ScenarioError(f"unknown label {label!r}")
        owner, sid = self.labels[label]
        node = self.nodes[vasp_id or owner]
        return node.engine.sessions.get(sid)

    # -- actions -----------------------------------------------------------------

    def do_submit_transfer(self, a: Mapping[str, Any]) -> dict[str, Any]:
        node = self.nodes[a["vasp"]]
        sid = node.submit_transfer(
            a["customer"], VirtualAssetAddress.from_dict(a["to"]), a["to"]["asset"], a["amount"]
        )
        self.labels[a["label"]] = (a["vasp"], sid)
        return {"session": sid}

    def do_submit_random_transfers(self, a: Mapping[str, Any]) -> dict[str, Any]:
        """Submit ``count`` transfers between random customers of different VASPs."""
        count = int(a["count"])
        asset = a.get("asset", "BTC")
        owners = [
            (vid, c) for vid in sorted(self.backends)
            for c in self.backends[vid].customers() if c.address_for(asset)
        ]
        prefix = a.get("label_prefix", "auto")
        for i in range(count):
            src_vid, src = self.rng.choice(owners)
            dst_vid, dst = self.rng.choice([o for o in owners if o[0] != src_vid])
            amount = f"{self.rng.randint(1, 10**6)}.{self.rng.randint(0, 10**8 - 1):08d}"
            sid = self.nodes[src_vid].submit_transfer(
                src.customer_id, dst.address_for(asset), asset, amount
            )
            self.labels[f"{prefix}-{i + 1}"] = (src_vid, sid)
        return {"submitted": count}

    def do_advance_ticks(self, a: Mapping[str, Any]) -> dict[str, Any]:
        self.advance(int(a["n"]))
        return {"tick": self.net.tick}

    def entry_hash_of(self, label: str) -> Digest:
        s = self.session(label)
        if s is None or s.entry_hash is None:
            raise ScenarioError(f"transfer {label!r} has no finalized entry")
        return s.entry_hash

    def do_flag_suspicious(self, a: Mapping[str, Any]) -> dict[str, Any]:
        entry_hash = self.entry_hash_of(a["transfer"])
        node = self.nodes[a["vasp"]]
        sid = node.flag_suspicious(entry_hash, ReasonCode(a.get("reason", "STR")))
        if "label" in a:
            self.labels[a["label"]] = (a["vasp"], sid)
        return {"session": sid}

    def do_tamper_ledger(self, a: Mapping[str, Any]) -> dict[str, Any]:
        path = self.channel_file(a["vasp"], a["peer"])
        raw = bytearray(path.read_bytes())
        starts = [0] + [i + 1 for i, b in enumerate(raw) if b == 0x0A]
        seq = int(a["seq"])
        pos = starts[seq] + int(a["offset"])
        raw[pos] ^= int(a.get("xor", 1))
        path.write_bytes(bytes(raw))
        return {"file": path.name, "position": pos}

    def do_delete_entry(self, a: Mapping[str, Any]) -> dict[str, Any]:
        path = self.channel_file(a["vasp"], a["peer"])
        lines = path.read_bytes().split(b"\n")
        del lines[int(a["seq"])]
        path.write_bytes(b"\n".join(lines))
        return {"file": path.name}

    def do_restart(self, a: Mapping[str, Any]) -> dict[str, Any]:
        vid = a["vasp"]
        self.nodes.pop(vid, None)
        self.nodes[vid] = self._build_node(vid)
        return {"restarted": vid}

    def do_revoke(self, a: Mapping[str, Any]) -> dict[str, Any]:
        revoke(self.authority, self.registry, a["vasp"])
        return {"revoked": a["vasp"]}

    def do_drop_next(self, a: Mapping[str, Any]) -> dict[str, Any]:
        self.net.add_fault(a["from"], a["to_vasp"], "drop", _msg_matcher(a.get("msg_type")), int(a.get("count", 1)))
        return {}

    def do_duplicate_next(self, a: Mapping[str, Any]) -> dict[str, Any]:
        self.net.add_fault(a["from"], a["to_vasp"], "duplicate", _msg_matcher(a.get("msg_type")), int(a.get("count", 1)))
        return {}

    def do_perturb_next(self, a: Mapping[str, Any]) -> dict[str, Any]:
        """Rewrite one field of the next TX_INFO on a link, re-signed by its sender.

        Models a faulty or dishonest originator: the signature stays valid, so only
        the beneficiary's transaction check can catch it.
        """
        target = a["field"]
        key = self.keys[a["from"]]

        def rewrite(frame: bytes) -> bytes:
            m = decode_frame(frame)
            body = json.loads(canonical_bytes(m.body))
            body["tx"][target] = perturb_value(target, body["tx"][target])
            forged = replace(m, body=body, sender_sig=None).signed(key)
            return encode_frame(forged)

        self.net.add_fault(a["from"], a["to_vasp"], "rewrite", _msg_matcher("TX_INFO"), 1, rewrite)
        return {"field": target}

    def do_forge_message(self, a: Mapping[str, Any]) -> dict[str, Any]:
        kind = a["kind"]
        sender = check_vasp_id(a["as"])
        target = a["to_vasp"]
        forger = KeyPair(derive_seed(self.seed, f"forger:{a['label']}"))
        now = self.now()
        if kind == "expired":
            issue_credential(self.authority, self.registry, sender, forger.public_key, sender, 1,
                             now=now - timedelta(days=10))
        elif kind == "revoked":
            issue_credential(self.authority, self.registry, sender, forger.public_key, sender, 365,
                             now=now - timedelta(days=1))
            revoke(self.authority, self.registry, sender)
        elif kind == "impersonate":
            if sender not in self.keys:
                raise ScenarioError("impersonation needs a registered VASP id")
        elif kind != "unregistered":
            raise ScenarioError(f"unknown forgery kind {kind!r}")
        # forged credentials reach nodes through the normal snapshot path
        for node in self.nodes.values():
            node.set_registry(self.snapshot())
        beneficiary = next(iter(self.backends[target].customers()))
        address = beneficiary.addresses[0]
        sid = f"{random.Random(derive_seed(self.seed, a['label'])).getrandbits(128):032x}"
        m = Message(
            msg_type=MsgType.TRANSFER_INIT,
            session_id=sid,
            sender=sender,
            recipient=target,
            sent_at=now,
            body={
                "originator": {"name": "Forged Sender", "address": {"asset": address.asset, "address": "forged-addr"}},
                "beneficiary_address": address.to_dict(),
                "asset": address.asset,
                "amount": "1",
            },
        ).signed(forger)
        self.labels[a["label"]] = (target, sid)
        self.net.send(sender, target, encode_frame(m))
        return {"session": sid}

    # -- expectations --------------------------------------------------------------

    def check(self, e: Mapping[str, Any]) -> tuple[bool, Any]:
        kind = e["expect"]
        if kind == "session":
            s = self.session(e["label"], e.get("vasp"))
            state = s.state.value if s else None
            return state == e["state"], {"state": state}
        if kind == "no_session":
            s = self.session(e["label"], e["vasp"])
            return s is None, {"exists": s is not None}
        if kind == "all_sessions":
            prefix = e.get("label_prefix", "")
            states = {}
            for label, (owner, sid) in sorted(self.labels.items()):
                if label.startswith(prefix):
                    for vid in (owner, *self._peers_of(owner, sid)):
                        s = self.nodes[vid].engine.sessions.get(sid)
                        states[f"{label}@{vid}"] = s.state.value if s else None
            bad = {k: v for k, v in states.items() if v != e["state"]}
            return not bad and bool(states), {"checked": len(states), "bad": bad}
        if kind == "ledger":
            report = verify_ledger_bytes(
                self.channel_file(e["vasp"], e["peer"]).read_bytes(), self.registry
            )
            ok = report.ok == e.get("ok", True)
            if "bad_index" in e:
                ok = ok and report.bad_index == e["bad_index"]
            return ok, report.to_dict()
        if kind == "all_ledgers":
            reports = {}
            for vid in sorted(self.nodes):
                for path in sorted((self.data_root / vid / "channels").glob("*.jsonl")):
                    reports[f"{vid}/{path.name}"] = verify_ledger_bytes(path.read_bytes(), self.registry).ok
            return all(reports.values()) and bool(reports), {"files": len(reports)}
        if kind == "replicas":
            a, b = e["vasps"]
            report = diff_ledger_bytes(
                self.channel_file(a, b).read_bytes(), self.channel_file(b, a).read_bytes()
            )
            ok = report.identical == e.get("identical", True)
            if "divergent_seq" in e:
                ok = ok and report.divergent_seq == e["divergent_seq"]
            return ok, report.to_dict()
        if kind == "all_replicas":
            ids = sorted(self.nodes)
            diffs = {}
            for i, a in enumerate(ids):
                for b in ids[i + 1 :]:
                    fa, fb = self.channel_file(a, b), self.channel_file(b, a)
                    if fa.exists() or fb.exists():
                        ra = fa.read_bytes() if fa.exists() else b""
                        rb = fb.read_bytes() if fb.exists() else b""
                        diffs[f"{a}|{b}"] = diff_ledger_bytes(ra, rb).identical
            return all(diffs.values()) and bool(diffs), {"channels": len(diffs)}
        if kind == "entries":
            path = self.channel_file(e["vasp"], e["peer"])
            n = len(parse_ledger_bytes(path.read_bytes()).entries) if path.exists() else 0
            return n == e["count"], {"count": n}
        if kind == "real_name":
            owner, sid = self.labels[e["label"]]
            info = self.nodes[owner].get_additional_info(sid)
            kind_seen = info.kind.value if info else None
            return kind_seen == e["kind"], {"kind": kind_seen}
        if kind == "additional_info_recorded":
            owner, sid = self.labels[e["label"]]
            s = self.nodes[owner].engine.sessions[sid]
            found = []
            for vid in (owner, s.peer):
                path = self.channel_file(vid, s.peer if vid == owner else owner)
                entries = parse_ledger_bytes(path.read_bytes()).entries
                found.append(any(
                    isinstance(x.payload, AdditionalInfoRecord)
                    and x.payload.ref_entry == s.ref_entry
                    and x.payload.session_id == sid
                    for x in entries
                ))
            return all(found), {"replicas": found}
        if kind == "no_message":
            sid = self.labels[e["label"]][1]
            hits = [
                t for t in self.transcript
                if t.get("net") and t.get("session") == sid and t.get("msg_type") == e["msg_type"]
            ]
            return not hits, {"found": len(hits)}
        if kind == "dropped":
            sid = self.labels[e["label"]][1]
            reasons = [
                t["reason"] for t in self.transcript
                if t.get("event") == "dropped" and t.get("session") == sid and t.get("vasp") == e["vasp"]
            ]
            return e["reason"] in reasons, {"reasons": reasons}
        if kind == "pii_ordering":
            problems = pii_ordering_violations(self.transcript)
            return not problems, {"violations": problems[:5]}
        if kind == "startup_error":
            return True, {}
        raise ScenarioError(f"unknown expectation {kind!r}")

    def _peers_of(self, owner: str, sid: str) -> list[str]:
        s = self.nodes[owner].engine.sessions.get(sid)
        return [s.peer] if s and s.peer in self.nodes else []

    # -- driver --------------------------------------------------------------------

    def run(self) -> RunResult:
        passed = failed = 0
        self.record({"event": "scenario", "name": self.scenario.name, "seed": self.seed,
                     "vasps": [v.vasp_id for v in self.scenario.vasps]})
        for index, action in enumerate(self.scenario.actions):
            verb = action.get("do")
            handler = getattr(self, f"do_{verb}", None)
            if handler is None:
                raise ScenarioError(f"action {index}: unknown action {verb!r}")
            expects = action.get("expect", [])
            if isinstance(expects, Mapping):
                expects = [expects]
            error = None
            try:
                result = handler(action)
            except (NodeError, ScenarioError, ValueError, KeyError) as exc:
                result, error = None, str(exc)
            self.record({"tick": self.net.tick, "event": "action", "index": index, "do": verb,
                         "result": result, "error": error})
            for e in expects:
                if e.get("expect") == "error":
                    ok, detail = error is not None and e.get("contains", "") in error, {"error": error}
                elif error is not None and e.get("expect") == "startup_error":
                    ok, detail = True, {"error": error}
                elif error is not None:
                    ok, detail = False, {"unexpected_error": error}
                else:
                    try:
                        ok, detail = self.check(e)
                    except (KeyError, OSError, ScenarioError) as exc:
                        ok, detail = False, {"check_error": f"{type(exc).__name__}: {exc}"}
                passed += ok
                failed += not ok
                self.record({"tick": self.net.tick, "event": "expect", "index": index,
                             "expect": dict(e), "pass": bool(ok), "detail": detail})
            if error is not None and not expects:
                failed += 1
                self.record({"tick": self.net.tick, "event": "expect", "index": index,
                             "expect": {"expect": "no_error"}, "pass": False, "detail": {"error": error}})
        self.record({"event": "summary", "passed": passed, "failed": failed})
        return RunResult(self.transcript, passed, failed)


def perturb_value(field_name: str, value: Any) -> Any:
    """Smallest plausible change to one TX_INFO field."""
    if field_name == "amount":
        return format(Decimal(value) + Decimal("1e-18"), "f")
    if field_name == "asset":
        return "ETH" if value != "ETH" else "BTC"
    if field_name == "tx_id":
        return sha256(value.encode()).hex()
    if field_name in ("originator_address", "beneficiary_address"):
        return {**value, "address": value["address"] + "0"}
    if field_name == "executed_at":
        return format_timestamp(parse_timestamp(value) + timedelta(milliseconds=1))
    raise ScenarioError(f"cannot perturb field {field_name!r}")


def pii_ordering_violations(transcript: list[dict[str, Any]]) -> list[str]:
    """Sessions where beneficiary or transaction data was sent out of order.

    BENEFICIARY_INFO may only be sent after the beneficiary side's originator
    check returned NORMAL, and TX_INFO only after BENEFICIARY_INFO was delivered.
    """
    normal_checked: set[tuple[str, str]] = set()
    delivered_beneficiary: set[str] = set()
    problems = []
    for t in transcript:
        if t.get("event") == "check_originator" and t.get("result") == "NORMAL":
            normal_checked.add((t["vasp"], t["session"]))
        if not t.get("net"):
            continue
        sid, mtype = t.get("session"), t.get("msg_type")
        if t["event"] == "send" and mtype == "BENEFICIARY_INFO" and (t["src"], sid) not in normal_checked:
            problems.append(f"{sid}: BENEFICIARY_INFO before NORMAL originator check")
        if t["event"] == "deliver" and mtype == "BENEFICIARY_INFO":
            delivered_beneficiary.add(sid)
        if t["event"] == "send" and mtype == "TX_INFO" and sid not in delivered_beneficiary:
            problems.append(f"{sid}: TX_INFO before BENEFICIARY_INFO received")
    return problems


@contextmanager
def _data_root() -> Iterator[Path]:
    with tempfile.TemporaryDirectory(prefix="travelrule-sim-") as tmp:
        yield Path(tmp)


def run_scenario(
    path: str | Path | Scenario,
    seed: int | None = None,
    out_dir: str | Path | None = None,
) -> RunResult:
    scenario = path if isinstance(path, Scenario) else Scenario.load(path)
    if seed is not None:
        scenario = replace(scenario, seed=seed)
    with _data_root() as root:
        result = Simulation(scenario, root).run()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "transcript.jsonl").write_bytes(result.transcript_bytes())
    return result
