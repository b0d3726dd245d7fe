"""Bilateral, hash-chained, dual-signed channel ledgers.

Each pair of VASPs shares one channel. An entry is proposed and signed by
one member, countersigned by the other, and only then appended; both
members keep a replica. Entries are linked by ``prev_hash`` and carry an
``entry_hash`` over everything else, so any edit, deletion or reordering of
a stored replica shows up in :func:`verify_chain`.
"""

from __future__ import annotations

import json
import logging
import os
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Protocol, Union

from travelrule.crypto import (
    ZERO_DIGEST,
    CanonicalizationError,
    Digest,
    KeyFormatError,
    KeyPair,
    PublicKey,
    Signature,
    canonical_bytes,
    digest_of,
    sha256,
    verify,
)
from travelrule.datamodel import (
    PartyInfo,
    RealNameInfo,
    ReasonCode,
    TransactionInfo,
    ValidationError,
    check_vasp_id,
    format_timestamp,
    parse_timestamp,
)

log = logging.getLogger(__name__)

MAX_CLOCK_SKEW = timedelta(seconds=300)


class LedgerError(Exception):
    pass


class KeyLookup(Protocol):
    def public_key_of(self, vasp_id: str) -> PublicKey | None: ...


@dataclass(frozen=True, order=True)
class ChannelId:
    a: str
    b: str

    def __post_init__(self) -> None:
        check_vasp_id(self.a)
        check_vasp_id(self.b)
        if self.a == self.b:
            raise ValueError("channel members must be distinct")
        if self.a > self.b:
            raise ValueError("channel members must be in canonical order")

    @classmethod
    def of(cls, x: str, y: str) -> ChannelId:
        lo, hi = sorted((x, y))
        return cls(lo, hi)

    @property
    def members(self) -> tuple[str, str]:
        return (self.a, self.b)

    def other(self, vasp_id: str) -> str:
        if vasp_id == self.a:
            return self.b
        if vasp_id == self.b:
            return self.a
        raise LedgerError(f"{vasp_id} is not a member of {self}")

    @property
    def filename(self) -> str:
        return f"{self.a}__{self.b}.jsonl"

    def to_list(self) -> list[str]:
        return [self.a, self.b]

    def __str__(self) -> str:
        return f"{self.a}__{self.b}"


# --------------------------------------------------------------------------
# payloads


@dataclass(frozen=True)
class TravelRuleRecord:
    session_id: str
    originator: PartyInfo
    beneficiary: PartyInfo
    tx: TransactionInfo

    type_tag = "TRAVEL_RULE"

    def to_dict(self) -> dict[str, Any]:
        return {
            "type": self.type_tag,
            "session_id": self.session_id,
            "originator": self.originator.to_dict(),
            "beneficiary": self.beneficiary.to_dict(),
            "tx": self.tx.to_dict(),
        }


@dataclass(frozen=True)
class AdditionalInfoRecord:
    session_id: str
    ref_entry: Digest
    reason: ReasonCode
    real_name: RealNameInfo

    type_tag = "ADDITIONAL_INFO"

    def to_dict(self) -> dict[str, Any]:
        return {
            "type": self.type_tag,
            "session_id": self.session_id,
            "ref_entry": self.ref_entry.hex(),
            "reason": ReasonCode(self.reason).value,
            "real_name": self.real_name.to_dict(),
        }


EntryPayload = Union[TravelRuleRecord, AdditionalInfoRecord]


def payload_from_dict(data: Mapping[str, Any]) -> EntryPayload:
    kind = data.get("type")
    if kind == TravelRuleRecord.type_tag:
        _expect_keys(data, {"type", "session_id", "originator", "beneficiary", "tx"})
        return TravelRuleRecord(
            session_id=_session_id(data["session_id"]),
            originator=PartyInfo.from_dict(data["originator"]),
            beneficiary=PartyInfo.from_dict(data["beneficiary"]),
            tx=TransactionInfo.from_dict(data["tx"]),
        )
    if kind == AdditionalInfoRecord.type_tag:
        _expect_keys(data, {"type", "session_id", "ref_entry", "reason", "real_name"})
        return AdditionalInfoRecord(
            session_id=_session_id(data["session_id"]),
            ref_entry=Digest.fromhex(data["ref_entry"]),
            reason=ReasonCode(data["reason"]),
            real_name=RealNameInfo.from_dict(data["real_name"]),
        )
    raise ValueError(f"unknown payload type {kind!r}")


def _session_id(value: Any) -> str:
    if not isinstance(value, str) or len(value) != 32 or value != value.lower():
        raise ValueError("session id must be 32 lowercase hex characters")
    bytes.fromhex(value)
    return value


def _expect_keys(data: Mapping[str, Any], keys: set[str]) -> None:
    if set(data) != keys:
        raise ValueError(f"expected keys {sorted(keys)}, got {sorted(data)}")


# --------------------------------------------------------------------------
# entries


@dataclass(frozen=True)
class ProposedEntry:
    channel: ChannelId
    seq: int
    prev_hash: Digest
    payload: EntryPayload
    created_at: datetime
    proposer: str
    proposer_sig: Signature

    def to_dict(self) -> dict[str, Any]:
        d = _signable_dict(
            self.channel, self.seq, self.prev_hash, self.payload, self.created_at, self.proposer
        )
        d["proposer_sig"] = self.proposer_sig.hex()
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ProposedEntry:
        _expect_keys(data, _SIGNABLE_KEYS | {"proposer_sig"})
        return cls(**_common_fields(data), proposer_sig=Signature.fromhex(data["proposer_sig"]))

    def signing_digest(self) -> Digest:
        return _signing_digest(self)


@dataclass(frozen=True)
class LedgerEntry:
    channel: ChannelId
    seq: int
    prev_hash: Digest
    payload: EntryPayload
    created_at: datetime
    proposer: str
    proposer_sig: Signature
    acceptor_sig: Signature
    entry_hash: Digest

    @property
    def acceptor(self) -> str:
        return self.channel.other(self.proposer)

    def hashable_dict(self) -> dict[str, Any]:
        d = _signable_dict(
            self.channel, self.seq, self.prev_hash, self.payload, self.created_at, self.proposer
        )
        d["proposer_sig"] = self.proposer_sig.hex()
        d["acceptor_sig"] = self.acceptor_sig.hex()
        return d

    def to_dict(self) -> dict[str, Any]:
        d = self.hashable_dict()
        d["entry_hash"] = self.entry_hash.hex()
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> LedgerEntry:
        _expect_keys(data, _SIGNABLE_KEYS | {"proposer_sig", "acceptor_sig", "entry_hash"})
        return cls(
            **_common_fields(data),
            proposer_sig=Signature.fromhex(data["proposer_sig"]),
            acceptor_sig=Signature.fromhex(data["acceptor_sig"]),
            entry_hash=Digest.fromhex(data["entry_hash"]),
        )

    def signing_digest(self) -> Digest:
        return _signing_digest(self)

    def computed_hash(self) -> Digest:
        return digest_of(self.hashable_dict())


_SIGNABLE_KEYS = {"channel", "seq", "prev_hash", "payload", "created_at", "proposer"}


def _signable_dict(
    channel: ChannelId,
    seq: int,
    prev_hash: Digest,
    payload: EntryPayload,
    created_at: datetime,
    proposer: str,
) -> dict[str, Any]:
    return {
        "channel": channel.to_list(),
        "seq": seq,
        "prev_hash": prev_hash.hex(),
        "payload": payload.to_dict(),
        "created_at": format_timestamp(created_at),
        "proposer": proposer,
    }


def _signing_digest(e: ProposedEntry | LedgerEntry) -> Digest:
    return digest_of(_signable_dict(e.channel, e.seq, e.prev_hash, e.payload, e.created_at, e.proposer))


def _common_fields(data: Mapping[str, Any]) -> dict[str, Any]:
    channel = data["channel"]
    if not isinstance(channel, list) or len(channel) != 2:
        raise ValueError("channel must be a two-element list")
    seq = data["seq"]
    if not isinstance(seq, int) or isinstance(seq, bool) or seq < 0:
        raise ValueError("seq must be a non-negative integer")
    return {
        "channel": ChannelId(*channel),
        "seq": seq,
        "prev_hash": Digest.fromhex(data["prev_hash"]),
        "payload": payload_from_dict(data["payload"]),
        "created_at": parse_timestamp(data["created_at"]),
        "proposer": check_vasp_id(data["proposer"]),
    }


# --------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class ChainReport:
    ok: bool
    bad_index: int | None = None
    reason: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"ok": self.ok, "bad_index": self.bad_index, "reason": self.reason}


@dataclass(frozen=True)
class DivergenceReport:
    identical: bool
    divergent_seq: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"identical": self.identical, "divergent_seq": self.divergent_seq}


def _entry_problem(e: LedgerEntry, registry: KeyLookup) -> str | None:
    if e.proposer not in e.channel.members:
        return "proposer not in channel"
    if e.computed_hash() != e.entry_hash:
        return "entry hash mismatch"
    proposer_pk = registry.public_key_of(e.proposer)
    acceptor_pk = registry.public_key_of(e.acceptor)
    if proposer_pk is None or acceptor_pk is None:
        return "unknown signer"
    digest = e.signing_digest()
    if not verify(proposer_pk, digest, e.proposer_sig):
        return "bad proposer signature"
    if not verify(acceptor_pk, digest, e.acceptor_sig):
        return "bad acceptor signature"
    return None


def verify_entry(e: LedgerEntry, registry: KeyLookup) -> bool:
    try:
        return _entry_problem(e, registry) is None
    except (CanonicalizationError, KeyFormatError, ValueError):
        return False


def verify_chain(entries: Sequence[LedgerEntry], registry: KeyLookup) -> ChainReport:
    """Check every entry and the seq/prev_hash linkage; report the first failure."""
    prev = ZERO_DIGEST
    travel_rule_hashes: set[bytes] = set()
    channel = entries[0].channel if entries else None
    for i, e in enumerate(entries):
        if e.seq != i:
            return ChainReport(False, i, "seq gap" if e.seq > i else "seq out of order")
        if e.channel != channel:
            return ChainReport(False, i, "channel mismatch")
        if e.prev_hash != prev:
            return ChainReport(False, i, "prev_hash mismatch")
        problem = _entry_problem(e, registry)
        if problem:
            return ChainReport(False, i, problem)
        if isinstance(e.payload, AdditionalInfoRecord):
            if e.payload.ref_entry not in travel_rule_hashes:
                return ChainReport(False, i, "dangling ref_entry")
        else:
            travel_rule_hashes.add(bytes(e.entry_hash))
        prev = e.entry_hash
    return ChainReport(True)


def diff_replicas(a: Sequence[LedgerEntry], b: Sequence[LedgerEntry]) -> DivergenceReport:
    # recomputed hashes, so an edited entry diverges even if its stored entry_hash was kept
    for i, (x, y) in enumerate(zip(a, b)):
        if x.computed_hash() != y.computed_hash():
            return DivergenceReport(False, i)
    if len(a) != len(b):
        return DivergenceReport(False, min(len(a), len(b)))
    return DivergenceReport(True)


# --------------------------------------------------------------------------
# storage


def entry_line(e: LedgerEntry) -> bytes:
    return canonical_bytes(e.to_dict()) + b"\n"


@dataclass
class ParsedFile:
    entries: list[LedgerEntry]
    bad_index: int | None = None
    reason: str | None = None


def parse_ledger_bytes(raw: bytes) -> ParsedFile:
    """Parse a channel file, stopping at the first line that is not a canonical entry."""
    lines = raw.split(b"\n")
    tail = lines.pop()
    entries: list[LedgerEntry] = []
    for i, line in enumerate(lines):
        try:
            data = json.loads(line.decode("utf-8"), parse_float=_reject_float)
            entry = LedgerEntry.from_dict(data)
            if entry_line(entry) != line + b"\n":
                return ParsedFile(entries, i, "non-canonical encoding")
        except (ValueError, KeyError, TypeError, ValidationError, RecursionError) as exc:
            return ParsedFile(entries, i, f"malformed entry: {type(exc).__name__}")
        entries.append(entry)
    if tail:
        return ParsedFile(entries, len(lines), "truncated entry")
    return ParsedFile(entries)


def _reject_float(text: str) -> Any:
    raise ValueError(f"float literal {text!r} not allowed")


def verify_ledger_bytes(
    raw: bytes, registry: KeyLookup, expected_filename: str | None = None
) -> ChainReport:
    parsed = parse_ledger_bytes(raw)
    report = verify_chain(parsed.entries, registry)
    if not report.ok:
        return report
    if parsed.bad_index is not None:
        return ChainReport(False, parsed.bad_index, parsed.reason)
    if expected_filename and parsed.entries:
        if parsed.entries[0].channel.filename != expected_filename:
            return ChainReport(False, 0, "channel does not match file name")
    return report


def verify_ledger_file(path: str | os.PathLike[str], registry: KeyLookup) -> ChainReport:
    path = Path(path)
    return verify_ledger_bytes(path.read_bytes(), registry, expected_filename=path.name)


def diff_ledger_bytes(a: bytes, b: bytes) -> DivergenceReport:
    la, lb = a.split(b"\n"), b.split(b"\n")
    for i, (x, y) in enumerate(zip(la, lb)):
        if x != y:
            return DivergenceReport(False, i)
    if len(la) != len(lb):
        return DivergenceReport(False, min(len(la), len(lb)) - 1)
    return DivergenceReport(True)


@dataclass
class ChannelLedger:
    """One member's replica of a channel. Append is the only mutation."""

    channel: ChannelId
    path: Path | None = None
    _entries: list[LedgerEntry] = field(default_factory=list)

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def head_hash(self) -> Digest:
        return self._entries[-1].entry_hash if self._entries else ZERO_DIGEST

    @property
    def next_seq(self) -> int:
        return len(self._entries)

    def find(self, entry_hash: bytes) -> LedgerEntry | None:
        return next((e for e in self._entries if e.entry_hash == entry_hash), None)

    def _check_payload(self, payload: EntryPayload) -> None:
        if isinstance(payload, AdditionalInfoRecord):
            ref = self.find(payload.ref_entry)
            if ref is None or not isinstance(ref.payload, TravelRuleRecord):
                raise LedgerError("ref_entry is not a travel rule entry in this channel")

    def propose(
        self, payload: EntryPayload, proposer: str, key: KeyPair, created_at: datetime
    ) -> ProposedEntry:
        if proposer not in self.channel.members:
            raise LedgerError(f"proposer {proposer} not in channel {self.channel}")
        self._check_payload(payload)
        unsigned = dict(
            channel=self.channel,
            seq=self.next_seq,
            prev_hash=self.head_hash,
            payload=payload,
            created_at=created_at,
            proposer=proposer,
        )
        sig = key.sign(digest_of(_signable_dict(**unsigned)))
        return ProposedEntry(**unsigned, proposer_sig=sig)

    def countersign(
        self,
        p: ProposedEntry,
        acceptor: str,
        key: KeyPair,
        registry: KeyLookup,
        now: datetime | None = None,
    ) -> LedgerEntry:
        """Accept a peer's proposal: check it, sign it, append it, return the entry."""
        if p.channel != self.channel:
            raise LedgerError("proposal for a different channel")
        if acceptor not in self.channel.members or p.proposer not in self.channel.members:
            raise LedgerError("acceptor not in channel")
        if acceptor == p.proposer:
            raise LedgerError("acceptor must be the other channel member")
        proposer_pk = registry.public_key_of(p.proposer)
        if proposer_pk is None or not verify(proposer_pk, p.signing_digest(), p.proposer_sig):
            raise LedgerError("bad signature")
        if p.seq != self.next_seq or p.prev_hash != self.head_hash:
            raise LedgerError(f"stale: proposal seq {p.seq}, local next seq {self.next_seq}")
        if now is not None and abs(p.created_at - now) > MAX_CLOCK_SKEW:
            raise LedgerError("created_at outside the allowed clock skew")
        self._check_payload(p.payload)
        entry = _finalize(p, key.sign(p.signing_digest()))
        self.append(entry, registry)
        return entry

    def finalize(self, p: ProposedEntry, acceptor_sig: Signature, registry: KeyLookup) -> LedgerEntry:
        """Proposer side: attach the peer's countersignature and append."""
        entry = _finalize(p, acceptor_sig)
        self.append(entry, registry)
        return entry

    def append(self, entry: LedgerEntry, registry: KeyLookup) -> None:
        if entry.channel != self.channel:
            raise LedgerError("entry for a different channel")
        if entry.seq != self.next_seq or entry.prev_hash != self.head_hash:
            raise LedgerError("stale: entry does not extend the local head")
        problem = _entry_problem(entry, registry)
        if problem:
            raise LedgerError(problem)
        self._check_payload(entry.payload)
        if self.path is not None:
            with open(self.path, "ab") as fh:
                fh.write(entry_line(entry))
                fh.flush()
                os.fsync(fh.fileno())
        self._entries.append(entry)
        log.debug("appended %s seq=%d", self.channel, entry.seq)

    @classmethod
    def open(cls, path: Path, registry: KeyLookup) -> ChannelLedger:
        """Load and fully verify a replica file; refuses corrupt files."""
        report = verify_ledger_file(path, registry)
        if not report.ok:
            raise LedgerError(f"{path.name}: bad index {report.bad_index}: {report.reason}")
        entries = parse_ledger_bytes(path.read_bytes()).entries
        stem = path.name[: -len(".jsonl")]
        a, _, b = stem.partition("__")
        return cls(ChannelId(a, b), path, entries)


def _finalize(p: ProposedEntry, acceptor_sig: Signature) -> LedgerEntry:
    fields = dict(
        channel=p.channel,
        seq=p.seq,
        prev_hash=p.prev_hash,
        payload=p.payload,
        created_at=p.created_at,
        proposer=p.proposer,
        proposer_sig=p.proposer_sig,
        acceptor_sig=Signature(acceptor_sig),
    )
    hashable = LedgerEntry(**fields, entry_hash=ZERO_DIGEST).hashable_dict()
    return LedgerEntry(**fields, entry_hash=sha256(canonical_bytes(hashable)))


class LedgerStore:
    """All channel replicas held by one node, optionally backed by ``<root>/channels``."""

    def __init__(self, owner: str, root: str | os.PathLike[str] | None, registry: KeyLookup):
        self.owner = owner
        self.dir = Path(root) / "channels" if root is not None else None
        self._channels: dict[ChannelId, ChannelLedger] = {}
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            for path in sorted(self.dir.glob("*.jsonl")):
                ledger = ChannelLedger.open(path, registry)
                self._channels[ledger.channel] = ledger

    def channel(self, peer: str) -> ChannelLedger:
        cid = ChannelId.of(self.owner, peer)
        if cid not in self._channels:
            path = self.dir / cid.filename if self.dir is not None else None
            self._channels[cid] = ChannelLedger(cid, path)
        return self._channels[cid]

    def channels(self) -> list[ChannelLedger]:
        return [self._channels[c] for c in sorted(self._channels)]

    def find(self, entry_hash: bytes) -> tuple[ChannelLedger, LedgerEntry] | None:
        for ledger in self.channels():
            e = ledger.find(entry_hash)
            if e is not None:
                return ledger, e
        return None
