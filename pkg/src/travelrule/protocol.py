"""The two-step travel rule exchange between an originator and a beneficiary VASP.

Step 1 (per transfer)::

    originator VASP                      beneficiary VASP
    TRANSFER_INIT (originator PII) --->  check originator
                                   <---  BENEFICIARY_INFO  | TRANSFER_REJECT
    remit on mock chain
    TX_INFO                        --->  confirm transaction
                                   <---  TX_CONFIRM (NORMAL | ABNORMAL)
    LEDGER_PROPOSE                 --->  countersign + append
                                   <---  LEDGER_ACCEPT
    append

Step 2 (after a finalized Step 1 record, asked by the beneficiary side)::

    beneficiary VASP                     originator VASP
    ADDINFO_REQUEST                --->  backend lookup
                                   <---  ADDINFO_RESPONSE + LEDGER_PROPOSE | ADDINFO_DENY
    LEDGER_ACCEPT                  --->  append

:class:`ProtocolEngine` is transport-agnostic: it consumes verified
:class:`Message` objects and returns the messages to send.
"""

from __future__ import annotations

import enum
import json
import logging
import secrets
from collections import deque
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from decimal import Decimal
from typing import TYPE_CHECKING, Any

from travelrule.crypto import (
    Digest,
    KeyFormatError,
    KeyPair,
    Signature,
    canonical_bytes,
    digest_of,
    verify,
)
from travelrule.datamodel import (
    PartyInfo,
    RealNameInfo,
    ReasonCode,
    TransactionInfo,
    ValidationError,
    VirtualAssetAddress,
    check_vasp_id,
    decimal_violations,
    format_timestamp,
    normalize_name,
    parse_timestamp,
    validate_party_info,
)
from travelrule.ledger import (
    AdditionalInfoRecord,
    ChannelId,
    EntryPayload,
    LedgerError,
    LedgerStore,
    ProposedEntry,
    TravelRuleRecord,
)
from travelrule.membership import Registry, verify_credential

if TYPE_CHECKING:
    from travelrule.node import BackendAdapter, MockChain

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT = timedelta(seconds=30)


class ProtocolError(Exception):
    pass


class MsgType(str, enum.Enum):
    TRANSFER_INIT = "TRANSFER_INIT"
    TRANSFER_REJECT = "TRANSFER_REJECT"
    BENEFICIARY_INFO = "BENEFICIARY_INFO"
    TX_INFO = "TX_INFO"
    TX_CONFIRM = "TX_CONFIRM"
    LEDGER_PROPOSE = "LEDGER_PROPOSE"
    LEDGER_ACCEPT = "LEDGER_ACCEPT"
    ADDINFO_REQUEST = "ADDINFO_REQUEST"
    ADDINFO_RESPONSE = "ADDINFO_RESPONSE"
    ADDINFO_DENY = "ADDINFO_DENY"
    SESSION_ABORT = "SESSION_ABORT"


SESSION_OPENERS = frozenset({MsgType.TRANSFER_INIT, MsgType.ADDINFO_REQUEST})


class Role(str, enum.Enum):
    ORIGINATOR_VASP = "ORIGINATOR_VASP"
    BENEFICIARY_VASP = "BENEFICIARY_VASP"


class State(str, enum.Enum):
    # originator side
    INIT = "INIT"
    AWAIT_BENEFICIARY_INFO = "AWAIT_BENEFICIARY_INFO"
    REMITTING = "REMITTING"
    AWAIT_TX_CONFIRM = "AWAIT_TX_CONFIRM"
    AWAIT_LEDGER_ACCEPT = "AWAIT_LEDGER_ACCEPT"
    # beneficiary side
    AWAIT_INIT = "AWAIT_INIT"
    CHECKING_ORIGINATOR = "CHECKING_ORIGINATOR"
    AWAIT_TX_INFO = "AWAIT_TX_INFO"
    CHECKING_TX = "CHECKING_TX"
    AWAIT_LEDGER_PROPOSE = "AWAIT_LEDGER_PROPOSE"
    # step 2 requester
    AWAIT_ADDINFO_RESPONSE = "AWAIT_ADDINFO_RESPONSE"
    # terminal
    COMPLETE = "COMPLETE"
    REJECTED = "REJECTED"
    ABORTED = "ABORTED"
    TIMED_OUT = "TIMED_OUT"

    @property
    def terminal(self) -> bool:
        return self in TERMINAL_STATES


TERMINAL_STATES = frozenset({State.COMPLETE, State.REJECTED, State.ABORTED, State.TIMED_OUT})


# --------------------------------------------------------------------------
# messages


def new_session_id() -> str:
    return secrets.token_hex(16)


def _check_session_id(value: Any) -> str:
    if not isinstance(value, str) or len(value) != 32 or value != value.lower():
        raise ValueError("session id must be 32 lowercase hex characters")
    bytes.fromhex(value)
    return value


@dataclass(frozen=True)
class Message:
    msg_type: MsgType
    session_id: str
    sender: str
    recipient: str
    sent_at: datetime
    body: dict[str, Any]
    sender_sig: Signature | None = None
    version: int = PROTOCOL_VERSION

    def __post_init__(self) -> None:
        object.__setattr__(self, "msg_type", MsgType(self.msg_type))
        # body is held in canonical JSON-native form so equality matches the wire
        object.__setattr__(self, "body", json.loads(canonical_bytes(self.body)))

    def unsigned_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "msg_type": self.msg_type.value,
            "session_id": self.session_id,
            "sender": self.sender,
            "recipient": self.recipient,
            "sent_at": format_timestamp(self.sent_at),
            "body": self.body,
        }

    def to_dict(self) -> dict[str, Any]:
        d = self.unsigned_dict()
        d["sender_sig"] = self.sender_sig.hex() if self.sender_sig is not None else None
        return d

    def signing_digest(self) -> Digest:
        return digest_of(self.unsigned_dict())

    def signed(self, key: KeyPair) -> Message:
        return Message(
            msg_type=self.msg_type,
            session_id=self.session_id,
            sender=self.sender,
            recipient=self.recipient,
            sent_at=self.sent_at,
            body=self.body,
            sender_sig=key.sign(self.signing_digest()),
            version=self.version,
        )

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Message:
        expected = {"version", "msg_type", "session_id", "sender", "recipient", "sent_at", "body", "sender_sig"}
        if not isinstance(data, Mapping) or set(data) != expected:
            raise ValueError("message fields do not match the envelope schema")
        if data["version"] != PROTOCOL_VERSION or isinstance(data["version"], bool):
            raise ValueError(f"unsupported version {data['version']!r}")
        if not isinstance(data["body"], dict):
            raise ValueError("body must be an object")
        return cls(
            version=PROTOCOL_VERSION,
            msg_type=MsgType(data["msg_type"]),
            session_id=_check_session_id(data["session_id"]),
            sender=check_vasp_id(data["sender"]),
            recipient=check_vasp_id(data["recipient"]),
            sent_at=parse_timestamp(data["sent_at"]),
            body=data["body"],
            sender_sig=Signature.fromhex(data["sender_sig"]),
        )


def verify_message(m: Message, registry: Registry, now: datetime) -> str | None:
    """Return why ``m`` must be dropped, or None if sender and signature check out."""
    cred = registry.credential(m.sender)
    if cred is None:
        return "unregistered sender"
    if not verify_credential(cred, registry, now):
        return "sender credential not valid"
    if m.sender_sig is None:
        return "unsigned message"
    try:
        ok = verify(cred.public_key, m.signing_digest(), m.sender_sig)
    except KeyFormatError:
        ok = False
    return None if ok else "bad signature"


# --------------------------------------------------------------------------
# policy


@dataclass(frozen=True)
class Verdict:
    normal: bool
    reason: str | None = None

    @property
    def status(self) -> str:
        return "NORMAL" if self.normal else "ABNORMAL"


NORMAL = Verdict(True)


def _denylist_key(name: str) -> str:
    return normalize_name(name).casefold()


class DefaultPolicy:
    """Denylist screening of originators and mock-chain confirmation of transactions."""

    def __init__(self, denylist: Iterable[str] = (), chain: MockChain | None = None):
        self.denylist = {_denylist_key(n) for n in denylist}
        self.chain = chain

    def check_originator(self, originator: PartyInfo | Mapping[str, Any]) -> Verdict:
        violations = validate_party_info(originator)
        if violations:
            return Verdict(False, f"invalid originator: {violations[0].message}")
        name = originator.name if isinstance(originator, PartyInfo) else originator["name"]
        if _denylist_key(name) in self.denylist:
            return Verdict(False, "denylisted")
        return NORMAL

    def confirm_transaction(self, tx: TransactionInfo, session: TransferSession) -> Verdict:
        if self.chain is None:
            return Verdict(False, "no chain to confirm against")
        recorded = self.chain.get_tx(tx.tx_id)
        if recorded is None:
            return Verdict(False, "tx not found")
        expected_to = session.beneficiary.address if session.beneficiary else session.beneficiary_address
        checks = [
            ("asset mismatch", tx.asset, recorded.asset, session.asset),
            ("originator address mismatch", tx.originator_address, recorded.originator_address,
             session.originator.address if session.originator else None),
            ("beneficiary address mismatch", tx.beneficiary_address, recorded.beneficiary_address,
             expected_to),
        ]
        for reason, claimed, on_chain, agreed in checks:
            if not claimed == on_chain == agreed:
                return Verdict(False, reason)
        if not Decimal(tx.amount) == Decimal(recorded.amount) == Decimal(session.amount):
            return Verdict(False, "amount mismatch")
        if tx.executed_at != recorded.executed_at:
            return Verdict(False, "execution time mismatch")
        return NORMAL


def check_originator_info(policy: DefaultPolicy, originator: PartyInfo | Mapping[str, Any]) -> Verdict:
    return policy.check_originator(originator)


def confirm_transaction(policy: DefaultPolicy, tx: TransactionInfo, session: TransferSession) -> Verdict:
    if session.state is not State.CHECKING_TX:
        raise ProtocolError(f"confirm_transaction in state {session.state.value}")
    return policy.confirm_transaction(tx, session)


# --------------------------------------------------------------------------
# sessions


@dataclass
class TransferSession:
    session_id: str
    role: Role
    peer: str
    state: State
    deadline: datetime
    step: int = 1
    reason: str | None = None
    # step 1 data
    originator: PartyInfo | None = None
    beneficiary_address: VirtualAssetAddress | None = None
    asset: str | None = None
    amount: str | None = None
    beneficiary: PartyInfo | None = None
    tx: TransactionInfo | None = None
    # step 2 data
    ref_entry: Digest | None = None
    request_reason: ReasonCode | None = None
    real_name: RealNameInfo | None = None
    # ledger
    proposed: ProposedEntry | None = None
    entry_hash: Digest | None = None
    seen: set[tuple[str, int]] = field(default_factory=set)
    last_proposal_seq: int = -1

    @property
    def terminal(self) -> bool:
        return self.state.terminal

    def status(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "role": self.role.value,
            "step": self.step,
            "peer": self.peer,
            "state": self.state.value,
            "reason": self.reason,
            "entry_hash": self.entry_hash.hex() if self.entry_hash else None,
        }


@dataclass(frozen=True)
class Outbound:
    to: str
    message: Message


@dataclass
class HandleResult:
    outbound: list[Outbound] = field(default_factory=list)
    transitions: list[tuple[str, str, str]] = field(default_factory=list)
    effects: list[dict[str, Any]] = field(default_factory=list)
    dropped: str | None = None

    def extend(self, other: HandleResult) -> None:
        self.outbound += other.outbound
        self.transitions += other.transitions
        self.effects += other.effects


# --------------------------------------------------------------------------
# engine


Handler = Callable[[TransferSession, Message, HandleResult], None]


class ProtocolEngine:
    """Per-VASP protocol state: sessions, replay tracking and ledger proposals.

    At most one proposal per channel is in flight. When both members propose
    the same sequence number at once, the proposal from the lexicographically
    smaller VASP id wins; the other side countersigns it and re-proposes its
    own record on top.
    """

    def __init__(
        self,
        vasp_id: str,
        key: KeyPair,
        registry: Registry,
        ledgers: LedgerStore,
        backend: BackendAdapter,
        chain: MockChain,
        routes: Mapping[tuple[str, str], str],
        policy: DefaultPolicy | None = None,
        clock: Callable[[], datetime] | None = None,
        timeout: timedelta = DEFAULT_TIMEOUT,
        session_ids: Callable[[], str] = new_session_id,
        on_event: Callable[[dict[str, Any]], None] | None = None,
    ):
        self.vasp_id = check_vasp_id(vasp_id)
        self.key = key
        self.registry = registry
        self.ledgers = ledgers
        self.backend = backend
        self.chain = chain
        self.routes = dict(routes)
        self.policy = policy or DefaultPolicy(chain=chain)
        self.clock = clock or (lambda: datetime.now(timezone.utc))
        self.timeout = timeout
        self.session_ids = session_ids
        self.on_event = on_event or (lambda event: None)
        self.sessions: dict[str, TransferSession] = {}
        self._pending: dict[ChannelId, str] = {}
        self._queues: dict[ChannelId, deque[str]] = {}
        self._handlers: dict[tuple[Role, State, MsgType], Handler] = {
            (Role.BENEFICIARY_VASP, State.AWAIT_INIT, MsgType.TRANSFER_INIT): self._on_transfer_init,
            (Role.ORIGINATOR_VASP, State.AWAIT_BENEFICIARY_INFO, MsgType.BENEFICIARY_INFO): self._on_beneficiary_info,
            (Role.ORIGINATOR_VASP, State.AWAIT_BENEFICIARY_INFO, MsgType.TRANSFER_REJECT): self._on_transfer_reject,
            (Role.BENEFICIARY_VASP, State.AWAIT_TX_INFO, MsgType.TX_INFO): self._on_tx_info,
            (Role.ORIGINATOR_VASP, State.AWAIT_TX_CONFIRM, MsgType.TX_CONFIRM): self._on_tx_confirm,
            (Role.BENEFICIARY_VASP, State.AWAIT_LEDGER_PROPOSE, MsgType.LEDGER_PROPOSE): self._on_ledger_propose,
            (Role.ORIGINATOR_VASP, State.AWAIT_LEDGER_ACCEPT, MsgType.LEDGER_ACCEPT): self._on_ledger_accept,
            (Role.ORIGINATOR_VASP, State.AWAIT_INIT, MsgType.ADDINFO_REQUEST): self._on_addinfo_request,
            (Role.BENEFICIARY_VASP, State.AWAIT_ADDINFO_RESPONSE, MsgType.ADDINFO_RESPONSE): self._on_addinfo_response,
            (Role.BENEFICIARY_VASP, State.AWAIT_ADDINFO_RESPONSE, MsgType.ADDINFO_DENY): self._on_addinfo_deny,
        }

    @property
    def expected_pairs(self) -> frozenset[tuple[Role, State, MsgType]]:
        return frozenset(self._handlers)

    # -- helpers -----------------------------------------------------------

    def _emit(self, res: HandleResult, s: TransferSession, msg_type: MsgType, body: dict[str, Any]) -> None:
        m = Message(
            msg_type=msg_type,
            session_id=s.session_id,
            sender=self.vasp_id,
            recipient=s.peer,
            sent_at=self.clock(),
            body=body,
        ).signed(self.key)
        res.outbound.append(Outbound(s.peer, m))

    def _event(self, res: HandleResult, **event: Any) -> None:
        event = {"vasp": self.vasp_id, **event}
        res.effects.append(event)
        self.on_event(event)

    def _move(self, res: HandleResult, s: TransferSession, state: State, reason: str | None = None) -> None:
        old = s.state
        s.state = state
        if reason is not None:
            s.reason = reason
        if not state.terminal:
            s.deadline = self.clock() + self.timeout
        res.transitions.append((s.session_id, old.value, state.value))
        self.on_event(
            {"vasp": self.vasp_id, "event": "transition", "session": s.session_id,
             "from": old.value, "to": state.value, "reason": reason}
        )
        log.info("%s session %s: %s -> %s", self.vasp_id, s.session_id[:8], old.value, state.value)
        if state.terminal:
            self._release(s, res)

    def _release(self, s: TransferSession, res: HandleResult) -> None:
        cid = ChannelId.of(self.vasp_id, s.peer)
        queue = self._queues.get(cid)
        if queue and s.session_id in queue:
            queue.remove(s.session_id)
        if self._pending.get(cid) == s.session_id:
            del self._pending[cid]
            s.proposed = None
            self._pump(cid, res)

    def _abort(self, res: HandleResult, s: TransferSession, reason: str, notify: bool = True) -> None:
        if s.terminal:
            return
        self._move(res, s, State.ABORTED, reason)
        if notify:
            self._emit(res, s, MsgType.SESSION_ABORT, {"reason": reason})

    def _new_session(self, session_id: str, role: Role, peer: str, state: State, step: int = 1) -> TransferSession:
        s = TransferSession(
            session_id=session_id,
            role=role,
            peer=peer,
            state=state,
            step=step,
            deadline=self.clock() + self.timeout,
        )
        self.sessions[session_id] = s
        return s

    def _fresh_session_id(self) -> str:
        while True:
            sid = self.session_ids()
            if sid not in self.sessions:
                return sid

    def route(self, address: VirtualAssetAddress) -> str | None:
        return self.routes.get((address.asset, address.address))

    def get_session(self, session_id: str) -> TransferSession:
        try:
            return self.sessions[session_id]
        except KeyError:
            raise ProtocolError(f"unknown session {session_id}") from None

    # -- step 1: originator entry point ------------------------------------

    def initiate_transfer(
        self,
        originator: PartyInfo | Mapping[str, Any],
        beneficiary_address: VirtualAssetAddress,
        asset: str,
        amount: str,
    ) -> tuple[TransferSession, Outbound]:
        violations = validate_party_info(originator)
        if violations:
            raise ProtocolError(f"invalid originator info: {violations[0]}")
        if not isinstance(originator, PartyInfo):
            originator = PartyInfo.from_dict(originator)
        bad_amount = decimal_violations(amount)
        if bad_amount:
            raise ProtocolError(f"invalid amount: {bad_amount[0].message}")
        if beneficiary_address.asset != asset or originator.address.asset != asset:
            raise ProtocolError("address asset differs from transfer asset")
        peer = self.route(beneficiary_address)
        if peer is None or peer == self.vasp_id:
            raise ProtocolError("no route to beneficiary VASP")
        if not self.registry.is_authorized(peer, self.clock()):
            raise ProtocolError(f"beneficiary VASP {peer} is not an authorized member")

        res = HandleResult()
        s = self._new_session(self._fresh_session_id(), Role.ORIGINATOR_VASP, peer, State.INIT)
        s.originator = originator
        s.beneficiary_address = beneficiary_address
        s.asset = asset
        s.amount = amount
        self._emit(res, s, MsgType.TRANSFER_INIT, {
            "originator": originator.to_dict(),
            "beneficiary_address": beneficiary_address.to_dict(),
            "asset": asset,
            "amount": amount,
        })
        self._move(res, s, State.AWAIT_BENEFICIARY_INFO)
        return s, res.outbound[0]

    # -- step 2: beneficiary entry point -----------------------------------

    def request_additional_info(self, ref_entry: bytes, reason: ReasonCode) -> tuple[TransferSession, Outbound]:
        reason = ReasonCode(reason)
        found = self.ledgers.find(ref_entry)
        if found is None:
            raise ProtocolError("unknown entry")
        _, entry = found
        if not isinstance(entry.payload, TravelRuleRecord):
            raise ProtocolError("entry is not a travel rule record")
        if entry.proposer == self.vasp_id:
            raise ProtocolError("role: only the beneficiary VASP may request additional info")
        res = HandleResult()
        s = self._new_session(
            self._fresh_session_id(), Role.BENEFICIARY_VASP, entry.proposer, State.INIT, step=2
        )
        s.ref_entry = entry.entry_hash
        s.request_reason = reason
        self._emit(res, s, MsgType.ADDINFO_REQUEST, {"ref_entry": entry.entry_hash.hex(), "reason": reason.value})
        self._move(res, s, State.AWAIT_ADDINFO_RESPONSE)
        return s, res.outbound[0]

    def additional_info(self, session_id: str) -> RealNameInfo | None:
        s = self.get_session(session_id)
        if s.step != 2 or s.role is not Role.BENEFICIARY_VASP or s.state is not State.COMPLETE:
            return None
        return s.real_name

    # -- inbound -------------------------------------------------------------

    def handle_message(self, m: Message) -> HandleResult:
        res = HandleResult()
        now = self.clock()
        if m.recipient != self.vasp_id:
            return self._drop(res, m, "not addressed to this node")
        if m.sender == self.vasp_id:
            return self._drop(res, m, "message from self")
        problem = verify_message(m, self.registry, now)
        if problem:
            return self._drop(res, m, problem)

        if m.msg_type in SESSION_OPENERS:
            if m.session_id in self.sessions:
                # first wins; a repeated opener never disturbs the live session
                return self._drop(res, m, "duplicate session id")
            if m.msg_type is MsgType.TRANSFER_INIT:
                s = self._new_session(m.session_id, Role.BENEFICIARY_VASP, m.sender, State.AWAIT_INIT)
            else:
                s = self._new_session(m.session_id, Role.ORIGINATOR_VASP, m.sender, State.AWAIT_INIT, step=2)
            self._event(res, event="session_opened", session=s.session_id, peer=m.sender)
        else:
            s = self.sessions.get(m.session_id)
            if s is None:
                return self._drop(res, m, "unknown session")
            if m.sender != s.peer:
                return self._drop(res, m, "sender is not the session peer")
        if s.terminal:
            return self._drop(res, m, "session is terminal")

        replay_key = self._replay_key(s, m)
        if replay_key is None:
            self._abort(res, s, f"replayed {m.msg_type.value}")
            return res
        s.seen.add(replay_key)

        if m.msg_type is MsgType.SESSION_ABORT:
            reason = m.body.get("reason")
            self._move(res, s, State.ABORTED, f"peer aborted: {reason}" if isinstance(reason, str) else "peer aborted")
            return res

        handler = self._handlers.get((s.role, s.state, m.msg_type))
        if handler is None:
            self._abort(res, s, f"unexpected {m.msg_type.value} in {s.state.value}")
            return res
        try:
            handler(s, m, res)
        except (ValidationError, ValueError, KeyError, TypeError, LedgerError, ProtocolError) as exc:
            detail = str(exc) if isinstance(exc, (LedgerError, ProtocolError)) else type(exc).__name__
            self._abort(res, s, f"rejected {m.msg_type.value}: {detail}")
        return res

    def _drop(self, res: HandleResult, m: Message, reason: str) -> HandleResult:
        res.dropped = reason
        log.warning("%s dropped %s from %s: %s", self.vasp_id, m.msg_type.value, m.sender, reason)
        self._event(res, event="dropped", msg_type=m.msg_type.value, session=m.session_id,
                    sender=m.sender, reason=reason)
        return res

    def _replay_key(self, s: TransferSession, m: Message) -> tuple[str, int] | None:
        """Key for replay tracking, or None if ``m`` repeats an earlier message."""
        if m.msg_type is MsgType.LEDGER_PROPOSE:
            proposed = m.body.get("proposed")
            seq = proposed.get("seq") if isinstance(proposed, dict) else None
            if not isinstance(seq, int) or isinstance(seq, bool):
                seq = s.last_proposal_seq + 1
            # a re-proposal after yielding carries a strictly larger seq
            if seq <= s.last_proposal_seq:
                return None
            s.last_proposal_seq = seq
            return (m.msg_type.value, seq)
        key = (m.msg_type.value, 0)
        return None if key in s.seen else key

    # -- step 1 handlers ---------------------------------------------------

    def _on_transfer_init(self, s: TransferSession, m: Message, res: HandleResult) -> None:
        body = m.body
        self._move(res, s, State.CHECKING_ORIGINATOR)
        verdict = check_originator_info(self.policy, body.get("originator"))
        self._event(res, event="check_originator", session=s.session_id, result=verdict.status)
        if not verdict.normal:
            self._emit(res, s, MsgType.TRANSFER_REJECT, {"reason": verdict.reason})
            self._move(res, s, State.REJECTED, verdict.reason)
            return
        try:
            originator = PartyInfo.from_dict(body["originator"])
            address = VirtualAssetAddress.from_dict(body["beneficiary_address"])
            asset, amount = body["asset"], body["amount"]
            problems = decimal_violations(amount)
            if problems or address.asset != asset or originator.address.asset != asset:
                raise ValueError("inconsistent transfer request")
        except (ValidationError, ValueError, KeyError, TypeError):
            self._emit(res, s, MsgType.TRANSFER_REJECT, {"reason": "invalid transfer request"})
            self._move(res, s, State.REJECTED, "invalid transfer request")
            return
        customer = self.backend.lookup_customer_by_address(address)
        self._event(res, event="backend_lookup", session=s.session_id, found=customer is not None)
        if customer is None:
            self._emit(res, s, MsgType.TRANSFER_REJECT, {"reason": "unknown beneficiary"})
            self._move(res, s, State.REJECTED, "unknown beneficiary")
            return
        s.originator, s.beneficiary_address, s.asset, s.amount = originator, address, asset, amount
        s.beneficiary = customer.party_info(address)
        self._emit(res, s, MsgType.BENEFICIARY_INFO, {"beneficiary": s.beneficiary.to_dict()})
        self._move(res, s, State.AWAIT_TX_INFO)

    def _on_transfer_reject(self, s: TransferSession, m: Message, res: HandleResult) -> None:
        reason = m.body.get("reason")
        self._move(res, s, State.REJECTED, reason if isinstance(reason, str) else "rejected")

    def _on_beneficiary_info(self, s: TransferSession, m: Message, res: HandleResult) -> None:
        beneficiary = PartyInfo.from_dict(m.body["beneficiary"])
        if beneficiary.address != s.beneficiary_address:
            raise ProtocolError("beneficiary address differs from the requested one")
        s.beneficiary = beneficiary
        self._move(res, s, State.REMITTING)
        s.tx = self.chain.execute_transfer(
            s.originator.address, s.beneficiary_address, s.asset, s.amount, self.clock()
        )
        self._event(res, event="remitted", session=s.session_id, tx_id=s.tx.tx_id)
        self._emit(res, s, MsgType.TX_INFO, {"tx": s.tx.to_dict()})
        self._move(res, s, State.AWAIT_TX_CONFIRM)

    def _on_tx_info(self, s: TransferSession, m: Message, res: HandleResult) -> None:
        self._move(res, s, State.CHECKING_TX)
        try:
            tx = TransactionInfo.from_dict(m.body["tx"])
        except (ValidationError, ValueError, KeyError, TypeError):
            tx, verdict = None, Verdict(False, "invalid transaction")
        else:
            verdict = confirm_transaction(self.policy, tx, s)
        self._event(res, event="confirm_transaction", session=s.session_id, result=verdict.status,
                    reason=verdict.reason)
        body: dict[str, Any] = {"status": verdict.status}
        if verdict.reason:
            body["reason"] = verdict.reason
        self._emit(res, s, MsgType.TX_CONFIRM, body)
        if verdict.normal:
            s.tx = tx
            self._move(res, s, State.AWAIT_LEDGER_PROPOSE)
        else:
            self._move(res, s, State.REJECTED, verdict.reason)

    def _on_tx_confirm(self, s: TransferSession, m: Message, res: HandleResult) -> None:
        status = m.body.get("status")
        if status == "NORMAL":
            self._move(res, s, State.AWAIT_LEDGER_ACCEPT)
            self._enqueue(s, res)
        elif status == "ABNORMAL":
            reason = m.body.get("reason")
            self._move(res, s, State.REJECTED, reason if isinstance(reason, str) else "transaction abnormal")
        else:
            raise ProtocolError("TX_CONFIRM status must be NORMAL or ABNORMAL")

    # -- step 2 handlers ---------------------------------------------------

    def _on_addinfo_request(self, s: TransferSession, m: Message, res: HandleResult) -> None:
        ref = Digest.fromhex(m.body["ref_entry"])
        reason = ReasonCode(m.body["reason"])
        s.ref_entry, s.request_reason = ref, reason
        entry = self.ledgers.channel(s.peer).find(ref)
        if entry is None or not isinstance(entry.payload, TravelRuleRecord):
            return self._deny(res, s, "unknown record")
        if entry.proposer != self.vasp_id:
            return self._deny(res, s, "role")
        customer = self.backend.lookup_customer_by_address(entry.payload.originator.address)
        real_name = None
        if customer is not None:
            try:
                real_name = self.backend.get_real_name(customer.customer_id)
            except KeyError:
                real_name = None
        self._event(res, event="backend_lookup", session=s.session_id, found=real_name is not None)
        if real_name is None:
            return self._deny(res, s, "unavailable")
        s.real_name = real_name
        self._emit(res, s, MsgType.ADDINFO_RESPONSE, {"real_name": real_name.to_dict()})
        self._move(res, s, State.AWAIT_LEDGER_ACCEPT)
        self._enqueue(s, res)

    def handle_additional_info_request(self, m: Message) -> HandleResult:
        if m.msg_type is not MsgType.ADDINFO_REQUEST:
            raise ProtocolError("not an ADDINFO_REQUEST")
        return self.handle_message(m)

    def _deny(self, res: HandleResult, s: TransferSession, reason: str) -> None:
        self._emit(res, s, MsgType.ADDINFO_DENY, {"reason": reason})
        self._move(res, s, State.REJECTED, reason)

    def _on_addinfo_response(self, s: TransferSession, m: Message, res: HandleResult) -> None:
        s.real_name = RealNameInfo.from_dict(m.body["real_name"])
        self._move(res, s, State.AWAIT_LEDGER_PROPOSE)

    def _on_addinfo_deny(self, s: TransferSession, m: Message, res: HandleResult) -> None:
        reason = m.body.get("reason")
        self._move(res, s, State.REJECTED, reason if isinstance(reason, str) else "denied")

    # -- ledger finalization -------------------------------------------------

    def expected_payload(self, s: TransferSession) -> EntryPayload:
        """The record a session's exchanged data must produce, built from the transcript."""
        if s.step == 1:
            if not (s.originator and s.beneficiary and s.tx):
                raise ProtocolError("session has not exchanged all step 1 data")
            return TravelRuleRecord(s.session_id, s.originator, s.beneficiary, s.tx)
        if not (s.ref_entry and s.request_reason and s.real_name):
            raise ProtocolError("session has not exchanged all step 2 data")
        return AdditionalInfoRecord(s.session_id, s.ref_entry, s.request_reason, s.real_name)

    def _enqueue(self, s: TransferSession, res: HandleResult) -> None:
        cid = ChannelId.of(self.vasp_id, s.peer)
        self._queues.setdefault(cid, deque()).append(s.session_id)
        self._pump(cid, res)

    def _pump(self, cid: ChannelId, res: HandleResult) -> None:
        queue = self._queues.get(cid)
        while queue and cid not in self._pending:
            s = self.sessions[queue.popleft()]
            if s.terminal:
                continue
            ledger = self.ledgers.channel(s.peer)
            try:
                p = ledger.propose(self.expected_payload(s), self.vasp_id, self.key, self.clock())
            except (LedgerError, ProtocolError) as exc:
                self._abort(res, s, f"cannot propose: {exc}")
                continue
            self._pending[cid] = s.session_id
            s.proposed = p
            s.deadline = self.clock() + self.timeout
            self._event(res, event="proposed", session=s.session_id, channel=str(cid), seq=p.seq)
            self._emit(res, s, MsgType.LEDGER_PROPOSE, {"proposed": p.to_dict()})

    def _on_ledger_propose(self, s: TransferSession, m: Message, res: HandleResult) -> None:
        p = ProposedEntry.from_dict(m.body["proposed"])
        cid = ChannelId.of(self.vasp_id, s.peer)
        if p.proposer != s.peer or p.channel != cid:
            raise ProtocolError("proposal from the wrong party or channel")
        if canonical_bytes(p.payload) != canonical_bytes(self.expected_payload(s)):
            raise ProtocolError("proposal does not match exchanged data")

        own_sid = self._pending.get(cid)
        if own_sid is not None:
            own = self.sessions[own_sid].proposed
            if own is not None and own.seq == p.seq:
                if self.vasp_id < p.proposer:
                    res.dropped = "conflicting proposal; own proposal takes precedence"
                    self._event(res, event="proposal_conflict", session=s.session_id, kept="own", seq=p.seq)
                    return
                self._yield(cid, res)

        entry = self.ledgers.channel(s.peer).countersign(p, self.vasp_id, self.key, self.registry, self.clock())
        s.entry_hash = entry.entry_hash
        self._event(res, event="appended", session=s.session_id, channel=str(cid), seq=entry.seq,
                    entry_hash=entry.entry_hash.hex())
        self._emit(res, s, MsgType.LEDGER_ACCEPT, {"acceptor_sig": entry.acceptor_sig.hex()})
        self._move(res, s, State.COMPLETE)
        self._pump(cid, res)

    def _yield(self, cid: ChannelId, res: HandleResult) -> None:
        sid = self._pending.pop(cid)
        s = self.sessions[sid]
        self._event(res, event="proposal_conflict", session=sid, kept="peer", seq=s.proposed.seq)
        s.proposed = None
        self._queues.setdefault(cid, deque()).appendleft(sid)

    def _on_ledger_accept(self, s: TransferSession, m: Message, res: HandleResult) -> None:
        cid = ChannelId.of(self.vasp_id, s.peer)
        if self._pending.get(cid) != s.session_id or s.proposed is None:
            raise ProtocolError("no proposal in flight for this session")
        sig = Signature.fromhex(m.body["acceptor_sig"])
        entry = self.ledgers.channel(s.peer).finalize(s.proposed, sig, self.registry)
        del self._pending[cid]
        s.entry_hash = entry.entry_hash
        s.proposed = None
        self._event(res, event="appended", session=s.session_id, channel=str(cid), seq=entry.seq,
                    entry_hash=entry.entry_hash.hex())
        self._move(res, s, State.COMPLETE)
        self._pump(cid, res)

    # -- timers ----------------------------------------------------------------

    def tick(self) -> HandleResult:
        """Expire overdue sessions. Timed-out sessions emit nothing."""
        res = HandleResult()
        now = self.clock()
        for s in list(self.sessions.values()):
            if not s.terminal and s.deadline <= now:
                self._move(res, s, State.TIMED_OUT, "deadline passed")
        return res
