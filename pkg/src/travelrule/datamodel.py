"""Travel rule domain values: parties, addresses, transactions, real-name ids.

All types are frozen dataclasses that validate on construction and raise
:class:`ValidationError` listing every violated rule. The ``validate_*``
functions accept either an instance or a plain mapping (as decoded from the
wire) and return the violations as values instead of raising.
"""

from __future__ import annotations

import enum
import re
import unicodedata
from collections.abc import Mapping
from dataclasses import dataclass
from datetime import datetime, timezone
from decimal import Decimal, InvalidOperation
from typing import Any, Union

MAX_FRACTION_DIGITS = 18

_VASP_ID_RE = re.compile(r"[a-z0-9-]{1,64}")
_TICKER_RE = re.compile(r"[A-Za-z0-9]+")
_DECIMAL_RE = re.compile(r"[0-9]+(\.[0-9]+)?")
_TIMESTAMP_RE = re.compile(r"[0-9]{4}-[0-9]{2}-[0-9]{2}T[0-9]{2}:[0-9]{2}:[0-9]{2}(\.[0-9]{3}|\.[0-9]{6})?(Z|[+-][0-9]{2}:[0-9]{2})")


class ValidationError(ValueError):
    def __init__(self, violations: list[Violation]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


@dataclass(frozen=True)
class Violation:
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.field}: {self.message}"


def _raise_if(violations: list[Violation]) -> None:
    if violations:
        raise ValidationError(violations)


def nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def normalize_name(name: str) -> str:
    """Comparison form of a legal name: NFC and trimmed, case preserved."""
    return nfc(name).strip()


# --------------------------------------------------------------------------
# timestamps


def utc(dt: datetime) -> datetime:
    if dt.tzinfo is None:
        raise ValueError("naive datetime; expected timezone-aware UTC")
    return dt.astimezone(timezone.utc)


def format_timestamp(dt: datetime) -> str:
    """RFC 3339 UTC with fixed microsecond precision, e.g. ``2026-01-01T00:00:00.000000Z``."""
    return utc(dt).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def parse_timestamp(text: str) -> datetime:
    if not isinstance(text, str) or not _TIMESTAMP_RE.fullmatch(text):
        raise ValueError(f"not an RFC 3339 timestamp: {text!r}")
    raw = text[:-1] + "+00:00" if text.endswith("Z") else text
    try:
        dt = datetime.fromisoformat(raw)
    except ValueError:
        raise ValueError(f"not an RFC 3339 timestamp: {text!r}") from None
    return dt.astimezone(timezone.utc)


# --------------------------------------------------------------------------
# VASP ids


def vasp_id_violations(value: Any, field: str = "vasp_id") -> list[Violation]:
    if not isinstance(value, str) or not value:
        return [Violation(field, "vasp id empty")]
    if len(value) > 64:
        return [Violation(field, "vasp id longer than 64 characters")]
    if not _VASP_ID_RE.fullmatch(value):
        return [Violation(field, "vasp id outside [a-z0-9-]")]
    return []


def check_vasp_id(value: Any) -> str:
    _raise_if(vasp_id_violations(value))
    return value


# --------------------------------------------------------------------------
# value types


def _ticker_violations(asset: Any, field: str) -> list[Violation]:
    if not isinstance(asset, str) or not asset:
        return [Violation(field, "asset empty")]
    if not _TICKER_RE.fullmatch(asset):
        return [Violation(field, "asset not alphanumeric")]
    if asset != asset.upper():
        return [Violation(field, "asset not uppercase")]
    return []


def _address_violations(asset: Any, address: Any, prefix: str) -> list[Violation]:
    out = _ticker_violations(asset, f"{prefix}asset")
    if not isinstance(address, str) or not address:
        out.append(Violation(f"{prefix}address", "address empty"))
    elif len(address) > 128:
        out.append(Violation(f"{prefix}address", "address longer than 128 characters"))
    return out


@dataclass(frozen=True)
class VirtualAssetAddress:
    asset: str
    address: str

    def __post_init__(self) -> None:
        _raise_if(_address_violations(self.asset, self.address, ""))

    def to_dict(self) -> dict[str, str]:
        return {"asset": self.asset, "address": self.address}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> VirtualAssetAddress:
        _raise_if(_address_mapping_violations(data, ""))
        return cls(asset=data["asset"], address=data["address"])


def _address_mapping_violations(data: Any, prefix: str) -> list[Violation]:
    if isinstance(data, VirtualAssetAddress):
        return []
    if not isinstance(data, Mapping):
        return [Violation(prefix.rstrip(".") or "address", "not an object")]
    return _address_violations(data.get("asset"), data.get("address"), prefix)


def _name_violations(name: Any, field: str = "name") -> list[Violation]:
    if not isinstance(name, str) or not name.strip():
        return [Violation(field, "name empty")]
    if len(name) > 256:
        return [Violation(field, "name longer than 256 characters")]
    return []


@dataclass(frozen=True)
class PartyInfo:
    """Legal name plus virtual asset address of an originator or beneficiary."""

    name: str
    address: VirtualAssetAddress

    def __post_init__(self) -> None:
        _raise_if(_name_violations(self.name))
        object.__setattr__(self, "name", nfc(self.name))

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "address": self.address.to_dict()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PartyInfo:
        _raise_if(validate_party_info(data))
        return cls(name=data["name"], address=VirtualAssetAddress.from_dict(data["address"]))


def validate_party_info(info: PartyInfo | Mapping[str, Any]) -> list[Violation]:
    """Return the list of rule violations; an empty list means the value is ok."""
    if isinstance(info, PartyInfo):
        return []
    if not isinstance(info, Mapping):
        return [Violation("party", "not an object")]
    return _name_violations(info.get("name")) + _address_mapping_violations(
        info.get("address"), "address."
    )


def decimal_violations(amount: Any, field: str = "amount") -> list[Violation]:
    if not isinstance(amount, str):
        return [Violation(field, "amount not a decimal string")]
    try:
        value = Decimal(amount)
    except InvalidOperation:
        return [Violation(field, "amount not a decimal")]
    if not value.is_finite() or value <= 0:
        return [Violation(field, "amount not positive")]
    if not _DECIMAL_RE.fullmatch(amount):
        return [Violation(field, "amount not in plain decimal notation")]
    _, _, fraction = amount.partition(".")
    if len(fraction) > MAX_FRACTION_DIGITS:
        return [Violation(field, "precision exceeds 18 fractional digits")]
    return []


@dataclass(frozen=True)
class TransactionInfo:
    tx_id: str
    asset: str
    amount: str
    originator_address: VirtualAssetAddress
    beneficiary_address: VirtualAssetAddress
    executed_at: datetime

    def __post_init__(self) -> None:
        object.__setattr__(self, "executed_at", utc(self.executed_at))
        _raise_if(validate_transaction_info(self))

    def to_dict(self) -> dict[str, Any]:
        return {
            "tx_id": self.tx_id,
            "asset": self.asset,
            "amount": self.amount,
            "originator_address": self.originator_address.to_dict(),
            "beneficiary_address": self.beneficiary_address.to_dict(),
            "executed_at": format_timestamp(self.executed_at),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TransactionInfo:
        _raise_if(validate_transaction_info(data))
        return cls(
            tx_id=data["tx_id"],
            asset=data["asset"],
            amount=data["amount"],
            originator_address=VirtualAssetAddress.from_dict(data["originator_address"]),
            beneficiary_address=VirtualAssetAddress.from_dict(data["beneficiary_address"]),
            executed_at=parse_timestamp(data["executed_at"]),
        )


def validate_transaction_info(tx: TransactionInfo | Mapping[str, Any]) -> list[Violation]:
    if isinstance(tx, TransactionInfo):
        fields = {
            "tx_id": tx.tx_id,
            "asset": tx.asset,
            "amount": tx.amount,
            "originator_address": tx.originator_address,
            "beneficiary_address": tx.beneficiary_address,
            "executed_at": tx.executed_at,
        }
    elif isinstance(tx, Mapping):
        fields = dict(tx)
    else:
        return [Violation("tx", "not an object")]

    out: list[Violation] = []
    tx_id = fields.get("tx_id")
    if not isinstance(tx_id, str) or not tx_id or len(tx_id) > 128:
        out.append(Violation("tx_id", "tx id empty or too long"))
    asset = fields.get("asset")
    out += _ticker_violations(asset, "asset")
    out += decimal_violations(fields.get("amount"))
    for role in ("originator_address", "beneficiary_address"):
        addr = fields.get(role)
        problems = _address_mapping_violations(addr, f"{role}.")
        out += problems
        if not problems:
            ticker = addr.asset if isinstance(addr, VirtualAssetAddress) else addr["asset"]
            if ticker != asset:
                out.append(Violation(role, "address asset differs from transaction asset"))
    executed_at = fields.get("executed_at")
    if not isinstance(executed_at, datetime):
        try:
            parse_timestamp(executed_at)
        except ValueError:
            out.append(Violation("executed_at", "not an RFC 3339 timestamp"))
    return out


class RealNameKind(str, enum.Enum):
    RESIDENT_REGISTRATION = "RESIDENT_REGISTRATION"
    PASSPORT = "PASSPORT"
    ALIEN_REGISTRATION = "ALIEN_REGISTRATION"


@dataclass(frozen=True)
class RealNameInfo:
    kind: RealNameKind
    value: str

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "kind", RealNameKind(self.kind))
        except ValueError:
            raise ValidationError([Violation("kind", "unknown real-name kind")]) from None
        if not isinstance(self.value, str) or not 1 <= len(self.value) <= 64:
            raise ValidationError([Violation("value", "identifier must be 1-64 characters")])

    def to_dict(self) -> dict[str, str]:
        return {"kind": self.kind.value, "value": self.value}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RealNameInfo:
        if not isinstance(data, Mapping):
            raise ValidationError([Violation("real_name", "not an object")])
        return cls(kind=data.get("kind"), value=data.get("value"))


class ReasonCode(str, enum.Enum):
    STR = "STR"
    AUDIT = "AUDIT"
    OTHER = "OTHER"


@dataclass(frozen=True)
class CustomerRecord:
    customer_id: str
    name: str
    addresses: tuple[VirtualAssetAddress, ...]
    real_name: RealNameInfo

    def __post_init__(self) -> None:
        object.__setattr__(self, "addresses", tuple(self.addresses))
        out = _name_violations(self.name)
        if not isinstance(self.customer_id, str) or not self.customer_id:
            out.append(Violation("customer_id", "customer id empty"))
        if not self.addresses:
            out.append(Violation("addresses", "no addresses"))
        if len(set(self.addresses)) != len(self.addresses):
            out.append(Violation("addresses", "duplicate address"))
        _raise_if(out)
        object.__setattr__(self, "name", nfc(self.name))

    def address_for(self, asset: str) -> VirtualAssetAddress | None:
        return next((a for a in self.addresses if a.asset == asset), None)

    def party_info(self, address: VirtualAssetAddress) -> PartyInfo:
        return PartyInfo(name=self.name, address=address)

    def to_dict(self) -> dict[str, Any]:
        return {
            "customer_id": self.customer_id,
            "name": self.name,
            "addresses": [a.to_dict() for a in self.addresses],
            "real_name": self.real_name.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> CustomerRecord:
        return cls(
            customer_id=data["customer_id"],
            name=data["name"],
            addresses=tuple(VirtualAssetAddress.from_dict(a) for a in data["addresses"]),
            real_name=RealNameInfo.from_dict(data["real_name"]),
        )


DomainValue = Union[
    VirtualAssetAddress, PartyInfo, TransactionInfo, RealNameInfo, CustomerRecord
]
