"""Admission of VASPs into the permissioned network.

The authority signs a :class:`VaspCredential` binding a VASP id to its
Ed25519 public key. Nodes hold a :class:`Registry` snapshot (authority key,
credentials, revoked ids) and consult it to authenticate every peer.
"""

from __future__ import annotations

import json
import os
import tempfile
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any

from travelrule.crypto import (
    KeyPair,
    PublicKey,
    Signature,
    canonical_bytes,
    digest_of,
    verify,
)
from travelrule.datamodel import check_vasp_id, format_timestamp, parse_timestamp


class MembershipError(Exception):
    pass


@dataclass(frozen=True)
class VaspCredential:
    vasp_id: str
    public_key: PublicKey
    display_name: str
    issued_at: datetime
    expires_at: datetime
    authority_sig: Signature | None = None

    def unsigned_dict(self) -> dict[str, Any]:
        return {
            "vasp_id": self.vasp_id,
            "public_key": self.public_key.hex(),
            "display_name": self.display_name,
            "issued_at": format_timestamp(self.issued_at),
            "expires_at": format_timestamp(self.expires_at),
        }

    def to_dict(self) -> dict[str, Any]:
        d = self.unsigned_dict()
        d["authority_sig"] = self.authority_sig.hex() if self.authority_sig else None
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> VaspCredential:
        sig = data.get("authority_sig")
        return cls(
            vasp_id=check_vasp_id(data["vasp_id"]),
            public_key=PublicKey.fromhex(data["public_key"]),
            display_name=str(data["display_name"]),
            issued_at=parse_timestamp(data["issued_at"]),
            expires_at=parse_timestamp(data["expires_at"]),
            authority_sig=Signature.fromhex(sig) if sig is not None else None,
        )


@dataclass
class Registry:
    authority_pk: PublicKey
    credentials: dict[str, VaspCredential] = field(default_factory=dict)
    revoked: set[str] = field(default_factory=set)

    def credential(self, vasp_id: str) -> VaspCredential | None:
        return self.credentials.get(vasp_id)

    def public_key_of(self, vasp_id: str) -> PublicKey | None:
        """Key registered for ``vasp_id``, revoked or expired included.

        Historical ledger entries stay verifiable after a member leaves, so
        this lookup deliberately ignores the credential's current standing.
        """
        cred = self.credentials.get(vasp_id)
        return cred.public_key if cred else None

    def is_authorized(self, vasp_id: str, now: datetime) -> bool:
        cred = self.credentials.get(vasp_id)
        return cred is not None and verify_credential(cred, self, now)

    def to_dict(self) -> dict[str, Any]:
        return {
            "authority_pk": self.authority_pk.hex(),
            "credentials": [self.credentials[k].to_dict() for k in sorted(self.credentials)],
            "revoked": sorted(self.revoked),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Registry:
        creds = [VaspCredential.from_dict(c) for c in data.get("credentials", [])]
        by_id = {c.vasp_id: c for c in creds}
        if len(by_id) != len(creds):
            raise MembershipError("registry holds more than one credential per id")
        return cls(
            authority_pk=PublicKey.fromhex(data["authority_pk"]),
            credentials=by_id,
            revoked={check_vasp_id(v) for v in data.get("revoked", [])},
        )

    def save(self, path: str | os.PathLike[str]) -> None:
        """Write the snapshot atomically so refreshing readers never see a torn file."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".registry-")
        with os.fdopen(fd, "wb") as fh:
            fh.write(canonical_bytes(self.to_dict()))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> Registry:
        return cls.from_dict(json.loads(Path(path).read_bytes()))


def _credential_digest(cred: VaspCredential) -> bytes:
    return digest_of(cred.unsigned_dict())


def _require_authority(authority_key: KeyPair, registry: Registry) -> None:
    if authority_key.public_key != registry.authority_pk:
        raise MembershipError("key is not the registry's authority key")


def issue_credential(
    authority_key: KeyPair,
    registry: Registry,
    vasp_id: str,
    public_key: bytes,
    display_name: str,
    validity_days: int,
    now: datetime | None = None,
) -> VaspCredential:
    _require_authority(authority_key, registry)
    check_vasp_id(vasp_id)
    if not isinstance(validity_days, int) or validity_days <= 0:
        raise MembershipError("validity_days must be a positive integer")
    if vasp_id in registry.revoked:
        raise MembershipError(f"revoked: {vasp_id}")
    now = now or datetime.now(timezone.utc)
    existing = registry.credentials.get(vasp_id)
    if existing is not None and now < existing.expires_at:
        raise MembershipError(f"duplicate: {vasp_id} already holds an active credential")
    cred = VaspCredential(
        vasp_id=vasp_id,
        public_key=PublicKey(bytes(public_key)),
        display_name=display_name,
        issued_at=now,
        expires_at=now + timedelta(days=validity_days),
    )
    cred = replace(cred, authority_sig=authority_key.sign(_credential_digest(cred)))
    registry.credentials[vasp_id] = cred
    return cred


def verify_credential(cred: VaspCredential, registry: Registry, now: datetime) -> bool:
    if cred.authority_sig is None or cred.vasp_id in registry.revoked:
        return False
    if not cred.issued_at <= now < cred.expires_at:
        return False
    return verify(registry.authority_pk, _credential_digest(cred), cred.authority_sig)


def revoke(authority_key: KeyPair, registry: Registry, vasp_id: str) -> Registry:
    _require_authority(authority_key, registry)
    if vasp_id not in registry.credentials:
        raise MembershipError(f"unknown vasp id: {vasp_id}")
    registry.revoked.add(vasp_id)
    return registry


def new_registry(authority_key: KeyPair, credentials: Iterable[VaspCredential] = ()) -> Registry:
    return Registry(
        authority_pk=authority_key.public_key,
        credentials={c.vasp_id: c for c in credentials},
    )
