"""Canonical JSON, SHA-256 digests and Ed25519 signatures."""

from __future__ import annotations

import hashlib
import json
import os
import secrets
import unicodedata
from pathlib import Path
from typing import Any

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)


class CanonicalizationError(TypeError):
    pass


class KeyFormatError(ValueError):
    pass


def _normalize(value: Any) -> Any:
    if value is None or isinstance(value, bool):
        return value
    if isinstance(value, int):
        return int(value)
    if isinstance(value, str):
        return unicodedata.normalize("NFC", value)
    if isinstance(value, (list, tuple)):
        return [_normalize(v) for v in value]
    if isinstance(value, dict):
        out: dict[str, Any] = {}
        for key, item in value.items():
            if not isinstance(key, str):
                raise CanonicalizationError(f"object key must be a string, got {type(key).__name__}")
            nkey = unicodedata.normalize("NFC", key)
            if nkey in out:
                raise CanonicalizationError(f"duplicate key after normalization: {nkey!r}")
            out[nkey] = _normalize(item)
        return out
    if hasattr(value, "to_dict"):
        return _normalize(value.to_dict())
    # floats included: amounts travel as decimal strings
    raise CanonicalizationError(f"cannot canonicalize {type(value).__name__}")


def canonical_bytes(value: Any) -> bytes:
    """Deterministic UTF-8 JSON for ``value``.

    Keys are sorted by code point at every depth, there is no whitespace,
    strings are NFC-normalized and only ``"``, ``\\`` and control characters
    are escaped. Domain objects are serialized through their ``to_dict``.
    """
    text = json.dumps(
        _normalize(value),
        sort_keys=True,
        ensure_ascii=False,
        separators=(",", ":"),
        allow_nan=False,
    )
    try:
        return text.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise CanonicalizationError("string is not valid Unicode") from exc


class Digest(bytes):
    """A 32-byte SHA-256 output."""

    def __new__(cls, value: bytes) -> Digest:
        if len(value) != 32:
            raise ValueError(f"digest must be 32 bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def fromhex(cls, text: str) -> Digest:  # type: ignore[override]
        return cls(_strict_hex(text, 32, "digest"))

    def __repr__(self) -> str:
        return f"Digest({self.hex()[:16]}...)"


ZERO_DIGEST = Digest(bytes(32))


def sha256(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).digest())


def digest_of(value: Any) -> Digest:
    return sha256(canonical_bytes(value))


def _strict_hex(text: Any, length: int, what: str) -> bytes:
    # lowercase only, so every byte string has exactly one textual form
    if not isinstance(text, str) or len(text) != 2 * length:
        raise KeyFormatError(f"{what} must be {2 * length} hex characters")
    if text != text.lower():
        raise KeyFormatError(f"{what} must be lowercase hex")
    try:
        return bytes.fromhex(text)
    except ValueError:
        raise KeyFormatError(f"{what} is not hex") from None


class PublicKey(bytes):
    def __new__(cls, value: bytes) -> PublicKey:
        if len(value) != 32:
            raise KeyFormatError(f"public key must be 32 bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def fromhex(cls, text: str) -> PublicKey:  # type: ignore[override]
        return cls(_strict_hex(text, 32, "public key"))


class Signature(bytes):
    def __new__(cls, value: bytes) -> Signature:
        if len(value) != 64:
            raise KeyFormatError(f"signature must be 64 bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def fromhex(cls, text: str) -> Signature:  # type: ignore[override]
        return cls(_strict_hex(text, 64, "signature"))


class KeyPair:
    """Ed25519 key pair derived from a 32-byte seed."""

    __slots__ = ("_seed", "_private", "public_key")

    def __init__(self, seed: bytes):
        if len(seed) != 32:
            raise KeyFormatError(f"seed must be 32 bytes, got {len(seed)}")
        self._seed = bytes(seed)
        self._private = Ed25519PrivateKey.from_private_bytes(self._seed)
        raw = self._private.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        self.public_key = PublicKey(raw)

    @classmethod
    def generate(cls) -> KeyPair:
        return cls(secrets.token_bytes(32))

    @property
    def seed(self) -> bytes:
        return self._seed

    def sign(self, data: bytes) -> Signature:
        return Signature(self._private.sign(data))

    def __repr__(self) -> str:
        return f"KeyPair(public_key={self.public_key.hex()[:16]}...)"


def sign(key: KeyPair, data: bytes) -> Signature:
    return key.sign(data)


def verify(public_key: bytes, data: bytes, signature: bytes) -> bool:
    if len(public_key) != 32:
        raise KeyFormatError("public key must be 32 bytes")
    if len(signature) != 64:
        raise KeyFormatError("signature must be 64 bytes")
    try:
        Ed25519PublicKey.from_public_bytes(bytes(public_key)).verify(bytes(signature), data)
    except InvalidSignature:
        return False
    return True


def write_key_file(path: str | os.PathLike[str], key: KeyPair) -> None:
    """Write the seed as one line of lowercase hex, readable by the owner only."""
    path = Path(path)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        fh.write(key.seed.hex() + "\n")
    os.chmod(path, 0o600)


def read_key_file(path: str | os.PathLike[str]) -> KeyPair:
    text = Path(path).read_text().strip()
    return KeyPair(_strict_hex(text, 32, "key seed"))
