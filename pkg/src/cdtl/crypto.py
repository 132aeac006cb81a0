"""Client-held symmetric encryption for sequence numbers and tree blobs.

AES-128-GCM. Blob layout: version (1 byte) | nonce (12) | ciphertext | tag (16).
Sequence-number and tree ciphertexts use different associated data, so one
can never be opened as the other.
"""
from __future__ import annotations

import hashlib
import os
import secrets
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import AuthenticationError, FormatError

VERSION = 1
KEY_BYTES = 16
NONCE_BYTES = 12
TAG_BYTES = 16
SALT_BYTES = 16
SEQ_BYTES = 8

_AD_SEQ = b"cdtl/seq/v1"
_AD_TREE = b"cdtl/tree/v1"


@dataclass(frozen=True)
class ClientKey:
    material: bytes

    def __post_init__(self):
        if len(self.material) != KEY_BYTES:
            raise ValueError(f"key must be {KEY_BYTES} bytes")

    def __repr__(self):
        return "ClientKey(<hidden>)"

    @classmethod
    def generate(cls) -> "ClientKey":
        return cls(secrets.token_bytes(KEY_BYTES))

    @classmethod
    def from_seed(cls, seed) -> "ClientKey":
        """Deterministic key for reproducible experiments. Not for real data."""
        return cls(hashlib.sha256(f"cdtl-key:{seed}".encode()).digest()[:KEY_BYTES])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.material.hex() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ClientKey":
        return cls(bytes.fromhex(Path(path).read_text().strip()))


@lru_cache(maxsize=16)
def _aead(material: bytes) -> AESGCM:
    return AESGCM(material)


@dataclass(frozen=True)
class CipherBlob:
    nonce: bytes
    ciphertext: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return bytes([VERSION]) + self.nonce + self.ciphertext + self.tag

    @classmethod
    def from_bytes(cls, data: bytes) -> "CipherBlob":
        if len(data) < 1 + NONCE_BYTES + TAG_BYTES:
            raise FormatError(f"blob of {len(data)} bytes is too short")
        if data[0] != VERSION:
            raise FormatError(f"unknown blob version {data[0]}")
        body = data[1:]
        return cls(body[:NONCE_BYTES], body[NONCE_BYTES:-TAG_BYTES], body[-TAG_BYTES:])


def _seal(key: ClientKey, plaintext: bytes, ad: bytes) -> CipherBlob:
    nonce = os.urandom(NONCE_BYTES)
    out = _aead(key.material).encrypt(nonce, plaintext, ad)
    return CipherBlob(nonce, out[:-TAG_BYTES], out[-TAG_BYTES:])


def _open(key: ClientKey, blob: CipherBlob | bytes, ad: bytes) -> bytes:
    if not isinstance(blob, CipherBlob):
        try:
            blob = CipherBlob.from_bytes(blob)
        except FormatError as e:
            raise AuthenticationError(str(e)) from None
    try:
        return _aead(key.material).decrypt(blob.nonce, blob.ciphertext + blob.tag, ad)
    except InvalidTag:
        raise AuthenticationError("authentication failed: wrong key or tampered ciphertext") from None


def new_salt() -> bytes:
    return secrets.token_bytes(SALT_BYTES)


def encrypt_seq(key: ClientKey, salt: bytes, seq: int) -> CipherBlob:
    if seq < 1:
        raise ValueError("sequence numbers start at 1")
    if len(salt) != SALT_BYTES:
        raise ValueError(f"salt must be {SALT_BYTES} bytes")
    return _seal(key, salt + seq.to_bytes(SEQ_BYTES, "big"), _AD_SEQ)


def decrypt_seq(key: ClientKey, blob: CipherBlob | bytes) -> int:
    plain = _open(key, blob, _AD_SEQ)
    if len(plain) != SALT_BYTES + SEQ_BYTES:
        raise AuthenticationError("decrypted sequence number has the wrong length")
    return int.from_bytes(plain[SALT_BYTES:], "big")


def encrypt_blob(key: ClientKey, data: bytes) -> CipherBlob:
    return _seal(key, data, _AD_TREE)


def decrypt_blob(key: ClientKey, blob: CipherBlob | bytes) -> bytes:
    return _open(key, blob, _AD_TREE)
