"""Cryptographic primitives behind small, pluggable interfaces.

The protocol modules never touch the `cryptography` package directly; they go
through the wrappers here so a different scheme (e.g. a quantum-resistant
signature) can be slotted in without touching protocol logic. Key generation
is driven by a caller-supplied ``random.Random`` so entire simulations are
reproducible from a single seed; pass ``None`` to use the OS entropy pool.
"""

from __future__ import annotations

import hashlib
import os
import random
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

AEAD_KEY_SIZE = 32
AEAD_NONCE_SIZE = 12
AEAD_TAG_SIZE = 16
SIGNATURE_SIZE = 64
KEM_CIPHERTEXT_SIZE = 32  # X25519 ephemeral public key


class UnwrapError(Exception):
    """A wrapped key could not be recovered with the given private key."""


def rand_bytes(rng: random.Random | None, n: int) -> bytes:
    """n bytes from rng, or from the OS pool when rng is None."""
    if rng is None:
        return os.urandom(n)
    return rng.getrandbits(8 * n).to_bytes(n, "big")


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def derive(*parts: bytes) -> bytes:
    """Domain-separated 32-byte derivation used for sub-seeds and labels."""
    h = hashlib.sha256()
    for part in parts:
        h.update(len(part).to_bytes(4, "big"))
        h.update(part)
    return h.digest()


@dataclass(frozen=True)
class VerifyKey:
    """Ed25519 public key."""

    raw: bytes

    def verify(self, message: bytes, signature: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(self.raw).verify(signature, message)
            return True
        except (InvalidSignature, ValueError):
            return False


class SigningKey:
    """Ed25519 signing key. Signing is deterministic per RFC 8032."""

    def __init__(self, raw: bytes):
        if len(raw) != 32:
            raise ValueError("Ed25519 seed must be 32 bytes")
        self._key = Ed25519PrivateKey.from_private_bytes(raw)
        self.verify_key = VerifyKey(
            self._key.public_key().public_bytes_raw()
        )

    @classmethod
    def generate(cls, rng: random.Random | None = None) -> "SigningKey":
        return cls(rand_bytes(rng, 32))

    def sign(self, message: bytes) -> bytes:
        return self._key.sign(message)


@dataclass(frozen=True)
class KemPublicKey:
    """X25519 public key used to wrap symmetric keys for one recipient."""

    raw: bytes


class KemPrivateKey:
    """X25519 private key; the decapsulating side of the key wrap."""

    def __init__(self, raw: bytes):
        if len(raw) != 32:
            raise ValueError("X25519 key must be 32 bytes")
        self._key = X25519PrivateKey.from_private_bytes(raw)
        self.public_key = KemPublicKey(self._key.public_key().public_bytes_raw())

    @classmethod
    def generate(cls, rng: random.Random | None = None) -> "KemPrivateKey":
        return cls(rand_bytes(rng, 32))

    def _shared(self, peer: bytes) -> bytes:
        return self._key.exchange(X25519PublicKey.from_public_bytes(peer))


def _wrap_kek(shared: bytes, ephemeral_pub: bytes, recipient_pub: bytes) -> bytes:
    # KDF binds the key-encryption key to both public values.
    return derive(b"key-wrap", shared, ephemeral_pub, recipient_pub)


def wrap_key(
    recipient: KemPublicKey,
    key: bytes,
    aad: bytes,
    rng: random.Random | None = None,
) -> bytes:
    """Hybrid-encrypt `key` to `recipient`: ephemeral X25519 + AES-GCM.

    The fixed zero nonce is safe because every wrap uses a fresh ephemeral
    key and therefore a fresh key-encryption key.
    """
    eph = X25519PrivateKey.from_private_bytes(rand_bytes(rng, 32))
    eph_pub = eph.public_key().public_bytes_raw()
    shared = eph.exchange(X25519PublicKey.from_public_bytes(recipient.raw))
    kek = _wrap_kek(shared, eph_pub, recipient.raw)
    sealed = AESGCM(kek).encrypt(b"\x00" * AEAD_NONCE_SIZE, key, aad)
    return eph_pub + sealed


def unwrap_key(recipient: KemPrivateKey, blob: bytes, aad: bytes) -> bytes:
    """Recover a wrapped key; raises UnwrapError for any other recipient."""
    if len(blob) < KEM_CIPHERTEXT_SIZE + AEAD_TAG_SIZE:
        raise UnwrapError("wrapped key message too short")
    eph_pub, sealed = blob[:KEM_CIPHERTEXT_SIZE], blob[KEM_CIPHERTEXT_SIZE:]
    try:
        shared = recipient._shared(eph_pub)
        kek = _wrap_kek(shared, eph_pub, recipient.public_key.raw)
        return AESGCM(kek).decrypt(b"\x00" * AEAD_NONCE_SIZE, sealed, aad)
    except (InvalidTag, ValueError) as exc:
        raise UnwrapError("key unwrap failed") from exc
