"""Fixed cryptographic suite shared by every component.

SHA-256 digests, Ed25519 signatures with domain separation, X25519 + HKDF +
ChaCha20-Poly1305 for key wrapping, and ChaCha20-Poly1305 for bulk AEAD.

Every randomized operation takes an optional ``rng`` (anything with a
``randbytes(n)`` method, e.g. ``random.Random``) so simulations replay
byte-for-byte from a seed. With ``rng=None`` the OS CSPRNG is used.
"""

from __future__ import annotations

import contextlib
import contextvars
import hashlib
import hmac as _hmac
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator, Optional, Protocol

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

DIGEST_SIZE = 32
KEY_SIZE = 32
SIGNATURE_SIZE = 64
NONCE_SIZE = 12
TAG_SIZE = 16

EMPTY_DIGEST = bytes.fromhex(
    "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
)

_SEPARATOR = b"\x00"
_WRAP_LABEL = b"c8s/wrap/v1"


class CryptoError(Exception):
    pass


class AuthFailure(CryptoError):
    """AEAD open failed: wrong key, wrong associated data, or tampering."""


class WrongRecipient(CryptoError):
    """The wrapped key does not open under this private key / context."""


class Corrupt(CryptoError):
    """Structurally invalid ciphertext or key material."""


class RandomSource(Protocol):
    def randbytes(self, n: int) -> bytes: ...


def random_bytes(n: int, rng: Optional[RandomSource] = None) -> bytes:
    if rng is None:
        return os.urandom(n)
    return rng.randbytes(n)


# -- operation metering ------------------------------------------------------

_meters: contextvars.ContextVar[tuple[Counter, ...]] = contextvars.ContextVar(
    "c8s_crypto_meters", default=()
)


def _count(op: str) -> None:
    for meter in _meters.get():
        meter[op] += 1


@contextlib.contextmanager
def metered() -> Iterator[Counter]:
    """Count every cryptographic operation performed inside the block.

    >>> with metered() as ops:
    ...     _ = digest(b"x")
    >>> sum(ops.values())
    1
    """
    meter: Counter = Counter()
    token = _meters.set(_meters.get() + (meter,))
    try:
        yield meter
    finally:
        _meters.reset(token)


# -- digests -----------------------------------------------------------------


def digest(data: bytes) -> bytes:
    _count("digest")
    return hashlib.sha256(data).digest()


def hmac(key: bytes, data: bytes) -> bytes:
    _count("hmac")
    return _hmac.new(key, data, hashlib.sha256).digest()


def hkdf(ikm: bytes, info: bytes, length: int = KEY_SIZE, salt: bytes | None = None) -> bytes:
    _count("hkdf")
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=salt, info=info).derive(ikm)


# -- keys --------------------------------------------------------------------


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    private: bytes = field(repr=False)


def signing_keypair(rng: Optional[RandomSource] = None) -> KeyPair:
    _count("keygen")
    seed = random_bytes(KEY_SIZE, rng)
    return KeyPair(public=signing_public(seed), private=seed)


def signing_public(private: bytes) -> bytes:
    key = Ed25519PrivateKey.from_private_bytes(private)
    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def kem_keypair(rng: Optional[RandomSource] = None) -> KeyPair:
    _count("keygen")
    seed = random_bytes(KEY_SIZE, rng)
    return KeyPair(public=kem_public(seed), private=seed)


def kem_public(private: bytes) -> bytes:
    key = X25519PrivateKey.from_private_bytes(private)
    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def dh(private: bytes, public: bytes) -> bytes:
    _count("dh")
    try:
        shared = X25519PrivateKey.from_private_bytes(private).exchange(
            X25519PublicKey.from_public_bytes(public)
        )
    except ValueError as exc:
        raise Corrupt(f"invalid X25519 input: {exc}") from exc
    return shared


# -- signatures --------------------------------------------------------------


def _domain_message(domain: str, msg: bytes) -> bytes:
    if not domain:
        raise ValueError("signature domain must be non-empty")
    return domain.encode("utf-8") + _SEPARATOR + msg


def sign(private: bytes, domain: str, msg: bytes) -> bytes:
    _count("sign")
    key = Ed25519PrivateKey.from_private_bytes(private)
    return key.sign(_domain_message(domain, msg))


def verify(public: bytes, domain: str, msg: bytes, sig: bytes) -> bool:
    _count("verify")
    if not domain or len(public) != KEY_SIZE or len(sig) != SIGNATURE_SIZE:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(sig, _domain_message(domain, msg))
    except (InvalidSignature, ValueError):
        return False
    return True


# -- key wrapping ------------------------------------------------------------


@dataclass(frozen=True)
class WrappedKey:
    encapsulation: bytes
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        return self.encapsulation + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "WrappedKey":
        if len(data) < KEY_SIZE + TAG_SIZE:
            raise Corrupt("wrapped key too short")
        return cls(encapsulation=data[:KEY_SIZE], ciphertext=data[KEY_SIZE:])


def _wrap_kek(shared: bytes, encapsulation: bytes, recipient: bytes, info: bytes) -> bytes:
    return hkdf(shared, _WRAP_LABEL + _SEPARATOR + info, salt=encapsulation + recipient)


def wrap_key(
    recipient: bytes, key: bytes, info: bytes = b"", rng: Optional[RandomSource] = None
) -> WrappedKey:
    """Encrypt ``key`` to an X25519 public key (ephemeral-static DH + HKDF + AEAD).

    The ciphertext is ``len(key) + 16`` bytes, so wrapping a 16-byte key
    yields a 64-byte (encapsulation, ciphertext) pair.
    """
    _count("wrap")
    eph = kem_keypair(rng)
    kek = _wrap_kek(dh(eph.private, recipient), eph.public, recipient, info)
    # The KEK is unique per ephemeral key, so a fixed nonce is safe.
    ct = ChaCha20Poly1305(kek).encrypt(bytes(NONCE_SIZE), key, None)
    return WrappedKey(encapsulation=eph.public, ciphertext=ct)


def unwrap_key(private: bytes, wrapped: WrappedKey, info: bytes = b"") -> bytes:
    _count("unwrap")
    if len(wrapped.encapsulation) != KEY_SIZE or len(wrapped.ciphertext) < TAG_SIZE:
        raise Corrupt("malformed wrapped key")
    recipient = kem_public(private)
    kek = _wrap_kek(dh(private, wrapped.encapsulation), wrapped.encapsulation, recipient, info)
    try:
        return ChaCha20Poly1305(kek).decrypt(bytes(NONCE_SIZE), wrapped.ciphertext, None)
    except InvalidTag as exc:
        raise WrongRecipient("wrapped key does not open under this key") from exc


# -- AEAD --------------------------------------------------------------------


def symmetric_key(rng: Optional[RandomSource] = None) -> bytes:
    return random_bytes(KEY_SIZE, rng)


def aead_seal(
    key: bytes, plaintext: bytes, aad: bytes = b"", rng: Optional[RandomSource] = None
) -> bytes:
    """Return ``nonce || ciphertext || tag``."""
    _count("seal")
    nonce = random_bytes(NONCE_SIZE, rng)
    return nonce + ChaCha20Poly1305(key).encrypt(nonce, plaintext, aad)


def aead_open(key: bytes, ciphertext: bytes, aad: bytes = b"") -> bytes:
    _count("open")
    if len(ciphertext) < NONCE_SIZE + TAG_SIZE:
        raise AuthFailure("ciphertext too short")
    nonce, body = ciphertext[:NONCE_SIZE], ciphertext[NONCE_SIZE:]
    try:
        return ChaCha20Poly1305(key).decrypt(nonce, body, aad)
    except InvalidTag as exc:
        raise AuthFailure("authentication failed") from exc
