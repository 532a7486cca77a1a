"""Multi-recipient envelope: one encrypted body, one 64-byte stanza per recipient.

Layout (all integers big-endian)::

    "C8SE" | version u8 = 1 | recipient_count u16 | flags u8
    | count x (material[64] [| hint_len u16 | hint utf-8])
    | sender_pub_len u16 | sender_pub
    | header_mac[32]
    | body_len u64 | body

Flag bit 0 (``HINTED``) says stanzas carry a length-prefixed routing hint;
without it every stanza is exactly its 64 bytes of material.
``material`` is a 32-byte X25519 encapsulation followed by the 16-byte
file key sealed with ChaCha20-Poly1305 (32 bytes). Payload and header keys
are derived from the file key by HKDF. The header MAC covers every byte
before it, so a modified stanza or hint is detected while the body stays
byte-identical whatever the recipient list.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Sequence

from . import crypto
from .crypto import RandomSource, WrappedKey

MAGIC = b"C8SE"
VERSION = 1
FILE_KEY_SIZE = 16
STANZA_MATERIAL_SIZE = 64
HEADER_MAC_SIZE = 32
FLAG_HINTED = 0x01

_STANZA_INFO = b"c8s/envelope/stanza"
_PAYLOAD_INFO = b"c8s/envelope/payload"
_HEADER_INFO = b"c8s/envelope/header"


class EnvelopeError(Exception):
    pass


class NoRecipients(EnvelopeError):
    pass


class NotARecipient(EnvelopeError):
    pass


class Corrupt(EnvelopeError):
    pass


class Malformed(EnvelopeError):
    def __init__(self, offset: int, reason: str = "truncated header"):
        super().__init__(f"malformed envelope at byte {offset}: {reason}")
        self.offset = offset
        self.reason = reason


class UnsupportedVersion(Malformed):
    pass


@dataclass(frozen=True)
class RecipientStanza:
    wrapped: WrappedKey
    hint: str

    def material(self) -> bytes:
        return self.wrapped.to_bytes()


@dataclass(frozen=True)
class MultiRecipientEnvelope:
    stanzas: tuple[RecipientStanza, ...]
    sender_pubkey: bytes
    header_mac: bytes
    body: bytes
    version: int = VERSION

    @property
    def recipient_count(self) -> int:
        return len(self.stanzas)

    @property
    def hints(self) -> list[str]:
        return [s.hint for s in self.stanzas]

    def header_bytes(self) -> bytes:
        return _header_prefix(self.stanzas, self.sender_pubkey, self.version) + self.header_mac

    def to_bytes(self) -> bytes:
        return self.header_bytes() + struct.pack(">Q", len(self.body)) + self.body

    @property
    def header_size(self) -> int:
        return len(self.to_bytes()) - len(self.body)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MultiRecipientEnvelope":
        return deserialize(data)


def _header_prefix(stanzas: Sequence[RecipientStanza], sender_pub: bytes, version: int = VERSION) -> bytes:
    hinted = any(s.hint for s in stanzas)
    parts = [MAGIC, struct.pack(">BHB", version, len(stanzas), FLAG_HINTED if hinted else 0)]
    for s in stanzas:
        material = s.material()
        if len(material) != STANZA_MATERIAL_SIZE:
            raise ValueError("stanza material must be 64 bytes")
        parts.append(material)
        if hinted:
            hint = s.hint.encode("utf-8")
            parts.append(struct.pack(">H", len(hint)) + hint)
    parts.append(struct.pack(">H", len(sender_pub)) + sender_pub)
    return b"".join(parts)


def encrypt_multi(
    payload: bytes,
    recipients: Sequence[tuple[bytes, str]],
    sender_pub: bytes,
    rng: Optional[RandomSource] = None,
) -> MultiRecipientEnvelope:
    if not recipients:
        raise NoRecipients("at least one recipient is required")
    # Body randomness is drawn before any stanza randomness, so the body
    # depends only on the payload and the rng state, not on the recipients.
    file_key = crypto.random_bytes(FILE_KEY_SIZE, rng)
    body = crypto.aead_seal(crypto.hkdf(file_key, _PAYLOAD_INFO), payload, rng=rng)
    stanzas = tuple(
        RecipientStanza(crypto.wrap_key(pub, file_key, _STANZA_INFO, rng), hint)
        for pub, hint in recipients
    )
    mac = crypto.hmac(crypto.hkdf(file_key, _HEADER_INFO), _header_prefix(stanzas, sender_pub))
    return MultiRecipientEnvelope(stanzas, sender_pub, mac, body)


def decrypt(env: MultiRecipientEnvelope, private: bytes) -> bytes:
    """Trial-unwrap stanzas in order; the first that opens yields the file key."""
    file_key = None
    for stanza in env.stanzas:
        try:
            file_key = crypto.unwrap_key(private, stanza.wrapped, _STANZA_INFO)
            break
        except crypto.CryptoError:
            continue
    if file_key is None:
        raise NotARecipient("no stanza opens under this key")
    expected = crypto.hmac(
        crypto.hkdf(file_key, _HEADER_INFO), _header_prefix(env.stanzas, env.sender_pubkey, env.version)
    )
    if expected != env.header_mac:
        raise Corrupt("header authentication failed")
    try:
        return crypto.aead_open(crypto.hkdf(file_key, _PAYLOAD_INFO), env.body)
    except crypto.AuthFailure as exc:
        raise Corrupt("body authentication failed") from exc


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Malformed(self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]


def _parse_stanzas(cur: _Cursor) -> tuple[int, list[tuple[bytes, str]]]:
    if cur.take(4) != MAGIC:
        raise Malformed(0, "bad magic")
    version = cur.take(1)[0]
    if version != VERSION:
        raise UnsupportedVersion(4, f"UnsupportedVersion {version}")
    count = cur.u16()
    flags_at = cur.pos
    flags = cur.take(1)[0]
    if flags & ~FLAG_HINTED:
        raise Malformed(flags_at, f"unknown flags {flags:#x}")
    stanzas = []
    for _ in range(count):
        material = cur.take(STANZA_MATERIAL_SIZE)
        if not flags & FLAG_HINTED:
            stanzas.append((material, ""))
            continue
        hint_len = cur.u16()
        start = cur.pos
        try:
            hint = cur.take(hint_len).decode("utf-8")
        except UnicodeDecodeError:
            raise Malformed(start, "hint is not utf-8") from None
        stanzas.append((material, hint))
    return version, stanzas


def parse_hints(data: bytes) -> list[str]:
    """Read the routing hints from a header (or header prefix). No key material is used."""
    _, stanzas = _parse_stanzas(_Cursor(bytes(data)))
    return [hint for _, hint in stanzas]


def deserialize(data: bytes) -> MultiRecipientEnvelope:
    cur = _Cursor(bytes(data))
    version, raw = _parse_stanzas(cur)
    sender_pub = cur.take(cur.u16())
    mac = cur.take(HEADER_MAC_SIZE)
    body_len = struct.unpack(">Q", cur.take(8))[0]
    body = cur.take(body_len)
    if cur.pos != len(cur.data):
        raise Malformed(cur.pos, "trailing bytes")
    stanzas = tuple(
        RecipientStanza(WrappedKey(m[: crypto.KEY_SIZE], m[crypto.KEY_SIZE :]), hint)
        for m, hint in raw
    )
    return MultiRecipientEnvelope(stanzas, sender_pub, mac, body, version)


def serialize(env: MultiRecipientEnvelope) -> bytes:
    return env.to_bytes()


def hint_field_size(hint: str) -> int:
    return 2 + len(hint.encode("utf-8"))


def header_overhead(recipient_hints: Sequence[str]) -> int:
    """Bytes the stanzas contribute to a header."""
    if not any(recipient_hints):
        return STANZA_MATERIAL_SIZE * len(recipient_hints)
    return sum(STANZA_MATERIAL_SIZE + hint_field_size(h) for h in recipient_hints)
