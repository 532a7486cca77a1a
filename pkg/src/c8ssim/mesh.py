"""raTLS overlay between holders of CDS-issued certificates.

The handshake is modelled rather than wire-compatible TLS: both sides
exchange certificates and ephemeral X25519 shares, mix ephemeral-ephemeral
and ephemeral-static DH so each side proves possession of its certified key,
and derive one AEAD key per direction. Frames on the simulated wire are
``channel_id u32 | seq u64 | nonce | ciphertext | tag``.
"""

from __future__ import annotations

import enum
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import crypto
from .cds import AppraisalFailed, CdsReplica, KeyBindingMismatch, MeshCertificate, Reason, Role
from .crypto import KeyPair, RandomSource
from .network import Network
from .tee import Evidence

_HANDSHAKE_INFO = b"c8s/ratls/v1"
RENEWAL_FRACTION = 0.8


class MeshError(Exception):
    pass


class UntrustedIssuer(MeshError):
    pass


class Expired(MeshError):
    pass


class NotYetValid(MeshError):
    pass


class ProofOfPossessionFailed(MeshError):
    pass


class NoIdentity(MeshError):
    pass


class PeerUnattested(MeshError):
    def __init__(self, peer: str, cause: MeshError):
        super().__init__(f"{peer}: {type(cause).__name__}")
        self.peer = peer
        self.cause = cause


class RenewalFailed(MeshError):
    def __init__(self, reason: Reason | str):
        super().__init__(str(getattr(reason, "value", reason)))
        self.reason = reason


@dataclass(frozen=True)
class MeshIdentity:
    cert: MeshCertificate
    private: bytes = field(repr=False)

    @property
    def pod_id(self) -> str:
        return self.cert.pod_id


def verify_peer_certificate(cert: MeshCertificate, cds_pub: bytes, now: int) -> None:
    if not cert.signature_valid(cds_pub):
        raise UntrustedIssuer(cert.pod_id)
    if now < cert.not_before:
        raise NotYetValid(cert.pod_id)
    if now > cert.not_after:
        raise Expired(cert.pod_id)


class MeshChannel:
    def __init__(
        self,
        channel_id: int,
        initiator: MeshCertificate,
        responder: MeshCertificate,
        established_at: int,
        keys: dict[str, bytes],
        rng: Optional[RandomSource] = None,
    ):
        self.channel_id = channel_id
        self.local = initiator
        self.remote = responder
        self.established_at = established_at
        self._keys = keys
        self._rng = rng
        self._seq = {name: 0 for name in keys}

    @property
    def presented_subjects(self) -> tuple[tuple[str, str], tuple[str, str]]:
        return (self.local.subject, self.remote.subject)

    def usable(self, now: int) -> bool:
        return self.local.valid_at(now) and self.remote.valid_at(now)

    def seal(self, sender: str, plaintext: bytes) -> bytes:
        seq = self._seq[sender]
        self._seq[sender] = seq + 1
        header = struct.pack(">IQ", self.channel_id, seq)
        return header + crypto.aead_seal(self._keys[sender], plaintext, header, rng=self._rng)

    def open(self, sender: str, frame: bytes) -> bytes:
        header, ct = frame[:12], frame[12:]
        return crypto.aead_open(self._keys[sender], ct, header)


def _session_keys(mix: bytes, transcript: bytes) -> tuple[bytes, bytes, bytes]:
    th = crypto.digest(transcript)
    okm = crypto.hkdf(mix, _HANDSHAKE_INFO + th, length=96)
    return okm[:32], okm[32:64], okm[64:]


def handshake(
    initiator: MeshIdentity,
    responder: MeshIdentity,
    now: int,
    cds_pub: bytes,
    rng: Optional[RandomSource] = None,
    channel_id: int = 0,
) -> tuple[MeshChannel, bytes]:
    """Mutual certificate check plus key agreement.

    Returns the channel and the handshake bytes an observer sees (public
    values only). Ephemeral private keys do not outlive this call.
    """
    verify_peer_certificate(responder.cert, cds_pub, now)
    verify_peer_certificate(initiator.cert, cds_pub, now)
    ei = crypto.kem_keypair(rng)
    er = crypto.kem_keypair(rng)
    hello = b"".join(
        [
            struct.pack(">I", channel_id),
            initiator.cert.to_bytes(),
            ei.public,
            responder.cert.to_bytes(),
            er.public,
        ]
    )
    si_pub, sr_pub = initiator.cert.subject_pubkey, responder.cert.subject_pubkey
    try:
        mix_i = crypto.dh(ei.private, er.public) + crypto.dh(ei.private, sr_pub) + crypto.dh(
            initiator.private, er.public
        )
        mix_r = crypto.dh(er.private, ei.public) + crypto.dh(responder.private, ei.public) + crypto.dh(
            er.private, si_pub
        )
    except crypto.Corrupt as exc:
        raise ProofOfPossessionFailed(str(exc)) from exc
    i2r, r2i, confirm_i = _session_keys(mix_i, hello)
    i2r_r, r2i_r, confirm_r = _session_keys(mix_r, hello)
    tag_i = crypto.hmac(confirm_i, b"initiator" + hello)
    tag_r = crypto.hmac(confirm_r, b"responder" + hello)
    if tag_i != crypto.hmac(confirm_r, b"initiator" + hello) or tag_r != crypto.hmac(
        confirm_i, b"responder" + hello
    ):
        raise ProofOfPossessionFailed("key confirmation mismatch")
    keys = {initiator.pod_id: i2r, responder.pod_id: r2i}
    if initiator.pod_id == responder.pod_id:
        raise MeshError("a pod cannot open a channel to itself")
    channel = MeshChannel(channel_id, initiator.cert, responder.cert, now, keys, rng)
    return channel, hello + tag_i + tag_r


class ArrangementMode(str, enum.Enum):
    NODE_PROXY = "node_proxy"
    SIDECAR = "sidecar"


class ProxyArrangement:
    """Who holds a pod's mesh identity: a shared node proxy or a per-pod sidecar."""

    def __init__(self, mode: ArrangementMode, owner: str):
        self.mode = ArrangementMode(mode)
        self.owner = owner
        self._store: dict[str, MeshIdentity] = {}
        self._lock = threading.Lock()

    def install(self, pod_id: str, identity: MeshIdentity) -> None:
        with self._lock:
            if self.mode is ArrangementMode.SIDECAR and set(self._store) - {pod_id}:
                raise MeshError("a sidecar holds exactly one identity")
            self._store[pod_id] = identity

    def remove(self, pod_id: str) -> None:
        with self._lock:
            self._store.pop(pod_id, None)

    def identity_for(self, pod_id: str) -> MeshIdentity:
        with self._lock:
            identity = self._store.get(pod_id)
        if identity is None:
            raise NoIdentity(pod_id)
        return identity

    def has(self, pod_id: str) -> bool:
        return pod_id in self._store

    @property
    def cert_store(self) -> dict[str, MeshCertificate]:
        return {k: v.cert for k, v in self._store.items()}


Handler = Callable[[str, bytes], bytes]


class Mesh:
    """Transparent interception: workloads hand plaintext to ``request``."""

    def __init__(self, cds_pub: bytes, network: Network, rng: Optional[RandomSource] = None):
        self.cds_pub = cds_pub
        self.network = network
        self._rng = rng
        self._endpoints: dict[str, tuple[ProxyArrangement, Optional[Handler], str]] = {}
        self._channels: dict[tuple[str, str], MeshChannel] = {}
        self._next_channel = 1
        self.handshakes: list[tuple[str, str, tuple]] = []
        self.now = 0
        self.on_channel: Optional[Callable[[MeshChannel], None]] = None

    def attach(self, pod_id: str, arrangement: ProxyArrangement, handler: Optional[Handler] = None, host: str = "") -> None:
        # a re-pointed endpoint is a new peer: it must handshake again
        for key in [k for k in self._channels if pod_id in k]:
            del self._channels[key]
        self._endpoints[pod_id] = (arrangement, handler, host or arrangement.owner)

    def detach(self, pod_id: str) -> None:
        self._endpoints.pop(pod_id, None)
        for key in [k for k in self._channels if pod_id in k]:
            del self._channels[key]

    def set_cds_key(self, cds_pub: bytes) -> None:
        self.cds_pub = cds_pub
        self._channels.clear()

    def attached(self, pod_id: str) -> bool:
        return pod_id in self._endpoints

    def host_of(self, pod_id: str) -> str:
        return self._endpoints[pod_id][2]

    def _identity(self, pod_id: str) -> MeshIdentity:
        if pod_id not in self._endpoints:
            raise NoIdentity(pod_id)
        return self._endpoints[pod_id][0].identity_for(pod_id)

    def channel(self, src: str, dst: str, now: int) -> MeshChannel:
        local = self._identity(src)
        try:
            remote = self._identity(dst)
        except NoIdentity as exc:
            raise PeerUnattested(dst, exc) from exc
        existing = self._channels.get((src, dst))
        if (
            existing is not None
            and existing.usable(now)
            and existing.local == local.cert
            and existing.remote == remote.cert
        ):
            return existing
        try:
            verify_peer_certificate(local.cert, self.cds_pub, now)
        except MeshError as exc:
            raise NoIdentity(f"{src}: {type(exc).__name__}") from exc
        try:
            channel, hello = handshake(local, remote, now, self.cds_pub, self._rng, self._next_channel)
        except MeshError as exc:
            raise PeerUnattested(dst, exc) from exc
        self._next_channel += 1
        self.network.transmit(self.host_of(src), self.host_of(dst), hello, "mesh-handshake")
        self.handshakes.append((src, dst, channel.presented_subjects))
        self._channels[(src, dst)] = channel
        if self.on_channel is not None:
            self.on_channel(channel)
        return channel

    def probe(self, src: str, dst: str, now: int) -> Optional[MeshError]:
        """Health check: None if a handshake to ``dst`` succeeds."""
        try:
            self.channel(src, dst, now)
        except MeshError as exc:
            return exc
        return None

    def request(self, src: str, dst: str, payload: bytes, now: int) -> bytes:
        """Send ``payload`` from ``src`` to ``dst`` and return the handler's reply.

        Both legs cross the simulated wire as channel frames, even when the
        two pods share a node.
        """
        self.now = now
        channel = self.channel(src, dst, now)
        frame = channel.seal(src, payload)
        self.network.transmit(self.host_of(src), self.host_of(dst), frame, "mesh-frame")
        handler = self._endpoints[dst][1]
        inbound = channel.open(src, frame)
        reply = handler(src, inbound) if handler is not None else b""
        back = channel.seal(dst, reply)
        self.network.transmit(self.host_of(dst), self.host_of(src), back, "mesh-frame")
        return channel.open(dst, back)

    intercept_send = request


def renewal_due(cert: MeshCertificate, now: int, fraction: float = RENEWAL_FRACTION) -> bool:
    return now >= cert.not_before + int((cert.not_after - cert.not_before) * fraction)


def renew(
    attest: Callable[[bytes], tuple[Evidence, KeyPair]],
    cds: CdsReplica,
    subject: tuple[str, str],
    now: int,
    role: Role = Role.WORKLOAD,
    hint: str = "",
) -> MeshIdentity:
    """Re-attestation: fresh challenge, fresh evidence, key binding re-checked.

    ``attest(nonce)`` returns evidence over the nonce and the key pair the
    evidence binds. On failure the caller keeps its old certificate.
    """
    nonce = cds.issue_challenge("/".join(subject), now)
    evidence, key = attest(nonce)
    try:
        cert = cds.attest_and_issue(evidence, nonce, key.public, now, role, subject, hint)
    except AppraisalFailed as exc:
        raise RenewalFailed(exc.reason) from exc
    except KeyBindingMismatch as exc:
        raise RenewalFailed(Reason.KEY_BINDING_MISMATCH) from exc
    return MeshIdentity(cert, key.private)
