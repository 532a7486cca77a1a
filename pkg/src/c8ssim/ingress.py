"""External entry points.

:class:`PassthroughIngress` terminates the client session inside its CVM and
relays over the mesh to a pod from its live pool. :class:`EncryptedRouter`
never decrypts: it routes multi-recipient envelopes by their plaintext
stanza hints, locally or through exactly one peer router.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

from . import crypto
from .cds import CdsError, CdsReplica, CdsUnavailable, FreshnessBeacon
from .crypto import RandomSource
from .envelope import MultiRecipientEnvelope, encrypt_multi, parse_hints
from .mesh import Mesh, MeshError, MeshIdentity
from .tee import AttestationReport, CvmHandle
from .wire import Reader, Writer

TLS_KEY_REGION = "tls-private-key"
REFRESH_FRACTION = 0.8
_SESSION_INFO = b"c8s/ingress-session/v1"


class IngressError(Exception):
    pass


class NoHealthyPeer(IngressError):
    pass


class NoRouteForAnyHint(IngressError):
    pass


class UnknownSession(IngressError):
    pass


@dataclass(frozen=True)
class IngressPresentation:
    tls_pubkey: bytes
    report: AttestationReport
    beacon: FreshnessBeacon

    def to_bytes(self) -> bytes:
        w = Writer().blob(self.tls_pubkey).blob(self.report.to_bytes())
        return w.blob(self.beacon.to_bytes()).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "IngressPresentation":
        r = Reader(data)
        p = cls(r.blob(), AttestationReport.from_bytes(r.blob()), FreshnessBeacon.from_bytes(r.blob()))
        r.done()
        return p


def session_keys(shared: bytes, client_pub: bytes, server_pub: bytes) -> tuple[bytes, bytes]:
    okm = crypto.hkdf(shared, _SESSION_INFO + client_pub + server_pub, length=64)
    return okm[:32], okm[32:]


def seal_frame(key: bytes, plaintext: bytes, rng: Optional[RandomSource] = None) -> bytes:
    """Length-prefixed AEAD frame used on the client <-> ingress session."""
    ct = crypto.aead_seal(key, plaintext, rng=rng)
    return Writer().blob(ct).getvalue()


def open_frame(key: bytes, frame: bytes) -> bytes:
    r = Reader(frame)
    ct = r.blob()
    r.done()
    return crypto.aead_open(key, ct)


def encode_response(pod_id: str, measurement: bytes, body: bytes) -> bytes:
    return Writer().text(pod_id).blob(measurement).blob(body).getvalue()


def decode_response(data: bytes) -> tuple[str, bytes, bytes]:
    r = Reader(data)
    out = (r.text(), r.blob(), r.blob())
    r.done()
    return out


class Balancer(Protocol):
    def pick(self, pool: Sequence[str]) -> str: ...


class RoundRobin:
    def __init__(self) -> None:
        self._counter = 0

    def pick(self, pool: Sequence[str]) -> str:
        target = pool[self._counter % len(pool)]
        self._counter += 1
        return target


class PassthroughIngress:
    def __init__(
        self,
        pod_id: str,
        cvm: CvmHandle,
        mesh: Mesh,
        window: int = 300,
        balancer: Optional[Balancer] = None,
        rng: Optional[RandomSource] = None,
    ):
        self.pod_id = pod_id
        self.cvm = cvm
        self.mesh = mesh
        self.window = window
        self.balancer = balancer or RoundRobin()
        self._rng = rng
        tls = crypto.kem_keypair(rng)
        cvm.store(TLS_KEY_REGION, tls.private)
        self.tls_pubkey = tls.public
        self.mesh_identity: Optional[MeshIdentity] = None
        self.current_report: Optional[AttestationReport] = None
        self.beacon: Optional[FreshnessBeacon] = None
        self.live_pool: list[str] = []
        self.excluded: dict[str, str] = {}
        self._sessions: dict[int, tuple[bytes, bytes]] = {}
        self._session_ids = itertools.count(1)
        self.attestations = 0
        self.on_forward: Optional[Callable[[], None]] = None

    def needs_refresh(self, now: int) -> bool:
        if self.beacon is None:
            return True
        return now - self.beacon.timestamp >= int(self.window * REFRESH_FRACTION)

    def refresh_attestation(self, cds: CdsReplica, now: int) -> AttestationReport:
        """New beacon from the CDS, then a report carrying it in REPORT_DATA.

        On CDS failure the stale report is kept; clients reject it once the
        window lapses.
        """
        try:
            beacon = cds.issue_beacon(now, self.mesh_identity.cert if self.mesh_identity else None)
        except CdsError as exc:
            raise CdsUnavailable(str(exc)) from exc
        report = self.cvm.generate_report(beacon.signature, self.tls_pubkey)
        self.attestations += 1
        self.beacon, self.current_report = beacon, report
        return report

    def presentation(self) -> IngressPresentation:
        if self.current_report is None or self.beacon is None:
            raise IngressError("ingress has no attestation yet")
        return IngressPresentation(self.tls_pubkey, self.current_report, self.beacon)

    # -- pool membership
    def update_pool(self, endpoints: Sequence[str], now: int) -> list[str]:
        """Admit exactly the endpoints whose raTLS handshake succeeds."""
        live, self.excluded = [], {}
        for ep in endpoints:
            err = self.mesh.probe(self.pod_id, ep, now)
            if err is None:
                live.append(ep)
            else:
                self.excluded[ep] = type(getattr(err, "cause", err)).__name__
        self.live_pool = live
        return live

    # -- client sessions
    def open_session(self, client_pub: bytes) -> int:
        shared = crypto.dh(self.cvm.load(TLS_KEY_REGION), client_pub)
        sid = next(self._session_ids)
        self._sessions[sid] = session_keys(shared, client_pub, self.tls_pubkey)
        return sid

    def handle_frame(self, session_id: int, frame: bytes, now: int) -> bytes:
        if session_id not in self._sessions:
            raise UnknownSession(str(session_id))
        c2s, s2c = self._sessions[session_id]
        request = open_frame(c2s, frame)
        response = self.passthrough_handle(request, now)
        return seal_frame(s2c, response, self._rng)

    def passthrough_handle(self, request: bytes, now: int) -> bytes:
        """Forward one request over the mesh; skip peers whose handshake fails."""
        if self.on_forward is not None:
            self.on_forward()
        attempts = len(self.live_pool)
        while attempts and self.live_pool:
            attempts -= 1
            target = self.balancer.pick(self.live_pool)
            try:
                return self.mesh.request(self.pod_id, target, request, now)
            except MeshError as exc:
                self.live_pool.remove(target)
                self.excluded[target] = type(getattr(exc, "cause", exc)).__name__
        raise NoHealthyPeer("no peer in the live pool completed a handshake")


@dataclass(frozen=True)
class RouteDecision:
    target: str
    peer: Optional[str] = None

    @property
    def hops(self) -> int:
        return 0 if self.peer is None else 1


def encrypted_route(env_bytes: bytes, local_pods: dict[str, str], peers: dict[str, str]) -> RouteDecision:
    """First hint naming a local pod wins; otherwise the first hint hosted by a peer node."""
    hints = parse_hints(env_bytes)
    for hint in hints:
        if hint in local_pods:
            return RouteDecision(local_pods[hint])
    for hint in hints:
        if hint in peers:
            return RouteDecision(hint, peers[hint])
    raise NoRouteForAnyHint(",".join(hints))


_FORWARD = b"\x01"


class EncryptedRouter:
    """Per-node router. Only header parsing and table lookups happen here."""

    def __init__(self, node: str, pod_id: str, mesh: Mesh):
        self.node = node
        self.pod_id = pod_id
        self.mesh = mesh
        self.local_pods: dict[str, str] = {}
        self.peers: dict[str, str] = {}
        self.peer_routers: dict[str, str] = {}
        self.compromised = False
        self.adversary_log: list[bytes] = []
        self.crypto_ops = 0
        self.deliveries: list[tuple[str, int]] = []

    def _observe(self, *items: bytes) -> None:
        if self.compromised:
            self.adversary_log.extend(items)

    def route(self, env_bytes: bytes) -> RouteDecision:
        with crypto.metered() as ops:
            decision = encrypted_route(env_bytes, self.local_pods, self.peers)
        self.crypto_ops += sum(ops.values())
        return decision

    def _deliver_local(self, pod: str, env_bytes: bytes, now: int, hops: int) -> bytes:
        reply = self.mesh.request(self.pod_id, pod, env_bytes, now)
        self.deliveries.append((pod, hops))
        self._observe(reply)
        return reply

    def handle(self, env_bytes: bytes, now: int) -> bytes:
        self._observe(env_bytes, "\n".join(parse_hints(env_bytes)).encode())
        decision = self.route(env_bytes)
        if decision.peer is None:
            return self._deliver_local(decision.target, env_bytes, now, 0)
        peer_router = self.peer_routers[decision.peer]
        reply = self.mesh.request(self.pod_id, peer_router, _FORWARD + env_bytes, now)
        self._observe(reply)
        return reply

    def handle_peer(self, src: str, message: bytes) -> bytes:
        """Mesh handler for the peer leg; a forwarded envelope is never forwarded again."""
        tag, env_bytes = message[:1], message[1:]
        if tag != _FORWARD:
            raise IngressError("unexpected peer message")
        self._observe(env_bytes)
        with crypto.metered() as ops:
            hints = parse_hints(env_bytes)
            target = next((self.local_pods[h] for h in hints if h in self.local_pods), None)
        self.crypto_ops += sum(ops.values())
        if target is None:
            raise NoRouteForAnyHint("forwarded envelope has no local recipient")
        return self._deliver_local(target, env_bytes, self.mesh.now, 1)


def respond_encrypted(
    response: bytes,
    client_pub: bytes,
    pod_pub: bytes,
    rng: Optional[RandomSource] = None,
) -> MultiRecipientEnvelope:
    """Single-recipient envelope back to the key carried in the request."""
    return encrypt_multi(response, [(client_pub, "")], pod_pub, rng)
