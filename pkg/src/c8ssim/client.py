"""Attestation-aware client.

Trust starts from two out-of-band values: the manufacturer root and the
expected CDS measurement. Everything else is derived by verification.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import yaml

from . import crypto
from .cds import PolicyManifest, Role
from .crypto import RandomSource
from .envelope import MultiRecipientEnvelope, decrypt, encrypt_multi
from .ingress import (
    IngressPresentation,
    decode_response,
    open_frame,
    seal_frame,
    session_keys,
)
from .network import Network
from .service import EndpointError, unwrap_response
from .tee import AttestationReport
from .wire import Malformed, Reader, Writer

DEFAULT_REFRESH = 600
DEFAULT_WINDOW = 300
DEFAULT_SESSION_LIFETIME = 3600

Transport = Callable[[str, bytes], bytes]


class ClientError(Exception):
    pass


class CdsAttestationFailed(ClientError):
    pass


class MeasurementMismatch(ClientError):
    pass


class BadManifestSignature(ClientError):
    pass


class SessionStale(ClientError):
    pass


class PoolMismatch(ClientError):
    pass


class EmptyPool(ClientError):
    pass


class UnknownSubsetMember(ClientError):
    pass


class IngressRejected(ClientError):
    def __init__(self, reason: "IngressReason"):
        super().__init__(reason.value)
        self.reason = reason


class IngressReason(str, enum.Enum):
    OK = "Ok"
    BAD_REPORT = "BadReport"
    BAD_BEACON = "BadBeacon"
    STALE = "Stale"
    REPORT_DATA_MISMATCH = "ReportDataMismatch"
    KEY_BINDING_MISMATCH = "KeyBindingMismatch"
    UNKNOWN_MEASUREMENT = "UnknownMeasurement"
    TCB_TOO_LOW = "TcbTooLow"


class ManifestPath(str, enum.Enum):
    CHAIN = "chain"
    ATTESTATION = "attestation"


@dataclass
class TrustStore:
    cds_pubkey: bytes
    manifest: PolicyManifest
    roots: frozenset
    fetched_at: int
    refresh_interval: int = DEFAULT_REFRESH

    def fresh(self, now: int) -> bool:
        return now - self.fetched_at < self.refresh_interval


CHECKS = ("report", "beacon", "window", "report_data", "key_binding", "allowlist")


def verify_ingress(
    p: IngressPresentation,
    store: TrustStore,
    now: int,
    window: int = DEFAULT_WINDOW,
    checks: Iterable[str] = CHECKS,
) -> tuple[bool, IngressReason]:
    """Run the ingress checks in fixed order; never raises.

    ``checks`` exists so tests can drop one check and show a forgery slips
    through. The report's own chain and signature are verified first.
    """
    enabled = set(checks)
    report = p.report
    if "report" in enabled and not report.verify(store.roots):
        return False, IngressReason.BAD_REPORT
    if "beacon" in enabled and not p.beacon.verify(store.cds_pubkey):
        return False, IngressReason.BAD_BEACON
    if "window" in enabled:
        age = now - p.beacon.timestamp
        if age < 0 or age > window:
            return False, IngressReason.STALE
    if "report_data" in enabled and report.report_data != p.beacon.signature:
        return False, IngressReason.REPORT_DATA_MISMATCH
    if "key_binding" in enabled and not report.binds(p.tls_pubkey):
        return False, IngressReason.KEY_BINDING_MISMATCH
    if "allowlist" in enabled:
        entry = store.manifest.allowlist.lookup(report.measurement, Role.INGRESS)
        if entry is None:
            return False, IngressReason.UNKNOWN_MEASUREMENT
        if report.tcb < entry.min_tcb:
            return False, IngressReason.TCB_TOO_LOW
    return True, IngressReason.OK


@dataclass
class ClientConfig:
    cds_endpoint: str
    expected_cds_measurement: bytes
    manufacturer_roots: tuple[bytes, ...]
    window: int = DEFAULT_WINDOW
    refresh: int = DEFAULT_REFRESH

    @classmethod
    def from_dict(cls, raw: dict) -> "ClientConfig":
        roots = raw.get("manufacturer_roots") or [raw["manufacturer_root"]]
        return cls(
            cds_endpoint=str(raw["cds_endpoint"]),
            expected_cds_measurement=bytes.fromhex(raw["expected_cds_measurement"]),
            manufacturer_roots=tuple(bytes.fromhex(r) for r in roots),
            window=int(raw.get("window", DEFAULT_WINDOW)),
            refresh=int(raw.get("refresh", DEFAULT_REFRESH)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ClientConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def to_dict(self) -> dict:
        return {
            "cds_endpoint": self.cds_endpoint,
            "expected_cds_measurement": self.expected_cds_measurement.hex(),
            "manufacturer_roots": [r.hex() for r in self.manufacturer_roots],
            "window": self.window,
            "refresh": self.refresh,
        }


@dataclass
class Session:
    session_id: int
    c2s: bytes = field(repr=False)
    s2c: bytes = field(repr=False)
    presentation: IngressPresentation
    verified_at: int
    expires_at: int

    def live(self, now: int) -> bool:
        return now <= self.expires_at


@dataclass(frozen=True)
class Response:
    body: bytes
    pod_id: str
    measurement: bytes


class IngressLink:
    """What the client needs from an ingress: hello, session open, frame exchange."""

    def presentation(self) -> IngressPresentation: ...

    def open_session(self, client_pub: bytes) -> int: ...

    def handle_frame(self, session_id: int, frame: bytes, now: int) -> bytes: ...


class AttestedClient:
    def __init__(
        self,
        config: ClientConfig,
        transport: Transport,
        rng: Optional[RandomSource] = None,
        network: Optional[Network] = None,
        name: str = "client",
        session_lifetime: int = DEFAULT_SESSION_LIFETIME,
    ):
        self.config = config
        self.transport = transport
        self._rng = rng
        self.network = network
        self.name = name
        self.session_lifetime = session_lifetime
        self.store: Optional[TrustStore] = None
        self.session: Optional[Session] = None
        self.cds_round_trips = 0
        self.cache_hits = 0
        self.call_order: list[str] = []
        self.rejections: list[IngressReason] = []
        self.envelope_key = crypto.kem_keypair(rng)

    def _call(self, endpoint: str, body: bytes) -> bytes:
        self.cds_round_trips += 1
        self.call_order.append(endpoint)
        return unwrap_response(self.transport(endpoint, body))

    # -- bootstrap
    def bootstrap(self, now: int, path: ManifestPath = ManifestPath.ATTESTATION) -> TrustStore:
        """Attest the CDS, then fetch and verify the manifest under the attested key.

        Within ``refresh`` seconds of the last fetch the cached store is
        returned without contacting the CDS. ``ManifestPath.CHAIN`` reuses a
        previously attested CDS key instead of re-attesting.
        """
        if self.store is not None and self.store.fresh(now):
            self.cache_hits += 1
            return self.store
        roots = frozenset(self.config.manufacturer_roots)
        if path is ManifestPath.CHAIN and self.store is not None:
            cds_pub = self.store.cds_pubkey
        else:
            cds_pub = self._attest_cds(roots)
        try:
            manifest = PolicyManifest.from_bytes(self._call("get-manifest", Writer().u64(now).getvalue()))
        except (Malformed, EndpointError) as exc:
            raise BadManifestSignature(str(exc)) from exc
        if manifest.cds_pubkey != cds_pub or not manifest.verify(cds_pub):
            raise BadManifestSignature("manifest not signed by the attested CDS key")
        self.store = TrustStore(cds_pub, manifest, roots, now, self.config.refresh)
        return self.store

    def _attest_cds(self, roots: frozenset) -> bytes:
        nonce = crypto.random_bytes(32, self._rng)
        try:
            r = Reader(self._call("get-cds-report", Writer().blob(nonce).getvalue()))
            report, cds_pub = AttestationReport.from_bytes(r.blob()), r.blob()
            r.done()
        except (Malformed, EndpointError) as exc:
            raise CdsAttestationFailed(str(exc)) from exc
        if not report.verify(roots) or report.nonce != nonce:
            raise CdsAttestationFailed("CDS report does not verify against the manufacturer root")
        if report.measurement != self.config.expected_cds_measurement:
            raise MeasurementMismatch(report.measurement.hex())
        if not report.binds(cds_pub):
            raise CdsAttestationFailed("offered key is not the key the CDS report binds")
        return cds_pub

    # -- default path
    def connect(self, ingress: IngressLink, now: int) -> Session:
        if self.store is None:
            raise ClientError("bootstrap first")
        self.bootstrap(now)
        presentation = ingress.presentation()
        if self.network is not None:
            self.network.transmit("ingress", self.name, presentation.to_bytes(), "ingress-hello")
        accepted, reason = verify_ingress(presentation, self.store, now, self.config.window)
        if not accepted:
            self.rejections.append(reason)
            raise IngressRejected(reason)
        eph = crypto.kem_keypair(self._rng)
        if self.network is not None:
            self.network.transmit(self.name, "ingress", eph.public, "ingress-session")
        sid = ingress.open_session(eph.public)
        c2s, s2c = session_keys(crypto.dh(eph.private, presentation.tls_pubkey), eph.public, presentation.tls_pubkey)
        expires = min(presentation.beacon.timestamp + self.config.window, now + self.session_lifetime)
        self.session = Session(sid, c2s, s2c, presentation, now, expires)
        self.ingress = ingress
        return self.session

    def submit(self, payload: bytes, now: int, ingress: Optional[IngressLink] = None) -> Response:
        """Send over the verified session, re-verifying once if it went stale."""
        ingress = ingress or getattr(self, "ingress", None)
        if ingress is None:
            raise ClientError("no ingress")
        for attempt in range(2):
            try:
                return self._submit_once(ingress, payload, now)
            except SessionStale:
                if attempt:
                    raise
                self.connect(ingress, now)
        raise AssertionError("unreachable")

    def _submit_once(self, ingress: IngressLink, payload: bytes, now: int) -> Response:
        session = self.session
        if session is None or not session.live(now):
            raise SessionStale("session needs re-verification")
        frame = seal_frame(session.c2s, payload, self._rng)
        if self.network is not None:
            self.network.transmit(self.name, "ingress", frame, "ingress-frame")
        reply = ingress.handle_frame(session.session_id, frame, now)
        if self.network is not None:
            self.network.transmit("ingress", self.name, reply, "ingress-frame")
        pod_id, measurement, body = decode_response(open_frame(session.s2c, reply))
        return self.check_response(pod_id, measurement, body)

    def check_response(self, pod_id: str, measurement: bytes, body: bytes) -> Response:
        assert self.store is not None
        if self.store.manifest.pool_member(pod_id) is None:
            raise PoolMismatch(pod_id)
        return Response(body, pod_id, measurement)

    # -- multi-recipient path
    def encrypt_for_pool(
        self, payload: bytes, subset: Optional[Iterable[str]] = None
    ) -> MultiRecipientEnvelope:
        if self.store is None:
            raise ClientError("bootstrap first")
        return encrypt_for_pool(self.store, payload, self.envelope_key.public, subset, self._rng)

    def open_response(self, env: MultiRecipientEnvelope) -> bytes:
        return decrypt(env, self.envelope_key.private)


def encrypt_for_pool(
    store: TrustStore,
    payload: bytes,
    sender_pub: bytes,
    subset: Optional[Iterable[str]] = None,
    rng: Optional[RandomSource] = None,
) -> MultiRecipientEnvelope:
    pool = store.manifest.pool
    if not pool:
        raise EmptyPool("manifest lists no attested pods")
    if subset is None:
        members = list(pool)
    else:
        wanted = list(subset)
        by_id = {m.pod_id: m for m in pool}
        missing = [p for p in wanted if p not in by_id]
        if missing:
            raise UnknownSubsetMember(", ".join(missing))
        members = [by_id[p] for p in wanted]
        if not members:
            raise EmptyPool("empty subset")
    return encrypt_multi(payload, [(m.pubkey, m.hint) for m in members], sender_pub, rng)
