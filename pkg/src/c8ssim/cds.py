"""Certificate Distribution Service: verifier, mesh CA, beacon and key broker.

A :class:`CdsReplica` runs inside an emulated CVM. Its CA signing key lives
only in that CVM's sealed memory. :func:`bootstrap` performs the one-time
operator attestation; further replicas join through
:meth:`CdsReplica.enroll_replica`, which wraps the CA key to the newcomer's
attested public key.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional, Sequence

from . import crypto
from .crypto import KeyPair, RandomSource, WrappedKey
from .tee import (
    AttestationReport,
    ComposedEvidence,
    CvmHandle,
    Evidence,
    Platform,
    evidence_to_bytes,
    launch_cvm,
)
from .wire import Reader, Writer

ALLOWLIST_DOMAIN = "allowlist"
MANIFEST_DOMAIN = "manifest"
CERT_DOMAIN = "mesh-cert"
BEACON_DOMAIN = "c8s/freshness-beacon/v1"
ENROLL_INFO = b"c8s/cds-enroll/v1"
SECRET_INFO = b"c8s/secret/"

CA_KEY_REGION = "ca-signing-key"


class Role(str, enum.Enum):
    WORKLOAD = "workload"
    INGRESS = "ingress"
    CDS = "cds"
    ATTESTATION_SERVICE = "attestation_service"


class Reason(str, enum.Enum):
    BAD_CHAIN = "BadChain"
    BAD_SIGNATURE = "BadSignature"
    UNKNOWN_MEASUREMENT = "UnknownMeasurement"
    TCB_TOO_LOW = "TcbTooLow"
    NONCE_MISMATCH = "NonceMismatch"
    KEY_BINDING_MISMATCH = "KeyBindingMismatch"


class BrokerMode(str, enum.Enum):
    WRAPPED = "wrapped"
    DIRECT = "direct"


class CdsError(Exception):
    pass


class OperatorRejected(CdsError):
    pass


class BadAllowListSignature(CdsError):
    pass


class BadSignature(CdsError):
    pass


class StaleVersion(CdsError):
    pass


class KeyBindingMismatch(CdsError):
    pass


class NotAppraised(CdsError):
    pass


class Unauthenticated(CdsError):
    pass


class MeasurementMismatch(CdsError):
    pass


class AppraisalFailed(CdsError):
    def __init__(self, reason: Reason):
        super().__init__(reason.value)
        self.reason = reason


class ReleaseDenied(CdsError):
    def __init__(self, condition: int, detail: str = ""):
        super().__init__(f"release condition {condition} failed {detail}".strip())
        self.condition = condition
        self.detail = detail


class DepositRefused(CdsError):
    pass


class KmsRefused(CdsError):
    pass


class CdsUnavailable(CdsError):
    pass


@dataclass(frozen=True)
class CdsConfig:
    cert_lifetime: int = 6 * 3600
    nonce_ttl: int = 60
    freshness_window: int = 300


# -- signed policy structures ------------------------------------------------


@dataclass(frozen=True, order=True)
class AllowListEntry:
    measurement: bytes
    min_tcb: int
    role: Role


@dataclass(frozen=True)
class AllowList:
    """Operator-signed reference values.

    ``images`` carries the authorized image digests (digest, workload name);
    they are part of the operator-signed content so that nothing outside
    the operator can widen the image policy.
    """

    version: int
    entries: tuple[AllowListEntry, ...]
    images: tuple[tuple[bytes, str], ...] = ()
    operator_signature: bytes = b""

    def signed_bytes(self) -> bytes:
        w = Writer().u64(self.version).u32(len(self.entries))
        for e in sorted(self.entries):
            w.blob(e.measurement).u64(e.min_tcb).text(e.role.value)
        w.u32(len(self.images))
        for d, name in sorted(self.images):
            w.blob(d).text(name)
        return w.getvalue()

    @classmethod
    def create(
        cls,
        version: int,
        entries: Iterable[AllowListEntry],
        images: Iterable[tuple[bytes, str]],
        operator_key: KeyPair,
    ) -> "AllowList":
        unsigned = cls(version, tuple(sorted(entries)), tuple(sorted(images)))
        sig = crypto.sign(operator_key.private, ALLOWLIST_DOMAIN, unsigned.signed_bytes())
        return replace(unsigned, operator_signature=sig)

    def verify(self, operator_pub: bytes) -> bool:
        return crypto.verify(
            operator_pub, ALLOWLIST_DOMAIN, self.signed_bytes(), self.operator_signature
        )

    def lookup(self, measurement: bytes, role: Role) -> Optional[AllowListEntry]:
        for e in self.entries:
            if e.measurement == measurement and e.role == role:
                return e
        return None

    def image_authorized(self, image_digest: bytes) -> bool:
        return any(d == image_digest for d, _ in self.images)

    def to_bytes(self) -> bytes:
        return Writer().raw(self.signed_bytes()).blob(self.operator_signature).getvalue()

    @classmethod
    def read(cls, r: Reader) -> "AllowList":
        version = r.u64()
        entries = tuple(
            AllowListEntry(r.blob(), r.u64(), Role(r.text())) for _ in range(r.u32())
        )
        images = tuple((r.blob(), r.text()) for _ in range(r.u32()))
        return cls(version, entries, images, r.blob())

    @classmethod
    def from_bytes(cls, data: bytes) -> "AllowList":
        r = Reader(data)
        al = cls.read(r)
        r.done()
        return al


@dataclass(frozen=True, order=True)
class PoolMember:
    pod_id: str
    pubkey: bytes
    hint: str


@dataclass(frozen=True)
class PolicyManifest:
    version: int
    allowlist: AllowList
    cds_pubkey: bytes
    ingress_identity: Optional[tuple[bytes, Role]]
    pool: tuple[PoolMember, ...]
    cds_signature: bytes = b""

    @property
    def image_digests(self) -> tuple[tuple[bytes, str], ...]:
        return self.allowlist.images

    def signed_bytes(self) -> bytes:
        w = Writer().u64(self.version).blob(self.allowlist.to_bytes()).blob(self.cds_pubkey)
        w.flag(self.ingress_identity is not None)
        if self.ingress_identity is not None:
            w.blob(self.ingress_identity[0]).text(self.ingress_identity[1].value)
        w.u32(len(self.pool))
        for m in self.pool:
            w.text(m.pod_id).blob(m.pubkey).text(m.hint)
        return w.getvalue()

    def verify(self, cds_pub: bytes) -> bool:
        return crypto.verify(cds_pub, MANIFEST_DOMAIN, self.signed_bytes(), self.cds_signature)

    def to_bytes(self) -> bytes:
        return Writer().raw(self.signed_bytes()).blob(self.cds_signature).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "PolicyManifest":
        r = Reader(data)
        version = r.u64()
        allowlist = AllowList.from_bytes(r.blob())
        cds_pub = r.blob()
        ingress = (r.blob(), Role(r.text())) if r.flag() else None
        pool = tuple(PoolMember(r.text(), r.blob(), r.text()) for _ in range(r.u32()))
        m = cls(version, allowlist, cds_pub, ingress, pool, r.blob())
        r.done()
        return m

    def pool_member(self, pod_id: str) -> Optional[PoolMember]:
        for m in self.pool:
            if m.pod_id == pod_id:
                return m
        return None


@dataclass(frozen=True)
class MeshCertificate:
    namespace: str
    pod_uid: str
    subject_pubkey: bytes
    measurement: bytes
    role: Role
    not_before: int
    not_after: int
    issuer_signature: bytes = b""

    @property
    def subject(self) -> tuple[str, str]:
        return (self.namespace, self.pod_uid)

    @property
    def pod_id(self) -> str:
        return f"{self.namespace}/{self.pod_uid}"

    def signed_bytes(self) -> bytes:
        w = Writer().text(self.namespace).text(self.pod_uid).blob(self.subject_pubkey)
        w.blob(self.measurement).text(self.role.value).u64(self.not_before).u64(self.not_after)
        return w.getvalue()

    def signature_valid(self, cds_pub: bytes) -> bool:
        return crypto.verify(cds_pub, CERT_DOMAIN, self.signed_bytes(), self.issuer_signature)

    def valid_at(self, now: int) -> bool:
        return self.not_before <= now <= self.not_after

    def to_bytes(self) -> bytes:
        return Writer().raw(self.signed_bytes()).blob(self.issuer_signature).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "MeshCertificate":
        r = Reader(data)
        cert = cls(
            r.text(), r.text(), r.blob(), r.blob(), Role(r.text()), r.u64(), r.u64(), r.blob()
        )
        r.done()
        return cert


@dataclass(frozen=True)
class FreshnessBeacon:
    timestamp: int
    signature: bytes

    @staticmethod
    def message(timestamp: int) -> bytes:
        return Writer().u64(timestamp).getvalue()

    def verify(self, cds_pub: bytes) -> bool:
        return crypto.verify(cds_pub, BEACON_DOMAIN, self.message(self.timestamp), self.signature)

    def to_bytes(self) -> bytes:
        return Writer().u64(self.timestamp).blob(self.signature).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "FreshnessBeacon":
        r = Reader(data)
        b = cls(r.u64(), r.blob())
        r.done()
        return b


@dataclass(frozen=True)
class AppraisalResult:
    accepted: bool
    reason: Optional[Reason]
    appraised_at: int
    evidence_digest: bytes
    role: Role
    measurement: bytes = b""


@dataclass(frozen=True)
class ReleasePolicy:
    secret_id: str
    allowed: frozenset[tuple[bytes, bytes]]
    mode: BrokerMode = BrokerMode.WRAPPED


@dataclass(frozen=True)
class DeliveryReceipt:
    secret_id: str
    delivered_at: int


def pod_image_digest(evidence: Evidence) -> bytes:
    """Image digest a requester asserts through its evidence.

    Pod-level reports carry it in the first 32 bytes of REPORT_DATA (written
    by the measured in-pod agent after gating); composed evidence carries it
    as ``pod_digest``.
    """
    if isinstance(evidence, ComposedEvidence):
        return evidence.pod_digest
    return evidence.report_data[: crypto.DIGEST_SIZE]


def evidence_measurement(evidence: Evidence) -> bytes:
    if isinstance(evidence, ComposedEvidence):
        return evidence.node_report.measurement
    return evidence.measurement


def evidence_binds(evidence: Evidence, public_key: bytes) -> bool:
    if isinstance(evidence, ComposedEvidence):
        return evidence.pod_pubkey == public_key
    return evidence.binds(public_key)


# -- external release parties ------------------------------------------------


class DepositService:
    """Customer-run holder of plaintext secrets (wrapped brokering)."""

    def __init__(self, roots: Iterable[bytes], rng: Optional[RandomSource] = None):
        self.roots = set(roots)
        self._rng = rng
        self._secrets: dict[str, tuple[bytes, frozenset]] = {}
        self.refusals = 0

    def deposit(self, secret_id: str, secret: bytes, allowed: Iterable[tuple[bytes, bytes]]):
        self._secrets[secret_id] = (secret, frozenset(allowed))

    def release(self, secret_id: str, evidence: Evidence, requester_pub: bytes) -> WrappedKey:
        if secret_id not in self._secrets:
            self.refusals += 1
            raise DepositRefused(f"unknown secret {secret_id}")
        secret, allowed = self._secrets[secret_id]
        report = evidence.node_report if isinstance(evidence, ComposedEvidence) else evidence
        pair = (evidence_measurement(evidence), pod_image_digest(evidence))
        if not report.verify(self.roots) or pair not in allowed or not evidence_binds(
            evidence, requester_pub
        ):
            self.refusals += 1
            raise DepositRefused(secret_id)
        return crypto.wrap_key(requester_pub, secret, SECRET_INFO + secret_id.encode(), self._rng)


class Kms:
    """Customer KMS that releases plaintext to an attested CDS (direct brokering)."""

    def __init__(
        self,
        roots: Iterable[bytes],
        expected_cds_measurement: bytes,
        rng: Optional[RandomSource] = None,
    ):
        self.roots = set(roots)
        self.expected = expected_cds_measurement
        self._rng = rng
        self._keys: dict[str, bytes] = {}
        self._nonces: set[bytes] = set()

    def put(self, secret_id: str, key: bytes) -> None:
        self._keys[secret_id] = key

    def challenge(self) -> bytes:
        nonce = crypto.random_bytes(32, self._rng)
        self._nonces.add(nonce)
        return nonce

    def release(self, secret_id: str, cds_report: AttestationReport, channel_pub: bytes) -> WrappedKey:
        if cds_report.nonce not in self._nonces:
            raise KmsRefused("unknown or reused nonce")
        self._nonces.discard(cds_report.nonce)
        if not cds_report.verify(self.roots) or cds_report.measurement != self.expected:
            raise KmsRefused("CDS attestation failed")
        if not cds_report.binds(channel_pub) or secret_id not in self._keys:
            raise KmsRefused(secret_id)
        return crypto.wrap_key(channel_pub, self._keys[secret_id], b"c8s/kms-channel", self._rng)


# -- the replica -------------------------------------------------------------


@dataclass
class _Challenge:
    requester: str
    expires_at: int


class CdsReplica:
    def __init__(
        self,
        cvm: CvmHandle,
        public_key: bytes,
        operator_pub: bytes,
        roots: Iterable[bytes],
        allowlist: AllowList,
        config: CdsConfig = CdsConfig(),
        rng: Optional[RandomSource] = None,
    ):
        self.cvm = cvm
        self.public_key = public_key
        self.operator_pub = operator_pub
        self.roots = set(roots)
        self.config = config
        self._rng = rng
        self._current = allowlist
        self._previous: Optional[AllowList] = None
        self._nonces: dict[bytes, _Challenge] = {}
        self._pool: dict[str, tuple[PoolMember, int]] = {}
        self._service_creds: dict[bytes, MeshCertificate] = {}
        self._policies: dict[str, ReleasePolicy] = {}
        self._manifest_cache: Optional[tuple[bytes, PolicyManifest]] = None
        self._manifest_version = 0
        self._lock = threading.RLock()
        self.running = True
        self.tap: Optional[Callable[[str, bytes], None]] = None
        self.transcript: list[bytes] = []
        self.certificates_issued = 0

    # -- lifecycle
    @property
    def measurement(self) -> bytes:
        return self.cvm.measurement

    def _check_running(self) -> None:
        if not self.running or not self.cvm.live:
            raise CdsUnavailable(self.cvm.id)

    def stop(self) -> None:
        self.running = False
        self.cvm.terminate()

    def _ca_key(self) -> bytes:
        return self.cvm.load(CA_KEY_REGION)

    def state_store(self) -> dict[str, list[str]]:
        """Long-lived key material held by this replica, by category."""
        return {
            "private_keys": [r for r in self.cvm.regions() if r == CA_KEY_REGION],
            "application_secrets": [r for r in self.cvm.regions() if r.startswith("hop/")],
        }

    def leak_signing_key(self) -> bytes:
        """Adversary with code execution inside the CDS CVM."""
        return self._ca_key()

    def _sign(self, domain: str, msg: bytes) -> bytes:
        return crypto.sign(self._ca_key(), domain, msg)

    # -- reports about itself
    def own_report(self, nonce: Optional[bytes] = None, bound_key: Optional[bytes] = None) -> AttestationReport:
        self._check_running()
        return self.cvm.generate_report(b"", bound_key or self.public_key, nonce)

    # -- allow-list
    def allowlist_versions(self) -> tuple[AllowList, Optional[AllowList]]:
        with self._lock:
            return self._current, self._previous

    @property
    def allowlist(self) -> AllowList:
        return self._current

    def update_allowlist(self, update: AllowList) -> None:
        self._check_running()
        with self._lock:
            if not update.verify(self.operator_pub):
                raise BadSignature("allow-list update signature invalid")
            if update.version <= self._current.version:
                raise StaleVersion(f"{update.version} <= {self._current.version}")
            self._previous, self._current = self._current, update

    def register_release_policy(self, policy: ReleasePolicy) -> None:
        with self._lock:
            self._policies[policy.secret_id] = policy

    # -- manifest
    def manifest(self, now: int) -> PolicyManifest:
        self._check_running()
        with self._lock:
            pool = tuple(sorted(m for m, exp in self._pool.values() if exp >= now))
            ingress = next(
                ((e.measurement, e.role) for e in self._current.entries if e.role == Role.INGRESS),
                None,
            )
            body = PolicyManifest(0, self._current, self.public_key, ingress, pool)
            key = body.signed_bytes()
            if self._manifest_cache is None or self._manifest_cache[0] != key:
                self._manifest_version += 1
                unsigned = replace(body, version=self._manifest_version)
                signed = replace(
                    unsigned, cds_signature=self._sign(MANIFEST_DOMAIN, unsigned.signed_bytes())
                )
                self._manifest_cache = (key, signed)
            return self._manifest_cache[1]

    # -- challenges and appraisal
    def issue_challenge(self, requester: str, now: int) -> bytes:
        self._check_running()
        nonce = crypto.random_bytes(32, self._rng)
        with self._lock:
            self._nonces[nonce] = _Challenge(requester, now + self.config.nonce_ttl)
        return nonce

    def _consume_nonce(self, nonce: bytes, now: int) -> bool:
        with self._lock:
            challenge = self._nonces.pop(nonce, None)
        return challenge is not None and now <= challenge.expires_at

    def _live_service_key(self, bound_digest: bytes, now: int) -> Optional[bytes]:
        cert = self._service_creds.get(bound_digest)
        if cert is None or not cert.valid_at(now) or not cert.signature_valid(self.public_key):
            return None
        return cert.subject_pubkey

    def appraise(
        self, evidence: Evidence, expected_nonce: bytes, now: int, role: Role = Role.WORKLOAD
    ) -> AppraisalResult:
        """Run checks (a) chain, (b) signature, (c) reference value, (d) TCB, (e) nonce.

        The first failing check is reported. Composed evidence adds the
        attestation-service signature after (b) and the workload digest
        after (c). Never raises on bad evidence.
        """
        self._check_running()
        nonce_ok = self._consume_nonce(expected_nonce, now)
        ev_digest = crypto.digest(evidence_to_bytes(evidence))

        def result(reason: Optional[Reason], measurement: bytes = b"") -> AppraisalResult:
            return AppraisalResult(reason is None, reason, now, ev_digest, role, measurement)

        composed = isinstance(evidence, ComposedEvidence)
        report = evidence.node_report if composed else evidence
        if not report.chain.verify(self.roots):
            return result(Reason.BAD_CHAIN)
        if not report.signature_valid():
            return result(Reason.BAD_SIGNATURE)
        if composed:
            service_key = self._live_service_key(report.bound_key_digest, now)
            if service_key is None or not evidence.service_signature_valid(service_key):
                return result(Reason.BAD_SIGNATURE)
        with self._lock:
            allowlist = self._current
        substrate_role = Role.ATTESTATION_SERVICE if composed else role
        entry = allowlist.lookup(report.measurement, substrate_role)
        if entry is None:
            return result(Reason.UNKNOWN_MEASUREMENT)
        if composed and not allowlist.image_authorized(evidence.pod_digest):
            return result(Reason.UNKNOWN_MEASUREMENT)
        if report.tcb < entry.min_tcb:
            return result(Reason.TCB_TOO_LOW)
        if not nonce_ok or report.nonce != expected_nonce:
            return result(Reason.NONCE_MISMATCH)
        measurement = evidence.pod_digest if composed else report.measurement
        return result(None, measurement)

    def issue_certificate(
        self,
        result: AppraisalResult,
        presented_key: bytes,
        evidence: Evidence,
        now: int,
        subject: Optional[tuple[str, str]] = None,
        hint: str = "",
    ) -> MeshCertificate:
        self._check_running()
        if not result.accepted or result.evidence_digest != crypto.digest(
            evidence_to_bytes(evidence)
        ):
            raise NotAppraised("evidence was not accepted by appraisal")
        if not evidence_binds(evidence, presented_key):
            raise KeyBindingMismatch("presented key does not match the attested key digest")
        if isinstance(evidence, ComposedEvidence):
            subject = evidence.pod_identity
        if subject is None:
            raise ValueError("subject required for a direct report")
        unsigned = MeshCertificate(
            namespace=subject[0],
            pod_uid=subject[1],
            subject_pubkey=presented_key,
            measurement=result.measurement,
            role=result.role,
            not_before=now,
            not_after=now + self.config.cert_lifetime,
        )
        cert = replace(unsigned, issuer_signature=self._sign(CERT_DOMAIN, unsigned.signed_bytes()))
        with self._lock:
            self.certificates_issued += 1
            if cert.role == Role.WORKLOAD:
                self._pool[cert.pod_id] = (
                    PoolMember(cert.pod_id, presented_key, hint or subject[1]),
                    cert.not_after,
                )
            elif cert.role == Role.ATTESTATION_SERVICE:
                self._service_creds[crypto.digest(presented_key)] = cert
        return cert

    def attest_and_issue(
        self,
        evidence: Evidence,
        nonce: bytes,
        presented_key: bytes,
        now: int,
        role: Role = Role.WORKLOAD,
        subject: Optional[tuple[str, str]] = None,
        hint: str = "",
    ) -> MeshCertificate:
        result = self.appraise(evidence, nonce, now, role)
        if not result.accepted:
            assert result.reason is not None
            raise AppraisalFailed(result.reason)
        return self.issue_certificate(result, presented_key, evidence, now, subject, hint)

    def drop_from_pool(self, pod_id: str) -> None:
        with self._lock:
            self._pool.pop(pod_id, None)

    # -- beacon
    def issue_beacon(self, now: int, caller: Optional[MeshCertificate]) -> FreshnessBeacon:
        self._check_running()
        if caller is None or not caller.signature_valid(self.public_key) or not caller.valid_at(now):
            raise Unauthenticated("beacon requires a live mesh certificate")
        return FreshnessBeacon(now, self._sign(BEACON_DOMAIN, FreshnessBeacon.message(now)))

    # -- replication
    def enroll_replica(
        self, replica_report: AttestationReport, replica_pub: bytes, nonce: bytes, now: int
    ) -> WrappedKey:
        result = self.appraise(replica_report, nonce, now, Role.CDS)
        if result.reason in (Reason.BAD_CHAIN, Reason.BAD_SIGNATURE):
            raise AppraisalFailed(result.reason)
        if replica_report.measurement != self.measurement:
            raise MeasurementMismatch("replica measurement differs from this CDS")
        if not result.accepted:
            assert result.reason is not None
            raise AppraisalFailed(result.reason)
        if not replica_report.binds(replica_pub):
            raise KeyBindingMismatch("replica key not bound by its report")
        wrapped = crypto.wrap_key(replica_pub, self._ca_key(), ENROLL_INFO, self._rng)
        self.transcript.append(wrapped.to_bytes())
        return wrapped

    @classmethod
    def join(
        cls,
        cvm: CvmHandle,
        enrollment_key: KeyPair,
        wrapped: WrappedKey,
        source: "CdsReplica",
    ) -> "CdsReplica":
        ca_private = crypto.unwrap_key(enrollment_key.private, wrapped, ENROLL_INFO)
        cvm.store(CA_KEY_REGION, ca_private)
        current, previous = source.allowlist_versions()
        replica = cls(
            cvm, crypto.signing_public(ca_private), source.operator_pub, source.roots,
            current, source.config, source._rng,
        )
        if not current.verify(replica.operator_pub):
            raise BadAllowListSignature("allow-list from source replica")
        replica._previous = previous
        replica._policies = dict(source._policies)
        replica._service_creds = dict(source._service_creds)
        return replica

    # -- key brokering
    def broker_secret(
        self,
        secret_id: str,
        evidence: Evidence,
        requester_pub: bytes,
        nonce: bytes,
        now: int,
        deposit: Optional[DepositService] = None,
        kms: Optional[Kms] = None,
        deliver: Optional[Callable[[bytes], None]] = None,
    ) -> WrappedKey | DeliveryReceipt:
        """Release decision, then wrapped or direct delivery.

        Wrapped mode returns the deposit service's ciphertext. Direct mode
        pulls the plaintext from the KMS into CVM memory, hands it to
        ``deliver`` (the mesh hop to the pod) and drops it.
        """
        self._check_running()
        self.transcript.append(evidence_to_bytes(evidence))
        policy = self._policies.get(secret_id)
        result = self.appraise(evidence, nonce, now, Role.WORKLOAD)
        if not result.accepted:
            raise ReleaseDenied(1, result.reason.value if result.reason else "")
        if not evidence_binds(evidence, requester_pub):
            raise ReleaseDenied(1, Reason.KEY_BINDING_MISMATCH.value)
        image = pod_image_digest(evidence)
        if not self._current.image_authorized(image):
            raise ReleaseDenied(2, "image digest not in signed manifest")
        pair = (evidence_measurement(evidence), image)
        if policy is None or pair not in policy.allowed:
            raise ReleaseDenied(3, f"{secret_id} not authorized for this measurement/digest")

        if policy.mode == BrokerMode.WRAPPED:
            if deposit is None:
                raise DepositRefused("no deposit service")
            wrapped = deposit.release(secret_id, evidence, requester_pub)
            self.transcript.append(wrapped.to_bytes())
            return wrapped

        if kms is None or deliver is None:
            raise KmsRefused("direct mode needs a KMS and a delivery channel")
        channel = crypto.kem_keypair(self._rng)
        report = self.cvm.generate_report(b"", channel.public, kms.challenge())
        wrapped = kms.release(secret_id, report, channel.public)
        self.transcript.append(wrapped.to_bytes())
        region = f"hop/{secret_id}"
        self.cvm.store(region, crypto.unwrap_key(channel.private, wrapped, b"c8s/kms-channel"))
        try:
            key = self.cvm.load(region)
            if self.tap is not None:
                self.tap(region, key)
            deliver(key)
        finally:
            self.cvm.discard(region)
        return DeliveryReceipt(secret_id, now)


def operator_verifier(
    roots: Iterable[bytes], expected_measurement: bytes
) -> Callable[[AttestationReport], bool]:
    roots = set(roots)

    def check(report: AttestationReport) -> bool:
        return report.verify(roots) and report.measurement == expected_measurement

    return check


def bootstrap(
    operator: Callable[[AttestationReport], bool],
    initial_allowlist: AllowList,
    operator_pub: bytes,
    platform: Platform,
    components: Sequence[tuple[str, bytes]],
    roots: Iterable[bytes],
    tcb: int = 1,
    config: CdsConfig = CdsConfig(),
    rng: Optional[RandomSource] = None,
    cvm_id: str = "cds-0",
) -> CdsReplica:
    """One-time manual attestation of the first CDS replica."""
    cvm = launch_cvm(components, tcb, platform, rng=rng, cvm_id=cvm_id)
    key = crypto.signing_keypair(rng)
    cvm.store(CA_KEY_REGION, key.private)
    report = cvm.generate_report(b"", key.public)
    if not operator(report):
        cvm.terminate()
        raise OperatorRejected("operator refused the CDS attestation")
    if not initial_allowlist.verify(operator_pub):
        cvm.terminate()
        raise BadAllowListSignature("initial allow-list signature invalid")
    return CdsReplica(cvm, key.public, operator_pub, roots, initial_allowlist, config, rng)


class CdsCluster:
    """Active/active replica set sharing one signing key and identity."""

    def __init__(self, first: CdsReplica):
        self.replicas: list[CdsReplica] = [first]
        self._next = 0

    @property
    def public_key(self) -> bytes:
        return self.replicas[0].public_key

    @property
    def live(self) -> list[CdsReplica]:
        return [r for r in self.replicas if r.running and r.cvm.live]

    def add(self, replica: CdsReplica) -> None:
        if replica.public_key != self.public_key:
            raise MeasurementMismatch("replica holds a different signing key")
        self.replicas.append(replica)

    def pick(self) -> CdsReplica:
        live = self.live
        if not live:
            raise CdsUnavailable("no live CDS replica; re-bootstrap required")
        replica = live[self._next % len(live)]
        self._next += 1
        return replica

    def primary(self) -> CdsReplica:
        live = self.live
        if not live:
            raise CdsUnavailable("no live CDS replica; re-bootstrap required")
        return live[0]

    def update_allowlist(self, update: AllowList) -> None:
        for r in self.live:
            r.update_allowlist(update)

    def register_release_policy(self, policy: ReleasePolicy) -> None:
        for r in self.replicas:
            r.register_release_policy(policy)

    def stop(self) -> None:
        for r in self.replicas:
            r.stop()
