"""Software stand-in for the hardware root of trust.

A :class:`Manufacturer` endorses platform keys; a :class:`CvmHandle` is a
launched confidential VM whose measurement is a digest over its ordered
launch components; :func:`generate_report` produces signed evidence.
Host-side access to CVM memory only ever yields ciphertext.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

from . import crypto
from .crypto import KeyPair, RandomSource
from .wire import Malformed, Reader, Writer

ENDORSEMENT_DOMAIN = "endorsement"
ATTESTATION_DOMAIN = "attestation"
COMPOSED_DOMAIN = "composed-evidence"

REPORT_DATA_SIZE = 64
NONCE_SIZE = 32
HOST_CIPHERTEXT_TAG = b"CVM-ENC\x00"


class TeeError(Exception):
    pass


class EmptyComponents(TeeError):
    pass


class OversizedReportData(TeeError):
    pass


class CvmTerminated(TeeError):
    pass


class IntegrityViolation(TeeError):
    """Guest memory failed authentication (host tampering detected)."""


# -- endorsement -------------------------------------------------------------


@dataclass(frozen=True)
class EndorsementChain:
    manufacturer_root: bytes
    platform_key: bytes
    platform_cert: bytes

    def verify(self, roots: Iterable[bytes]) -> bool:
        if self.manufacturer_root not in set(roots):
            return False
        return crypto.verify(
            self.manufacturer_root, ENDORSEMENT_DOMAIN, self.platform_key, self.platform_cert
        )

    def write(self, w: Writer) -> None:
        w.blob(self.manufacturer_root).blob(self.platform_key).blob(self.platform_cert)

    @classmethod
    def read(cls, r: Reader) -> "EndorsementChain":
        return cls(r.blob(), r.blob(), r.blob())


@dataclass(frozen=True)
class Platform:
    """A machine's secure processor: its endorsed attestation key."""

    key: KeyPair = field(repr=False)
    chain: EndorsementChain


class Manufacturer:
    """Holds the root key; ``endorse_platform`` is the issuing capability."""

    def __init__(self, rng: Optional[RandomSource] = None) -> None:
        self._root = crypto.signing_keypair(rng)
        self._rng = rng

    @classmethod
    def create(cls, rng: Optional[RandomSource] = None) -> "Manufacturer":
        return cls(rng)

    @property
    def root(self) -> bytes:
        return self._root.public

    def endorse_platform(self, rng: Optional[RandomSource] = None) -> Platform:
        key = crypto.signing_keypair(rng or self._rng)
        cert = crypto.sign(self._root.private, ENDORSEMENT_DOMAIN, key.public)
        return Platform(key=key, chain=EndorsementChain(self.root, key.public, cert))


# -- measurement -------------------------------------------------------------


def measure_digests(component_digests: Sequence[bytes]) -> bytes:
    if not component_digests:
        raise EmptyComponents("launch component list is empty")
    w = Writer()
    for d in component_digests:
        w.blob(d)
    return crypto.digest(w.getvalue())


def launch_measurement(components: Sequence[tuple[str, bytes]]) -> bytes:
    """Offline pre-computation of the launch digest for ``components``."""
    return measure_digests([crypto.digest(data) for _, data in components])


# -- reports -----------------------------------------------------------------


@dataclass(frozen=True)
class AttestationReport:
    measurement: bytes
    tcb: int
    report_data: bytes
    bound_key_digest: bytes
    nonce: Optional[bytes]
    chain: EndorsementChain
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        w = Writer()
        w.blob(self.measurement).u64(self.tcb).blob(self.report_data).blob(self.bound_key_digest)
        w.flag(self.nonce is not None)
        if self.nonce is not None:
            w.blob(self.nonce)
        self.chain.write(w)
        return w.getvalue()

    def to_bytes(self) -> bytes:
        return Writer().raw(self.signed_bytes()).blob(self.signature).getvalue()

    @classmethod
    def read(cls, r: Reader) -> "AttestationReport":
        measurement = r.blob()
        tcb = r.u64()
        report_data = r.blob()
        bound = r.blob()
        nonce = r.blob() if r.flag() else None
        chain = EndorsementChain.read(r)
        return cls(measurement, tcb, report_data, bound, nonce, chain, r.blob())

    @classmethod
    def from_bytes(cls, data: bytes) -> "AttestationReport":
        r = Reader(data)
        report = cls.read(r)
        r.done()
        return report

    def signature_valid(self) -> bool:
        return crypto.verify(
            self.chain.platform_key, ATTESTATION_DOMAIN, self.signed_bytes(), self.signature
        )

    def verify(self, roots: Iterable[bytes]) -> bool:
        return self.chain.verify(roots) and self.signature_valid()

    def binds(self, public_key: bytes) -> bool:
        return crypto.digest(public_key) == self.bound_key_digest


def sign_report(platform_key: KeyPair, report: AttestationReport) -> AttestationReport:
    sig = crypto.sign(platform_key.private, ATTESTATION_DOMAIN, report.signed_bytes())
    return replace(report, signature=sig)


_cvm_ids = itertools.count(1)


class CvmHandle:
    """A launched confidential VM.

    Guest memory is sealed under a key that only the emulated secure
    processor holds; :meth:`host_read` is the hypervisor's view of it.
    """

    def __init__(
        self,
        components: Sequence[tuple[str, bytes]],
        tcb: int,
        platform: Platform,
        rng: Optional[RandomSource] = None,
        cvm_id: Optional[str] = None,
    ) -> None:
        if not components:
            raise EmptyComponents("launch component list is empty")
        self.id = cvm_id or f"cvm-{next(_cvm_ids)}"
        self.components = tuple((name, crypto.digest(data)) for name, data in components)
        self.tcb = tcb
        self.platform = platform
        self.live = True
        self._rng = rng
        self._memory_key = crypto.symmetric_key(rng)
        self._memory: dict[str, bytes] = {}
        self._lock = threading.Lock()
        self.reports_generated = 0

    @property
    def measurement(self) -> bytes:
        return measure_digests([d for _, d in self.components])

    def _check_live(self) -> None:
        if not self.live:
            raise CvmTerminated(self.id)

    # guest-side memory access
    def store(self, name: str, value: bytes) -> None:
        self._check_live()
        self._memory[name] = crypto.aead_seal(
            self._memory_key, value, name.encode(), rng=self._rng
        )

    def load(self, name: str) -> bytes:
        self._check_live()
        try:
            return crypto.aead_open(self._memory_key, self._memory[name], name.encode())
        except crypto.AuthFailure as exc:
            raise IntegrityViolation(f"{self.id}: memory region {name!r} modified") from exc

    def discard(self, name: str) -> None:
        self._memory.pop(name, None)

    def regions(self) -> list[str]:
        return sorted(self._memory)

    # host-side view
    def host_read(self) -> bytes:
        """Everything the hypervisor can capture: tagged ciphertext only."""
        return b"".join(
            HOST_CIPHERTEXT_TAG + self._memory[name] for name in sorted(self._memory)
        )

    def host_tamper(self, name: str) -> None:
        blob = bytearray(self._memory[name])
        blob[-1] ^= 0x01
        self._memory[name] = bytes(blob)

    def terminate(self) -> None:
        self.live = False
        self._memory.clear()

    def generate_report(
        self, report_data: bytes, bound_key: bytes, nonce: Optional[bytes] = None
    ) -> AttestationReport:
        return generate_report(self, report_data, bound_key, nonce)


def launch_cvm(
    components: Sequence[tuple[str, bytes]],
    tcb: int,
    platform: Platform,
    rng: Optional[RandomSource] = None,
    cvm_id: Optional[str] = None,
) -> CvmHandle:
    return CvmHandle(components, tcb, platform, rng=rng, cvm_id=cvm_id)


def generate_report(
    cvm: CvmHandle, report_data: bytes, bound_key: bytes, nonce: Optional[bytes] = None
) -> AttestationReport:
    if len(report_data) > REPORT_DATA_SIZE:
        raise OversizedReportData(f"{len(report_data)} > {REPORT_DATA_SIZE}")
    if nonce is not None and len(nonce) != NONCE_SIZE:
        raise ValueError("nonce must be 32 bytes")
    with cvm._lock:
        cvm._check_live()
        report = AttestationReport(
            measurement=cvm.measurement,
            tcb=cvm.tcb,
            report_data=report_data.ljust(REPORT_DATA_SIZE, b"\x00"),
            bound_key_digest=crypto.digest(bound_key),
            nonce=nonce,
            chain=cvm.platform.chain,
        )
        cvm.reports_generated += 1
        return sign_report(cvm.platform.key, report)


# -- composed (node + pod) evidence ------------------------------------------


@dataclass(frozen=True)
class ComposedEvidence:
    node_report: AttestationReport
    pod_digest: bytes
    pod_identity: tuple[str, str]
    pod_pubkey: bytes
    service_signature: bytes = b""

    def signed_bytes(self) -> bytes:
        w = Writer().blob(self.node_report.to_bytes()).blob(self.pod_digest)
        w.text(self.pod_identity[0]).text(self.pod_identity[1]).blob(self.pod_pubkey)
        return w.getvalue()

    def to_bytes(self) -> bytes:
        return Writer().raw(self.signed_bytes()).blob(self.service_signature).getvalue()

    @classmethod
    def read(cls, r: Reader) -> "ComposedEvidence":
        node_report = AttestationReport.from_bytes(r.blob())
        pod_digest = r.blob()
        identity = (r.text(), r.text())
        return cls(node_report, pod_digest, identity, r.blob(), r.blob())

    @classmethod
    def from_bytes(cls, data: bytes) -> "ComposedEvidence":
        r = Reader(data)
        evidence = cls.read(r)
        r.done()
        return evidence

    def service_signature_valid(self, service_pub: bytes) -> bool:
        return crypto.verify(service_pub, COMPOSED_DOMAIN, self.signed_bytes(), self.service_signature)


def compose_evidence(
    node: CvmHandle,
    service_key: KeyPair,
    pod_digest: bytes,
    identity: tuple[str, str],
    pod_pub: bytes,
    nonce: Optional[bytes] = None,
) -> ComposedEvidence:
    """Node attestation service output: node report bound to the service key."""
    node_report = generate_report(node, b"", service_key.public, nonce)
    unsigned = ComposedEvidence(node_report, pod_digest, tuple(identity), pod_pub)
    sig = crypto.sign(service_key.private, COMPOSED_DOMAIN, unsigned.signed_bytes())
    return replace(unsigned, service_signature=sig)


Evidence = AttestationReport | ComposedEvidence


def evidence_to_bytes(evidence: Evidence) -> bytes:
    tag = 1 if isinstance(evidence, AttestationReport) else 2
    return Writer().u8(tag).raw(evidence.to_bytes()).getvalue()


def evidence_from_bytes(data: bytes) -> Evidence:
    r = Reader(data)
    tag = r.u8()
    if tag == 1:
        ev: Evidence = AttestationReport.read(r)
    elif tag == 2:
        ev = ComposedEvidence.read(r)
    else:
        raise Malformed(0, f"unknown evidence tag {tag}")
    r.done()
    return ev
