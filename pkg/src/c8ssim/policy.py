"""Workload gating: node-level digest enforcement and in-pod image-gap checks."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

from . import crypto
from .cds import PolicyManifest, ReleasePolicy
from .crypto import RandomSource
from .wire import Writer

WORKLOAD_SIG_DOMAIN = "workload-sig"
IMAGE_KEY_INFO = b"c8s/image-key/v1"
MEASURED_CONFIG_COMPONENT = "measured-config"


class Decision(str, enum.Enum):
    ALLOW = "Allow"
    REJECT = "Reject"


class Verdict(NamedTuple):
    decision: Decision
    reason: str = ""

    @property
    def allowed(self) -> bool:
        return self.decision is Decision.ALLOW


ALLOW = Verdict(Decision.ALLOW)


def reject(reason: str) -> Verdict:
    return Verdict(Decision.REJECT, reason)


class GateError(Exception):
    pass


class WrongMode(GateError):
    pass


class UnverifiedManifest(GateError):
    pass


class DecryptFailed(GateError):
    pass


class GateMode(str, enum.Enum):
    PIN = "pin"
    CUSTOMER_KEY = "customer_key"
    ENCRYPTED_IMAGE = "encrypted_image"


@dataclass(frozen=True)
class LaunchRequest:
    target: str
    image_digest: bytes
    image_ref: str
    requested_by: str = "control_plane"


@dataclass(frozen=True)
class PodMeasuredConfig:
    """Gating policy baked into a pod's launch measurement.

    Any combination of modes may be set; all configured modes must pass.
    """

    pinned_digests: Optional[frozenset[bytes]] = None
    customer_pubkey: Optional[bytes] = None
    secret_ref: Optional[ReleasePolicy] = None

    @property
    def modes(self) -> frozenset[GateMode]:
        modes = set()
        if self.pinned_digests is not None:
            modes.add(GateMode.PIN)
        if self.customer_pubkey is not None:
            modes.add(GateMode.CUSTOMER_KEY)
        if self.secret_ref is not None:
            modes.add(GateMode.ENCRYPTED_IMAGE)
        return frozenset(modes)

    def to_bytes(self) -> bytes:
        w = Writer().flag(self.pinned_digests is not None)
        if self.pinned_digests is not None:
            w.u32(len(self.pinned_digests))
            for d in sorted(self.pinned_digests):
                w.blob(d)
        w.flag(self.customer_pubkey is not None)
        if self.customer_pubkey is not None:
            w.blob(self.customer_pubkey)
        w.flag(self.secret_ref is not None)
        if self.secret_ref is not None:
            w.text(self.secret_ref.secret_id).text(self.secret_ref.mode.value)
        return w.getvalue()

    def component(self) -> tuple[str, bytes]:
        return (MEASURED_CONFIG_COMPONENT, self.to_bytes())


# -- node level ---------------------------------------------------------------


def nri_check(req: LaunchRequest, manifest: Optional[PolicyManifest], cds_pub: bytes) -> Verdict:
    """Allow iff the image digest is in a manifest that verifies under the CDS key."""
    if manifest is None:
        return reject("NoManifest")
    if not manifest.verify(cds_pub):
        return reject(UnverifiedManifest.__name__)
    if not any(d == req.image_digest for d, _ in manifest.image_digests):
        return reject("DigestNotInManifest")
    return ALLOW


class NriEnforcer:
    """Per-node enforcer holding the last verified manifest snapshot."""

    def __init__(self, node: str, cds_pub: bytes):
        self.node = node
        self.cds_pub = cds_pub
        self.manifest: Optional[PolicyManifest] = None
        self.decisions: list[tuple[LaunchRequest, Verdict]] = []

    def install(self, manifest: PolicyManifest) -> None:
        if not manifest.verify(self.cds_pub):
            raise UnverifiedManifest("manifest signature does not verify")
        if self.manifest is None or manifest.version >= self.manifest.version:
            self.manifest = manifest

    def check(self, req: LaunchRequest) -> Verdict:
        verdict = nri_check(req, self.manifest, self.cds_pub)
        self.decisions.append((req, verdict))
        return verdict


# -- pod level ----------------------------------------------------------------


def pin_check(cfg: PodMeasuredConfig, image_digest: bytes) -> Verdict:
    if cfg.pinned_digests is None:
        raise WrongMode("pod config has no pinned digests")
    if image_digest in cfg.pinned_digests:
        return ALLOW
    return reject("DigestNotPinned")


def sign_workload(customer_private: bytes, image_digest: bytes) -> bytes:
    return crypto.sign(customer_private, WORKLOAD_SIG_DOMAIN, image_digest)


def customer_sig_check(cfg: PodMeasuredConfig, image_digest: bytes, sig: Optional[bytes]) -> Verdict:
    if cfg.customer_pubkey is None:
        raise WrongMode("pod config has no customer key")
    if sig is not None and crypto.verify(cfg.customer_pubkey, WORKLOAD_SIG_DOMAIN, image_digest, sig):
        return ALLOW
    return reject("BadWorkloadSignature")


def gate_image(cfg: PodMeasuredConfig, image_digest: bytes, sig: Optional[bytes] = None) -> Verdict:
    """In-pod agent decision: every configured non-encryption mode must allow."""
    checks = []
    if GateMode.PIN in cfg.modes:
        checks.append(pin_check(cfg, image_digest))
    if GateMode.CUSTOMER_KEY in cfg.modes:
        checks.append(customer_sig_check(cfg, image_digest, sig))
    if not checks and GateMode.ENCRYPTED_IMAGE not in cfg.modes:
        return reject("NoGatingPolicy")
    for verdict in checks:
        if not verdict.allowed:
            return verdict
    return ALLOW


class Registry:
    """Untrusted image store. Encrypted images are stored as ciphertext only."""

    def __init__(self) -> None:
        self._blobs: dict[str, bytes] = {}
        self.signatures: dict[bytes, bytes] = {}

    def push(self, name: str, blob: bytes) -> bytes:
        self._blobs[name] = blob
        return crypto.digest(blob)

    def pull(self, name: str) -> bytes:
        return self._blobs[name]

    def digest_of(self, name: str) -> bytes:
        return crypto.digest(self._blobs[name])

    def contents(self) -> dict[str, bytes]:
        return dict(self._blobs)


def encrypt_image(image: bytes, rng: Optional[RandomSource] = None) -> tuple[bytes, bytes]:
    """Return (image key, ciphertext) for publishing an encrypted image."""
    key = crypto.symmetric_key(rng)
    return key, crypto.aead_seal(key, image, IMAGE_KEY_INFO, rng=rng)


def encrypted_image_unlock(
    cfg: PodMeasuredConfig,
    image_name: str,
    registry: Registry,
    fetch_key: Callable[[ReleasePolicy], bytes],
    store: Callable[[str, bytes], None],
) -> bytes:
    """Pull an encrypted image, obtain its key through brokering, decrypt in the pod.

    ``fetch_key`` performs the attestation-gated release (raising
    ``ReleaseDenied`` when refused) and returns the unwrapped key inside the
    pod CVM; ``store`` places the plaintext image in CVM memory.
    """
    if cfg.secret_ref is None:
        raise WrongMode("pod config has no encrypted-image secret")
    key = fetch_key(cfg.secret_ref)
    try:
        image = crypto.aead_open(key, registry.pull(image_name), IMAGE_KEY_INFO)
    except crypto.AuthFailure as exc:
        raise DecryptFailed(image_name) from exc
    store(f"image/{image_name}", image)
    return image
