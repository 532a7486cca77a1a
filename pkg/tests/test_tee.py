import hashlib
import struct
from dataclasses import replace

import pytest

from c8ssim import crypto
from c8ssim.tee import (
    HOST_CIPHERTEXT_TAG,
    AttestationReport,
    ComposedEvidence,
    CvmTerminated,
    EmptyComponents,
    EndorsementChain,
    IntegrityViolation,
    Manufacturer,
    OversizedReportData,
    compose_evidence,
    evidence_from_bytes,
    evidence_to_bytes,
    launch_cvm,
    launch_measurement,
    sign_report,
)

COMPONENTS = [("firmware", b"fw"), ("kernel", b"k"), ("app", b"a")]


@pytest.fixture
def maker(rng):
    return Manufacturer.create(rng)


def test_manufacturers_distinct(rng):
    assert Manufacturer.create(rng).root != Manufacturer.create(rng).root


def test_platform_chain(rng):
    a, b = Manufacturer.create(rng), Manufacturer.create(rng)
    p = a.endorse_platform()
    assert p.chain.verify([a.root])
    assert not p.chain.verify([b.root])


def test_measurement_order_and_precompute(maker, rng):
    p = maker.endorse_platform()
    m1 = launch_cvm(COMPONENTS, 1, p, rng).measurement
    assert m1 == launch_cvm(COMPONENTS, 1, p, rng).measurement
    swapped = [COMPONENTS[1], COMPONENTS[0], COMPONENTS[2]]
    assert launch_cvm(swapped, 1, p, rng).measurement != m1
    assert launch_measurement(COMPONENTS) == m1


def test_measurement_independent_oracle(maker, rng):
    # u32 big-endian length prefix before each 32-byte component digest, then SHA-256
    concat = b"".join(struct.pack(">I", 32) + hashlib.sha256(data).digest() for _, data in COMPONENTS)
    cvm = launch_cvm(COMPONENTS, 1, maker.endorse_platform(), rng)
    assert cvm.measurement == hashlib.sha256(concat).digest()


def test_empty_components(maker, rng):
    with pytest.raises(EmptyComponents):
        launch_cvm([], 1, maker.endorse_platform(), rng)


def test_report_verifies_and_pads(maker, rng):
    cvm = launch_cvm(COMPONENTS, 2, maker.endorse_platform(), rng)
    key = crypto.kem_keypair(rng)
    r = cvm.generate_report(b"0123456789", key.public, rng.randbytes(32))
    assert r.verify([maker.root])
    assert r.report_data == b"0123456789" + bytes(54)
    assert r.binds(key.public) and r.bound_key_digest == crypto.digest(key.public)
    assert not replace(r, measurement=crypto.digest(b"x")).verify([maker.root])
    assert not replace(r, tcb=9).verify([maker.root])
    assert AttestationReport.from_bytes(r.to_bytes()) == r


def test_oversized_report_data(maker, rng):
    cvm = launch_cvm(COMPONENTS, 1, maker.endorse_platform(), rng)
    with pytest.raises(OversizedReportData):
        cvm.generate_report(bytes(65), b"k")


def test_self_made_platform_never_verifies(maker, rng):
    """Forgery attempts without the issuing capability: random and self-signed chains."""
    cvm = launch_cvm(COMPONENTS, 1, maker.endorse_platform(), rng)
    genuine = cvm.generate_report(b"", b"k")
    successes = 0
    for _ in range(200):
        fake_root = crypto.signing_keypair(rng)
        plat = crypto.signing_keypair(rng)
        choices = [
            EndorsementChain(maker.root, plat.public, crypto.sign(fake_root.private, "endorsement", plat.public)),
            EndorsementChain(maker.root, plat.public, rng.randbytes(64)),
            EndorsementChain(fake_root.public, plat.public, crypto.sign(fake_root.private, "endorsement", plat.public)),
        ]
        for chain in choices:
            forged = sign_report(plat, replace(genuine, chain=chain))
            successes += forged.verify([maker.root])
    assert successes == 0


def test_memory_opacity_and_tamper(maker, rng):
    cvm = launch_cvm(COMPONENTS, 1, maker.endorse_platform(), rng)
    cvm.store("secret", b"top secret value")
    view = cvm.host_read()
    assert view.startswith(HOST_CIPHERTEXT_TAG)
    assert b"top secret value" not in view
    assert cvm.load("secret") == b"top secret value"
    cvm.host_tamper("secret")
    with pytest.raises(IntegrityViolation):
        cvm.load("secret")
    cvm.terminate()
    with pytest.raises(CvmTerminated):
        cvm.generate_report(b"", b"k")


def test_composed_evidence(maker, rng):
    node = launch_cvm(COMPONENTS, 1, maker.endorse_platform(), rng)
    svc = crypto.signing_keypair(rng)
    ev = compose_evidence(node, svc, crypto.digest(b"img"), ("ns", "uid"), b"p" * 32, rng.randbytes(32))
    assert ev.service_signature_valid(svc.public)
    assert ev.node_report.binds(svc.public)
    assert not replace(ev, pod_digest=crypto.digest(b"other")).service_signature_valid(svc.public)
    assert not ev.service_signature_valid(crypto.signing_keypair(rng).public)
    assert ComposedEvidence.from_bytes(ev.to_bytes()) == ev
    assert evidence_from_bytes(evidence_to_bytes(ev)) == ev
    assert evidence_from_bytes(evidence_to_bytes(ev.node_report)) == ev.node_report
