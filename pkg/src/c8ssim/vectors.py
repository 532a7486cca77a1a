"""Golden wire-format vectors: one envelope, one attestation report, one certificate.

Everything is derived from a fixed seed, so regenerating must reproduce the
checked-in bytes exactly.
"""

from __future__ import annotations

import json
import random
from dataclasses import replace
from pathlib import Path

from . import crypto
from .cds import CERT_DOMAIN, MeshCertificate, Role
from .envelope import encrypt_multi, header_overhead
from .tee import Manufacturer, launch_cvm

VECTOR_SEED = 20240601
ENVELOPE_RECIPIENTS = 3
BODY = b"golden vector body"
MANIFEST = "manifest.json"


def build_vectors(seed: int = VECTOR_SEED) -> dict[str, bytes]:
    rng = random.Random(seed)
    recipients = [crypto.kem_keypair(rng) for _ in range(ENVELOPE_RECIPIENTS)]
    sender = crypto.kem_keypair(rng)
    env = encrypt_multi(BODY, [(k.public, "") for k in recipients], sender.public, rng)

    maker = Manufacturer.create(rng)
    platform = maker.endorse_platform(rng)
    cvm = launch_cvm([("firmware", b"golden-fw"), ("app", b"golden-app")], 3, platform, rng, cvm_id="golden")
    bound = crypto.kem_keypair(rng)
    report = cvm.generate_report(b"golden report data", bound.public, rng.randbytes(32))

    ca = crypto.signing_keypair(rng)
    unsigned = MeshCertificate("default", "golden", bound.public, report.measurement, Role.WORKLOAD, 0, 21600)
    cert = replace(unsigned, issuer_signature=crypto.sign(ca.private, CERT_DOMAIN, unsigned.signed_bytes()))
    return {
        "envelope.bin": env.to_bytes(),
        "report.bin": report.to_bytes(),
        "certificate.bin": cert.to_bytes(),
        "recipient0.key": recipients[0].private,
        "manufacturer-root.pub": maker.root,
        "cds.pub": ca.public,
    }


def manifest_for(vectors: dict[str, bytes], seed: int = VECTOR_SEED) -> dict:
    return {
        "seed": seed,
        "envelope": {
            "recipients": ENVELOPE_RECIPIENTS,
            "header_overhead": header_overhead([""] * ENVELOPE_RECIPIENTS),
            "body": BODY.decode(),
        },
        "files": {
            name: {"sha256": crypto.digest(data).hex(), "size": len(data)}
            for name, data in sorted(vectors.items())
        },
    }


def write_vectors(outdir: str | Path, seed: int = VECTOR_SEED) -> dict:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    vectors = build_vectors(seed)
    for name, data in vectors.items():
        (out / name).write_bytes(data)
    manifest = manifest_for(vectors, seed)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def compare(outdir: str | Path) -> list[str]:
    """Names of checked-in vectors that differ from a fresh build."""
    out = Path(outdir)
    fresh = build_vectors()
    problems = []
    for name, data in sorted(fresh.items()):
        path = out / name
        if not path.exists() or path.read_bytes() != data:
            problems.append(name)
    if not (out / MANIFEST).exists() or json.loads((out / MANIFEST).read_text()) != manifest_for(fresh):
        problems.append(MANIFEST)
    return problems
