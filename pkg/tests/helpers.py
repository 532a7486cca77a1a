"""Small hand-built deployments shared by the unit tests."""

import random
from dataclasses import dataclass, field

from c8ssim import crypto
from c8ssim.cds import (
    AllowList,
    AllowListEntry,
    CdsConfig,
    CdsReplica,
    Role,
    bootstrap,
    operator_verifier,
)
from c8ssim.tee import Manufacturer, launch_cvm, launch_measurement

CDS_COMPONENTS = [("fw", b"fw-1"), ("cds", b"cds-server")]
WORKLOAD = [("fw", b"fw-1"), ("agent", b"agent-1"), ("cfg", b"pinned:echo")]
OTHER_WORKLOAD = [("fw", b"fw-1"), ("agent", b"agent-1"), ("cfg", b"pinned:other")]
INGRESS = [("fw", b"fw-1"), ("ingress", b"ingress-1")]
NODE = [("fw", b"fw-1"), ("kubelet", b"k"), ("attestation-service", b"as-1")]
MIN_TCB = 2
IMAGE_A = crypto.digest(b"image-a")
IMAGE_B = crypto.digest(b"image-b")


@dataclass
class Testbed:
    rng: random.Random
    maker: Manufacturer
    operator: crypto.KeyPair
    cds: CdsReplica
    platform: object
    allowlist: AllowList
    extra: dict = field(default_factory=dict)

    @property
    def roots(self):
        return {self.maker.root}

    def cvm(self, components=WORKLOAD, tcb=MIN_TCB + 1, cvm_id=None):
        return launch_cvm(components, tcb, self.platform, self.rng, cvm_id=cvm_id)

    def allowlist_v(self, version, entries=None, images=None):
        return AllowList.create(version, entries if entries is not None else self.allowlist.entries,
                                images if images is not None else self.allowlist.images, self.operator)

    def certify(self, cvm, subject=("default", "pod"), role=Role.WORKLOAD, now=0, report_data=b"", hint=""):
        key = crypto.kem_keypair(self.rng)
        nonce = self.cds.issue_challenge("/".join(subject), now)
        report = cvm.generate_report(report_data, key.public, nonce)
        cert = self.cds.attest_and_issue(report, nonce, key.public, now, role, subject, hint)
        return cert, key


def identity(tb, uid, components=WORKLOAD, role=Role.WORKLOAD, now=0, hint="", ns="default"):
    """Certify a fresh CVM and return (MeshIdentity, cvm)."""
    from c8ssim.mesh import MeshIdentity

    cvm = tb.cvm(components)
    cert, key = tb.certify(cvm, (ns, uid), role, now, hint=hint or uid)
    return MeshIdentity(cert, key.private), cvm


def entries():
    return [
        AllowListEntry(launch_measurement(CDS_COMPONENTS), MIN_TCB, Role.CDS),
        AllowListEntry(launch_measurement(WORKLOAD), MIN_TCB, Role.WORKLOAD),
        AllowListEntry(launch_measurement(OTHER_WORKLOAD), MIN_TCB, Role.WORKLOAD),
        AllowListEntry(launch_measurement(INGRESS), MIN_TCB, Role.INGRESS),
        AllowListEntry(launch_measurement(NODE), MIN_TCB, Role.ATTESTATION_SERVICE),
    ]


def testbed(seed=1, config=CdsConfig()):
    rng = random.Random(seed)
    maker = Manufacturer.create(rng)
    operator = crypto.signing_keypair(rng)
    platform = maker.endorse_platform(rng)
    allowlist = AllowList.create(1, entries(), [(IMAGE_A, "a"), (IMAGE_B, "b")], operator)
    cds = bootstrap(operator_verifier({maker.root}, launch_measurement(CDS_COMPONENTS)), allowlist,
                    operator.public, platform, CDS_COMPONENTS, {maker.root}, MIN_TCB + 1, config, rng)
    return Testbed(rng, maker, operator, cds, platform, allowlist)


# -- appraisal mutation oracle -------------------------------------------------

def _flip(b: bytes, rng) -> bytes:
    i = rng.randrange(len(b))
    return b[:i] + bytes([b[i] ^ (1 << rng.randrange(8))]) + b[i + 1:]


# post-hoc edits of a signed report, and the first check (a)->(e) each must trip
REPORT_FIELDS = {
    "chain.manufacturer_root": "BadChain",
    "chain.platform_key": "BadChain",
    "chain.platform_cert": "BadChain",
    "measurement": "BadSignature",
    "tcb": "BadSignature",
    "report_data": "BadSignature",
    "bound_key_digest": "BadSignature",
    "nonce": "BadSignature",
    "signature": "BadSignature",
}
COMPOSED_FIELDS = {
    "pod_digest": "BadSignature",
    "pod_identity": "BadSignature",
    "pod_pubkey": "BadSignature",
    "service_signature": "BadSignature",
}
# values a genuine platform would sign, but that the policy forbids
HONEST_VARIANTS = {
    "unlisted-measurement": "UnknownMeasurement",
    "low-tcb": "TcbTooLow",
    "wrong-nonce": "NonceMismatch",
    "other-presented-key": "KeyBindingMismatch",
}
COMPOSED_HONEST = {"unauthorized-pod-digest": "UnknownMeasurement"}


def _mutate_report(report, name, rng):
    from dataclasses import replace

    chain = report.chain
    if name.startswith("chain."):
        attr = name.split(".", 1)[1]
        return replace(report, chain=replace(chain, **{attr: _flip(getattr(chain, attr), rng)}))
    if name == "tcb":
        return replace(report, tcb=report.tcb + rng.choice([-2, -1, 1, 2, 1000]))
    return replace(report, **{name: _flip(getattr(report, name), rng)})


def fuzz_appraisal(trials: int = 10_000, seed: int = 99):
    """Single-field corruptions of valid evidence through the full attest-and-issue path.

    Returns (certificates issued, list of oracle mismatches, reason histogram).
    """
    from collections import Counter
    from dataclasses import replace

    from c8ssim.cds import AppraisalFailed, KeyBindingMismatch
    from c8ssim.tee import compose_evidence

    tb = testbed(seed)
    rng = random.Random(seed)
    good = tb.cvm()
    unlisted = tb.cvm([("fw", b"fw-1"), ("agent", b"patched")])
    low = tb.cvm(tcb=MIN_TCB - 1)
    node = tb.cvm(NODE, cvm_id="node")
    svc = crypto.signing_keypair(rng)
    nonce = tb.cds.issue_challenge("node", 0)
    tb.cds.attest_and_issue(node.generate_report(b"", svc.public, nonce), nonce, svc.public, 0,
                            Role.ATTESTATION_SERVICE, ("kube-system", "as"))
    baseline = tb.cds.certificates_issued
    mismatches, reasons = [], Counter()
    plan = ([("report", f) for f in REPORT_FIELDS] + [("honest", f) for f in HONEST_VARIANTS]
            + [("composed-node", f) for f in REPORT_FIELDS] + [("composed", f) for f in COMPOSED_FIELDS]
            + [("composed-honest", f) for f in COMPOSED_HONEST])
    for i in range(trials):
        kind, name = plan[i % len(plan)]
        pod = crypto.kem_keypair(rng)
        nonce = tb.cds.issue_challenge("pod", 0)
        presented = pod.public
        if kind in ("report", "honest"):
            cvm = {"unlisted-measurement": unlisted, "low-tcb": low}.get(name, good)
            ev_nonce = rng.randbytes(32) if name == "wrong-nonce" else nonce
            evidence = cvm.generate_report(IMAGE_A, pod.public, ev_nonce)
            if kind == "report":
                evidence = _mutate_report(evidence, name, rng)
            elif name == "other-presented-key":
                presented = crypto.kem_keypair(rng).public
            expected = REPORT_FIELDS.get(name) or HONEST_VARIANTS[name]
            role = Role.WORKLOAD
        else:
            digest = crypto.digest(b"unauthorized") if name == "unauthorized-pod-digest" else IMAGE_A
            evidence = compose_evidence(node, svc, digest, ("default", f"p{i}"), pod.public, nonce)
            if kind == "composed-node":
                evidence = replace(evidence, node_report=_mutate_report(evidence.node_report, name, rng))
            elif kind == "composed":
                if name == "pod_identity":
                    evidence = replace(evidence, pod_identity=("default", f"x{i}"))
                else:
                    evidence = replace(evidence, **{name: _flip(getattr(evidence, name), rng)})
            expected = {**REPORT_FIELDS, **COMPOSED_FIELDS, **COMPOSED_HONEST}[name]
            role = Role.WORKLOAD
        try:
            tb.cds.attest_and_issue(evidence, nonce, presented, 0, role, ("default", f"p{i}"))
            got = "Accepted"
        except AppraisalFailed as exc:
            got = exc.reason.value
        except KeyBindingMismatch:
            got = "KeyBindingMismatch"
        reasons[got] += 1
        if got != expected:
            mismatches.append((kind, name, expected, got))
    return tb.cds.certificates_issued - baseline, mismatches, reasons


# -- ingress deployment --------------------------------------------------------

def echo_pod(pod_id):
    from c8ssim.ingress import encode_response

    def handle(src, data):
        return encode_response(pod_id, b"", b"echo:" + data)
    return handle


def ingress_deployment(seed=1, pods=3, window=300, config=None):
    """CDS, a pass-through ingress with a mesh identity, and ``pods`` echo pods."""
    from c8ssim.ingress import PassthroughIngress
    from c8ssim.mesh import ArrangementMode, Mesh, ProxyArrangement
    from c8ssim.network import Network

    tb = testbed(seed, config or CdsConfig())
    net = Network()
    mesh = Mesh(tb.cds.public_key, net, tb.rng)
    ing_ident, ing_cvm = identity(tb, "ingress", INGRESS, Role.INGRESS, ns="kube-system")
    ing = PassthroughIngress(ing_ident.pod_id, ing_cvm, mesh, window, rng=tb.rng)
    ing.mesh_identity = ing_ident
    side = ProxyArrangement(ArrangementMode.SIDECAR, "edge")
    side.install(ing_ident.pod_id, ing_ident)
    mesh.attach(ing_ident.pod_id, side)
    ids = []
    for i in range(pods):
        ident, _ = identity(tb, f"web-{i}")
        arr = ProxyArrangement(ArrangementMode.SIDECAR, f"node-{i}")
        arr.install(ident.pod_id, ident)
        mesh.attach(ident.pod_id, arr, echo_pod(ident.pod_id))
        ids.append(ident.pod_id)
    ing.update_pool(ids, 0)
    ing.refresh_attestation(tb.cds, 0)
    tb.extra.update(mesh=mesh, net=net, ingress=ing, pods=ids)
    return tb
