"""Scripted adversary actions and the assertion that decides each verdict.

The control plane gets exactly its real powers: schedule and kill pods,
rewire service discovery, read its own state, the registry and the wire.
The hypervisor can snapshot or flip bits in guest memory. Nothing here
reads a CVM's plaintext memory or holds a CDS key, except the explicit
``compromise_cds_at`` and ``compromise_router`` insider scenarios.
"""

from __future__ import annotations

from dataclasses import replace
from typing import TYPE_CHECKING, Any, Callable

from .. import crypto
from ..cds import CERT_DOMAIN, FreshnessBeacon, MeshCertificate, Role
from ..client import verify_ingress
from ..crypto import KeyPair
from ..ingress import IngressPresentation
from ..mesh import (
    ArrangementMode,
    MeshError,
    MeshIdentity,
    ProxyArrangement,
    handshake,
)
from ..service import EndpointError
from ..tee import HOST_CIPHERTEXT_TAG, IntegrityViolation, Manufacturer, launch_cvm
from .config import AdversaryAction, AdversaryKind, Boundary, PodSpec
from .eventlog import ADVERSARY_PHASE, Verdict, VerdictRecord

if TYPE_CHECKING:
    from .world import ClusterWorld

M, S, D = Verdict.MITIGATED, Verdict.SUCCEEDED, Verdict.DOS

EXPECTED = {
    AdversaryKind.SCHEDULE_UNAUTHORIZED_POD: M,
    AdversaryKind.READ_NETWORK: M,
    AdversaryKind.MITM_INTERNAL: M,
    AdversaryKind.MITM_EXTERNAL: M,
    AdversaryKind.FORGE_CERTIFICATE: M,
    AdversaryKind.INJECT_NODE: M,
    AdversaryKind.SNAPSHOT_CVM_MEMORY: M,
    AdversaryKind.TAMPER_CVM_MEMORY: M,
    AdversaryKind.SUBSTITUTE_CODE: M,
    AdversaryKind.READ_ENV_AND_SECRETS: M,
    AdversaryKind.KILL_PODS: D,
    AdversaryKind.STOP_CDS: D,
    AdversaryKind.COMPROMISE_ROUTER: M,
    # decided per run: Succeeded iff a direct-mode hop happens while compromised
    AdversaryKind.COMPROMISE_CDS_AT: None,
}


def sweep(world: "ClusterWorld", blobs) -> list[str]:
    """Labels of registered plaintexts occurring in any of ``blobs``."""
    found = []
    items = [bytes(b) for b in blobs]
    for label, secret in sorted(world.plaintexts.items()):
        if any(secret in b for b in items):
            found.append(label)
    return found


def _record(world, action: AdversaryAction, verdict: Verdict, expected=None, **evidence: Any) -> VerdictRecord:
    rec = VerdictRecord(action.label, action.kind.value, action.tick, verdict,
                        expected or EXPECTED[action.kind], evidence)
    world.log.verdict(rec)
    world.emit(ADVERSARY_PHASE, "adversary", "verdict", action=action.label, verdict=verdict,
               expected=rec.expected)
    return rec


def _victim(world, action) -> Any:
    name = action.params.get("victim") or action.params.get("target")
    running = [p for p in world.pods.values() if p.running]
    if name:
        return world.pods.get(name)
    return running[0] if running else None


def _attacker_identity(world, subject: tuple[str, str], role: Role = Role.WORKLOAD,
                       ca: KeyPair | None = None, pub_key: KeyPair | None = None) -> MeshIdentity:
    """A certificate the attacker mints under its own CA key."""
    ca = ca or crypto.signing_keypair(world.rng)
    key = pub_key or crypto.kem_keypair(world.rng)
    unsigned = MeshCertificate(subject[0], subject[1], key.public, b"\x00" * 32, role,
                               world.now, world.now + world.cfg.params.cert_lifetime)
    cert = replace(unsigned, issuer_signature=crypto.sign(ca.private, CERT_DOMAIN, unsigned.signed_bytes()))
    return MeshIdentity(cert, key.private)


def _schedule_unauthorized_pod(world, action):
    p = action.params
    node = p.get("node") or world.cfg.nodes[0].name
    image = p.get("image") or next(i.name for i in world.cfg.images if not i.authorized)
    base = PodSpec(f"rogue-{action.tick}", node, image, p.get("namespace", "default"))
    attempts = {}
    if world.nodes[node].boundary is Boundary.NODE_LEVEL:
        out = world.launch_pod(base, phase=ADVERSARY_PHASE)
        attempts["nri"] = (out.stage, out.reason, out.joined)
    else:
        # reuse an authorized pod's measured config, then pin the rogue image itself
        legit = next(s for s in world.cfg.pods if world.nodes[s.node].boundary is Boundary.POD_LEVEL)
        out = world.launch_pod(base, config=world.pod_config(legit), phase=ADVERSARY_PHASE)
        attempts["legit-config"] = (out.stage, out.reason, out.joined)
        out2 = world.launch_pod(replace(base, name=base.name + "-pinned"), phase=ADVERSARY_PHASE)
        attempts["rogue-config"] = (out2.stage, out2.reason, out2.joined)
    joined = any(a[2] for a in attempts.values())
    gated = any(a[0] == "gate" for a in attempts.values())
    return _record(world, action, M if not joined and gated else S, attempts=attempts)


def _read_network(world, action):
    found = sweep(world, (c.data for c in world.network.captures))
    world.adversary_logs["network-observer"].extend(c.data for c in world.network.captures)
    return _record(world, action, M if not found else S, captures=len(world.network.captures), found=found)


def _mitm_internal(world, action):
    victim = _victim(world, action)
    captured: list[bytes] = []
    world.adversary_logs["mitm"] = captured

    def capture(src: str, payload: bytes) -> bytes:
        captured.append(payload)
        return b""

    results = {}
    # 1. control plane injects an attacker endpoint with a self-minted certificate
    rogue = _attacker_identity(world, ("default", "mitm"))
    arr = ProxyArrangement(ArrangementMode.SIDECAR, "attacker")
    arr.install(rogue.pod_id, rogue)
    world.mesh.attach(rogue.pod_id, arr, capture, host="attacker")
    world.control_plane["endpoints"].append(rogue.pod_id)
    if world.ingress is not None:
        live = world.ingress.update_pool(world.control_plane["endpoints"], world.now)
        results["ingress-admitted-attacker"] = rogue.pod_id in live
    src = next(p for p in world.pods.values() if p.running and p is not victim) if victim else None
    if src is not None:
        err = world.mesh.probe(src.pod_id, rogue.pod_id, world.now)
        results["rogue-endpoint"] = type(getattr(err, "cause", err)).__name__ if err else "connected"
    # 2. discovery rewired so the victim's name resolves to the attacker holding a copy of its cert
    if victim is not None and src is not None:
        stolen = MeshIdentity(victim.cert, crypto.kem_keypair(world.rng).private)
        arr2 = ProxyArrangement(ArrangementMode.SIDECAR, "attacker")
        arr2.install(victim.pod_id, stolen)
        world.mesh.attach(victim.pod_id, arr2, capture, host="attacker")
        err = world.mesh.probe(src.pod_id, victim.pod_id, world.now)
        results["impersonation"] = type(getattr(err, "cause", err)).__name__ if err else "connected"
        world.mesh.attach(victim.pod_id, victim.arrangement, world._pod_handler(victim), host=victim.spec.node)
    world.mesh.detach(rogue.pod_id)
    world.control_plane["endpoints"].remove(rogue.pod_id)
    if world.ingress is not None:
        world.ingress.update_pool(world.control_plane["endpoints"], world.now)
    ok = not captured and "connected" not in results.values() and not results.get("ingress-admitted-attacker")
    return _record(world, action, M if ok else S, captured=len(captured), **results)


def _forge_certificate(world, action):
    victim = _victim(world, action)
    results = {}
    forged = _attacker_identity(world, victim.cert.subject)
    try:
        handshake(forged, MeshIdentity(victim.cert, b"\x00" * 32), world.now, world.mesh.cds_pub, world.rng)
        results["self-signed"] = "accepted"
    except MeshError as exc:
        results["self-signed"] = type(exc).__name__
    # genuine CDS signature, edited lifetime
    stretched = replace(victim.cert, not_after=victim.cert.not_after + 10**6)
    attacker = MeshIdentity(stretched, crypto.kem_keypair(world.rng).private)
    peer = next((p for p in world.pods.values() if p.running and p is not victim), victim)
    try:
        handshake(attacker, MeshIdentity(peer.cert, peer.key.private), world.now, world.mesh.cds_pub, world.rng)
        results["edited-cds-cert"] = "accepted"
    except MeshError as exc:
        results["edited-cds-cert"] = type(exc).__name__
    ok = all(v == "UntrustedIssuer" for v in results.values())
    return _record(world, action, M if ok else S, **results)


def _inject_node(world, action):
    name = action.params.get("name", "rogue-node")
    fake = Manufacturer.create(world.rng)
    platform = fake.endorse_platform(world.rng)
    from .world import NODE_COMPONENTS, TCB

    cvm = launch_cvm(NODE_COMPONENTS, TCB, platform, world.rng, cvm_id=f"node/{name}")
    key = crypto.signing_keypair(world.rng)
    try:
        world._certify(("kube-system", f"attestation-{name}"), name, cvm.id,
                       lambda nonce: cvm.generate_report(b"", key.public, nonce), key, Role.ATTESTATION_SERVICE)
        outcome = "issued"
    except EndpointError as exc:
        outcome = exc.message or exc.kind
    world.emit(ADVERSARY_PHASE, name, "inject-node", outcome=outcome)
    return _record(world, action, M if "BadChain" in outcome else S, appraisal=outcome)


def _all_cvms(world) -> list:
    cvms = []
    for pod in world.pods.values():
        if pod.cvm is not None:
            cvms.append(pod.cvm)
    cvms += [n.cvm for n in world.nodes.values() if n.cvm is not None]
    if world.ingress is not None:
        cvms.append(world.ingress.cvm)
    cvms += [r.cvm for r in world.cluster.replicas]
    seen, out = set(), []
    for c in cvms:
        if c.id not in seen and c.live:
            seen.add(c.id)
            out.append(c)
    return out


def _snapshot_cvm_memory(world, action):
    target = action.params.get("target", "all")
    if target == "all":
        cvms = _all_cvms(world)
    else:
        cvms = [world.pods[target].host_cvm]
    snaps = [c.host_read() for c in cvms]
    world.adversary_logs["hypervisor"].extend(snaps)
    tagged = all(s.startswith(HOST_CIPHERTEXT_TAG) or not s for s in snaps)
    found = sweep(world, snaps)
    return _record(world, action, M if tagged and not found else S,
                   cvms=[c.id for c in cvms], bytes=sum(map(len, snaps)), found=found)


def _tamper_cvm_memory(world, action):
    pod = _victim(world, action)
    region = pod.region(action.params.get("region", "image"))
    cvm = pod.host_cvm
    cvm.host_tamper(region)
    try:
        cvm.load(region)
        detected = False
    except IntegrityViolation:
        detected = True
    if detected and pod.cvm is not None:
        world.kill_pod(pod.spec.name)  # the guest halts rather than run on modified memory
    world.emit(ADVERSARY_PHASE, pod.spec.name, "memory-tampered", region=region, detected=detected)
    return _record(world, action, M if detected else S, region=region, detected=detected)


def _substitute_code(world, action):
    victim = _victim(world, action)
    spec = replace(victim.spec, name=victim.spec.name + "-substituted")
    if victim.node.boundary is Boundary.NODE_LEVEL:
        from .world import FIRMWARE, KERNEL, TCB

        components = [FIRMWARE, KERNEL, ("kubelet", b"kubelet-1.31"),
                      ("attestation-service", b"backdoored-attestation"), ("nri", b"c8s-nri-enforcer-1.0")]
        cvm = launch_cvm(components, TCB, victim.node.platform, world.rng, cvm_id=f"node/{victim.node.name}-sub")
        key = crypto.signing_keypair(world.rng)
        try:
            world._certify(("kube-system", "attestation-substituted"), victim.node.name, cvm.id,
                           lambda n: cvm.generate_report(b"", key.public, n), key, Role.ATTESTATION_SERVICE)
            outcome, joined = "issued", True
        except EndpointError as exc:
            outcome, joined = exc.message or exc.kind, False
    else:
        out = world.launch_pod(spec, agent=("agent", b"backdoored-agent"), phase=ADVERSARY_PHASE)
        outcome, joined = out.reason, out.joined
    return _record(world, action, M if not joined and "UnknownMeasurement" in outcome else S, appraisal=outcome)


def _read_env_and_secrets(world, action):
    blobs = [world.control_plane_bytes(), *world.registry.contents().values()]
    world.adversary_logs["control-plane"].extend(blobs)
    found = sweep(world, blobs)
    return _record(world, action, M if not found else S, found=found,
                   secret_refs=sorted(world.control_plane["secrets"]))


def _observable(world) -> list[bytes]:
    out = [c.data for c in world.network.captures]
    for items in world.adversary_logs.values():
        out.extend(items)
    return out


def _kill_pods(world, action):
    names = action.params.get("pods") or [sorted(world.pods)[0]]
    killed = [n for n in names if n in world.pods and world.pods[n].running]
    for n in killed:
        world.kill_pod(n)
        world.emit(ADVERSARY_PHASE, "control-plane", "pod-killed", pod=n)
    found = sweep(world, _observable(world))
    return _record(world, action, D if not found else S, killed=killed, found=found)


def _stop_cds(world, action):
    world.cluster.stop()
    world.stopped_cds_at = world.now
    world.certs_at_stop = sum(r.certificates_issued for r in world.cluster.replicas)
    world.emit(ADVERSARY_PHASE, "control-plane", "cds-stopped")
    spec = replace(world.cfg.pods[0], name="late-joiner")
    out = world.launch_pod(spec, phase=ADVERSARY_PHASE)
    found = sweep(world, _observable(world))
    verdict = D if not out.joined and not found else S
    return _record(world, action, verdict, new_pod_joined=out.joined, reason=out.reason, found=found)


def _compromise_cds_at(world, action):
    start = world.now
    until = int(action.params.get("until", world.cfg.params.duration))
    log = world.adversary_logs["cds-compromise"]
    world.cds_compromise = (start, until)

    def tap(region: str, key: bytes) -> None:
        if start <= world.now <= until:
            log.append(key)

    for replica in world.cluster.replicas:
        replica.tap = tap
        # code execution inside the CDS: everything still in memory
        if replica.cvm.live:
            for region in replica.cvm.regions():
                if region.startswith("hop/"):
                    log.append(replica.cvm.load(region))
    world.emit(ADVERSARY_PHASE, "adversary", "cds-compromised", until=until)

    def decide():
        in_window = sorted({f"secret/{sid}" for t, sid in world.hop_log if start <= t <= until})
        past = sorted({f"secret/{sid}" for t, sid in world.hop_log if t < start})
        captured = sweep(world, log)
        world.log.check("direct-hop-capture-exact", captured == in_window and not set(past) & set(captured),
                        captured=captured, in_window=in_window, past=past)
        world.conceded = captured
        expected = S if in_window else M
        return _record(world, action, S if captured else M, expected, captured=captured,
                       in_window=in_window, past_hops=past)

    world.deferred_verdicts.append(decide)


def _compromise_router(world, action):
    node = action.params.get("node") or sorted(world.nodes)[0]
    router = world.nodes[node].router
    router.compromised = True
    world.emit(ADVERSARY_PHASE, f"router/{node}", "router-compromised")

    def decide():
        log = router.adversary_log
        hints = sorted({p.spec.name for p in world.pods.values()
                        if any(p.spec.name.encode() in item for item in log)})
        found = sweep(world, log)
        world.log.check("router-sees-metadata-only", bool(hints) and not found, hints=hints, found=found)
        return _record(world, action, M if not found else S, hints_seen=hints, found=found, items=len(log))

    world.deferred_verdicts.append(decide)


def _mitm_external(world, action):
    client, ingress = world.client, world.ingress
    store = client.store
    genuine = ingress.presentation()
    rng = world.rng
    results = {}
    fake_tls = crypto.kem_keypair(rng).public
    results["forged-tls-key"] = verify_ingress(
        IngressPresentation(fake_tls, genuine.report, genuine.beacon), store, world.now, client.config.window)[1]
    rogue_ca = crypto.signing_keypair(rng)
    ts = world.now
    from ..cds import BEACON_DOMAIN

    fake_beacon = FreshnessBeacon(ts, crypto.sign(rogue_ca.private, BEACON_DOMAIN, FreshnessBeacon.message(ts)))
    results["forged-beacon"] = verify_ingress(
        IngressPresentation(genuine.tls_pubkey, genuine.report, fake_beacon), store, world.now, client.config.window)[1]
    # attacker's own CVM on a genuine platform, running a modified ingress, replaying the public beacon
    from .world import FIRMWARE, KERNEL, TCB

    node = next(iter(world.nodes.values()))
    rogue = launch_cvm([FIRMWARE, KERNEL, ("ingress", b"tampered-ingress")], TCB, node.platform, rng,
                       cvm_id="attacker-ingress")
    report = rogue.generate_report(genuine.beacon.signature, fake_tls)
    results["rogue-ingress"] = verify_ingress(
        IngressPresentation(fake_tls, report, genuine.beacon), store, world.now, client.config.window)[1]
    first = world.first_presentation
    if world.now - first.beacon.timestamp > client.config.window:
        results["replayed-old-attestation"] = verify_ingress(first, store, world.now, client.config.window)[1]
    ok = all(v.value != "Ok" for v in results.values())
    return _record(world, action, M if ok else S, **{k: v.value for k, v in results.items()})


HANDLERS: dict[AdversaryKind, Callable] = {
    AdversaryKind.SCHEDULE_UNAUTHORIZED_POD: _schedule_unauthorized_pod,
    AdversaryKind.READ_NETWORK: _read_network,
    AdversaryKind.MITM_INTERNAL: _mitm_internal,
    AdversaryKind.MITM_EXTERNAL: _mitm_external,
    AdversaryKind.FORGE_CERTIFICATE: _forge_certificate,
    AdversaryKind.INJECT_NODE: _inject_node,
    AdversaryKind.SNAPSHOT_CVM_MEMORY: _snapshot_cvm_memory,
    AdversaryKind.TAMPER_CVM_MEMORY: _tamper_cvm_memory,
    AdversaryKind.SUBSTITUTE_CODE: _substitute_code,
    AdversaryKind.READ_ENV_AND_SECRETS: _read_env_and_secrets,
    AdversaryKind.KILL_PODS: _kill_pods,
    AdversaryKind.STOP_CDS: _stop_cds,
    AdversaryKind.COMPROMISE_CDS_AT: _compromise_cds_at,
    AdversaryKind.COMPROMISE_ROUTER: _compromise_router,
}


def apply_adversary(world: "ClusterWorld", action: AdversaryAction):
    world.emit(ADVERSARY_PHASE, "adversary", "action", attack=action.kind, params=action.params)
    return HANDLERS[action.kind](world, action)
