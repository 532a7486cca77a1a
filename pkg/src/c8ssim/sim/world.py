"""Simulated cluster: nodes, pods, registry, CDS, ingress, client and network.

Everything random is drawn from one ``random.Random(seed)`` in a fixed
order, and every CVM gets an explicit name, so a run is a pure function of
its config.
"""

from __future__ import annotations

import heapq
import json
import random
from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Callable, Optional

from .. import crypto
from ..cds import (
    SECRET_INFO,
    AllowList,
    AllowListEntry,
    BrokerMode,
    CdsCluster,
    CdsConfig,
    CdsError,
    CdsReplica,
    DepositService,
    Kms,
    MeshCertificate,
    ReleasePolicy,
    Role,
    bootstrap,
    operator_verifier,
)
from ..client import AttestedClient, ClientConfig, ClientError, IngressRejected
from ..crypto import KeyPair
from ..envelope import MAGIC, EnvelopeError, MultiRecipientEnvelope, decrypt
from ..ingress import (
    EncryptedRouter,
    IngressError,
    PassthroughIngress,
    decode_response,
    encode_response,
    respond_encrypted,
)
from ..mesh import ArrangementMode, Mesh, MeshError, MeshIdentity, ProxyArrangement
from ..network import Network
from ..policy import (
    LaunchRequest,
    NriEnforcer,
    PodMeasuredConfig,
    Registry,
    encrypt_image,
    gate_image,
    sign_workload,
)
from ..service import CdsService, EndpointError, appraise_issue_request, unwrap_response
from ..tee import (
    CvmHandle,
    Manufacturer,
    Platform,
    TeeError,
    compose_evidence,
    evidence_to_bytes,
    launch_cvm,
    launch_measurement,
)
from ..wire import Writer
from .config import Boundary, Gate, IngressMode, PodSpec, ScenarioConfig
from .eventlog import RUNTIME_PHASE, EventLog

FIRMWARE = ("firmware", b"c8s-ovmf-2024.11")
KERNEL = ("kernel", b"c8s-guest-kernel-6.8")
CDS_COMPONENTS = [FIRMWARE, KERNEL, ("cds", b"c8s-cds-server-1.0")]
INGRESS_COMPONENTS = [FIRMWARE, KERNEL, ("ingress", b"c8s-ingress-1.0")]
ROUTER_COMPONENTS = [FIRMWARE, KERNEL, ("router", b"c8s-encrypted-router-1.0")]
NODE_COMPONENTS = [
    FIRMWARE,
    KERNEL,
    ("kubelet", b"kubelet-1.31"),
    ("attestation-service", b"c8s-node-attestation-1.0"),
    ("nri", b"c8s-nri-enforcer-1.0"),
]
POD_AGENT = ("agent", b"c8s-pod-agent-1.0")
TCB = 3
MIN_TCB = 2
HOP_INFO = b"c8s/broker-hop/v1"


def pod_components(cfg: PodMeasuredConfig, agent: tuple[str, bytes] = POD_AGENT) -> list[tuple[str, bytes]]:
    return [FIRMWARE, KERNEL, agent, cfg.component()]


class RateLimiter:
    """At most ``rate`` attestation reports per CVM per simulated second."""

    def __init__(self, rate: int = 1):
        self.rate = rate
        self._used: dict[tuple[str, int], int] = defaultdict(int)
        self.granted: dict[str, int] = defaultdict(int)

    def next_free(self, cvm_id: str, now: int) -> int:
        t = now
        while self._used[(cvm_id, t)] >= self.rate:
            t += 1
        return t

    def take(self, cvm_id: str, tick: int) -> None:
        self._used[(cvm_id, tick)] += 1
        self.granted[cvm_id] += 1

    def reserve(self, cvm_id: str, now: int) -> int:
        t = self.next_free(cvm_id, now)
        self.take(cvm_id, t)
        return t


@dataclass(frozen=True)
class Permit:
    granted: bool
    retry_at: int


def attestation_rate_limit(limiter: RateLimiter, cvm_id: str, now: int) -> Permit:
    """Permit a report now, or name the tick to back off to."""
    t = limiter.next_free(cvm_id, now)
    if t == now:
        limiter.take(cvm_id, now)
        return Permit(True, now)
    return Permit(False, t)


class _Defer(Exception):
    def __init__(self, tick: int):
        self.tick = tick


@dataclass
class Node:
    name: str
    boundary: Boundary
    platform: Platform
    cvm: Optional[CvmHandle] = None
    as_key: Optional[KeyPair] = None
    as_cert: Optional[MeshCertificate] = None
    proxy: Optional[ProxyArrangement] = None
    nri: Optional[NriEnforcer] = None
    router: Optional[EncryptedRouter] = None


@dataclass
class Pod:
    spec: PodSpec
    node: Node
    config: Optional[PodMeasuredConfig]
    cvm: Optional[CvmHandle] = None
    key: Optional[KeyPair] = None
    cert: Optional[MeshCertificate] = None
    image_digest: bytes = b""
    arrangement: Optional[ProxyArrangement] = None
    running: bool = False
    served: int = 0

    @property
    def pod_id(self) -> str:
        return f"{self.spec.namespace}/{self.spec.name}"

    @property
    def host_cvm(self) -> CvmHandle:
        cvm = self.cvm or self.node.cvm
        assert cvm is not None
        return cvm

    def region(self, name: str) -> str:
        return name if self.cvm is not None else f"pod/{self.pod_id}/{name}"

    @property
    def evidence_measurement(self) -> bytes:
        return self.host_cvm.measurement


@dataclass
class LaunchOutcome:
    pod: Optional[Pod]
    stage: str
    reason: str = ""

    @property
    def joined(self) -> bool:
        return self.pod is not None and self.pod.cert is not None


class ClusterWorld:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.rng = random.Random(cfg.seed)
        self.log = EventLog(cfg.name, cfg.seed)
        self.now = 0
        self.in_setup = True
        self.network = Network(lambda: self.now)
        self.limiter = RateLimiter(cfg.params.attestation_rate)
        self.registry = Registry()
        self.plaintexts: dict[str, bytes] = {}
        self.adversary_logs: dict[str, list[bytes]] = defaultdict(list)
        self.control_plane: dict[str, Any] = {"pod_specs": {}, "endpoints": [], "secrets": {}, "events": []}
        self.nodes: dict[str, Node] = {}
        self.pods: dict[str, Pod] = {}
        self.images: dict[str, bytes] = {}
        self.workload_sigs: dict[tuple[str, bytes], bytes] = {}
        self.customer_keys: dict[str, KeyPair] = {}
        self.secret_values: dict[str, bytes] = {}
        self.pod_secrets: dict[str, dict[str, bytes]] = defaultdict(dict)
        self.hop_log: list[tuple[int, str]] = []
        self.routers: list[EncryptedRouter] = []
        self.ingress: Optional[PassthroughIngress] = None
        self.client: Optional[AttestedClient] = None
        self.stopped_cds_at: Optional[int] = None
        self.certs_at_stop = 0
        self.cds_compromise: Optional[tuple[int, int]] = None
        self.conceded: list[str] = []
        self.first_presentation = None
        self.request_results: list[dict[str, Any]] = []
        self.mesh_results: list[dict[str, Any]] = []
        self.deferred_verdicts: list[Callable[[], Any]] = []
        self.setup_end = 0
        self._queue: list[tuple[int, int, int, str, tuple]] = []
        self._seq = 0
        self._lb = 0
        self._pod_generation: dict[str, int] = defaultdict(int)

    # -- bookkeeping
    def emit(self, phase: str, actor: str, kind: str, payload: Optional[bytes] = None, **detail: Any) -> None:
        self.log.emit(self.now, phase, actor, kind, payload, **detail)

    def register_plaintext(self, label: str, data: bytes) -> None:
        self.plaintexts[label] = bytes(data)

    def schedule(self, tick: int, prio: int, kind: str, *args: Any) -> None:
        heapq.heappush(self._queue, (tick, prio, self._seq, kind, args))
        self._seq += 1

    def _slot(self, cvm_id: str) -> None:
        t = self.limiter.next_free(cvm_id, self.now)
        if t > self.now:
            if not self.in_setup:
                raise _Defer(t)
            self.now = t
        self.limiter.take(cvm_id, self.now)
        self.log.counters["attestations"] += 1

    # -- setup
    def setup(self) -> None:
        cfg = self.cfg
        phase = "preconditions"
        self.manufacturer = Manufacturer.create(self.rng)
        self.roots = frozenset({self.manufacturer.root})
        self.operator = crypto.signing_keypair(self.rng)
        self.cds_platform = self.manufacturer.endorse_platform(self.rng)
        for spec in cfg.nodes:
            platform = self.manufacturer.endorse_platform(self.rng)
            self.nodes[spec.name] = Node(spec.name, cfg.node_boundary(spec.name), platform)
        self._publish_images()
        self.allowlist = self._build_allowlist(1)

        self.cds_config = CdsConfig(cfg.params.cert_lifetime, cfg.params.nonce_ttl, cfg.params.window)
        first = bootstrap(
            operator_verifier(self.roots, launch_measurement(CDS_COMPONENTS)),
            self.allowlist, self.operator.public, self.cds_platform, CDS_COMPONENTS,
            self.roots, TCB, self.cds_config, self.rng, cvm_id="cds-0",
        )
        self.cluster = CdsCluster(first)
        self.register_plaintext("cds-ca-key", first.leak_signing_key())
        self.emit(phase, "cds", "cds-bootstrap", first.public_key, measurement=first.measurement)
        for i in range(1, cfg.params.cds_replicas):
            self._enroll_replica(i)
        self.deposit = DepositService(self.roots, self.rng)
        self.kms = Kms(self.roots, first.measurement, self.rng)
        self.service = CdsService(self.cluster, self.deposit, self.network)
        self.mesh = Mesh(self.cluster.public_key, self.network, self.rng)
        self.mesh.on_channel = self._register_channel

        self._register_secrets()
        for node in self.nodes.values():
            if node.boundary is Boundary.NODE_LEVEL:
                self._attest_node(node)
            else:
                node.proxy = None
        manifest = self.cluster.primary().manifest(self.now)
        for node in self.nodes.values():
            if node.boundary is Boundary.NODE_LEVEL:
                node.nri = NriEnforcer(node.name, self.cluster.public_key)
                node.nri.install(manifest)
                self.emit(phase, node.name, "nri-installed", manifest.to_bytes(), version=manifest.version)
        self.emit(phase, "operator", "gating-in-place", pod_level=sum(
            1 for n in self.nodes.values() if n.boundary is Boundary.POD_LEVEL))

        for spec in cfg.pods:
            outcome = self.launch_pod(spec)
            if not outcome.joined:
                self.emit(phase, spec.name, "launch-failed", stage=outcome.stage, reason=outcome.reason)
        # at 0 means "before serving": released as a precondition, ahead of the ingress
        for s in cfg.secrets:
            if s.at <= 0:
                self._on_release(s.id, phase)
            else:
                self.schedule(s.at, 1, "release", s.id)
        if cfg.ingress.mode in (IngressMode.PASSTHROUGH, IngressMode.BOTH):
            self._start_ingress()
        if cfg.ingress.mode in (IngressMode.ENCRYPTED, IngressMode.BOTH):
            self._start_routers()
        self.setup_end = self.now

        client_cfg = ClientConfig(
            "cds", launch_measurement(CDS_COMPONENTS), tuple(sorted(self.roots)),
            cfg.params.window, cfg.params.client_refresh,
        )
        self.client = AttestedClient(client_cfg, self.service.transport("client"), self.rng, self.network)
        store = self.client.bootstrap(self.now)
        self.emit("client-bootstrapping", "client", "trust-bootstrap", store.manifest.to_bytes(),
                  pool=len(store.manifest.pool), manifest_version=store.manifest.version)
        if self.ingress is not None:
            self._connect()
        self.in_setup = False

    def _publish_images(self) -> None:
        for spec in self.cfg.images:
            blob = f"image:{spec.name}:".encode() + self.rng.randbytes(48)
            self.images[spec.name] = blob
            if spec.encrypted:
                key, ct = encrypt_image(blob, self.rng)
                self.registry.push(spec.name, ct)
                self.secret_values[f"image/{spec.name}"] = key
                self.register_plaintext(f"image/{spec.name}", blob)
                self.register_plaintext(f"image-key/{spec.name}", key)
            else:
                self.registry.push(spec.name, blob)
        for ns in sorted({p.namespace for p in self.cfg.pods if p.gate is Gate.CUSTOMER_KEY}):
            self.customer_keys[ns] = crypto.signing_keypair(self.rng)
            for spec in self.cfg.images:
                if spec.authorized:
                    d = self.registry.digest_of(spec.name)
                    self.workload_sigs[(ns, d)] = sign_workload(self.customer_keys[ns].private, d)

    def pod_config(self, spec: PodSpec, image: Optional[str] = None) -> PodMeasuredConfig:
        image = image or spec.image
        if spec.gate is Gate.CUSTOMER_KEY:
            return PodMeasuredConfig(customer_pubkey=self.customer_keys[spec.namespace].public)
        if spec.gate is Gate.ENCRYPTED_IMAGE:
            return PodMeasuredConfig(secret_ref=ReleasePolicy(f"image/{image}", frozenset(), BrokerMode.WRAPPED))
        return PodMeasuredConfig(pinned_digests=frozenset({self.registry.digest_of(image)}))

    def _measurement_for(self, spec: PodSpec) -> bytes:
        if self.cfg.node_boundary(spec.node) is Boundary.NODE_LEVEL:
            return launch_measurement(NODE_COMPONENTS)
        return launch_measurement(pod_components(self.pod_config(spec)))

    def _build_allowlist(self, version: int) -> AllowList:
        entries = {
            AllowListEntry(launch_measurement(CDS_COMPONENTS), MIN_TCB, Role.CDS),
            AllowListEntry(launch_measurement(INGRESS_COMPONENTS), MIN_TCB, Role.INGRESS),
            AllowListEntry(launch_measurement(ROUTER_COMPONENTS), MIN_TCB, Role.INGRESS),
        }
        if any(n.boundary is Boundary.NODE_LEVEL for n in self.nodes.values()):
            entries.add(AllowListEntry(launch_measurement(NODE_COMPONENTS), MIN_TCB, Role.ATTESTATION_SERVICE))
        for spec in self.cfg.pods:
            if self.cfg.node_boundary(spec.node) is Boundary.POD_LEVEL:
                entries.add(AllowListEntry(self._measurement_for(spec), MIN_TCB, Role.WORKLOAD))
        images = [(self.registry.digest_of(i.name), i.name) for i in self.cfg.images if i.authorized]
        return AllowList.create(version, entries, images, self.operator)

    def _enroll_replica(self, index: int) -> None:
        primary = self.cluster.primary()
        cvm = launch_cvm(CDS_COMPONENTS, TCB, self.cds_platform, self.rng, cvm_id=f"cds-{index}")
        enroll = crypto.kem_keypair(self.rng)
        nonce = primary.issue_challenge(cvm.id, self.now)
        report = cvm.generate_report(b"", enroll.public, nonce)
        wrapped = primary.enroll_replica(report, enroll.public, nonce, self.now)
        self.network.transmit("cds-0", cvm.id, wrapped.to_bytes(), "cds-enroll")
        replica = CdsReplica.join(cvm, enroll, wrapped, primary)
        self.cluster.add(replica)
        self.emit("preconditions", cvm.id, "replica-enrolled", replica.public_key)

    def _register_secrets(self) -> None:
        """Deposit configured secrets and encrypted-image keys with their release policies."""
        by_image: dict[str, list[PodSpec]] = defaultdict(list)
        for p in self.cfg.pods:
            by_image[p.image].append(p)

        def pairs(images: list[str]) -> frozenset:
            out = set()
            for img in images:
                digest = self.registry.digest_of(img)
                for p in by_image[img]:
                    out.add((self._measurement_for(p), digest))
            return frozenset(out)

        for img in self.cfg.images:
            if img.encrypted:
                sid = f"image/{img.name}"
                allowed = pairs([img.name])
                self.deposit.deposit(sid, self.secret_values[sid], allowed)
                self.cluster.register_release_policy(ReleasePolicy(sid, allowed, BrokerMode.WRAPPED))
        for s in self.cfg.secrets:
            value = self.rng.randbytes(32)
            self.secret_values[s.id] = value
            self.register_plaintext(f"secret/{s.id}", value)
            allowed = pairs(s.allowed)
            mode = BrokerMode(s.mode)
            if mode is BrokerMode.WRAPPED:
                self.deposit.deposit(s.id, value, allowed)
            else:
                self.kms.put(s.id, value)
            self.cluster.register_release_policy(ReleasePolicy(s.id, allowed, mode))
            self.control_plane["secrets"][s.id] = {"ref": s.id, "mode": s.mode}

    def _register_channel(self, channel) -> None:
        for name, key in sorted(channel._keys.items()):
            self.register_plaintext(f"mesh-key/{channel.channel_id}/{name}", key)

    # -- CDS interaction through the endpoint service
    def _cds(self, endpoint: str, body: bytes, caller: str) -> bytes:
        return unwrap_response(self.service.handle(endpoint, body, caller))

    def _certify(self, subject: tuple[str, str], caller: str, cvm_id: str,
                 evidence_fn, key: KeyPair, role: Role, hint: str = "") -> MeshCertificate:
        nonce = self._cds("challenge", Writer().text("/".join(subject)).u64(self.now).getvalue(), caller)
        self._slot(cvm_id)
        evidence = evidence_fn(nonce)
        body = appraise_issue_request(evidence_to_bytes(evidence), nonce, key.public, self.now, role, subject, hint)
        cert = MeshCertificate.from_bytes(self._cds("appraise-issue", body, caller))
        self.log.counters["certificates"] += 1
        return cert

    def _attest_node(self, node: Node) -> None:
        node.cvm = launch_cvm(NODE_COMPONENTS, TCB, node.platform, self.rng, cvm_id=f"node/{node.name}")
        node.as_key = crypto.signing_keypair(self.rng)
        node.cvm.store("as-key", node.as_key.private)
        node.as_cert = self._certify(
            ("kube-system", f"attestation-{node.name}"), node.name, node.cvm.id,
            lambda nonce: node.cvm.generate_report(b"", node.as_key.public, nonce),
            node.as_key, Role.ATTESTATION_SERVICE,
        )
        node.proxy = ProxyArrangement(ArrangementMode.NODE_PROXY, node.name)
        self.emit("preconditions", node.name, "substrate-attested", node.as_cert.to_bytes(),
                  measurement=node.cvm.measurement)

    # -- pods
    def _evidence(self, pod: Pod, nonce: bytes, bound_key: bytes):
        node = pod.node
        if pod.cvm is not None:
            return pod.cvm.generate_report(pod.image_digest, bound_key, nonce)
        assert node.cvm is not None and node.as_key is not None
        return compose_evidence(node.cvm, node.as_key, pod.image_digest, (pod.spec.namespace, pod.spec.name),
                                bound_key, nonce)

    def launch_pod(
        self,
        spec: PodSpec,
        config: Optional[PodMeasuredConfig] = None,
        agent: tuple[str, bytes] = POD_AGENT,
        phase: str = "preconditions",
    ) -> LaunchOutcome:
        """Control plane schedules a pod; gating and attestation decide whether it joins."""
        node = self.nodes[spec.node]
        self.control_plane["pod_specs"][spec.name] = {
            "node": spec.node, "image": spec.image, "namespace": spec.namespace,
            "env": {"SECRET_REFS": ",".join(s.id for s in self.cfg.secrets if s.pod == spec.name)},
        }
        self.control_plane["events"].append(f"schedule {spec.name} on {spec.node}")
        blob = self.registry.pull(spec.image)
        digest = crypto.digest(blob)
        self._pod_generation[spec.name] += 1
        gen = self._pod_generation[spec.name]
        if node.boundary is Boundary.NODE_LEVEL:
            if node.cvm is None or node.nri is None:
                return LaunchOutcome(None, "substrate", "NodeNotAttested")
            verdict = node.nri.check(LaunchRequest(node.name, digest, spec.image))
            if not verdict.allowed:
                self.emit(phase, node.name, "nri-reject", digest, pod=spec.name, reason=verdict.reason)
                return LaunchOutcome(None, "gate", verdict.reason)
            pod = Pod(spec, node, None, image_digest=digest, arrangement=node.proxy)
        else:
            cfg = config or self.pod_config(spec)
            cvm = launch_cvm(pod_components(cfg, agent), TCB, node.platform, self.rng,
                             cvm_id=f"pod/{spec.namespace}/{spec.name}/{gen}")
            verdict = gate_image(cfg, digest, self.workload_sigs.get((spec.namespace, digest)))
            if not verdict.allowed:
                cvm.terminate()
                self.emit(phase, spec.name, "gate-reject", digest, reason=verdict.reason)
                return LaunchOutcome(None, "gate", verdict.reason)
            pod = Pod(spec, node, cfg, cvm=cvm, image_digest=digest,
                      arrangement=ProxyArrangement(ArrangementMode.SIDECAR, cvm.id))
        pod.key = crypto.kem_keypair(self.rng)
        pod.host_cvm.store(pod.region("mesh-key"), pod.key.private)
        self.register_plaintext(f"pod-key/{pod.pod_id}/{gen}", pod.key.private)
        try:
            if self.cfg.image(spec.image).encrypted:
                key = self._broker(pod, f"image/{spec.image}")
                image = crypto.aead_open(key, blob, b"c8s/image-key/v1")
                pod.host_cvm.store(pod.region("image"), image)
            else:
                pod.host_cvm.store(pod.region("image"), blob)
            pod.cert = self._certify(
                (spec.namespace, spec.name), spec.node, pod.host_cvm.id,
                lambda nonce: self._evidence(pod, nonce, pod.key.public),
                pod.key, Role.WORKLOAD, spec.name,
            )
        except (EndpointError, CdsError, crypto.CryptoError) as exc:
            if pod.cvm is not None:
                pod.cvm.terminate()
            reason = getattr(exc, "message", "") or str(exc)
            kind = getattr(exc, "kind", type(exc).__name__)
            self.emit(phase, spec.name, "attestation-rejected", reason=f"{kind}: {reason}")
            return LaunchOutcome(pod, "attestation", f"{kind}: {reason}")
        pod.arrangement.install(pod.pod_id, MeshIdentity(pod.cert, pod.key.private))
        self.mesh.attach(pod.pod_id, pod.arrangement, self._pod_handler(pod), host=spec.node)
        pod.running = True
        self.pods[spec.name] = pod
        if pod.pod_id not in self.control_plane["endpoints"]:
            self.control_plane["endpoints"].append(pod.pod_id)
        self.emit(phase, spec.name, "pod-certified", pod.cert.to_bytes(), node=spec.node,
                  boundary=node.boundary, not_after=pod.cert.not_after)
        self.schedule(pod.cert.not_before + int(self.cfg.params.cert_lifetime * 0.8), 0, "renew", spec.name)
        self._refresh_routes()
        return LaunchOutcome(pod, "joined")

    def _pod_handler(self, pod: Pod) -> Callable[[str, bytes], bytes]:
        def handle(src: str, payload: bytes) -> bytes:
            cvm = pod.host_cvm
            self.emit("intra-cluster-transit", pod.spec.name, "mesh-deliver", payload, src=src)
            cvm.store(pod.region("request"), payload)
            private = cvm.load(pod.region("mesh-key"))
            measurement = pod.cert.measurement if pod.cert else b""
            pod.served += 1
            if payload.startswith(MAGIC):
                env = MultiRecipientEnvelope.from_bytes(payload)
                plaintext = decrypt(env, private)
                body = encode_response(pod.pod_id, measurement, plaintext)
                reply = respond_encrypted(body, env.sender_pubkey, pod.key.public, self.rng).to_bytes()
            else:
                reply = encode_response(pod.pod_id, measurement, payload)
            self.emit("workload-execution", pod.spec.name, "execute", payload, workload="echo")
            return reply

        return handle

    def _broker(self, pod: Pod, secret_id: str) -> bytes:
        """Attestation-gated release to ``pod``; returns the key as held inside the pod."""
        replica = self.cluster.primary()
        nonce = replica.issue_challenge(pod.pod_id, self.now)
        self._slot(pod.host_cvm.id)
        evidence = self._evidence(pod, nonce, pod.key.public)
        self.network.transmit(pod.node.name, "cds", evidence_to_bytes(evidence), "broker-request")
        received: list[bytes] = []

        def deliver(key: bytes) -> None:
            hop = crypto.wrap_key(pod.key.public, key, HOP_INFO, self.rng)
            self.network.transmit("cds", pod.node.name, hop.to_bytes(), "broker-hop")
            received.append(crypto.unwrap_key(pod.key.private, hop, HOP_INFO))
            self.hop_log.append((self.now, secret_id))

        out = replica.broker_secret(secret_id, evidence, pod.key.public, nonce, self.now,
                                    deposit=self.deposit, kms=self.kms, deliver=deliver)
        if received:
            return received[0]
        self.network.transmit("cds", pod.node.name, out.to_bytes(), "broker-wrapped")
        return crypto.unwrap_key(pod.key.private, out, SECRET_INFO + secret_id.encode())

    # -- ingress
    def _start_ingress(self) -> None:
        node = self.nodes[self.cfg.ingress.node or self.cfg.nodes[0].name]
        cvm = launch_cvm(INGRESS_COMPONENTS, TCB, node.platform, self.rng, cvm_id="ingress")
        key = crypto.kem_keypair(self.rng)
        cvm.store("mesh-key", key.private)
        cert = self._certify(("ingress-system", "ingress"), node.name, cvm.id,
                             lambda nonce: cvm.generate_report(b"", key.public, nonce), key, Role.INGRESS)
        arrangement = ProxyArrangement(ArrangementMode.SIDECAR, cvm.id)
        identity = MeshIdentity(cert, key.private)
        arrangement.install(cert.pod_id, identity)
        self.mesh.attach(cert.pod_id, arrangement, None, host=node.name)
        ingress = PassthroughIngress(cert.pod_id, cvm, self.mesh, self.cfg.params.window, rng=self.rng)
        ingress.mesh_identity = identity
        ingress.on_forward = lambda: self.emit("intra-cluster-transit", "ingress", "forward")
        self.ingress = ingress
        self._refresh_ingress(initial=True)
        self.first_presentation = ingress.presentation()
        self.ingress.update_pool(self.control_plane["endpoints"], self.now)
        self.emit("preconditions", "ingress", "ingress-ready", ingress.tls_pubkey,
                  pool=list(ingress.live_pool))
        self.schedule(self.now + self.cfg.params.pool_refresh, 0, "pool")

    def _refresh_ingress(self, initial: bool = False) -> bool:
        ingress = self.ingress
        assert ingress is not None
        phase = "preconditions" if initial else RUNTIME_PHASE
        try:
            self._slot(ingress.cvm.id)
            ingress.refresh_attestation(self.cluster.primary(), self.now)
        except CdsError as exc:
            # no beacon, so no report was produced for the slot just taken
            self.log.counters["attestations"] -= 1
            self.emit(phase, "ingress", "refresh-failed", reason=type(exc).__name__)
            self.schedule(self.now + 30, 0, "refresh")
            return False
        self.emit(phase, "ingress", "attestation-refreshed", ingress.beacon.signature,
                  beacon=ingress.beacon.timestamp)
        self.schedule(ingress.beacon.timestamp + int(self.cfg.params.window * 0.8), 0, "refresh")
        return True

    def _start_routers(self) -> None:
        for node in self.nodes.values():
            cvm = launch_cvm(ROUTER_COMPONENTS, TCB, node.platform, self.rng, cvm_id=f"router/{node.name}")
            key = crypto.kem_keypair(self.rng)
            cvm.store("mesh-key", key.private)
            cert = self._certify(("ingress-system", f"router-{node.name}"), node.name, cvm.id,
                                 lambda nonce: cvm.generate_report(b"", key.public, nonce), key, Role.INGRESS)
            arrangement = ProxyArrangement(ArrangementMode.SIDECAR, cvm.id)
            arrangement.install(cert.pod_id, MeshIdentity(cert, key.private))
            router = EncryptedRouter(node.name, cert.pod_id, self.mesh)
            self.mesh.attach(cert.pod_id, arrangement, router.handle_peer, host=node.name)
            node.router = router
            self.routers.append(router)
            self.adversary_logs[f"router/{node.name}"] = router.adversary_log
            self.emit("preconditions", f"router/{node.name}", "router-ready", cert.to_bytes())
        self._refresh_routes()

    def _refresh_routes(self) -> None:
        routers = {n.name: n.router for n in self.nodes.values() if n.router is not None}
        for name, router in routers.items():
            router.local_pods = {p.spec.name: p.pod_id for p in self.pods.values()
                                 if p.running and p.spec.node == name}
            router.peers = {p.spec.name: p.spec.node for p in self.pods.values()
                            if p.running and p.spec.node != name and p.spec.node in routers}
            router.peer_routers = {n: r.pod_id for n, r in routers.items() if n != name}

    # -- client
    def _connect(self) -> bool:
        assert self.client is not None and self.ingress is not None
        try:
            self.client.connect(self.ingress, self.now)
        except IngressRejected as exc:
            self.emit("connection-establishment", "client", "verify-ingress", accepted=False,
                      reason=exc.reason)
            return False
        s = self.client.session
        self.register_plaintext(f"session/{s.session_id}/c2s", s.c2s)
        self.register_plaintext(f"session/{s.session_id}/s2c", s.s2c)
        self.emit("connection-establishment", "client", "verify-ingress", accepted=True,
                  reason="Ok", beacon=s.presentation.beacon.timestamp)
        self.emit("connection-establishment", "client", "session-open", session=s.session_id,
                  expires=s.expires_at)
        return True

    # -- event loop
    def run(self) -> None:
        cfg = self.cfg
        t0 = max(cfg.traffic.start, self.setup_end + 1)
        self.traffic_start = t0
        for i in range(cfg.traffic.requests):
            tick = t0 if cfg.traffic.burst else t0 + i * cfg.traffic.interval
            self.schedule(tick, 3, "request", i)
        if cfg.traffic.mesh_calls:
            t = t0
            while t <= cfg.params.duration:
                for j, call in enumerate(cfg.traffic.mesh_calls):
                    self.schedule(t, 3, "mesh-call", j)
                t += cfg.traffic.mesh_interval
        from .adversary import apply_adversary

        for idx, action in enumerate(cfg.adversary):
            self.schedule(max(action.tick, self.setup_end + 1), 2, "adversary", idx)

        while self._queue:
            tick, prio, _, kind, args = heapq.heappop(self._queue)
            if tick > cfg.params.duration and kind != "serve":
                continue
            self.now = max(self.now, tick)
            try:
                if kind == "adversary":
                    apply_adversary(self, cfg.adversary[args[0]])
                else:
                    getattr(self, "_on_" + kind.replace("-", "_"))(*args)
            except _Defer as d:
                self.schedule(d.tick, prio, kind, *args)
        self.now = max(self.now, cfg.params.duration)

    def _on_renew(self, name: str) -> None:
        pod = self.pods.get(name)
        if pod is None or not pod.running:
            return
        try:
            cert = self._certify(pod.cert.subject, pod.spec.node, pod.host_cvm.id,
                                 lambda nonce: self._evidence(pod, nonce, pod.key.public),
                                 pod.key, Role.WORKLOAD, name)
        except (EndpointError, CdsError) as exc:
            self.log.counters["renewal_failures"] += 1
            self.emit(RUNTIME_PHASE, name, "renewal-failed", reason=getattr(exc, "kind", type(exc).__name__))
            if self.now + 60 <= pod.cert.not_after:
                self.schedule(self.now + 60, 0, "renew", name)
            return
        pod.cert = cert
        pod.arrangement.install(pod.pod_id, MeshIdentity(cert, pod.key.private))
        self.log.counters["renewals"] += 1
        self.emit(RUNTIME_PHASE, name, "renewed", cert.to_bytes(), not_after=cert.not_after)
        self.schedule(cert.not_before + int(self.cfg.params.cert_lifetime * 0.8), 0, "renew", name)

    def _on_refresh(self) -> None:
        if self.ingress is not None and self.ingress.needs_refresh(self.now):
            self._refresh_ingress()

    def _on_pool(self) -> None:
        if self.ingress is not None:
            before = list(self.ingress.live_pool)
            live = self.ingress.update_pool(self.control_plane["endpoints"], self.now)
            if live != before:
                self.emit(RUNTIME_PHASE, "ingress", "pool-updated", live=live,
                          excluded=dict(sorted(self.ingress.excluded.items())))
        self._refresh_routes()
        self.schedule(self.now + self.cfg.params.pool_refresh, 0, "pool")

    def _on_release(self, secret_id: str, phase: str = RUNTIME_PHASE) -> None:
        spec = next(s for s in self.cfg.secrets if s.id == secret_id)
        pod = self.pods.get(spec.pod)
        if pod is None or not pod.running:
            self.emit(phase, spec.pod, "release-skipped", secret=secret_id)
            return
        try:
            key = self._broker(pod, secret_id)
        except CdsError as exc:
            self.emit(phase, spec.pod, "release-denied", secret=secret_id, reason=type(exc).__name__)
            return
        pod.host_cvm.store(pod.region(f"secret/{secret_id}"), key)
        self.pod_secrets[spec.pod][secret_id] = key
        self.log.counters["secrets_released"] += 1
        self.emit(phase, spec.pod, "secret-released", secret=secret_id, mode=spec.mode,
                  correct=key == self.secret_values[secret_id])

    def _payload(self, i: int) -> bytes:
        return f"request-{i}:".encode() + self.rng.randbytes(24)

    def _on_request(self, i: int) -> None:
        payload = self._payload(i)
        self.register_plaintext(f"payload/{i}", payload)
        mode = self.cfg.ingress.mode
        if mode is IngressMode.BOTH:
            path = "encrypted" if i % 2 else "passthrough"
        else:
            path = mode.value
        if path == "passthrough" and self.cfg.traffic.per_request_attestation:
            slot = self.limiter.reserve("ingress", self.now)
            self.log.counters["attestations"] += 1
            self.schedule(slot, 3, "serve", i, payload, self.now)
            return
        self._serve(i, payload, path, self.now)

    def _on_serve(self, i: int, payload: bytes, arrived: int) -> None:
        """Strawman path: a fresh ingress attestation for this one request."""
        ingress = self.ingress
        ingress.refresh_attestation(self.cluster.primary(), self.now)
        self._serve(i, payload, "passthrough", arrived, fresh=True)

    def _serve(self, i: int, payload: bytes, path: str, arrived: int, fresh: bool = False) -> None:
        self.emit("request-submission", "client", "submit", payload, request=i, path=path)
        result: dict[str, Any] = {"request": i, "path": path, "arrived": arrived}
        try:
            if path == "passthrough":
                session = self.client.session
                if fresh or session is None or not session.live(self.now):
                    if not self._connect():
                        raise IngressRejected(self.client.rejections[-1])
                response = self.client.submit(payload, self.now, self.ingress)
            else:
                response = self._encrypted_request(i, payload)
        except IngressRejected as exc:
            result.update(ok=False, error="IngressRejected", reason=exc.reason.value)
        except (ClientError, IngressError, MeshError, EnvelopeError, CdsError, TeeError) as exc:
            result.update(ok=False, error=type(exc).__name__)
        else:
            result.update(ok=response.body == payload, pod=response.pod_id)
        result["latency"] = self.now - arrived
        self.request_results.append(result)
        self.emit("response", "client", "response", request=i, **{k: v for k, v in result.items()
                                                                  if k not in ("request", "arrived")})

    def _encrypted_request(self, i: int, payload: bytes):
        client = self.client
        client.bootstrap(self.now)
        subset = None
        if self.cfg.traffic.subset:
            subset = [self.cfg.pod(n).namespace + "/" + n for n in self.cfg.traffic.subset]
        env = client.encrypt_for_pool(payload, subset)
        routers = sorted(self.routers, key=lambda r: r.node)
        router = routers[self._lb % len(routers)]
        self._lb += 1
        data = env.to_bytes()
        self.network.transmit("client", router.node, data, "l4-balancer")
        before = {r.node: len(r.deliveries) for r in routers}
        reply = router.handle(data, self.now)
        for r in routers:
            for target, hops in r.deliveries[before[r.node]:]:
                self.emit("intra-cluster-transit", f"router/{router.node}", "route",
                          hops=hops, target=target, delivered_by=r.node)
        self.network.transmit(router.node, "client", reply, "l4-balancer")
        body = client.open_response(MultiRecipientEnvelope.from_bytes(reply))
        pod_id, measurement, inner = decode_response(body)
        return client.check_response(pod_id, measurement, inner)

    def _on_mesh_call(self, j: int) -> None:
        call = self.cfg.traffic.mesh_calls[j]
        src, dst = self.pods.get(call.src), self.pods.get(call.dst)
        record: dict[str, Any] = {"tick": self.now, "src": call.src, "dst": call.dst}
        if src is None or dst is None or not src.running:
            record.update(ok=False, error="NotRunning")
        else:
            msg = b"mesh-call:" + self.rng.randbytes(16)
            self.register_plaintext(f"mesh-call/{self.now}/{j}", msg)
            try:
                reply = self.mesh.request(src.pod_id, dst.pod_id, msg, self.now)
                record.update(ok=decode_response(reply)[2] == msg)
            except MeshError as exc:
                record.update(ok=False, error=type(getattr(exc, "cause", exc)).__name__)
        record["src_cert_valid"] = bool(src and src.cert and src.cert.valid_at(self.now))
        record["dst_cert_valid"] = bool(dst and dst.cert and dst.cert.valid_at(self.now))
        self.mesh_results.append(record)
        self.emit(RUNTIME_PHASE, call.src, "mesh-call", **{k: v for k, v in record.items() if k != "tick"})

    # -- state the untrusted parties can see
    def control_plane_bytes(self) -> bytes:
        return json.dumps(self.control_plane, sort_keys=True).encode()

    def kill_pod(self, name: str) -> None:
        pod = self.pods[name]
        pod.running = False
        self.mesh.detach(pod.pod_id)
        if pod.cvm is not None:
            pod.cvm.terminate()
        else:
            for region in pod.host_cvm.regions():
                if region.startswith(f"pod/{pod.pod_id}/"):
                    pod.host_cvm.discard(region)
        if pod.pod_id in self.control_plane["endpoints"]:
            self.control_plane["endpoints"].remove(pod.pod_id)
        self._refresh_routes()

