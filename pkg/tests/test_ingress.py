import random

import pytest

from c8ssim import crypto
from c8ssim.cds import CdsConfig, CdsUnavailable, Role
from c8ssim.client import IngressReason, TrustStore, verify_ingress
from c8ssim.envelope import NotARecipient, decrypt, deserialize, encrypt_multi
from c8ssim.ingress import (
    EncryptedRouter,
    NoHealthyPeer,
    NoRouteForAnyHint,
    RouteDecision,
    decode_response,
    encrypted_route,
    respond_encrypted,
)
from c8ssim.mesh import ArrangementMode, Mesh, ProxyArrangement
from c8ssim.network import Network

import helpers
from helpers import INGRESS, identity


@pytest.fixture
def dep():
    return helpers.ingress_deployment()


def store_for(tb, now=0):
    return TrustStore(tb.cds.public_key, tb.cds.manifest(now), frozenset(tb.roots), now)


# -- attestation refresh

def test_refresh_binds_beacon_and_tls_key(dep):
    ing = dep.extra["ingress"]
    p = ing.presentation()
    assert p.report.report_data == p.beacon.signature
    assert p.report.binds(ing.tls_pubkey)
    assert verify_ingress(p, store_for(dep), 100, 300) == (True, IngressReason.OK)


def test_refresh_schedule(dep):
    ing = dep.extra["ingress"]
    assert not ing.needs_refresh(239) and ing.needs_refresh(240)
    ing.refresh_attestation(dep.cds, 240)
    assert ing.beacon.timestamp == 240 and ing.attestations == 2


def test_cds_down_past_window():
    tb = helpers.ingress_deployment(seed=2)
    ing = tb.extra["ingress"]
    store = store_for(tb)
    tb.cds.stop()
    with pytest.raises(CdsUnavailable):
        ing.refresh_attestation(tb.cds, 250)
    assert verify_ingress(ing.presentation(), store, 300, 300)[0]
    assert verify_ingress(ing.presentation(), store, 301, 300) == (False, IngressReason.STALE)


# -- pass-through

def test_round_robin(dep):
    ing = dep.extra["ingress"]
    served = [decode_response(ing.passthrough_handle(b"r%d" % i, 1))[0] for i in range(6)]
    assert sorted(served) == sorted(dep.extra["pods"] * 2)
    assert served[:3] == dep.extra["pods"]


def test_injected_endpoint_excluded(dep):
    ing, mesh = dep.extra["ingress"], dep.extra["mesh"]
    mesh.attach("default/rogue", ProxyArrangement(ArrangementMode.SIDECAR, "node-x"), helpers.echo_pod("x"))
    pool = ing.update_pool(dep.extra["pods"] + ["default/rogue"], 1)
    assert "default/rogue" not in pool and ing.excluded["default/rogue"] == "NoIdentity"
    assert all(decode_response(ing.passthrough_handle(b"q", 2))[0] != "default/rogue" for _ in range(6))


def test_pool_membership_independent_of_balancer(dep):
    class Last:
        def pick(self, pool):
            return pool[-1]

    ing = dep.extra["ingress"]
    eps = dep.extra["pods"] + ["default/ghost"]
    a = ing.update_pool(eps, 1)
    ing.balancer = Last()
    assert ing.update_pool(eps, 1) == a


def test_expired_pod_dropped():
    tb = helpers.ingress_deployment(seed=3, config=CdsConfig(cert_lifetime=1000))
    ing, mesh = tb.extra["ingress"], tb.extra["mesh"]
    late, _ = identity(tb, "late", now=500)
    arr = ProxyArrangement(ArrangementMode.SIDECAR, "node-late")
    arr.install(late.pod_id, late)
    mesh.attach(late.pod_id, arr, helpers.echo_pod(late.pod_id))
    # the ingress' own cert expires at 1000 too; refresh it
    ing_new, _ = identity(tb, "ingress", INGRESS, Role.INGRESS, now=900, ns="kube-system")
    ing.mesh_identity = ing_new
    side = ProxyArrangement(ArrangementMode.SIDECAR, "edge")
    side.install(ing_new.pod_id, ing_new)
    mesh.attach(ing_new.pod_id, side)
    pool = ing.update_pool(tb.extra["pods"] + [late.pod_id], 1001)
    assert pool == [late.pod_id]
    assert {ing.excluded[p] for p in tb.extra["pods"]} == {"Expired"}


def test_no_healthy_peer(dep):
    ing = dep.extra["ingress"]
    ing.update_pool([], 1)
    with pytest.raises(NoHealthyPeer):
        ing.passthrough_handle(b"x", 1)


def test_passthrough_plaintext_only_inside(dep):
    ing, net = dep.extra["ingress"], dep.extra["net"]
    ing.passthrough_handle(b"customer-record-42", 3)
    assert not net.contains(b"customer-record-42")


# -- encrypted routing

def envelope(hints, seed=0):
    rng = random.Random(seed)
    keys = [crypto.kem_keypair(rng) for _ in hints]
    return encrypt_multi(b"body", [(k.public, h) for k, h in zip(keys, hints)], b"s" * 32, rng), keys


def test_route_local_and_peer():
    env, _ = envelope(["podX"])
    assert encrypted_route(env.to_bytes(), {"podX": "ns/x"}, {}) == RouteDecision("ns/x")
    env, _ = envelope(["podY"])
    d = encrypted_route(env.to_bytes(), {"podX": "ns/x"}, {"podY": "node-2"})
    assert d.peer == "node-2" and d.hops == 1


def test_route_first_match_and_none():
    env, _ = envelope(["unknown", "podY", "podX"])
    assert encrypted_route(env.to_bytes(), {"podX": "ns/x"}, {"podY": "node-2"}).peer is None
    env, _ = envelope(["a", "b"])
    with pytest.raises(NoRouteForAnyHint):
        encrypted_route(env.to_bytes(), {}, {})


def router_mesh():
    """Two nodes, a router on each, one recipient pod on node 2."""
    tb = helpers.testbed(seed=8)
    mesh = Mesh(tb.cds.public_key, Network(), tb.rng)
    r1i, _ = identity(tb, "router-1", INGRESS, Role.INGRESS, ns="kube-system")
    r2i, _ = identity(tb, "router-2", INGRESS, Role.INGRESS, ns="kube-system")
    pod, _ = identity(tb, "pod-y")
    pod_key = crypto.kem_keypair(tb.rng)

    def pod_handler(src, env_bytes):
        env = deserialize(env_bytes)
        return respond_encrypted(b"answer:" + decrypt(env, pod_key.private), env.sender_pubkey,
                                 pod_key.public, tb.rng).to_bytes()

    r1, r2 = EncryptedRouter("node-1", r1i.pod_id, mesh), EncryptedRouter("node-2", r2i.pod_id, mesh)
    for ident, owner, handler in ((r1i, "node-1", r1.handle_peer), (r2i, "node-2", r2.handle_peer),
                                  (pod, "node-2", pod_handler)):
        arr = ProxyArrangement(ArrangementMode.SIDECAR, owner)
        arr.install(ident.pod_id, ident)
        mesh.attach(ident.pod_id, arr, handler)
    r1.peers = {"pod-y": "node-2"}
    r1.peer_routers = {"node-2": r2i.pod_id}
    r2.local_pods = {"pod-y": pod.pod_id}
    return tb, mesh, r1, r2, pod_key


def test_one_hop_delivery_and_zero_crypto():
    tb, mesh, r1, r2, pod_key = router_mesh()
    client = crypto.kem_keypair(tb.rng)
    env = encrypt_multi(b"hello pod", [(pod_key.public, "pod-y")], client.public, tb.rng)
    r1.compromised = r2.compromised = True
    reply = r1.handle(env.to_bytes(), 5)
    assert decrypt(deserialize(reply), client.private) == b"answer:hello pod"
    assert r2.deliveries == [("default/pod-y", 1)]
    assert r1.crypto_ops == r2.crypto_ops == 0
    logs = b"".join(r1.adversary_log + r2.adversary_log)
    assert b"pod-y" in logs
    assert b"hello pod" not in logs and b"answer:hello pod" not in logs
    assert not mesh.network.contains(b"hello pod")
    other = crypto.kem_keypair(tb.rng)
    with pytest.raises(NotARecipient):
        decrypt(deserialize(reply), other.private)


def test_forwarded_envelope_not_reforwarded():
    tb, mesh, r1, r2, pod_key = router_mesh()
    env, _ = envelope(["nowhere"])
    with pytest.raises(NoRouteForAnyHint):
        r2.handle_peer("x", b"\x01" + env.to_bytes())


def test_response_to_another_client():
    rng = random.Random(3)
    alice, bob, pod = (crypto.kem_keypair(rng) for _ in range(3))
    env = respond_encrypted(b"for bob", bob.public, pod.public, rng)
    assert decrypt(env, bob.private) == b"for bob"
    with pytest.raises(NotARecipient):
        decrypt(env, alice.private)
