from dataclasses import replace

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from c8ssim import crypto
from c8ssim.cds import MANIFEST_DOMAIN, CdsCluster, FreshnessBeacon, PolicyManifest, Role
from c8ssim.client import (
    CHECKS,
    AttestedClient,
    BadManifestSignature,
    CdsAttestationFailed,
    ClientConfig,
    EmptyPool,
    IngressReason,
    IngressRejected,
    ManifestPath,
    MeasurementMismatch,
    PoolMismatch,
    TrustStore,
    UnknownSubsetMember,
    encrypt_for_pool,
    verify_ingress,
)
from c8ssim.envelope import NotARecipient, decrypt
from c8ssim.ingress import IngressPresentation, encode_response
from c8ssim.service import CdsService
from c8ssim.tee import Manufacturer, launch_cvm, launch_measurement

import helpers
from helpers import CDS_COMPONENTS, INGRESS, identity

WINDOW = 300


def client_for(tb, transport=None, refresh=600, expected=None):
    cfg = ClientConfig("cds", expected or launch_measurement(CDS_COMPONENTS), tuple(tb.roots), WINDOW, refresh)
    transport = transport or CdsService(CdsCluster(tb.cds)).transport()
    return AttestedClient(cfg, transport, tb.rng)


@pytest.fixture
def dep():
    return helpers.ingress_deployment(seed=21)


# -- bootstrap

def test_bootstrap_attests_before_trusting(dep):
    c = client_for(dep)
    store = c.bootstrap(0)
    assert store.cds_pubkey == dep.cds.public_key
    assert c.call_order == ["get-cds-report", "get-manifest"]
    assert {m.pod_id for m in store.manifest.pool} >= set(dep.extra["pods"])


def test_bootstrap_cached(dep):
    c = client_for(dep, refresh=600)
    c.bootstrap(0)
    c.bootstrap(599)
    assert c.cds_round_trips == 2 and c.cache_hits == 1
    c.bootstrap(600)
    assert c.cds_round_trips == 4


def test_unexpected_cds_measurement(dep):
    c = client_for(dep, expected=launch_measurement([("fw", b"fw-1"), ("cds", b"cds-server-9")]))
    with pytest.raises(MeasurementMismatch):
        c.bootstrap(0)
    assert c.call_order == ["get-cds-report"]


def test_manifest_resigned(dep):
    rogue = crypto.signing_keypair(dep.rng)
    inner = CdsService(CdsCluster(dep.cds)).transport()

    def tamper(endpoint, body):
        raw = inner(endpoint, body)
        if endpoint != "get-manifest":
            return raw
        m = PolicyManifest.from_bytes(raw[1:])
        m = replace(m, cds_pubkey=rogue.public)
        m = replace(m, cds_signature=crypto.sign(rogue.private, MANIFEST_DOMAIN, m.signed_bytes()))
        return raw[:1] + m.to_bytes()

    with pytest.raises(BadManifestSignature):
        client_for(dep, tamper).bootstrap(0)


def test_cds_report_wrong_manufacturer(dep):
    other = helpers.testbed(seed=77)
    cfg = ClientConfig("cds", launch_measurement(CDS_COMPONENTS), tuple(other.roots))
    with pytest.raises(CdsAttestationFailed):
        AttestedClient(cfg, CdsService(CdsCluster(dep.cds)).transport(), dep.rng).bootstrap(0)


def test_manifest_paths_agree(dep):
    c = client_for(dep, refresh=10)
    a = c.bootstrap(0, ManifestPath.ATTESTATION)
    b = c.bootstrap(20, ManifestPath.CHAIN)
    assert a.cds_pubkey == b.cds_pubkey and a.manifest == b.manifest
    assert c.call_order == ["get-cds-report", "get-manifest", "get-manifest"]


def test_config_file(tmp_path, dep):
    cfg = ClientConfig("cds.internal:443", launch_measurement(CDS_COMPONENTS), tuple(dep.roots), 120, 900)
    path = tmp_path / "client.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict()))
    assert ClientConfig.load(path) == cfg
    single = {"cds_endpoint": "x", "expected_cds_measurement": "00" * 32, "manufacturer_root": "11" * 32}
    assert ClientConfig.from_dict(single).manufacturer_roots == (b"\x11" * 32,)


# -- verify_ingress

def _forgeries(tb, now=1000):
    """One crafted presentation per check, passing every other check."""
    early, _ = identity(tb, "ing1", INGRESS, Role.INGRESS, now=0)
    ing_ident, _ = identity(tb, "ing2", INGRESS, Role.INGRESS, now=now)
    good_cvm = tb.cvm(INGRESS)
    tls = crypto.kem_keypair(tb.rng)
    beacon = tb.cds.issue_beacon(now, ing_ident.cert)

    def pres(cvm=good_cvm, b=beacon, tls_pub=tls.public, rd=None):
        return IngressPresentation(tls_pub, cvm.generate_report(b.signature if rd is None else rd, tls_pub), b)

    rogue = crypto.signing_keypair(tb.rng)
    forged_b = FreshnessBeacon(now, crypto.sign(rogue.private, "beacon", FreshnessBeacon.message(now)))
    other_platform = Manufacturer.create(tb.rng).endorse_platform(tb.rng)
    old = tb.cds.issue_beacon(now - WINDOW - 1, early.cert)
    return {
        "report": pres(cvm=launch_cvm(INGRESS, 3, other_platform, tb.rng)),
        "beacon": pres(b=forged_b),
        "window": pres(b=old),
        "report_data": pres(rd=b"\x00" * 64),
        "key_binding": IngressPresentation(crypto.kem_keypair(tb.rng).public, pres().report, beacon),
        "allowlist": pres(cvm=tb.cvm([("fw", b"fw-1"), ("ingress", b"ingress-evil")])),
    }, pres()


REASON = {
    "report": IngressReason.BAD_REPORT,
    "beacon": IngressReason.BAD_BEACON,
    "window": IngressReason.STALE,
    "report_data": IngressReason.REPORT_DATA_MISMATCH,
    "key_binding": IngressReason.KEY_BINDING_MISMATCH,
    "allowlist": IngressReason.UNKNOWN_MEASUREMENT,
}


def test_each_check_is_necessary():
    tb = helpers.testbed(seed=31)
    tb.certify(tb.cvm())
    store = TrustStore(tb.cds.public_key, tb.cds.manifest(0), frozenset(tb.roots), 0)
    forgeries, genuine = _forgeries(tb)
    assert verify_ingress(genuine, store, 1000, WINDOW) == (True, IngressReason.OK)
    for check, p in forgeries.items():
        assert verify_ingress(p, store, 1000, WINDOW) == (False, REASON[check]), check
        dropped = [c for c in CHECKS if c != check]
        assert verify_ingress(p, store, 1000, WINDOW, dropped)[0], check


def test_window_boundary(dep):
    ing = dep.extra["ingress"]
    store = TrustStore(dep.cds.public_key, dep.cds.manifest(0), frozenset(dep.roots), 0)
    p = ing.presentation()
    assert verify_ingress(p, store, WINDOW, WINDOW)[0]
    assert verify_ingress(p, store, WINDOW + 1, WINDOW) == (False, IngressReason.STALE)
    assert verify_ingress(p, store, -1, WINDOW) == (False, IngressReason.STALE)


@settings(max_examples=30, deadline=None)
@given(st.binary(min_size=0, max_size=96))
def test_never_raises_on_garbage_report_data(junk):
    tb = helpers.testbed(seed=32)
    cvm = tb.cvm(INGRESS)
    tls = crypto.kem_keypair(tb.rng)
    b = FreshnessBeacon(0, bytes(64))
    p = IngressPresentation(tls.public, cvm.generate_report(junk, tls.public), b)
    store = TrustStore(tb.cds.public_key, tb.cds.manifest(0), frozenset(tb.roots), 0)
    ok, reason = verify_ingress(p, store, 0, WINDOW)
    assert not ok and reason is IngressReason.BAD_BEACON


def test_forged_tls_key_rejected_by_client(dep):
    c = client_for(dep)
    c.bootstrap(0)
    ing = dep.extra["ingress"]
    ing.tls_pubkey = crypto.kem_keypair(dep.rng).public
    with pytest.raises(IngressRejected) as err:
        c.connect(ing, 10)
    assert err.value.reason is IngressReason.KEY_BINDING_MISMATCH


# -- submit

def test_echo_end_to_end(dep):
    c = client_for(dep)
    c.bootstrap(0)
    c.connect(dep.extra["ingress"], 1)
    r = c.submit(b"hello", 2)
    assert r.body == b"echo:hello" and r.pod_id in dep.extra["pods"]


def test_pool_mismatch(dep):
    c = client_for(dep)
    c.bootstrap(0)
    mesh = dep.extra["mesh"]
    pod = dep.extra["pods"][0]
    arrangement = mesh._endpoints[pod][0]
    mesh.attach(pod, arrangement, lambda s, d: encode_response("default/not-in-pool", b"", d))
    ing = dep.extra["ingress"]
    ing.update_pool([pod], 1)
    c.connect(ing, 1)
    with pytest.raises(PoolMismatch):
        c.submit(b"x", 2)


def test_stale_session_reverifies_once(dep):
    c = client_for(dep, refresh=10**6)
    ing = dep.extra["ingress"]
    c.bootstrap(0)
    c.connect(ing, 1)
    ing.refresh_attestation(dep.cds, 290)
    r = c.submit(b"late", WINDOW + 1)
    assert r.body == b"echo:late" and c.session.verified_at == WINDOW + 1
    # no refresh this time: re-verification itself fails as Stale
    with pytest.raises(IngressRejected) as err:
        c.submit(b"later", 290 + WINDOW + 1)
    assert err.value.reason is IngressReason.STALE


# -- multi-recipient

def test_encrypt_for_pool_subset(dep):
    c = client_for(dep)
    store = c.bootstrap(0)
    members = [m.pod_id for m in store.manifest.pool]
    full = c.encrypt_for_pool(b"m")
    sub = c.encrypt_for_pool(b"m", members[:1])
    dropped = [m for m in store.manifest.pool if m.pod_id not in members[:1]]
    assert full.header_size - sub.header_size == sum(64 + 2 + len(m.hint.encode()) for m in dropped)
    with pytest.raises(UnknownSubsetMember):
        c.encrypt_for_pool(b"m", ["default/nope"])
    with pytest.raises(EmptyPool):
        c.encrypt_for_pool(b"m", [])


def test_selected_decrypts_unselected_cannot():
    tb = helpers.testbed(seed=40)
    pods = [tb.certify(tb.cvm(), ("default", f"p{i}"), hint=f"p{i}") for i in range(5)]
    store = TrustStore(tb.cds.public_key, tb.cds.manifest(0), frozenset(tb.roots), 0)
    sender = crypto.kem_keypair(tb.rng)
    env = encrypt_for_pool(store, b"sel", sender.public, ["default/p1", "default/p3"], tb.rng)
    assert decrypt(env, pods[1][1].private) == decrypt(env, pods[3][1].private) == b"sel"
    with pytest.raises(NotARecipient):
        decrypt(env, pods[0][1].private)
    assert env.header_size == encrypt_for_pool(store, b"sel", sender.public, None, tb.rng).header_size \
        - 3 * (64 + 2 + 2)


def test_pool_churn_no_client_key_change():
    tb = helpers.testbed(seed=41)
    tb.certify(tb.cvm(), ("default", "old"), hint="old")
    c = client_for(tb, refresh=5)
    c.bootstrap(0)
    key_before = c.envelope_key.public
    _, fresh = tb.certify(tb.cvm(), ("default", "new"), hint="new")
    c.bootstrap(10)
    env = c.encrypt_for_pool(b"after churn", ["default/new"])
    assert decrypt(env, fresh.private) == b"after churn"
    assert c.envelope_key.public == key_before


def test_empty_pool():
    tb = helpers.testbed(seed=42)
    store = TrustStore(tb.cds.public_key, tb.cds.manifest(0), frozenset(tb.roots), 0)
    with pytest.raises(EmptyPool):
        encrypt_for_pool(store, b"x", b"k" * 32)
