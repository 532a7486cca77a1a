import copy
from collections import Counter

import pytest
import yaml

from c8ssim.sim import config as simconfig
from c8ssim.sim.adversary import EXPECTED
from c8ssim.sim.config import CONTROL_PLANE_KINDS, AdversaryKind, ConfigInvalid
from c8ssim.sim.eventlog import PHASES, EventLog, LogMalformed, Verdict, parse_jsonl
from c8ssim.sim.report import RunReport, phase_rows
from c8ssim.sim.runner import run_scenario, sources
from c8ssim.sim.world import RateLimiter, attestation_rate_limit

BUNDLED = simconfig.bundled()


def raw(name):
    return yaml.safe_load(BUNDLED[name].read_text())


@pytest.fixture(scope="module")
def runs():
    return {name: run_scenario(simconfig.load(path)) for name, path in BUNDLED.items()}


# -- config

def test_all_bundled_validate():
    assert len(BUNDLED) >= 10
    for path in BUNDLED.values():
        simconfig.load(path)


@pytest.mark.parametrize("mutate, needle", [
    (lambda r: r["pods"][0].update(node="node-z"), "node-z"),
    (lambda r: r["pods"][0].update(image="ghost"), "ghost"),
    (lambda r: r.pop("nodes"), "nodes"),
    (lambda r: r.update(boundary="cloud"), "cloud"),
    (lambda r: r.update(colour="blue"), "colour"),
    (lambda r: r["secrets"][0].update(mode="shouted"), "wrapped or direct"),
    (lambda r: r["expect"].update(vibes=True), "vibes"),
    (lambda r: r.setdefault("adversary", []).append({"tick": 1, "kind": "bribe_admin"}), "bribe_admin"),
    (lambda r: r["params"].update(attestation_rate=0) if "params" in r else r.update(params={"attestation_rate": 0}),
     "attestation_rate"),
])
def test_invalid_configs(mutate, needle):
    r = copy.deepcopy(raw("lifecycle-default"))
    mutate(r)
    with pytest.raises(ConfigInvalid) as err:
        simconfig.parse(r)
    assert any(needle in d for d in err.value.details), err.value.details


def test_all_errors_reported_together():
    r = copy.deepcopy(raw("lifecycle-default"))
    r["pods"][0]["node"] = "nope-1"
    r["pods"][1]["image"] = "nope-2"
    with pytest.raises(ConfigInvalid) as err:
        simconfig.parse(r)
    assert len(err.value.details) == 2


def test_missing_file_and_bad_yaml(tmp_path):
    with pytest.raises(ConfigInvalid):
        simconfig.load(tmp_path / "absent.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: [unclosed")
    with pytest.raises(ConfigInvalid):
        simconfig.load(bad)


# -- rate limiter

def test_rate_limiter():
    lim = RateLimiter(1)
    assert attestation_rate_limit(lim, "cvm", 5).granted
    p = attestation_rate_limit(lim, "cvm", 5)
    assert not p.granted and p.retry_at == 6
    assert attestation_rate_limit(lim, "other", 5).granted
    assert [lim.reserve("q", 0) for _ in range(4)] == [0, 1, 2, 3]
    lim2 = RateLimiter(3)
    assert [lim2.reserve("q", 0) for _ in range(4)] == [0, 0, 0, 1]


def test_1000_requests_one_window():
    r = copy.deepcopy(raw("lifecycle-default"))
    r["traffic"] = {"requests": 1000, "start": 10, "interval": 0}
    r["params"] = {"duration": 300}
    r["secrets"] = []
    r["expect"] = {"all_requests_ok": True, "attestation_budget": True}
    result = run_scenario(simconfig.parse(r))
    assert result.passed
    assert result.world.ingress.attestations <= 2
    assert result.log.counters["requests_ok"] == 1000


# -- scenarios

def test_all_bundled_pass(runs):
    failed = {}
    for name, r in runs.items():
        bad = [a["name"] for a in r.log.assertions if not a["ok"]]
        bad += [v.action for v in r.log.verdicts if not v.holds]
        if bad:
            failed[name] = bad
    assert not failed


def test_determinism_same_seed(runs):
    for name, path in BUNDLED.items():
        assert run_scenario(simconfig.load(path)).log.to_jsonl() == runs[name].log.to_jsonl(), name


def test_seed_changes_log():
    cfg = simconfig.load(BUNDLED["lifecycle-default"])
    assert run_scenario(cfg, 1).log.to_jsonl() != run_scenario(cfg, 2).log.to_jsonl()
    assert run_scenario(cfg, 2).passed


def test_lifecycle_phases_in_order(runs):
    log = runs["lifecycle-default"].log
    seen = [row["phase"] for row in phase_rows([e for e in log.events])]
    assert [p for p in seen if p in PHASES] == list(PHASES)
    first = {}
    for e in log.events:
        first.setdefault(e["phase"], e["seq"])
    assert [first[p] for p in PHASES[:2]] == sorted(first[p] for p in PHASES[:2])


def test_preconditions_order(runs):
    kinds = [e["kind"] for e in runs["lifecycle-default"].log.events if e["phase"] == "preconditions"]
    def at(k):
        return next(i for i, x in enumerate(kinds) if x == k)
    assert at("cds-bootstrap") < at("gating-in-place") < at("pod-certified") < at("secret-released") < at("attestation-refreshed") < at("ingress-ready")


def test_mixed_boundary_both_certified(runs):
    w = runs["mixed"].world
    boundaries = {w.cfg.node_boundary(p.node) for p in w.cfg.pods}
    assert len(boundaries) == 2
    assert set(w.pods) == {p.name for p in w.cfg.pods}


def test_adversary_matrix(runs):
    verdicts = runs["adversary-matrix"].log.verdicts
    kinds = {v.kind for v in verdicts}
    assert kinds == {k.value for k in CONTROL_PLANE_KINDS}
    assert all(v.verdict in (Verdict.MITIGATED, Verdict.DOS) for v in verdicts)
    for v in verdicts:
        assert v.verdict == EXPECTED[AdversaryKind(v.kind)]


def test_blast_radius_every_scenario(runs):
    for r in runs.values():
        for v in r.log.verdicts:
            if AdversaryKind(v.kind) in CONTROL_PLANE_KINDS:
                assert v.verdict is not Verdict.SUCCEEDED


def test_per_request_strawman_latency(runs):
    lat = [r["latency"] for r in sorted(runs["per-request-attestation"].world.request_results,
                                        key=lambda r: r["request"])]
    assert lat == list(range(len(lat))) and len(lat) == 20


def test_freshness_steady_state(runs):
    w = runs["freshness-steady-state"].world
    assert not [r for r in w.client.rejections if r.value == "Stale"]
    assert all(r["ok"] for r in w.request_results)


def test_cds_downtime_blast_radius(runs):
    w = runs["cds-downtime"].world
    names = {a["name"]: a["ok"] for a in w.log.assertions}
    assert names["no-certificates-while-down"] and names["mesh-works-until-expiry"]
    assert names["mesh-fails-after-expiry"]


def test_direct_hop_concession(runs):
    sweep = runs["direct-brokering-hop"].log.sweep
    assert sweep["clean"] and len(sweep["conceded"]) == 1
    assert sweep["conceded"][0]["source"] == "adversary/cds-compromise"


def test_sweep_sources_cover_everything(runs):
    names = set(sources(runs["adversary-matrix"].world))
    assert {"network", "registry", "control-plane", "event-log"} <= names
    assert any(n.startswith("cds-transcript/") for n in names)
    assert any(n.startswith("cvm-host-view/") for n in names)
    assert any(n.startswith("adversary/") for n in names)


def test_sweep_detects_planted_leak():
    """The sweep is only as good as its search: a planted plaintext must be found."""
    cfg = simconfig.load(BUNDLED["lifecycle-default"])
    from c8ssim.sim.world import ClusterWorld
    from c8ssim.sim import runner

    world = ClusterWorld(cfg)
    world.setup()
    world.run()
    label, value = sorted(world.plaintexts.items())[0]
    world.control_plane["leaked"] = value.hex()
    world.network.transmit("x", "y", value, "oops")
    sweep = runner._confidentiality_sweep(world)
    assert not sweep["clean"]
    assert {"source": "network", "label": label} in sweep["leaks"]


def test_hop_bound(runs):
    for name in ("encrypted-ingress", "compromised-router"):
        w = runs[name].world
        routes = [e for e in w.log.events if e["kind"] == "route"]
        assert routes and max(e["detail"]["hops"] for e in routes) <= 1
        assert sum(r.crypto_ops for r in w.routers) == 0
    hops = Counter(e["detail"]["hops"] for e in runs["encrypted-ingress"].log.events if e["kind"] == "route")
    assert hops[0] and hops[1]


# -- event log

def test_log_roundtrip_and_report(runs):
    text = runs["adversary-matrix"].log.to_jsonl()
    records = parse_jsonl(text)
    report = RunReport.from_records(records)
    assert report.passed and report.scenario == "adversary-matrix"
    assert set(report.counters) == {"attestations", "certificates_issued", "renewals", "rejects"}
    assert "PASS" in report.render()


def test_parse_errors():
    with pytest.raises(LogMalformed) as err:
        parse_jsonl('{"type": "header"}\nnot json\n')
    assert err.value.line == 2
    with pytest.raises(LogMalformed):
        parse_jsonl('[1, 2]\n')
    assert parse_jsonl("") == []


def test_emit_digests_payload_only():
    log = EventLog("x", 1)
    e = log.emit(3, "runtime", "a", "k", b"super secret", n=1, raw=b"\x01")
    assert e["digest"] and b"super secret".hex() not in log.to_jsonl()
    assert e["detail"] == {"n": 1, "raw": "01"}
