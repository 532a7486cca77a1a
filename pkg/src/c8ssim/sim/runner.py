"""Run a scenario end to end and judge it."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Optional

from .adversary import sweep
from .config import CONTROL_PLANE_KINDS, AdversaryKind, ScenarioConfig
from .eventlog import EventLog, Verdict
from .world import ClusterWorld

# the one capture the model concedes: hop keys taken by an insider inside the CDS
CONCEDED_SOURCE = "adversary/cds-compromise"


@dataclass
class RunResult:
    world: ClusterWorld
    log: EventLog

    @property
    def passed(self) -> bool:
        return self.log.all_hold


def run_scenario(cfg: ScenarioConfig, seed: Optional[int] = None) -> RunResult:
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    world = ClusterWorld(cfg)
    world.setup()
    world.run()
    for decide in world.deferred_verdicts:
        decide()
    _invariants(world)
    _expectations(world)
    _counters(world)
    _confidentiality_sweep(world)
    return RunResult(world, world.log)


def _invariants(world: ClusterWorld) -> None:
    log = world.log
    routes = [e for e in log.events if e["kind"] == "route"]
    if world.routers:
        log.check("hops-at-most-one", all(e["detail"]["hops"] <= 1 for e in routes),
                  routes=len(routes), max_hops=max((e["detail"]["hops"] for e in routes), default=0))
        ops = sum(r.crypto_ops for r in world.routers)
        log.check("router-no-crypto", ops == 0, crypto_ops=ops)
    control = [v for v in log.verdicts if AdversaryKind(v.kind) in CONTROL_PLANE_KINDS]
    if control:
        log.check("control-plane-never-succeeds", all(v.verdict != Verdict.SUCCEEDED for v in control),
                  actions=[v.action for v in control])


def _expectations(world: ClusterWorld) -> None:
    log, cfg = world.log, world.cfg
    expect = cfg.expect
    results = world.request_results
    if expect.get("all_requests_ok"):
        log.check("all-requests-ok", len(results) == cfg.traffic.requests and all(r["ok"] for r in results),
                  requests=len(results), ok=sum(1 for r in results if r["ok"]))
    if "min_requests_ok" in expect:
        n = sum(1 for r in results if r["ok"])
        log.check("min-requests-ok", n >= int(expect["min_requests_ok"]), ok=n)
    if expect.get("no_stale_rejections"):
        stale = [r for r in world.client.rejections if r.value == "Stale"]
        stale += [r for r in results if r.get("reason") == "Stale"]
        log.check("no-stale-rejections", not stale, stale=len(stale))
    if expect.get("attestation_budget") and world.ingress is not None:
        period = int(cfg.params.window * 0.8)
        budget = math.ceil(cfg.params.duration / period) + 1
        log.check("ingress-attestation-budget", world.ingress.attestations <= budget,
                  attestations=world.ingress.attestations, budget=budget)
    if expect.get("latency_linear"):
        lat = [r["latency"] for r in sorted(results, key=lambda r: r["request"])]
        log.check("strawman-latency-linear", lat == list(range(len(lat))), latencies=lat)
    if expect.get("cds_downtime"):
        _check_downtime(world)
    if expect.get("all_pods_certified"):
        missing = [p.name for p in cfg.pods if p.name not in world.pods]
        log.check("all-pods-certified", not missing, missing=missing)
    if "secrets_released" in expect:
        n = log.counters["secrets_released"]
        log.check("secrets-released", n == int(expect["secrets_released"]), released=n)


def _check_downtime(world: ClusterWorld) -> None:
    log = world.log
    stop = world.stopped_cds_at
    if stop is None:
        log.check("cds-downtime", False, reason="CDS never stopped")
        return
    issued = sum(r.certificates_issued for r in world.cluster.replicas)
    log.check("no-certificates-while-down", issued == world.certs_at_stop,
              issued_before=world.certs_at_stop, issued_total=issued)
    after = [m for m in world.mesh_results if m["tick"] > stop]
    valid = [m for m in after if m["src_cert_valid"] and m["dst_cert_valid"]]
    expired = [m for m in after if not (m["src_cert_valid"] and m["dst_cert_valid"])]
    log.check("mesh-works-until-expiry", bool(valid) and all(m["ok"] for m in valid), calls=len(valid))
    log.check("mesh-fails-after-expiry", bool(expired) and not any(m["ok"] for m in expired),
              calls=len(expired), errors=sorted({m.get("error", "") for m in expired}))


def _counters(world: ClusterWorld) -> None:
    c, log = world.log.counters, world.log
    results = world.request_results
    c["requests"] = len(results)
    c["requests_ok"] = sum(1 for r in results if r["ok"])
    c["mesh_calls"] = len(world.mesh_results)
    c["mesh_calls_ok"] = sum(1 for m in world.mesh_results if m["ok"])
    c["handshakes"] = len(world.mesh.handshakes)
    c["cds_round_trips"] = world.client.cds_round_trips if world.client else 0
    c["certificates_issued"] = sum(r.certificates_issued for r in world.cluster.replicas)
    if world.ingress is not None:
        c["ingress_attestations"] = world.ingress.attestations
    rejects = sum(log.count(k) for k in ("gate-reject", "nri-reject", "attestation-rejected"))
    c["rejects"] = rejects + (len(world.client.rejections) if world.client else 0)


def sources(world: ClusterWorld) -> dict[str, list[bytes]]:
    """Every byte string a party outside the TCB holds at the end of the run."""
    out: dict[str, list[bytes]] = {"network": [c.data for c in world.network.captures]}
    for name, items in sorted(world.adversary_logs.items()):
        out[f"adversary/{name}"] = list(items)
    out["registry"] = list(world.registry.contents().values())
    out["control-plane"] = [world.control_plane_bytes()]
    for r in world.cluster.replicas:
        out[f"cds-transcript/{r.cvm.id}"] = [bytes(t) for t in r.transcript]
        out[f"cvm-host-view/{r.cvm.id}"] = [r.cvm.host_read()]
    out["event-log"] = [world.log.to_jsonl().encode()]
    return out


def _confidentiality_sweep(world: ClusterWorld) -> dict[str, Any]:
    matches, conceded = [], []
    srcs = sources(world)
    for name, blobs in srcs.items():
        for label in sweep(world, blobs):
            entry = {"source": name, "label": label}
            if name == CONCEDED_SOURCE and label in world.conceded:
                conceded.append(entry)
            else:
                matches.append(entry)
    world.log.sweep = {
        "plaintexts": len(world.plaintexts),
        "sources": len(srcs),
        "leaks": matches,
        "conceded": conceded,
        "clean": not matches,
    }
    world.log.check("confidentiality-sweep", not matches, leaks=len(matches), conceded=len(conceded))
    return world.log.sweep
