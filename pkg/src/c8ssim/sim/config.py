"""Scenario configuration: YAML in, validated dataclasses out."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml


class ConfigInvalid(ValueError):
    def __init__(self, details: list[str] | str):
        self.details = [details] if isinstance(details, str) else list(details)
        super().__init__("; ".join(self.details))


class Boundary(str, enum.Enum):
    POD_LEVEL = "pod_level"
    NODE_LEVEL = "node_level"
    MIXED = "mixed"


class AdversaryKind(str, enum.Enum):
    SCHEDULE_UNAUTHORIZED_POD = "schedule_unauthorized_pod"
    READ_NETWORK = "read_network"
    MITM_INTERNAL = "mitm_internal"
    MITM_EXTERNAL = "mitm_external"
    FORGE_CERTIFICATE = "forge_certificate"
    INJECT_NODE = "inject_node"
    SNAPSHOT_CVM_MEMORY = "snapshot_cvm_memory"
    TAMPER_CVM_MEMORY = "tamper_cvm_memory"
    SUBSTITUTE_CODE = "substitute_code"
    READ_ENV_AND_SECRETS = "read_env_and_secrets"
    KILL_PODS = "kill_pods"
    STOP_CDS = "stop_cds"
    COMPROMISE_CDS_AT = "compromise_cds_at"
    COMPROMISE_ROUTER = "compromise_router"


# scenario-level outcome checks the runner knows how to evaluate
EXPECT_KEYS = frozenset({
    "all_requests_ok", "min_requests_ok", "no_stale_rejections", "attestation_budget",
    "latency_linear", "cds_downtime", "all_pods_certified", "secrets_released",
})

# actions an untrusted control plane, host or network can take on its own
CONTROL_PLANE_KINDS = frozenset(AdversaryKind) - {
    AdversaryKind.COMPROMISE_CDS_AT,
    AdversaryKind.COMPROMISE_ROUTER,
}


class IngressMode(str, enum.Enum):
    PASSTHROUGH = "passthrough"
    ENCRYPTED = "encrypted"
    BOTH = "both"


class Gate(str, enum.Enum):
    PIN = "pin"
    CUSTOMER_KEY = "customer_key"
    ENCRYPTED_IMAGE = "encrypted_image"


@dataclass
class Params:
    cert_lifetime: int = 21600
    window: int = 300
    nonce_ttl: int = 60
    attestation_rate: int = 1
    duration: int = 900
    cds_replicas: int = 1
    pool_refresh: int = 30
    client_refresh: int = 600


@dataclass
class NodeSpec:
    name: str
    boundary: Optional[Boundary] = None


@dataclass
class ImageSpec:
    name: str
    workload: str = "echo"
    authorized: bool = True
    encrypted: bool = False


@dataclass
class PodSpec:
    name: str
    node: str
    image: str
    namespace: str = "default"
    gate: Gate = Gate.PIN


@dataclass
class IngressSpec:
    mode: IngressMode = IngressMode.PASSTHROUGH
    node: str = ""


@dataclass
class MeshCall:
    src: str
    dst: str


@dataclass
class TrafficSpec:
    requests: int = 6
    start: int = 10
    interval: int = 5
    burst: bool = False
    subset: Optional[list[str]] = None
    mesh_calls: list[MeshCall] = field(default_factory=list)
    mesh_interval: int = 30
    per_request_attestation: bool = False


@dataclass
class SecretSpec:
    id: str
    pod: str
    allowed: list[str]
    mode: str = "wrapped"
    at: int = 0


@dataclass
class AdversaryAction:
    tick: int
    kind: AdversaryKind
    params: dict[str, Any] = field(default_factory=dict)

    @property
    def label(self) -> str:
        return f"{self.kind.value}@{self.tick}"


@dataclass
class ScenarioConfig:
    name: str
    seed: int
    boundary: Boundary
    nodes: list[NodeSpec]
    images: list[ImageSpec]
    pods: list[PodSpec]
    ingress: IngressSpec = field(default_factory=IngressSpec)
    traffic: TrafficSpec = field(default_factory=TrafficSpec)
    secrets: list[SecretSpec] = field(default_factory=list)
    adversary: list[AdversaryAction] = field(default_factory=list)
    params: Params = field(default_factory=Params)
    description: str = ""
    expect: dict[str, Any] = field(default_factory=dict)

    def node_boundary(self, node: str) -> Boundary:
        spec = next(n for n in self.nodes if n.name == node)
        if self.boundary is Boundary.MIXED:
            return spec.boundary or Boundary.POD_LEVEL
        return self.boundary

    def pod(self, name: str) -> PodSpec:
        return next(p for p in self.pods if p.name == name)

    def image(self, name: str) -> ImageSpec:
        return next(i for i in self.images if i.name == name)


def _enum(cls, value, where: str, errors: list[str]):
    try:
        return cls(value)
    except ValueError:
        errors.append(f"{where}: unknown value {value!r}")
        return None


def _known(raw: dict, allowed: set[str], where: str, errors: list[str]) -> None:
    for key in raw:
        if key not in allowed:
            errors.append(f"{where}: unknown field {key!r}")


def _fields(cls) -> set[str]:
    return set(cls.__dataclass_fields__)


def parse(raw: Any) -> ScenarioConfig:
    """Build and validate a config; every problem found is reported at once."""
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigInvalid("scenario must be a mapping")
    _known(raw, _fields(ScenarioConfig), "scenario", errors)
    for key in ("name", "seed", "boundary", "nodes", "images", "pods"):
        if key not in raw:
            errors.append(f"missing required field {key!r}")
    if errors:
        raise ConfigInvalid(errors)

    boundary = _enum(Boundary, raw["boundary"], "boundary", errors)
    if not isinstance(raw["seed"], int):
        errors.append("seed must be an integer")

    def build(cls, item, where):
        if not isinstance(item, dict):
            errors.append(f"{where}: expected a mapping")
            return None
        _known(item, _fields(cls), where, errors)
        try:
            return cls(**{k: v for k, v in item.items() if k in _fields(cls)})
        except TypeError as exc:
            errors.append(f"{where}: {exc}")
            return None

    nodes = [build(NodeSpec, n, f"nodes[{i}]") for i, n in enumerate(raw["nodes"] or [])]
    images = [build(ImageSpec, n, f"images[{i}]") for i, n in enumerate(raw["images"] or [])]
    pods = [build(PodSpec, n, f"pods[{i}]") for i, n in enumerate(raw["pods"] or [])]
    secrets = [build(SecretSpec, n, f"secrets[{i}]") for i, n in enumerate(raw.get("secrets") or [])]
    params = build(Params, raw.get("params") or {}, "params") or Params()
    ingress = build(IngressSpec, raw.get("ingress") or {}, "ingress") or IngressSpec()
    traffic_raw = dict(raw.get("traffic") or {})
    calls_raw = traffic_raw.pop("mesh_calls", []) or []
    traffic = build(TrafficSpec, traffic_raw, "traffic") or TrafficSpec()
    traffic.mesh_calls = [c for c in (build(MeshCall, c, f"traffic.mesh_calls[{i}]") for i, c in enumerate(calls_raw)) if c]

    adversary = []
    for i, a in enumerate(raw.get("adversary") or []):
        where = f"adversary[{i}]"
        if not isinstance(a, dict) or "kind" not in a or "tick" not in a:
            errors.append(f"{where}: needs 'tick' and 'kind'")
            continue
        _known(a, {"tick", "kind", "params"}, where, errors)
        kind = _enum(AdversaryKind, a["kind"], f"{where}.kind", errors)
        if kind is not None:
            adversary.append(AdversaryAction(int(a["tick"]), kind, dict(a.get("params") or {})))

    if errors:
        raise ConfigInvalid(errors)
    for n in nodes:
        if n.boundary is not None:
            n.boundary = _enum(Boundary, n.boundary, f"node {n.name}.boundary", errors)
    for p in pods:
        p.gate = _enum(Gate, p.gate, f"pod {p.name}.gate", errors)
    ingress.mode = _enum(IngressMode, ingress.mode, "ingress.mode", errors)

    cfg = ScenarioConfig(
        name=str(raw["name"]),
        seed=raw["seed"],
        boundary=boundary,
        nodes=nodes,
        images=images,
        pods=pods,
        ingress=ingress,
        traffic=traffic,
        secrets=secrets,
        adversary=adversary,
        params=params,
        description=str(raw.get("description", "")),
        expect=dict(raw.get("expect") or {}),
    )
    errors += _references(cfg)
    if errors:
        raise ConfigInvalid(errors)
    return cfg


def _references(cfg: ScenarioConfig) -> list[str]:
    errors = []
    node_names = [n.name for n in cfg.nodes]
    image_names = [i.name for i in cfg.images]
    pod_names = [p.name for p in cfg.pods]
    for kind, names in (("node", node_names), ("image", image_names), ("pod", pod_names)):
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            errors.append(f"duplicate {kind} names: {', '.join(dupes)}")
    if not cfg.nodes:
        errors.append("at least one node is required")
    for p in cfg.pods:
        if p.node not in node_names:
            errors.append(f"pod {p.name}: unknown node {p.node!r}")
        if p.image not in image_names:
            errors.append(f"pod {p.name}: unknown image {p.image!r}")
    if cfg.ingress.node and cfg.ingress.node not in node_names:
        errors.append(f"ingress: unknown node {cfg.ingress.node!r}")
    for s in cfg.secrets:
        if s.pod not in pod_names:
            errors.append(f"secret {s.id}: unknown pod {s.pod!r}")
        for img in s.allowed:
            if img not in image_names:
                errors.append(f"secret {s.id}: unknown image {img!r}")
        if s.mode not in ("wrapped", "direct"):
            errors.append(f"secret {s.id}: mode must be wrapped or direct")
    for c in cfg.traffic.mesh_calls:
        for end in (c.src, c.dst):
            if end not in pod_names:
                errors.append(f"mesh call: unknown pod {end!r}")
    for name in cfg.traffic.subset or []:
        if name not in pod_names:
            errors.append(f"traffic.subset: unknown pod {name!r}")
    for key in sorted(cfg.expect):
        if key not in EXPECT_KEYS:
            errors.append(f"expect: unknown check {key!r}")
    if cfg.params.attestation_rate < 1:
        errors.append("params.attestation_rate must be >= 1")
    if cfg.params.window < 1 or cfg.params.cert_lifetime < 1:
        errors.append("params.window and params.cert_lifetime must be positive")
    return errors


def load(path: str | Path) -> ScenarioConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigInvalid(f"no such file: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"not valid YAML: {exc}") from None
    return parse(raw)


def bundled_dir() -> Path:
    return Path(__file__).parent / "scenarios"


def bundled() -> dict[str, Path]:
    return {p.stem: p for p in sorted(bundled_dir().glob("*.yaml"))}
