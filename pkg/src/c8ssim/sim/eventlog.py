"""Append-only event log, written as JSON lines."""

from __future__ import annotations

import enum
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Optional

from .. import crypto

PHASES = (
    "preconditions",
    "client-bootstrapping",
    "connection-establishment",
    "request-submission",
    "intra-cluster-transit",
    "workload-execution",
    "response",
)
# events after setup that belong to no request phase
RUNTIME_PHASE = "runtime"
ADVERSARY_PHASE = "adversary"


class Verdict(str, enum.Enum):
    MITIGATED = "Mitigated"
    SUCCEEDED = "Succeeded"
    DOS = "Dos"


class LogMalformed(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


@dataclass
class VerdictRecord:
    action: str
    kind: str
    tick: int
    verdict: Verdict
    expected: Verdict
    evidence: dict[str, Any] = field(default_factory=dict)

    @property
    def holds(self) -> bool:
        return self.verdict == self.expected

    def to_dict(self) -> dict:
        d = asdict(self)
        d["verdict"] = self.verdict.value
        d["expected"] = self.expected.value
        return d


def _jsonable(value: Any) -> Any:
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, set, frozenset)):
        items = [_jsonable(v) for v in value]
        return sorted(items) if isinstance(value, (set, frozenset)) else items
    return value


class EventLog:
    def __init__(self, scenario: str = "", seed: int = 0):
        self.scenario = scenario
        self.seed = seed
        self.events: list[dict[str, Any]] = []
        self.verdicts: list[VerdictRecord] = []
        self.assertions: list[dict[str, Any]] = []
        self.counters: Counter = Counter()
        self.sweep: dict[str, Any] = {}

    def emit(
        self,
        tick: int,
        phase: str,
        actor: str,
        kind: str,
        payload: Optional[bytes] = None,
        **detail: Any,
    ) -> dict[str, Any]:
        event = {
            "seq": len(self.events),
            "tick": tick,
            "phase": phase,
            "actor": actor,
            "kind": kind,
            "digest": crypto.digest(payload).hex() if payload is not None else "",
            "detail": _jsonable(detail),
        }
        self.events.append(event)
        return event

    def verdict(self, record: VerdictRecord) -> None:
        record.evidence = _jsonable(record.evidence)
        self.verdicts.append(record)

    def check(self, name: str, holds: bool, **detail: Any) -> bool:
        self.assertions.append({"name": name, "ok": bool(holds), "detail": _jsonable(detail)})
        return bool(holds)

    @property
    def all_hold(self) -> bool:
        return all(v.holds for v in self.verdicts) and all(a["ok"] for a in self.assertions)

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e["kind"] == kind)

    def summary(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "events": len(self.events),
            "counters": dict(sorted(self.counters.items())),
            "verdicts": {v.action: v.verdict.value for v in self.verdicts},
            "sweep": self.sweep,
            "assertions": {a["name"]: a["ok"] for a in self.assertions},
            "passed": self.all_hold,
        }

    def records(self) -> Iterable[dict[str, Any]]:
        yield {"type": "header", "scenario": self.scenario, "seed": self.seed}
        for e in self.events:
            yield {"type": "event", **e}
        for v in self.verdicts:
            yield {"type": "verdict", **v.to_dict()}
        for a in self.assertions:
            yield {"type": "assertion", **a}
        yield {"type": "summary", **self.summary()}

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in self.records())


def parse_jsonl(text: str) -> list[dict[str, Any]]:
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise LogMalformed(lineno, str(exc)) from None
        if not isinstance(record, dict) or "type" not in record:
            raise LogMalformed(lineno, "record without a type")
        records.append(record)
    return records
