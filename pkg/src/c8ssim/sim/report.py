"""Run reports and phase tables, computed from parsed event-log records only."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Optional

from .eventlog import ADVERSARY_PHASE, PHASES, RUNTIME_PHASE

REPORT_COUNTERS = ("attestations", "certificates_issued", "renewals", "rejects")


@dataclass
class RunReport:
    scenario: str
    seed: int
    verdicts: dict[str, str] = field(default_factory=dict)
    expected: dict[str, str] = field(default_factory=dict)
    sweep: dict[str, Any] = field(default_factory=dict)
    counters: dict[str, int] = field(default_factory=dict)
    assertions: dict[str, bool] = field(default_factory=dict)
    passed: bool = False

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "RunReport":
        report = cls("", 0)
        for r in records:
            if r["type"] == "header":
                report.scenario, report.seed = r["scenario"], r["seed"]
            elif r["type"] == "verdict":
                report.verdicts[r["action"]] = r["verdict"]
                report.expected[r["action"]] = r["expected"]
            elif r["type"] == "assertion":
                report.assertions[r["name"]] = r["ok"]
            elif r["type"] == "summary":
                report.sweep = r["sweep"]
                report.counters = {k: r["counters"].get(k, 0) for k in REPORT_COUNTERS}
        report.passed = all(report.assertions.values()) and all(
            report.verdicts[a] == report.expected[a] for a in report.verdicts)
        return report

    def to_dict(self) -> dict:
        return asdict(self)

    def render(self) -> str:
        lines = [f"scenario {self.scenario} (seed {self.seed}): {'PASS' if self.passed else 'FAIL'}"]
        if self.verdicts:
            width = max(len(a) for a in self.verdicts)
            lines.append("verdicts:")
            for action, verdict in self.verdicts.items():
                mark = "ok" if verdict == self.expected[action] else f"expected {self.expected[action]}"
                lines.append(f"  {action:<{width}}  {verdict:<9}  {mark}")
        sweep = self.sweep or {}
        lines.append(f"confidentiality sweep: {'clean' if sweep.get('clean') else 'LEAK'}"
                     f" ({sweep.get('plaintexts', 0)} plaintexts, {sweep.get('sources', 0)} sources,"
                     f" {len(sweep.get('conceded', []))} conceded)")
        for leak in sweep.get("leaks", []):
            lines.append(f"  leak: {leak['label']} in {leak['source']}")
        lines.append("counters: " + ", ".join(f"{k}={v}" for k, v in self.counters.items()))
        failed = [n for n, ok in self.assertions.items() if not ok]
        lines.append(f"assertions: {len(self.assertions) - len(failed)}/{len(self.assertions)} hold")
        lines += [f"  failed: {n}" for n in failed]
        return "\n".join(lines)


def filter_events(records: Iterable[dict], actor: Optional[str] = None, phase: Optional[str] = None,
                  kind: Optional[str] = None) -> list[dict]:
    out = []
    for r in records:
        if r.get("type") != "event":
            continue
        if actor and r["actor"] != actor:
            continue
        if phase and r["phase"] != phase:
            continue
        if kind and r["kind"] != kind:
            continue
        out.append(r)
    return out


def phase_rows(events: list[dict]) -> list[dict]:
    """One row per phase present, in request-lifecycle order."""
    order = list(PHASES) + [RUNTIME_PHASE, ADVERSARY_PHASE]
    rows = []
    for name in order + sorted({e["phase"] for e in events} - set(order)):
        mine = [e for e in events if e["phase"] == name]
        if not mine:
            continue
        rows.append({
            "phase": name,
            "events": len(mine),
            "first_tick": min(e["tick"] for e in mine),
            "last_tick": max(e["tick"] for e in mine),
            "actors": sorted({e["actor"] for e in mine}),
            "kinds": sorted({e["kind"] for e in mine}),
        })
    return rows


def render_table(rows: list[dict], events: Optional[list[dict]] = None) -> str:
    header = f"{'phase':<26} {'events':>6} {'ticks':>11}  actors"
    lines = [header, "-" * len(header)]
    for row in rows:
        ticks = f"{row['first_tick']}-{row['last_tick']}"
        actors = ", ".join(row["actors"])
        if len(actors) > 60:
            actors = actors[:57] + "..."
        lines.append(f"{row['phase']:<26} {row['events']:>6} {ticks:>11}  {actors}")
    if events:
        lines.append("")
        for e in events:
            lines.append(f"{e['tick']:>6} {e['phase']:<26} {e['actor']:<20} {e['kind']}")
    return "\n".join(lines)
