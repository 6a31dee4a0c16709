"""Benchmark harness: seeded sensor workloads and engine-assisted vs
send-everything comparisons on two built-in topologies.

Both topologies are authored for this artifact. The five-switch demo wires
bs1..bs300 across four edge switches with the user host on the fifth. The
twelve-switch benchmark attaches bs1..bs78 in decade blocks to sw1..sw8,
aggregates through sw9/sw10 into a sw11/sw12 core (partial mesh: the
backbone tree plus five higher-delay cross links), with the user on sw12
and a cloud host on sw11. Absolute packet counts depend on this wiring;
the reproducible claims are the relative ones (large reduction, edge
switches exempt).

Every delivered value is audited against a direct evaluation of the
request expression over the recorded per-epoch source values; an audit
mismatch fails the run rather than the report.
"""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass
from pathlib import Path

from . import dsl, planner
from .dataplane import Fabric
from .dsl import OpKind, OpNode, Request, TaskGraph
from .epb import ConfigStore
from .errors import AuditFailure
from .packets import PacketRecord, Scalar
from .planner import DatapathPlan
from .topology import Topology, load_topology, natural_key

DESTINATION = "user"


# -- authored topologies ---------------------------------------------------------


def demo_topology_document() -> dict:
    """Five switches, 300 base stations, one user host."""
    nodes = [{"id": f"sw{i}", "kind": "switch"} for i in range(1, 6)]
    nodes += [{"id": f"e-sw{i}", "kind": "engine"} for i in range(1, 6)]
    nodes += [
        {"range": "bs1:bs10", "kind": "basestation", "switch": "sw1"},
        {"range": "bs11:bs100", "kind": "basestation", "switch": "sw2"},
        {"range": "bs101:bs200", "kind": "basestation", "switch": "sw3"},
        {"range": "bs201:bs300", "kind": "basestation", "switch": "sw4"},
        {"id": "user", "kind": "destination"},
    ]
    links = [{"a": f"e-sw{i}", "b": f"sw{i}"} for i in range(1, 6)]
    links += [
        {"a": "sw1", "b": "sw3", "delay_ms": 1},
        {"a": "sw1", "b": "sw4", "delay_ms": 2},
        {"a": "sw2", "b": "sw3", "delay_ms": 1},
        {"a": "sw3", "b": "sw5", "delay_ms": 1},
        {"a": "sw4", "b": "sw5", "delay_ms": 1},
        {"a": "user", "b": "sw5", "delay_ms": 1},
    ]
    return {"nodes": nodes, "links": links}


def demo_topology() -> Topology:
    return load_topology(demo_topology_document())


def experiment_topology_document() -> dict:
    """Twelve switches, 78 base stations, user and cloud hosts."""
    nodes = [{"id": f"sw{i}", "kind": "switch"} for i in range(1, 13)]
    nodes += [{"id": f"e-sw{i}", "kind": "engine"} for i in range(1, 13)]
    for k in range(1, 8):
        nodes.append(
            {"range": f"bs{10 * k - 9}:bs{10 * k}", "kind": "basestation", "switch": f"sw{k}"}
        )
    nodes.append({"range": "bs71:bs75", "kind": "basestation", "switch": "sw8"})
    nodes.append({"range": "bs76:bs78", "kind": "basestation", "switch": "sw9"})
    nodes += [{"id": "user", "kind": "destination"}, {"id": "cloud", "kind": "cloud"}]
    links = [{"a": f"e-sw{i}", "b": f"sw{i}"} for i in range(1, 13)]
    backbone = [
        ("sw1", "sw9", 1),
        ("sw2", "sw9", 1),
        ("sw3", "sw9", 1),
        ("sw4", "sw9", 1),
        ("sw5", "sw10", 1),
        ("sw6", "sw10", 1),
        ("sw7", "sw10", 1),
        ("sw8", "sw10", 1),
        ("sw9", "sw11", 1),
        ("sw10", "sw11", 1),
        ("sw11", "sw12", 1),
        # cross links make the switch layer a partial mesh
        ("sw1", "sw2", 3),
        ("sw3", "sw4", 3),
        ("sw5", "sw6", 3),
        ("sw7", "sw8", 3),
        ("sw9", "sw10", 3),
    ]
    links += [{"a": a, "b": b, "delay_ms": d} for a, b, d in backbone]
    links += [{"a": "user", "b": "sw12", "delay_ms": 1}, {"a": "cloud", "b": "sw11", "delay_ms": 1}]
    return {"nodes": nodes, "links": links}


def build_experiment_topology() -> Topology:
    return load_topology(experiment_topology_document())


# -- benchmark requests ----------------------------------------------------------

# R2's second token and R8's bs61 range are written out in full here; the
# benchmark definitions use bsN ids throughout.
R1_R9 = (
    "datapath_a(max(bs1:bs10),destination<-user)",
    "datapath_a(avg(max(bs1:bs10),max(bs11:bs20)),destination<-user)",
    "datapath_a(avg(min(bs21:bs30),min(bs31:bs40)),destination<-user)",
    "datapath_a(sum(avg(bs21:bs30),avg(bs51:bs60)),destination<-user)",
    "datapath_a(sum(max(bs1:bs10),max(bs11:bs20),max(bs41:bs50)),destination<-user)",
    "datapath_a(sum(max(bs1:bs10),max(bs11:bs20),min(bs21:bs30),min(bs31:bs40)),destination<-user)",
    "datapath_a(max(max(bs1:bs10),min(bs31:bs40),max(bs41:bs50),min(bs56:bs60)),destination<-user)",
    "datapath_a(max(avg(bs56:bs60),avg(bs61:bs65),max(min(bs66:bs70),min(bs71:bs75)),max(bs76:bs78)),destination<-user)",
    "datapath_a(max(avg(bs1:bs10),avg(bs11:bs20),max(min(bs21:bs30),min(bs31:bs40)),max(bs41:bs50)),destination<-user)",
)


def request_texts() -> list[str]:
    return list(R1_R9)


def requests_r1_r9() -> list[Request]:
    return [dsl.parse_request(text) for text in R1_R9]


# -- workload --------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    source: str
    epoch: int
    publish_ms: float
    value: float


@dataclass
class Workload:
    """Seeded publish schedule: every source emits one scalar per period,
    offset by a uniform per-packet jitter."""

    seed: int = 0
    horizon_ms: float = 10_000.0
    period_ms: float = 100.0
    value_range: tuple[float, float] = (0.0, 100.0)
    jitter_range_ms: tuple[float, float] = (0.0, 3.0)

    def epochs(self) -> int:
        return int(self.horizon_ms // self.period_ms)

    def samples(self, sources: list[str]) -> list[Sample]:
        rng = random.Random(self.seed)
        ordered = sorted(sources, key=natural_key)
        out = []
        for epoch in range(self.epochs()):
            for source in ordered:
                offset = rng.uniform(*self.jitter_range_ms)
                value = rng.uniform(*self.value_range)
                out.append(Sample(source, epoch, epoch * self.period_ms + offset, value))
        return out

    def to_doc(self) -> dict:
        return {
            "seed": self.seed,
            "horizon_ms": self.horizon_ms,
            "period_ms": self.period_ms,
            "value_range": list(self.value_range),
            "jitter_range_ms": list(self.jitter_range_ms),
        }


# -- reference evaluation ---------------------------------------------------------


def evaluate_expression(tg: TaskGraph, values: dict[str, float]) -> float:
    """Evaluate the request expression directly over one epoch's values.

    Independent of the engine pipeline on purpose: this is the audit oracle
    for everything the fabric delivers.
    """

    def rec(node: OpNode) -> float:
        operands = [
            rec(c) if isinstance(c, OpNode) else values[c] for c in node.children
        ]
        if node.kind is OpKind.MIN:
            return min(operands)
        if node.kind is OpKind.MAX:
            return max(operands)
        if node.kind is OpKind.SUM:
            return sum(operands)
        if node.kind is OpKind.AVG:
            return sum(operands) / len(operands)
        if node.kind is OpKind.SUB:
            acc = operands[0]
            for v in operands[1:]:
                acc -= v
            return acc
        acc = operands[0]
        for v in operands[1:]:
            acc *= v
        return acc

    return rec(tg.root)


def _values_close(a: float, b: float) -> bool:
    return a == b or abs(a - b) <= 1e-9 * max(abs(a), abs(b), 1e-12)


# -- comparison runs ---------------------------------------------------------------


@dataclass
class ComparisonRow:
    request: str
    label: str
    flip_total_hops: int
    baseline_total_hops: int
    reduction_pct: float
    per_switch_flip: dict[str, int]
    per_switch_baseline: dict[str, int]
    edge_switches: list[str]
    delivered_epochs: int
    audit_ok: bool

    def to_doc(self) -> dict:
        return {
            "request": self.request,
            "label": self.label,
            "flip_total_hops": self.flip_total_hops,
            "baseline_total_hops": self.baseline_total_hops,
            "reduction_pct": self.reduction_pct,
            "per_switch_flip": dict(sorted(self.per_switch_flip.items(), key=lambda kv: natural_key(kv[0]))),
            "per_switch_baseline": dict(
                sorted(self.per_switch_baseline.items(), key=lambda kv: natural_key(kv[0]))
            ),
            "edge_switches": self.edge_switches,
            "delivered_epochs": self.delivered_epochs,
            "audit_ok": self.audit_ok,
        }


def _inject_all(fabric: Fabric, samples: list[Sample], ingress: dict[str, str], user: str):
    for s in samples:
        fabric.inject(
            PacketRecord(
                source=s.source,
                final_destination=ingress[s.source],
                user=user,
                epoch=s.epoch,
                timestamp_ms=s.publish_ms,
                payload=Scalar(s.value),
            ),
            at=s.source,
        )


def run_flip(
    t: Topology,
    request: Request,
    workload: Workload,
    cov: dsl.CoverageMap | None = None,
) -> tuple[DatapathPlan, Fabric, list[Sample]]:
    """Plan, install, and simulate one request with engines active."""
    plan = planner.plan(request, t, cov)
    fabric = Fabric(t, ConfigStore())
    fabric.install_rules(plan.rules)
    for cfg in plan.engine_configs:
        fabric.store.set_config(cfg)
    tg = dsl.expand_sources(request, t, cov)
    samples = workload.samples(tg.leaves())
    _inject_all(fabric, samples, plan.source_ingress, request.user)
    fabric.run()
    return plan, fabric, samples


def run_baseline(
    t: Topology,
    request: Request,
    workload: Workload,
    cov: dsl.CoverageMap | None = None,
) -> tuple[Fabric, list[Sample]]:
    """Simulate the same workload with plain shortest-path delivery."""
    tg = dsl.expand_sources(request, t, cov)
    destination = planner.resolve_endpoint(t, request.destination)
    fabric = Fabric(t, ConfigStore())
    fabric.install_rules(planner.compile_baseline(t, tg.leaves(), destination))
    samples = workload.samples(tg.leaves())
    _inject_all(fabric, samples, {s: destination for s in tg.leaves()}, request.user)
    fabric.run()
    return fabric, samples


def audit_delivered(
    tg: TaskGraph, fabric: Fabric, samples: list[Sample], destination: str, epochs: int
) -> int:
    """Compare every delivered value with the direct expression evaluation.

    Raises AuditFailure on the first mismatch; returns the epoch count.
    """
    by_epoch: dict[int, dict[str, float]] = {}
    for s in samples:
        by_epoch.setdefault(s.epoch, {})[s.source] = s.value
    delivered = fabric.delivered_at(destination)
    if len(delivered) != epochs:
        raise AuditFailure(f"expected {epochs} deliveries at {destination}, got {len(delivered)}")
    seen = set()
    for record in delivered:
        epoch = record["epoch"]
        if epoch in seen:
            raise AuditFailure(f"epoch {epoch} delivered more than once")
        seen.add(epoch)
        payload = record["payload"]
        if "scalar" not in payload:
            raise AuditFailure(f"expected scalar delivery, got {payload}")
        got = payload["scalar"]
        want = evaluate_expression(tg, by_epoch[epoch])
        if not _values_close(got, want):
            raise AuditFailure(f"epoch {epoch}: delivered {got!r}, expected {want!r}")
    return len(delivered)


def run_comparison(
    t: Topology,
    request: Request,
    workload: Workload,
    cov: dsl.CoverageMap | None = None,
    label: str = "",
) -> ComparisonRow:
    """One request, one workload, both modes; audited and summarized."""
    tg = dsl.expand_sources(request, t, cov)
    destination = planner.resolve_endpoint(t, request.destination)
    plan, flip_fabric, samples = run_flip(t, request, workload, cov)
    delivered = audit_delivered(tg, flip_fabric, samples, destination, workload.epochs())
    base_fabric, _ = run_baseline(t, request, workload, cov)

    flip_hops = flip_fabric.stats().total_packet_hops
    base_hops = base_fabric.stats().total_packet_hops
    reduction = 100.0 * (1.0 - flip_hops / base_hops) if base_hops else 0.0
    edge = sorted({t.connected_switch(leaf) for leaf in tg.leaves()}, key=natural_key)
    return ComparisonRow(
        request=dsl.canonical(request),
        label=label or dsl.canonical(request),
        flip_total_hops=flip_hops,
        baseline_total_hops=base_hops,
        reduction_pct=reduction,
        per_switch_flip=flip_fabric.stats(destination).switch_counts,
        per_switch_baseline=base_fabric.stats(destination).switch_counts,
        edge_switches=edge,
        delivered_epochs=delivered,
        audit_ok=True,
    )


# -- the full suite -----------------------------------------------------------------


@dataclass
class ExperimentReport:
    suite: str
    seed: int
    workload: dict
    rows: list[ComparisonRow]
    switches: list[str]

    def per_switch_totals(self) -> list[tuple[str, int, int]]:
        totals = []
        for sw in self.switches:
            flip = sum(r.per_switch_flip.get(sw, 0) for r in self.rows)
            base = sum(r.per_switch_baseline.get(sw, 0) for r in self.rows)
            totals.append((sw, flip, base))
        return totals

    def to_doc(self) -> dict:
        return {
            "suite": self.suite,
            "seed": self.seed,
            "workload": self.workload,
            "rows": [r.to_doc() for r in self.rows],
            "per_switch": [
                {"switch": sw, "flip_count": f, "baseline_count": b}
                for sw, f, b in self.per_switch_totals()
            ],
            "audit_ok": all(r.audit_ok for r in self.rows),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_doc(), sort_keys=True, separators=(",", ":"))


def run_suite(
    seed: int = 0,
    workload: Workload | None = None,
    topology: Topology | None = None,
) -> ExperimentReport:
    """Run R1..R9 in both modes on the benchmark topology."""
    t = topology or build_experiment_topology()
    w = workload or Workload(seed=seed)
    rows = []
    for i, request in enumerate(requests_r1_r9(), 1):
        rows.append(run_comparison(t, request, w, label=f"R{i}"))
    return ExperimentReport(
        suite="r1r9", seed=w.seed, workload=w.to_doc(), rows=rows, switches=t.switches()
    )


def export_report(report: ExperimentReport, out_dir: str | Path) -> dict[str, Path]:
    """Write the two CSV panels plus a JSON summary. Floats are written with
    repr so the reduction column recomputes exactly from the totals."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    switch_csv = out / "switch_counts.csv"
    with open(switch_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["switch", "flip_count", "baseline_count"])
        for sw, flip, base in report.per_switch_totals():
            writer.writerow([sw, flip, base])
    totals_csv = out / "request_totals.csv"
    with open(totals_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["request", "flip_total_hops", "baseline_total_hops", "reduction_pct"])
        for row in report.rows:
            writer.writerow(
                [row.label, row.flip_total_hops, row.baseline_total_hops, repr(row.reduction_pct)]
            )
    summary = out / "summary.json"
    summary.write_text(
        json.dumps(report.to_doc(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return {"switch_counts": switch_csv, "request_totals": totals_csv, "summary": summary}
