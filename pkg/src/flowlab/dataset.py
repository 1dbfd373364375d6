"""Labeled dataset construction, auditing, and serialization.

Builds the complete-flow dataset (payload filter, duplicate-hash filter,
minority-class filter), derives partial-flow datasets by matching snapshots
to their parent flows, aligns datasets by flow hash for fair comparison,
and audits raw flow records for segmentation artifacts.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, fields
from typing import Iterable

from .errors import DatasetIOError, SchemaMismatchError
from .labeling import RuleSet, label_flow
from .meter import (
    FEATURE_NAMES,
    FeatureVector,
    FlowId,
    FlowRecord,
    FlowSnapshot,
    Trigger,
)

CF_PROVENANCE = "CF"

_FIELD_TYPES = {f.name: f.type for f in fields(FeatureVector)}
_INT_FIELDS = {name for name, t in _FIELD_TYPES.items() if t in (int, "int")}


@dataclass(frozen=True, slots=True)
class LabeledFlow:
    """One flow's features with its ground-truth label."""

    id: FlowId
    features: FeatureVector
    label: str


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable labeled feature table with provenance.

    Provenance is "CF" for complete flows or the trigger string ("PC=5",
    "FD=100") for partial flows. Flow hashes are unique within a dataset.
    """

    provenance: str
    flows: tuple[LabeledFlow, ...]
    feature_schema: tuple[str, ...] = FEATURE_NAMES

    def __len__(self) -> int:
        return len(self.flows)

    def __eq__(self, other) -> bool:
        # Equality is content-level: the CSV form carries only the flow
        # hash, so FlowId key/start_us do not participate. Empty datasets
        # carry no provenance rows and compare equal regardless of it.
        if not isinstance(other, Dataset):
            return NotImplemented
        if self.feature_schema != other.feature_schema:
            return False
        if self.flows or other.flows:
            if self.provenance != other.provenance:
                return False
        return [(f.id.hash64, f.label, f.features) for f in self.flows] == [
            (f.id.hash64, f.label, f.features) for f in other.flows
        ]

    __hash__ = None  # type: ignore[assignment]

    def hashes(self) -> frozenset[int]:
        return frozenset(f.id.hash64 for f in self.flows)

    def label_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for f in self.flows:
            counts[f.label] = counts.get(f.label, 0) + 1
        return counts


def build_cf(
    records: Iterable[FlowRecord], rules: RuleSet, min_class_count: int = 50
) -> Dataset:
    """Label records and apply the complete-flow filters.

    Drops flows with zero total payload, keeps only the first record for
    any repeated flow hash, and removes every class with fewer surviving
    flows than ``min_class_count``.
    """
    survivors: list[LabeledFlow] = []
    seen: set[int] = set()
    for record in records:
        if record.features.bidirectional_payload_bytes == 0:
            continue
        if record.id.hash64 in seen:
            continue
        seen.add(record.id.hash64)
        survivors.append(
            LabeledFlow(record.id, record.features, label_flow(record, rules))
        )

    counts: dict[str, int] = {}
    for flow in survivors:
        counts[flow.label] = counts.get(flow.label, 0) + 1
    kept = tuple(f for f in survivors if counts[f.label] >= min_class_count)
    return Dataset(provenance=CF_PROVENANCE, flows=kept)


def build_pf(
    snapshots: Iterable[FlowSnapshot], cf: Dataset, trigger: Trigger
) -> Dataset:
    """Collect one snapshot per parent flow for one trigger.

    Only snapshots whose parent survived the complete-flow filters are
    kept; each inherits its parent's label.
    """
    if cf.provenance != CF_PROVENANCE:
        raise ValueError(f"parent dataset has provenance {cf.provenance!r}, not CF")
    parent_labels = {f.id.hash64: f.label for f in cf.flows}
    kept: list[LabeledFlow] = []
    seen: set[int] = set()
    for snap in snapshots:
        if snap.trigger != trigger:
            continue
        h = snap.parent_id.hash64
        if h not in parent_labels or h in seen:
            continue
        seen.add(h)
        kept.append(LabeledFlow(snap.parent_id, snap.features, parent_labels[h]))
    return Dataset(provenance=str(trigger), flows=tuple(kept))


def align(cf: Dataset, pf: Dataset) -> tuple[Dataset, Dataset]:
    """Restrict both datasets to their common flow hashes.

    When the PF side was built against this CF (the normal case) the PF
    side is returned unchanged.
    """
    if cf.provenance != CF_PROVENANCE:
        raise ValueError(f"first dataset has provenance {cf.provenance!r}, not CF")
    common = cf.hashes() & pf.hashes()
    cf_flows = tuple(f for f in cf.flows if f.id.hash64 in common)
    pf_flows = tuple(f for f in pf.flows if f.id.hash64 in common)
    return (
        Dataset(provenance=cf.provenance, flows=cf_flows),
        Dataset(provenance=pf.provenance, flows=pf_flows),
    )


@dataclass(frozen=True)
class AuditReport:
    """Diagnostic tallies over labeled, unfiltered flow records."""

    zpl_counts: dict[str, int]
    payload_counts: dict[str, int]
    fin_gt2_benign: int
    fin_gt2_attack: int
    rst_gt2_benign: int
    rst_gt2_attack: int
    piat_near_idle: int
    repeated_key_groups: int

    @property
    def fin_gt2_total(self) -> int:
        return self.fin_gt2_benign + self.fin_gt2_attack

    @property
    def rst_gt2_total(self) -> int:
        return self.rst_gt2_benign + self.rst_gt2_attack

    def to_dict(self) -> dict:
        return {
            "zpl_counts": dict(sorted(self.zpl_counts.items())),
            "payload_counts": dict(sorted(self.payload_counts.items())),
            "fin_gt2": {
                "benign": self.fin_gt2_benign,
                "attack": self.fin_gt2_attack,
                "total": self.fin_gt2_total,
            },
            "rst_gt2": {
                "benign": self.rst_gt2_benign,
                "attack": self.rst_gt2_attack,
                "total": self.rst_gt2_total,
            },
            "piat_near_idle": self.piat_near_idle,
            "repeated_key_groups": self.repeated_key_groups,
        }

    def to_text(self) -> str:
        lines = ["label                     payload>0   payload=0"]
        labels = sorted(set(self.zpl_counts) | set(self.payload_counts))
        for label in labels:
            lines.append(
                f"{label:<25} {self.payload_counts.get(label, 0):>9} "
                f"{self.zpl_counts.get(label, 0):>11}"
            )
        lines.append("")
        lines.append(
            f"flows with FIN > 2: benign {self.fin_gt2_benign}, "
            f"attack {self.fin_gt2_attack}, total {self.fin_gt2_total}"
        )
        lines.append(
            f"flows with RST > 2: benign {self.rst_gt2_benign}, "
            f"attack {self.rst_gt2_attack}, total {self.rst_gt2_total}"
        )
        lines.append(f"flows with max PIAT marginally below idle: {self.piat_near_idle}")
        lines.append(f"repeated five-tuple groups: {self.repeated_key_groups}")
        return "\n".join(lines)


def audit(
    records: Iterable[FlowRecord], rules: RuleSet, idle_timeout_s: float
) -> AuditReport:
    """Tally segmentation artifacts over raw (unfiltered) records.

    "Marginally below the idle timeout" means a flow's maximum packet
    inter-arrival time falls in [0.8 * idle, idle).
    """
    benign = rules.default_label
    zpl: dict[str, int] = {}
    payload: dict[str, int] = {}
    fin_b = fin_a = rst_b = rst_a = 0
    near_idle = 0
    key_counts: dict = {}
    lo_ms = 0.8 * idle_timeout_s * 1000
    hi_ms = idle_timeout_s * 1000

    for record in records:
        label = label_flow(record, rules)
        fv = record.features
        bucket = zpl if fv.bidirectional_payload_bytes == 0 else payload
        bucket[label] = bucket.get(label, 0) + 1
        if fv.bidirectional_fin_count > 2:
            if label == benign:
                fin_b += 1
            else:
                fin_a += 1
        if fv.bidirectional_rst_count > 2:
            if label == benign:
                rst_b += 1
            else:
                rst_a += 1
        if lo_ms <= fv.bidirectional_max_piat_ms < hi_ms:
            near_idle += 1
        key_counts[record.id.key] = key_counts.get(record.id.key, 0) + 1

    return AuditReport(
        zpl_counts=zpl,
        payload_counts=payload,
        fin_gt2_benign=fin_b,
        fin_gt2_attack=fin_a,
        rst_gt2_benign=rst_b,
        rst_gt2_attack=rst_a,
        piat_near_idle=near_idle,
        repeated_key_groups=sum(1 for n in key_counts.values() if n >= 2),
    )


@dataclass(frozen=True)
class LabelStats:
    count: int
    min_duration_ms: float
    mean_duration_ms: float
    max_duration_ms: float
    min_packets: int
    mean_packets: float
    max_packets: int


@dataclass(frozen=True)
class DistributionSummary:
    """Per-label duration/packet statistics plus benign/anomaly totals."""

    per_label: dict[str, LabelStats]
    benign_total: int
    anomaly_total: int
    total: int

    def to_dict(self) -> dict:
        return {
            "per_label": {
                label: vars(stats) for label, stats in sorted(self.per_label.items())
            },
            "totals": {
                "benign": self.benign_total,
                "anomaly": self.anomaly_total,
                "all": self.total,
            },
        }

    def to_text(self) -> str:
        header = (
            f"{'label':<25} {'count':>8} {'min dur':>10} {'mean dur':>12} "
            f"{'max dur':>10} {'min pkt':>8} {'mean pkt':>9} {'max pkt':>8}"
        )
        lines = [header]
        for label, s in sorted(self.per_label.items()):
            lines.append(
                f"{label:<25} {s.count:>8} {s.min_duration_ms:>10.2f} "
                f"{s.mean_duration_ms:>12.2f} {s.max_duration_ms:>10.2f} "
                f"{s.min_packets:>8} {s.mean_packets:>9.2f} {s.max_packets:>8}"
            )
        lines.append(
            f"totals: benign {self.benign_total}, anomaly {self.anomaly_total}, "
            f"all {self.total}"
        )
        return "\n".join(lines)


def distribution(ds: Dataset, benign_label: str = "BENIGN") -> DistributionSummary:
    """Count/min/mean/max of duration and packet count, per label."""
    groups: dict[str, list[LabeledFlow]] = {}
    for flow in ds.flows:
        groups.setdefault(flow.label, []).append(flow)

    per_label = {}
    for label, flows in groups.items():
        durations = [f.features.duration_ms for f in flows]
        packets = [f.features.bidirectional_packets for f in flows]
        per_label[label] = LabelStats(
            count=len(flows),
            min_duration_ms=min(durations),
            mean_duration_ms=sum(durations) / len(durations),
            max_duration_ms=max(durations),
            min_packets=min(packets),
            mean_packets=sum(packets) / len(packets),
            max_packets=max(packets),
        )
    benign_total = sum(s.count for label, s in per_label.items() if label == benign_label)
    total = len(ds.flows)
    return DistributionSummary(
        per_label=per_label,
        benign_total=benign_total,
        anomaly_total=total - benign_total,
        total=total,
    )


def _format_cell(name: str, value) -> str:
    if name in _INT_FIELDS:
        return str(int(value))
    return repr(float(value))


def write_csv(ds: Dataset, path) -> None:
    """Write a dataset as CSV with full-precision floats.

    Columns are the feature schema followed by label, flow_hash, and
    provenance.
    """
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(list(ds.feature_schema) + ["label", "flow_hash", "provenance"])
            for flow in ds.flows:
                row = [
                    _format_cell(name, getattr(flow.features, name))
                    for name in ds.feature_schema
                ]
                row += [flow.label, str(flow.id.hash64), ds.provenance]
                writer.writerow(row)
    except OSError as exc:
        raise DatasetIOError(f"cannot write dataset {path}: {exc}") from exc


def read_csv(path) -> Dataset:
    """Read a dataset written by write_csv.

    Raises SchemaMismatchError when the header does not carry the expected
    feature schema, DatasetIOError on unreadable or inconsistent files.
    Deserialized FlowIds carry only the hash.
    """
    expected = list(FEATURE_NAMES) + ["label", "flow_hash", "provenance"]
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise SchemaMismatchError(f"{path}: missing header") from None
            if header != expected:
                raise SchemaMismatchError(
                    f"{path}: header does not match the feature schema"
                )
            flows: list[LabeledFlow] = []
            provenance: str | None = None
            seen: set[int] = set()
            for row in reader:
                if len(row) != len(expected):
                    raise DatasetIOError(f"{path}: row with {len(row)} cells")
                values = {
                    name: (int(cell) if name in _INT_FIELDS else float(cell))
                    for name, cell in zip(FEATURE_NAMES, row)
                }
                label, hash_text, row_prov = row[-3], row[-2], row[-1]
                if provenance is None:
                    provenance = row_prov
                elif provenance != row_prov:
                    raise DatasetIOError(f"{path}: mixed provenance values")
                h = int(hash_text)
                if h in seen:
                    raise DatasetIOError(f"{path}: duplicate flow hash {h}")
                seen.add(h)
                flows.append(
                    LabeledFlow(
                        id=FlowId.from_hash(h),
                        features=FeatureVector.from_values(values),
                        label=label,
                    )
                )
    except OSError as exc:
        raise DatasetIOError(f"cannot read dataset {path}: {exc}") from exc
    return Dataset(
        provenance=provenance if provenance is not None else CF_PROVENANCE,
        flows=tuple(flows),
    )


def write_json_report(data: dict, path) -> None:
    """Write a JSON report with stable key order."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
