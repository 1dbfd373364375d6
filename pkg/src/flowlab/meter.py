"""Single-pass bidirectional flow metering.

Assembles packets into flows keyed by a direction-agnostic five-tuple,
expires flows on idle/active timeouts and on the first FIN or RST, and
exports partial-flow snapshots at packet-count, duration, and byte-count
triggers while the flow is still live.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from functools import lru_cache
from ipaddress import ip_address

from .errors import UnsortedTraceError
from .trace_io import (
    PacketTrace,
    RawPacket,
    TCP_ACK,
    TCP_CWR,
    TCP_ECE,
    TCP_FIN,
    TCP_PSH,
    TCP_RST,
    TCP_SYN,
    TCP_URG,
)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

_FLAG_BITS = (
    ("syn", TCP_SYN),
    ("fin", TCP_FIN),
    ("rst", TCP_RST),
    ("psh", TCP_PSH),
    ("ack", TCP_ACK),
    ("urg", TCP_URG),
    ("ece", TCP_ECE),
    ("cwr", TCP_CWR),
)


# parsing the same address text repeatedly dominates per-packet cost
@lru_cache(maxsize=65536)
def _packed(ip: str) -> bytes:
    return ip_address(ip).packed


@lru_cache(maxsize=65536)
def _canonical_ip(ip: str) -> str:
    return str(ip_address(ip))


@dataclass(frozen=True, slots=True)
class FlowKey:
    """Direction-agnostic flow identity: canonically ordered endpoints.

    ``endpoint_a`` is the lexicographically smaller (ip, port) pair when
    compared by packed address bytes, so both orientations of a five-tuple
    map to the same key.
    """

    endpoint_a: tuple[str, int]
    endpoint_b: tuple[str, int]
    protocol: int

    @classmethod
    def from_endpoints(
        cls, ip1: str, port1: int, ip2: str, port2: int, protocol: int
    ) -> FlowKey:
        e1 = (_canonical_ip(ip1), port1)
        e2 = (_canonical_ip(ip2), port2)
        if (_packed(e1[0]), e1[1]) <= (_packed(e2[0]), e2[1]):
            return cls(e1, e2, protocol)
        return cls(e2, e1, protocol)

    @classmethod
    def from_packet(cls, pkt: RawPacket) -> FlowKey:
        return cls.from_endpoints(
            pkt.src_ip, pkt.src_port, pkt.dst_ip, pkt.dst_port, pkt.protocol
        )


def flow_hash(key: FlowKey, start_us: int) -> int:
    """Stable 64-bit FNV-1a hash of the six-tuple (key + flow start time).

    The hashed serialization is ``ipA|portA|ipB|portB|proto|start_us`` with
    IPs as lowercase hex of their packed bytes, ports as 4-digit lowercase
    hex, and protocol and start time in decimal.
    """
    text = "{}|{:04x}|{}|{:04x}|{}|{}".format(
        _packed(key.endpoint_a[0]).hex(),
        key.endpoint_a[1],
        _packed(key.endpoint_b[0]).hex(),
        key.endpoint_b[1],
        key.protocol,
        start_us,
    )
    h = _FNV_OFFSET
    for byte in text.encode("ascii"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True, slots=True)
class FlowId:
    """Six-tuple flow identity: key, start time, and their stable hash.

    Datasets deserialized from CSV only carry the hash; ``key`` and
    ``start_us`` are then None.
    """

    hash64: int
    key: FlowKey | None = None
    start_us: int | None = None

    @classmethod
    def from_key(cls, key: FlowKey, start_us: int) -> FlowId:
        return cls(hash64=flow_hash(key, start_us), key=key, start_us=start_us)

    @classmethod
    def from_hash(cls, hash64: int) -> FlowId:
        return cls(hash64=hash64)


@dataclass(frozen=True, slots=True)
class Trigger:
    """A snapshot export trigger: PC=N packets, FD=T ms, or BC=B bytes."""

    kind: str  # "pc" | "fd" | "bc"
    value: int

    _KIND_ORDER = {"pc": 0, "fd": 1, "bc": 2}

    def __post_init__(self) -> None:
        if self.kind not in self._KIND_ORDER:
            raise ValueError(f"unknown trigger kind {self.kind!r}")

    def __str__(self) -> str:
        return f"{self.kind.upper()}={self.value}"

    @classmethod
    def parse(cls, text: str) -> Trigger:
        kind, _, value = text.partition("=")
        return cls(kind.lower(), int(value))

    def sort_key(self) -> tuple[int, int]:
        return (self._KIND_ORDER[self.kind], self.value)


@dataclass(frozen=True)
class FeatureVector:
    """Statistical flow features over the bidirectional, src-to-dst, and
    dst-to-src scopes, plus TCP flag counts.

    Packet size (``*_ps``) features are over wire bytes; payload bytes are
    tracked separately. Inter-arrival (``*_piat_ms``) and stddev features
    are 0 for scopes with fewer than two packets; stddev is the population
    standard deviation.
    """

    duration_ms: float

    bidirectional_packets: int
    bidirectional_bytes: int
    bidirectional_payload_bytes: int
    bidirectional_min_ps: float
    bidirectional_mean_ps: float
    bidirectional_max_ps: float
    bidirectional_stddev_ps: float
    bidirectional_min_piat_ms: float
    bidirectional_mean_piat_ms: float
    bidirectional_max_piat_ms: float
    bidirectional_stddev_piat_ms: float

    src2dst_packets: int
    src2dst_bytes: int
    src2dst_payload_bytes: int
    src2dst_min_ps: float
    src2dst_mean_ps: float
    src2dst_max_ps: float
    src2dst_stddev_ps: float
    src2dst_min_piat_ms: float
    src2dst_mean_piat_ms: float
    src2dst_max_piat_ms: float
    src2dst_stddev_piat_ms: float

    dst2src_packets: int
    dst2src_bytes: int
    dst2src_payload_bytes: int
    dst2src_min_ps: float
    dst2src_mean_ps: float
    dst2src_max_ps: float
    dst2src_stddev_ps: float
    dst2src_min_piat_ms: float
    dst2src_mean_piat_ms: float
    dst2src_max_piat_ms: float
    dst2src_stddev_piat_ms: float

    bidirectional_syn_count: int
    bidirectional_fin_count: int
    bidirectional_rst_count: int
    bidirectional_psh_count: int
    bidirectional_ack_count: int
    bidirectional_urg_count: int
    bidirectional_ece_count: int
    bidirectional_cwr_count: int
    src2dst_fin_count: int
    src2dst_rst_count: int
    dst2src_fin_count: int
    dst2src_rst_count: int

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in FEATURE_NAMES)

    @classmethod
    def from_values(cls, values: dict[str, float]) -> FeatureVector:
        return cls(**values)


FEATURE_NAMES: tuple[str, ...] = tuple(f.name for f in fields(FeatureVector))


@dataclass(frozen=True, slots=True)
class FlowRecord:
    """A complete flow exported at natural termination."""

    id: FlowId
    direction_anchor: tuple[tuple[str, int], tuple[str, int]]
    first_us: int
    last_us: int
    features: FeatureVector
    expiration_reason: str  # idle | active | fin_rst | end_of_trace

    @property
    def protocol(self) -> int:
        assert self.id.key is not None
        return self.id.key.protocol


@dataclass(frozen=True, slots=True)
class FlowSnapshot:
    """A partial-flow export: the feature state at a trigger firing."""

    parent_id: FlowId
    trigger: Trigger
    features: FeatureVector
    exported_at_us: int


def _as_frozenset(values) -> frozenset[int]:
    return frozenset(int(v) for v in values)


@dataclass(frozen=True)
class MeterConfig:
    """Flow export policy: timeouts, FIN/RST expiration, snapshot triggers.

    FD targets are evaluated at packet arrivals in the microsecond domain:
    a snapshot for target T ms fires at the first packet where
    ``duration_us >= (1 - fd_tolerance) * T * 1000`` and is suppressed
    (target permanently missed) when the duration has already overshot
    ``(1 + fd_tolerance) * T * 1000``.
    """

    idle_timeout_s: float = 60.0
    active_timeout_s: float = 18000.0
    fin_rst_expiration: bool = True
    pc_triggers: frozenset[int] = field(default_factory=lambda: frozenset(range(2, 21)))
    fd_triggers_ms: frozenset[int] = field(
        default_factory=lambda: frozenset(
            {5, 10, 50, 100, 150, 300, 500, 1000, 5000, 10000, 15000, 20000}
        )
    )
    fd_tolerance: float = 0.20
    byte_triggers: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if self.idle_timeout_s <= 0 or self.active_timeout_s <= 0:
            raise ValueError("timeouts must be positive")
        if not 0 <= self.fd_tolerance < 1:
            raise ValueError("fd_tolerance must be in [0, 1)")
        object.__setattr__(self, "pc_triggers", _as_frozenset(self.pc_triggers))
        object.__setattr__(self, "fd_triggers_ms", _as_frozenset(self.fd_triggers_ms))
        object.__setattr__(self, "byte_triggers", _as_frozenset(self.byte_triggers))

    def to_dict(self) -> dict:
        return {
            "idle_timeout_s": self.idle_timeout_s,
            "active_timeout_s": self.active_timeout_s,
            "fin_rst_expiration": self.fin_rst_expiration,
            "pc_triggers": sorted(self.pc_triggers),
            "fd_triggers_ms": sorted(self.fd_triggers_ms),
            "fd_tolerance": self.fd_tolerance,
            "byte_triggers": sorted(self.byte_triggers),
        }

    @classmethod
    def from_dict(cls, data: dict) -> MeterConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown meter config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> MeterConfig:
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


class _ScopeStats:
    """Streaming packet-size and inter-arrival accumulators for one scope.

    Sums are kept as exact Python ints; means and population stddevs are
    materialized only at export.
    """

    __slots__ = (
        "packets",
        "bytes",
        "payload_bytes",
        "min_ps",
        "max_ps",
        "sum_ps",
        "sumsq_ps",
        "last_ts",
        "piat_n",
        "min_piat",
        "max_piat",
        "sum_piat",
        "sumsq_piat",
    )

    def __init__(self) -> None:
        self.packets = 0
        self.bytes = 0
        self.payload_bytes = 0
        self.min_ps = 0
        self.max_ps = 0
        self.sum_ps = 0
        self.sumsq_ps = 0
        self.last_ts: int | None = None
        self.piat_n = 0
        self.min_piat = 0
        self.max_piat = 0
        self.sum_piat = 0
        self.sumsq_piat = 0

    def add(self, ts_us: int, wire_len: int, payload_len: int) -> None:
        if self.packets == 0:
            self.min_ps = self.max_ps = wire_len
        else:
            self.min_ps = min(self.min_ps, wire_len)
            self.max_ps = max(self.max_ps, wire_len)
        self.packets += 1
        self.bytes += wire_len
        self.payload_bytes += payload_len
        self.sum_ps += wire_len
        self.sumsq_ps += wire_len * wire_len
        if self.last_ts is not None:
            gap = ts_us - self.last_ts
            if self.piat_n == 0:
                self.min_piat = self.max_piat = gap
            else:
                self.min_piat = min(self.min_piat, gap)
                self.max_piat = max(self.max_piat, gap)
            self.piat_n += 1
            self.sum_piat += gap
            self.sumsq_piat += gap * gap
        self.last_ts = ts_us

    @staticmethod
    def _stddev(n: int, total: int, total_sq: int) -> float:
        if n < 2:
            return 0.0
        var = (n * total_sq - total * total) / (n * n)
        return math.sqrt(var) if var > 0 else 0.0

    def export(self, prefix: str) -> dict[str, float]:
        n = self.packets
        out = {
            f"{prefix}_packets": n,
            f"{prefix}_bytes": self.bytes,
            f"{prefix}_payload_bytes": self.payload_bytes,
            f"{prefix}_min_ps": float(self.min_ps),
            f"{prefix}_mean_ps": self.sum_ps / n if n else 0.0,
            f"{prefix}_max_ps": float(self.max_ps),
            f"{prefix}_stddev_ps": self._stddev(n, self.sum_ps, self.sumsq_ps),
        }
        # PIAT features are defined (and non-zero) only from the second
        # packet of the scope onward.
        if n < 2:
            out.update(
                {
                    f"{prefix}_min_piat_ms": 0.0,
                    f"{prefix}_mean_piat_ms": 0.0,
                    f"{prefix}_max_piat_ms": 0.0,
                    f"{prefix}_stddev_piat_ms": 0.0,
                }
            )
        else:
            m = self.piat_n
            out.update(
                {
                    f"{prefix}_min_piat_ms": self.min_piat / 1000,
                    f"{prefix}_mean_piat_ms": self.sum_piat / (m * 1000),
                    f"{prefix}_max_piat_ms": self.max_piat / 1000,
                    f"{prefix}_stddev_piat_ms": self._stddev(
                        m, self.sum_piat, self.sumsq_piat
                    )
                    / 1000,
                }
            )
        return out


class _FlowState:
    """Mutable per-flow accumulation owned by one metering pass."""

    __slots__ = (
        "id",
        "anchor_src",
        "anchor_dst",
        "first_us",
        "last_us",
        "bidi",
        "s2d",
        "d2s",
        "flag_counts",
        "dir_flags",
        "pc_triggers",
        "fd_pending",
        "fd_lo_hi",
        "bc_pending",
    )

    def __init__(self, pkt: RawPacket, key: FlowKey, config: MeterConfig) -> None:
        self.id = FlowId.from_key(key, pkt.ts_us)
        self.anchor_src = (pkt.src_ip, pkt.src_port)
        self.anchor_dst = (pkt.dst_ip, pkt.dst_port)
        self.first_us = pkt.ts_us
        self.last_us = pkt.ts_us
        self.bidi = _ScopeStats()
        self.s2d = _ScopeStats()
        self.d2s = _ScopeStats()
        self.flag_counts = {name: 0 for name, _ in _FLAG_BITS}
        self.dir_flags = {
            "src2dst_fin_count": 0,
            "src2dst_rst_count": 0,
            "dst2src_fin_count": 0,
            "dst2src_rst_count": 0,
        }
        self.pc_triggers = config.pc_triggers
        self.fd_pending = sorted(config.fd_triggers_ms)
        self.fd_lo_hi = {
            t: ((1 - config.fd_tolerance) * t * 1000, (1 + config.fd_tolerance) * t * 1000)
            for t in config.fd_triggers_ms
        }
        self.bc_pending = sorted(config.byte_triggers)

    def add(self, pkt: RawPacket, snapshots: list[FlowSnapshot]) -> None:
        forward = (pkt.src_ip, pkt.src_port) == self.anchor_src
        self.last_us = pkt.ts_us
        self.bidi.add(pkt.ts_us, pkt.wire_len, pkt.payload_len)
        (self.s2d if forward else self.d2s).add(pkt.ts_us, pkt.wire_len, pkt.payload_len)
        if pkt.tcp_flags:
            for name, bit in _FLAG_BITS:
                if pkt.tcp_flags & bit:
                    self.flag_counts[name] += 1
            side = "src2dst" if forward else "dst2src"
            if pkt.tcp_flags & TCP_FIN:
                self.dir_flags[f"{side}_fin_count"] += 1
            if pkt.tcp_flags & TCP_RST:
                self.dir_flags[f"{side}_rst_count"] += 1

        if self.bidi.packets in self.pc_triggers:
            snapshots.append(self._snapshot(Trigger("pc", self.bidi.packets)))
        duration_us = self.last_us - self.first_us
        while self.fd_pending:
            target = self.fd_pending[0]
            lo, hi = self.fd_lo_hi[target]
            if duration_us < lo:
                break
            self.fd_pending.pop(0)
            if duration_us <= hi:
                snapshots.append(self._snapshot(Trigger("fd", target)))
            # else: overshot the tolerance band; target permanently missed
        while self.bc_pending and self.bidi.bytes >= self.bc_pending[0]:
            snapshots.append(self._snapshot(Trigger("bc", self.bc_pending.pop(0))))

    def _features(self) -> FeatureVector:
        values: dict[str, float] = {
            "duration_ms": (self.last_us - self.first_us) / 1000
        }
        values.update(self.bidi.export("bidirectional"))
        values.update(self.s2d.export("src2dst"))
        values.update(self.d2s.export("dst2src"))
        for name, _ in _FLAG_BITS:
            values[f"bidirectional_{name}_count"] = self.flag_counts[name]
        values.update(self.dir_flags)
        return FeatureVector.from_values(values)

    def _snapshot(self, trigger: Trigger) -> FlowSnapshot:
        return FlowSnapshot(
            parent_id=self.id,
            trigger=trigger,
            features=self._features(),
            exported_at_us=self.last_us,
        )

    def finish(self, reason: str) -> FlowRecord:
        return FlowRecord(
            id=self.id,
            direction_anchor=(self.anchor_src, self.anchor_dst),
            first_us=self.first_us,
            last_us=self.last_us,
            features=self._features(),
            expiration_reason=reason,
        )


def meter(
    trace: PacketTrace, config: MeterConfig | None = None
) -> tuple[list[FlowRecord], list[FlowSnapshot]]:
    """Assemble a sorted trace into complete flow records and snapshots.

    Per packet: an existing flow on the same key is expired first when the
    idle gap exceeds ``idle_timeout_s`` (the packet starts a fresh flow) or
    when the flow age reaches ``active_timeout_s``; the packet is then
    accumulated, PC/FD/BC snapshots fire, and a FIN or RST packet expires
    the flow after being counted. Remaining flows expire at end of trace.

    Records are returned ordered by (last_us, start_us, hash64); snapshots
    by (exported_at_us, parent start_us, parent hash64, trigger).

    Raises UnsortedTraceError on a timestamp regression.
    """
    if config is None:
        config = MeterConfig()
    idle_us = int(config.idle_timeout_s * 1_000_000)
    active_us = int(config.active_timeout_s * 1_000_000)

    live: dict[FlowKey, _FlowState] = {}
    records: list[FlowRecord] = []
    snapshots: list[FlowSnapshot] = []
    prev_ts: int | None = None

    for pkt in trace.packets:
        if prev_ts is not None and pkt.ts_us < prev_ts:
            raise UnsortedTraceError(
                f"timestamp regression at {pkt.ts_us} after {prev_ts}; reorder first"
            )
        prev_ts = pkt.ts_us

        key = FlowKey.from_packet(pkt)
        state = live.get(key)
        if state is not None and pkt.ts_us - state.last_us > idle_us:
            records.append(state.finish("idle"))
            state = None
        elif state is not None and pkt.ts_us - state.first_us >= active_us:
            records.append(state.finish("active"))
            state = None
        if state is None:
            state = _FlowState(pkt, key, config)
            live[key] = state

        state.add(pkt, snapshots)
        if config.fin_rst_expiration and pkt.tcp_flags & (TCP_FIN | TCP_RST):
            records.append(state.finish("fin_rst"))
            del live[key]

    for state in live.values():
        records.append(state.finish("end_of_trace"))

    records.sort(key=lambda r: (r.last_us, r.id.start_us, r.id.hash64))
    snapshots.sort(
        key=lambda s: (
            s.exported_at_us,
            s.parent_id.start_us,
            s.parent_id.hash64,
            s.trigger.sort_key(),
        )
    )
    return records, snapshots
