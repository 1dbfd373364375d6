"""Independent reference implementations used as test oracles.

Everything here is deliberately written on a different plan from the
library: the meter is a two-pass group-then-replay implementation computing
statistics from stored per-packet lists, the pcap dissector reads fields
with int.from_bytes instead of struct, and the hash is a fresh FNV-1a
transcription. These exist so the streaming implementations can be checked
field for field against brute force.
"""

from __future__ import annotations

import math
import struct

import numpy as np
from dataclasses import dataclass, field

from flowlab.meter import (
    FeatureVector,
    FlowId,
    FlowKey,
    FlowRecord,
    FlowSnapshot,
    MeterConfig,
    Trigger,
)
from flowlab.trace_io import RawPacket


# ---------------------------------------------------------------------------
# Independent FNV-1a (64-bit)

def fnv1a64(data: bytes) -> int:
    h = 14695981039346656037
    for b in data:
        h = ((h ^ b) * 1099511628211) % 2**64
    return h


# ---------------------------------------------------------------------------
# Hand-rolled pcap builder and an independent dissector

def build_pcap(
    frames: list[tuple[int, bytes]],
    magic: int = 0xA1B2C3D4,
    big_endian: bool = False,
    linktype: int = 1,
    version: tuple[int, int] = (2, 4),
) -> bytes:
    """Assemble classic pcap bytes from (ts_us, frame) pairs."""
    e = ">" if big_endian else "<"
    out = struct.pack(e + "IHHiIII", magic, version[0], version[1], 0, 0, 65535, linktype)
    ns = magic == 0xA1B23C4D
    for ts_us, frame in frames:
        frac = (ts_us % 1_000_000) * (1000 if ns else 1)
        out += struct.pack(e + "IIII", ts_us // 1_000_000, frac, len(frame), len(frame))
        out += frame
    return out


def build_tcp_frame(
    src_ip: str,
    dst_ip: str,
    src_port: int,
    dst_port: int,
    flags: int,
    payload: bytes = b"",
) -> bytes:
    eth = bytes(12) + b"\x08\x00"
    src = bytes(int(o) for o in src_ip.split("."))
    dst = bytes(int(o) for o in dst_ip.split("."))
    total = 20 + 20 + len(payload)
    ip = (
        b"\x45\x00"
        + total.to_bytes(2, "big")
        + b"\x00\x00\x00\x00\x40\x06\x00\x00"
        + src
        + dst
    )
    tcp = (
        src_port.to_bytes(2, "big")
        + dst_port.to_bytes(2, "big")
        + bytes(8)
        + b"\x50"
        + bytes([flags])
        + b"\x20\x00\x00\x00\x00\x00"
    )
    return eth + ip + tcp + payload


def build_udp_frame(
    src_ip: str, dst_ip: str, src_port: int, dst_port: int, payload: bytes = b""
) -> bytes:
    eth = bytes(12) + b"\x08\x00"
    src = bytes(int(o) for o in src_ip.split("."))
    dst = bytes(int(o) for o in dst_ip.split("."))
    total = 20 + 8 + len(payload)
    ip = (
        b"\x45\x00"
        + total.to_bytes(2, "big")
        + b"\x00\x00\x00\x00\x40\x11\x00\x00"
        + src
        + dst
    )
    udp = (
        src_port.to_bytes(2, "big")
        + dst_port.to_bytes(2, "big")
        + (8 + len(payload)).to_bytes(2, "big")
        + b"\x00\x00"
    )
    return eth + ip + udp + payload


def dissect_pcap(blob: bytes) -> list[dict]:
    """Minimal independent dissector for little-endian microsecond pcap
    with Ethernet/IPv4 TCP or UDP packets (the shapes the tests build)."""
    assert int.from_bytes(blob[0:4], "little") == 0xA1B2C3D4
    pos = 24
    out = []
    while pos < len(blob):
        sec = int.from_bytes(blob[pos : pos + 4], "little")
        usec = int.from_bytes(blob[pos + 4 : pos + 8], "little")
        incl = int.from_bytes(blob[pos + 8 : pos + 12], "little")
        orig = int.from_bytes(blob[pos + 12 : pos + 16], "little")
        frame = blob[pos + 16 : pos + 16 + incl]
        pos += 16 + incl
        ethertype = int.from_bytes(frame[12:14], "big")
        if ethertype != 0x0800:
            out.append({"skip": True})
            continue
        ip = frame[14:]
        ihl = (ip[0] & 0x0F) * 4
        proto = ip[9]
        entry = {
            "skip": proto not in (6, 17),
            "ts_us": sec * 1_000_000 + usec,
            "src_ip": ".".join(str(b) for b in ip[12:16]),
            "dst_ip": ".".join(str(b) for b in ip[16:20]),
            "protocol": proto,
            "wire_len": orig,
        }
        transport = ip[ihl:]
        if proto == 6:
            entry["src_port"] = int.from_bytes(transport[0:2], "big")
            entry["dst_port"] = int.from_bytes(transport[2:4], "big")
            entry["tcp_flags"] = transport[13]
            data_off = (transport[12] >> 4) * 4
            total_len = int.from_bytes(ip[2:4], "big")
            entry["payload_len"] = total_len - ihl - data_off
        elif proto == 17:
            entry["src_port"] = int.from_bytes(transport[0:2], "big")
            entry["dst_port"] = int.from_bytes(transport[2:4], "big")
            entry["tcp_flags"] = 0
            entry["payload_len"] = int.from_bytes(transport[4:6], "big") - 8
        out.append(entry)
    return out


# ---------------------------------------------------------------------------
# Brute-force duplicate filter

def brute_force_dedup(packets: list[RawPacket], window_us: int) -> list[RawPacket]:
    kept = []
    for i, pkt in enumerate(packets):
        dup = any(
            packets[j].dedup_key() == pkt.dedup_key()
            and abs(pkt.ts_us - packets[j].ts_us) <= window_us
            for j in range(i)
        )
        if not dup:
            kept.append(pkt)
    return kept


# ---------------------------------------------------------------------------
# Naive two-pass reference meter

@dataclass
class _Segment:
    packets: list[RawPacket] = field(default_factory=list)
    reason: str = ""


def _segment_group(
    group: list[RawPacket], config: MeterConfig
) -> list[_Segment]:
    idle_us = int(config.idle_timeout_s * 1_000_000)
    active_us = int(config.active_timeout_s * 1_000_000)
    segments: list[_Segment] = []
    current: _Segment | None = None
    for pkt in group:
        if current is not None:
            if pkt.ts_us - current.packets[-1].ts_us > idle_us:
                current.reason = "idle"
                current = None
            elif pkt.ts_us - current.packets[0].ts_us >= active_us:
                current.reason = "active"
                current = None
        if current is None:
            current = _Segment()
            segments.append(current)
        current.packets.append(pkt)
        if config.fin_rst_expiration and pkt.tcp_flags & 0x05:
            current.reason = "fin_rst"
            current = None
    if current is not None:
        current.reason = "end_of_trace"
    return segments


def _mean(values) -> float:
    return float(np.mean(values)) if len(values) else 0.0


def _pstdev(values) -> float:
    # textbook population standard deviation over the stored values
    return float(np.std(values)) if len(values) >= 2 else 0.0


def _scope_features(prefix: str, pkts: list[RawPacket]) -> dict:
    sizes = np.array([p.wire_len for p in pkts], dtype=float)
    out = {
        f"{prefix}_packets": len(pkts),
        f"{prefix}_bytes": sum(p.wire_len for p in pkts),
        f"{prefix}_payload_bytes": sum(p.payload_len for p in pkts),
        f"{prefix}_min_ps": float(sizes.min()) if len(sizes) else 0.0,
        f"{prefix}_mean_ps": _mean(sizes),
        f"{prefix}_max_ps": float(sizes.max()) if len(sizes) else 0.0,
        f"{prefix}_stddev_ps": _pstdev(sizes),
    }
    gaps = np.array(
        [(b.ts_us - a.ts_us) / 1000 for a, b in zip(pkts, pkts[1:])], dtype=float
    )
    out[f"{prefix}_min_piat_ms"] = float(gaps.min()) if len(gaps) else 0.0
    out[f"{prefix}_mean_piat_ms"] = _mean(gaps)
    out[f"{prefix}_max_piat_ms"] = float(gaps.max()) if len(gaps) else 0.0
    out[f"{prefix}_stddev_piat_ms"] = _pstdev(gaps)
    return out


_FLAGS = [
    ("syn", 0x02),
    ("fin", 0x01),
    ("rst", 0x04),
    ("psh", 0x08),
    ("ack", 0x10),
    ("urg", 0x20),
    ("ece", 0x40),
    ("cwr", 0x80),
]


def _features_of(pkts: list[RawPacket]) -> FeatureVector:
    anchor = (pkts[0].src_ip, pkts[0].src_port)
    fwd = [p for p in pkts if (p.src_ip, p.src_port) == anchor]
    bwd = [p for p in pkts if (p.src_ip, p.src_port) != anchor]
    values = {"duration_ms": (pkts[-1].ts_us - pkts[0].ts_us) / 1000}
    values.update(_scope_features("bidirectional", pkts))
    values.update(_scope_features("src2dst", fwd))
    values.update(_scope_features("dst2src", bwd))
    for name, bit in _FLAGS:
        values[f"bidirectional_{name}_count"] = sum(
            1 for p in pkts if p.tcp_flags & bit
        )
    values["src2dst_fin_count"] = sum(1 for p in fwd if p.tcp_flags & 0x01)
    values["src2dst_rst_count"] = sum(1 for p in fwd if p.tcp_flags & 0x04)
    values["dst2src_fin_count"] = sum(1 for p in bwd if p.tcp_flags & 0x01)
    values["dst2src_rst_count"] = sum(1 for p in bwd if p.tcp_flags & 0x04)
    return FeatureVector.from_values(values)


def _list_stats(prefix: str, sizes: list[int], ts: list[int]) -> dict:
    n = len(sizes)
    out = {
        f"{prefix}_packets": n,
        f"{prefix}_bytes": sum(sizes),
        f"{prefix}_min_ps": float(min(sizes)) if sizes else 0.0,
        f"{prefix}_mean_ps": sum(sizes) / n if n else 0.0,
        f"{prefix}_max_ps": float(max(sizes)) if sizes else 0.0,
        f"{prefix}_stddev_ps": _list_pstdev(sizes),
    }
    gaps = [(b - a) / 1000 for a, b in zip(ts, ts[1:])]
    out[f"{prefix}_min_piat_ms"] = min(gaps) if gaps else 0.0
    out[f"{prefix}_mean_piat_ms"] = sum(gaps) / len(gaps) if gaps else 0.0
    out[f"{prefix}_max_piat_ms"] = max(gaps) if gaps else 0.0
    out[f"{prefix}_stddev_piat_ms"] = _list_pstdev(gaps)
    return out


def _list_pstdev(values) -> float:
    # textbook two-pass population standard deviation
    if len(values) < 2:
        return 0.0
    mean = sum(values) / len(values)
    return math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))


class _SegmentArrays:
    """Per-segment columns pre-split by direction so prefix features can be
    recomputed directly from stored values for any prefix length."""

    def __init__(self, pkts: list[RawPacket]):
        anchor = (pkts[0].src_ip, pkts[0].src_port)
        self.ts = [p.ts_us for p in pkts]
        self.wire = [p.wire_len for p in pkts]
        self.payload = [p.payload_len for p in pkts]
        self.flags = [p.tcp_flags for p in pkts]
        fwd = [(p.src_ip, p.src_port) == anchor for p in pkts]
        # fwd_rank[i] = forward packets among the first i packets
        self.fwd_rank = [0]
        for f in fwd:
            self.fwd_rank.append(self.fwd_rank[-1] + (1 if f else 0))
        self.ts_fwd = [t for t, f in zip(self.ts, fwd) if f]
        self.ts_bwd = [t for t, f in zip(self.ts, fwd) if not f]
        self.wire_fwd = [w for w, f in zip(self.wire, fwd) if f]
        self.wire_bwd = [w for w, f in zip(self.wire, fwd) if not f]
        self.payload_fwd = [p for p, f in zip(self.payload, fwd) if f]
        self.payload_bwd = [p for p, f in zip(self.payload, fwd) if not f]
        self.flags_fwd = [x for x, f in zip(self.flags, fwd) if f]
        self.flags_bwd = [x for x, f in zip(self.flags, fwd) if not f]

    def prefix_features(self, n: int) -> FeatureVector:
        k = self.fwd_rank[n]  # forward packets in the prefix
        j = n - k
        values = {"duration_ms": (self.ts[n - 1] - self.ts[0]) / 1000}
        values.update(_list_stats("bidirectional", self.wire[:n], self.ts[:n]))
        values["bidirectional_payload_bytes"] = sum(self.payload[:n])
        values.update(_list_stats("src2dst", self.wire_fwd[:k], self.ts_fwd[:k]))
        values["src2dst_payload_bytes"] = sum(self.payload_fwd[:k])
        values.update(_list_stats("dst2src", self.wire_bwd[:j], self.ts_bwd[:j]))
        values["dst2src_payload_bytes"] = sum(self.payload_bwd[:j])
        for name, bit in _FLAGS:
            values[f"bidirectional_{name}_count"] = sum(
                1 for x in self.flags[:n] if x & bit
            )
        values["src2dst_fin_count"] = sum(1 for x in self.flags_fwd[:k] if x & 0x01)
        values["src2dst_rst_count"] = sum(1 for x in self.flags_fwd[:k] if x & 0x04)
        values["dst2src_fin_count"] = sum(1 for x in self.flags_bwd[:j] if x & 0x01)
        values["dst2src_rst_count"] = sum(1 for x in self.flags_bwd[:j] if x & 0x04)
        return FeatureVector.from_values(values)


def reference_meter(
    packets: list[RawPacket], config: MeterConfig
) -> tuple[list[FlowRecord], list[FlowSnapshot]]:
    """Group by key, replay expiration rules per group, compute features
    from stored packet lists, enumerate snapshots over prefixes."""
    groups: dict[FlowKey, list[RawPacket]] = {}
    for pkt in packets:
        groups.setdefault(FlowKey.from_packet(pkt), []).append(pkt)

    records: list[FlowRecord] = []
    snapshots: list[FlowSnapshot] = []
    for key, group in groups.items():
        for seg in _segment_group(group, config):
            pkts = seg.packets
            fid = FlowId.from_key(key, pkts[0].ts_us)
            records.append(
                FlowRecord(
                    id=fid,
                    direction_anchor=(
                        (pkts[0].src_ip, pkts[0].src_port),
                        (pkts[0].dst_ip, pkts[0].dst_port),
                    ),
                    first_us=pkts[0].ts_us,
                    last_us=pkts[-1].ts_us,
                    features=_features_of(pkts),
                    expiration_reason=seg.reason,
                )
            )
            arrays = _SegmentArrays(pkts)
            fd_pending = sorted(config.fd_triggers_ms)
            bc_pending = sorted(config.byte_triggers)
            for n in range(1, len(pkts) + 1):
                exported = pkts[n - 1].ts_us
                if n in config.pc_triggers:
                    snapshots.append(
                        FlowSnapshot(
                            fid, Trigger("pc", n), arrays.prefix_features(n), exported
                        )
                    )
                duration_us = exported - pkts[0].ts_us
                while fd_pending:
                    t = fd_pending[0]
                    if duration_us < (1 - config.fd_tolerance) * t * 1000:
                        break
                    fd_pending.pop(0)
                    if duration_us <= (1 + config.fd_tolerance) * t * 1000:
                        snapshots.append(
                            FlowSnapshot(
                                fid, Trigger("fd", t), arrays.prefix_features(n), exported
                            )
                        )
                total_bytes = sum(p.wire_len for p in pkts[:n])
                while bc_pending and total_bytes >= bc_pending[0]:
                    snapshots.append(
                        FlowSnapshot(
                            fid,
                            Trigger("bc", bc_pending.pop(0)),
                            arrays.prefix_features(n),
                            exported,
                        )
                    )

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


# ---------------------------------------------------------------------------
# Feature comparison

def features_close(a: FeatureVector, b: FeatureVector, rel: float = 1e-9) -> bool:
    for x, y in zip(a.as_tuple(), b.as_tuple()):
        if isinstance(x, int) and isinstance(y, int):
            if x != y:
                return False
        else:
            scale = max(abs(x), abs(y), 1.0)
            if abs(x - y) > rel * scale:
                return False
    return True


def assert_meter_equal(actual, expected, rel: float = 1e-9) -> None:
    a_records, a_snaps = actual
    e_records, e_snaps = expected
    assert len(a_records) == len(e_records), (len(a_records), len(e_records))
    for ar, er in zip(a_records, e_records):
        assert ar.id == er.id
        assert ar.direction_anchor == er.direction_anchor
        assert ar.first_us == er.first_us
        assert ar.last_us == er.last_us
        assert ar.expiration_reason == er.expiration_reason
        assert features_close(ar.features, er.features, rel), (ar, er)
    assert len(a_snaps) == len(e_snaps), (len(a_snaps), len(e_snaps))
    for asnap, esnap in zip(a_snaps, e_snaps):
        assert asnap.parent_id == esnap.parent_id
        assert asnap.trigger == esnap.trigger
        assert asnap.exported_at_us == esnap.exported_at_us
        assert features_close(asnap.features, esnap.features, rel), (asnap, esnap)
