from __future__ import annotations

import importlib.resources as resources

import numpy as np
import pytest

from flowlab.meter import MeterConfig, meter
from flowlab.synth import SynthSpec, derive_rules, synth_trace
from flowlab.trace_io import PROTO_TCP, PROTO_UDP, PacketTrace, RawPacket


def corpus_path(name: str):
    return resources.files("flowlab").joinpath(f"data/{name}.json")


def random_packets(
    rng: np.random.Generator,
    n: int,
    n_endpoints: int = 6,
    t_span_us: int = 5_000_000,
    fin_rst_rate: float = 0.05,
    sorted_ts: bool = True,
) -> list[RawPacket]:
    """Random TCP/UDP packets over a small endpoint pool, so key collisions
    and both flow orientations occur."""
    ips = [f"10.0.0.{i + 1}" for i in range(n_endpoints)]
    ports = [1000 + 17 * i for i in range(n_endpoints)]
    ts = np.sort(rng.integers(0, t_span_us, size=n)) if sorted_ts else rng.integers(
        0, t_span_us, size=n
    )
    packets = []
    for i in range(n):
        a, b = rng.choice(n_endpoints, size=2, replace=False)
        proto = PROTO_TCP if rng.random() < 0.7 else PROTO_UDP
        if proto == PROTO_TCP:
            flags = 0x10
            if rng.random() < fin_rst_rate:
                flags |= 0x01 if rng.random() < 0.5 else 0x04
            if rng.random() < 0.3:
                flags |= 0x08
        else:
            flags = 0
        payload_len = int(rng.integers(0, 600))
        packets.append(
            RawPacket(
                ts_us=int(ts[i]),
                src_ip=ips[a],
                dst_ip=ips[b],
                src_port=ports[a],
                dst_port=ports[b],
                protocol=proto,
                tcp_flags=flags,
                payload_len=payload_len,
                wire_len=payload_len + (54 if proto == PROTO_TCP else 42),
                payload=bytes([i % 251]) * payload_len,
            )
        )
    return packets


def random_trace(rng: np.random.Generator, n: int, **kw) -> PacketTrace:
    return PacketTrace(packets=tuple(random_packets(rng, n, **kw)), source="test")


@pytest.fixture(scope="session")
def late_spec() -> SynthSpec:
    return SynthSpec.from_json(corpus_path("late_divergence"))


@pytest.fixture(scope="session")
def early_spec() -> SynthSpec:
    return SynthSpec.from_json(corpus_path("early_divergence"))


@pytest.fixture(scope="session")
def late_corpus(late_spec):
    """Metered late-divergence corpus: (records, snapshots, rules)."""
    trace, truth = synth_trace(late_spec, seed=42)
    records, snapshots = meter(trace, MeterConfig())
    return records, snapshots, derive_rules(late_spec), truth


@pytest.fixture(scope="session")
def early_corpus(early_spec):
    trace, truth = synth_trace(early_spec, seed=11)
    records, snapshots = meter(trace, MeterConfig())
    return records, snapshots, derive_rules(early_spec), truth
