"""Trace input and replay: pcap reader/writer, deterministic synthetic
workload generation, and the discrete-event scheduler that drives the
switch, detection engine, control plane and collector on one virtual clock.

Replay is fully deterministic: identical (trace, seed, config) produce
byte-identical collector and metrics output. Virtual time never sleeps
unless a positive speed factor asks for wall-clock pacing.
"""

from __future__ import annotations

import heapq
import itertools
import math
import random
import struct
import time as _time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, NamedTuple, Optional

from . import packet
from .collector import Collector, TcpResponder
from .control import ControlPlane, SouthboundChannel
from .core import (
    PROTO_ICMP,
    PROTO_TCP,
    PROTO_UDP,
    NetworkConfig,
    PacketRecord,
    TcpFlags,
)
from .fsd import CollectItem, FsdEngine
from .switchsim import LatencyModel, SwitchSim
from .util import mix64

# ---------------------------------------------------------------------------
# pcap file format
# ---------------------------------------------------------------------------

MAGIC_USEC = 0xA1B2C3D4
MAGIC_NSEC = 0xA1B23C4D
LINKTYPE_ETHERNET = 1


class PcapError(Exception):
    pass


class BadMagic(PcapError):
    pass


class TruncatedFile(PcapError):
    pass


class NonEthernetLink(PcapError):
    pass


class PcapReader:
    """Streaming classic-pcap reader; unparseable frames are skipped and counted."""

    def __init__(self, path: str):
        self.path = path
        self.skipped = 0
        self._fh = open(path, "rb")
        header = self._fh.read(24)
        if len(header) < 24:
            self._fh.close()
            raise TruncatedFile(f"{path}: missing global header")
        magic = struct.unpack("<I", header[:4])[0]
        if magic == MAGIC_USEC:
            self._endian, self._scale = "<", 1e-6
        elif magic == MAGIC_NSEC:
            self._endian, self._scale = "<", 1e-9
        else:
            magic_be = struct.unpack(">I", header[:4])[0]
            if magic_be == MAGIC_USEC:
                self._endian, self._scale = ">", 1e-6
            elif magic_be == MAGIC_NSEC:
                self._endian, self._scale = ">", 1e-9
            else:
                self._fh.close()
                raise BadMagic(f"{path}: magic 0x{magic:08x} is not a pcap file")
        _vmaj, _vmin, _zone, _sig, _snap, network = struct.unpack(
            self._endian + "HHiIII", header[4:]
        )
        if network != LINKTYPE_ETHERNET:
            self._fh.close()
            raise NonEthernetLink(f"{path}: link type {network}, expected Ethernet (1)")

    def __iter__(self) -> Iterator[PacketRecord]:
        rec_fmt = self._endian + "IIII"
        while True:
            header = self._fh.read(16)
            if not header:
                return
            if len(header) < 16:
                raise TruncatedFile(f"{self.path}: truncated record header")
            ts_sec, ts_frac, incl_len, _orig_len = struct.unpack(rec_fmt, header)
            data = self._fh.read(incl_len)
            if len(data) < incl_len:
                raise TruncatedFile(f"{self.path}: truncated packet data")
            rec = packet.parse_frame(ts_sec + ts_frac * self._scale, data)
            if rec is None:
                self.skipped += 1
                continue
            yield rec

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_pcap(path: str) -> Iterator[PacketRecord]:
    reader = PcapReader(path)
    try:
        yield from reader
    finally:
        reader.close()


def write_pcap(path: str, records: Iterable[PacketRecord], snaplen: int = 65_535) -> int:
    """Write records as a classic microsecond pcap; returns the packet count."""
    count = 0
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IHHiIII", MAGIC_USEC, 2, 4, 0, 0, snaplen, LINKTYPE_ETHERNET))
        for rec in records:
            sec = int(rec.ts)
            usec = int(round((rec.ts - sec) * 1e6))
            if usec >= 1_000_000:
                sec += 1
                usec -= 1_000_000
            data = rec.raw[:snaplen]
            fh.write(struct.pack("<IIII", sec, usec, len(data), len(rec.raw)))
            fh.write(data)
            count += 1
    return count


# ---------------------------------------------------------------------------
# synthetic workload
# ---------------------------------------------------------------------------


class DelaySpec:
    """Response-delay distribution: constant/uniform/exponential/lognormal or a
    weighted mixture, written e.g. "mix:0.999@uniform:0.001,0.2;0.001@uniform:1.5,3".
    """

    def __init__(self, kind: str, params: tuple = (), parts: Optional[list] = None):
        self.kind = kind
        self.params = params
        self.parts = parts or []  # list of (weight, DelaySpec)

    @classmethod
    def parse(cls, text: str) -> "DelaySpec":
        text = text.strip()
        kind, _, rest = text.partition(":")
        kind = kind.strip().lower()
        if kind == "mix":
            parts = []
            for chunk in rest.split(";"):
                weight_text, _, sub = chunk.partition("@")
                parts.append((float(weight_text), cls.parse(sub)))
            total = sum(w for w, _ in parts)
            if not math.isclose(total, 1.0, abs_tol=1e-9):
                raise ValueError(f"mixture weights sum to {total}, expected 1")
            return cls("mix", parts=parts)
        params = tuple(float(x) for x in rest.split(",")) if rest else ()
        if kind == "constant" and len(params) == 1:
            return cls(kind, params)
        if kind == "uniform" and len(params) == 2:
            return cls(kind, params)
        if kind == "exponential" and len(params) == 1:
            return cls(kind, params)
        if kind == "lognormal" and len(params) == 2:
            return cls(kind, params)
        raise ValueError(f"bad delay spec {text!r}")

    def sample(self, rng: random.Random) -> float:
        if self.kind == "constant":
            return self.params[0]
        if self.kind == "uniform":
            return rng.uniform(*self.params)
        if self.kind == "exponential":
            return rng.expovariate(1.0 / self.params[0])
        if self.kind == "lognormal":
            return rng.lognormvariate(*self.params)
        r = rng.random()
        acc = 0.0
        for weight, sub in self.parts:
            acc += weight
            if r < acc:
                return sub.sample(rng)
        return self.parts[-1][1].sample(rng)

    def __repr__(self) -> str:
        if self.kind == "mix":
            inner = ";".join(f"{w}@{s!r}" for w, s in self.parts)
            return f"mix:{inner}"
        return f"{self.kind}:{','.join(str(p) for p in self.params)}"


_DEFAULT_IN_DELAY = DelaySpec.parse("mix:0.9@uniform:0.0005,0.01;0.1@uniform:0.01,0.3")
_DEFAULT_OUT_DELAY = DelaySpec.parse("mix:0.7@uniform:0.002,0.05;0.3@uniform:0.05,0.6")

_COMMON_PORTS = (80, 443, 53, 22, 23, 123, 445, 3389, 8080, 8443)


@dataclass
class WorkloadSpec:
    """Parameters of the synthetic flow generator. Fractions apply per flow."""

    n_flows: int = 1000
    flow_rate: float = 200.0
    answered_fraction: float = 0.7
    icmp_error_fraction: float = 0.05
    duplicate_prob: float = 0.2
    duplicate_delay: DelaySpec = field(default_factory=lambda: DelaySpec.parse("uniform:0.05,0.6"))
    tcp_weight: float = 0.6
    udp_weight: float = 0.3
    icmp_weight: float = 0.1
    incoming_fraction: float = 0.6
    delay_incoming: DelaySpec = field(default_factory=lambda: _DEFAULT_IN_DELAY)
    delay_outgoing: DelaySpec = field(default_factory=lambda: _DEFAULT_OUT_DELAY)
    follow_up_packets: int = 0
    follow_up_start: float = 0.3
    follow_up_spacing: float = 0.08
    whitelist_fraction: float = 0.0
    whitelist_services: list = field(default_factory=list)  # [(ip, port)]
    impersonated_fraction: float = 0.0
    impersonated_dialogue: bool = True
    unique_services: bool = False
    internal_hosts: int = 64
    external_hosts: int = 256
    payload_min: int = 16
    payload_max: int = 96
    start_time: float = 0.0

    def validate(self) -> None:
        if self.n_flows <= 0 or self.flow_rate <= 0:
            raise ValueError("n_flows and flow_rate must be positive")
        fractions = (
            self.answered_fraction,
            self.icmp_error_fraction,
            self.duplicate_prob,
            self.incoming_fraction,
            self.whitelist_fraction,
            self.impersonated_fraction,
        )
        for frac in fractions:
            if not 0.0 <= frac <= 1.0:
                raise ValueError(f"fraction {frac} outside [0, 1]")
        if self.answered_fraction + self.icmp_error_fraction > 1.0 + 1e-9:
            raise ValueError("answered_fraction + icmp_error_fraction exceed 1")
        if self.whitelist_fraction > 0 and not self.whitelist_services:
            raise ValueError("whitelist_fraction set but no whitelist_services given")
        if self.tcp_weight + self.udp_weight + self.icmp_weight <= 0:
            raise ValueError("protocol weights sum to zero")
        if self.payload_min < 0 or self.payload_max < self.payload_min:
            raise ValueError("bad payload length range")


class FlowTruth(NamedTuple):
    """Ground truth for one generated flow."""

    idx: int
    kind: str  # answered | unanswered | icmp_error | whitelist | impersonated
    proto: int
    t0: float
    src_ip: int
    src_port: int
    dst_ip: int
    dst_port: int
    delay: float  # response delay; inf when never answered
    dup_times: tuple
    follow_count: int


def _internal_pool(cfg: NetworkConfig, limit: int, rng: random.Random) -> list[int]:
    pool: list[int] = []
    for start, end, _base in cfg._index_base:
        pool.extend(range(start, min(end, start + limit) + 1))
        if len(pool) >= limit * 4:
            break
    if len(pool) > limit:
        pool = rng.sample(pool, limit)
        pool.sort()
    return pool


def _external_pool(cfg: NetworkConfig, count: int, rng: random.Random) -> list[int]:
    pool: list[int] = []
    while len(pool) < count:
        ip = rng.randrange(0x01000000, 0xDF000000)
        if cfg.resolve_internal(ip) is None:
            pool.append(ip)
    return pool


def plan_flows(spec: WorkloadSpec, seed: int, cfg: NetworkConfig) -> list[FlowTruth]:
    """Draw every flow's parameters in arrival order; deterministic per seed."""
    spec.validate()
    rng = random.Random(mix64(seed))
    internal = _internal_pool(cfg, spec.internal_hosts, rng)
    external = _external_pool(cfg, spec.external_hosts, rng)
    imp_endpoints = sorted(cfg.impersonation_set)
    flows: list[FlowTruth] = []
    t = spec.start_time
    svc_counter = 0  # when unique_services: one fresh (ip, port) per flow
    icmp_counter = 0  # echo identifiers must be globally unique as well
    for idx in range(spec.n_flows):
        t += rng.expovariate(spec.flow_rate)
        pick = rng.random()
        if pick < spec.whitelist_fraction:
            kind = "whitelist"
        elif pick < spec.whitelist_fraction + spec.impersonated_fraction and imp_endpoints:
            kind = "impersonated"
        else:
            inner = rng.random()
            if inner < spec.answered_fraction:
                kind = "answered"
            elif inner < spec.answered_fraction + spec.icmp_error_fraction:
                kind = "icmp_error"
            else:
                kind = "unanswered"
        src_port = rng.randrange(20_000, 60_000)
        if kind == "whitelist":
            proto = PROTO_TCP
            wl_ip, wl_port = spec.whitelist_services[rng.randrange(len(spec.whitelist_services))]
            src_ip, dst_ip, dst_port = rng.choice(internal), wl_ip, wl_port
            incoming = False
        elif kind == "impersonated":
            ip, port, proto = imp_endpoints[rng.randrange(len(imp_endpoints))]
            src_ip, dst_ip, dst_port = rng.choice(external), ip, port
            incoming = True
        else:
            roll = rng.random() * (spec.tcp_weight + spec.udp_weight + spec.icmp_weight)
            if roll < spec.tcp_weight:
                proto = PROTO_TCP
            elif roll < spec.tcp_weight + spec.udp_weight:
                proto = PROTO_UDP
            else:
                proto = PROTO_ICMP
            if kind == "icmp_error":
                proto = PROTO_UDP
            incoming = rng.random() < spec.incoming_fraction
            if spec.unique_services:
                pool = internal if incoming else external
                dst_ip = pool[svc_counter % len(pool)]
                dst_port = 1024 + svc_counter // len(pool)
                if dst_port > 0xFFFF:
                    raise ValueError("unique_services exhausted the port space")
                svc_counter += 1
                src_ip = rng.choice(external if incoming else internal)
            else:
                if incoming:
                    src_ip, dst_ip = rng.choice(external), rng.choice(internal)
                else:
                    src_ip, dst_ip = rng.choice(internal), rng.choice(external)
                dst_port = (
                    rng.choice(_COMMON_PORTS) if rng.random() < 0.7
                    else rng.randrange(1024, 65_535)
                )
        if proto == PROTO_ICMP:
            # the echo identifier doubles as the port pair, so it is also the
            # rule endpoint port; unique_services needs it distinct across
            # flows in either direction (a shared identifier on one internal
            # host would let one flow's rules swallow another flow)
            if spec.unique_services:
                ident = 33000 + icmp_counter
                icmp_counter += 1
                if ident > 0xFFFF:
                    raise ValueError("unique_services exhausted the echo identifier space")
            else:
                ident = (idx % 0xFFFE) + 1
            src_port = dst_port = ident
        delay = math.inf
        if kind == "answered":
            dist = spec.delay_incoming if incoming else spec.delay_outgoing
            delay = max(1e-6, dist.sample(rng))
        elif kind == "icmp_error":
            delay = max(1e-6, rng.uniform(0.001, 0.2))
        dup_times: tuple = ()
        if kind in ("unanswered", "answered", "icmp_error") and rng.random() < spec.duplicate_prob:
            dup = t + max(1e-6, spec.duplicate_delay.sample(rng))
            if kind == "answered":
                dup = min(dup, t + delay * 0.9)  # retransmissions precede the answer
            dup_times = (dup,)
        follow = spec.follow_up_packets if kind in ("answered", "whitelist") else 0
        flows.append(
            FlowTruth(idx, kind, proto, t, src_ip, src_port, dst_ip, dst_port,
                      delay, dup_times, follow)
        )
    return flows


def _first_packet(truth: FlowTruth, ts: float, rng: random.Random, spec: WorkloadSpec) -> PacketRecord:
    payload = rng.randbytes(rng.randint(spec.payload_min, spec.payload_max))
    if truth.proto == PROTO_TCP:
        return packet.build_tcp_packet(
            ts, truth.src_ip, truth.dst_ip, truth.src_port, truth.dst_port,
            TcpFlags.SYN, seq=rng.randrange(1 << 32),
        )
    if truth.proto == PROTO_UDP:
        return packet.build_udp_packet(
            ts, truth.src_ip, truth.dst_ip, truth.src_port, truth.dst_port, payload
        )
    return packet.build_icmp_packet(
        ts, truth.src_ip, truth.dst_ip, 8, identifier=truth.src_port, payload=payload
    )


def flow_packets(truth: FlowTruth, spec: WorkloadSpec, seed: int) -> list[PacketRecord]:
    """All packets of one flow, time ordered. Uses a per-flow RNG so the
    result does not depend on generation interleaving."""
    rng = random.Random(mix64(seed ^ (truth.idx * 0x9E37)))
    pkts = [_first_packet(truth, truth.t0, rng, spec)]
    for dup_ts in truth.dup_times:
        pkts.append(_first_packet(truth, dup_ts, rng, spec))
    if truth.kind == "answered":
        t_resp = truth.t0 + truth.delay
        if truth.proto == PROTO_TCP:
            resp = packet.build_tcp_packet(
                t_resp, truth.dst_ip, truth.src_ip, truth.dst_port, truth.src_port,
                TcpFlags.SYN | TcpFlags.ACK, seq=rng.randrange(1 << 32),
            )
        elif truth.proto == PROTO_UDP:
            resp = packet.build_udp_packet(
                t_resp, truth.dst_ip, truth.src_ip, truth.dst_port, truth.src_port,
                rng.randbytes(rng.randint(spec.payload_min, spec.payload_max)),
            )
        else:
            resp = packet.build_icmp_packet(
                t_resp, truth.dst_ip, truth.src_ip, 0, identifier=truth.src_port,
                payload=rng.randbytes(16),
            )
        pkts.append(resp)
        t = t_resp + spec.follow_up_start
        for i in range(truth.follow_count):
            outbound = i % 2 == 0
            payload = rng.randbytes(rng.randint(spec.payload_min, spec.payload_max))
            if truth.proto == PROTO_TCP:
                args = (truth.src_ip, truth.dst_ip, truth.src_port, truth.dst_port) if outbound \
                    else (truth.dst_ip, truth.src_ip, truth.dst_port, truth.src_port)
                pkts.append(packet.build_tcp_packet(
                    t, *args, TcpFlags.ACK | TcpFlags.PSH, payload=payload))
            elif truth.proto == PROTO_UDP:
                args = (truth.src_ip, truth.dst_ip, truth.src_port, truth.dst_port) if outbound \
                    else (truth.dst_ip, truth.src_ip, truth.dst_port, truth.src_port)
                pkts.append(packet.build_udp_packet(t, *args, payload))
            else:
                a, b = (truth.src_ip, truth.dst_ip) if outbound else (truth.dst_ip, truth.src_ip)
                pkts.append(packet.build_icmp_packet(
                    t, a, b, 8 if outbound else 0, identifier=truth.src_port, payload=payload))
            t += spec.follow_up_spacing
    elif truth.kind == "icmp_error":
        pkts.append(packet.build_icmp_error(
            truth.t0 + truth.delay, truth.dst_ip, truth.src_ip, pkts[0]))
    elif truth.kind == "whitelist":
        t = truth.t0 + spec.follow_up_start
        for _ in range(truth.follow_count):
            pkts.append(packet.build_tcp_packet(
                t, truth.src_ip, truth.dst_ip, truth.src_port, truth.dst_port,
                TcpFlags.ACK | TcpFlags.PSH,
                payload=rng.randbytes(rng.randint(spec.payload_min, spec.payload_max))))
            t += spec.follow_up_spacing
    elif truth.kind == "impersonated" and spec.impersonated_dialogue:
        seq0 = rng.randrange(1 << 30)
        pkts.append(packet.build_tcp_packet(
            truth.t0 + 0.25, truth.src_ip, truth.dst_ip, truth.src_port, truth.dst_port,
            TcpFlags.ACK, seq=seq0 + 1))
        pkts.append(packet.build_tcp_packet(
            truth.t0 + 0.5, truth.src_ip, truth.dst_ip, truth.src_port, truth.dst_port,
            TcpFlags.ACK | TcpFlags.PSH, seq=seq0 + 1,
            payload=rng.randbytes(rng.randint(spec.payload_min, spec.payload_max))))
    pkts.sort(key=lambda p: p.ts)
    return pkts


def generate_workload(spec: WorkloadSpec, seed: int, cfg: NetworkConfig) -> Iterator[PacketRecord]:
    """Merged, time-ordered packet stream for the whole workload."""
    flows = plan_flows(spec, seed, cfg)
    streams = (flow_packets(truth, spec, seed) for truth in flows)
    return heapq.merge(*streams, key=lambda p: p.ts)


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

_PRIO_PKT = 0
_PRIO_CHECK = 1
_PRIO_TICK = 2
_PRIO_DRAIN = 3
_PRIO_CLEAN = 4
_PRIO_METRICS = 5


@dataclass
class PipelineOptions:
    """Component sizing and replay cadence, complementing NetworkConfig."""

    switch_capacity: int = 100_000
    mirror_capacity: int = 65_536
    notify_capacity: int = 65_536
    hash_buckets: int = 1 << 20
    ring_capacity: int = 65_536
    hash_seed: int = 0
    store_duplicates: bool = False
    control_queue_capacity: int = 1 << 20
    latency_a: float = 2e-3
    latency_b: float = 1e-5
    latency_c: float = 1e-8
    clean_interval: float = 0.1
    metrics_interval: float = 1.0
    control_period: float = 0.001
    responder_enabled: bool = True
    responder_seed: int = 1


@dataclass
class RunSummary:
    packets_in: int
    duration: float
    switch: dict
    fsd: dict
    control: dict
    collected: int
    collected_by_reason: dict
    responder_replies: int
    transcripts: int
    filtering_efficiency: float
    whitelist_share: float

    def render(self) -> str:
        lines = [
            f"packets_in {self.packets_in}",
            f"virtual_duration {self.duration:.6f}",
            f"collected {self.collected}",
        ]
        for reason, count in sorted(self.collected_by_reason.items()):
            lines.append(f"collected_{reason} {count}")
        lines.append(f"responder_replies {self.responder_replies}")
        lines.append(f"transcripts {self.transcripts}")
        lines.append(f"filtering_efficiency {self.filtering_efficiency:.4f}")
        lines.append(f"whitelist_share {self.whitelist_share:.4f}")
        for name, group in (("switch", self.switch), ("fsd", self.fsd), ("control", self.control)):
            for key, value in group.items():
                lines.append(f"{name}_{key} {value}")
        return "\n".join(lines) + "\n"


EventLogger = Callable[[float, str], None]


class Pipeline:
    """Wires every stage together and owns the virtual clock.

    Dispatch order at equal timestamps is fixed: packet arrival, expiry
    check, switch idle tick, control drain, hash cleaning, metrics. The
    expiry check is scheduled on the p_d grid but only at instants where it
    can make progress (head expiry due or recyclable), which is
    observationally equivalent to checking every p_d.
    """

    def __init__(
        self,
        cfg: NetworkConfig,
        whitelist: Optional[set] = None,
        options: Optional[PipelineOptions] = None,
        event_logger: Optional[EventLogger] = None,
    ):
        self.cfg = cfg
        self.opts = options or PipelineOptions()
        self.log = event_logger
        self.switch = SwitchSim(
            cfg,
            whitelist=whitelist,
            capacity=self.opts.switch_capacity,
            mirror_capacity=self.opts.mirror_capacity,
            notify_capacity=self.opts.notify_capacity,
            latency_model=LatencyModel(self.opts.latency_a, self.opts.latency_b, self.opts.latency_c),
        )
        channel = SouthboundChannel(self.switch)
        self.fsd = FsdEngine(
            cfg,
            rule_sink=None,
            collect_sink=self._on_collect,
            hash_buckets=self.opts.hash_buckets,
            ring_capacity=self.opts.ring_capacity,
            hash_seed=self.opts.hash_seed,
            store_duplicates=self.opts.store_duplicates,
        )
        self.control = ControlPlane(
            cfg,
            channel,
            sync_sink=self.fsd.liveness_rule_sync,
            queue_capacity=self.opts.control_queue_capacity,
            whitelist=self.switch.whitelist,
        )
        self.fsd.rule_sink = self.control.enqueue_install
        self.responder = TcpResponder(cfg, seed=self.opts.responder_seed) if self.opts.responder_enabled else None
        self.collector = Collector(cfg, liveness_fn=self.fsd.is_alive)
        self.metrics_rows: list[dict] = []
        self.responder_replies: list[PacketRecord] = []
        self.buffering_times: list[float] = []
        self._packets_in = 0
        self._check_token = 0
        self._check_at: Optional[float] = None

    # -- sinks ---------------------------------------------------------------

    def _on_collect(self, item: CollectItem) -> None:
        self.collector.record(item.pkt, item.reason, item.collected_at)
        self.buffering_times.append(item.collected_at - item.t_arr)
        if self.log:
            p = item.pkt
            self.log(item.collected_at,
                     f"collect {item.reason.value} {p.src_ip:08x}:{p.src_port}>"
                     f"{p.dst_ip:08x}:{p.dst_port}/{p.proto}")
        if (
            self.responder is not None
            and item.pkt.proto == PROTO_TCP
            and self.cfg.is_impersonated_endpoint(item.pkt.dst_ip, item.pkt.dst_port, item.pkt.proto)
        ):
            reply = self.responder.step(item.pkt, item.collected_at)
            if reply is not None:
                self.responder_replies.append(reply)
                if self.log:
                    self.log(item.collected_at, f"respond flags={reply.tcp_flags}")

    # -- scheduling ----------------------------------------------------------

    def _schedule_check(self, heap, seq, anchor: float, min_time: float) -> None:
        hint = self.fsd.next_check_hint()
        if hint is None:
            return
        target = max(hint, min_time)
        p_d = self.cfg.timers.p_d
        n = max(0, math.ceil((target - anchor) / p_d - 1e-12))
        at = anchor + n * p_d
        while at < target - 1e-15:
            n += 1
            at = anchor + n * p_d
        if self._check_at is not None and self._check_at <= at:
            return
        self._check_token += 1
        self._check_at = at
        heapq.heappush(heap, (at, _PRIO_CHECK, next(seq), "check", self._check_token))

    # -- main loop -----------------------------------------------------------

    def run(
        self,
        stream: Iterable[PacketRecord],
        speed_factor: float = 0.0,
        run_until: Optional[float] = None,
    ) -> RunSummary:
        heap: list = []
        seq = itertools.count()
        stream_iter = iter(stream)
        first = next(stream_iter, None)
        now = first.ts if first is not None else 0.0
        anchor = now
        stream_done = first is None
        if first is not None:
            heapq.heappush(heap, (first.ts, _PRIO_PKT, next(seq), "pkt", first))
            timers = self.cfg.timers
            heapq.heappush(heap, (anchor + timers.query_interval, _PRIO_TICK, next(seq), "tick", None))
            heapq.heappush(heap, (anchor + self.opts.control_period, _PRIO_DRAIN, next(seq), "drain", None))
            heapq.heappush(heap, (anchor + self.opts.clean_interval, _PRIO_CLEAN, next(seq), "clean", None))
            heapq.heappush(heap, (anchor + self.opts.metrics_interval, _PRIO_METRICS, next(seq), "metrics", None))

        def finished() -> bool:
            if not stream_done or not self._idle(now):
                return False
            return run_until is None or now >= run_until

        last_wall = _time.monotonic()
        while heap:
            t, _prio, _seq, kind, payload = heapq.heappop(heap)
            if speed_factor > 0:
                lag = (t - now) / speed_factor - (_time.monotonic() - last_wall)
                if lag > 0:
                    _time.sleep(lag)
                last_wall = _time.monotonic()
            now = max(now, t)
            if kind == "pkt":
                self._packets_in += 1
                action, _mirrored = self.switch.process_packet(payload, now)
                if self.log:
                    self.log(now, f"pkt {action.value} {payload.src_ip:08x}:{payload.src_port}>"
                                  f"{payload.dst_ip:08x}:{payload.dst_port}/{payload.proto}")
                while self.switch.mirror_out:
                    mpkt = self.switch.mirror_out.get()
                    result = self.fsd.on_packet(mpkt, now)
                    if self.log:
                        self.log(now, f"fsd {result.action.value}")
                nxt = next(stream_iter, None)
                if nxt is None:
                    stream_done = True
                else:
                    heapq.heappush(heap, (max(nxt.ts, now), _PRIO_PKT, next(seq), "pkt", nxt))
                self._schedule_check(heap, seq, anchor, now)
            elif kind == "check":
                if payload != self._check_token:
                    continue
                self._check_at = None
                if self.fsd.ring.size:
                    self.fsd.check_timers(now)
                self._schedule_check(heap, seq, anchor, now + self.cfg.timers.p_d)
            elif kind == "tick":
                fired = self.switch.tick(now)
                if fired and self.log:
                    self.log(now, f"tick evict={len(fired)}")
                if self.switch.notify_out:
                    batch = self.switch.notify_out.drain()
                    self.control.on_idle_notifications(batch, now)
                if not finished():
                    heapq.heappush(heap, (now + self.cfg.timers.query_interval, _PRIO_TICK,
                                          next(seq), "tick", None))
            elif kind == "drain":
                report = self.control.drain_and_apply(now)
                if report is not None:
                    self.metrics_rows.append({
                        "t": now, "kind": "control", "ops": report.ops_applied,
                        "installs": report.installs, "deletes": report.deletes,
                        "latency": report.latency, "per_rule": report.per_rule_latency,
                    })
                    if self.log:
                        self.log(now, f"drain install={report.installs} delete={report.deletes}")
                if not finished():
                    heapq.heappush(heap, (now + self.opts.control_period, _PRIO_DRAIN,
                                          next(seq), "drain", None))
            elif kind == "clean":
                self.fsd.clean_benign(now)
                if not finished():
                    heapq.heappush(heap, (now + self.opts.clean_interval, _PRIO_CLEAN,
                                          next(seq), "clean", None))
            elif kind == "metrics":
                stats = self.fsd.stats()
                self.metrics_rows.append({
                    "t": now, "kind": "fsd",
                    "ring_used": stats["ring_used"], "ring_live": stats["ring_live"],
                    "hash_entries": stats["hash_entries"],
                    "overflow_drops": stats["overflow_drops"],
                    "mirror_drops": self.switch.backpressure_drops,
                    "pending_rules": len(self.control.pending),
                    "collected": len(self.collector.records),
                })
                if not finished():
                    heapq.heappush(heap, (now + self.opts.metrics_interval, _PRIO_METRICS,
                                          next(seq), "metrics", None))
            if finished():
                break
        return self._summary(now - anchor if first is not None else 0.0)

    def _idle(self, now: float) -> bool:
        return (
            self.fsd.ring.size == 0
            and not self.control.pending
            and not self.switch.notify_out
            and now >= self.control.busy_until
        )

    def _summary(self, duration: float) -> RunSummary:
        sw = self.switch.counters()
        dropped = sw["whitelist_hits"] + sw["flow_rule_hits"]
        total = max(1, self._packets_in)
        return RunSummary(
            packets_in=self._packets_in,
            duration=duration,
            switch=sw,
            fsd=self.fsd.stats(),
            control=self.control.stats(),
            collected=len(self.collector.records),
            collected_by_reason={r.value: c for r, c in self.collector.by_reason.items()},
            responder_replies=len(self.responder_replies),
            transcripts=len(self.responder.transcripts) if self.responder else 0,
            filtering_efficiency=dropped / total,
            whitelist_share=sw["whitelist_hits"] / total,
        )

    def metrics_bytes(self) -> bytes:
        import json

        return "".join(
            json.dumps(row, separators=(",", ":")) + "\n" for row in self.metrics_rows
        ).encode()


def replay(
    stream: Iterable[PacketRecord],
    pipeline: Pipeline,
    speed_factor: float = 0.0,
    run_until: Optional[float] = None,
) -> RunSummary:
    """Feed a time-ordered packet stream through a pipeline on virtual time."""
    return pipeline.run(stream, speed_factor=speed_factor, run_until=run_until)
