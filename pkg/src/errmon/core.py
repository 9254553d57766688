"""Domain types shared by every stage: packets, bidirectional flow keys,
network configuration (address roles, timers) and response classification.

Everything here is a pure function or immutable after construction, so the
types are safe to use from any execution context.
"""

from __future__ import annotations

import dataclasses
import ipaddress
from dataclasses import dataclass, field
from enum import IntFlag
from typing import NamedTuple, Optional

PROTO_ICMP = 1
PROTO_TCP = 6
PROTO_UDP = 17

ICMP_ECHO_REPLY = 0
ICMP_ECHO_REQUEST = 8
# Unreachable, time exceeded, parameter problem: error messages, never a
# valid answer that forms a flow.
ICMP_ERROR_TYPES = frozenset({3, 11, 12})


class TcpFlags(IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20


class NotInternalError(ValueError):
    """Raised when an operation restricted to internal addresses gets an external one."""


def ip_to_int(text: str) -> int:
    return int(ipaddress.IPv4Address(text))


def ip_to_str(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


@dataclass(slots=True)
class PacketRecord:
    """One captured packet: virtual arrival time, parsed header fields, raw bytes.

    Ports are 0 unless the protocol is TCP/UDP, or the packet is an ICMP echo
    request/reply, in which case both ports carry the echo identifier.
    Invariant: header_len + payload_len == len(raw).
    """

    ts: float
    src_ip: int
    dst_ip: int
    proto: int
    src_port: int = 0
    dst_port: int = 0
    tcp_flags: int = 0
    icmp_type: int = 0
    icmp_code: int = 0
    header_len: int = 0
    payload_len: int = 0
    raw: bytes = b""

    def validate(self) -> None:
        if self.header_len + self.payload_len != len(self.raw):
            raise ValueError(
                "header_len + payload_len must equal len(raw): "
                f"{self.header_len}+{self.payload_len} != {len(self.raw)}"
            )
        if self.proto not in (PROTO_TCP, PROTO_UDP):
            echo = self.proto == PROTO_ICMP and self.icmp_type in (
                ICMP_ECHO_REQUEST,
                ICMP_ECHO_REPLY,
            )
            if not echo and (self.src_port or self.dst_port):
                raise ValueError("ports must be 0 for non-TCP/UDP, non-echo packets")

    def src_endpoint(self) -> "Endpoint":
        return Endpoint(self.src_ip, self.src_port)

    def dst_endpoint(self) -> "Endpoint":
        return Endpoint(self.dst_ip, self.dst_port)


class Endpoint(NamedTuple):
    ip: int
    port: int


class FlowKey(NamedTuple):
    """Canonical bidirectional 5-tuple: endpoints ordered lexicographically on (ip, port)."""

    ep_lo: Endpoint
    ep_hi: Endpoint
    proto: int


def make_flow_key(pkt: PacketRecord) -> FlowKey:
    """Canonical key shared by both directions of a flow.

    ICMP echo request/reply use the echo identifier as both ports (set by the
    parser); every other ICMP type carries ports 0, so non-echo ICMP between
    the same host pair collapses into one flow. That is acceptable because
    ICMP errors never form benign flows.
    """
    a = Endpoint(pkt.src_ip, pkt.src_port)
    b = Endpoint(pkt.dst_ip, pkt.dst_port)
    if a <= b:
        return FlowKey(a, b, pkt.proto)
    return FlowKey(b, a, pkt.proto)


def reversed_packet(pkt: PacketRecord) -> PacketRecord:
    """Direction-swapped twin of a packet; raw bytes are left untouched."""
    return dataclasses.replace(
        pkt,
        src_ip=pkt.dst_ip,
        dst_ip=pkt.src_ip,
        src_port=pkt.dst_port,
        dst_port=pkt.src_port,
    )


def is_icmp_error(pkt: PacketRecord) -> bool:
    return pkt.proto == PROTO_ICMP and pkt.icmp_type in ICMP_ERROR_TYPES


def classify_response(request: PacketRecord, candidate: PacketRecord) -> bool:
    """True iff candidate is a qualifying answer to request.

    A qualifying answer travels in the opposite direction, shares the flow
    key, and is not an ICMP error message: unreachable / time exceeded /
    parameter problem packets never validate a flow, so both the request and
    the error end up collected as erroneous. An ICMP echo reply answering an
    echo request qualifies. The candidate may be any packet; flow-key equality
    is checked here rather than assumed.
    """
    if is_icmp_error(candidate):
        return False
    if make_flow_key(candidate) != make_flow_key(request):
        return False
    return (
        candidate.src_ip == request.dst_ip
        and candidate.src_port == request.dst_port
        and candidate.dst_ip == request.src_ip
        and candidate.dst_port == request.src_port
    )


@dataclass
class Timers:
    """All timing and sizing knobs, in seconds unless noted.

    dt: detection timeout waiting for a response to a suspicious packet.
    dt_impersonated: reduced timeout for destinations in the impersonation set.
    t_inst: retention of answered-flow state, covering rule install latency.
    t_alive: host liveness horizon.
    p_d: period of the lazy expiry check; d_max: max descriptors popped per check.
    alpha_ht: fraction of hash buckets scanned per cleaning pass.
    k_batch: rule operations batched per southbound call.
    query_interval: switch idle-poll period; rule_ttl: idle TTL of dynamic rules.
    """

    dt: float = 1.0
    dt_impersonated: float = 0.070
    t_inst: float = 1.0
    t_alive: float = 300.0
    p_d: float = 1e-5
    d_max: int = 10
    alpha_ht: float = 1e-3
    k_batch: int = 200
    query_interval: float = 1.0
    rule_ttl: float = 30.0

    def validate(self) -> None:
        positives = {
            "dt": self.dt,
            "dt_impersonated": self.dt_impersonated,
            "t_inst": self.t_inst,
            "t_alive": self.t_alive,
            "p_d": self.p_d,
            "d_max": self.d_max,
            "alpha_ht": self.alpha_ht,
            "k_batch": self.k_batch,
            "query_interval": self.query_interval,
            "rule_ttl": self.rule_ttl,
        }
        for name, value in positives.items():
            if value <= 0:
                raise ValueError(f"timer {name} must be strictly positive, got {value}")
        if self.alpha_ht > 1:
            raise ValueError(f"alpha_ht must be in (0, 1], got {self.alpha_ht}")
        if self.dt_impersonated >= self.dt:
            raise ValueError("dt_impersonated must be smaller than dt")


def _parse_prefix(text: str) -> ipaddress.IPv4Network:
    return ipaddress.IPv4Network(text, strict=False)


# Above this many internal addresses the obfuscated-image map is not
# materialized and membership falls back to inverting candidate addresses.
_EAGER_IMAGE_LIMIT = 1 << 17


@dataclass
class NetworkConfig:
    """Address roles and deployment parameters.

    internal_prefixes: CIDR blocks owned by the monitored network.
    telescope_prefixes: internal blocks with no attached services.
    impersonation_set: (ip, port, proto) endpoints answered by the collector;
    their traffic bypasses anonymization so the responder sees real bytes.
    anonymization_key: 32-bit obfuscation key.
    """

    internal_prefixes: list[str]
    telescope_prefixes: list[str] = field(default_factory=list)
    impersonation_set: set[tuple[int, int, int]] = field(default_factory=set)
    anonymization_key: int = 0
    timers: Timers = field(default_factory=Timers)

    def __post_init__(self):
        self.timers.validate()
        self._internal = [_parse_prefix(p) for p in self.internal_prefixes]
        self._telescope = [_parse_prefix(p) for p in self.telescope_prefixes]
        if not self._internal:
            raise ValueError("at least one internal prefix is required")
        for tnet in self._telescope:
            if not any(tnet.subnet_of(inet) for inet in self._internal):
                raise ValueError(f"telescope prefix {tnet} is not inside an internal prefix")
        self._internal_masks = [
            (int(net.network_address), int(net.netmask)) for net in self._internal
        ]
        self._telescope_masks = [
            (int(net.network_address), int(net.netmask)) for net in self._telescope
        ]
        if self.anonymization_key < 0 or self.anonymization_key > 0xFFFFFFFF:
            raise ValueError("anonymization_key must fit in 32 bits")
        for ip, port, proto in self.impersonation_set:
            if not self.is_internal(ip):
                raise NotInternalError(
                    f"impersonation endpoint {ip_to_str(ip)}:{port}/{proto} is not internal"
                )
        # Dense index over the internal address space, used by liveness bitmaps.
        self._index_base: list[tuple[int, int, int]] = []  # (net_start, net_end, base)
        base = 0
        for net in self._internal:
            start = int(net.network_address)
            self._index_base.append((start, start + net.num_addresses - 1, base))
            base += net.num_addresses
        self.internal_size = base
        self._obf_image: Optional[dict[int, int]] = None
        if base <= _EAGER_IMAGE_LIMIT:
            from . import anonymizer  # deferred: anonymizer imports core

            image = {}
            key = self.anonymization_key
            for start, end, _ in self._index_base:
                for ip in range(start, end + 1):
                    image[anonymizer.obfuscate_ip(ip, key)] = ip
            self._obf_image = image

    def is_internal(self, ip: int) -> bool:
        for net, mask in self._internal_masks:
            if ip & mask == net:
                return True
        return False

    def is_telescope(self, ip: int) -> bool:
        for net, mask in self._telescope_masks:
            if ip & mask == net:
                return True
        return False

    def internal_index(self, ip: int) -> int:
        """Dense 0-based index of an internal address; raises NotInternalError otherwise."""
        for start, end, base in self._index_base:
            if start <= ip <= end:
                return base + (ip - start)
        raise NotInternalError(f"{ip_to_str(ip)} is outside the internal prefixes")

    def resolve_internal(self, ip: int) -> Optional[int]:
        """Map an address to the real internal address it denotes, if any.

        Accepts either a plain internal address or the obfuscated image of
        one (mirror-path packets carry obfuscated internal addresses).
        Plain-internal interpretation wins if both apply. Returns None for
        external addresses.
        """
        if self.is_internal(ip):
            return ip
        if self._obf_image is not None:
            return self._obf_image.get(ip)
        from . import anonymizer

        candidate = anonymizer.deobfuscate_ip(ip, self.anonymization_key)
        return candidate if self.is_internal(candidate) else None

    def is_impersonated_endpoint(self, ip: int, port: int, proto: int) -> bool:
        return (ip, port, proto) in self.impersonation_set

    def is_impersonated_flow(self, pkt: PacketRecord) -> bool:
        """True when either endpoint of the packet is in the impersonation set."""
        s = self.impersonation_set
        return (pkt.dst_ip, pkt.dst_port, pkt.proto) in s or (
            pkt.src_ip,
            pkt.src_port,
            pkt.proto,
        ) in s


def is_internal(ip: int, cfg: NetworkConfig) -> bool:
    return cfg.is_internal(ip)
