"""Byte-level Ethernet/IPv4/L4 frame construction and parsing.

Builders produce self-consistent frames for synthetic workloads and
responder replies; checksums are left zero since nothing here verifies
them. The parser accepts only Ethernet + IPv4 and reports anything else
as unparseable (None) so callers can count skips.
"""

from __future__ import annotations

import struct
from typing import Optional

from .core import (
    ICMP_ECHO_REPLY,
    ICMP_ECHO_REQUEST,
    PROTO_ICMP,
    PROTO_TCP,
    PROTO_UDP,
    PacketRecord,
)

ETH_HLEN = 14
ETHERTYPE_IPV4 = 0x0800

_SRC_MAC = b"\x02\x00\x00\x00\x00\x01"
_DST_MAC = b"\x02\x00\x00\x00\x00\x02"


def _eth_header() -> bytes:
    return _DST_MAC + _SRC_MAC + struct.pack("!H", ETHERTYPE_IPV4)


def _ipv4_header(src_ip: int, dst_ip: int, proto: int, total_len: int, ttl: int = 64) -> bytes:
    return struct.pack(
        "!BBHHHBBHII",
        0x45,  # version 4, IHL 5
        0,
        total_len,
        0,
        0,
        ttl,
        proto,
        0,
        src_ip,
        dst_ip,
    )


def build_tcp_packet(
    ts: float,
    src_ip: int,
    dst_ip: int,
    src_port: int,
    dst_port: int,
    flags: int,
    payload: bytes = b"",
    seq: int = 0,
    ack: int = 0,
    options: bytes = b"",
    window: int = 65535,
) -> PacketRecord:
    if len(options) % 4:
        options = options + b"\x01" * (4 - len(options) % 4)  # pad with NOPs
    data_offset = 5 + len(options) // 4
    tcp = struct.pack(
        "!HHIIBBHHH",
        src_port,
        dst_port,
        seq & 0xFFFFFFFF,
        ack & 0xFFFFFFFF,
        data_offset << 4,
        flags & 0xFF,
        window,
        0,
        0,
    ) + options
    ip_total = 20 + len(tcp) + len(payload)
    raw = _eth_header() + _ipv4_header(src_ip, dst_ip, PROTO_TCP, ip_total) + tcp + payload
    return PacketRecord(
        ts=ts,
        src_ip=src_ip,
        dst_ip=dst_ip,
        proto=PROTO_TCP,
        src_port=src_port,
        dst_port=dst_port,
        tcp_flags=flags & 0xFF,
        header_len=ETH_HLEN + 20 + len(tcp),
        payload_len=len(payload),
        raw=raw,
    )


def build_udp_packet(
    ts: float,
    src_ip: int,
    dst_ip: int,
    src_port: int,
    dst_port: int,
    payload: bytes = b"",
) -> PacketRecord:
    udp = struct.pack("!HHHH", src_port, dst_port, 8 + len(payload), 0)
    ip_total = 20 + len(udp) + len(payload)
    raw = _eth_header() + _ipv4_header(src_ip, dst_ip, PROTO_UDP, ip_total) + udp + payload
    return PacketRecord(
        ts=ts,
        src_ip=src_ip,
        dst_ip=dst_ip,
        proto=PROTO_UDP,
        src_port=src_port,
        dst_port=dst_port,
        header_len=ETH_HLEN + 20 + 8,
        payload_len=len(payload),
        raw=raw,
    )


def build_icmp_packet(
    ts: float,
    src_ip: int,
    dst_ip: int,
    icmp_type: int,
    icmp_code: int = 0,
    identifier: int = 0,
    sequence: int = 0,
    payload: bytes = b"",
) -> PacketRecord:
    icmp = struct.pack("!BBHHH", icmp_type, icmp_code, 0, identifier, sequence)
    ip_total = 20 + len(icmp) + len(payload)
    raw = _eth_header() + _ipv4_header(src_ip, dst_ip, PROTO_ICMP, ip_total) + icmp + payload
    echo = icmp_type in (ICMP_ECHO_REQUEST, ICMP_ECHO_REPLY)
    port = identifier if echo else 0
    return PacketRecord(
        ts=ts,
        src_ip=src_ip,
        dst_ip=dst_ip,
        proto=PROTO_ICMP,
        src_port=port,
        dst_port=port,
        icmp_type=icmp_type,
        icmp_code=icmp_code,
        header_len=ETH_HLEN + 20 + 8,
        payload_len=len(payload),
        raw=raw,
    )


def build_icmp_error(ts: float, src_ip: int, dst_ip: int, offending: PacketRecord,
                     icmp_type: int = 3, icmp_code: int = 3) -> PacketRecord:
    """Destination-unreachable style error quoting the offending datagram."""
    quoted = offending.raw[ETH_HLEN : ETH_HLEN + 28]  # IP header + 8 bytes
    return build_icmp_packet(ts, src_ip, dst_ip, icmp_type, icmp_code, payload=quoted)


def build_other_packet(ts: float, src_ip: int, dst_ip: int, proto: int,
                       payload: bytes = b"") -> PacketRecord:
    ip_total = 20 + len(payload)
    raw = _eth_header() + _ipv4_header(src_ip, dst_ip, proto, ip_total) + payload
    return PacketRecord(
        ts=ts,
        src_ip=src_ip,
        dst_ip=dst_ip,
        proto=proto,
        header_len=ETH_HLEN + 20,
        payload_len=len(payload),
        raw=raw,
    )


def parse_frame(ts: float, data: bytes) -> Optional[PacketRecord]:
    """Parse an Ethernet frame into a PacketRecord; None if not parseable IPv4."""
    if len(data) < ETH_HLEN + 20:
        return None
    ethertype = struct.unpack_from("!H", data, 12)[0]
    if ethertype != ETHERTYPE_IPV4:
        return None
    ip_off = ETH_HLEN
    vi = data[ip_off]
    if vi >> 4 != 4:
        return None
    ihl = (vi & 0x0F) * 4
    if ihl < 20 or len(data) < ip_off + ihl:
        return None
    proto = data[ip_off + 9]
    src_ip, dst_ip = struct.unpack_from("!II", data, ip_off + 12)
    l4 = ip_off + ihl
    src_port = dst_port = 0
    tcp_flags = icmp_type = icmp_code = 0
    if proto == PROTO_TCP:
        if len(data) < l4 + 20:
            return None
        src_port, dst_port = struct.unpack_from("!HH", data, l4)
        doff = (data[l4 + 12] >> 4) * 4
        if doff < 20 or len(data) < l4 + doff:
            return None
        tcp_flags = data[l4 + 13]
        header_len = l4 + doff
    elif proto == PROTO_UDP:
        if len(data) < l4 + 8:
            return None
        src_port, dst_port = struct.unpack_from("!HH", data, l4)
        header_len = l4 + 8
    elif proto == PROTO_ICMP:
        if len(data) < l4 + 8:
            return None
        icmp_type = data[l4]
        icmp_code = data[l4 + 1]
        if icmp_type in (ICMP_ECHO_REQUEST, ICMP_ECHO_REPLY):
            ident = struct.unpack_from("!H", data, l4 + 4)[0]
            src_port = dst_port = ident
        header_len = l4 + 8
    else:
        header_len = l4
    return PacketRecord(
        ts=ts,
        src_ip=src_ip,
        dst_ip=dst_ip,
        proto=proto,
        src_port=src_port,
        dst_port=dst_port,
        tcp_flags=tcp_flags,
        icmp_type=icmp_type,
        icmp_code=icmp_code,
        header_len=header_len,
        payload_len=len(data) - header_len,
        raw=data,
    )


def tcp_seq_ack(raw: bytes) -> tuple[int, int]:
    """Sequence and ack numbers of a TCP frame (raw must hold the full TCP header)."""
    l4 = ETH_HLEN + (raw[ETH_HLEN] & 0x0F) * 4
    return struct.unpack_from("!II", raw, l4 + 4)


def tcp_payload(raw: bytes) -> bytes:
    l4 = ETH_HLEN + (raw[ETH_HLEN] & 0x0F) * 4
    doff = (raw[l4 + 12] >> 4) * 4
    return raw[l4 + doff :]
