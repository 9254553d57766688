"""Data-minimisation transforms for the mirror path.

Internal addresses are obfuscated by XOR with a salted key; payloads are cut
at the transport header. Flows touching an impersonation-set endpoint bypass
both transforms, since the responder needs real addresses and payload.
"""

from __future__ import annotations

import dataclasses
import struct

from . import core
from .core import PROTO_ICMP, PROTO_TCP, PROTO_UDP, PacketRecord

_ETH = 14
# Kept L4 bytes when the real header length is unknown or unreadable.
_L4_FALLBACK = 8


def _salted_key(last_byte: int, key: int) -> int:
    # The low address byte replicated into the three high-order key bytes;
    # the key's own low byte passes through, so the salt is recoverable from
    # the obfuscated address and the transform inverts exactly.
    salt = (last_byte << 24) | (last_byte << 16) | (last_byte << 8)
    return key ^ salt


def obfuscate_ip(ip: int, key: int) -> int:
    """Deterministic, invertible obfuscation of one IPv4 address."""
    return ip ^ _salted_key(ip & 0xFF, key)


def deobfuscate_ip(ip: int, key: int) -> int:
    last_byte = (ip & 0xFF) ^ (key & 0xFF)
    return ip ^ _salted_key(last_byte, key)


def _kept_length(pkt: PacketRecord) -> int:
    """Bytes to keep: L2 + IP header + L4 header, protocol dependent."""
    raw = pkt.raw
    if len(raw) < _ETH + 20:
        return min(len(raw), _ETH + 20 + _L4_FALLBACK)
    ihl = (raw[_ETH] & 0x0F) * 4
    if ihl < 20 or len(raw) < _ETH + ihl:
        return min(len(raw), _ETH + 20 + _L4_FALLBACK)
    l4 = _ETH + ihl
    if pkt.proto == PROTO_TCP:
        if len(raw) < l4 + 13:
            return min(len(raw), l4 + _L4_FALLBACK)
        doff = (raw[l4 + 12] >> 4) * 4
        if doff < 20 or len(raw) < l4 + doff:
            return min(len(raw), l4 + _L4_FALLBACK)
        return l4 + doff
    if pkt.proto in (PROTO_UDP, PROTO_ICMP):
        return min(len(raw), l4 + 8)
    return min(len(raw), l4 + _L4_FALLBACK)


def truncate(pkt: PacketRecord) -> PacketRecord:
    """Cut the packet at its transport header; header fields stay as parsed.

    TCP keeps the data-offset-derived header, UDP and ICMP keep 8 bytes, any
    other protocol keeps IP header + 8 bytes. Malformed headers fall back to
    the pre-defined length. The result carries payload_len 0.
    """
    keep = _kept_length(pkt)
    return dataclasses.replace(pkt, raw=pkt.raw[:keep], header_len=keep, payload_len=0)


def _rewrite_addresses(raw: bytes, src_ip: int, dst_ip: int) -> bytes:
    if len(raw) < _ETH + 20:
        return raw
    buf = bytearray(raw)
    struct.pack_into("!II", buf, _ETH + 12, src_ip, dst_ip)
    return bytes(buf)


def mirror_transform(pkt: PacketRecord, cfg: core.NetworkConfig) -> PacketRecord:
    """The transform applied to every packet copied toward the detection engine.

    Internal addresses (source or destination) are obfuscated and the payload
    removed. Packets of impersonated flows pass through untouched.
    """
    if cfg.is_impersonated_flow(pkt):
        return pkt
    key = cfg.anonymization_key
    src = obfuscate_ip(pkt.src_ip, key) if cfg.is_internal(pkt.src_ip) else pkt.src_ip
    dst = obfuscate_ip(pkt.dst_ip, key) if cfg.is_internal(pkt.dst_ip) else pkt.dst_ip
    out = truncate(pkt)
    if src != pkt.src_ip or dst != pkt.dst_ip:
        out.src_ip = src
        out.dst_ip = dst
        out.raw = _rewrite_addresses(out.raw, src, dst)
    return out
