import random

from oracles import expected_truncated_length

from errmon import packet
from errmon.anonymizer import deobfuscate_ip, mirror_transform, obfuscate_ip, truncate
from errmon.core import TcpFlags, ip_to_int, ip_to_str


def test_zero_key_zero_last_byte_identity():
    ip = ip_to_int("10.20.30.0")
    assert obfuscate_ip(ip, 0) == ip
    assert deobfuscate_ip(ip, 0) == ip


def test_golden_vector():
    # frozen at first implementation
    assert ip_to_str(obfuscate_ip(ip_to_int("10.1.2.3"), 0xDEADBEEF)) == "215.175.191.236"
    assert ip_to_str(deobfuscate_ip(ip_to_int("215.175.191.236"), 0xDEADBEEF)) == "10.1.2.3"


def test_round_trip_random_addresses():
    rng = random.Random(21)
    for _ in range(10_000):
        ip = rng.randrange(1 << 32)
        key = rng.randrange(1 << 32)
        assert deobfuscate_ip(obfuscate_ip(ip, key), key) == ip


def test_slash24_stays_injective():
    # exhaustive over one /24: outputs distinct, last octets distinct
    base = ip_to_int("10.1.7.0")
    key = 0xC0FFEE11
    outs = [obfuscate_ip(base + i, key) for i in range(256)]
    assert len(set(outs)) == 256
    assert len({o & 0xFF for o in outs}) == 256


def _random_packet(rng):
    src = rng.randrange(1 << 32)
    dst = rng.randrange(1 << 32)
    payload = rng.randbytes(rng.randrange(0, 400))
    kind = rng.randrange(3)
    if kind == 0:
        options = b"\x01" * (4 * rng.randrange(0, 11))
        return packet.build_tcp_packet(
            0.0, src, dst, rng.randrange(1 << 16), rng.randrange(1 << 16),
            TcpFlags.SYN | TcpFlags.ACK, payload=payload, options=options,
        )
    if kind == 1:
        return packet.build_udp_packet(
            0.0, src, dst, rng.randrange(1 << 16), rng.randrange(1 << 16), payload
        )
    return packet.build_icmp_packet(0.0, src, dst, 8, identifier=7, payload=payload)


def test_truncate_strips_all_payload_random_packets():
    rng = random.Random(8)
    for _ in range(10_000):
        pkt = _random_packet(rng)
        cut = truncate(pkt)
        assert len(cut.raw) == expected_truncated_length(pkt.raw)
        assert cut.payload_len == 0
        assert cut.header_len == len(cut.raw)
        assert cut.src_ip == pkt.src_ip and cut.dst_port == pkt.dst_port


def test_truncate_tcp_with_options():
    pkt = packet.build_tcp_packet(
        0.0, 1, 2, 10, 20, TcpFlags.SYN, payload=b"z" * 100, options=b"\x01" * 12
    )
    assert (pkt.raw[14 + 20 + 12] >> 4) == 8  # data offset 8 -> 32-byte header
    cut = truncate(pkt)
    assert len(pkt.raw) - len(cut.raw) == 100


def test_truncate_udp_keeps_fixed_header():
    pkt = packet.build_udp_packet(0.0, 1, 2, 10, 20, b"q" * 60)
    cut = truncate(pkt)
    assert len(cut.raw) == 14 + 20 + 8


def test_truncate_unknown_proto_keeps_ip_plus_8():
    pkt = packet.build_other_packet(0.0, 1, 2, 47, b"p" * 64)
    cut = truncate(pkt)
    assert len(cut.raw) == 14 + 20 + 8


def test_truncate_malformed_falls_back():
    pkt = packet.build_tcp_packet(0.0, 1, 2, 10, 20, TcpFlags.SYN, payload=b"y" * 50)
    raw = bytearray(pkt.raw)
    raw[14 + 20 + 12] = 0x10  # data offset 4 -> below minimum, malformed
    pkt.raw = bytes(raw)
    cut = truncate(pkt)
    assert len(cut.raw) == 14 + 20 + 8  # fallback keeps L4 stub only
    assert cut.payload_len == 0


def test_mirror_transform_obfuscates_internal_only(cfg):
    internal = ip_to_int("10.1.0.31")
    external = ip_to_int("93.184.216.34")
    pkt = packet.build_tcp_packet(0.0, external, internal, 40000, 22, TcpFlags.SYN,
                                  payload=b"hello")
    out = mirror_transform(pkt, cfg)
    assert out.src_ip == external  # external never transformed
    assert out.dst_ip == obfuscate_ip(internal, cfg.anonymization_key)
    assert out.payload_len == 0
    # raw bytes agree with the rewritten header fields
    reparsed = packet.parse_frame(out.ts, out.raw)
    assert reparsed.dst_ip == out.dst_ip and reparsed.src_ip == external


def test_mirror_transform_bypasses_impersonated(imp_cfg):
    target = ip_to_int("10.1.0.9")
    pkt = packet.build_tcp_packet(0.0, ip_to_int("81.2.3.4"), target, 40000, 8022,
                                  TcpFlags.ACK | TcpFlags.PSH, payload=b"GET /")
    out = mirror_transform(pkt, imp_cfg)
    assert out is pkt  # untouched: responder needs real addresses and payload
    assert out.payload_len == len(b"GET /")
