import random

import pytest

from errmon import packet
from errmon.core import (
    NetworkConfig,
    PacketRecord,
    TcpFlags,
    Timers,
    classify_response,
    ip_to_int,
    is_internal,
    make_flow_key,
    reversed_packet,
)

A = ip_to_int("10.0.0.5")
B = ip_to_int("8.8.8.8")


def tcp(src, dst, sport, dport, ts=0.0, flags=TcpFlags.SYN):
    return packet.build_tcp_packet(ts, src, dst, sport, dport, flags)


def test_flow_key_symmetry_tcp():
    fwd = tcp(A, B, 1234, 80)
    rev = tcp(B, A, 80, 1234)
    assert make_flow_key(fwd) == make_flow_key(rev)


def test_flow_key_icmp_echo_pairing():
    # oracle: echo flows pair by (lower host, higher host, identifier)
    rng = random.Random(11)
    for _ in range(300):
        a = rng.randrange(1 << 32)
        b = rng.randrange(1 << 32)
        ident = rng.randrange(1, 0xFFFF)
        req = packet.build_icmp_packet(0.0, a, b, 8, identifier=ident)
        rep = packet.build_icmp_packet(0.1, b, a, 0, identifier=ident)
        expected = (min(a, b), max(a, b), ident)
        key_req = make_flow_key(req)
        key_rep = make_flow_key(rep)
        assert key_req == key_rep
        assert (key_req.ep_lo.ip, key_req.ep_hi.ip, key_req.ep_lo.port) == expected


def test_flow_key_ordering_definition():
    a, b = ip_to_int("1.2.3.4"), ip_to_int("5.6.7.8")
    pkt = packet.build_udp_packet(0.0, a, b, 53, 53)
    key = make_flow_key(pkt)
    assert key.ep_lo == (a, 53)
    assert key.ep_hi == (b, 53)


def test_flow_key_involution_stable_random_packets():
    rng = random.Random(3)
    for _ in range(100_000):
        proto = rng.choice((6, 17, 1))
        rec = PacketRecord(
            ts=0.0,
            src_ip=rng.randrange(1 << 32),
            dst_ip=rng.randrange(1 << 32),
            proto=proto,
            src_port=rng.randrange(1 << 16) if proto != 1 else 7,
            dst_port=rng.randrange(1 << 16) if proto != 1 else 7,
            icmp_type=8 if proto == 1 else 0,
        )
        assert make_flow_key(rec) == make_flow_key(reversed_packet(rec))


def test_non_echo_icmp_gets_zero_ports():
    err = packet.build_icmp_packet(0.0, A, B, 11, 0)
    assert err.src_port == 0 and err.dst_port == 0
    err.validate()


def test_is_internal(cfg):
    assert is_internal(ip_to_int("10.1.0.7"), cfg)
    assert is_internal(ip_to_int("10.1.0.245"), cfg)  # telescope subset
    assert not is_internal(ip_to_int("8.8.8.8"), cfg)
    assert not is_internal(ip_to_int("10.2.0.7"), cfg)


def test_classify_response_synack():
    syn = tcp(A, B, 1234, 80)
    synack = tcp(B, A, 80, 1234, ts=0.01, flags=TcpFlags.SYN | TcpFlags.ACK)
    assert classify_response(syn, synack)


def test_classify_response_icmp_error_is_not_response():
    req = packet.build_udp_packet(0.0, A, B, 5555, 123)
    err = packet.build_icmp_error(0.02, B, A, req)
    assert not classify_response(req, err)


def test_classify_response_echo_reply():
    req = packet.build_icmp_packet(0.0, A, B, 8, identifier=9)
    rep = packet.build_icmp_packet(0.05, B, A, 0, identifier=9)
    assert classify_response(req, rep)


def test_classify_response_same_direction_and_other_flow():
    syn = tcp(A, B, 1234, 80)
    assert not classify_response(syn, tcp(A, B, 1234, 80, ts=0.5))
    assert not classify_response(syn, tcp(B, A, 80, 9999, ts=0.5))


def test_classify_response_never_accepts_icmp_errors():
    rng = random.Random(5)
    req = packet.build_udp_packet(0.0, A, B, 5555, 123)
    for _ in range(2000):
        err_type = rng.choice((3, 11, 12))
        err = packet.build_icmp_packet(
            0.01, B, A, err_type, rng.randrange(4), payload=bytes(8)
        )
        assert not classify_response(req, err)


def test_timers_validation():
    Timers().validate()
    with pytest.raises(ValueError):
        Timers(alpha_ht=0.0).validate()
    with pytest.raises(ValueError):
        Timers(alpha_ht=1.5).validate()
    with pytest.raises(ValueError):
        Timers(dt=0.05, dt_impersonated=0.07).validate()
    with pytest.raises(ValueError):
        Timers(p_d=-1.0).validate()


def test_network_config_invariants():
    with pytest.raises(ValueError):
        NetworkConfig(internal_prefixes=["10.1.0.0/24"], telescope_prefixes=["10.9.0.0/28"])
    with pytest.raises(ValueError):
        NetworkConfig(
            internal_prefixes=["10.1.0.0/24"],
            impersonation_set={(ip_to_int("8.8.8.8"), 80, 6)},
        )


def test_resolve_internal_maps_obfuscated_image(cfg):
    from errmon.anonymizer import obfuscate_ip

    real = ip_to_int("10.1.0.44")
    obf = obfuscate_ip(real, cfg.anonymization_key)
    assert cfg.resolve_internal(real) == real
    assert cfg.resolve_internal(obf) == real
    assert cfg.resolve_internal(ip_to_int("8.8.4.4")) is None


def test_packet_record_invariant_checked():
    rec = PacketRecord(ts=0.0, src_ip=A, dst_ip=B, proto=6, header_len=10,
                       payload_len=5, raw=b"x" * 14)
    with pytest.raises(ValueError):
        rec.validate()
