import random

from conftest import make_cfg
from oracles import ttl_countdown_oracle

from errmon import packet
from errmon.anonymizer import obfuscate_ip
from errmon.core import TcpFlags, Timers, ip_to_int
from errmon.switchsim import (
    LatencyModel,
    MatRule,
    RuleSide,
    SwitchAction,
    SwitchSim,
    load_whitelist,
)

EXT = ip_to_int("93.184.216.34")
EXT2 = ip_to_int("81.2.3.4")
INT = ip_to_int("10.1.0.31")


def tcp(src, dst, sport, dport, ts=0.0):
    return packet.build_tcp_packet(ts, src, dst, sport, dport, TcpFlags.SYN)


def rules_for(ip, port, proto=6, ttl=30.0):
    return [
        MatRule(ip, port, proto, RuleSide.MATCH_AS_DST, ttl_initial=ttl),
        MatRule(ip, port, proto, RuleSide.MATCH_AS_SRC, ttl_initial=ttl),
    ]


def instant_switch(cfg, **kwargs):
    kwargs.setdefault("latency_model", LatencyModel(0.0, 0.0, 0.0))
    return SwitchSim(cfg, **kwargs)


def test_whitelist_drop(cfg):
    sw = instant_switch(cfg, whitelist={(EXT, 443)})
    action, _ = sw.process_packet(tcp(INT, EXT, 40000, 443), 0.0)
    assert action == SwitchAction.DROPPED_WHITELIST
    assert sw.whitelist_hits == 1


def test_dynamic_match_resets_ttl_and_drops(cfg):
    sw = instant_switch(cfg)
    report = sw.install_rules(rules_for(EXT, 443), 0.0)
    assert report.installed == 2 and report.rejected == 0
    rule = sw.table[(EXT, 443, 6, RuleSide.MATCH_AS_DST)]
    rule.ttl_remaining = 5.0
    action, _ = sw.process_packet(tcp(INT, EXT, 40000, 443), 1.0)
    assert action == SwitchAction.DROPPED_FLOW_RULE
    assert rule.ttl_remaining == rule.ttl_initial


def test_both_sides_match(cfg):
    sw = instant_switch(cfg)
    sw.install_rules(rules_for(EXT, 443), 0.0)
    fwd, _ = sw.process_packet(tcp(INT, EXT, 40000, 443), 1.0)  # dst side
    rev, _ = sw.process_packet(tcp(EXT, INT, 443, 40000), 1.0)  # src side
    assert fwd == rev == SwitchAction.DROPPED_FLOW_RULE


def test_miss_mirrors_transformed_copy(cfg):
    sw = instant_switch(cfg)
    action, mirrored = sw.process_packet(
        packet.build_tcp_packet(0.0, EXT, INT, 40000, 22, TcpFlags.SYN, payload=b"xx"),
        0.0,
    )
    assert action == SwitchAction.MIRRORED
    assert mirrored.payload_len == 0
    assert mirrored.dst_ip == obfuscate_ip(INT, cfg.anonymization_key)
    assert len(sw.mirror_out) == 1


def test_whitelist_precedence_over_dynamic(cfg):
    sw = instant_switch(cfg, whitelist={(EXT, 443)})
    sw.install_rules(rules_for(EXT, 443), 0.0)
    action, _ = sw.process_packet(tcp(INT, EXT, 40000, 443), 1.0)
    assert action == SwitchAction.DROPPED_WHITELIST
    assert sw.whitelist_hits == 1 and sw.flow_rule_hits == 0


def test_rules_not_effective_before_latency(cfg):
    sw = SwitchSim(cfg, latency_model=LatencyModel(a=0.5, b=0.0, c=0.0))
    sw.install_rules(rules_for(EXT, 443), 0.0)
    action, _ = sw.process_packet(tcp(INT, EXT, 40000, 443), 0.2)
    assert action == SwitchAction.MIRRORED  # install latency not yet elapsed
    action, _ = sw.process_packet(tcp(INT, EXT, 40000, 443), 0.6)
    assert action == SwitchAction.DROPPED_FLOW_RULE


def test_capacity_rejects_overflow_suffix(cfg):
    sw = instant_switch(cfg, capacity=3)
    batch = rules_for(EXT, 1) + rules_for(EXT, 2) + rules_for(EXT, 3)
    report = sw.install_rules(batch, 0.0)
    assert report.installed == 3
    assert report.rejected == 3
    assert sw.install_rejected == 3


def test_batch_latency_amortization():
    model = LatencyModel()
    assert model.call_latency(200) < 200 * model.call_latency(1)
    assert model.per_rule(200) < model.per_rule(1) / 10


def test_delete_rules_counts_only_present(cfg):
    sw = instant_switch(cfg)
    sw.install_rules(rules_for(EXT, 443), 0.0)
    k1 = (EXT, 443, 6, RuleSide.MATCH_AS_DST)
    k2 = (EXT, 443, 6, RuleSide.MATCH_AS_SRC)
    absent = (EXT2, 80, 6, RuleSide.MATCH_AS_DST)
    assert sw.delete_rules([k1, k2], 1.0) == 2
    assert sw.delete_rules([absent], 1.0) == 0
    sw.install_rules(rules_for(EXT, 443) + rules_for(EXT2, 8080), 2.0)
    assert sw.delete_rules([k1, k2, (EXT2, 8080, 6, RuleSide.MATCH_AS_SRC), absent], 3.0) == 3


def test_idle_rule_notified_after_full_countdown():
    cfg = make_cfg(timers=Timers(query_interval=1.0, rule_ttl=3.0))
    sw = instant_switch(cfg)
    sw.install_rules(rules_for(EXT, 443, ttl=3.0), 0.0)
    fired = []
    for tick in (1.0, 2.0, 3.0, 4.0):
        fired += sw.tick(tick)
    assert len(fired) == 2  # both sides evicted together
    assert fired[0].fired_at == 3.0
    assert not sw.table


def test_matched_rule_never_notified():
    cfg = make_cfg(timers=Timers(query_interval=1.0, rule_ttl=2.0))
    sw = instant_switch(cfg)
    sw.install_rules(rules_for(EXT, 443, ttl=2.0), 0.0)
    for tick in range(1, 12):
        sw.process_packet(tcp(INT, EXT, 40000, 443), tick - 0.6)  # dst-side match
        sw.process_packet(tcp(EXT, INT, 443, 40000), tick - 0.4)  # src-side match
        assert sw.tick(float(tick)) == []
    assert len(sw.table) == 2


def test_ttl_monotone_between_matches():
    cfg = make_cfg(timers=Timers(query_interval=1.0, rule_ttl=5.0))
    sw = instant_switch(cfg)
    sw.install_rules(rules_for(EXT, 443, ttl=5.0), 0.0)
    rule = sw.table[(EXT, 443, 6, RuleSide.MATCH_AS_DST)]
    seen = [rule.ttl_remaining]
    for tick in (1.0, 2.0, 3.0):
        sw.tick(tick)
        seen.append(rule.ttl_remaining)
    assert seen == sorted(seen, reverse=True)


def test_countdown_matches_step_oracle_random_schedules():
    rng = random.Random(77)
    for trial in range(300):
        qi = rng.choice((0.5, 1.0, 2.0))
        ttl = qi * rng.randint(1, 6)
        horizon = qi * 40
        match_times = sorted(
            round(rng.uniform(0.01, horizon * 0.75), 3) for _ in range(rng.randint(0, 12))
        )
        expected = ttl_countdown_oracle(match_times, ttl, qi, horizon)
        cfg = make_cfg(timers=Timers(query_interval=qi, rule_ttl=ttl))
        sw = instant_switch(cfg)
        sw.install_rules(
            [MatRule(EXT, 443, 6, RuleSide.MATCH_AS_DST, ttl_initial=ttl)], 0.0
        )
        evicted_at = None
        pending = list(match_times)
        tick = qi
        while tick <= horizon + 1e-12 and evicted_at is None:
            while pending and pending[0] <= tick:
                sw.process_packet(tcp(INT, EXT, 40000, 443), pending.pop(0))
            if sw.tick(tick):
                evicted_at = tick
            tick = round(tick + qi, 6)
        assert evicted_at == expected, f"trial {trial}: {match_times} ttl={ttl} qi={qi}"


def test_mirror_backpressure_counted(cfg):
    sw = instant_switch(cfg, mirror_capacity=2)
    for i in range(4):
        sw.process_packet(tcp(EXT, INT, 40000 + i, 22, ts=i * 0.01), i * 0.01)
    assert sw.mirrored == 2
    assert sw.backpressure_drops == 2


def test_never_mirrored_between_effective_and_expiry():
    # deterministic schedule replay per flow-filter contract
    cfg = make_cfg(timers=Timers(query_interval=1.0, rule_ttl=3.0))
    sw = SwitchSim(cfg, latency_model=LatencyModel(a=0.1, b=0.0, c=0.0))
    sw.install_rules(rules_for(EXT, 443, ttl=3.0), 0.0)  # effective at 0.1
    mirrored_at = []
    t = 0.05
    next_tick = 1.0
    while t < 10.0:
        if next_tick <= t:
            sw.tick(next_tick)
            next_tick += 1.0
        action, _ = sw.process_packet(tcp(INT, EXT, 40000, 443), t)
        if action == SwitchAction.MIRRORED:
            mirrored_at.append(t)
        t = round(t + 0.3, 2)
    # only the packet before rule effectiveness leaked
    assert mirrored_at == [0.05]


def test_whitelist_loader_translates_internal(tmp_path, cfg):
    path = tmp_path / "wl.txt"
    path.write_text("# sample\n93.184.216.34,443\n10.1.0.31,8443\n")
    wl = load_whitelist(str(path), cfg)
    assert (EXT, 443) in wl
    assert (obfuscate_ip(INT, cfg.anonymization_key), 8443) in wl


def test_counters_dump(cfg):
    sw = instant_switch(cfg)
    sw.process_packet(tcp(EXT, INT, 40000, 22), 0.0)
    text = sw.dump_counters()
    assert "mirrored 1" in text
    assert "table_size 0" in text
