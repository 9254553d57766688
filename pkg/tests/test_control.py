from conftest import make_cfg

from errmon.control import ControlPlane, SouthboundChannel
from errmon.core import Timers, ip_to_int
from errmon.fsd import RuleSyncEvent
from errmon.switchsim import IdleNotification, MatRule, RuleSide, SwitchSim

EXT = ip_to_int("93.184.216.34")
INT = ip_to_int("10.1.0.31")


def rule(ip, port):
    return MatRule(ip, port, 6, RuleSide.MATCH_AS_DST, ttl_initial=30.0)


def setup(k_batch=200, should_fail=None, whitelist=None):
    cfg = make_cfg(timers=Timers(k_batch=k_batch))
    switch = SwitchSim(cfg, whitelist=whitelist)
    syncs = []
    control = ControlPlane(
        cfg,
        SouthboundChannel(switch, should_fail=should_fail),
        sync_sink=lambda ip, ev, t: syncs.append((ip, ev, t)),
        whitelist=switch.whitelist,
    )
    return cfg, switch, control, syncs


def test_thousand_ops_five_calls():
    _, switch, control, _ = setup(k_batch=200)
    for i in range(1000):
        assert control.enqueue_install(rule(EXT, i + 1))
    now = 0.0
    calls = 0
    while control.pending:
        now = max(now, control.busy_until)
        if control.drain_and_apply(now):
            calls += 1
    assert calls == 5
    assert len(switch.table) == 1000


def test_per_rule_latency_amortized_10x():
    _, _, control, _ = setup(k_batch=200)
    for i in range(200):
        control.enqueue_install(rule(EXT, i + 1))
    report_200 = control.drain_and_apply(0.0)
    _, _, control1, _ = setup(k_batch=1)
    control1.enqueue_install(rule(EXT, 1))
    report_1 = control1.drain_and_apply(0.0)
    assert report_200.per_rule_latency <= report_1.per_rule_latency / 10


def test_empty_queue_is_noop():
    _, _, control, _ = setup()
    assert control.drain_and_apply(0.0) is None
    assert control.channel.calls == 0


def test_idle_notifications_batched_into_single_delete_call():
    _, switch, control, _ = setup(k_batch=200)
    rules = [rule(EXT, i + 1) for i in range(200)]
    switch.install_rules(rules, 0.0)
    notes = [IdleNotification(r.ip, r.port, r.proto, r.side, 1.0) for r in rules]
    control.on_idle_notifications(notes, 1.0)
    report = control.drain_and_apply(2.0)
    assert report.deletes == 200
    assert control.channel.calls == 1
    assert len(switch.table) == 0


def test_duplicate_notification_idempotent():
    _, switch, control, _ = setup()
    switch.install_rules([rule(EXT, 443)], 0.0)
    note = IdleNotification(EXT, 443, 6, RuleSide.MATCH_AS_DST, 1.0)
    control.on_idle_notifications([note, note], 1.0)
    report = control.drain_and_apply(2.0)
    assert report.deletes == 2  # second delete hits an absent key, ignored
    assert len(switch.table) == 0


def test_whitelist_key_rejected():
    _, _, control, _ = setup(whitelist={(EXT, 443)})
    control.on_idle_notifications([IdleNotification(EXT, 443, 6, RuleSide.MATCH_AS_DST, 0.0)], 0.0)
    assert len(control.pending) == 0
    assert control.whitelist_rejects == 1


def test_mixed_drain_kindwise_fifo_installs_then_deletes():
    _, switch, control, _ = setup()
    switch.install_rules([rule(EXT, 7)], 0.0)
    control.enqueue_install(rule(EXT, 8))
    control.on_idle_notifications([IdleNotification(EXT, 7, 6, RuleSide.MATCH_AS_DST, 0.5)], 0.5)
    control.enqueue_install(rule(EXT, 9))
    report = control.drain_and_apply(1.0)
    assert report.installs == 2 and report.deletes == 1
    assert (EXT, 8, 6, RuleSide.MATCH_AS_DST) in switch.table
    assert (EXT, 9, 6, RuleSide.MATCH_AS_DST) in switch.table
    assert (EXT, 7, 6, RuleSide.MATCH_AS_DST) not in switch.table


def test_channel_failure_retries_with_backoff():
    fails = {1, 2}  # first two calls fail, third succeeds
    _, switch, control, _ = setup(should_fail=lambda n: n in fails)
    control.enqueue_install(rule(EXT, 1))
    report = control.drain_and_apply(0.0)
    assert report is not None and report.attempts == 3
    assert len(switch.table) == 1
    # backoff delays pushed completion beyond the raw call latency
    assert report.completed_at > report.latency


def test_channel_failure_requeues_in_order_after_three_attempts():
    _, _, control, _ = setup(should_fail=lambda n: True)
    for i in range(5):
        control.enqueue_install(rule(EXT, i + 1))
    assert control.drain_and_apply(0.0) is None
    assert control.failed_batches == 1
    assert [op.rule.port for op in control.pending] == [1, 2, 3, 4, 5]


def test_liveness_sync_on_install_and_delete_for_internal_endpoints():
    _, switch, control, syncs = setup()
    control.enqueue_install(rule(INT, 22))
    control.enqueue_install(rule(EXT, 80))
    control.drain_and_apply(0.0)
    assert [(s[0], s[1]) for s in syncs] == [(INT, RuleSyncEvent.INSTALLED)]
    control.on_idle_notifications(
        [IdleNotification(INT, 22, 6, RuleSide.MATCH_AS_DST, 1.0)], 1.0
    )
    control.drain_and_apply(max(1.0, control.busy_until))
    assert (INT, RuleSyncEvent.DELETED) in [(s[0], s[1]) for s in syncs]


def test_sync_resolves_obfuscated_rule_endpoints():
    from errmon.anonymizer import obfuscate_ip

    cfg, switch, control, syncs = setup()
    obf = obfuscate_ip(INT, cfg.anonymization_key)
    control.enqueue_install(rule(obf, 22))
    control.drain_and_apply(0.0)
    assert syncs and syncs[0][0] == INT  # resolved back to the real host


def test_busy_channel_defers_drain():
    _, _, control, _ = setup()
    control.enqueue_install(rule(EXT, 1))
    report = control.drain_and_apply(0.0)
    control.enqueue_install(rule(EXT, 2))
    assert control.drain_and_apply(report.completed_at / 2) is None
    assert control.drain_and_apply(report.completed_at) is not None


def test_queue_growth_small_batch_vs_stable_large_batch():
    from errmon.experiments import queue_stability

    cfg = make_cfg()
    stable = queue_stability(cfg, k_batch=200, offered_rate=5000.0, n_events=50_000)
    assert max(s["queue_len"] for s in stable) < 10 * 200
    growing = queue_stability(cfg, k_batch=1, offered_rate=5000.0, n_events=50_000)
    lens = [s["queue_len"] for s in growing]
    assert lens == sorted(lens)
    assert lens[-1] > 10 * max(s["queue_len"] for s in stable)
