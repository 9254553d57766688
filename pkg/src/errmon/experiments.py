"""Controlled parameter experiments, all on virtual time.

batch_sweep: per-rule southbound cost versus batch size (U-shaped curve).
queue_stability: pending-rule queue dynamics at a fixed offered rate.
timer_sweep: expiry-check cadence versus buffering-time percentiles.
dt_sweep: detection-timeout versus misclassification of answered flows.
filter_efficiency: share of traffic removed in the switch by each filter.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Optional

from .control import ControlPlane, SouthboundChannel
from .core import NetworkConfig, PROTO_TCP
from .ingest import Pipeline, PipelineOptions, WorkloadSpec, generate_workload, plan_flows
from .switchsim import LatencyModel, MatRule, RuleSide, SwitchSim
from .util import percentile


def batch_sweep(model: Optional[LatencyModel] = None, ks: Optional[list[int]] = None) -> list[dict]:
    model = model or LatencyModel()
    if ks is None:
        ks = sorted({1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000, 10_000})
    return [
        {"k": k, "call_latency": model.call_latency(k), "per_rule_latency": model.per_rule(k)}
        for k in ks
    ]


def queue_stability(
    cfg: NetworkConfig,
    k_batch: int,
    offered_rate: float,
    n_events: int = 1_000_000,
    sample_every: int = 10_000,
) -> list[dict]:
    """Feed install ops at a fixed rate and drain with batch size k_batch.

    Events are rule arrivals; drains happen whenever the channel is free.
    Returns queue-length samples over the run. Rules are drawn from a small
    pool, the queue stores references so arbitrarily deep backlogs stay cheap.
    """
    timers = replace(cfg.timers, k_batch=k_batch)
    sim_cfg = NetworkConfig(
        internal_prefixes=cfg.internal_prefixes,
        telescope_prefixes=cfg.telescope_prefixes,
        impersonation_set=set(cfg.impersonation_set),
        anonymization_key=cfg.anonymization_key,
        timers=timers,
    )
    switch = SwitchSim(sim_cfg, capacity=1 << 30)
    control = ControlPlane(sim_cfg, SouthboundChannel(switch),
                           queue_capacity=max(n_events + 1, 1 << 20))
    pool = [
        MatRule(0x08000000 + i, 1000 + (i % 50_000), PROTO_TCP, RuleSide.MATCH_AS_DST,
                ttl_initial=3600.0)
        for i in range(10_000)
    ]
    interval = 1.0 / offered_rate
    samples = []
    now = 0.0
    for i in range(n_events):
        now = (i + 1) * interval
        control.enqueue_install(pool[i % len(pool)])
        if now >= control.busy_until and control.pending:
            control.drain_and_apply(now)
        if (i + 1) % sample_every == 0:
            samples.append({"event": i + 1, "t": now, "queue_len": len(control.pending),
                            "high_watermark": control.pending.high_watermark})
    # let the backlog drain once arrivals stop, unless it is divergent
    return samples


def timer_sweep(
    cfg: NetworkConfig,
    settings: Optional[list[tuple[float, int]]] = None,
    n_flows: int = 2000,
    seed: int = 7,
) -> list[dict]:
    """Replay one unanswered-heavy workload per (p_d, d_max) setting and report
    buffering-time percentiles of the expired packets."""
    if settings is None:
        settings = [(1e-5, 10), (1e-4, 100), (1e-3, 1000), (1e-2, 10_000)]
    spec = WorkloadSpec(
        n_flows=n_flows, flow_rate=400.0, answered_fraction=0.05,
        icmp_error_fraction=0.0, duplicate_prob=0.0,
    )
    rows = []
    for p_d, d_max in settings:
        timers = replace(cfg.timers, p_d=p_d, d_max=d_max)
        run_cfg = NetworkConfig(
            internal_prefixes=cfg.internal_prefixes,
            telescope_prefixes=cfg.telescope_prefixes,
            impersonation_set=set(cfg.impersonation_set),
            anonymization_key=cfg.anonymization_key,
            timers=timers,
        )
        pipeline = Pipeline(run_cfg, options=PipelineOptions(hash_buckets=1 << 16))
        pipeline.run(generate_workload(spec, seed, run_cfg))
        times = pipeline.buffering_times
        rows.append(
            {
                "p_d": p_d,
                "d_max": d_max,
                "expired": len(times),
                "p75": percentile(times, 75),
                "p95": percentile(times, 95),
                "p99": percentile(times, 99),
                "excess_p99": percentile(times, 99) - run_cfg.timers.dt,
            }
        )
    return rows


def dt_sweep(
    cfg: NetworkConfig,
    dts: Optional[list[float]] = None,
    n_flows: int = 20_000,
    seed: int = 11,
) -> list[dict]:
    """Misclassification of answered flows as the detection timeout varies."""
    if dts is None:
        dts = [0.01, 0.05, 0.1, 0.5, 1.0, 2.0]
    spec = WorkloadSpec(
        n_flows=n_flows, flow_rate=2000.0, answered_fraction=1.0,
        icmp_error_fraction=0.0, duplicate_prob=0.0,
    )
    rows = []
    for dt in dts:
        timers = replace(cfg.timers, dt=dt, dt_impersonated=min(0.07, dt / 2))
        run_cfg = NetworkConfig(
            internal_prefixes=cfg.internal_prefixes,
            telescope_prefixes=cfg.telescope_prefixes,
            impersonation_set=set(),
            anonymization_key=cfg.anonymization_key,
            timers=timers,
        )
        flows = plan_flows(spec, seed, run_cfg)
        answered = [f for f in flows if f.kind == "answered"]
        missed = sum(1 for f in answered if f.delay >= dt)
        rows.append(
            {
                "dt": dt,
                "answered_flows": len(answered),
                "misclassified": missed,
                "misclassification_rate": missed / len(answered) if answered else 0.0,
            }
        )
    return rows


def filter_efficiency(
    cfg: NetworkConfig,
    whitelist: set,
    spec: WorkloadSpec,
    seed: int = 3,
    options: Optional[PipelineOptions] = None,
) -> dict:
    """End-to-end replay reporting where packets were dropped or forwarded."""
    pipeline = Pipeline(cfg, whitelist=whitelist, options=options or PipelineOptions())
    summary = pipeline.run(generate_workload(spec, seed, cfg))
    sw = summary.switch
    total = max(1, summary.packets_in)
    return {
        "packets": summary.packets_in,
        "whitelist_share": sw["whitelist_hits"] / total,
        "dynamic_share": sw["flow_rule_hits"] / total,
        "dropped_share": summary.filtering_efficiency,
        "mirrored_share": sw["mirrored"] / total,
        "collected": summary.collected,
    }
