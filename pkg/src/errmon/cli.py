"""Command line entry point.

Subcommands: run (replay a trace or synthetic workload end to end),
experiment (named parameter sweeps), stats/ports/scanners/ccdf (analytics
over collected record files).
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Optional

from . import analytics, experiments
from .config import ANON_KEY_ENV, AppConfig, ConfigError, load_config
from .ingest import Pipeline, generate_workload, read_pcap, write_pcap
from .switchsim import load_whitelist


def _load(config_path: str) -> AppConfig:
    return load_config(config_path)


def _build_pipeline(app: AppConfig) -> Pipeline:
    whitelist = None
    if app.whitelist_file:
        whitelist = load_whitelist(app.whitelist_file, app.network)
    return Pipeline(app.network, whitelist=whitelist, options=app.options)


def run_pipeline(config_path: str, trace: Optional[str], spec_path: Optional[str],
                 out_dir: str, seed: int, dump_pcap: bool = False) -> int:
    """Replay end to end and write records, metrics and a run summary."""
    app = _load(config_path)
    pipeline = _build_pipeline(app)
    if trace:
        stream = read_pcap(trace)
    else:
        spec_app = _load(spec_path) if spec_path and spec_path != config_path else app
        if spec_app.workload is None:
            print(f"{spec_path or config_path}: no [workload] section and no trace given",
                  file=sys.stderr)
            return 2
        stream = generate_workload(spec_app.workload, seed, app.network)
    summary = pipeline.run(stream)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "records.ndjson"), "wb") as fh:
        fh.write(pipeline.collector.serialize())
    with open(os.path.join(out_dir, "metrics.ndjson"), "wb") as fh:
        fh.write(pipeline.metrics_bytes())
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(summary.render())
    if pipeline.responder is not None and pipeline.responder.transcripts:
        with open(os.path.join(out_dir, "transcripts.ndjson"), "w", encoding="utf-8") as fh:
            for transcript in pipeline.responder.transcripts:
                fh.write(transcript.to_json_line() + "\n")
    if dump_pcap:
        write_pcap(os.path.join(out_dir, "erroneous.pcap"),
                   (rec.pkt for rec in pipeline.collector.records))
    print(summary.render(), end="")
    return 0


def run_experiment(name: str, config_path: str, out_dir: str, seed: int) -> int:
    app = _load(config_path)
    cfg = app.network
    os.makedirs(out_dir, exist_ok=True)
    if name == "batch_sweep":
        rows = experiments.batch_sweep()
        table = analytics.render_table(rows)
    elif name == "timer_sweep":
        rows = experiments.timer_sweep(cfg, seed=seed)
        table = analytics.render_table(rows)
    elif name == "dt_sweep":
        rows = experiments.dt_sweep(cfg, seed=seed)
        table = analytics.render_table(rows)
    elif name == "queue_stability":
        rows = []
        for k in (1, 200):
            for sample in experiments.queue_stability(cfg, k, offered_rate=5000.0,
                                                      n_events=200_000):
                sample["k"] = k
                rows.append(sample)
        table = analytics.render_table(rows, ["k", "event", "t", "queue_len", "high_watermark"])
    elif name == "filter_efficiency":
        if app.workload is None:
            print(f"{config_path}: filter_efficiency needs a [workload] section", file=sys.stderr)
            return 2
        whitelist = load_whitelist(app.whitelist_file, cfg) if app.whitelist_file else set()
        row = experiments.filter_efficiency(cfg, whitelist, app.workload, seed=seed,
                                            options=app.options)
        table = analytics.render_table([row])
    else:
        print(f"unknown experiment {name!r}", file=sys.stderr)
        return 2
    out_path = os.path.join(out_dir, f"{name}.tsv")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    print(f"# written to {out_path}", file=sys.stderr)
    return 0


def _analytics_cfg(args) -> Optional[object]:
    return _load(args.config).network if args.config else None


def _cmd_stats(args) -> int:
    records = analytics.load_records(args.records)
    acked = analytics.load_acked_prefixes(args.acked) if args.acked else None
    rows = analytics.hourly_sender_stats(records, _analytics_cfg(args), acked)
    print(analytics.render_table(rows), end="")
    return 0


def _cmd_ports(args) -> int:
    cfg = _analytics_cfg(args)
    if cfg is None:
        print("--config is required to classify hosts", file=sys.stderr)
        return 2
    records = analytics.load_records(args.records)
    klass = analytics.HostClass(args.host_class)
    hist = analytics.per_port_histogram(records, klass, cfg)
    rows = [{"port": port, "count": count} for port, count in sorted(hist.items())]
    print(analytics.render_table(rows, ["port", "count"]), end="")
    return 0


def _cmd_scanners(args) -> int:
    records = analytics.load_records(args.records)
    by_sender: dict[str, list[dict]] = {}
    for row in records:
        by_sender.setdefault(row["src_ip"], []).append(row)
    rows = []
    for sender in sorted(by_sender):
        recs = by_sender[sender]
        try:
            klass = analytics.classify_scanner(recs, min_packets=args.min_packets)
        except analytics.InsufficientData:
            continue
        rows.append(
            {
                "sender": sender,
                "packets": len(recs),
                "hosts": len({r["dst_ip"] for r in recs}),
                "ports": len({r["dst_port"] for r in recs}),
                "class": klass.value,
            }
        )
    print(analytics.render_table(rows, ["sender", "packets", "hosts", "ports", "class"]), end="")
    return 0


def _cmd_ccdf(args) -> int:
    records = analytics.load_records(args.records)
    rows = [{"senders_per_host": k, "ccdf": v} for k, v in analytics.sender_ccdf(records)]
    print(analytics.render_table(rows, ["senders_per_host", "ccdf"]), end="")
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="errmon",
        description="Erroneous-traffic monitor: replay, experiments and analytics. "
        f"The anonymization key may be supplied via ${ANON_KEY_ENV}.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="replay a trace or synthetic workload")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--trace", help="pcap file to replay")
    p_run.add_argument("--spec", help="config file whose [workload] section drives the generator")
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--dump-pcap", action="store_true",
                       help="also dump collected packets as pcap")

    p_exp = sub.add_parser("experiment", help="run a named parameter sweep")
    p_exp.add_argument("--experiment", required=True,
                       choices=["batch_sweep", "timer_sweep", "dt_sweep",
                                "queue_stability", "filter_efficiency"])
    p_exp.add_argument("--config", required=True)
    p_exp.add_argument("--out", required=True)
    p_exp.add_argument("--seed", type=int, default=0)

    for name, fn in (("stats", _cmd_stats), ("ports", _cmd_ports),
                     ("scanners", _cmd_scanners), ("ccdf", _cmd_ccdf)):
        p = sub.add_parser(name, help=f"analytics: {name}")
        p.add_argument("--records", nargs="+", required=True)
        p.add_argument("--config")
        if name == "stats":
            p.add_argument("--acked", help="acknowledged-scanner prefix list")
        if name == "ports":
            p.add_argument("--host-class", required=True,
                           choices=[c.value for c in analytics.HostClass])
        if name == "scanners":
            p.add_argument("--min-packets", type=int, default=10)
        p.set_defaults(func=fn)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            if not args.trace and not args.spec:
                args.spec = args.config
            return run_pipeline(args.config, args.trace, args.spec, args.out, args.seed,
                                args.dump_pcap)
        if args.command == "experiment":
            return run_experiment(args.experiment, args.config, args.out, args.seed)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
