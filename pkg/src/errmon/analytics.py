"""Offline computations over collected erroneous-traffic records.

Inputs are the collector's newline-delimited JSON rows. Internal addresses in
records are usually obfuscated; analytics resolves them back through the
deployment key (authorized analysis) to classify hosts by telescope/active/
dark. Aggregations: per-hour sender statistics, per-port radiation split by
host class, sender scan-pattern classification, and the per-host unique-
sender CCDF.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from enum import Enum
from typing import Iterable, Optional

from .core import NetworkConfig, ip_to_int


class InsufficientData(ValueError):
    pass


class ScanClass(Enum):
    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"
    MIXED = "mixed"


class HostClass(Enum):
    TELESCOPE = "telescope"
    ACTIVE = "active"
    DARK = "dark"


def load_records(paths: Iterable[str]) -> list[dict]:
    rows: list[dict] = []
    for path in paths:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rows.append(json.loads(line))
    return rows


def _pstd(values: list[float]) -> float:
    if not values:
        return 0.0
    mean = sum(values) / len(values)
    return math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))


def load_acked_prefixes(path: str) -> list[tuple[int, int]]:
    """Newline-delimited CIDR prefixes of acknowledged scanners -> (net, mask)."""
    import ipaddress

    prefixes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            net = ipaddress.IPv4Network(line, strict=False)
            prefixes.append((int(net.network_address), int(net.netmask)))
    return prefixes


def _matches_prefix(ip: int, prefixes: list[tuple[int, int]]) -> bool:
    return any(ip & mask == net for net, mask in prefixes)


def hourly_sender_stats(
    records: list[dict],
    cfg: Optional[NetworkConfig] = None,
    acked_prefixes: Optional[list[tuple[int, int]]] = None,
) -> list[dict]:
    """One row per hour of incoming traffic: unique senders, unique ports,
    mean/std of distinct senders per internal destination host, std of
    distinct ports per host, and acknowledged-scanner count (per-prefix
    match against the optional list)."""
    hours: dict[int, list[dict]] = defaultdict(list)
    for row in records:
        if row.get("direction") != "in":
            continue
        hours[int(row["ts"] // 3600)].append(row)
    out = []
    for hour in sorted(hours):
        rows = hours[hour]
        senders = {row["src_ip"] for row in rows}
        ports = {row["dst_port"] for row in rows}
        per_host_senders: dict[str, set] = defaultdict(set)
        per_host_ports: dict[str, set] = defaultdict(set)
        for row in rows:
            per_host_senders[row["dst_ip"]].add(row["src_ip"])
            per_host_ports[row["dst_ip"]].add(row["dst_port"])
        sender_counts = [len(s) for s in per_host_senders.values()]
        port_counts = [len(s) for s in per_host_ports.values()]
        acked = 0
        if acked_prefixes:
            acked = sum(
                1 for ip_text in senders if _matches_prefix(ip_to_int(ip_text), acked_prefixes)
            )
        out.append(
            {
                "hour": hour,
                "unique_src_ips": len(senders),
                "unique_ports": len(ports),
                "mean_senders_per_host": (
                    sum(sender_counts) / len(sender_counts) if sender_counts else 0.0
                ),
                "std_senders_per_host": _pstd(sender_counts),
                "std_ports": _pstd(port_counts),
                "acked_scanner_count": acked,
            }
        )
    return out


def host_class(row: dict, cfg: NetworkConfig) -> Optional[HostClass]:
    """Telescope membership wins; otherwise the record's liveness tag decides."""
    dst_real = cfg.resolve_internal(ip_to_int(row["dst_ip"]))
    if dst_real is None:
        return None
    if cfg.is_telescope(dst_real):
        return HostClass.TELESCOPE
    return HostClass.ACTIVE if row.get("dst_liveness") == "alive" else HostClass.DARK


def per_port_histogram(records: list[dict], klass: HostClass, cfg: NetworkConfig) -> dict[int, int]:
    """Incoming erroneous packets per destination port for one host class."""
    counts: dict[int, int] = defaultdict(int)
    for row in records:
        if row.get("direction") != "in":
            continue
        if host_class(row, cfg) == klass:
            counts[row["dst_port"]] += 1
    return dict(counts)


def classify_scanner(
    sender_records: list[dict],
    min_packets: int = 10,
    host_spread: int = 100,
    port_few: int = 5,
    port_spread: int = 100,
    host_few: int = 5,
) -> ScanClass:
    """Classify one sender's record set by destination spread.

    Horizontal: many destination hosts on few ports. Vertical: host-focused
    senders, either sweeping many ports on few hosts or hammering a handful
    of ports on them. Anything else is mixed. Convention fixed here:
    port-spread means vertical, host-spread means horizontal.
    """
    if len(sender_records) < min_packets:
        raise InsufficientData(
            f"{len(sender_records)} records, need at least {min_packets}"
        )
    hosts = {row["dst_ip"] for row in sender_records}
    ports = {row["dst_port"] for row in sender_records}
    d, p = len(hosts), len(ports)
    if d >= host_spread and p <= port_few:
        return ScanClass.HORIZONTAL
    if d <= host_few and (p >= port_spread or p <= port_few):
        return ScanClass.VERTICAL
    return ScanClass.MIXED


def sender_ccdf(records: list[dict]) -> list[tuple[int, float]]:
    """Empirical CCDF over internal destination hosts of their distinct
    external sender count: P(senders per host >= k) for each observed k."""
    per_host: dict[str, set] = defaultdict(set)
    for row in records:
        if row.get("direction") != "in":
            continue
        per_host[row["dst_ip"]].add(row["src_ip"])
    counts = sorted(len(s) for s in per_host.values())
    n = len(counts)
    if n == 0:
        return []
    out = []
    for k in sorted(set(counts)):
        at_least = sum(1 for c in counts if c >= k)
        out.append((k, at_least / n))
    return out


def render_table(rows: list[dict], columns: Optional[list[str]] = None) -> str:
    """Tab-separated table with a header row."""
    if not rows:
        return ""
    cols = columns or list(rows[0].keys())
    lines = ["\t".join(cols)]
    for row in rows:
        lines.append("\t".join(_fmt(row.get(c, "")) for c in cols))
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)
