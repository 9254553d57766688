"""Functional model of the filtering switch data plane.

Two filter stages run on every packet: a static per-service whitelist and a
dynamic per-flow table with idle-TTL eviction. Misses are anonymized,
truncated and copied onto the mirror queue toward the detection engine.
Address obfuscation happens at ingress, so both the dynamic table and the
mirror copies live in the obfuscated address domain; static whitelist
entries naming internal services are translated into that domain when
loaded.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional

from . import anonymizer
from .core import NetworkConfig, PacketRecord, ip_to_int
from .util import BoundedQueue


class RuleSide(Enum):
    MATCH_AS_DST = "dst"
    MATCH_AS_SRC = "src"


class SwitchAction(Enum):
    DROPPED_WHITELIST = "whitelist"
    DROPPED_FLOW_RULE = "flow_rule"
    MIRRORED = "mirrored"
    DROPPED_BACKPRESSURE = "backpressure"


RuleKey = tuple[int, int, int, RuleSide]  # ip, port, proto, side


@dataclass(slots=True)
class MatRule:
    """One exact-match table entry with idle-TTL state."""

    ip: int
    port: int
    proto: int
    side: RuleSide
    ttl_initial: float
    ttl_remaining: float = 0.0
    installed_at: float = 0.0
    effective_at: float = 0.0
    matched_in_interval: bool = False

    def key(self) -> RuleKey:
        return (self.ip, self.port, self.proto, self.side)


class IdleNotification(NamedTuple):
    ip: int
    port: int
    proto: int
    side: RuleSide
    fired_at: float


class InstallReport(NamedTuple):
    installed: int
    rejected: int
    latency: float


class LatencyModel:
    """Southbound call latency: a + b*n + c*n^2 for a batch of n operations.

    The linear term amortizes the per-call cost; the quadratic term makes the
    per-rule cost re-inflect for very large batches. Defaults put the
    per-rule minimum around n = sqrt(a/c) ~ 450.
    """

    def __init__(self, a: float = 2e-3, b: float = 1e-5, c: float = 1e-8):
        self.a = a
        self.b = b
        self.c = c

    def call_latency(self, n: int) -> float:
        return self.a + self.b * n + self.c * n * n

    def per_rule(self, n: int) -> float:
        return self.call_latency(n) / n


def load_whitelist(path: str, cfg: Optional[NetworkConfig] = None) -> set[tuple[int, int]]:
    """Parse an "ip,port" per line whitelist file.

    Internal entries are translated to the obfuscated match domain when a
    config is given; blank lines and #-comments are skipped.
    """
    entries: set[tuple[int, int]] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                ip_text, port_text = line.split(",")
                ip = ip_to_int(ip_text.strip())
                port = int(port_text.strip())
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad whitelist entry {line!r}") from exc
            if cfg is not None and cfg.is_internal(ip):
                ip = anonymizer.obfuscate_ip(ip, cfg.anonymization_key)
            entries.add((ip, port))
    return entries


class SwitchSim:
    """Single-context switch state machine.

    mirror_out and notify_out are the only boundaries crossed by other
    contexts; both are bounded FIFO queues safe to drain elsewhere.
    """

    def __init__(
        self,
        cfg: NetworkConfig,
        whitelist: Optional[set[tuple[int, int]]] = None,
        capacity: int = 100_000,
        mirror_capacity: int = 65_536,
        notify_capacity: int = 65_536,
        latency_model: Optional[LatencyModel] = None,
    ):
        self.cfg = cfg
        self.whitelist: set[tuple[int, int]] = set(whitelist or ())
        self.capacity = capacity
        self.table: dict[RuleKey, MatRule] = {}
        self.mirror_out = BoundedQueue(mirror_capacity)
        self.notify_out = BoundedQueue(notify_capacity)
        self.latency_model = latency_model or LatencyModel()
        self._last_tick: Optional[float] = None
        # per-table match/miss counters
        self.whitelist_hits = 0
        self.flow_rule_hits = 0
        self.mirrored = 0
        self.backpressure_drops = 0
        self.install_rejected = 0

    # -- data path ---------------------------------------------------------

    def _match_view(self, pkt: PacketRecord) -> tuple[int, int]:
        """(src_ip, dst_ip) as seen by the match stages: obfuscated for internal
        addresses, untouched for impersonated flows."""
        if self.cfg.is_impersonated_flow(pkt):
            return pkt.src_ip, pkt.dst_ip
        key = self.cfg.anonymization_key
        src = pkt.src_ip
        dst = pkt.dst_ip
        if self.cfg.is_internal(src):
            src = anonymizer.obfuscate_ip(src, key)
        if self.cfg.is_internal(dst):
            dst = anonymizer.obfuscate_ip(dst, key)
        return src, dst

    def process_packet(
        self, pkt: PacketRecord, now: float
    ) -> tuple[SwitchAction, Optional[PacketRecord]]:
        """Run one packet through whitelist, dynamic table, then the mirror path.

        The whitelist is checked first on (dst ip, dst port); a dynamic match
        on either the dst-side or src-side key resets that rule's TTL. A miss
        emits the transformed copy on mirror_out.
        """
        src_view, dst_view = self._match_view(pkt)
        if (dst_view, pkt.dst_port) in self.whitelist:
            self.whitelist_hits += 1
            return SwitchAction.DROPPED_WHITELIST, None
        rule = self.table.get((dst_view, pkt.dst_port, pkt.proto, RuleSide.MATCH_AS_DST))
        if rule is None or rule.effective_at > now:
            rule = self.table.get((src_view, pkt.src_port, pkt.proto, RuleSide.MATCH_AS_SRC))
        if rule is not None and rule.effective_at <= now:
            rule.ttl_remaining = rule.ttl_initial
            rule.matched_in_interval = True
            self.flow_rule_hits += 1
            return SwitchAction.DROPPED_FLOW_RULE, None
        mirrored = anonymizer.mirror_transform(pkt, self.cfg)
        if not self.mirror_out.put(mirrored):
            self.backpressure_drops += 1
            return SwitchAction.DROPPED_BACKPRESSURE, None
        self.mirrored += 1
        return SwitchAction.MIRRORED, mirrored

    # -- control path ------------------------------------------------------

    def install_rules(self, batch: list[MatRule], now: float) -> InstallReport:
        """Install a batch; rules become effective after the modeled call latency.

        Rules beyond the table capacity are rejected and reported, not
        silently dropped. Reinstalling an existing key refreshes it.
        """
        if not batch:
            return InstallReport(0, 0, 0.0)
        latency = self.latency_model.call_latency(len(batch))
        installed = 0
        rejected = 0
        for rule in batch:
            key = rule.key()
            if key not in self.table and len(self.table) >= self.capacity:
                rejected += 1
                continue
            rule.installed_at = now
            rule.effective_at = now + latency
            rule.ttl_remaining = rule.ttl_initial
            rule.matched_in_interval = False
            self.table[key] = rule
            installed += 1
        self.install_rejected += rejected
        return InstallReport(installed, rejected, latency)

    def delete_rules(self, keys: list[RuleKey], now: float) -> int:
        removed = 0
        for key in keys:
            if self.table.pop(key, None) is not None:
                removed += 1
        return removed

    def tick(self, now: float) -> list[IdleNotification]:
        """Idle poll: decrement TTLs of rules unmatched since the last tick.

        Rules whose TTL reaches zero are removed and a notification is queued
        on notify_out (and returned). Matched rules keep the TTL already reset
        on match; only their interval flag is cleared.
        """
        if self._last_tick is not None and now < self._last_tick + self.cfg.timers.query_interval:
            return []
        self._last_tick = now
        fired: list[IdleNotification] = []
        expired_keys: list[RuleKey] = []
        for key, rule in self.table.items():
            if rule.matched_in_interval:
                rule.matched_in_interval = False
                continue
            if rule.effective_at > now:
                continue  # not yet active; countdown starts once effective
            rule.ttl_remaining -= self.cfg.timers.query_interval
            if rule.ttl_remaining <= 0:
                rule.ttl_remaining = 0.0
                expired_keys.append(key)
                fired.append(IdleNotification(rule.ip, rule.port, rule.proto, rule.side, now))
        for key in expired_keys:
            del self.table[key]
        for note in fired:
            self.notify_out.put(note)
        return fired

    # -- reporting ---------------------------------------------------------

    def counters(self) -> dict[str, int]:
        return {
            "whitelist_hits": self.whitelist_hits,
            "flow_rule_hits": self.flow_rule_hits,
            "mirrored": self.mirrored,
            "backpressure_drops": self.backpressure_drops,
            "install_rejected": self.install_rejected,
            "table_size": len(self.table),
        }

    def dump_counters(self) -> str:
        return "\n".join(f"{k} {v}" for k, v in self.counters().items())
