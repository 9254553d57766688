"""Control-plane loop: batches pending rule installs/deletes over the
southbound channel, consumes idle notifications, and keeps the engine's
rule-activity bitmap in sync.

Runs in its own logical context; the only inputs are the pending-rule FIFO
(fed by the detection engine) and idle-notification batches, the only
outputs are southbound calls and liveness sync events.
"""

from __future__ import annotations

from enum import Enum
from typing import Callable, NamedTuple, Optional

from .core import NetworkConfig
from .fsd import RuleSyncEvent
from .switchsim import IdleNotification, MatRule, RuleKey, SwitchSim
from .util import BoundedQueue


class RuleOpKind(Enum):
    INSTALL = "install"
    DELETE = "delete"


class RuleOp(NamedTuple):
    kind: RuleOpKind
    rule: Optional[MatRule] = None
    key: Optional[RuleKey] = None


class BatchReport(NamedTuple):
    ops_applied: int
    installs: int
    deletes: int
    latency: float
    per_rule_latency: float
    attempts: int
    completed_at: float


class ChannelError(RuntimeError):
    """Southbound call failure."""


class PendingRuleQueue(BoundedQueue):
    """Bounded FIFO of rule operations; order is preserved per op kind."""


class SouthboundChannel:
    """Thin abstraction over the switch programming interface.

    Latency comes from the switch's model; this layer only adds optional
    failure injection (a callable deciding per call index) for retry tests.
    """

    def __init__(self, switch: SwitchSim,
                 should_fail: Optional[Callable[[int], bool]] = None):
        self.switch = switch
        self.should_fail = should_fail
        self.calls = 0
        self.failures = 0

    def install(self, rules: list[MatRule], now: float) -> float:
        self.calls += 1
        if self.should_fail is not None and self.should_fail(self.calls):
            self.failures += 1
            raise ChannelError("install call failed")
        report = self.switch.install_rules(rules, now)
        return report.latency

    def delete(self, keys: list[RuleKey], now: float) -> float:
        self.calls += 1
        if self.should_fail is not None and self.should_fail(self.calls):
            self.failures += 1
            raise ChannelError("delete call failed")
        latency = self.switch.latency_model.call_latency(len(keys))
        self.switch.delete_rules(keys, now)
        return latency


SyncSink = Callable[[int, RuleSyncEvent, float], None]

_MAX_ATTEMPTS = 3
_BACKOFF_BASE = 0.010


class ControlPlane:
    def __init__(
        self,
        cfg: NetworkConfig,
        channel: SouthboundChannel,
        sync_sink: Optional[SyncSink] = None,
        queue_capacity: int = 1 << 20,
        whitelist: Optional[set[tuple[int, int]]] = None,
    ):
        self.cfg = cfg
        self.channel = channel
        self.sync_sink = sync_sink or (lambda ip, event, t: None)
        self.pending = PendingRuleQueue(queue_capacity)
        self.whitelist = whitelist if whitelist is not None else set()
        self.busy_until = float("-inf")
        self.reports: list[BatchReport] = []
        self.whitelist_rejects = 0
        self.failed_batches = 0

    # -- producers ---------------------------------------------------------

    def enqueue_install(self, rule: MatRule) -> bool:
        return self.pending.put(RuleOp(RuleOpKind.INSTALL, rule=rule))

    def on_idle_notifications(self, batch: list[IdleNotification], now: float) -> None:
        """Queue delete operations for idle rules.

        Keys naming static whitelist services are refused: the whitelist is
        administrator state, never evicted. Duplicate notifications are
        harmless, deletion is idempotent.
        """
        for note in batch:
            if (note.ip, note.port) in self.whitelist:
                self.whitelist_rejects += 1
                continue
            self.pending.put(
                RuleOp(RuleOpKind.DELETE, key=(note.ip, note.port, note.proto, note.side))
            )

    # -- consumer ----------------------------------------------------------

    def _sync_install(self, rules: list[MatRule], when: float) -> None:
        for rule in rules:
            real = self.cfg.resolve_internal(rule.ip)
            if real is not None:
                self.sync_sink(real, RuleSyncEvent.INSTALLED, when)

    def _sync_delete(self, keys: list[RuleKey], when: float) -> None:
        for ip, _port, _proto, _side in keys:
            real = self.cfg.resolve_internal(ip)
            if real is not None:
                self.sync_sink(real, RuleSyncEvent.DELETED, when)

    def drain_and_apply(self, now: float) -> Optional[BatchReport]:
        """Pop up to k_batch operations and push them southbound.

        One batched call per op kind (installs first). Per-rule latency is
        the call latency divided by the batch size. On channel failure the
        ops return to the head of the queue and the call is retried with
        exponential backoff, up to three attempts per drain. Returns None
        when there is nothing to do or the channel is still busy.
        """
        if now < self.busy_until or not self.pending:
            return None
        ops = self.pending.drain(self.cfg.timers.k_batch)
        installs = [op.rule for op in ops if op.kind == RuleOpKind.INSTALL]
        deletes = [op.key for op in ops if op.kind == RuleOpKind.DELETE]
        t = now
        attempts = 0
        total_latency = 0.0
        while True:
            attempts += 1
            try:
                if installs:
                    lat = self.channel.install(installs, t)
                    t += lat
                    total_latency += lat
                    self._sync_install(installs, t)
                if deletes:
                    lat = self.channel.delete(deletes, t)
                    t += lat
                    total_latency += lat
                    self._sync_delete(deletes, t)
                break
            except ChannelError:
                if attempts >= _MAX_ATTEMPTS:
                    self.pending.put_back(ops)
                    self.failed_batches += 1
                    self.busy_until = t
                    return None
                t += _BACKOFF_BASE * (2 ** (attempts - 1))
        self.busy_until = t
        n = len(ops)
        report = BatchReport(
            ops_applied=n,
            installs=len(installs),
            deletes=len(deletes),
            latency=total_latency,
            per_rule_latency=total_latency / n if n else 0.0,
            attempts=attempts,
            completed_at=t,
        )
        self.reports.append(report)
        return report

    def stats(self) -> dict[str, float]:
        return {
            "pending": len(self.pending),
            "pending_high_watermark": self.pending.high_watermark,
            "pending_dropped": self.pending.dropped,
            "batches": len(self.reports),
            "whitelist_rejects": self.whitelist_rejects,
            "failed_batches": self.failed_batches,
            "channel_calls": self.channel.calls,
            "channel_failures": self.channel.failures,
        }
