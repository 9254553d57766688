"""Flow-state detection engine.

Buffers suspicious packets until either a qualifying response arrives (flow
is benign, filter rules are emitted) or the detection timeout expires (packet
goes to the collector). State lives in an open-hashing flow table plus a
fixed-capacity descriptor ring with a parallel packet buffer; expiry uses a
single lazy timer walked from the ring head. The whole reception path
(on_packet, check_timers, clean_benign) runs in one execution context by
design: a separate timer context would race on the ring. Rules and collected
packets leave the engine only through queues/sinks owned by other contexts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, NamedTuple, Optional

from .core import (
    Endpoint,
    FlowKey,
    NetworkConfig,
    NotInternalError,
    PacketRecord,
    is_icmp_error,
    make_flow_key,
)
from .switchsim import MatRule, RuleSide
from .util import mix64

NEG_INF = float("-inf")


class FlowStatus(IntEnum):
    SUSPICIOUS = 0
    BENIGN = 1


class FsdAction(Enum):
    BUFFERED = "buffered"
    DROPPED_DUPLICATE = "duplicate"
    BENIGN_DETECTED = "benign"
    DROPPED_TRANSIENT = "transient"
    DROPPED_OVERFLOW = "overflow"
    COLLECTED_ICMP_ERROR = "icmp_error"


class CollectReason(Enum):
    DT_EXPIRED = "dt_expired"
    ICMP_ERROR = "icmp_error"


class CollectItem(NamedTuple):
    pkt: PacketRecord
    reason: CollectReason
    t_arr: float
    collected_at: float


class ExpiredPacket(NamedTuple):
    pkt: PacketRecord
    t_arr: float
    expired_at: float


class FsdResult(NamedTuple):
    action: FsdAction
    rules: tuple[MatRule, ...] = ()


@dataclass(slots=True)
class FlowEntry:
    key: FlowKey
    status: FlowStatus
    t_arr: float
    initiator: Endpoint
    t_resp: Optional[float] = None
    responder: Optional[Endpoint] = None
    slots: list[int] = field(default_factory=list)  # live descriptor ring positions


@dataclass(slots=True)
class Descriptor:
    t_arr: float
    eff_dt: float
    entry: Optional[FlowEntry]  # None once the flow was answered
    slot: int


class DescriptorRing:
    """Fixed-capacity FIFO of descriptors with a parallel raw-packet buffer.

    Arrival times are non-decreasing head to tail. A buffer slot is freed
    exactly once: either when its flow is answered (descriptor nulled) or
    when the descriptor is popped after expiry.
    """

    __slots__ = ("capacity", "_desc", "_buf", "_head", "size", "frees", "allocs")

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._desc: list[Optional[Descriptor]] = [None] * capacity
        self._buf: list[Optional[PacketRecord]] = [None] * capacity
        self._head = 0
        self.size = 0
        self.allocs = 0
        self.frees = 0

    def push(self, pkt: PacketRecord, t_arr: float, eff_dt: float,
             entry: FlowEntry) -> Optional[int]:
        if self.size >= self.capacity:
            return None
        slot = (self._head + self.size) % self.capacity
        self._desc[slot] = Descriptor(t_arr, eff_dt, entry, slot)
        self._buf[slot] = pkt
        self.size += 1
        self.allocs += 1
        return slot

    def head(self) -> Optional[Descriptor]:
        return self._desc[self._head] if self.size else None

    def pop_head(self) -> Descriptor:
        desc = self._desc[self._head]
        assert desc is not None
        self._desc[self._head] = None
        self._head = (self._head + 1) % self.capacity
        self.size -= 1
        return desc

    def packet_at(self, slot: int) -> Optional[PacketRecord]:
        return self._buf[slot]

    def free_slot(self, slot: int) -> PacketRecord:
        pkt = self._buf[slot]
        if pkt is None:
            raise AssertionError(f"double free of buffer slot {slot}")
        self._buf[slot] = None
        self.frees += 1
        return pkt

    def null_descriptor(self, slot: int) -> None:
        desc = self._desc[slot]
        assert desc is not None
        desc.entry = None

    def live_count(self) -> int:
        return sum(1 for d in self._desc if d is not None and d.entry is not None)


class LivenessBitmaps:
    """Two per-host refresh-time maps over the internal address space.

    One tracks packets the engine itself processed from a host, the other
    tracks whether an active switch rule currently covers the host. A host is
    alive if either was refreshed within t_alive (bitwise OR of the bitmaps).
    """

    __slots__ = ("cfg", "nf_seen", "rule_active")

    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        self.nf_seen = [NEG_INF] * cfg.internal_size
        self.rule_active = [NEG_INF] * cfg.internal_size

    def refresh_nf(self, ip: int, now: float) -> None:
        self.nf_seen[self.cfg.internal_index(ip)] = now

    def refresh_rule(self, ip: int, now: float) -> None:
        self.rule_active[self.cfg.internal_index(ip)] = now

    def clear_rule(self, ip: int) -> None:
        self.rule_active[self.cfg.internal_index(ip)] = NEG_INF

    def alive(self, ip: int, now: float) -> bool:
        idx = self.cfg.internal_index(ip)
        horizon = self.cfg.timers.t_alive
        return (now - self.nf_seen[idx]) <= horizon or (now - self.rule_active[idx]) <= horizon


class RuleSyncEvent(Enum):
    INSTALLED = "installed"
    DELETED = "deleted"


class FsdEngine:
    """Single-context detection engine fed by the switch mirror path.

    rule_sink receives each MatRule emitted for a newly benign flow;
    collect_sink receives CollectItem for every packet declared erroneous.
    Both are plain callables so the pipeline can wire them to queues.
    """

    def __init__(
        self,
        cfg: NetworkConfig,
        rule_sink: Optional[Callable[[MatRule], bool]] = None,
        collect_sink: Optional[Callable[[CollectItem], None]] = None,
        hash_buckets: int = 1 << 20,
        ring_capacity: int = 65_536,
        hash_seed: int = 0,
        store_duplicates: bool = False,
    ):
        if hash_buckets & (hash_buckets - 1):
            raise ValueError("hash_buckets must be a power of two")
        self.cfg = cfg
        self.rule_sink = rule_sink or (lambda rule: True)
        self.collect_sink = collect_sink or (lambda item: None)
        self.hash_buckets = hash_buckets
        self.hash_seed = hash_seed
        self.store_duplicates = store_duplicates
        self._buckets: list[Optional[list[FlowEntry]]] = [None] * hash_buckets
        self.ring = DescriptorRing(ring_capacity)
        self.liveness = LivenessBitmaps(cfg)
        self._clean_cursor = 0
        self.hash_entries = 0
        # counters
        self.buffered = 0
        self.duplicates = 0
        self.benign_detected = 0
        self.transient_drops = 0
        self.overflow_drops = 0
        self.icmp_errors = 0
        self.expired = 0
        self.rules_emitted = 0
        self.rules_dropped = 0
        # impersonation-set emptiness decides the cheap expiry lower bound
        self._min_eff_dt = (
            cfg.timers.dt_impersonated if cfg.impersonation_set else cfg.timers.dt
        )

    # -- hash table --------------------------------------------------------

    def _bucket_index(self, key: FlowKey) -> int:
        w1 = (key.ep_lo.ip << 32) | key.ep_hi.ip
        w2 = (key.ep_lo.port << 24) | (key.ep_hi.port << 8) | key.proto
        h = mix64(w1 ^ self.hash_seed)
        h = mix64(h ^ w2)
        return h & (self.hash_buckets - 1)

    def _lookup(self, key: FlowKey) -> Optional[FlowEntry]:
        chain = self._buckets[self._bucket_index(key)]
        if chain:
            for entry in chain:
                if entry.key == key:
                    return entry
        return None

    def _insert(self, entry: FlowEntry) -> None:
        idx = self._bucket_index(entry.key)
        chain = self._buckets[idx]
        if chain is None:
            self._buckets[idx] = [entry]
        else:
            chain.append(entry)
        self.hash_entries += 1

    def _remove(self, entry: FlowEntry) -> None:
        idx = self._bucket_index(entry.key)
        chain = self._buckets[idx]
        if chain is not None:
            try:
                chain.remove(entry)
            except ValueError:
                return
            self.hash_entries -= 1
            if not chain:
                self._buckets[idx] = None

    # -- helpers -----------------------------------------------------------

    def _effective_dt(self, pkt: PacketRecord) -> float:
        if self.cfg.is_impersonated_endpoint(pkt.dst_ip, pkt.dst_port, pkt.proto):
            return self.cfg.timers.dt_impersonated
        return self.cfg.timers.dt

    def _collect(self, pkt: PacketRecord, reason: CollectReason, t_arr: float,
                 now: float) -> None:
        self.collect_sink(CollectItem(pkt, reason, t_arr, now))

    def _expire_aged_slots(self, entry: FlowEntry, now: float) -> None:
        """Collect and release every buffered packet of the entry older than
        its detection timeout (lazy expiry met on the packet path)."""
        remaining: list[int] = []
        for slot in entry.slots:
            desc = self.ring._desc[slot]
            assert desc is not None and desc.entry is entry
            if now - desc.t_arr >= desc.eff_dt:
                pkt = self.ring.free_slot(slot)
                desc.entry = None
                self.expired += 1
                self._collect(pkt, CollectReason.DT_EXPIRED, desc.t_arr, now)
            else:
                remaining.append(slot)
        entry.slots = remaining
        if not remaining:
            self._remove(entry)

    def _release_answered(self, entry: FlowEntry) -> None:
        for slot in entry.slots:
            self.ring.free_slot(slot)
            self.ring.null_descriptor(slot)
        entry.slots = []

    # -- operations --------------------------------------------------------

    def on_packet(self, pkt: PacketRecord, now: float) -> FsdResult:
        """Classify one mirrored packet.

        ICMP error messages are erroneous by definition and go straight to
        the collector. Otherwise: no flow state means the packet is buffered
        as suspicious; a same-direction packet of a suspicious flow is a
        duplicate; an opposite-direction packet is the response that makes
        the flow benign and emits the two filter rules keyed on the responder
        endpoint; packets of an already-benign flow are dropped while the
        rules take effect. A suspicious entry whose timeout already elapsed
        is expired first, and the arriving packet starts a fresh flow.
        """
        src_real = self.cfg.resolve_internal(pkt.src_ip)
        if src_real is not None:
            self.liveness.refresh_nf(src_real, now)
        if is_icmp_error(pkt):
            self.icmp_errors += 1
            self._collect(pkt, CollectReason.ICMP_ERROR, now, now)
            return FsdResult(FsdAction.COLLECTED_ICMP_ERROR)
        key = make_flow_key(pkt)
        entry = self._lookup(key)
        if entry is not None and entry.status == FlowStatus.SUSPICIOUS:
            self._expire_aged_slots(entry, now)
            if not entry.slots:
                entry = None
        if entry is None:
            eff = self._effective_dt(pkt)
            new_entry = FlowEntry(
                key=key,
                status=FlowStatus.SUSPICIOUS,
                t_arr=now,
                initiator=Endpoint(pkt.src_ip, pkt.src_port),
            )
            slot = self.ring.push(pkt, now, eff, new_entry)
            if slot is None:
                self.overflow_drops += 1
                return FsdResult(FsdAction.DROPPED_OVERFLOW)
            new_entry.slots.append(slot)
            self._insert(new_entry)
            self.buffered += 1
            return FsdResult(FsdAction.BUFFERED)
        if entry.status == FlowStatus.BENIGN:
            self.transient_drops += 1
            return FsdResult(FsdAction.DROPPED_TRANSIENT)
        if Endpoint(pkt.src_ip, pkt.src_port) == entry.initiator:
            if self.store_duplicates:
                slot = self.ring.push(pkt, now, self._effective_dt(pkt), entry)
                if slot is None:
                    self.overflow_drops += 1
                    return FsdResult(FsdAction.DROPPED_OVERFLOW)
                entry.slots.append(slot)
                self.buffered += 1
                return FsdResult(FsdAction.BUFFERED)
            self.duplicates += 1
            return FsdResult(FsdAction.DROPPED_DUPLICATE)
        # response: opposite direction, same key, not an ICMP error
        entry.status = FlowStatus.BENIGN
        entry.t_resp = now
        entry.responder = Endpoint(pkt.src_ip, pkt.src_port)
        self._release_answered(entry)
        rules = (
            MatRule(pkt.src_ip, pkt.src_port, pkt.proto, RuleSide.MATCH_AS_DST,
                    ttl_initial=self.cfg.timers.rule_ttl),
            MatRule(pkt.src_ip, pkt.src_port, pkt.proto, RuleSide.MATCH_AS_SRC,
                    ttl_initial=self.cfg.timers.rule_ttl),
        )
        for rule in rules:
            if self.rule_sink(rule):
                self.rules_emitted += 1
            else:
                self.rules_dropped += 1
        self.benign_detected += 1
        return FsdResult(FsdAction.BENIGN_DETECTED, rules)

    def check_timers(self, now: float) -> list[ExpiredPacket]:
        """Lazy expiry pass from the ring head, bounded by d_max pops.

        Nulled descriptors (answered flows) are skipped and recycled; live
        descriptors older than their detection timeout are collected; the
        walk stops at the first live descriptor still within its timeout.
        """
        out: list[ExpiredPacket] = []
        popped = 0
        d_max = self.cfg.timers.d_max
        while self.ring.size and popped < d_max:
            desc = self.ring.head()
            assert desc is not None
            entry = desc.entry
            if entry is None:
                self.ring.pop_head()
                popped += 1
                continue
            if now - desc.t_arr < desc.eff_dt:
                break
            self.ring.pop_head()
            popped += 1
            pkt = self.ring.free_slot(desc.slot)
            desc.entry = None
            entry.slots.remove(desc.slot)
            if not entry.slots:
                self._remove(entry)
            self.expired += 1
            self._collect(pkt, CollectReason.DT_EXPIRED, desc.t_arr, now)
            out.append(ExpiredPacket(pkt, desc.t_arr, now))
        return out

    def next_check_hint(self) -> Optional[float]:
        """Earliest time a timer check could pop anything, or None when idle.

        A lower bound only: the head descriptor (even a nulled one) is the
        oldest, so head t_arr plus the smallest configured timeout is safe.
        """
        desc = self.ring.head()
        if desc is None:
            return None
        if desc.entry is None:
            return desc.t_arr  # recyclable immediately
        return desc.t_arr + min(desc.eff_dt, self._min_eff_dt)

    def clean_benign(self, now: float) -> int:
        """Advance the cleaning cursor over ceil(alpha_ht * buckets) buckets and
        drop benign entries whose response is older than t_inst."""
        n_scan = max(1, math.ceil(self.hash_buckets * self.cfg.timers.alpha_ht))
        removed = 0
        threshold = self.cfg.timers.t_inst
        for i in range(n_scan):
            idx = (self._clean_cursor + i) % self.hash_buckets
            chain = self._buckets[idx]
            if not chain:
                continue
            keep = [
                e
                for e in chain
                if not (
                    e.status == FlowStatus.BENIGN
                    and e.t_resp is not None
                    and now - e.t_resp > threshold
                )
            ]
            if len(keep) != len(chain):
                removed += len(chain) - len(keep)
                self.hash_entries -= len(chain) - len(keep)
                self._buckets[idx] = keep or None
        self._clean_cursor = (self._clean_cursor + n_scan) % self.hash_buckets
        return removed

    def is_alive(self, ip: int, now: float) -> bool:
        """Host liveness: either bitmap refreshed within t_alive. Internal only."""
        if not self.cfg.is_internal(ip):
            raise NotInternalError(f"liveness queried for external address {ip}")
        return self.liveness.alive(ip, now)

    def liveness_rule_sync(self, ip: int, event: RuleSyncEvent, now: float) -> None:
        """Mirror switch rule state into the rule-activity bitmap."""
        if event == RuleSyncEvent.INSTALLED:
            self.liveness.refresh_rule(ip, now)
        else:
            self.liveness.clear_rule(ip)

    def stats(self) -> dict[str, int]:
        return {
            "ring_used": self.ring.size,
            "ring_live": self.ring.live_count(),
            "hash_entries": self.hash_entries,
            "buffered": self.buffered,
            "duplicates": self.duplicates,
            "benign_detected": self.benign_detected,
            "transient_drops": self.transient_drops,
            "overflow_drops": self.overflow_drops,
            "icmp_errors": self.icmp_errors,
            "expired": self.expired,
            "rules_emitted": self.rules_emitted,
            "rules_dropped": self.rules_dropped,
        }
