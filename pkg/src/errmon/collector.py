"""Terminal sink for erroneous packets, plus the impersonating TCP responder.

Records are newline-delimited JSON with a stable field order: ts, direction,
reason, dst_liveness, src_ip, dst_ip, proto, src_port, dst_port, flags,
icmp_type, icmp_code, internal_host_anon. An optional pcap dump stores the
raw (already truncated) packets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Callable, NamedTuple, Optional

from . import packet
from .core import NetworkConfig, PacketRecord, TcpFlags, ip_to_str
from .fsd import CollectReason
from .util import mix64


class Direction(Enum):
    INCOMING = "in"
    OUTGOING = "out"


class Liveness(Enum):
    ALIVE = "alive"
    DARK = "dark"
    EXTERNAL = "external"


@dataclass(slots=True)
class ErroneousRecord:
    ts: float
    pkt: PacketRecord
    direction: Direction
    dst_liveness: Liveness
    reason: CollectReason
    internal_host_anon: bool

    def to_json_line(self) -> str:
        p = self.pkt
        row = {
            "ts": self.ts,
            "direction": self.direction.value,
            "reason": self.reason.value,
            "dst_liveness": self.dst_liveness.value,
            "src_ip": ip_to_str(p.src_ip),
            "dst_ip": ip_to_str(p.dst_ip),
            "proto": p.proto,
            "src_port": p.src_port,
            "dst_port": p.dst_port,
            "flags": p.tcp_flags,
            "icmp_type": p.icmp_type,
            "icmp_code": p.icmp_code,
            "internal_host_anon": self.internal_host_anon,
        }
        return json.dumps(row, separators=(",", ":"))


class Collector:
    """Appends one record per erroneous packet; failures never stall the engine."""

    def __init__(
        self,
        cfg: NetworkConfig,
        liveness_fn: Optional[Callable[[int, float], bool]] = None,
        sink: Optional[Callable[[str], None]] = None,
    ):
        self.cfg = cfg
        self.liveness_fn = liveness_fn
        self.sink = sink
        self.records: list[ErroneousRecord] = []
        self.by_reason = {CollectReason.DT_EXPIRED: 0, CollectReason.ICMP_ERROR: 0}
        self.sink_failures = 0

    def record(self, pkt: PacketRecord, reason: CollectReason, now: float) -> ErroneousRecord:
        src_real = self.cfg.resolve_internal(pkt.src_ip)
        dst_real = self.cfg.resolve_internal(pkt.dst_ip)
        direction = Direction.OUTGOING if src_real is not None else Direction.INCOMING
        if dst_real is None:
            liveness = Liveness.EXTERNAL
        elif self.liveness_fn is not None and self.liveness_fn(dst_real, now):
            liveness = Liveness.ALIVE
        else:
            liveness = Liveness.DARK
        rec = ErroneousRecord(
            ts=now,
            pkt=pkt,
            direction=direction,
            dst_liveness=liveness,
            reason=reason,
            internal_host_anon=not self.cfg.is_impersonated_flow(pkt),
        )
        self.records.append(rec)
        self.by_reason[reason] += 1
        if self.sink is not None:
            try:
                self.sink(rec.to_json_line())
            except OSError:
                self.sink_failures += 1
        return rec

    def serialize(self) -> bytes:
        return "".join(r.to_json_line() + "\n" for r in self.records).encode()


class Transcript(NamedTuple):
    ts: float
    client_ip: int
    client_port: int
    server_ip: int
    server_port: int
    payload: bytes
    teardown: str

    def to_json_line(self) -> str:
        row = {
            "ts": self.ts,
            "client": f"{ip_to_str(self.client_ip)}:{self.client_port}",
            "server": f"{ip_to_str(self.server_ip)}:{self.server_port}",
            "payload_hex": self.payload.hex(),
            "teardown": self.teardown,
        }
        return json.dumps(row, separators=(",", ":"))


class _ConnState(Enum):
    SYN_RCVD = 1
    ESTABLISHED = 2


@dataclass(slots=True)
class _Conn:
    state: _ConnState
    isn: int
    client_next: int  # next expected client sequence number


class TcpResponder:
    """Minimal handshake-capture-teardown responder for impersonated endpoints.

    SYN gets a SYN-ACK (deterministic ISN from the seed), the handshake ACK
    establishes the connection, the first payload-bearing segment is captured
    to a transcript and answered with RST. A FIN before any data yields an
    empty transcript plus RST; a client RST yields an empty transcript and no
    reply. Segments for unknown connections are answered with RST, except
    RSTs themselves, which are never answered.
    """

    def __init__(self, cfg: NetworkConfig, seed: int = 0, max_connections: int = 10_000):
        self.cfg = cfg
        self.seed = seed
        self.max_connections = max_connections
        self.conns: dict[tuple[int, int, int, int], _Conn] = {}
        self.transcripts: list[Transcript] = []
        self.replies_sent = 0
        self.ignored_not_impersonated = 0
        self.ignored_full = 0

    def _isn(self, conn_key: tuple[int, int, int, int]) -> int:
        h = self.seed
        for part in conn_key:
            h = mix64(h ^ part)
        return h & 0xFFFFFFFF

    def _reply(self, pkt: PacketRecord, now: float, flags: int, seq: int, ack: int) -> PacketRecord:
        self.replies_sent += 1
        return packet.build_tcp_packet(
            ts=now,
            src_ip=pkt.dst_ip,
            dst_ip=pkt.src_ip,
            src_port=pkt.dst_port,
            dst_port=pkt.src_port,
            flags=flags,
            seq=seq,
            ack=ack,
        )

    def _finish(self, pkt: PacketRecord, conn_key, now: float,
                payload: bytes, teardown: str) -> None:
        self.transcripts.append(
            Transcript(now, pkt.src_ip, pkt.src_port, pkt.dst_ip, pkt.dst_port,
                       payload, teardown)
        )
        del self.conns[conn_key]

    def step(self, pkt: PacketRecord, now: float) -> Optional[PacketRecord]:
        """Feed one client segment; returns the reply segment, if any."""
        if not self.cfg.is_impersonated_endpoint(pkt.dst_ip, pkt.dst_port, pkt.proto):
            self.ignored_not_impersonated += 1
            return None
        flags = pkt.tcp_flags
        conn_key = (pkt.src_ip, pkt.src_port, pkt.dst_ip, pkt.dst_port)
        conn = self.conns.get(conn_key)
        seq, _ack = packet.tcp_seq_ack(pkt.raw)
        payload = packet.tcp_payload(pkt.raw)

        if conn is None:
            if flags & TcpFlags.RST:
                return None
            if flags & TcpFlags.SYN:
                if len(self.conns) >= self.max_connections:
                    self.ignored_full += 1
                    return None
                isn = self._isn(conn_key)
                self.conns[conn_key] = _Conn(_ConnState.SYN_RCVD, isn, (seq + 1) & 0xFFFFFFFF)
                return self._reply(pkt, now, TcpFlags.SYN | TcpFlags.ACK, isn, seq + 1)
            return self._reply(pkt, now, TcpFlags.RST, 0, seq + len(payload))

        if flags & TcpFlags.RST:
            if conn.state == _ConnState.ESTABLISHED:
                self._finish(pkt, conn_key, now, b"", "client-rst")
            else:
                del self.conns[conn_key]
            return None
        if flags & TcpFlags.SYN:
            # handshake retransmission: repeat the same SYN-ACK
            return self._reply(pkt, now, TcpFlags.SYN | TcpFlags.ACK, conn.isn, seq + 1)
        if payload:
            # data piggybacked on the handshake ACK establishes implicitly
            ack = (seq + len(payload)) & 0xFFFFFFFF
            reply = self._reply(pkt, now, TcpFlags.RST, (conn.isn + 1) & 0xFFFFFFFF, ack)
            self._finish(pkt, conn_key, now, payload, "rst")
            return reply
        if flags & TcpFlags.FIN:
            reply = self._reply(pkt, now, TcpFlags.RST, (conn.isn + 1) & 0xFFFFFFFF, seq + 1)
            if conn.state == _ConnState.ESTABLISHED:
                self._finish(pkt, conn_key, now, b"", "rst")
            else:
                del self.conns[conn_key]
            return reply
        if flags & TcpFlags.ACK and conn.state == _ConnState.SYN_RCVD:
            conn.state = _ConnState.ESTABLISHED
            return None
        return None  # bare ACK in established state: ignored
