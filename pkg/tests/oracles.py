"""Independent brute-force oracles used by the test suite.

Deliberately naive and structurally unrelated to the engine code: flows are
grouped with inline tuple keys, timers are stepped one interval at a time,
the responder reference is a table-driven state machine over abstract
segments. These stay the ground truth the implementations are compared to.
"""

from collections import defaultdict


def naive_flow_key(p):
    a = (p.src_ip, p.src_port)
    b = (p.dst_ip, p.dst_port)
    return (p.proto,) + (a + b if a <= b else b + a)


def _is_icmp_error(p):
    return p.proto == 1 and p.icmp_type in (3, 11, 12)


def _opposite(p, first):
    return (
        p.src_ip == first.dst_ip
        and p.src_port == first.dst_port
        and p.dst_ip == first.src_ip
        and p.dst_port == first.src_port
    )


def erroneous_set_oracle(packets, whitelist, impersonation, dt, dt_imp):
    """Expected collected set for a time-ordered trace.

    Assumes flow-local dynamic rules (unique services per flow) and a rule
    TTL longer than the trace, so an answered flow is never re-exposed.
    Returns a list of (packet, reason) pairs, reason in {dt_expired,
    icmp_error}. Flow instances restart once a first packet's timeout
    elapses; a response rescues an instance only strictly inside the
    timeout window.
    """
    collected = []
    flows = defaultdict(list)
    for p in packets:
        if _is_icmp_error(p):
            collected.append((p, "icmp_error"))
            continue
        if (p.dst_ip, p.dst_port) in whitelist:
            continue
        flows[naive_flow_key(p)].append(p)
    for plist in flows.values():
        i = 0
        while i < len(plist):
            first = plist[i]
            eff = dt_imp if (first.dst_ip, first.dst_port, first.proto) in impersonation else dt
            answered = False
            j = i + 1
            while j < len(plist) and plist[j].ts - first.ts < eff:
                if _opposite(plist[j], first):
                    answered = True
                    break
                j += 1
            if answered:
                break  # whole flow benign from here on
            collected.append((first, "dt_expired"))
            k = i + 1
            while k < len(plist) and plist[k].ts - first.ts < eff:
                k += 1  # in-window duplicates are dropped, not collected
            i = k
    return collected


def ttl_countdown_oracle(match_times, ttl_initial, query_interval, horizon):
    """Eviction time of one rule under the idle-TTL automaton, stepped tick
    by tick; None if the rule survives the horizon. Matches exactly at a
    tick boundary count for the interval ending at that tick."""
    ttl = ttl_initial
    tick = query_interval
    prev = 0.0
    while tick <= horizon + 1e-12:
        matched = any(prev < m <= tick for m in match_times)
        if matched:
            ttl = ttl_initial
        else:
            ttl -= query_interval
            if ttl <= 0:
                return tick
        prev = tick
        tick += query_interval
    return None


def responder_oracle(segments):
    """Reference responder behavior over abstract segment names.

    Input: sequence from {SYN, ACK, DATA, FIN, RST} for one connection.
    Output: (replies, transcripts) with replies a list of one entry per
    segment from {synack, rst, none} and transcripts a list of
    (payload_tag, teardown) where payload_tag is "data" or "".
    """
    state = None  # None -> syn_rcvd -> established
    replies = []
    transcripts = []
    for seg in segments:
        if state is None:
            if seg == "SYN":
                state = "syn_rcvd"
                replies.append("synack")
            elif seg == "RST":
                replies.append("none")
            else:
                replies.append("rst")
            continue
        if seg == "RST":
            if state == "established":
                transcripts.append(("", "client-rst"))
            state = None
            replies.append("none")
        elif seg == "SYN":
            replies.append("synack")
        elif seg == "DATA":
            transcripts.append(("data", "rst"))
            state = None
            replies.append("rst")
        elif seg == "FIN":
            if state == "established":
                transcripts.append(("", "rst"))
            state = None
            replies.append("rst")
        else:  # ACK
            if state == "syn_rcvd":
                state = "established"
            replies.append("none")
    return replies, transcripts


def expected_truncated_length(raw):
    """Kept bytes after payload removal, read straight from the header bytes."""
    ihl = (raw[14] & 0x0F) * 4
    l4 = 14 + ihl
    proto = raw[14 + 9]
    if proto == 6:
        return l4 + ((raw[l4 + 12] >> 4) & 0x0F) * 4
    return l4 + 8
