"""Packet-capture reporter analog fed from the receiver side of a trace."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional, Sequence

from ..channel import TraceRecord
from ..measurement import MeasurementLibrary
from ..filters import WindowSpec
from .model import TAP_FLAVOURS
from .sim import VirtualClient

TAP_COLUMNS = ("t_cap", "pkt_id", "src", "dst", "ip_len", "sport", "dport", "udp_len")
SRC, DST = "10.0.0.1", "10.0.0.2"
SPORT, DPORT = 40000, 5001
IP_HEADER = 20


def define_tap_mps(lib: MeasurementLibrary) -> None:
    lib.define_mp("application", [("version", "text"), ("argv", "text"), ("role", "text")])
    lib.define_mp("ip", [("pkt_id", "int64"), ("src", "text"), ("dst", "text"), ("ip_len", "int64"), ("ttl", "int64")])
    lib.define_mp("udp", [("pkt_id", "int64"), ("udp_len", "int64"), ("sport", "int64"), ("dport", "int64")])


def tap_config(flavour: str, window: WindowSpec | None = None, experiment: str = "tap", server: str = "s") -> str:
    """RunConfig text for the tap; mp-filtered sums ip_len per `window` (0.5 s by default)."""
    if flavour not in TAP_FLAVOURS:
        raise ValueError(f"unknown tap flavour {flavour!r}")
    window = window or WindowSpec.by_time(0.5)
    lines = [f"experiment {experiment}", "node receiver", "app tap", f"server {server}", "enable application"]
    if flavour == "mp":
        lines += ["enable ip", "enable udp"]
    elif flavour == "mp-filtered":
        lines += [f"filter ip_bytes = sum(ip.ip_len) every {window}"]
    return "\n".join(lines) + "\n"


@dataclass
class TapOutput:
    flavour: str
    captured: int
    samples: int
    csv: Optional[str] = None
    last_inject_us: int = 0


def run_tap_reporter(
    records: Sequence[TraceRecord],
    flavour: str,
    client: Optional[VirtualClient] = None,
    cost_us: int = 0,
) -> TapOutput:
    """Capture delivered packets at their receive time and report them.

    Each packet costs `cost_us` of processing before its samples are
    injected; a backlog builds when packets arrive faster than that, so the
    report timestamp trails the capture timestamp.
    """
    if flavour not in TAP_FLAVOURS:
        raise ValueError(f"unknown tap flavour {flavour!r}")
    delivered = sorted((r for r in records if r.t_rcv_us is not None), key=lambda r: (r.t_rcv_us, r.packet_id))
    out = TapOutput(flavour, len(delivered), 0)
    csv = io.StringIO() if flavour == "csv" else None
    if csv is not None:
        csv.write("\t".join(TAP_COLUMNS) + "\n")
    lib = client.library if client is not None and flavour != "csv" else None
    busy = 0
    for r in delivered:
        done = max(r.t_rcv_us, busy) + cost_us
        busy = done
        if csv is not None:
            # no local timestamp: the capture time is the only one reported
            csv.write(f"{r.t_rcv:.6f}\t{r.packet_id}\t{SRC}\t{DST}\t{r.size}\t{SPORT}\t{DPORT}\t{r.size - IP_HEADER}\n")
            continue
        if lib is None:
            continue
        client.clock.set_us(done)
        lib.inject("ip", [r.packet_id, SRC, DST, r.size, 64])
        lib.inject("udp", [r.packet_id, r.size - IP_HEADER, SPORT, DPORT])
        out.samples += 2
        client.advance()
    out.last_inject_us = busy
    if csv is not None:
        out.csv = csv.getvalue()
    return out


def parse_tap_csv(text: str) -> list[tuple[float, int, int]]:
    """(capture time, packet id, ip_len) per line of a tap CSV report."""
    lines = text.strip().splitlines()
    if not lines or tuple(lines[0].split("\t")) != TAP_COLUMNS:
        raise ValueError("not a tap CSV report")
    out = []
    for line in lines[1:]:
        c = line.split("\t")
        out.append((float(c[0]), int(c[1]), int(c[4])))
    return out
