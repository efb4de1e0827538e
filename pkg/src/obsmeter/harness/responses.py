"""Response variables: what the traces say happened versus what the tools reported."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from ..channel import TraceRecord
from ..errors import EmptyTrace, UnmatchedPacketId, WindowMisalignment, ZeroDenominator
from ..filters import JitterEstimator


def _window_us(window: float) -> int:
    w = int(round(window * 1e6))
    if w <= 0:
        raise ValueError("window must be positive")
    return w


def _n_windows(records: Sequence[TraceRecord], w: int, end: Optional[float], attr: str) -> int:
    if end is not None:
        return int(math.ceil(round(end * 1e6) / w))
    last = max(getattr(r, attr) for r in records if getattr(r, attr) is not None)
    return last // w + 1


def window_bytes(records: Sequence[TraceRecord], window: float, attr: str, end: Optional[float] = None) -> np.ndarray:
    """Bytes per window ``[k*window, (k+1)*window)`` by the tap timestamp `attr`."""
    w = _window_us(window)
    n = _n_windows(records, w, end, attr)
    out = np.zeros(n, dtype=np.int64)
    for r in records:
        t = getattr(r, attr)
        if t is None:
            continue
        k = t // w
        if k < n:
            out[k] += r.size
    return out


def compute_sending_rate(records: Sequence[TraceRecord], window: float, end: Optional[float] = None) -> np.ndarray:
    """Bytes/s seen at the router ingress per window."""
    if not records:
        raise EmptyTrace("no packets in trace")
    return window_bytes(records, window, "t_rtr_in_us", end) / window


def egress_rate(records: Sequence[TraceRecord], window: float, end: Optional[float] = None) -> np.ndarray:
    if not records:
        raise EmptyTrace("no packets in trace")
    return window_bytes(records, window, "t_rtr_eg_us", end) / window


@dataclass(frozen=True)
class IntervalReport:
    """One receiver report: interval bounds, throughput (bytes/s), jitter (s)."""

    t0: float
    t1: float
    throughput: float
    jitter: float = 0.0


def _check_grid(reports: Sequence[IntervalReport], w: int) -> list[int]:
    idx = []
    for r in reports:
        a, b = int(round(r.t0 * 1e6)), int(round(r.t1 * 1e6))
        if b - a != w or a % w:
            raise WindowMisalignment(f"report interval [{r.t0}, {r.t1}) is not on the {w / 1e6:g} s grid")
        idx.append(a // w)
    return idx


def compute_throughput_diff(records: Sequence[TraceRecord], reports: Sequence[IntervalReport], window: float) -> np.ndarray:
    """T_Diff = egress trace rate - reported throughput, per report interval."""
    if not records:
        raise EmptyTrace("no packets in trace")
    w = _window_us(window)
    idx = _check_grid(reports, w)
    eg = window_bytes(records, window, "t_rtr_eg_us", end=(max(idx) + 1) * w / 1e6 if idx else None) / window
    return np.array([eg[k] - r.throughput for k, r in zip(idx, reports)])


def replay_jitter(pairs: Iterable[tuple[float, float, float]], window: float, n_windows: int) -> np.ndarray:
    """Running jitter at the end of every window.

    `pairs` are ``(window_clock, sent, received)`` in arrival order; windows
    without packets carry the previous value.
    """
    w = _window_us(window)
    est = JitterEstimator()
    out = np.zeros(n_windows)
    k = 0
    for clock_ts, sent, recv in pairs:
        kk = int(round(clock_ts * 1e6)) // w
        while k < min(kk, n_windows):
            out[k] = est.jitter
            k += 1
        est.update(sent, recv)
    while k < n_windows:
        out[k] = est.jitter
        k += 1
    return out


def trace_jitter(records: Sequence[TraceRecord], window: float, n_windows: int) -> np.ndarray:
    """Jitter replayed over router-egress timestamps."""
    eg = sorted(records, key=lambda r: (r.t_rtr_eg_us, r.packet_id))
    return replay_jitter(((r.t_rtr_eg, r.t_snd, r.t_rtr_eg) for r in eg), window, n_windows)


def compute_jitter_diff(records: Sequence[TraceRecord], reports: Sequence[IntervalReport], window: float) -> np.ndarray:
    """J_Diff = reported jitter - jitter replayed on the egress trace, per interval."""
    if not records:
        raise EmptyTrace("no packets in trace")
    w = _window_us(window)
    idx = _check_grid(reports, w)
    jt = trace_jitter(records, window, max(idx) + 1 if idx else 0)
    return np.array([r.jitter - jt[k] for k, r in zip(idx, reports)])


def reports_from_packets(
    rows: Iterable[tuple[int, int, float, float]], window: float, n_windows: int
) -> list[IntervalReport]:
    """Rebuild interval reports from per-packet records ``(id, size, t_snd, t_rcv)``,
    binning and replaying jitter by arrival time."""
    w = _window_us(window)
    rows = sorted(rows, key=lambda r: (r[3], r[0]))
    size = np.zeros(n_windows, dtype=np.int64)
    for _, sz, _, t_rcv in rows:
        k = int(round(t_rcv * 1e6)) // w
        if k < n_windows:
            size[k] += sz
    jit = replay_jitter(((t_rcv, t_snd, t_rcv) for _, _, t_snd, t_rcv in rows), window, n_windows)
    return [IntervalReport(k * w / 1e6, (k + 1) * w / 1e6, size[k] / window, jit[k]) for k in range(n_windows)]


@dataclass
class LossSeries:
    loss: np.ndarray  # L per window, NaN where skipped
    received_rate: np.ndarray  # bytes/s from reported ip_len
    skipped: list[int]


def compute_loss_ratio(
    records: Sequence[TraceRecord],
    window: float,
    reported_ids: Optional[Iterable[int]] = None,
    window_counts: Optional[Mapping[int, tuple[int, int]]] = None,
    n_windows: Optional[int] = None,
    strict: bool = False,
) -> LossSeries:
    """L = 1 - N_i / N_t per window, with N_t from router-egress timestamps.

    Reports come either as packet ids (binned by the packet's egress time) or
    as ``{window: (count, bytes)}`` from a windowed sum. Windows with N_t = 0
    are skipped, or raise ZeroDenominator when `strict`.
    """
    if not records:
        raise EmptyTrace("no packets in trace")
    w = _window_us(window)
    n = n_windows if n_windows is not None else max(r.t_rtr_eg_us for r in records) // w + 1
    n_t = np.zeros(n, dtype=np.int64)
    by_id = {}
    for r in records:
        k = r.t_rtr_eg_us // w
        if k < n:
            n_t[k] += 1
        by_id[r.packet_id] = r
    n_i = np.zeros(n, dtype=np.int64)
    b_i = np.zeros(n, dtype=np.int64)
    if reported_ids is not None:
        for pid in reported_ids:
            r = by_id.get(pid)
            if r is None:
                raise UnmatchedPacketId(pid)
            k = r.t_rtr_eg_us // w
            if k < n:
                n_i[k] += 1
                b_i[k] += r.size
    elif window_counts is not None:
        for k, (count, nbytes) in window_counts.items():
            if 0 <= k < n:
                n_i[k] += count
                b_i[k] += nbytes
    else:
        raise ValueError("give reported_ids or window_counts")
    loss = np.full(n, np.nan)
    skipped = []
    for k in range(n):
        if n_t[k] == 0:
            if strict:
                raise ZeroDenominator(f"no packets in window {k}")
            skipped.append(k)
            continue
        loss[k] = 1.0 - n_i[k] / n_t[k]
    return LossSeries(loss, b_i / window, skipped)


@dataclass(frozen=True)
class Summary:
    min: float
    med: float
    avg: float
    max: float
    sd: float
    n: int

    @classmethod
    def of(cls, values: Sequence[float]) -> "Summary":
        v = np.asarray(values, dtype=float)
        if v.size == 0:
            return cls(math.nan, math.nan, math.nan, math.nan, math.nan, 0)
        sd = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
        return cls(float(v.min()), float(np.median(v)), float(v.mean()), float(v.max()), sd, int(v.size))


def compute_timestamp_diff(
    records: Sequence[TraceRecord], reports: Iterable[tuple[int, float]]
) -> tuple[np.ndarray, Summary]:
    """t_Diff = capture time in the trace - reported timestamp, joined on packet id."""
    t_rcv = {r.packet_id: r.t_rcv_us for r in records if r.t_rcv_us is not None}
    diffs = []
    for pid, ts in reports:
        if pid not in t_rcv:
            raise UnmatchedPacketId(pid)
        diffs.append((t_rcv[pid] - int(round(ts * 1e6))) / 1e6)
    d = np.asarray(diffs)
    return d, Summary.of(d)
