"""Text wire protocol between reporters and the collection server.

A connection carries a header block, then one TAB-separated frame per line,
then (on orderly close) a trailer with the final sequence count of every
stream. The layout is documented in ``docs/protocol.md``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Optional, Sequence

from .errors import (
    DuplicateSeq,
    MalformedHeader,
    NonContiguousIndices,
    ProtocolError,
    ProtocolVersionMismatch,
    UndeclaredStream,
)
from .measurement import IDENTIFIER, ClientIdentity, MetricType, make_fields

PROTOCOL_VERSION = 1

_ESCAPES = {"\\": "\\\\", "\t": "\\t", "\n": "\\n"}
_UNESCAPES = {"\\": "\\", "t": "\t", "n": "\n"}


def escape(text: str) -> str:
    if "\\" not in text and "\t" not in text and "\n" not in text:
        return text
    return "".join(_ESCAPES.get(c, c) for c in text)


def unescape(text: str) -> str:
    if "\\" not in text:
        return text
    out = []
    it = iter(text)
    for c in it:
        if c != "\\":
            out.append(c)
            continue
        nxt = next(it, None)
        if nxt not in _UNESCAPES:
            raise ProtocolError(f"bad escape sequence in {text!r}")
        out.append(_UNESCAPES[nxt])
    return "".join(out)


def format_value(mtype: MetricType, value) -> str:
    if mtype is MetricType.INT64:
        return str(value)
    if mtype is MetricType.FLOAT64:
        return format(value, ".17g")
    return escape(value)


def parse_value(mtype: MetricType, text: str):
    try:
        if mtype is MetricType.INT64:
            return int(text)
        if mtype is MetricType.FLOAT64:
            return float(text)
    except ValueError:
        raise ProtocolError(f"cannot parse {text!r} as {mtype.value}") from None
    return unescape(text)


def format_ts(seconds: float) -> str:
    return "%.6f" % seconds


@dataclass(frozen=True)
class StreamSchema:
    index: int
    name: str
    fields: tuple[tuple[str, MetricType], ...]

    def line(self) -> str:
        cols = " ".join(f"{n}:{t.value}" for n, t in self.fields)
        return f"schema: {self.index} {self.name} {cols}"


@dataclass(frozen=True)
class HeaderBlock:
    identity: ClientIdentity
    schemas: tuple[StreamSchema, ...]
    version: int = PROTOCOL_VERSION

    def schema_map(self) -> dict[int, StreamSchema]:
        return {s.index: s for s in self.schemas}


@dataclass(frozen=True)
class StreamFrame:
    client_ts: float
    stream_index: int
    seq: int
    values: tuple


@dataclass
class GapReport:
    missing: int = 0
    ranges: list[tuple[int, int]] = field(default_factory=list)


def _check_indices(schemas: Sequence[StreamSchema]) -> None:
    got = [s.index for s in schemas]
    if got != list(range(1, len(got) + 1)):
        raise NonContiguousIndices(f"stream indices must be 1..N in order, got {got}")


def encode_header(h: HeaderBlock) -> bytes:
    _check_indices(h.schemas)
    ident = h.identity
    lines = [
        f"protocol: {h.version}",
        f"experiment-id: {escape(ident.experiment_id)}",
        f"node-id: {escape(ident.node_id)}",
        f"app-name: {escape(ident.app_name)}",
        f"start-time: {ident.start_time!r}",
    ]
    lines.extend(s.line() for s in h.schemas)
    return ("\n".join(lines) + "\n\n").encode("utf-8")


def _parse_schema(text: str) -> StreamSchema:
    parts = text.split()
    if len(parts) < 3:
        raise MalformedHeader(f"schema line too short: {text!r}")
    try:
        index = int(parts[0])
    except ValueError:
        raise MalformedHeader(f"bad stream index {parts[0]!r}") from None
    name = parts[1]
    if not IDENTIFIER.match(name):
        raise MalformedHeader(f"bad stream name {name!r}")
    fields = []
    for col in parts[2:]:
        fname, sep, ftype = col.partition(":")
        if not sep:
            raise MalformedHeader(f"bad field declaration {col!r}")
        fields.append((fname, ftype))
    try:
        return StreamSchema(index, name, make_fields(fields))
    except Exception as exc:
        raise MalformedHeader(str(exc)) from exc


def decode_header_lines(lines: Iterable[str]) -> HeaderBlock:
    """Parse header lines (without the terminating blank line)."""
    values: dict[str, str] = {}
    schemas = []
    for i, line in enumerate(lines):
        key, sep, value = line.partition(": ")
        if not sep:
            if line.endswith(":"):
                key, value = line[:-1], ""
            else:
                raise MalformedHeader(f"not a key: value line: {line!r}")
        if i == 0:
            if key != "protocol":
                raise MalformedHeader("header must start with the protocol version")
            try:
                version = int(value)
            except ValueError:
                raise MalformedHeader(f"bad protocol version {value!r}") from None
            if version != PROTOCOL_VERSION:
                raise ProtocolVersionMismatch(f"unsupported protocol version {version}")
            continue
        if key == "schema":
            schemas.append(_parse_schema(value))
        elif key in ("experiment-id", "node-id", "app-name", "start-time"):
            if key in values:
                raise MalformedHeader(f"duplicate header key {key}")
            values[key] = value
        else:
            raise MalformedHeader(f"unknown header key {key!r}")
    missing = {"experiment-id", "node-id", "app-name", "start-time"} - set(values)
    if missing or not values and not schemas:
        raise MalformedHeader(f"header lacks {sorted(missing)}")
    try:
        start = float(values["start-time"])
        identity = ClientIdentity(
            unescape(values["experiment-id"]),
            unescape(values["node-id"]),
            unescape(values["app-name"]),
            start,
        )
    except (ValueError, ProtocolError) as exc:
        raise MalformedHeader(str(exc)) from exc
    _check_indices(schemas)
    return HeaderBlock(identity, tuple(schemas), PROTOCOL_VERSION)


def decode_header(data: bytes | str) -> HeaderBlock:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    head, sep, _ = text.partition("\n\n")
    if not sep:
        raise MalformedHeader("header is not terminated by a blank line")
    return decode_header_lines(head.split("\n"))


def _fields_for(schemas: Mapping[int, StreamSchema], index: int):
    try:
        return schemas[index].fields
    except KeyError:
        raise UndeclaredStream(f"stream index {index} not declared") from None


def encode_frame(f: StreamFrame, schemas: Mapping[int, StreamSchema]) -> bytes:
    fields = _fields_for(schemas, f.stream_index)
    if len(fields) != len(f.values):
        raise ProtocolError(f"stream {f.stream_index} has {len(fields)} fields, frame has {len(f.values)}")
    cols = [format_ts(f.client_ts), str(f.stream_index), str(f.seq)]
    cols.extend(format_value(t, v) for (_, t), v in zip(fields, f.values))
    return ("\t".join(cols) + "\n").encode("utf-8")


def decode_frame(line: bytes | str, schemas: Mapping[int, StreamSchema]) -> StreamFrame:
    text = line.decode("utf-8") if isinstance(line, bytes) else line
    if text.endswith("\n"):
        text = text[:-1]
    cols = text.split("\t")
    if len(cols) < 3:
        raise ProtocolError(f"frame has too few columns: {text!r}")
    try:
        ts = float(cols[0])
        index = int(cols[1])
        seq = int(cols[2])
    except ValueError:
        raise ProtocolError(f"bad frame prefix: {text!r}") from None
    if seq < 0:
        raise ProtocolError("negative sequence number")
    fields = _fields_for(schemas, index)
    if len(cols) - 3 != len(fields):
        raise ProtocolError(f"stream {index} expects {len(fields)} values, got {len(cols) - 3}")
    values = tuple(parse_value(t, c) for (_, t), c in zip(fields, cols[3:]))
    return StreamFrame(ts, index, seq, values)


def encode_trailer(next_seq: Mapping[int, int]) -> bytes:
    """Close marker: a blank line, then ``final: <index> <seq-count>`` per stream."""
    lines = "".join(f"final: {i} {n}\n" for i, n in sorted(next_seq.items()))
    return ("\n" + lines).encode("utf-8")


def detect_gaps(seqs: Iterable[int], start: Optional[int] = None, end: Optional[int] = None) -> GapReport:
    """Missing sequence numbers of one stream.

    Without bounds the span is ``min..max`` of what arrived. `start` and `end`
    (exclusive) widen it, so leading and trailing drops are counted too.
    """
    seen = set()
    for s in seqs:
        if s in seen:
            raise DuplicateSeq(f"sequence number {s} received twice")
        seen.add(s)
    if not seen:
        lo, hi = (start or 0), (end if end is not None else (start or 0))
        return GapReport(max(hi - lo, 0), [(lo, hi - 1)] if hi > lo else [])
    lo = min(seen) if start is None else min(start, min(seen))
    hi = max(seen) + 1 if end is None else max(end, max(seen) + 1)
    report = GapReport(missing=(hi - lo) - len(seen))
    if report.missing:
        ordered = sorted(seen)
        prev = lo - 1
        for s in ordered:
            if s > prev + 1:
                report.ranges.append((prev + 1, s - 1))
            prev = s
        if hi - 1 > prev:
            report.ranges.append((prev + 1, hi - 1))
    return report


class StreamParser:
    """Incremental decoder for one connection's byte stream.

    `feed` returns decoded events: ``("header", HeaderBlock)``,
    ``("frame", StreamFrame)`` and, after the trailer, ``("final", {index: count})``.
    """

    def __init__(self):
        self._buf = b""
        self._header_lines: list[str] = []
        self.header: Optional[HeaderBlock] = None
        self._schemas: dict[int, StreamSchema] = {}
        self._in_trailer = False
        self._final: dict[int, int] = {}
        self.closed = False

    def feed(self, data: bytes) -> list:
        self._buf += data
        events = []
        while True:
            nl = self._buf.find(b"\n")
            if nl < 0:
                break
            line = self._buf[:nl].decode("utf-8")
            self._buf = self._buf[nl + 1:]
            events.extend(self._line(line))
        return events

    def _line(self, line: str) -> Iterator:
        if self.header is None:
            if line == "":
                self.header = decode_header_lines(self._header_lines)
                self._schemas = self.header.schema_map()
                yield ("header", self.header)
            else:
                self._header_lines.append(line)
            return
        if self._in_trailer:
            key, _, rest = line.partition(": ")
            if key != "final":
                raise ProtocolError(f"unexpected trailer line {line!r}")
            idx, count = (int(x) for x in rest.split())
            _fields_for(self._schemas, idx)
            self._final[idx] = count
            return
        if line == "":
            self._in_trailer = True
            return
        yield ("frame", decode_frame(line, self._schemas))

    def finish(self) -> list:
        """Signal end of input; returns the trailer event if one was received."""
        if self._buf:
            raise ProtocolError("connection closed mid-line")
        self.closed = True
        if self._in_trailer:
            return [("final", dict(self._final))]
        return []

    @property
    def orderly(self) -> bool:
        return self._in_trailer


def float_equal(a: float, b: float) -> bool:
    """Value equality that also treats NaN as equal to NaN."""
    return a == b or (math.isnan(a) and math.isnan(b))


class GapTracker:
    """Incremental gap detection for one stream received in sequence order."""

    __slots__ = ("expected", "missing", "ranges", "received")

    def __init__(self):
        self.expected = 0
        self.missing = 0
        self.ranges: list[tuple[int, int]] = []
        self.received = 0

    def observe(self, seq: int) -> None:
        if seq < self.expected:
            raise DuplicateSeq(f"sequence number {seq} at or below {self.expected - 1} already seen")
        if seq > self.expected:
            self.ranges.append((self.expected, seq - 1))
            self.missing += seq - self.expected
        self.expected = seq + 1
        self.received += 1

    def close(self, final_count: Optional[int]) -> None:
        """Account for trailing drops announced by the client's trailer."""
        if final_count is not None and final_count > self.expected:
            self.ranges.append((self.expected, final_count - 1))
            self.missing += final_count - self.expected
            self.expected = final_count

    def report(self) -> GapReport:
        return GapReport(self.missing, list(self.ranges))
