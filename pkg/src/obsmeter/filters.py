"""Windowed aggregation filters and their composition into per-MP pipelines.

Every filter output stream has the same leading fields::

    window_start:float64  window_end:float64  count:int64  partial:int64

followed by one aggregate field (named after the source field, or ``jitter``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

from .errors import ConfigError, CycleDetected, DanglingSource, NonNumericField, UnknownMPName
from .measurement import MetricType, Sample, check_identifier

KINDS = ("sum", "mean", "min", "max", "first", "last", "jitter")
NUMERIC_KINDS = frozenset({"sum", "mean", "min", "max"})

WINDOW_FIELDS = (
    ("window_start", MetricType.FLOAT64),
    ("window_end", MetricType.FLOAT64),
    ("count", MetricType.INT64),
    ("partial", MetricType.INT64),
)


def to_us(seconds: float) -> int:
    return int(round(seconds * 1e6))


@dataclass(frozen=True)
class WindowSpec:
    kind: str  # "time" or "count"
    extent: float

    def __post_init__(self):
        if self.kind not in ("time", "count"):
            raise ValueError(f"unknown window kind {self.kind!r}")
        if not self.extent > 0:
            raise ValueError("window extent must be positive")
        if self.kind == "count":
            if int(self.extent) != self.extent:
                raise ValueError("count windows need an integer extent")
        else:
            tenths = self.extent * 10
            if abs(tenths - round(tenths)) > 1e-9:
                raise ValueError("time windows must be a multiple of 0.1 s")

    @classmethod
    def by_time(cls, seconds: float) -> "WindowSpec":
        return cls("time", float(seconds))

    @classmethod
    def by_count(cls, n: int) -> "WindowSpec":
        return cls("count", int(n))

    @property
    def extent_us(self) -> int:
        return to_us(self.extent)

    def __str__(self):
        if self.kind == "time":
            return f"{self.extent:g}s"
        return f"{int(self.extent)}samples"


@dataclass(frozen=True)
class FilterSpec:
    output: str
    kind: str
    source: str
    fields: tuple[str, ...]
    window: WindowSpec

    def __post_init__(self):
        check_identifier(self.output)
        check_identifier(self.source)
        for f in self.fields:
            check_identifier(f)
        if self.kind not in KINDS:
            raise ValueError(f"unknown filter kind {self.kind!r}")
        want = 2 if self.kind == "jitter" else 1
        if len(self.fields) != want:
            raise ValueError(f"{self.kind} filter takes {want} source field(s)")

    def __str__(self):
        return f"{self.output} = {self.kind}({self.source}.{','.join(self.fields)}) every {self.window}"


@dataclass(frozen=True)
class OutputSample:
    client_ts: float
    values: tuple  # window_start, window_end, count, partial, aggregate

    @property
    def window_start(self) -> float:
        return self.values[0]

    @property
    def window_end(self) -> float:
        return self.values[1]

    @property
    def count(self) -> int:
        return self.values[2]

    @property
    def partial(self) -> bool:
        return bool(self.values[3])

    @property
    def value(self):
        return self.values[4]


class NeumaierSum:
    """Compensated float summation."""

    __slots__ = ("total", "comp")

    def __init__(self):
        self.total = 0.0
        self.comp = 0.0

    def add(self, x: float) -> None:
        t = self.total + x
        if abs(self.total) >= abs(x):
            self.comp += (self.total - t) + x
        else:
            self.comp += (x - t) + self.total
        self.total = t

    @property
    def value(self) -> float:
        return self.total + self.comp


class JitterEstimator:
    """Smoothed transit-time variation, J += (|d_tau| - J) / 16.

    Transit times are taken at microsecond resolution, so the recurrence sees
    exact integer differences and is insensitive to a constant clock offset
    between sender and receiver.
    """

    __slots__ = ("jitter", "_last_transit_us", "packets")

    def __init__(self):
        self.jitter = 0.0
        self._last_transit_us: Optional[int] = None
        self.packets = 0

    def update(self, sent: float, received: float) -> float:
        transit_us = to_us(received) - to_us(sent)
        if self._last_transit_us is not None:
            delta = abs(transit_us - self._last_transit_us) / 1e6
            self.jitter += (delta - self.jitter) / 16.0
        self._last_transit_us = transit_us
        self.packets += 1
        return self.jitter


def _aggregate_type(kind: str, source_type: MetricType) -> MetricType:
    if kind in ("mean", "jitter"):
        return MetricType.FLOAT64
    return source_type


class FilterState:
    """Running state of one filter instance over its current window."""

    def __init__(self, spec: FilterSpec, source_fields: Sequence[tuple[str, MetricType]]):
        self.spec = spec
        names = [n for n, _ in source_fields]
        types = dict(source_fields)
        idx = []
        for f in spec.fields:
            if f not in types:
                raise DanglingSource(f"{spec.source} has no field {f!r}")
            if (spec.kind in NUMERIC_KINDS or spec.kind == "jitter") and not types[f].numeric:
                raise NonNumericField(f"{spec.kind} needs a numeric field, {f} is {types[f].value}")
            idx.append(names.index(f))
        self._idx = tuple(idx)
        self.source_type = types[spec.fields[0]]
        agg_name = "jitter" if spec.kind == "jitter" else spec.fields[0]
        self.output_fields = WINDOW_FIELDS + ((agg_name, _aggregate_type(spec.kind, self.source_type)),)
        self._exact_int = self.source_type is MetricType.INT64
        self.window_start: Optional[float] = None
        self._window_index: Optional[int] = None
        self.last_ts: Optional[float] = None
        self.count = 0
        self.jitter = JitterEstimator() if spec.kind == "jitter" else None
        self._reset()

    def _reset(self):
        kind = self.spec.kind
        if kind in ("sum", "mean"):
            self.acc = 0 if (self._exact_int and kind == "sum") else NeumaierSum()
        else:
            self.acc = None
        self.count = 0
        self.window_start = None
        self._window_index = None

    def _accumulate(self, values: tuple) -> None:
        kind = self.spec.kind
        if kind == "jitter":
            self.jitter.update(values[self._idx[0]], values[self._idx[1]])
            return
        v = values[self._idx[0]]
        if kind == "sum":
            if isinstance(self.acc, int):
                self.acc += v
            else:
                self.acc.add(float(v))
        elif kind == "mean":
            self.acc.add(float(v))
        elif kind == "min":
            if self.acc is None or v < self.acc:
                self.acc = v
        elif kind == "max":
            if self.acc is None or v > self.acc:
                self.acc = v
        elif kind == "first":
            if self.count == 0:
                self.acc = v
        elif kind == "last":
            self.acc = v

    def _result(self):
        kind = self.spec.kind
        if kind == "jitter":
            return self.jitter.jitter
        if kind == "sum":
            return self.acc if isinstance(self.acc, int) else self.acc.value
        if kind == "mean":
            return self.acc.value / self.count
        return self.acc

    def _emit(self, emit_ts: float, partial: bool) -> OutputSample:
        if self.spec.window.kind == "time":
            start = self.window_start
            end = (self._window_index + 1) * self.spec.window.extent_us / 1e6
        else:
            start, end = self.window_start, self.last_ts
        out = OutputSample(emit_ts, (start, end, self.count, int(partial), self._result()))
        self._reset()
        return out

    def apply(self, ts: float, values: tuple) -> Optional[OutputSample]:
        window = self.spec.window
        out = None
        if window.kind == "time":
            index = to_us(ts) // window.extent_us
            if self._window_index is not None and index != self._window_index:
                out = self._emit(ts, partial=False)
            if self._window_index is None:
                self._window_index = index
                self.window_start = index * window.extent_us / 1e6
            self._accumulate(values)
            self.count += 1
            self.last_ts = ts
            return out
        if self.count == 0:
            self.window_start = ts
        self._accumulate(values)
        self.count += 1
        self.last_ts = ts
        if self.count >= int(window.extent):
            return self._emit(ts, partial=False)
        return None

    def flush(self, ts: float) -> Optional[OutputSample]:
        """Emit the open window, if any, marked partial."""
        if self.count == 0:
            return None
        return self._emit(max(ts, self.last_ts), partial=True)


def apply_filter(state: FilterState, sample: Sample) -> Optional[OutputSample]:
    return state.apply(sample.client_ts, sample.values)


def jitter_filter(state: FilterState, sent_ts: float, recv_ts: float, client_ts: Optional[float] = None) -> Optional[OutputSample]:
    """Feed one (sent, received) pair to a jitter filter.

    The window clock is the receive time unless `client_ts` says otherwise.
    """
    if state.spec.kind != "jitter":
        raise ValueError("not a jitter filter")
    values = [None] * (max(state._idx) + 1)
    values[state._idx[0]] = sent_ts
    values[state._idx[1]] = recv_ts
    return state.apply(recv_ts if client_ts is None else client_ts, tuple(values))


@dataclass
class StreamDef:
    """One measurement stream produced by a pipeline (raw MP or filter output)."""

    name: str
    fields: tuple[tuple[str, MetricType], ...]
    root_mp: int
    filter: Optional[FilterSpec] = None


Sink = Callable[[int, float, tuple], bool]


class _Route:
    """Per-MP entry point: raw stream plus the filter tree rooted at that MP."""

    def __init__(self, pipeline: "Pipeline", raw_stream: Optional[int], children: list):
        self.pipeline = pipeline
        self.raw_stream = raw_stream
        self.children = children

    def push(self, sample: Sample) -> bool:
        ok = True
        sink = self.pipeline.sink
        if self.raw_stream is not None:
            ok = sink(self.raw_stream, sample.client_ts, sample.values)
        for node in self.children:
            ok = self.pipeline._feed(node, sample.client_ts, sample.values) and ok
        return ok


class _Node:
    __slots__ = ("state", "stream", "children")

    def __init__(self, state: FilterState, stream: int):
        self.state = state
        self.stream = stream
        self.children: list[_Node] = []


class Pipeline:
    """Composed filter chains, one route per source MP.

    `streams` lists every output stream in declaration order; the reporter
    assigns wire indices from that order. Call `bind(sink)` before pushing.
    """

    def __init__(self):
        self.streams: list[StreamDef] = []
        self.routes: dict[int, _Route] = {}
        self._nodes: list[_Node] = []
        self.sink: Sink = lambda stream, ts, values: True

    def bind(self, sink: Sink) -> None:
        self.sink = sink

    def _feed(self, node: _Node, ts: float, values: tuple) -> bool:
        out = node.state.apply(ts, values)
        if out is None:
            return True
        return self._deliver(node, out)

    def _deliver(self, node: _Node, out: OutputSample) -> bool:
        ok = self.sink(node.stream, out.client_ts, out.values)
        for child in node.children:
            ok = self._feed(child, out.client_ts, out.values) and ok
        return ok

    def flush(self, ts: float) -> None:
        """Close every open window, upstream filters first."""
        for node in self._nodes:
            out = node.state.flush(ts)
            if out is not None:
                self._deliver(node, out)

    def push(self, sample: Sample) -> bool:
        route = self.routes.get(sample.mp_index)
        return True if route is None else route.push(sample)


def compose(
    filters: Sequence[FilterSpec],
    schemas: Iterable,
    raw: Iterable[str] = (),
) -> Pipeline:
    """Build a pipeline from filter declarations.

    `schemas` are the application's MPSchemas; `raw` names the MPs whose
    unfiltered samples are also streamed.
    """
    mps = {s.name: s for s in schemas}
    outputs = {}
    for spec in filters:
        if spec.output in outputs or spec.output in mps:
            raise ConfigError(f"stream name {spec.output!r} declared twice")
        outputs[spec.output] = spec

    # walk each chain up to its MP, detecting loops and dangling references
    roots = {}
    for spec in filters:
        seen = [spec.output]
        src = spec.source
        while src not in mps:
            if src not in outputs:
                raise DanglingSource(f"{spec.output} reads undeclared stream {src!r}")
            if src in seen:
                raise CycleDetected(" -> ".join(seen + [src]))
            seen.append(src)
            src = outputs[src].source
        roots[spec.output] = mps[src]

    pipeline = Pipeline()
    raw_index = {}
    for name in raw:
        if name not in mps:
            raise UnknownMPName(name)
        if name in raw_index:
            continue
        schema = mps[name]
        raw_index[name] = len(pipeline.streams)
        pipeline.streams.append(StreamDef(name, schema.fields, schema.index))

    # depth order so upstream filters exist (and flush) before their consumers
    def depth(name):
        d = 0
        while name in outputs:
            name = outputs[name].source
            d += 1
        return d

    nodes = {}
    children_of_mp: dict[str, list] = {}
    for spec in sorted(filters, key=lambda s: depth(s.output)):
        source_fields = mps[spec.source].fields if spec.source in mps else nodes[spec.source].state.output_fields
        state = FilterState(spec, source_fields)
        stream = len(pipeline.streams)
        pipeline.streams.append(StreamDef(spec.output, state.output_fields, roots[spec.output].index, spec))
        node = _Node(state, stream)
        nodes[spec.output] = node
        pipeline._nodes.append(node)
        if spec.source in mps:
            children_of_mp.setdefault(spec.source, []).append(node)
        else:
            nodes[spec.source].children.append(node)

    # keep declaration order for stream numbering: raw first, then filters as written
    order = {spec.output: i for i, spec in enumerate(filters)}
    filter_streams = sorted(
        (s for s in pipeline.streams if s.filter is not None), key=lambda s: order[s.name]
    )
    remap = {}
    new_streams = [s for s in pipeline.streams if s.filter is None]
    for s in filter_streams:
        remap[pipeline.streams.index(s)] = len(new_streams)
        new_streams.append(s)
    for node in pipeline._nodes:
        node.stream = remap[node.stream]
    pipeline.streams = new_streams

    for name, schema in mps.items():
        kids = children_of_mp.get(name, [])
        if name in raw_index or kids:
            pipeline.routes[schema.index] = _Route(pipeline, raw_index.get(name), kids)
    return pipeline
