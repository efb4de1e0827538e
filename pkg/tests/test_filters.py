import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import jitter_recurrence, rel_close, window_oracle

from obsmeter import MeasurementLibrary
from obsmeter.errors import ConfigError, CycleDetected, DanglingSource, NonNumericField
from obsmeter.filters import (
    FilterSpec,
    FilterState,
    JitterEstimator,
    NeumaierSum,
    WindowSpec,
    apply_filter,
    compose,
    jitter_filter,
)
from obsmeter.measurement import MetricType, Sample

INT = [("v", MetricType.INT64)]
FLT = [("v", MetricType.FLOAT64)]


def run_filter(kind, window, fields, ts, values):
    state = FilterState(FilterSpec("out", kind, "m", ("v",), window), fields)
    out = []
    for t, v in zip(ts, values):
        o = state.apply(t, (v,))
        if o is not None:
            out.append(o)
    o = state.flush(ts[-1] if ts else 0.0)
    if o is not None:
        out.append(o)
    return out


def test_sum_by_count_three():
    out = run_filter("sum", WindowSpec.by_count(3), INT, [0.1, 0.2, 0.3], [10, 20, 30])
    assert len(out) == 1 and out[0].value == 60 and not out[0].partial
    assert out[0].count == 3


def test_min_max_by_count_four():
    vals = [5, 1, 9, 3]
    ts = [0.1, 0.2, 0.3, 0.4]
    assert run_filter("min", WindowSpec.by_count(4), INT, ts, vals)[0].value == 1
    assert run_filter("max", WindowSpec.by_count(4), INT, ts, vals)[0].value == 9


def test_mean_by_time_window():
    state = FilterState(FilterSpec("out", "mean", "m", ("v",), WindowSpec.by_time(1.0)), FLT)
    assert state.apply(0.2, (4.0,)) is None
    assert state.apply(0.7, (8.0,)) is None
    out = state.apply(1.1, (100.0,))
    assert out.value == 6.0
    assert (out.window_start, out.window_end, out.count, out.partial) == (0.0, 1.0, 2, False)
    tail = state.flush(1.5)
    assert tail.partial and tail.value == 100.0 and tail.window_start == 1.0


def test_time_windows_skip_empty_intervals():
    out = run_filter("sum", WindowSpec.by_time(0.5), INT, [0.1, 2.2, 2.3], [1, 2, 3])
    assert [(o.window_start, o.value) for o in out] == [(0.0, 1), (2.0, 5)]


def test_window_spec_validation():
    with pytest.raises(ValueError):
        WindowSpec.by_time(0.25)
    with pytest.raises(ValueError):
        WindowSpec.by_count(0)
    assert str(WindowSpec.by_time(0.5)) == "0.5s"
    assert str(WindowSpec.by_count(10)) == "10samples"


def test_numeric_kind_on_text_field():
    with pytest.raises(NonNumericField):
        FilterState(FilterSpec("out", "sum", "m", ("v",), WindowSpec.by_count(2)), [("v", MetricType.TEXT)])
    # first/last are fine on text
    out = run_filter("last", WindowSpec.by_count(2), [("v", MetricType.TEXT)], [0.0, 1.0], ["a", "b"])
    assert out[0].value == "b"


def test_jitter_examples():
    est = JitterEstimator()
    est.update(0.0, 0.010)
    assert est.update(1.0, 1.014) == pytest.approx(0.00025, rel=1e-12)
    const = JitterEstimator()
    for i in range(50):
        const.update(i * 0.01, i * 0.01 + 0.003)
    assert const.jitter == 0.0


def test_jitter_filter_windows_emit_latest_value():
    spec = FilterSpec("j", "jitter", "packets", ("t_snd", "t_rcv"), WindowSpec.by_time(0.5))
    state = FilterState(spec, [("t_snd", MetricType.FLOAT64), ("t_rcv", MetricType.FLOAT64)])
    assert jitter_filter(state, 0.0, 0.010) is None
    assert jitter_filter(state, 0.1, 0.114) is None
    out = jitter_filter(state, 0.5, 0.510)
    assert out.value == pytest.approx(0.00025, rel=1e-12)


def test_neumaier_keeps_large_integer_counts():
    acc = NeumaierSum()
    acc.add(1e16)
    for _ in range(1000):
        acc.add(1.0)
    acc.add(-1e16)
    assert acc.value == 1000.0


@settings(max_examples=150, deadline=None)
@given(
    st.sampled_from(["sum", "mean", "min", "max", "first", "last"]),
    st.booleans(),
    st.one_of(st.builds(WindowSpec.by_count, st.integers(1, 7)), st.builds(WindowSpec.by_time, st.sampled_from([0.1, 0.5, 1.0, 2.3]))),
    st.lists(st.tuples(st.integers(0, 50_000), st.integers(-10**12, 10**12)), min_size=1, max_size=80),
)
def test_filters_match_window_oracle(kind, use_float, window, raw):
    raw.sort()
    ts = [us / 1e4 for us, _ in raw]  # 100 us steps
    values = [v / 7.0 for _, v in raw] if use_float else [v for _, v in raw]
    fields = FLT if use_float else INT
    got = run_filter(kind, window, fields, ts, values)
    want = window_oracle(ts, values, kind, window.kind, window.extent)
    assert len(got) == len(want)
    for o, (count, partial, agg) in zip(got, want):
        assert (o.count, int(o.partial)) == (count, partial)
        if isinstance(agg, int):
            assert o.value == agg
        else:
            assert rel_close(o.value, agg)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 200_000), min_size=2, max_size=100), st.integers(-10**9, 10**9))
def test_jitter_matches_recurrence_and_ignores_clock_offset(transits, offset_us):
    sent = [i * 1000 for i in range(len(transits))]
    recv = [s + t for s, t in zip(sent, transits)]
    want = jitter_recurrence(sent, recv)
    est = JitterEstimator()
    shifted = JitterEstimator()
    for s, r, w in zip(sent, recv, want):
        assert rel_close(est.update(s / 1e6, r / 1e6), w)
        assert shifted.update(s / 1e6, (r + offset_us) / 1e6) == est.jitter


def test_by_count_output_frames_floor():
    rng = np.random.default_rng(3)
    for k in (1, 2, 5, 10):
        n = int(rng.integers(1, 200))
        state = FilterState(FilterSpec("o", "sum", "m", ("v",), WindowSpec.by_count(k)), INT)
        full = sum(state.apply(i * 0.001, (1,)) is not None for i in range(n))
        assert full == n // k


def test_compose_identity_and_chains():
    lib = MeasurementLibrary()
    packets = lib.define_mp("packets", [("size", "int64"), ("t_snd", "float64"), ("t_rcv", "float64")])
    raw = compose([], lib.schemas, raw=["packets"])
    assert [s.name for s in raw.streams] == ["packets"]
    got = []
    raw.bind(lambda stream, ts, values: got.append((stream, ts, values)) or True)
    raw.push(Sample(packets.index, 0.1, (1498, 0.0, 0.1)))
    assert got == [(0, 0.1, (1498, 0.0, 0.1))]

    specs = [
        FilterSpec("bytes", "sum", "packets", ("size",), WindowSpec.by_time(0.5)),
        FilterSpec("peak", "max", "bytes", ("size",), WindowSpec.by_count(2)),
    ]
    p = compose(specs, lib.schemas)
    assert [s.name for s in p.streams] == ["bytes", "peak"]
    out = []
    p.bind(lambda stream, ts, values: out.append((stream, values[-1])) or True)
    for i, t in enumerate([0.1, 0.2, 0.6, 1.1, 1.6]):
        p.push(Sample(packets.index, t, (100 * (i + 1), 0.0, t)))
    p.flush(2.0)
    assert out == [(0, 300), (0, 300), (1, 300), (0, 400), (0, 500), (1, 500)]


def test_compose_errors():
    lib = MeasurementLibrary()
    lib.define_mp("m", [("v", "int64")])
    w = WindowSpec.by_count(2)
    with pytest.raises(DanglingSource):
        compose([FilterSpec("a", "sum", "foo", ("v",), w)], lib.schemas)
    with pytest.raises(CycleDetected):
        compose([FilterSpec("a", "sum", "b", ("v",), w), FilterSpec("b", "sum", "a", ("v",), w)], lib.schemas)
    with pytest.raises(ConfigError):
        compose([FilterSpec("a", "sum", "m", ("v",), w), FilterSpec("a", "max", "m", ("v",), w)], lib.schemas)


def test_apply_filter_wrapper():
    state = FilterState(FilterSpec("o", "sum", "m", ("v",), WindowSpec.by_count(1)), INT)
    assert apply_filter(state, Sample(0, 0.0, (5,))).value == 5
