import numpy as np
import pytest
from fuzz import random_frame, random_header, same_frame
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import missing_from

from obsmeter.errors import (
    DuplicateSeq,
    MalformedHeader,
    NonContiguousIndices,
    ProtocolError,
    ProtocolVersionMismatch,
    UndeclaredStream,
)
from obsmeter.measurement import ClientIdentity, MetricType
from obsmeter.protocol import (
    GapTracker,
    HeaderBlock,
    StreamFrame,
    StreamParser,
    StreamSchema,
    decode_frame,
    decode_header,
    detect_gaps,
    encode_frame,
    encode_header,
    encode_trailer,
    escape,
    unescape,
)

IDENT = ClientIdentity("exp", "node1", "probe", 1700000000.5)
TRANSFER = StreamSchema(1, "transfer", (("size", MetricType.INT64),))
NOTE = StreamSchema(2, "note", (("text", MetricType.TEXT),))


def test_minimal_header_layout():
    data = encode_header(HeaderBlock(IDENT, (TRANSFER,)))
    lines = data.decode().split("\n")
    assert lines[:6] == [
        "protocol: 1",
        "experiment-id: exp",
        "node-id: node1",
        "app-name: probe",
        "start-time: 1700000000.5",
        "schema: 1 transfer size:int64",
    ]
    assert data.endswith(b"\n\n") and len(lines) == 8


def test_header_validation():
    with pytest.raises(NonContiguousIndices):
        encode_header(HeaderBlock(IDENT, (TRANSFER, StreamSchema(3, "x", (("v", MetricType.INT64),)))))
    good = encode_header(HeaderBlock(IDENT, (TRANSFER,))).decode()
    with pytest.raises(ProtocolVersionMismatch):
        decode_header(good.replace("protocol: 1", "protocol: 2"))
    with pytest.raises(MalformedHeader):
        decode_header(good.replace("schema: 1 transfer size:int64", "schema: 1 transfer size:int32"))
    with pytest.raises(MalformedHeader):
        decode_header(good.replace("node-id: node1\n", ""))
    with pytest.raises(MalformedHeader):
        decode_header(good[:-1])


def test_frame_examples():
    schemas = {1: TRANSFER, 2: NOTE}
    assert encode_frame(StreamFrame(0.5, 1, 0, (1498,)), schemas) == b"0.500000\t1\t0\t1498\n"
    line = encode_frame(StreamFrame(1.0, 2, 3, ("a\tb",)), schemas)
    assert line == b"1.000000\t2\t3\ta\\tb\n"
    assert decode_frame(line, schemas).values == ("a\tb",)
    with pytest.raises(UndeclaredStream):
        encode_frame(StreamFrame(0.0, 9, 0, (1,)), schemas)
    with pytest.raises(UndeclaredStream):
        decode_frame(b"0.000000\t9\t0\t1\n", schemas)
    with pytest.raises(ProtocolError):
        decode_frame(b"0.000000\t1\t0\tabc\n", schemas)


@settings(max_examples=300)
@given(st.text())
def test_escape_round_trip(text):
    esc = escape(text)
    assert "\t" not in esc and "\n" not in esc
    assert unescape(esc) == text


def test_fuzzed_round_trip_small():
    rng = np.random.default_rng(11)
    for _ in range(200):
        h = random_header(rng)
        assert decode_header(encode_header(h)) == h
        schemas = h.schema_map()
        for _ in range(50):
            f = random_frame(rng, h)
            assert same_frame(decode_frame(encode_frame(f, schemas), schemas), f)


def test_frame_encoding_is_injective():
    rng = np.random.default_rng(12)
    h = random_header(rng)
    schemas = h.schema_map()
    seen = {}
    for _ in range(3000):
        f = random_frame(rng, h)
        b = encode_frame(f, schemas)
        if b in seen:
            assert same_frame(seen[b], f)
        seen[b] = f


def test_detect_gaps_examples():
    assert detect_gaps([0, 1, 2, 3]).missing == 0
    r = detect_gaps([0, 1, 5, 6])
    assert (r.missing, r.ranges) == (3, [(2, 4)])
    with pytest.raises(DuplicateSeq):
        detect_gaps([0, 1, 1])
    r = detect_gaps([2, 3], start=0, end=6)
    assert (r.missing, r.ranges) == (4, [(0, 1), (4, 5)])


@settings(max_examples=200)
@given(st.integers(1, 500), st.data())
def test_gap_count_equals_dropped(n, data):
    drop = data.draw(st.sets(st.integers(0, n - 1), max_size=n))
    kept = [s for s in range(n) if s not in drop]
    rep = detect_gaps(kept, start=0, end=n)
    assert rep.missing == len(drop)
    assert [s for a, b in rep.ranges for s in range(a, b + 1)] == missing_from(kept, 0, n)
    tracker = GapTracker()
    for s in kept:
        tracker.observe(s)
    tracker.close(n)
    assert tracker.report().missing == len(drop)


def test_stream_parser_incremental_with_trailer():
    h = HeaderBlock(IDENT, (TRANSFER, NOTE))
    schemas = h.schema_map()
    data = encode_header(h)
    data += encode_frame(StreamFrame(0.1, 1, 0, (10,)), schemas)
    data += encode_frame(StreamFrame(0.2, 2, 0, ("x\ny",)), schemas)
    data += encode_trailer({1: 1, 2: 3})
    parser = StreamParser()
    events = []
    for i in range(0, len(data), 7):
        events.extend(parser.feed(data[i:i + 7]))
    events.extend(parser.finish())
    kinds = [k for k, _ in events]
    assert kinds == ["header", "frame", "frame", "final"]
    assert events[2][1].values == ("x\ny",)
    assert events[3][1] == {1: 1, 2: 3}
    assert parser.orderly


def test_stream_parser_rejects_truncation():
    parser = StreamParser()
    parser.feed(encode_header(HeaderBlock(IDENT, (TRANSFER,))) + b"0.1\t1")
    with pytest.raises(ProtocolError):
        parser.finish()
