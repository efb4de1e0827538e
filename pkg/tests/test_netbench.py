import numpy as np
import pytest
from oracles import jitter_recurrence, rel_close

from obsmeter import MeasurementLibrary
from obsmeter.channel import Path, PathConfig, TraceRecord
from obsmeter.filters import WindowSpec
from obsmeter.netbench import (
    ZERO_COST,
    CostModel,
    ProbeFlavour,
    VirtualClient,
    VirtualClock,
    ancillary_report,
    define_probe_mps,
    define_tap_mps,
    parse_tap_csv,
    parse_vanilla_csv,
    probe_config,
    run_probe_receiver,
    run_probe_sender,
    run_probe_sender_wall,
    run_tap_reporter,
    send_schedule,
    tap_config,
)
from obsmeter.server import CollectionServer, LocalEndpoint, load_store


def probe_client(server, clock, flavour, role, drain_fps=None, buffer=None):
    lib = MeasurementLibrary(clock)
    define_probe_mps(lib)
    cfg = probe_config(flavour, role)
    if buffer:
        cfg += f"buffer {buffer}\n"
    return VirtualClient(lib, cfg, {"s": LocalEndpoint(server, clock)}, clock, drain_fps=drain_fps)


def tap_client(server, clock, flavour, drain_fps=None, buffer=None):
    lib = MeasurementLibrary(clock)
    define_tap_mps(lib)
    cfg = tap_config(flavour, WindowSpec.by_time(0.5))
    if buffer:
        cfg += f"buffer {buffer}\n"
    return VirtualClient(lib, cfg, {"s": LocalEndpoint(server, clock)}, clock, drain_fps=drain_fps)


def sender_rate(flavour, rate, duration=4.0, costs=None, seed=1):
    path = Path(PathConfig(1e9, seed=seed))
    return run_probe_sender(path, rate, duration, flavour, costs or CostModel(), seed=seed).achieved_rate


def test_cost_model_saturation_points():
    c = CostModel()
    adv_off = ProbeFlavour("advanced-mp", False)
    adv_on = ProbeFlavour("advanced-mp", True)
    assert c.saturation_rate(adv_off, 1498) < c.saturation_rate(adv_on, 1498) < 100e6
    for name in ("vanilla-csv", "legacy-mp", "advanced-filtered"):
        for th in (False, True):
            assert c.saturation_rate(ProbeFlavour(name, th), 1498) > 100e6
    assert ZERO_COST.saturation_rate(adv_off, 1498) == float("inf")
    with pytest.raises(ValueError):
        ProbeFlavour("iperf3")
    assert str(adv_on) == "advanced-mp:threads"


def test_unloaded_sender_hits_set_rate():
    got = sender_rate(ProbeFlavour("vanilla-csv"), 10e6)
    assert got == pytest.approx(10e6, rel=0.01)


def test_advanced_mp_degrades_and_filter_does_not():
    vanilla = sender_rate(ProbeFlavour("vanilla-csv"), 100e6)
    adv = sender_rate(ProbeFlavour("advanced-mp"), 100e6)
    adv_threads = sender_rate(ProbeFlavour("advanced-mp", True), 100e6)
    filtered = sender_rate(ProbeFlavour("advanced-filtered"), 100e6)
    assert adv < 0.8 * vanilla
    assert adv < adv_threads < vanilla
    assert filtered == pytest.approx(vanilla, rel=0.01)


def test_send_schedule_paces_and_never_overlaps():
    rng = np.random.default_rng(0)
    flav = ProbeFlavour("advanced-mp")
    t = send_schedule(100e6, 0.5, flav, CostModel(noise_us=0, stall_rate=0), rng)
    gaps = np.diff(t)
    assert gaps.min() >= int(CostModel().cycle_us(flav)) - 1
    t0 = send_schedule(1e6, 1.0, ProbeFlavour("vanilla-csv"), ZERO_COST, rng, size=125)
    assert np.array_equal(t0, np.arange(1000) * 1000)
    with pytest.raises(ValueError):
        send_schedule(0, 1.0, flav, ZERO_COST, rng)


def _records(ids, size=1000, spacing_us=1000, transit_us=500):
    return [TraceRecord(i, size, i * spacing_us, i * spacing_us + transit_us, i * spacing_us + transit_us, i * spacing_us + transit_us) for i in ids]


def test_receiver_counts_loss_from_id_advance():
    recs = _records([i for i in range(100) if i != 7])
    out = run_probe_receiver(recs, ProbeFlavour("vanilla-csv"), 0.5, duration=0.5)
    (s,) = out.stats
    assert (s.lost, s.sent, s.transferred) == (1, 100, 99 * 1000)
    assert parse_vanilla_csv(out.csv)[0] == s
    with pytest.raises(ValueError):
        run_probe_receiver(recs, ProbeFlavour("vanilla-csv"), 0.25)


def test_receiver_jitter_matches_recurrence():
    path = Path(PathConfig(50e6, base_delay=0.001, jitter_model="gaussian", jitter=0.0003, seed=4))
    for i in range(4000):
        path.send_packet(1000, i * 0.0005)
    out = run_probe_receiver(path.records, ProbeFlavour("vanilla-csv"), 0.5, duration=2.0)
    arrivals = sorted(path.records, key=lambda r: (r.t_rcv_us, r.packet_id))
    js = jitter_recurrence([r.t_snd_us for r in arrivals], [r.t_rcv_us for r in arrivals])
    for s in out.stats:
        upto = [j for r, j in zip(arrivals, js) if r.t_rcv_us < round(s.t1 * 1e6)]
        assert rel_close(s.jitter, upto[-1])
    assert out.stats[-1].jitter > 0


def test_lossless_throughput_matches_trace():
    path = Path(PathConfig(1e9, seed=2))
    log = run_probe_sender(path, 20e6, 3.0, ProbeFlavour("vanilla-csv"), ZERO_COST)
    out = run_probe_receiver(log.records, ProbeFlavour("vanilla-csv"), 0.5, duration=3.0)
    for s in out.stats:
        lo, hi = round(s.t0 * 1e6), round(s.t1 * 1e6)
        trace_bytes = sum(r.size for r in log.records if lo <= r.t_rcv_us < hi)
        assert s.throughput == trace_bytes / 0.5


def test_vanilla_and_legacy_report_identical_statistics(tmp_path):
    path = Path(PathConfig(30e6, base_delay=0.002, jitter_model="uniform", jitter=0.0004, loss=0.01, seed=9))
    log = run_probe_sender(path, 25e6, 3.0, ProbeFlavour("vanilla-csv"), ZERO_COST)
    vanilla = run_probe_receiver(log.records, ProbeFlavour("vanilla-csv"), 0.5, duration=3.0)
    clock = VirtualClock()
    server = CollectionServer(tmp_path, clock=clock, writer="inline")
    client = probe_client(server, clock, ProbeFlavour("legacy-mp"), "receiver")
    legacy = run_probe_receiver(log.records, ProbeFlavour("legacy-mp"), 0.5, duration=3.0, client=client)
    client.close()
    server.finalize("probe")
    store = load_store(tmp_path / "probe")
    transfer = store.table("transfer").rows
    losses = store.table("losses").rows
    jitter = store.table("jitter").rows
    assert len(transfer) == len(vanilla.stats) == 6
    for s, t, l, j in zip(vanilla.stats, transfer, losses, jitter):
        assert (t[3], t[4], t[5]) == (s.t0, s.t1, s.transferred)
        assert (l[5], l[6]) == (s.lost, s.sent)
        assert j[5] == s.jitter
    assert [(s.transferred, s.lost, s.jitter) for s in legacy.stats] == [(s.transferred, s.lost, s.jitter) for s in vanilla.stats]


def test_advanced_per_packet_accounting(tmp_path):
    clock = VirtualClock()
    server = CollectionServer(tmp_path, clock=clock, writer="inline")
    path = Path(PathConfig(1e9, seed=3))
    log = run_probe_sender(path, 50e6, 2.0, ProbeFlavour("vanilla-csv"), ZERO_COST)
    client = probe_client(server, clock, ProbeFlavour("advanced-mp"), "receiver", drain_fps=3000, buffer=256)
    out = run_probe_receiver(log.records, ProbeFlavour("advanced-mp"), 0.5, duration=2.0, client=client)
    summary = client.close()
    report = server.finalize("probe")
    st = report.stream("packets")
    delivered = sum(r.delivered for r in log.records)
    assert out.samples == delivered
    assert st.rows + summary.dropped["packets"] + st.server_drops == delivered
    assert st.client_gaps == summary.dropped["packets"] > 0


def test_tap_mp_reports_two_samples_per_packet(tmp_path):
    recs = _records(range(1000), spacing_us=400)
    clock = VirtualClock()
    server = CollectionServer(tmp_path, clock=clock, writer="inline")
    client = tap_client(server, clock, "mp")
    out = run_tap_reporter(recs, "mp", client)
    client.close()
    report = server.finalize("tap")
    assert out.samples == 2000
    assert report.stream("ip").rows + report.stream("udp").rows == 2000


def test_tap_stalled_reporter_gaps_equal_shortfall(tmp_path):
    recs = _records(range(2000), spacing_us=100)
    clock = VirtualClock()
    server = CollectionServer(tmp_path, clock=clock, writer="inline")
    client = tap_client(server, clock, "mp", drain_fps=1000, buffer=64)
    out = run_tap_reporter(recs, "mp", client)
    summary = client.close()
    report = server.finalize("tap")
    collected = report.stream("ip").rows + report.stream("udp").rows
    assert collected < out.samples
    assert report.total_client_gaps == out.samples - collected == summary.total_dropped


def test_tap_filtered_window_sums(tmp_path):
    rng = np.random.default_rng(8)
    sizes = rng.integers(60, 1500, 3000)
    times = np.sort(rng.integers(0, 3_000_000, 3000))
    recs = [TraceRecord(i, int(s), int(t), int(t), int(t), int(t)) for i, (s, t) in enumerate(zip(sizes, times))]
    clock = VirtualClock()
    server = CollectionServer(tmp_path, clock=clock, writer="inline")
    client = tap_client(server, clock, "mp-filtered")
    run_tap_reporter(recs, "mp-filtered", client)
    clock.now = 3.0
    client.close()
    server.finalize("tap")
    rows = load_store(tmp_path / "tap").table("ip_bytes").rows
    want = {}
    for r in recs:
        want[r.t_rcv_us // 500_000] = want.get(r.t_rcv_us // 500_000, 0) + r.size
    assert {int(round(r[3] * 2)): r[7] for r in rows} == want


def test_tap_csv_round_trip():
    recs = _records(range(5))
    out = run_tap_reporter(recs, "csv")
    assert parse_tap_csv(out.csv) == [(r.t_rcv, r.packet_id, r.size) for r in recs]
    assert out.samples == 0


def test_ancillary_report_single_sample_with_escapes(tmp_path):
    clock = VirtualClock()
    server = CollectionServer(tmp_path, clock=clock, writer="inline")
    client = probe_client(server, clock, ProbeFlavour("legacy-mp"), "sender")
    ancillary_report(client.library, None, ["--title", "a\tb", "x\ny"], "sender")
    client.close()
    server.finalize("probe")
    rows = load_store(tmp_path / "probe").table("application").rows
    assert len(rows) == 1
    assert rows[0][3:] == ("", "--title a\tb x\ny", "sender")


def test_wall_clock_sender_smoke():
    log = run_probe_sender_wall(2e6, 0.2, ProbeFlavour("vanilla-csv"))
    assert log.achieved_rate == pytest.approx(2e6, rel=0.1)
    log = run_probe_sender_wall(2e6, 0.2, ProbeFlavour("advanced-mp", True), busy_us=5)
    assert log.sent > 0 and log.dropped == 0
