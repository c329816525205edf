import json
import math
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from vpkiaas import bench
from vpkiaas.bench import DelayModel, LatencyRecord, ReplayTarget, TripRecord
from vpkiaas.domain import Domain
from vpkiaas.errors import ConfigError, EmptyTrace, NoData, ParseError, TargetUnreachable


def brute_percentile(values, p):
    """Sort-and-index oracle written independently of the library."""
    ordered = sorted(values)
    share = Fraction(repr(p)) / 100
    k = 0
    # smallest k such that at least p% of the values are <= ordered[k]
    while k + 1 < share * len(ordered):
        k += 1
    return ordered[k]


# -- trace files ---------------------------------------------------------------------

def test_three_line_file(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("vehicle_id,depart_s,arrival_s\nb,300,400\na,100,200\n# comment\nc,200,900\n")
    trips = bench.ingest_trace(path)
    assert [t.vehicle_id for t in trips] == ["a", "c", "b"]


def test_bad_line_is_named(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("a,100,200\nb,500,400\n")
    with pytest.raises(ParseError) as info:
        bench.ingest_trace(path)
    assert info.value.line == 2 and "line 2" in str(info.value)


@pytest.mark.parametrize("body", ["a,1\n", "a,x,3\n", ",1,2\n"])
def test_malformed_lines(tmp_path, body):
    path = tmp_path / "t.csv"
    path.write_text(body)
    with pytest.raises(ParseError):
        bench.ingest_trace(path)


def test_empty_trace(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("vehicle_id,depart_s,arrival_s\n")
    with pytest.raises(EmptyTrace):
        bench.ingest_trace(path)


def test_generator_round_trip(tmp_path):
    trips = bench.generate_trace(10_000, seed=1)
    bench.write_trace(trips, tmp_path / "t.csv")
    assert bench.ingest_trace(tmp_path / "t.csv") == trips


def test_generator_shape():
    trips = bench.generate_trace(20_000, seed=2)
    assert trips == bench.generate_trace(20_000, seed=2)
    hours = [0] * 24
    for t in trips:
        hours[t.depart_time // 3600] += 1
    # two rush-hour peaks dominate the night
    assert hours[8] > 3 * hours[3] and hours[18] > 3 * hours[3]
    assert all(t.depart_time < t.arrival_time for t in trips)


# -- delay model ---------------------------------------------------------------------

@given(st.floats(0, 500), st.sampled_from(list(bench.Jitter)), st.floats(0, 100), st.integers(0, 10**6))
def test_delays_never_below_base(base, jitter, jitter_ms, seed):
    model = DelayModel(base, jitter, jitter_ms)
    assert all(d >= base for d in bench.leg_delays(model, seed, 0))


def test_delays_are_per_request_deterministic():
    model = DelayModel(10, "exponential", 5)
    assert bench.leg_delays(model, 7, 3) == bench.leg_delays(model, 7, 3)
    assert bench.leg_delays(model, 7, 3) != bench.leg_delays(model, 7, 4)


def test_negative_delay_rejected():
    with pytest.raises(ConfigError):
        DelayModel(-1)


# -- percentiles ---------------------------------------------------------------------

def test_ramp_p95():
    assert bench.cdf(range(1, 101), [95]) == [(95, 95)]


def test_single_record():
    assert [v for _, v in bench.cdf([7.0], [0, 1, 50, 99, 100])] == [7.0] * 5


def test_cdf_no_data():
    with pytest.raises(NoData):
        bench.cdf([LatencyRecord(0, "v", 0, 5, 60, "error:Timeout")], [50])


def test_failed_records_are_excluded():
    recs = [LatencyRecord(i, "v", 0, float(i), 60, "ok" if i % 2 else "error:X") for i in range(10)]
    assert bench.cdf(recs, [100]) == [(100, 9.0)]


def test_large_random_set_matches_oracle():
    rng = random.Random(11)
    values = [rng.expovariate(1 / 80) for _ in range(10_000)]
    pcts = [0, 0.1, 1, 5, 25, 50, 75, 90, 95, 99, 99.9, 100]
    assert bench.cdf(values, pcts) == [(p, brute_percentile(values, p)) for p in pcts]


@settings(max_examples=200)
@given(st.lists(st.floats(0, 1e4, allow_nan=False), min_size=1, max_size=200),
       st.lists(st.floats(0, 100), min_size=1, max_size=5))
def test_cdf_matches_oracle(values, pcts):
    assert bench.cdf(values, pcts) == [(p, brute_percentile(values, p)) for p in sorted(pcts)]


# -- workload arithmetic ---------------------------------------------------------------

def test_fleet_sizing_headline():
    expected = 350 * 10**6 * (3600 // 300) * 365
    assert bench.fleet_sizing(350 * 10**6, 1, 300, 365) == expected == 1_533_000_000_000
    assert expected >= 1.5e12


def test_fleet_sizing_small_cases():
    assert bench.fleet_sizing(1, 1, 3600, 1) == 1
    assert bench.fleet_sizing(10, 0.5, 300, 2) == 10 * 6 * 2
    # a partial slot still needs its own pseudonym
    assert bench.fleet_sizing(1, 0.1, 300, 1) == 2


def test_fleet_sizing_rejects_zero():
    with pytest.raises(ConfigError):
        bench.fleet_sizing(0, 1, 300, 365)


@given(st.lists(st.tuples(st.integers(0, 80000), st.integers(1, 10000)), min_size=1, max_size=50))
def test_workload_non_increasing_in_tau(raw):
    trips = [TripRecord(d, d + dur, f"v{i}") for i, (d, dur) in enumerate(raw)]
    totals = [bench.total_pseudonyms(trips, tau) for tau in (60, 300, 600, 3600)]
    assert totals == sorted(totals, reverse=True)


# -- replay ----------------------------------------------------------------------------

@pytest.fixture
def replay_domain(material):
    d = Domain.create(tau_p=60, material=material)
    yield d
    d.close()


def target(d):
    return ReplayTarget(d.ltca, d.pcas["pca-1"], "pca-1", d.material.chain)


def test_replay_zero_delay(replay_domain):
    trips = bench.generate_trace(100, seed=3, max_trip_s=600)
    records = bench.replay(trips, 60, DelayModel(), target(replay_domain), time_compression=86400)
    assert len(records) == 100
    assert all(r.status == "ok" for r in records)
    assert sum(r.pseudonyms for r in records) == bench.total_pseudonyms(trips, 60)


def test_replay_leg_delays_bound_latency(replay_domain):
    trips = bench.generate_trace(30, seed=4, max_trip_s=300)
    records = bench.replay(trips, 60, DelayModel(50), target(replay_domain), time_compression=86400)
    assert all(r.status == "ok" for r in records)
    assert min(r.end_to_end_ms for r in records) >= 200


def test_simultaneous_departures(replay_domain):
    trips = [TripRecord(1000, 1300, f"v{i}") for i in range(20)]
    records = bench.replay(trips, 60, DelayModel(), target(replay_domain))
    assert sorted(r.vehicle_id for r in records) == sorted(t.vehicle_id for t in trips)
    assert all(r.status == "ok" and r.pseudonyms == 5 for r in records)


def test_replay_schedule_is_reproducible(replay_domain, material):
    trips = bench.generate_trace(20, seed=5, max_trip_s=300)
    model = DelayModel(1, "uniform", 3)
    a = bench.replay(trips, 60, model, target(replay_domain), time_compression=86400, seed=9)
    # vehicle ids are registered once per domain, so the rerun needs a fresh one
    other = Domain.create(tau_p=60, material=material)
    try:
        b = bench.replay(trips, 60, model, target(other), time_compression=86400, seed=9)
    finally:
        other.close()
    assert [r.leg_delays_ms for r in a] == [r.leg_delays_ms for r in b]
    assert [r.pseudonyms for r in a] == [r.pseudonyms for r in b]


def test_replay_failures_are_recorded(replay_domain):
    trips = [TripRecord(0, 3 * 86400, "too-long"), TripRecord(10, 70, "fine")]
    records = bench.replay(trips, 60, DelayModel(), target(replay_domain))
    by_id = {r.vehicle_id: r for r in records}
    assert by_id["too-long"].status == "error:WindowTooLarge@ticket"
    assert by_id["fine"].status == "ok"


def test_replay_unreachable_target():
    class Dead:
        def preflight(self):
            raise ConnectionRefusedError

    with pytest.raises(TargetUnreachable):
        bench.replay([TripRecord(0, 60, "v")], 60, DelayModel(), Dead())


def test_latency_record_json_round_trip():
    r = LatencyRecord(1, "v", 2.0, 3.5, 60, "ok", 4, [1.0, 2.0, 3.0, 4.0])
    assert LatencyRecord.from_dict(json.loads(r.to_json())) == r


# -- plot data -------------------------------------------------------------------------

def read_tsv(path):
    header, *rows = path.read_text().splitlines()
    return header.split("\t"), [tuple(map(float, r.split("\t"))) for r in rows]


def test_staircase_steps(tmp_path):
    events = [{"timestamp": 0, "replica_count": 1}, {"timestamp": 10, "replica_count": 2},
              {"timestamp": 20, "replica_count": 3}]
    [path] = bench.render_plot_data(tmp_path, scaling_events=events)
    header, rows = read_tsv(path)
    assert header == ["t_s", "replicas"]
    assert rows == [(0, 1), (10, 1), (10, 2), (20, 2), (20, 3)]


def test_two_tau_series(tmp_path):
    recs = [{"end_to_end_ms": v, "tau_p": tau, "status": "ok"} for tau in (60, 300) for v in (1, 2)]
    paths = bench.render_plot_data(tmp_path, latency_records=recs)
    assert sorted(p.name for p in paths) == ["cdf_tau300.tsv", "cdf_tau60.tsv"]
    assert read_tsv(tmp_path / "cdf_tau60.tsv")[1] == [(1, 0.5), (2, 1.0)]


def test_empty_log_gives_header_only(tmp_path):
    [path] = bench.render_plot_data(tmp_path, scaling_events=[])
    assert path.read_text() == "t_s\treplicas\n"


def test_request_rate_series(tmp_path):
    recs = [{"end_to_end_ms": 1, "t_start_unix_ms": 1000.0 * t} for t in (0, 0.5, 2.1)]
    paths = bench.render_plot_data(tmp_path, latency_records=recs)
    _, rows = read_tsv(tmp_path / "request_rate.tsv")
    assert rows == [(0, 2), (1, 0), (2, 1)]


def test_bad_ndjson_line(tmp_path):
    path = tmp_path / "x.ndjson"
    path.write_text('{"a": 1}\nnot json\n')
    with pytest.raises(ParseError) as info:
        bench.read_ndjson(path)
    assert info.value.line == 2
