"""Mobility-trace replay and latency analytics.

Trace files are delimited text, one trip per line::

    vehicle_id,depart_s,arrival_s
    veh0001,27312,28104

A header line and ``#`` comments are allowed. Times are seconds from the
start of the simulated day. The synthetic generator draws departures from a
base rate plus two rush-hour peaks (morning and evening) so that replay
reproduces the shape of a full-day urban mobility pattern.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import os
import random
import threading
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .errors import (
    ConfigError,
    EmptyTrace,
    NoData,
    ParseError,
    TargetUnreachable,
    VpkiError,
)

DAY_S = 24 * 3600
HEADER = ("vehicle_id", "depart_s", "arrival_s")


@dataclass(frozen=True, order=True)
class TripRecord:
    depart_time: int
    arrival_time: int
    vehicle_id: str

    def __post_init__(self) -> None:
        if self.depart_time >= self.arrival_time:
            raise ValueError("depart must precede arrival")

    @property
    def duration(self) -> int:
        return self.arrival_time - self.depart_time


def generate_trace(
    n_trips: int,
    seed: int = 0,
    rush_hours: Sequence[float] = (8.0, 18.0),
    rush_sigma_h: float = 1.0,
    rush_share: float = 0.6,
    median_trip_s: float = 900.0,
    trip_sigma: float = 0.6,
    min_trip_s: int = 60,
    max_trip_s: int = 3 * 3600,
) -> list[TripRecord]:
    """Seeded synthetic full-day trace with a diurnal two-peak departure profile."""
    if n_trips <= 0:
        raise ConfigError("n_trips must be positive")
    rng = random.Random(seed)
    trips = []
    for i in range(n_trips):
        if rng.random() < rush_share:
            peak = rng.choice(list(rush_hours))
            depart = int(rng.gauss(peak, rush_sigma_h) * 3600) % DAY_S
        else:
            depart = rng.randrange(DAY_S)
        duration = int(rng.lognormvariate(math.log(median_trip_s), trip_sigma))
        duration = min(max(duration, min_trip_s), max_trip_s)
        trips.append(TripRecord(depart, depart + duration, f"veh{i:06d}"))
    return sorted(trips)


def write_trace(trips: Iterable[TripRecord], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for t in trips:
            w.writerow((t.vehicle_id, t.depart_time, t.arrival_time))


def ingest_trace(path: str | os.PathLike) -> list[TripRecord]:
    trips = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            if lineno == 1 and row[0].strip() == HEADER[0]:
                continue
            if len(row) != 3:
                raise ParseError(f"line {lineno}: expected 3 fields, got {len(row)}", line=lineno)
            vehicle_id = row[0].strip()
            try:
                depart, arrival = int(row[1]), int(row[2])
            except ValueError:
                raise ParseError(f"line {lineno}: times must be integers", line=lineno) from None
            if not vehicle_id:
                raise ParseError(f"line {lineno}: empty vehicle_id", line=lineno)
            if depart >= arrival:
                raise ParseError(f"line {lineno}: arrival {arrival} not after depart {depart}",
                                 line=lineno)
            trips.append(TripRecord(depart, arrival, vehicle_id))
    if not trips:
        raise EmptyTrace(f"{path}: no trips")
    trips.sort(key=lambda t: t.depart_time)
    return trips


class Jitter(str, enum.Enum):
    NONE = "none"
    UNIFORM = "uniform"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class DelayModel:
    """Per-leg network delay: ``base_ms`` plus optional jitter."""

    base_ms: float = 0.0
    jitter: Jitter = Jitter.NONE
    jitter_ms: float = 0.0  # max for uniform, mean for exponential

    def __post_init__(self) -> None:
        object.__setattr__(self, "jitter", Jitter(self.jitter))
        if self.base_ms < 0 or self.jitter_ms < 0:
            raise ConfigError("delays must be non-negative")

    def sample(self, rng: random.Random) -> float:
        if self.jitter is Jitter.UNIFORM:
            return self.base_ms + rng.uniform(0.0, self.jitter_ms)
        if self.jitter is Jitter.EXPONENTIAL and self.jitter_ms > 0:
            return self.base_ms + rng.expovariate(1.0 / self.jitter_ms)
        return self.base_ms


LEGS = ("ticket_request", "ticket_response", "pseudonym_request", "pseudonym_response")


@dataclass
class LatencyRecord:
    seq: int
    vehicle_id: str
    t_start: float
    end_to_end_ms: float
    tau_p: int
    status: str
    pseudonyms: int = 0
    leg_delays_ms: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "LatencyRecord":
        return cls(
            seq=int(d.get("seq", 0)),
            vehicle_id=str(d.get("vehicle_id", "")),
            t_start=float(d.get("t_start", d.get("t_start_unix_ms", 0.0))),
            end_to_end_ms=float(d["end_to_end_ms"]),
            tau_p=int(d.get("tau_p", 0)),
            status=str(d.get("status", "ok")),
            pseudonyms=int(d.get("pseudonyms", 0)),
            leg_delays_ms=list(d.get("leg_delays_ms", [])),
        )


def _leg_rng(seed: int, index: int) -> random.Random:
    return random.Random(f"{seed}:{index}")


def leg_delays(model: DelayModel, seed: int, index: int) -> list[float]:
    """The four per-leg delays (ms) of request ``index``; independent of thread timing."""
    rng = _leg_rng(seed, index)
    return [model.sample(rng) for _ in LEGS]


class ReplayTarget:
    """Acquires pseudonyms for trips, enrolling each trace vehicle on first use."""

    def __init__(self, ltca, pca, pca_id: str, trust, epoch: int | None = None,
                 keygen_timed: bool = True) -> None:
        from .client import Vehicle

        self._vehicle_cls = Vehicle
        self.ltca = ltca
        self.pca = pca
        self.pca_id = pca_id
        self.trust = tuple(trust)
        self.epoch = int(time.time()) if epoch is None else epoch
        self.keygen_timed = keygen_timed
        self._vehicles: dict[str, object] = {}
        self._lock = threading.Lock()
        self._per_vehicle: dict[str, threading.Lock] = defaultdict(threading.Lock)

    def vehicle(self, vehicle_id: str):
        with self._lock:
            lock = self._per_vehicle[vehicle_id]
        with lock:
            v = self._vehicles.get(vehicle_id)
            if v is None:
                v = self._vehicle_cls.enroll(vehicle_id, self.ltca, self.pca, self.pca_id,
                                             self.trust, keygen_timed=self.keygen_timed)
                self._vehicles[vehicle_id] = v
            return v

    def preflight(self) -> None:
        if hasattr(self.ltca, "channel"):
            from .gateway import MessageType

            self.ltca.channel.call(MessageType.ECHO_REQ, 5.0, payload=b"ping")
            self.pca.channel.call(MessageType.ECHO_REQ, 5.0, payload=b"ping")


def replay(
    trips: Sequence[TripRecord],
    tau_p: int,
    delay_model: DelayModel,
    target: ReplayTarget,
    time_compression: float = 60.0,
    seed: int = 0,
    max_workers: int = 64,
) -> list[LatencyRecord]:
    """Acquire pseudonyms for every trip at its (compressed) departure time.

    Each of the four message legs is delayed by a sample from ``delay_model``;
    the samples for request ``i`` depend only on ``(seed, i)``. Failed
    acquisitions are recorded, never dropped.
    """
    if time_compression < 1:
        raise ConfigError("time_compression must be >= 1")
    if not trips:
        raise EmptyTrace("nothing to replay")
    try:
        target.preflight()
    except Exception as exc:
        raise TargetUnreachable(f"replay target unreachable: {exc}") from exc

    ordered = sorted(enumerate(trips), key=lambda it: (it[1].depart_time, it[0]))
    records: list[LatencyRecord | None] = [None] * len(trips)
    t0_trace = ordered[0][1].depart_time
    t0_wall = time.monotonic()

    def run(index: int, trip: TripRecord) -> None:
        delays = leg_delays(delay_model, seed, index)

        def delayed(req_ms: float, resp_ms: float) -> Callable:
            def wrap(fn: Callable) -> Callable:
                def call(arg):
                    time.sleep(req_ms / 1000.0)
                    out = fn(arg)
                    time.sleep(resp_ms / 1000.0)
                    return out
                return call
            return wrap

        start = target.epoch + trip.depart_time
        status, n, elapsed = "ok", 0, 0.0
        t_begin = time.monotonic()
        try:
            vehicle = target.vehicle(trip.vehicle_id)
            t_begin = time.monotonic()
            result = vehicle.acquire(start, start + trip.duration, tau_p,
                                     ticket_step=delayed(delays[0], delays[1]),
                                     pseudonym_step=delayed(delays[2], delays[3]))
            vehicle.pool.clear()
            n = len(result.pseudonyms)
            elapsed = result.end_to_end_ms
        except VpkiError as exc:
            status = f"error:{exc.code}" + (f"@{exc.step}" if exc.step else "")
            elapsed = (time.monotonic() - t_begin) * 1000.0
        except Exception as exc:
            status = f"error:{type(exc).__name__}"
            elapsed = (time.monotonic() - t_begin) * 1000.0
        records[index] = LatencyRecord(index, trip.vehicle_id, float(trip.depart_time), elapsed,
                                       tau_p, status, n, delays)

    with ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="replay") as pool:
        for index, trip in ordered:
            due = t0_wall + (trip.depart_time - t0_trace) / time_compression
            wait = due - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            pool.submit(run, index, trip)
    return [r for r in records if r is not None]


def nearest_rank(sorted_values: Sequence[float], percentile: float) -> float:
    if not 0 <= percentile <= 100:
        raise ValueError("percentile must be within [0, 100]")
    n = len(sorted_values)
    rank = max(1, math.ceil(Fraction(str(percentile)) * n / 100))
    return sorted_values[rank - 1]


def cdf(records: Iterable[LatencyRecord | float], percentiles: Iterable[float]) -> list[tuple[float, float]]:
    """Nearest-rank percentiles over successful records (or raw values)."""
    values = sorted(
        r if isinstance(r, (int, float)) else r.end_to_end_ms
        for r in records
        if isinstance(r, (int, float)) or r.status == "ok"
    )
    if not values:
        raise NoData("no successful records")
    return [(p, nearest_rank(values, p)) for p in sorted(percentiles)]


def fleet_sizing(n_vehicles: int, commute_hours_per_day: float, tau_p: float,
                 days_per_year: int) -> int:
    """Pseudonyms per year: one per lifetime slot of every vehicle's daily commute."""
    for name, v in (("n_vehicles", n_vehicles), ("commute_hours_per_day", commute_hours_per_day),
                    ("tau_p", tau_p), ("days_per_year", days_per_year)):
        if not v > 0:
            raise ConfigError(f"{name} must be positive")
    per_day = math.ceil(Fraction(str(commute_hours_per_day)) * 3600 / Fraction(str(tau_p)))
    return int(n_vehicles) * per_day * int(days_per_year)


def total_pseudonyms(trips: Iterable[TripRecord], tau_p: int) -> int:
    return sum(math.ceil(t.duration / tau_p) for t in trips)


# -- plot data --------------------------------------------------------------------

def read_ndjson(path: str | os.PathLike) -> list[dict]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: {exc.msg}", line=lineno) from None
    return rows


def cdf_series(values: Sequence[float]) -> list[tuple[float, float]]:
    ordered = sorted(values)
    n = len(ordered)
    return [(v, (i + 1) / n) for i, v in enumerate(ordered)]


def staircase(events: Sequence[Mapping]) -> list[tuple[float, int]]:
    """Replica count vs time with a vertical segment at every change."""
    points: list[tuple[float, int]] = []
    for e in sorted(events, key=lambda e: e["timestamp"]):
        t, n = float(e["timestamp"]), int(e["replica_count"])
        if points and points[-1][1] != n:
            points.append((t, points[-1][1]))
        if not points or points[-1] != (t, n):
            points.append((t, n))
    return points


def _start_s(r: Mapping) -> float | None:
    # load records stamp wall-clock ms, replay records stamp trace seconds
    if "t_start_unix_ms" in r:
        return float(r["t_start_unix_ms"]) / 1000.0
    if "t_start" in r:
        return float(r["t_start"])
    return None


def request_rate(records: Sequence[Mapping], bin_s: float = 1.0) -> list[tuple[float, float]]:
    times = [t for t in map(_start_s, records) if t is not None]
    if not times:
        return []
    t0 = math.floor(min(times) / bin_s) * bin_s
    bins: dict[int, int] = defaultdict(int)
    for t in times:
        bins[int((t - t0) // bin_s)] += 1
    last = max(bins)
    return [(t0 + i * bin_s, bins.get(i, 0) / bin_s) for i in range(last + 1)]


def _write_series(path: Path, header: tuple[str, str], rows: Iterable[tuple]) -> Path:
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(f"{v:g}" if isinstance(v, float) else str(v) for v in row) + "\n")
    return path


def render_plot_data(
    out_dir: str | os.PathLike,
    latency_records: Sequence[Mapping] | None = None,
    scaling_events: Sequence[Mapping] | None = None,
) -> list[Path]:
    """Write tab-separated (x, y) series for external plotting."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if latency_records is not None:
        by_tau: dict[int, list[float]] = defaultdict(list)
        for r in latency_records:
            if "end_to_end_ms" not in r:
                raise ParseError("latency record without end_to_end_ms")
            if r.get("status", "ok") == "ok":
                by_tau[int(r.get("tau_p", 0))].append(float(r["end_to_end_ms"]))
        for tau, values in sorted(by_tau.items()):
            written.append(_write_series(out / f"cdf_tau{tau}.tsv", ("latency_ms", "cdf"),
                                         cdf_series(values)))
        if not by_tau:
            written.append(_write_series(out / "cdf.tsv", ("latency_ms", "cdf"), []))
        if any(_start_s(r) is not None for r in latency_records):
            written.append(_write_series(out / "request_rate.tsv", ("t_s", "requests_per_s"),
                                         request_rate(latency_records)))
    if scaling_events is not None:
        for e in scaling_events:
            if "timestamp" not in e or "replica_count" not in e:
                raise ParseError("scaling event without timestamp/replica_count")
        written.append(_write_series(out / "replicas.tsv", ("t_s", "replicas"),
                                     staircase(scaling_events)))
    return written
