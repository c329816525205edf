"""Vehicle-side acquisition and the synthetic load generator.

``Vehicle.acquire`` runs the two-step exchange (ticket from the LTCA, then
one pseudonym batch from the PCA), checks every returned pseudonym and
times the whole thing. ``run_load`` drives any acquisition callable at a
fixed offered rate across worker streams and records one latency record per
request.
"""

from __future__ import annotations

import enum
import logging
import math
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

from .credentials import Certificate, KeyPair, generate_keypair, make_csr, verify_chain
from .errors import ConfigError, InvalidRequest, TargetUnreachable, VpkiError
from .ltca import SignedTicketRequest, Ticket, TicketRequest
from .pca import PseudonymBatchRequest

logger = logging.getLogger(__name__)


@dataclass
class AcquisitionResult:
    pseudonyms: list[tuple[Certificate, KeyPair]]
    ticket: Ticket
    t_request_sent: float
    t_response_received: float
    step_ms: dict[str, float] = field(default_factory=dict)

    @property
    def end_to_end_ms(self) -> float:
        return (self.t_response_received - self.t_request_sent) * 1000.0


class RefillPolicy(Protocol):
    def next_window(self, now: int, pool_valid_until: int | None, trip_end: int) -> tuple[int, int] | None:
        """Window to request, or None when the current pool suffices."""


class TripRefillPolicy:
    """Request one batch covering the declared trip when the pool would run out."""

    def __init__(self, horizon_s: int = 0) -> None:
        self.horizon_s = horizon_s

    def next_window(self, now: int, pool_valid_until: int | None, trip_end: int) -> tuple[int, int] | None:
        needed_until = trip_end + self.horizon_s
        if pool_valid_until is not None and pool_valid_until >= needed_until:
            return None
        start = now if pool_valid_until is None else max(now, pool_valid_until)
        return start, needed_until


def _attribute(exc: VpkiError, step: str) -> VpkiError:
    exc.step = exc.step or step
    return exc


class Vehicle:
    """A registered vehicle talking to one LTCA and one PCA.

    ``ltca`` and ``pca`` are in-process services or remote proxies.
    ``trust`` holds the root plus authority certificates used to check
    returned pseudonyms.
    """

    def __init__(
        self,
        vehicle_id: str,
        key: KeyPair,
        ltc: Certificate,
        ltca,
        pca,
        pca_id: str,
        trust: Sequence[Certificate],
        keygen_timed: bool = True,
        clock: Callable[[], float] = time.time,
        policy: RefillPolicy | None = None,
    ) -> None:
        self.vehicle_id = vehicle_id
        self.key = key
        self.ltc = ltc
        self.ltca = ltca
        self.pca = pca
        self.pca_id = pca_id
        self.trust = tuple(trust)
        self.keygen_timed = keygen_timed
        self.clock = clock
        self.policy = policy or TripRefillPolicy()
        self.pool: list[tuple[Certificate, KeyPair]] = []

    @classmethod
    def enroll(cls, vehicle_id: str, ltca, pca, pca_id: str, trust: Sequence[Certificate],
               **kwargs) -> "Vehicle":
        key = generate_keypair()
        ltc = ltca.register_vehicle(vehicle_id, key.public_key)
        return cls(vehicle_id, key, ltc, ltca, pca, pca_id, trust, **kwargs)

    def acquire(self, trip_start: int, trip_end: int, tau_p: int,
                ticket_step: Callable | None = None, pseudonym_step: Callable | None = None
                ) -> AcquisitionResult:
        """Obtain ``ceil((trip_end - trip_start) / tau_p)`` pseudonyms for a trip.

        ``ticket_step`` / ``pseudonym_step`` wrap the two exchanges and are
        used by the replay harness to inject per-leg delays.
        """
        if trip_start >= trip_end:
            raise InvalidRequest("trip_start must precede trip_end", step="request")
        if tau_p <= 0:
            raise InvalidRequest("tau_p must be positive", step="request")
        n = math.ceil((trip_end - trip_start) / tau_p)
        steps: dict[str, float] = {}

        keys: list[KeyPair] = []
        if not self.keygen_timed:
            keys = [generate_keypair() for _ in range(n)]

        t_sent = time.monotonic()
        if self.keygen_timed:
            keys = [generate_keypair() for _ in range(n)]
        csrs = [make_csr(k) for k in keys]
        t_keys = time.monotonic()
        steps["keygen_ms"] = (t_keys - t_sent) * 1000

        signed = SignedTicketRequest.create(
            TicketRequest(trip_start, trip_end - trip_start, self.pca_id), self.ltc, self.key,
            now=self.clock())
        issue_ticket = ticket_step(self.ltca.issue_ticket) if ticket_step else self.ltca.issue_ticket
        try:
            ticket = issue_ticket(signed)
        except VpkiError as exc:
            raise _attribute(exc, "ticket")
        t_ticket = time.monotonic()
        steps["ticket_ms"] = (t_ticket - t_keys) * 1000
        if ticket.tau_p != tau_p:
            raise InvalidRequest(f"LTCA issues {ticket.tau_p} s pseudonyms, not {tau_p} s", step="ticket")

        issue = pseudonym_step(self.pca.issue_pseudonyms) if pseudonym_step else self.pca.issue_pseudonyms
        try:
            certs = issue(PseudonymBatchRequest(ticket, csrs))
        except VpkiError as exc:
            raise _attribute(exc, "pseudonym")
        t_done = time.monotonic()
        steps["pseudonym_ms"] = (t_done - t_ticket) * 1000

        pseudonyms = self._check_batch(ticket, keys, certs)
        steps["verify_ms"] = (time.monotonic() - t_done) * 1000
        self.pool.extend(pseudonyms)
        return AcquisitionResult(pseudonyms, ticket, t_sent, t_done, steps)

    def _check_batch(self, ticket: Ticket, keys: list[KeyPair],
                     certs: list[Certificate]) -> list[tuple[Certificate, KeyPair]]:
        if len(certs) != len(keys):
            raise InvalidRequest(f"asked for {len(keys)} pseudonyms, got {len(certs)}", step="pseudonym")
        seen = set()
        for i, (cert, key) in enumerate(zip(certs, keys)):
            if cert.subject_public_key in seen:
                raise InvalidRequest("two pseudonyms certify the same key", step="pseudonym")
            seen.add(cert.subject_public_key)
            if cert.subject_public_key != key.public_key:
                raise InvalidRequest(f"pseudonym {i} certifies the wrong key", step="pseudonym")
            slot = ticket.window_start + i * ticket.tau_p
            if (cert.valid_from, cert.valid_until) != (slot, slot + ticket.tau_p):
                raise InvalidRequest(f"pseudonym {i} has the wrong validity slot", step="pseudonym")
            try:
                verify_chain(cert, self.trust, at=cert.valid_from)
            except VpkiError as exc:
                raise _attribute(exc, "pseudonym")
        return list(zip(certs, keys))

    def pool_valid_until(self) -> int | None:
        return max((c.valid_until for c, _ in self.pool), default=None)

    def refill(self, trip_end: int, tau_p: int) -> AcquisitionResult | None:
        """Apply the refill policy; acquire only if the pool falls short."""
        window = self.policy.next_window(int(self.clock()), self.pool_valid_until(), trip_end)
        if window is None:
            return None
        return self.acquire(window[0], window[1], tau_p)


# -- load generation ----------------------------------------------------------

class Arrival(str, enum.Enum):
    UNIFORM = "uniform"
    POISSON = "poisson"


@dataclass(frozen=True)
class LoadProfile:
    workers: int
    requests_per_worker_per_hour: float
    concurrent_streams_per_worker: int
    csrs_per_request: int
    duration_s: float
    arrival: Arrival = Arrival.UNIFORM

    def __post_init__(self) -> None:
        object.__setattr__(self, "arrival", Arrival(self.arrival))
        for name in ("workers", "requests_per_worker_per_hour", "concurrent_streams_per_worker",
                     "csrs_per_request", "duration_s"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")

    @property
    def total_rate(self) -> float:
        """Offered requests per second across all workers."""
        return self.workers * self.requests_per_worker_per_hour / 3600.0

    @property
    def streams(self) -> int:
        return self.workers * self.concurrent_streams_per_worker

    @property
    def expected_requests(self) -> float:
        return self.total_rate * self.duration_s


# 14 containers, 80,000 requests/hour each over 16 threads, 100 CSRs per request
REFERENCE_PROFILE = LoadProfile(14, 80_000, 16, 100, 3600.0)


@dataclass(frozen=True)
class LoadRecord:
    seq: int
    t_start_unix_ms: float
    scheduled_s: float
    end_to_end_ms: float
    status: str
    step_times: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "t_start_unix_ms": round(self.t_start_unix_ms, 3),
            "end_to_end_ms": round(self.end_to_end_ms, 3),
            "step_times": {k: round(v, 3) for k, v in self.step_times.items()},
            "status": self.status,
        }


class RecordSink:
    """Append-only, thread-safe collection of records with an optional callback."""

    def __init__(self, on_record: Callable[[LoadRecord], None] | None = None) -> None:
        self._records: list[LoadRecord] = []
        self._lock = threading.Lock()
        self.on_record = on_record

    def append(self, record: LoadRecord) -> None:
        with self._lock:
            self._records.append(record)
            if self.on_record is not None:
                self.on_record(record)

    def records(self) -> list[LoadRecord]:
        with self._lock:
            return sorted(self._records, key=lambda r: r.seq)

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)


def schedule(profile: LoadProfile, seed: int | None = None) -> list[list[float]]:
    """Per-stream send offsets (seconds from start) for ``profile``."""
    rng = random.Random(seed)
    streams = profile.streams
    rate = profile.total_rate / streams
    out = []
    for j in range(streams):
        times = []
        if profile.arrival is Arrival.UNIFORM:
            # stagger streams evenly so the aggregate is also uniform
            # multiply rather than accumulate so float drift cannot add a send
            k = 0
            while (t := j / profile.total_rate + k / rate) < profile.duration_s:
                times.append(t)
                k += 1
        else:
            t = rng.expovariate(rate)
            while t < profile.duration_s:
                times.append(t)
                t += rng.expovariate(rate)
        out.append(times)
    return out


def run_load(
    profile: LoadProfile,
    target: Callable[[int], dict[str, float] | None],
    preflight: Callable[[], None] | None = None,
    sink: RecordSink | None = None,
    seed: int | None = None,
    clock: Callable[[], float] = time.monotonic,
    sleep: Callable[[float], None] = time.sleep,
) -> list[LoadRecord]:
    """Drive ``target`` at the profile's offered rate and return every record.

    ``target(seq)`` performs one request and may return per-step timings in
    ms. A stream that falls behind sends late rather than skipping, so the
    number of records always equals the number of scheduled sends.
    """
    if preflight is not None:
        try:
            preflight()
        except Exception as exc:
            raise TargetUnreachable(f"target failed preflight: {exc}") from exc
    sink = RecordSink() if sink is None else sink
    plans = schedule(profile, seed)
    # global sequence numbers ordered by scheduled send time
    order = sorted((t, j, k) for j, times in enumerate(plans) for k, t in enumerate(times))
    seqs = {(j, k): n for n, (_, j, k) in enumerate(order)}
    start = clock()
    wall0 = time.time()

    def stream(j: int) -> None:
        for k, offset in enumerate(plans[j]):
            delay = start + offset - clock()
            if delay > 0:
                sleep(delay)
            seq = seqs[(j, k)]
            t0 = clock()
            status, steps = "ok", {}
            try:
                steps = target(seq) or {}
            except VpkiError as exc:
                status = f"error:{exc.code}" + (f"@{exc.step}" if exc.step else "")
            except Exception as exc:
                status = f"error:{type(exc).__name__}"
            t1 = clock()
            sink.append(LoadRecord(seq, (wall0 + (t0 - start)) * 1000.0, offset,
                                   (t1 - t0) * 1000.0, status, dict(steps)))

    if len(plans) == 1:
        stream(0)
    else:
        threads = [threading.Thread(target=stream, args=(j,), daemon=True) for j in range(len(plans))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    return sink.records()


class AcquisitionTarget:
    """Load-generator target: each call acquires a batch for a pooled vehicle."""

    def __init__(self, vehicles: Sequence[Vehicle], csrs_per_request: int, tau_p: int,
                 clock: Callable[[], float] = time.time) -> None:
        if not vehicles:
            raise ConfigError("need at least one vehicle")
        self.vehicles = list(vehicles)
        self.csrs_per_request = csrs_per_request
        self.tau_p = tau_p
        self.clock = clock

    def __call__(self, seq: int) -> dict[str, float]:
        vehicle = self.vehicles[seq % len(self.vehicles)]
        start = (int(self.clock()) // self.tau_p) * self.tau_p
        result = vehicle.acquire(start, start + self.csrs_per_request * self.tau_p, self.tau_p)
        vehicle.pool.clear()
        return {**result.step_ms, "end_to_end_ms": result.end_to_end_ms}
