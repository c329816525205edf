"""Reusable experiment drivers: duplicate-ticket races, scaling ramps, self-healing.

These compose the services, the orchestrator and the load generator into
the end-to-end runs that the acceptance suite and the CLI report on.
"""

from __future__ import annotations

import logging
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .client import Vehicle
from .credentials import KeyPair, generate_keypair, make_csr
from .domain import Domain
from .errors import TicketAlreadyUsed, VpkiError
from .ltca import SignedTicketRequest, Ticket, TicketRequest
from .orchestrator import Deployment, DeploymentConfig, Fault, PodStatus, ServiceKind
from .pca import Pca, PseudonymBatchRequest
from .replicas import inprocess_pca_factory

logger = logging.getLogger(__name__)


def mint_tickets(domain: Domain, count: int, pseudonyms: int = 1, pca_id: str = "pca-1",
                 vehicles: int = 8) -> list[Ticket]:
    """Issue ``count`` tickets of ``pseudonyms`` slots each through the real LTCA path."""
    tau = domain.ltca.tau_p
    fleet = [Vehicle.enroll(f"fleet-{i}-{time.monotonic_ns()}", domain.ltca, None, pca_id,
                            domain.material.chain) for i in range(vehicles)]
    now = int(domain.ltca.clock())
    start = (now // tau) * tau + tau
    tickets = []
    for i in range(count):
        v = fleet[i % len(fleet)]
        tickets.append(domain.ltca.issue_ticket(SignedTicketRequest.create(
            TicketRequest(start, pseudonyms * tau, pca_id), v.ltc, v.key, now=now)))
    return tickets


# -- duplicate-ticket race ----------------------------------------------------------

@dataclass
class RaceResult:
    successes: list[int] = field(default_factory=list)  # per round
    rejected: list[int] = field(default_factory=list)
    other_errors: list[int] = field(default_factory=list)


def race_round(replicas: Sequence[Pca], ticket: Ticket, csr_batch: Sequence, contenders: int = 64
               ) -> tuple[int, int, int]:
    """Fire ``contenders`` identical submissions of one ticket at once.

    Submissions are spread round-robin over ``replicas`` and released
    together by a barrier. Returns (successes, TicketAlreadyUsed, other).
    """
    barrier = threading.Barrier(contenders)
    outcomes: list[str] = [""] * contenders

    def submit(i: int) -> None:
        pca = replicas[i % len(replicas)]
        req = PseudonymBatchRequest(ticket, csr_batch)
        barrier.wait()
        try:
            pca.issue_pseudonyms(req)
            outcomes[i] = "ok"
        except TicketAlreadyUsed:
            outcomes[i] = "used"
        except VpkiError as exc:
            outcomes[i] = exc.code

    threads = [threading.Thread(target=submit, args=(i,)) for i in range(contenders)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    ok = outcomes.count("ok")
    used = outcomes.count("used")
    return ok, used, contenders - ok - used


def run_race(mode: str, rounds: int = 100, contenders: int = 64, replicas: int = 2,
             async_delay_s: float = 0.05) -> RaceResult:
    domain = Domain.create(tau_p=600, mode=mode, async_delay_s=async_delay_s)
    pcas = [domain.pcas["pca-1"]] + [domain.pca_replica("pca-1", async_delay_s=async_delay_s)
                                     for _ in range(replicas - 1)]
    tickets = mint_tickets(domain, rounds)
    csr = [make_csr(generate_keypair())]
    result = RaceResult()
    try:
        for ticket in tickets:
            ok, used, other = race_round(pcas, ticket, csr, contenders)
            result.successes.append(ok)
            result.rejected.append(used)
            result.other_errors.append(other)
    finally:
        for p in pcas:
            p.close()
    return result


# -- per-pseudonym processing time --------------------------------------------------

def measure_issuance(total_pseudonyms: int = 10_000, batch_size: int = 100,
                     tau_p: int = 60) -> list[float]:
    """Server-side seconds per pseudonym for each batch (batch time / batch size)."""
    domain = Domain.create(tau_p=tau_p)
    pca = domain.pcas["pca-1"]
    batches = -(-total_pseudonyms // batch_size)
    tickets = mint_tickets(domain, batches, pseudonyms=batch_size)
    per = []
    for ticket in tickets:
        csrs = [make_csr(generate_keypair()) for _ in range(batch_size)]
        req = PseudonymBatchRequest(ticket, csrs)
        t0 = time.perf_counter()
        pca.issue_pseudonyms(req)
        per.append((time.perf_counter() - t0) / batch_size)
    return per


# -- open-loop driving of a deployment ------------------------------------------------

def triangle_rate(peak_rps: float, duration_s: float) -> Callable[[float], float]:
    """0 -> peak -> 0 linearly over ``duration_s``."""
    def rate(t: float) -> float:
        if t <= 0 or t >= duration_s:
            return 0.0
        half = duration_s / 2
        return peak_rps * (t / half if t <= half else (duration_s - t) / half)
    return rate


def send_times(rate: Callable[[float], float], duration_s: float, step_s: float = 0.001) -> list[float]:
    """Deterministic arrival times whose running count tracks the integral of ``rate``."""
    times, acc, t = [], 0.0, 0.0
    while t < duration_s:
        acc += rate(t) * step_s
        while acc >= 1.0:
            times.append(t)
            acc -= 1.0
        t += step_s
    return times


@dataclass
class DriveRecord:
    t_offset: float
    routed_to: str
    ok: bool
    error: str = ""
    latency_s: float = 0.0


def drive(deployment: Deployment, times: Sequence[float], make_request: Callable[[int], Callable],
          deadline_s: float = 5.0, max_workers: int = 256,
          on_tick: Callable[[float], None] | None = None) -> list[DriveRecord]:
    """Open-loop: request ``i`` is routed and sent at ``times[i]`` regardless of backlog."""
    records: list[DriveRecord | None] = [None] * len(times)
    t0 = time.monotonic()

    def one(i: int) -> None:
        started = time.monotonic()
        try:
            pod = deployment.route()
        except VpkiError as exc:
            records[i] = DriveRecord(times[i], "", False, exc.code)
            return
        try:
            pod.call(make_request(i), deadline_s)
            records[i] = DriveRecord(times[i], pod.pod_id, True, latency_s=time.monotonic() - started)
        except Exception as exc:
            code = exc.code if isinstance(exc, VpkiError) else type(exc).__name__
            records[i] = DriveRecord(times[i], pod.pod_id, False, code, time.monotonic() - started)

    with ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="drive") as pool:
        for i, t in enumerate(times):
            wait = t0 + t - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            if on_tick is not None:
                on_tick(t)
            pool.submit(one, i)
    return [r for r in records if r is not None]


@dataclass
class ScalingRun:
    replica_series: list[tuple[float, int]]
    events: list
    records: list[DriveRecord]
    peak_replicas: int
    final_replicas: int


def run_scaling_experiment(
    duration_s: float = 180.0,
    peak_rps: float = 110.0,
    settle_s: float = 60.0,
    cfg: DeploymentConfig | None = None,
    event_log: str | None = None,
) -> ScalingRun:
    """Ramp offered PCA load 0 -> peak -> 0 and record the replica staircase."""
    cfg = cfg or DeploymentConfig(
        service_kind=ServiceKind.PCA, min_replicas=1, max_replicas=6,
        scale_out_threshold=0.7, scale_in_threshold=0.3, cooldown_s=5.0,
        probe_interval_s=1.0, probe_failure_threshold=3, probe_deadline_s=1.0,
        load_window_s=3.0, pod_concurrency=1, service_time_s=0.05,
    )
    # hour-long slots keep every pre-minted ticket valid for the whole run
    domain = Domain.create(tau_p=3600)
    times = send_times(triangle_rate(peak_rps, duration_s), duration_s)
    tickets = mint_tickets(domain, len(times))
    csrs = [make_csr(generate_keypair()) for _ in range(min(len(times), 512))]

    def make_request(i: int) -> Callable:
        req = PseudonymBatchRequest(tickets[i], [csrs[i % len(csrs)]])
        return lambda svc: svc.issue_pseudonyms(req)

    deployment = Deployment(cfg, inprocess_pca_factory(domain, cfg), event_log=event_log)
    series: list[tuple[float, int]] = []
    t_start = time.monotonic()
    stop = threading.Event()

    def sampler() -> None:
        while not stop.is_set():
            series.append((time.monotonic() - t_start, deployment.replica_count()))
            stop.wait(0.25)

    deployment.start()
    t_start = time.monotonic()
    sampler_thread = threading.Thread(target=sampler, daemon=True)
    sampler_thread.start()
    try:
        records = drive(deployment, times, make_request)
        deadline = time.monotonic() + settle_s
        while time.monotonic() < deadline and deployment.replica_count() > cfg.min_replicas:
            time.sleep(0.25)
        time.sleep(0.5)
    finally:
        stop.set()
        sampler_thread.join()
        deployment.shutdown()
        domain.close()
    counts = [n for _, n in series]
    return ScalingRun(series, list(deployment.events), records, max(counts), counts[-1])


def is_unimodal(values: Sequence[int]) -> bool:
    """Non-decreasing up to the maximum, then non-increasing."""
    if not values:
        return True
    i, n = 0, len(values)
    while i + 1 < n and values[i + 1] >= values[i]:
        i += 1
    while i + 1 < n and values[i + 1] <= values[i]:
        i += 1
    return i == n - 1


def event_counts(events: Sequence) -> list[int]:
    """Replica count after each spawn/kill/replace event, in order."""
    return [e.replica_count for e in events if e.action in ("spawn", "kill", "replace", "spawn_failed")]


# -- self-healing -----------------------------------------------------------------------

@dataclass
class HealingRun:
    faulty_pod: str
    healthy_pod: str
    replaced_after_s: float | None
    replacement_pod: str | None
    healthy_requests: int
    healthy_failures: int
    faulty_requests: int
    records: list[DriveRecord]


def run_self_healing(rate_rps: float = 20.0, duration_s: float = 15.0, fault_at_s: float = 2.0,
                     cfg: DeploymentConfig | None = None) -> HealingRun:
    """Two PCA pods under steady load; one gets ``drop_all`` mid-run."""
    cfg = cfg or DeploymentConfig(
        service_kind=ServiceKind.PCA, min_replicas=2, max_replicas=2,
        scale_out_threshold=0.9, scale_in_threshold=0.05, cooldown_s=5.0,
        probe_interval_s=1.0, probe_failure_threshold=3, probe_deadline_s=0.5,
        load_window_s=3.0, pod_concurrency=4,
    )
    domain = Domain.create(tau_p=3600)
    times = [i / rate_rps for i in range(int(rate_rps * duration_s))]
    tickets = mint_tickets(domain, len(times))
    csrs = [make_csr(generate_keypair()) for _ in range(64)]

    def make_request(i: int) -> Callable:
        req = PseudonymBatchRequest(tickets[i], [csrs[i % len(csrs)]])
        return lambda svc: svc.issue_pseudonyms(req)

    deployment = Deployment(cfg, inprocess_pca_factory(domain, cfg))
    deployment.start()
    pods = sorted(deployment.pods)
    faulty, healthy = pods[0], pods[1]
    state = {"injected_at": None, "replaced_after": None, "replacement": None}

    def watch() -> None:
        while state["replaced_after"] is None:
            if state["injected_at"] is not None:
                with deployment._lock:
                    old = deployment.pods[faulty].status is PodStatus.TERMINATED
                    fresh = [p.pod_id for p in deployment.pods.values()
                             if p.pod_id not in pods and p.status is PodStatus.READY]
                if old and fresh:
                    state["replaced_after"] = time.monotonic() - state["injected_at"]
                    state["replacement"] = fresh[0]
                    return
            time.sleep(0.05)
            if stop.is_set():
                return

    def tick(t: float) -> None:
        if state["injected_at"] is None and t >= fault_at_s:
            deployment.pods[faulty].inject(Fault.DROP_ALL)
            state["injected_at"] = time.monotonic()

    stop = threading.Event()
    watcher = threading.Thread(target=watch, daemon=True)
    watcher.start()
    try:
        records = drive(deployment, times, make_request, deadline_s=2.0, on_tick=tick)
        watcher.join(timeout=15.0)
    finally:
        stop.set()
        deployment.shutdown()
        domain.close()

    to_healthy = [r for r in records if r.routed_to == healthy]
    return HealingRun(
        faulty, healthy, state["replaced_after"], state["replacement"],
        len(to_healthy), sum(not r.ok for r in to_healthy),
        sum(r.routed_to == faulty for r in records), records,
    )


def median_ms(values_s: Sequence[float]) -> float:
    return statistics.median(values_s) * 1000.0
