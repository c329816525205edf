"""Replica orchestration: pods, health probes and the scaling control loop.

A desk-scale stand-in for a container orchestrator. Each ``Pod`` wraps one
service replica (in-process, or a child process reached over the wire),
publishes a load metric (busy-time fraction of its request slots) and a
health metric (a real dummy request: a ticket for LTCA pods, a one-CSR
pseudonym batch against a reserved probe ticket for PCA pods).

``controller_step`` is the pure decision function; ``Deployment`` samples
metrics, calls it, applies the actions and logs scaling events as NDJSON.
"""

from __future__ import annotations

import collections
import enum
import itertools
import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import yaml

from .errors import ConfigError, NoReadyPods, PodUnavailable, SpawnFailed, Timeout

logger = logging.getLogger(__name__)


class ServiceKind(str, enum.Enum):
    LTCA = "LTCA"
    PCA = "PCA"


@dataclass(frozen=True)
class DeploymentConfig:
    service_kind: ServiceKind = ServiceKind.PCA
    min_replicas: int = 1
    max_replicas: int = 6
    scale_out_threshold: float = 0.7
    scale_in_threshold: float = 0.3
    cooldown_s: float = 30.0
    probe_interval_s: float = 5.0
    probe_failure_threshold: int = 3
    probe_deadline_s: float = 1.0
    load_window_s: float = 5.0
    pod_concurrency: int = 1
    service_time_s: float = 0.0
    spawn_timeout_s: float = 10.0
    runtime: str = "inprocess"

    def __post_init__(self) -> None:
        object.__setattr__(self, "service_kind", ServiceKind(self.service_kind))
        if self.min_replicas < 1:
            raise ConfigError("min_replicas must be >= 1")
        if self.max_replicas < self.min_replicas:
            raise ConfigError("max_replicas must be >= min_replicas")
        if not 0 < self.scale_out_threshold <= 1:
            raise ConfigError("scale_out_threshold must be in (0, 1]")
        if not 0 <= self.scale_in_threshold < self.scale_out_threshold:
            raise ConfigError("scale_in_threshold must be in [0, scale_out_threshold)")
        if self.probe_failure_threshold < 1:
            raise ConfigError("probe_failure_threshold must be >= 1")
        for name in ("cooldown_s", "probe_interval_s", "probe_deadline_s", "load_window_s"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.pod_concurrency < 1:
            raise ConfigError("pod_concurrency must be >= 1")
        if self.runtime not in ("inprocess", "subprocess"):
            raise ConfigError("runtime must be 'inprocess' or 'subprocess'")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "DeploymentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown deployment settings: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DeploymentConfig":
        """Read a YAML (or JSON) deployment file."""
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError("deployment file must hold a mapping")
        return cls.from_mapping(data)


class PodStatus(str, enum.Enum):
    STARTING = "Starting"
    READY = "Ready"
    UNHEALTHY = "Unhealthy"
    TERMINATED = "Terminated"


@dataclass(frozen=True)
class PodState:
    pod_id: str
    service_kind: ServiceKind
    status: PodStatus
    last_load: float = 0.0
    consecutive_probe_failures: int = 0


@dataclass(frozen=True)
class MetricsSnapshot:
    timestamp: float
    loads: Mapping[str, float]
    health: Mapping[str, bool]


@dataclass(frozen=True)
class ControllerState:
    pods: tuple[PodState, ...]
    last_scale_at: float | None = None

    def live(self) -> list[PodState]:
        return [p for p in self.pods if p.status is not PodStatus.TERMINATED]


@dataclass(frozen=True)
class SpawnPod:
    kind: ServiceKind


@dataclass(frozen=True)
class KillPod:
    pod_id: str


@dataclass(frozen=True)
class ReplacePod:
    pod_id: str


ScalingAction = SpawnPod | KillPod | ReplacePod


def controller_step(
    cfg: DeploymentConfig,
    snapshot: MetricsSnapshot,
    state: ControllerState,
    now: float,
) -> list[ScalingAction]:
    """Decide this step's actions. Pure: identical inputs give identical output.

    Rules, in order: replace every pod at the probe-failure threshold; top up
    to ``min_replicas``; otherwise at most one scale-out or scale-in, gated by
    the cooldown, based on mean load over Ready pods.
    """
    known = {p.pod_id for p in state.pods}
    stray = (set(snapshot.loads) | set(snapshot.health)) - known
    if stray:
        raise ValueError(f"snapshot mentions unknown pods: {sorted(stray)}")

    live = state.live()
    actions: list[ScalingAction] = []
    failing = sorted(p.pod_id for p in live
                     if p.consecutive_probe_failures >= cfg.probe_failure_threshold)
    actions.extend(ReplacePod(pid) for pid in failing)

    if len(live) < cfg.min_replicas:
        actions.append(SpawnPod(cfg.service_kind))
        return actions

    ready = [p for p in live if p.status is PodStatus.READY and p.pod_id not in failing]
    if not ready:
        return actions
    loads = {p.pod_id: snapshot.loads.get(p.pod_id, p.last_load) for p in ready}
    mean = sum(loads.values()) / len(loads)
    cooled = state.last_scale_at is None or now - state.last_scale_at >= cfg.cooldown_s
    if not cooled:
        return actions

    if mean > cfg.scale_out_threshold and len(live) < cfg.max_replicas:
        actions.append(SpawnPod(cfg.service_kind))
    elif mean < cfg.scale_in_threshold and len(live) > cfg.min_replicas:
        victim = min(ready, key=lambda p: (loads[p.pod_id], p.pod_id))
        actions.append(KillPod(victim.pod_id))
    return actions


# -- pods -------------------------------------------------------------------------

class Fault(str, enum.Enum):
    NONE = "none"
    DROP_ALL = "drop_all"
    DELAY = "delay"
    CRASH = "crash"


class Health(str, enum.Enum):
    HEALTHY = "Healthy"
    FAULTY = "Faulty"


class Pod:
    """One service replica with bounded request slots and fault injection.

    ``call(fn, deadline)`` runs ``fn(service)`` in one of ``concurrency``
    slots. ``service_time_s`` pads each request to a minimum duration,
    emulating a fixed per-replica capacity independent of host CPU count.
    """

    def __init__(
        self,
        pod_id: str,
        kind: ServiceKind,
        service: Any,
        probe: Callable[[Any], None],
        concurrency: int = 1,
        service_time_s: float = 0.0,
        load_window_s: float = 5.0,
        clock: Callable[[], float] = time.monotonic,
    ) -> None:
        self.pod_id = pod_id
        self.kind = kind
        self.service = service
        self._probe = probe
        self.concurrency = concurrency
        self.service_time_s = service_time_s
        self.load_window_s = load_window_s
        self.clock = clock
        self.status = PodStatus.STARTING
        self.created_at = clock()
        self.fault = Fault.NONE
        self.fault_delay_s = 0.0
        self.requests_served = 0
        self._slots = threading.BoundedSemaphore(concurrency)
        self._lock = threading.Lock()
        self._idle = threading.Condition(self._lock)
        self._inflight: dict[int, float] = {}
        self._done: collections.deque[tuple[float, float]] = collections.deque()
        self._tokens = itertools.count()
        self._released = threading.Event()

    # lifecycle hooks for subclasses
    def start(self) -> None:
        pass

    def stop(self) -> None:
        pass

    def inject(self, fault: Fault | str, delay_s: float = 0.0) -> None:
        self.fault = Fault(fault)
        self.fault_delay_s = delay_s
        logger.info("pod %s: injected fault %s", self.pod_id, self.fault.value)

    @property
    def accepting(self) -> bool:
        return self.status in (PodStatus.STARTING, PodStatus.READY, PodStatus.UNHEALTHY)

    def _fault_gate(self, deadline: float) -> None:
        if self.fault is Fault.CRASH:
            raise PodUnavailable(f"pod {self.pod_id} has crashed")
        if self.fault is Fault.DROP_ALL:
            # the request vanishes; the caller only learns via its deadline
            self._released.wait(deadline)
            raise Timeout(f"pod {self.pod_id} did not answer within {deadline:.3f}s")
        if self.fault is Fault.DELAY and self.fault_delay_s > 0:
            time.sleep(self.fault_delay_s)

    def call(self, fn: Callable[[Any], Any], deadline: float = 30.0) -> Any:
        if not self.accepting:
            raise PodUnavailable(f"pod {self.pod_id} is {self.status.value}")
        t_enter = time.monotonic()
        if not self._slots.acquire(timeout=deadline):
            raise Timeout(f"pod {self.pod_id}: no free slot within {deadline:.3f}s")
        token = next(self._tokens)
        start = self.clock()
        with self._lock:
            self._inflight[token] = start
        try:
            self._fault_gate(max(0.0, deadline - (time.monotonic() - t_enter)))
            result = self._invoke(fn, max(1e-3, deadline - (time.monotonic() - t_enter)))
            pad = self.service_time_s - (self.clock() - start)
            if pad > 0:
                time.sleep(pad)
            self.requests_served += 1
            return result
        finally:
            end = self.clock()
            with self._lock:
                self._inflight.pop(token, None)
                self._done.append((start, end))
                self._idle.notify_all()
            self._slots.release()

    def _invoke(self, fn: Callable[[Any], Any], deadline: float) -> Any:
        return fn(self.service)

    def probe(self, deadline: float) -> Health:
        """Run the dummy request outside the request slots, bounded by ``deadline``."""
        if not self.accepting:
            return Health.FAULTY
        outcome: list[Health] = []

        def run() -> None:
            try:
                self._fault_gate(deadline)
                self._invoke(self._probe, deadline)
                outcome.append(Health.HEALTHY)
            except Exception as exc:
                logger.debug("pod %s probe failed: %s", self.pod_id, exc)
                outcome.append(Health.FAULTY)

        t = threading.Thread(target=run, daemon=True, name=f"probe-{self.pod_id}")
        t.start()
        t.join(deadline)
        return outcome[0] if outcome else Health.FAULTY

    def sample_load(self, now: float | None = None) -> float:
        """Busy fraction of all slots over the trailing load window."""
        now = self.clock() if now is None else now
        window = min(self.load_window_s, max(now - self.created_at, 1e-6))
        lo = now - window
        with self._lock:
            while self._done and self._done[0][1] <= lo:
                self._done.popleft()
            busy = sum(max(0.0, min(e, now) - max(s, lo)) for s, e in self._done)
            busy += sum(max(0.0, now - max(s, lo)) for s in self._inflight.values())
        return min(1.0, busy / (window * self.concurrency))

    def inflight(self) -> int:
        with self._lock:
            return len(self._inflight)

    def terminate(self, drain_timeout: float = 30.0) -> None:
        """Stop routing, let in-flight requests finish, then release resources."""
        self.status = PodStatus.TERMINATED
        self._released.set()
        with self._idle:
            self._idle.wait_for(lambda: not self._inflight, timeout=drain_timeout)
        self.stop()


def probe_health(pod: Pod, deadline: float = 1.0) -> Health:
    return pod.probe(deadline)


# -- deployment -------------------------------------------------------------------

PodFactory = Callable[[str], Pod]


@dataclass(frozen=True)
class ScalingEvent:
    timestamp: float
    service: str
    action: str
    replica_count: int
    pod_id: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class Deployment:
    """Owns the pods of one service and runs the control loop over them."""

    def __init__(
        self,
        cfg: DeploymentConfig,
        factory: PodFactory,
        event_log: str | os.PathLike | None = None,
        clock: Callable[[], float] = time.monotonic,
        wall_clock: Callable[[], float] = time.time,
    ) -> None:
        self.cfg = cfg
        self.factory = factory
        self.clock = clock
        self.wall_clock = wall_clock
        self.pods: dict[str, Pod] = {}
        self.failures: dict[str, int] = {}
        self.loads: dict[str, float] = {}
        self.last_scale_at: float | None = None
        self.events: list[ScalingEvent] = []
        self.spawn_errors: list[str] = []
        self._event_path = Path(event_log) if event_log else None
        self._ids = itertools.count(1)
        self._rr = itertools.count()
        self._lock = threading.RLock()
        self._stop = threading.Event()
        self._loop: threading.Thread | None = None
        self._background: list[threading.Thread] = []

    # -- routing --------------------------------------------------------

    def ready_pods(self) -> list[Pod]:
        with self._lock:
            return [p for p in self.pods.values() if p.status is PodStatus.READY]

    def route(self) -> Pod:
        ready = self.ready_pods()
        if not ready:
            raise NoReadyPods(f"no Ready {self.cfg.service_kind.value} pods")
        return ready[next(self._rr) % len(ready)]

    def call(self, fn: Callable[[Any], Any], deadline: float = 30.0) -> Any:
        return self.route().call(fn, deadline)

    def replica_count(self) -> int:
        with self._lock:
            return sum(1 for p in self.pods.values() if p.status is not PodStatus.TERMINATED)

    # -- metrics ----------------------------------------------------------

    def state(self) -> ControllerState:
        with self._lock:
            pods = tuple(
                PodState(p.pod_id, p.kind, p.status, self.loads.get(p.pod_id, 0.0),
                         self.failures.get(p.pod_id, 0))
                for p in self.pods.values()
            )
            return ControllerState(pods, self.last_scale_at)

    def snapshot(self) -> MetricsSnapshot:
        """Sample load on Ready pods and probe every live pod, in parallel."""
        with self._lock:
            live = [p for p in self.pods.values() if p.status in (PodStatus.READY, PodStatus.UNHEALTHY)]
        now = self.clock()
        loads = {p.pod_id: p.sample_load() for p in live if p.status is PodStatus.READY}
        health: dict[str, bool] = {}

        def probe(p: Pod) -> None:
            health[p.pod_id] = p.probe(self.cfg.probe_deadline_s) is Health.HEALTHY

        threads = [threading.Thread(target=probe, args=(p,), daemon=True) for p in live]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return MetricsSnapshot(now, loads, health)

    def _absorb(self, snap: MetricsSnapshot) -> None:
        with self._lock:
            for pod_id, healthy in snap.health.items():
                pod = self.pods.get(pod_id)
                if pod is None or pod.status is PodStatus.TERMINATED:
                    continue
                if healthy:
                    self.failures[pod_id] = 0
                    if pod.status is PodStatus.UNHEALTHY:
                        pod.status = PodStatus.READY
                else:
                    self.failures[pod_id] = self.failures.get(pod_id, 0) + 1
                    pod.status = PodStatus.UNHEALTHY
            self.loads.update(snap.loads)

    # -- actions --------------------------------------------------------

    def _log(self, action: str, pod_id: str = "") -> None:
        event = ScalingEvent(self.wall_clock(), self.cfg.service_kind.value, action,
                             self.replica_count(), pod_id)
        self.events.append(event)
        if self._event_path is not None:
            with open(self._event_path, "a") as fh:
                fh.write(event.to_json() + "\n")

    def _spawn(self, wait: bool = False) -> Pod:
        pod_id = f"{self.cfg.service_kind.value.lower()}-{next(self._ids)}"
        try:
            pod = self.factory(pod_id)
            pod.start()
        except Exception as exc:
            self.spawn_errors.append(f"{pod_id}: {exc}")
            logger.error("spawn of %s failed: %s", pod_id, exc)
            raise SpawnFailed(str(exc)) from exc
        with self._lock:
            self.pods[pod_id] = pod
            self.failures[pod_id] = 0
        self._log("spawn", pod_id)

        def bring_up() -> None:
            deadline = time.monotonic() + self.cfg.spawn_timeout_s
            while time.monotonic() < deadline and pod.status is PodStatus.STARTING:
                if pod.probe(self.cfg.probe_deadline_s) is Health.HEALTHY:
                    with self._lock:
                        if pod.status is PodStatus.STARTING:
                            pod.status = PodStatus.READY
                    self._log("ready", pod_id)
                    return
                time.sleep(min(0.2, self.cfg.probe_interval_s))
            if pod.status is PodStatus.STARTING:
                self.spawn_errors.append(f"{pod_id}: never became Ready")
                self._kill(pod_id, reason="spawn_failed")

        if wait:
            bring_up()
        else:
            t = threading.Thread(target=bring_up, daemon=True, name=f"bringup-{pod_id}")
            self._background.append(t)
            t.start()
        return pod

    def _kill(self, pod_id: str, reason: str = "kill") -> None:
        with self._lock:
            pod = self.pods.get(pod_id)
            if pod is None or pod.status is PodStatus.TERMINATED:
                return
            pod.status = PodStatus.TERMINATED
        self._log(reason, pod_id)
        t = threading.Thread(target=pod.terminate, daemon=True, name=f"drain-{pod_id}")
        self._background.append(t)
        t.start()

    def apply_actions(self, actions: Iterable[ScalingAction]) -> ControllerState:
        for action in actions:
            try:
                if isinstance(action, SpawnPod):
                    self._spawn()
                    self.last_scale_at = self.clock()
                elif isinstance(action, KillPod):
                    self._kill(action.pod_id)
                    self.last_scale_at = self.clock()
                elif isinstance(action, ReplacePod):
                    self._kill(action.pod_id, reason="replace")
                    self._spawn()
            except SpawnFailed:
                # surfaced through spawn_errors and the next snapshot
                continue
        return self.state()

    def step(self) -> list[ScalingAction]:
        snap = self.snapshot()
        self._absorb(snap)
        actions = controller_step(self.cfg, snap, self.state(), self.clock())
        if actions:
            logger.debug("controller actions: %s", actions)
        self.apply_actions(actions)
        return actions

    # -- loop -----------------------------------------------------------

    def bootstrap(self, replicas: int | None = None) -> None:
        """Start ``replicas`` pods (default ``min_replicas``) and wait until Ready."""
        self._log("init")
        for _ in range(replicas or self.cfg.min_replicas):
            self._spawn(wait=True)

    def start(self) -> "Deployment":
        if not self.pods:
            self.bootstrap()
        self._stop.clear()
        self._loop = threading.Thread(target=self._run, daemon=True, name="controller")
        self._loop.start()
        return self

    def _run(self) -> None:
        while not self._stop.is_set():
            t0 = time.monotonic()
            try:
                self.step()
            except Exception:
                logger.exception("controller step failed")
            self._stop.wait(max(0.0, self.cfg.probe_interval_s - (time.monotonic() - t0)))

    def stop(self) -> None:
        self._stop.set()
        if self._loop is not None:
            self._loop.join()

    def shutdown(self) -> None:
        self.stop()
        with self._lock:
            pods = list(self.pods.values())
        for pod in pods:
            if pod.status is not PodStatus.TERMINATED:
                pod.terminate(drain_timeout=5.0)
            else:
                pod.stop()
        for t in self._background:
            t.join(timeout=5.0)

    def __enter__(self) -> "Deployment":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.shutdown()
