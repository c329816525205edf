"""Pod factories and health probes for LTCA and PCA replicas."""

from __future__ import annotations

import logging
import os
import signal
import subprocess
import sys
import time
from typing import Any, Callable, Sequence

from .client import Vehicle
from .credentials import Certificate, generate_keypair, make_csr, verify_chain
from .domain import Domain
from .errors import SpawnFailed, VpkiError
from .gateway import Channel
from .ltca import Ltca, SignedTicketRequest, TicketRequest
from .orchestrator import DeploymentConfig, Fault, Pod, PodStatus, ServiceKind
from .pca import Pca, PseudonymBatchRequest
from .remote import RemoteLtca, RemotePca

logger = logging.getLogger(__name__)

PROBE_PCA_TARGET = "probe"


class PcaProbe:
    """One-CSR batch against a reserved ticket that PCAs never mark consumed."""

    def __init__(self, ltca: Ltca, pca_id: str, trust: Sequence[Certificate]) -> None:
        vehicle = Vehicle.enroll(f"probe/{pca_id}/{os.urandom(4).hex()}", ltca, None, pca_id, trust)
        now = int(ltca.clock())
        span = ltca.window_cap_s - ltca.tau_p
        self.ticket = ltca.issue_ticket(SignedTicketRequest.create(
            TicketRequest(now, max(span, 1), pca_id), vehicle.ltc, vehicle.key, now=now))
        self.csr = make_csr(generate_keypair())
        self.trust = tuple(trust)

    def __call__(self, service: Any) -> None:
        certs = service.issue_pseudonyms(PseudonymBatchRequest(self.ticket, [self.csr]))
        if len(certs) != 1:
            raise VpkiError("probe batch returned the wrong number of pseudonyms")
        verify_chain(certs[0], self.trust, at=certs[0].valid_from)


class LtcaProbe:
    """A real ticket request from a dedicated probe vehicle."""

    def __init__(self, ltca: Ltca, trust: Sequence[Certificate]) -> None:
        self.vehicle = Vehicle.enroll(f"probe/ltca/{os.urandom(4).hex()}", ltca, None,
                                      PROBE_PCA_TARGET, trust)
        self.ltca_cert = ltca.cert
        self.tau_p = ltca.tau_p

    def __call__(self, service: Any) -> None:
        now = int(time.time())
        ticket = service.issue_ticket(SignedTicketRequest.create(
            TicketRequest(now, self.tau_p, PROBE_PCA_TARGET), self.vehicle.ltc, self.vehicle.key, now=now))
        if not self.ltca_cert.subject_public_key.verify(ticket.signature, ticket.tbs_bytes()):
            raise VpkiError("probe ticket signature invalid")


def inprocess_pca_factory(domain: Domain, cfg: DeploymentConfig, pca_id: str = "pca-1",
                          probe: PcaProbe | None = None, **pca_kwargs) -> Callable[[str], Pod]:
    probe = probe or PcaProbe(domain.ltca, pca_id, domain.material.chain)

    def factory(pod_id: str) -> Pod:
        replica = domain.pca_replica(pca_id, probe_ticket_ids={probe.ticket.ticket_id}, **pca_kwargs)
        return Pod(pod_id, ServiceKind.PCA, replica, probe, cfg.pod_concurrency,
                   cfg.service_time_s, cfg.load_window_s)

    factory.probe = probe  # type: ignore[attr-defined]
    return factory


def inprocess_ltca_factory(domain: Domain, cfg: DeploymentConfig,
                           probe: LtcaProbe | None = None) -> Callable[[str], Pod]:
    probe = probe or LtcaProbe(domain.ltca, domain.material.chain)
    base = domain.ltca

    def factory(pod_id: str) -> Pod:
        replica = Ltca(base.key, base.cert, base.store, base.anchors, tau_p=base.tau_p,
                       window_cap_s=base.window_cap_s, ra_ids=base.ra_ids, clock=base.clock)
        return Pod(pod_id, ServiceKind.LTCA, replica, probe, cfg.pod_concurrency,
                   cfg.service_time_s, cfg.load_window_s)

    factory.probe = probe  # type: ignore[attr-defined]
    return factory


class SubprocessPod(Pod):
    """A PCA replica in a child process, reached through the gateway protocol.

    ``drop_all`` freezes the child with SIGSTOP; ``crash`` kills it.
    """

    def __init__(self, pod_id: str, argv: list[str], probe: Callable[[Any], None],
                 cfg: DeploymentConfig, kind: ServiceKind = ServiceKind.PCA,
                 start_timeout_s: float = 20.0) -> None:
        super().__init__(pod_id, kind, None, probe, cfg.pod_concurrency,
                         cfg.service_time_s, cfg.load_window_s)
        self.argv = argv
        self.start_timeout_s = start_timeout_s
        self.proc: subprocess.Popen | None = None
        self.channel: Channel | None = None

    def start(self) -> None:
        self.proc = subprocess.Popen(self.argv, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL,
                                     text=True)
        deadline = time.monotonic() + self.start_timeout_s
        line = ""
        while time.monotonic() < deadline:
            line = self.proc.stdout.readline()
            if not line:
                break
            if line.startswith("LISTENING "):
                _, host, port = line.split()
                self.channel = Channel((host, int(port)))
                remote = RemotePca if self.kind is ServiceKind.PCA else RemoteLtca
                self.service = remote(self.channel)
                return
        self.proc.kill()
        raise SpawnFailed(f"pod {self.pod_id} did not come up (last line: {line!r})")

    def _invoke(self, fn: Callable[[Any], Any], deadline: float) -> Any:
        self.service.deadline = deadline
        return fn(self.service)

    def inject(self, fault: Fault | str, delay_s: float = 0.0) -> None:
        fault = Fault(fault)
        if self.proc is not None and self.proc.poll() is None:
            if fault is Fault.DROP_ALL:
                self.proc.send_signal(signal.SIGSTOP)
                self.fault_delay_s = delay_s
                logger.info("pod %s: stopped child %d", self.pod_id, self.proc.pid)
                return
            if fault is Fault.CRASH:
                self.proc.kill()
                self.proc.wait()
                logger.info("pod %s: killed child", self.pod_id)
                return
        super().inject(fault, delay_s)

    def stop(self) -> None:
        if self.channel is not None:
            self.channel.close()
        if self.proc is not None and self.proc.poll() is None:
            self.proc.send_signal(signal.SIGCONT)
            self.proc.terminate()
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()


def subprocess_pca_factory(material_dir: str, store_address: str, cfg: DeploymentConfig,
                           probe: PcaProbe, pca_id: str = "pca-1", mode: str = "strict"
                           ) -> Callable[[str], Pod]:
    def factory(pod_id: str) -> Pod:
        argv = [sys.executable, "-m", "vpkiaas", "serve", "pca",
                "--material", material_dir, "--pca-id", pca_id, "--store", store_address,
                "--listen", "127.0.0.1:0", "--insecure", "--mode", mode,
                "--probe-ticket", probe.ticket.ticket_id.hex()]
        return SubprocessPod(pod_id, argv, probe, cfg)

    factory.probe = probe  # type: ignore[attr-defined]
    return factory
