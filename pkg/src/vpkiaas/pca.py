"""Pseudonym Certification Authority.

Validates LTCA tickets, certifies a batch of CSRs as pseudonyms that tile
the ticket window slot by slot, and records ``serial -> ticket`` so that an
RA can later resolve and revoke. The PCA never sees a vehicle identity.

In ``strict`` mode a ticket is consumed with the store's atomic
consume-once primitive before any pseudonym leaves the service. In
``async`` mode the consumed marker and issuance records are written behind
the response, so replicas racing on one ticket can all succeed.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

from . import tlv
from .authz import RaAuth, check_ra
from .credentials import (
    Certificate,
    CertKind,
    Csr,
    KeyPair,
    new_serial,
    sign_certificate,
    verify_chain,
    verify_csr,
)
from .errors import (
    BadProofOfPossession,
    BadTicketSignature,
    InvalidRequest,
    NotFound,
    TicketAlreadyUsed,
    TicketExpired,
    TooManyCsrs,
    UnknownSerial,
    UnknownTicket,
    WrongPca,
)
from .ltca import Ticket
from .store import Namespace, Outcome, Store, WriteBehindStore

logger = logging.getLogger(__name__)

STRICT = "strict"
ASYNC = "async"
DEFAULT_ASYNC_DELAY_S = 0.05


@dataclass(frozen=True)
class PseudonymBatchRequest:
    ticket: Ticket
    csrs: Sequence[Csr]

    def __post_init__(self) -> None:
        object.__setattr__(self, "csrs", tuple(self.csrs))

    def encode(self) -> bytes:
        return tlv.encode_record({1: self.ticket.encode(),
                                  2: tlv.encode_list(c.encode() for c in self.csrs)})

    @classmethod
    def decode(cls, data: bytes) -> "PseudonymBatchRequest":
        f = tlv.decode_record(data)
        return cls(Ticket.decode(tlv.require(f, 1, "ticket")),
                   [Csr.decode(c) for c in tlv.decode_list(tlv.require(f, 2, "csrs"))])


@dataclass(frozen=True)
class IssuanceRecord:
    pseudonym_serial: int
    ticket_id: bytes
    issued_at: int

    def encode(self) -> bytes:
        return tlv.encode_record({1: self.ticket_id, 2: tlv.i64(self.issued_at)})

    @classmethod
    def decode(cls, serial: int, data: bytes) -> "IssuanceRecord":
        f = tlv.decode_record(data)
        return cls(serial, f[1], tlv.read_i64(f[2]))


@dataclass(frozen=True)
class Crl:
    issuer_id: str
    issued_at: int
    revoked_serials: tuple[int, ...]
    signature: bytes = b""

    def __post_init__(self) -> None:
        serials = tuple(self.revoked_serials)
        if list(serials) != sorted(set(serials)):
            raise ValueError("CRL serials must be sorted and duplicate-free")
        object.__setattr__(self, "revoked_serials", serials)

    def body_fields(self) -> dict[int, bytes]:
        return {
            1: tlv.text(self.issuer_id),
            2: tlv.i64(self.issued_at),
            3: tlv.encode_list(s.to_bytes(16, "big") for s in self.revoked_serials),
        }

    def tbs_bytes(self) -> bytes:
        return tlv.encode_record(self.body_fields())

    def encode(self) -> bytes:
        return tlv.encode_record({**self.body_fields(), 15: self.signature})

    @classmethod
    def decode(cls, data: bytes) -> "Crl":
        f = tlv.decode_record(data)
        return cls(tlv.read_text(f[1]), tlv.read_i64(f[2]),
                   tuple(int.from_bytes(s, "big") for s in tlv.decode_list(f[3])),
                   f.get(15, b""))

    def verify(self, issuer_cert: Certificate) -> bool:
        return issuer_cert.subject_public_key.verify(self.signature, self.tbs_bytes())


@dataclass
class IssuanceStats:
    """Server-side issuance timings, excluding transport."""

    batches: int = 0
    pseudonyms: int = 0
    per_pseudonym_s: list[float] = field(default_factory=list)


def _hex(serial: int) -> str:
    return f"{serial:032x}"


class Pca:
    def __init__(
        self,
        key: KeyPair,
        cert: Certificate,
        ltca_cert: Certificate,
        store: Store,
        anchors: Iterable[Certificate],
        mode: str = STRICT,
        async_delay_s: float = DEFAULT_ASYNC_DELAY_S,
        ra_ids: Iterable[str] = ("ra",),
        clock: Callable[[], float] = time.time,
        probe_ticket_ids: Iterable[bytes] = (),
    ) -> None:
        if mode not in (STRICT, ASYNC):
            raise ValueError(f"mode must be {STRICT!r} or {ASYNC!r}")
        self.anchors = tuple(anchors)
        verify_chain(ltca_cert, self.anchors, at=clock())
        self.key = key
        self.cert = cert
        self.pca_id = cert.subject_id
        self.ltca_cert = ltca_cert
        self.store = store
        self.mode = mode
        self.ra_ids = frozenset(ra_ids)
        self.clock = clock
        self.probe_ticket_ids = frozenset(probe_ticket_ids)
        self.stats = IssuanceStats()
        self._stats_lock = threading.Lock()
        self._writes = WriteBehindStore(store, async_delay_s) if mode == ASYNC else store

    def backlog(self) -> int:
        return self._writes.backlog() if isinstance(self._writes, WriteBehindStore) else 0

    def flush(self, timeout: float | None = None) -> bool:
        if isinstance(self._writes, WriteBehindStore):
            return self._writes.flush(timeout)
        return True

    def close(self) -> None:
        if isinstance(self._writes, WriteBehindStore):
            self._writes.close()

    # -- issuance -------------------------------------------------------

    def _validate(self, req: PseudonymBatchRequest, now: float) -> None:
        ticket = req.ticket
        if not self.ltca_cert.subject_public_key.verify(ticket.signature, ticket.tbs_bytes()):
            raise BadTicketSignature("ticket signature does not verify under the LTCA key")
        if ticket.target_pca_id != self.pca_id:
            raise WrongPca(f"ticket is for {ticket.target_pca_id!r}, not {self.pca_id!r}")
        if now >= ticket.window_end:
            raise TicketExpired("ticket window has ended")
        if not req.csrs:
            raise InvalidRequest("batch contains no CSRs")
        if len(req.csrs) > ticket.max_pseudonyms:
            raise TooManyCsrs(f"{len(req.csrs)} CSRs for a ticket of {ticket.max_pseudonyms}")
        seen = set()
        for i, csr in enumerate(req.csrs):
            if csr.subject_public_key in seen:
                raise InvalidRequest(f"CSR {i} repeats a public key")
            seen.add(csr.subject_public_key)
            try:
                verify_csr(csr)
            except BadProofOfPossession as exc:
                raise BadProofOfPossession(f"CSR {i}: {exc.message}", index=i) from None

    def _consume(self, ticket_id: bytes) -> None:
        key = ticket_id.hex()
        if ticket_id in self.probe_ticket_ids:
            return
        if self.mode == STRICT:
            if self.store.consume_once(key) is not Outcome.WON:
                raise TicketAlreadyUsed(f"ticket {key} already consumed")
            return
        # async: check-then-mark, with the mark written behind the response
        try:
            self._writes.get(Namespace.CONSUMED_TICKETS, key)
        except NotFound:
            return
        raise TicketAlreadyUsed(f"ticket {key} already consumed")

    def issue_pseudonyms(self, req: PseudonymBatchRequest) -> list[Certificate]:
        started = time.perf_counter()
        now = self.clock()
        self._validate(req, now)
        ticket = req.ticket
        self._consume(ticket.ticket_id)

        tau = ticket.tau_p
        issued = []
        for i, csr in enumerate(req.csrs):
            issued.append(sign_certificate(self.key, Certificate(
                serial=new_serial(),
                kind=CertKind.PSEUDONYM,
                subject_public_key=csr.subject_public_key,
                valid_from=ticket.window_start + i * tau,
                valid_until=ticket.window_start + (i + 1) * tau,
                issuer_id=self.pca_id,
            )))

        if ticket.ticket_id not in self.probe_ticket_ids:
            self._record(ticket.ticket_id, issued, int(now))

        elapsed = time.perf_counter() - started
        with self._stats_lock:
            self.stats.batches += 1
            self.stats.pseudonyms += len(issued)
            self.stats.per_pseudonym_s.append(elapsed / len(issued))
        return issued

    def _record(self, ticket_id: bytes, issued: list[Certificate], now: int) -> None:
        tid = ticket_id.hex()
        for cert in issued:
            record = IssuanceRecord(cert.serial, ticket_id, now)
            self._writes.put(Namespace.ISSUANCE_RECORDS, f"{self.pca_id}/s/{_hex(cert.serial)}",
                             record.encode())
            self._writes.put(Namespace.ISSUANCE_RECORDS, f"{self.pca_id}/t/{tid}/{_hex(cert.serial)}", b"")
        if self.mode == ASYNC:
            self._writes.put(Namespace.CONSUMED_TICKETS, tid, b"1")

    # -- RA-facing ------------------------------------------------------

    def lookup_ticket(self, pseudonym_serial: int, ra_auth: RaAuth | None) -> bytes:
        check_ra(ra_auth, "lookup_ticket", pseudonym_serial.to_bytes(16, "big"),
                 self.anchors, self.ra_ids, self.clock())
        try:
            data = self.store.get(Namespace.ISSUANCE_RECORDS, f"{self.pca_id}/s/{_hex(pseudonym_serial)}")
        except NotFound:
            raise UnknownSerial(f"no pseudonym {_hex(pseudonym_serial)}") from None
        return IssuanceRecord.decode(pseudonym_serial, data).ticket_id

    def revoke_by_ticket(self, ticket_id: bytes, ra_auth: RaAuth | None) -> list[int]:
        check_ra(ra_auth, "revoke_by_ticket", ticket_id, self.anchors, self.ra_ids, self.clock())
        prefix = f"{self.pca_id}/t/{ticket_id.hex()}/"
        rows = self.store.scan_prefix(Namespace.ISSUANCE_RECORDS, prefix)
        if not rows:
            raise UnknownTicket(f"no pseudonyms issued under ticket {ticket_id.hex()}")
        serials = sorted(int(k[len(prefix):], 16) for k, _ in rows)
        for serial in serials:
            self.store.put(Namespace.CRL, f"{self.pca_id}/{_hex(serial)}", b"")
        return serials

    def get_crl(self) -> Crl:
        prefix = f"{self.pca_id}/"
        serials = sorted(int(k[len(prefix):], 16)
                         for k, _ in self.store.scan_prefix(Namespace.CRL, prefix))
        crl = Crl(self.pca_id, int(self.clock()), tuple(serials))
        return replace(crl, signature=self.key.sign(crl.tbs_bytes()))

    def export_crl(self, path: str) -> Crl:
        crl = self.get_crl()
        with open(path, "wb") as fh:
            fh.write(crl.encode())
        return crl
