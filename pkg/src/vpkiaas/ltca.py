"""Long-Term Certification Authority.

Registers vehicles, issues their long-term certificates (LTCs) and hands
out single-use authorization tickets. Tickets carry nothing that identifies
the vehicle; the ticket-to-LTC link lives only in the server-side ledger,
which only an authenticated RA can query.
"""

from __future__ import annotations

import enum
import logging
import math
import secrets
import time
from dataclasses import dataclass, replace
from typing import Callable, Iterable

from . import tlv
from .authz import MAX_SKEW_S, RaAuth, check_ra
from .credentials import (
    Certificate,
    CertKind,
    KeyPair,
    PublicKey,
    new_serial,
    sign_certificate,
)
from .errors import (
    BadAuth,
    DecodeError,
    DuplicateRegistration,
    ExpiredLtc,
    InvalidRequest,
    MalformedValidity,
    NotFound,
    RevokedLtc,
    UnknownSerial,
    UnknownTicket,
    WindowTooLarge,
)
from .store import Namespace, Outcome, Store

logger = logging.getLogger(__name__)

TICKET_ID_BYTES = 16
DEFAULT_WINDOW_CAP_S = 24 * 3600


class VehicleStatus(enum.IntEnum):
    ACTIVE = 1
    REVOKED = 2


@dataclass(frozen=True)
class VehicleRecord:
    vehicle_id: str
    ltc_serial: int
    status: VehicleStatus
    generation: int = 0

    def encode(self) -> bytes:
        return tlv.encode_record({
            1: tlv.text(self.vehicle_id),
            2: self.ltc_serial.to_bytes(16, "big"),
            3: bytes([int(self.status)]),
            4: tlv.u64(self.generation),
        })

    @classmethod
    def decode(cls, data: bytes) -> "VehicleRecord":
        f = tlv.decode_record(data)
        return cls(tlv.read_text(f[1]), int.from_bytes(f[2], "big"),
                   VehicleStatus(f[3][0]), tlv.read_u64(f[4]))


@dataclass(frozen=True)
class Ticket:
    ticket_id: bytes
    target_pca_id: str
    window_start: int
    window_end: int
    max_pseudonyms: int
    signature: bytes = b""

    def __post_init__(self) -> None:
        if self.window_start >= self.window_end:
            raise MalformedValidity("ticket window is empty")
        if self.max_pseudonyms <= 0 or (self.window_end - self.window_start) % self.max_pseudonyms:
            raise MalformedValidity("ticket window is not a whole number of pseudonym lifetimes")

    @property
    def tau_p(self) -> int:
        return (self.window_end - self.window_start) // self.max_pseudonyms

    def _fields(self) -> dict[int, bytes]:
        return {
            1: self.ticket_id,
            2: tlv.text(self.target_pca_id),
            3: tlv.i64(self.window_start),
            4: tlv.i64(self.window_end),
            5: tlv.u64(self.max_pseudonyms),
        }

    def tbs_bytes(self) -> bytes:
        return tlv.encode_record(self._fields())

    def encode(self) -> bytes:
        return tlv.encode_record({**self._fields(), 15: self.signature})

    @classmethod
    def decode(cls, data: bytes) -> "Ticket":
        f = tlv.decode_record(data)
        try:
            return cls(
                ticket_id=tlv.require(f, 1, "ticket_id"),
                target_pca_id=tlv.read_text(tlv.require(f, 2, "target_pca_id")),
                window_start=tlv.read_i64(tlv.require(f, 3, "window_start")),
                window_end=tlv.read_i64(tlv.require(f, 4, "window_end")),
                max_pseudonyms=tlv.read_u64(tlv.require(f, 5, "max_pseudonyms")),
                signature=f.get(15, b""),
            )
        except MalformedValidity as exc:
            raise DecodeError(str(exc)) from exc


@dataclass(frozen=True)
class TicketRequest:
    start: int
    duration: int
    target_pca_id: str

    def encode(self) -> bytes:
        return tlv.encode_record({1: tlv.i64(self.start), 2: tlv.i64(self.duration),
                                  3: tlv.text(self.target_pca_id)})

    @classmethod
    def decode(cls, data: bytes) -> "TicketRequest":
        f = tlv.decode_record(data)
        return cls(tlv.read_i64(tlv.require(f, 1, "start")),
                   tlv.read_i64(tlv.require(f, 2, "duration")),
                   tlv.read_text(tlv.require(f, 3, "target_pca_id")))


@dataclass(frozen=True)
class SignedTicketRequest:
    """A ticket request signed with the vehicle's LTC private key."""

    request: TicketRequest
    ltc: Certificate
    signed_at: int
    signature: bytes

    @staticmethod
    def message(request: TicketRequest, ltc_serial: int, signed_at: int) -> bytes:
        return tlv.encode_record({1: b"vpkiaas/ticket-req/v1", 2: request.encode(),
                                  3: ltc_serial.to_bytes(16, "big"), 4: tlv.i64(signed_at)})

    @classmethod
    def create(cls, request: TicketRequest, ltc: Certificate, ltc_key: KeyPair,
               now: float | None = None) -> "SignedTicketRequest":
        signed_at = int(time.time() if now is None else now)
        return cls(request, ltc, signed_at, ltc_key.sign(cls.message(request, ltc.serial, signed_at)))

    def encode(self) -> bytes:
        return tlv.encode_record({1: self.request.encode(), 2: self.ltc.encode(),
                                  3: tlv.i64(self.signed_at), 4: self.signature})

    @classmethod
    def decode(cls, data: bytes) -> "SignedTicketRequest":
        f = tlv.decode_record(data)
        return cls(TicketRequest.decode(tlv.require(f, 1, "request")),
                   Certificate.decode(tlv.require(f, 2, "ltc")),
                   tlv.read_i64(tlv.require(f, 3, "signed_at")),
                   tlv.require(f, 4, "signature"))


def align_window(start: int, duration: int, tau_p: int) -> tuple[int, int]:
    """Round ``[start, start + duration)`` outward to epoch-anchored ``tau_p`` boundaries."""
    t_s = (start // tau_p) * tau_p
    t_e = -((-(start + duration)) // tau_p) * tau_p
    return t_s, t_e


def _hex(value: int | bytes) -> str:
    return value.hex() if isinstance(value, bytes) else f"{value:032x}"


class Ltca:
    def __init__(
        self,
        key: KeyPair,
        cert: Certificate,
        store: Store,
        anchors: Iterable[Certificate],
        tau_p: int = 300,
        window_cap_s: int = DEFAULT_WINDOW_CAP_S,
        ra_ids: Iterable[str] = ("ra",),
        clock: Callable[[], float] = time.time,
    ) -> None:
        if tau_p <= 0:
            raise ValueError("tau_p must be positive")
        self.key = key
        self.cert = cert
        self.authority_id = cert.subject_id
        self.store = store
        self.anchors = tuple(anchors)
        self.tau_p = tau_p
        self.window_cap_s = window_cap_s
        self.ra_ids = frozenset(ra_ids)
        self.clock = clock

    # -- registration -------------------------------------------------

    def _vehicle(self, vehicle_id: str) -> VehicleRecord | None:
        try:
            return VehicleRecord.decode(self.store.get(Namespace.VEHICLES, f"v/{vehicle_id}"))
        except NotFound:
            return None

    def _record_by_serial(self, ltc_serial: int) -> VehicleRecord:
        try:
            vehicle_id = tlv.read_text(self.store.get(Namespace.VEHICLES, f"s/{_hex(ltc_serial)}"))
        except NotFound:
            raise UnknownSerial(f"no LTC with serial {_hex(ltc_serial)}") from None
        record = self._vehicle(vehicle_id)
        if record is None or record.ltc_serial != ltc_serial:
            # superseded LTC; only the latest registration is tracked as a record
            return VehicleRecord(vehicle_id, ltc_serial, VehicleStatus.REVOKED)
        return record

    def register_vehicle(
        self,
        vehicle_id: str,
        public_key: PublicKey,
        valid_from: int | None = None,
        valid_until: int | None = None,
    ) -> Certificate:
        if not vehicle_id:
            raise InvalidRequest("vehicle_id must be non-empty")
        now = int(self.clock())
        valid_from = now if valid_from is None else valid_from
        valid_until = valid_from + 365 * 24 * 3600 if valid_until is None else valid_until
        if valid_from >= valid_until:
            raise MalformedValidity("empty LTC validity window")

        current = self._vehicle(vehicle_id)
        if current is not None and current.status is VehicleStatus.ACTIVE:
            raise DuplicateRegistration(f"{vehicle_id!r} already holds an active LTC")
        generation = 0 if current is None else current.generation + 1
        # claim the generation slot so concurrent replicas cannot both register
        if self.store.consume_once(f"g/{vehicle_id}/{generation}", Namespace.VEHICLES) is not Outcome.WON:
            raise DuplicateRegistration(f"concurrent registration of {vehicle_id!r}")

        ltc = sign_certificate(self.key, Certificate(
            serial=new_serial(),
            kind=CertKind.LTC,
            subject_public_key=public_key,
            valid_from=valid_from,
            valid_until=valid_until,
            issuer_id=self.authority_id,
            subject_id=vehicle_id,
        ))
        self.store.put(Namespace.VEHICLES, f"s/{_hex(ltc.serial)}", tlv.text(vehicle_id))
        record = VehicleRecord(vehicle_id, ltc.serial, VehicleStatus.ACTIVE, generation)
        self.store.put(Namespace.VEHICLES, f"v/{vehicle_id}", record.encode())
        logger.debug("registered %s with LTC %s", vehicle_id, _hex(ltc.serial))
        return ltc

    def vehicle_status(self, vehicle_id: str) -> VehicleRecord | None:
        return self._vehicle(vehicle_id)

    # -- tickets --------------------------------------------------------

    def _authenticate(self, signed: SignedTicketRequest, now: float) -> VehicleRecord:
        ltc = signed.ltc
        if ltc.kind is not CertKind.LTC or ltc.issuer_id != self.authority_id:
            raise BadAuth("credential is not an LTC issued by this LTCA")
        if not ltc.verify_signature(self.key.public_key):
            raise BadAuth("LTC signature does not verify")
        message = SignedTicketRequest.message(signed.request, ltc.serial, signed.signed_at)
        if not ltc.subject_public_key.verify(signed.signature, message):
            raise BadAuth("request signature does not verify under the LTC key")
        if abs(now - signed.signed_at) > MAX_SKEW_S:
            raise BadAuth("stale ticket request")
        try:
            record = self._record_by_serial(ltc.serial)
        except UnknownSerial:
            raise BadAuth("LTC is not registered") from None
        if record.status is VehicleStatus.REVOKED:
            raise RevokedLtc(f"LTC {_hex(ltc.serial)} is revoked")
        if not ltc.contains(now):
            raise ExpiredLtc(f"LTC {_hex(ltc.serial)} outside its validity window")
        return record

    def issue_ticket(self, signed: SignedTicketRequest) -> Ticket:
        now = self.clock()
        record = self._authenticate(signed, now)
        req = signed.request
        if req.duration <= 0:
            raise InvalidRequest("duration must be positive")
        if not req.target_pca_id:
            raise InvalidRequest("target PCA must be named")
        t_s, t_e = align_window(req.start, req.duration, self.tau_p)
        if t_e - t_s > self.window_cap_s:
            raise WindowTooLarge(f"window of {t_e - t_s} s exceeds cap of {self.window_cap_s} s")

        ticket = Ticket(
            ticket_id=secrets.token_bytes(TICKET_ID_BYTES),
            target_pca_id=req.target_pca_id,
            window_start=t_s,
            window_end=t_e,
            max_pseudonyms=(t_e - t_s) // self.tau_p,
        )
        ticket = replace(ticket, signature=self.key.sign(ticket.tbs_bytes()))
        # ledger entry must be durable before the ticket leaves this service
        serial = record.ltc_serial.to_bytes(16, "big")
        self.store.put(Namespace.TICKETS_LEDGER, f"t/{ticket.ticket_id.hex()}", serial)
        self.store.put(Namespace.TICKETS_LEDGER,
                       f"l/{_hex(record.ltc_serial)}/{ticket.ticket_id.hex()}", b"")
        return ticket

    # -- RA-facing ------------------------------------------------------

    def resolve_ticket(self, ticket_id: bytes, ra_auth: RaAuth | None) -> int:
        check_ra(ra_auth, "resolve_ticket", ticket_id, self.anchors, self.ra_ids, self.clock())
        try:
            return int.from_bytes(
                self.store.get(Namespace.TICKETS_LEDGER, f"t/{ticket_id.hex()}"), "big")
        except NotFound:
            raise UnknownTicket(f"no ticket {ticket_id.hex()}") from None

    def list_tickets(self, ltc_serial: int, ra_auth: RaAuth | None) -> list[bytes]:
        check_ra(ra_auth, "list_tickets", ltc_serial.to_bytes(16, "big"),
                 self.anchors, self.ra_ids, self.clock())
        self._record_by_serial(ltc_serial)
        prefix = f"l/{_hex(ltc_serial)}/"
        return [bytes.fromhex(k[len(prefix):])
                for k, _ in self.store.scan_prefix(Namespace.TICKETS_LEDGER, prefix)]

    def revoke_ltc(self, ltc_serial: int, ra_auth: RaAuth | None) -> None:
        check_ra(ra_auth, "revoke_ltc", ltc_serial.to_bytes(16, "big"),
                 self.anchors, self.ra_ids, self.clock())
        record = self._record_by_serial(ltc_serial)
        if record.status is VehicleStatus.REVOKED:
            return
        self.store.put(Namespace.VEHICLES, f"v/{record.vehicle_id}",
                       replace(record, status=VehicleStatus.REVOKED).encode())
        logger.info("revoked LTC %s of %s", _hex(ltc_serial), record.vehicle_id)
