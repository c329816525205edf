"""Bindings between services and the wire protocol.

``*_handlers`` turn an in-process service into a handler table for
``GatewayServer``; ``Remote*`` proxies expose the same methods as the
services, so the RA and clients work unchanged against either.
"""

from __future__ import annotations

import time
from typing import Any

from .authz import RaAuth
from .credentials import Certificate, PublicKey
from .gateway import Channel, MessageType as M
from .ltca import Ltca, SignedTicketRequest, Ticket
from .pca import Crl, Pca, PseudonymBatchRequest
from .ra import Ra, ResolutionResult


def echo_handler(fields: dict[str, Any]) -> dict[str, Any]:
    if fields.get("sleep_ms"):
        time.sleep(fields["sleep_ms"] / 1000)
    return {"payload": fields["payload"]}


def _resolution_fields(r: ResolutionResult) -> dict[str, Any]:
    return {
        "pseudonym_serial": r.pseudonym_serial,
        "ticket_id": r.ticket_id,
        "ltc_serial": r.ltc_serial,
        "revoked_pseudonym_serials": list(r.revoked_pseudonym_serials),
        "revoked_ticket_ids": list(r.revoked_ticket_ids),
    }


def _resolution(f: dict[str, Any]) -> ResolutionResult:
    return ResolutionResult(
        f["pseudonym_serial"], f["ticket_id"], f["ltc_serial"],
        tuple(f["revoked_pseudonym_serials"] or ()), tuple(f["revoked_ticket_ids"] or ()),
    )


def ltca_handlers(ltca: Ltca) -> dict:
    return {
        M.ECHO_REQ: echo_handler,
        M.REGISTER_REQ: lambda f: {"ltc": ltca.register_vehicle(
            f["vehicle_id"], PublicKey.decode(f["public_key"]),
            f["valid_from"], f["valid_until"]).encode()},
        M.TICKET_REQ: lambda f: {"ticket": ltca.issue_ticket(
            SignedTicketRequest.decode(f["signed_request"])).encode()},
        M.RESOLVE_TICKET_REQ: lambda f: {"ltc_serial": ltca.resolve_ticket(
            f["ticket_id"], RaAuth.decode(f["ra_auth"]))},
        M.LIST_TICKETS_REQ: lambda f: {"ticket_ids": ltca.list_tickets(
            f["ltc_serial"], RaAuth.decode(f["ra_auth"]))},
        M.REVOKE_LTC_REQ: lambda f: ltca.revoke_ltc(f["ltc_serial"], RaAuth.decode(f["ra_auth"])) or {},
    }


def pca_handlers(pca: Pca) -> dict:
    return {
        M.ECHO_REQ: echo_handler,
        M.PSEUDONYM_REQ: lambda f: {"pseudonyms": [c.encode() for c in pca.issue_pseudonyms(
            PseudonymBatchRequest.decode(f["batch"]))]},
        M.LOOKUP_TICKET_REQ: lambda f: {"ticket_id": pca.lookup_ticket(
            f["pseudonym_serial"], RaAuth.decode(f["ra_auth"]))},
        M.REVOKE_BY_TICKET_REQ: lambda f: {"serials": pca.revoke_by_ticket(
            f["ticket_id"], RaAuth.decode(f["ra_auth"]))},
        M.CRL_REQ: lambda f: {"crl": pca.get_crl().encode()},
    }


def ra_handlers(ra: Ra) -> dict:
    return {
        M.ECHO_REQ: echo_handler,
        M.RA_RESOLVE_REQ: lambda f: _resolution_fields(ra.resolve(f["pseudonym_serial"])),
        M.RA_REVOKE_REQ: lambda f: _resolution_fields(ra.revoke_vehicle(f["pseudonym_serial"])),
    }


class _Remote:
    def __init__(self, channel: Channel, deadline: float = 30.0) -> None:
        self.channel = channel
        self.deadline = deadline

    def _call(self, message_type: M, **values: Any) -> dict[str, Any]:
        return self.channel.call(message_type, self.deadline, **values)

    def close(self) -> None:
        self.channel.close()


class RemoteLtca(_Remote):
    def register_vehicle(self, vehicle_id: str, public_key: PublicKey,
                         valid_from: int | None = None, valid_until: int | None = None) -> Certificate:
        f = self._call(M.REGISTER_REQ, vehicle_id=vehicle_id, public_key=public_key.encode(),
                       valid_from=valid_from, valid_until=valid_until)
        return Certificate.decode(f["ltc"])

    def issue_ticket(self, signed: SignedTicketRequest) -> Ticket:
        return Ticket.decode(self._call(M.TICKET_REQ, signed_request=signed.encode())["ticket"])

    def resolve_ticket(self, ticket_id: bytes, ra_auth: RaAuth) -> int:
        return self._call(M.RESOLVE_TICKET_REQ, ticket_id=ticket_id, ra_auth=ra_auth.encode())["ltc_serial"]

    def list_tickets(self, ltc_serial: int, ra_auth: RaAuth) -> list[bytes]:
        return self._call(M.LIST_TICKETS_REQ, ltc_serial=ltc_serial, ra_auth=ra_auth.encode())["ticket_ids"]

    def revoke_ltc(self, ltc_serial: int, ra_auth: RaAuth) -> None:
        self._call(M.REVOKE_LTC_REQ, ltc_serial=ltc_serial, ra_auth=ra_auth.encode())


class RemotePca(_Remote):
    def issue_pseudonyms(self, req: PseudonymBatchRequest) -> list[Certificate]:
        f = self._call(M.PSEUDONYM_REQ, batch=req.encode())
        return [Certificate.decode(c) for c in f["pseudonyms"]]

    def lookup_ticket(self, pseudonym_serial: int, ra_auth: RaAuth) -> bytes:
        return self._call(M.LOOKUP_TICKET_REQ, pseudonym_serial=pseudonym_serial,
                          ra_auth=ra_auth.encode())["ticket_id"]

    def revoke_by_ticket(self, ticket_id: bytes, ra_auth: RaAuth) -> list[int]:
        return self._call(M.REVOKE_BY_TICKET_REQ, ticket_id=ticket_id, ra_auth=ra_auth.encode())["serials"]

    def get_crl(self) -> Crl:
        return Crl.decode(self._call(M.CRL_REQ)["crl"])


class RemoteRa(_Remote):
    def resolve(self, pseudonym_serial: int) -> ResolutionResult:
        return _resolution(self._call(M.RA_RESOLVE_REQ, pseudonym_serial=pseudonym_serial))

    def revoke_vehicle(self, pseudonym_serial: int) -> ResolutionResult:
        return _resolution(self._call(M.RA_REVOKE_REQ, pseudonym_serial=pseudonym_serial))
