"""Resolution Authority: pseudonym -> ticket -> LTC, then cascade revocation.

The RA keeps no state. It asks a PCA which ticket a pseudonym was issued
under, asks the LTCA which LTC that ticket was issued to, and on revocation
revokes every ticket ledgered under that LTC at every PCA before evicting
the LTC itself. Upstreams may be in-process services or remote proxies;
anything exposing the same methods works.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Sequence

from .authz import RaCredential
from .errors import (
    PartialRevocation,
    PodUnavailable,
    TransportError,
    UnknownSerial,
    UnknownTicket,
    UpstreamUnavailable,
)

logger = logging.getLogger(__name__)

_UPSTREAM_ERRORS = (TransportError, PodUnavailable, ConnectionError, TimeoutError)


@dataclass(frozen=True)
class ResolutionResult:
    pseudonym_serial: int
    ticket_id: bytes
    ltc_serial: int
    revoked_pseudonym_serials: tuple[int, ...] = ()
    revoked_ticket_ids: tuple[bytes, ...] = ()


class Ra:
    def __init__(
        self,
        credential: RaCredential,
        ltca,
        pcas: Sequence,
        clock: Callable[[], float] = time.time,
    ) -> None:
        self.credential = credential
        self.ltca = ltca
        self.pcas = list(pcas)
        self.clock = clock

    def _auth(self, op: str, subject: bytes):
        return self.credential.authorize(op, subject, self.clock())

    def _lookup(self, pseudonym_serial: int) -> tuple[bytes, object]:
        subject = pseudonym_serial.to_bytes(16, "big")
        unavailable = []
        for pca in self.pcas:
            try:
                return pca.lookup_ticket(pseudonym_serial, self._auth("lookup_ticket", subject)), pca
            except UnknownSerial:
                continue
            except _UPSTREAM_ERRORS as exc:
                unavailable.append(exc)
        if unavailable:
            raise UpstreamUnavailable(f"PCA unreachable: {unavailable[0]}", step="pca") from unavailable[0]
        raise UnknownSerial(f"no PCA knows pseudonym {pseudonym_serial:032x}")

    def resolve(self, pseudonym_serial: int) -> ResolutionResult:
        ticket_id, _ = self._lookup(pseudonym_serial)
        try:
            ltc_serial = self.ltca.resolve_ticket(ticket_id, self._auth("resolve_ticket", ticket_id))
        except _UPSTREAM_ERRORS as exc:
            raise UpstreamUnavailable(f"LTCA unreachable: {exc}", step="ltca") from exc
        return ResolutionResult(pseudonym_serial, ticket_id, ltc_serial)

    def revoke_vehicle(self, pseudonym_serial: int) -> ResolutionResult:
        resolved = self.resolve(pseudonym_serial)
        ltc_subject = resolved.ltc_serial.to_bytes(16, "big")
        completed: list[str] = []

        try:
            tickets = self.ltca.list_tickets(resolved.ltc_serial, self._auth("list_tickets", ltc_subject))
        except _UPSTREAM_ERRORS as exc:
            raise PartialRevocation(f"listing tickets failed: {exc}", completed=(),
                                    failed="ltca-list") from exc
        if resolved.ticket_id not in tickets:
            tickets.append(resolved.ticket_id)
        completed.append("ltca-list")

        revoked: set[int] = set()
        for pca in self.pcas:
            for ticket_id in tickets:
                try:
                    revoked.update(pca.revoke_by_ticket(ticket_id, self._auth("revoke_by_ticket", ticket_id)))
                except UnknownTicket:
                    continue
                except _UPSTREAM_ERRORS as exc:
                    raise PartialRevocation(f"PCA revocation failed: {exc}",
                                            completed=tuple(completed), failed="pca") from exc
        completed.append("pca")

        try:
            self.ltca.revoke_ltc(resolved.ltc_serial, self._auth("revoke_ltc", ltc_subject))
        except _UPSTREAM_ERRORS as exc:
            raise PartialRevocation(f"LTC revocation failed: {exc}",
                                    completed=tuple(completed), failed="ltca") from exc

        logger.info("revoked LTC %032x and %d pseudonyms", resolved.ltc_serial, len(revoked))
        return ResolutionResult(
            pseudonym_serial,
            resolved.ticket_id,
            resolved.ltc_serial,
            tuple(sorted(revoked)),
            tuple(tickets),
        )
