"""Signed request authorization: RA credentials and LTC-signed requests.

An RA proves its role with an authority certificate issued by the domain
root plus a fresh signature over ``(operation, subject, signed_at)``.
Freshness is bounded by ``MAX_SKEW_S`` to limit replay.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Iterable

from . import tlv
from .credentials import Certificate, CertKind, KeyPair, verify_chain
from .errors import Unauthorized, VpkiError

MAX_SKEW_S = 300


def _auth_message(op: str, subject: bytes, signed_at: int) -> bytes:
    return tlv.encode_record({1: b"vpkiaas/ra-auth/v1", 2: tlv.text(op), 3: subject,
                              4: tlv.i64(signed_at)})


@dataclass(frozen=True)
class RaAuth:
    cert: Certificate
    signed_at: int
    signature: bytes

    def encode(self) -> bytes:
        return tlv.encode_record({1: self.cert.encode(), 2: tlv.i64(self.signed_at),
                                  3: self.signature})

    @classmethod
    def decode(cls, data: bytes) -> "RaAuth":
        f = tlv.decode_record(data)
        return cls(Certificate.decode(tlv.require(f, 1, "cert")),
                   tlv.read_i64(tlv.require(f, 2, "signed_at")),
                   tlv.require(f, 3, "signature"))


@dataclass(frozen=True)
class RaCredential:
    key: KeyPair
    cert: Certificate

    def authorize(self, op: str, subject: bytes, now: float | None = None) -> RaAuth:
        signed_at = int(time.time() if now is None else now)
        return RaAuth(self.cert, signed_at, self.key.sign(_auth_message(op, subject, signed_at)))


def check_ra(
    auth: RaAuth | None,
    op: str,
    subject: bytes,
    anchors: Iterable[Certificate],
    ra_ids: Iterable[str],
    now: float,
) -> None:
    """Raise ``Unauthorized`` unless ``auth`` is a fresh RA signature for ``op``."""
    if auth is None:
        raise Unauthorized("missing RA credential")
    cert = auth.cert
    if cert.kind is not CertKind.AUTHORITY or cert.subject_id not in set(ra_ids):
        raise Unauthorized(f"{cert.subject_id or 'caller'!r} is not a resolution authority")
    try:
        verify_chain(cert, anchors, at=now)
    except VpkiError as exc:
        raise Unauthorized(f"RA certificate rejected: {exc.code}") from exc
    if abs(now - auth.signed_at) > MAX_SKEW_S:
        raise Unauthorized("stale RA authorization")
    if not cert.subject_public_key.verify(auth.signature, _auth_message(op, subject, auth.signed_at)):
        raise Unauthorized("RA authorization signature invalid")
