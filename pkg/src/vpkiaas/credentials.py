"""ECDSA key pairs, certificates and CSRs with a canonical binary encoding.

Keys default to NIST P-256, the curve used by the IEEE 1609.2 / ETSI ITS
profiles. Public keys travel as compressed SEC1 points and signatures as
fixed-width ``r || s`` so that every encoding is byte-exact and
deterministic apart from the signature itself.
"""

from __future__ import annotations

import enum
import secrets
import time
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)

from . import tlv
from .errors import (
    BadProofOfPossession,
    BadSignature,
    DecodeError,
    Expired,
    MalformedValidity,
    NotYetValid,
    UnknownIssuer,
)

CURVES: dict[str, tuple[type[ec.EllipticCurve], type[hashes.HashAlgorithm]]] = {
    "P-256": (ec.SECP256R1, hashes.SHA256),
    "P-384": (ec.SECP384R1, hashes.SHA384),
}
DEFAULT_CURVE = "P-256"

SERIAL_BYTES = 16
MAX_CHAIN_DEPTH = 8


def _curve(name: str) -> tuple[ec.EllipticCurve, hashes.HashAlgorithm]:
    try:
        curve_cls, hash_cls = CURVES[name]
    except KeyError:
        raise ValueError(f"unsupported curve {name!r}") from None
    return curve_cls(), hash_cls()


def _scalar_len(curve: str) -> int:
    return (_curve(curve)[0].key_size + 7) // 8


@dataclass(frozen=True)
class PublicKey:
    curve: str
    point: bytes  # compressed SEC1

    @classmethod
    def from_crypto(cls, key: ec.EllipticCurvePublicKey, curve: str) -> "PublicKey":
        from cryptography.hazmat.primitives import serialization

        point = key.public_bytes(
            serialization.Encoding.X962, serialization.PublicFormat.CompressedPoint
        )
        return cls(curve, point)

    @cached_property
    def _key(self) -> ec.EllipticCurvePublicKey:
        try:
            return ec.EllipticCurvePublicKey.from_encoded_point(_curve(self.curve)[0], self.point)
        except ValueError as exc:
            raise DecodeError("invalid curve point") from exc

    def verify(self, signature: bytes, message: bytes) -> bool:
        n = _scalar_len(self.curve)
        if len(signature) != 2 * n:
            return False
        r = int.from_bytes(signature[:n], "big")
        s = int.from_bytes(signature[n:], "big")
        try:
            self._key.verify(encode_dss_signature(r, s), message, ec.ECDSA(_curve(self.curve)[1]))
        except (InvalidSignature, DecodeError):
            return False
        return True

    def encode(self) -> bytes:
        return tlv.encode_record({1: tlv.text(self.curve), 2: self.point})

    @classmethod
    def decode(cls, data: bytes) -> "PublicKey":
        f = tlv.decode_record(data)
        pk = cls(tlv.read_text(tlv.require(f, 1, "curve")), tlv.require(f, 2, "point"))
        if pk.curve not in CURVES:
            raise DecodeError(f"unsupported curve {pk.curve!r}")
        return pk


@dataclass(frozen=True, eq=False)
class KeyPair:
    curve: str
    private_key: ec.EllipticCurvePrivateKey = field(repr=False, compare=False)

    @cached_property
    def public_key(self) -> PublicKey:
        return PublicKey.from_crypto(self.private_key.public_key(), self.curve)

    def sign(self, message: bytes) -> bytes:
        der = self.private_key.sign(message, ec.ECDSA(_curve(self.curve)[1]))
        r, s = decode_dss_signature(der)
        n = _scalar_len(self.curve)
        return r.to_bytes(n, "big") + s.to_bytes(n, "big")

    def private_bytes(self) -> bytes:
        n = _scalar_len(self.curve)
        return self.private_key.private_numbers().private_value.to_bytes(n, "big")

    def encode(self) -> bytes:
        return tlv.encode_record({1: tlv.text(self.curve), 2: self.private_bytes()})

    @classmethod
    def decode(cls, data: bytes) -> "KeyPair":
        f = tlv.decode_record(data)
        curve = tlv.read_text(tlv.require(f, 1, "curve"))
        scalar = int.from_bytes(tlv.require(f, 2, "scalar"), "big")
        try:
            key = ec.derive_private_key(scalar, _curve(curve)[0])
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc
        return cls(curve, key)


def generate_keypair(curve: str = DEFAULT_CURVE) -> KeyPair:
    return KeyPair(curve, ec.generate_private_key(_curve(curve)[0]))


def verify(public_key: PublicKey, signature: bytes, message: bytes) -> bool:
    return public_key.verify(signature, message)


def new_serial() -> int:
    return int.from_bytes(secrets.token_bytes(SERIAL_BYTES), "big")


class CertKind(enum.IntEnum):
    LTC = 1
    PSEUDONYM = 2
    AUTHORITY = 3


@dataclass(frozen=True)
class Certificate:
    """Unified certificate for authorities, long-term credentials and pseudonyms.

    ``subject_id`` names authorities and LTC holders; it is always empty for
    pseudonyms. The validity window is half-open, ``[valid_from, valid_until)``.
    """

    serial: int
    kind: CertKind
    subject_public_key: PublicKey
    valid_from: int
    valid_until: int
    issuer_id: str
    subject_id: str = ""
    signature: bytes = b""

    def __post_init__(self) -> None:
        if self.valid_from >= self.valid_until:
            raise MalformedValidity(
                f"empty validity window [{self.valid_from}, {self.valid_until})"
            )
        if self.kind is CertKind.PSEUDONYM and self.subject_id:
            raise ValueError("pseudonyms carry no subject identity")
        if not 0 <= self.serial < 1 << (8 * SERIAL_BYTES):
            raise ValueError("serial out of range")

    @property
    def lifetime(self) -> int:
        return self.valid_until - self.valid_from

    def _fields(self) -> dict[int, bytes]:
        return {
            1: self.serial.to_bytes(SERIAL_BYTES, "big"),
            2: bytes([int(self.kind)]),
            3: self.subject_public_key.encode(),
            4: tlv.i64(self.valid_from),
            5: tlv.i64(self.valid_until),
            6: tlv.text(self.issuer_id),
            7: tlv.text(self.subject_id),
        }

    def tbs_bytes(self) -> bytes:
        return tlv.encode_record(self._fields())

    def encode(self) -> bytes:
        fields = self._fields()
        fields[15] = self.signature
        return tlv.encode_record(fields)

    @classmethod
    def decode(cls, data: bytes) -> "Certificate":
        f = tlv.decode_record(data)
        try:
            kind = CertKind(tlv.require(f, 2, "kind")[0])
        except (ValueError, IndexError) as exc:
            raise DecodeError("bad certificate kind") from exc
        try:
            return cls(
                serial=int.from_bytes(tlv.require(f, 1, "serial"), "big"),
                kind=kind,
                subject_public_key=PublicKey.decode(tlv.require(f, 3, "subject_public_key")),
                valid_from=tlv.read_i64(tlv.require(f, 4, "valid_from")),
                valid_until=tlv.read_i64(tlv.require(f, 5, "valid_until")),
                issuer_id=tlv.read_text(tlv.require(f, 6, "issuer_id")),
                subject_id=tlv.read_text(f.get(7, b"")),
                signature=f.get(15, b""),
            )
        except (MalformedValidity, ValueError) as exc:
            raise DecodeError(str(exc)) from exc

    def contains(self, at: float) -> bool:
        return self.valid_from <= at < self.valid_until

    def verify_signature(self, issuer_public: PublicKey) -> bool:
        return issuer_public.verify(self.signature, self.tbs_bytes())

    @property
    def self_signed(self) -> bool:
        return self.kind is CertKind.AUTHORITY and self.issuer_id == self.subject_id


def sign_certificate(issuer_key: KeyPair, tbs: Certificate) -> Certificate:
    """Return ``tbs`` with its signature field set by ``issuer_key``."""
    if tbs.valid_from >= tbs.valid_until:
        raise MalformedValidity("empty validity window")
    unsigned = replace(tbs, signature=b"")
    return replace(unsigned, signature=issuer_key.sign(unsigned.tbs_bytes()))


def make_authority_cert(
    subject_id: str,
    key: KeyPair,
    valid_from: int,
    valid_until: int,
    issuer_id: str | None = None,
    issuer_key: KeyPair | None = None,
) -> Certificate:
    """Issue an authority certificate; self-signed when no issuer is given."""
    tbs = Certificate(
        serial=new_serial(),
        kind=CertKind.AUTHORITY,
        subject_public_key=key.public_key,
        valid_from=valid_from,
        valid_until=valid_until,
        issuer_id=issuer_id or subject_id,
        subject_id=subject_id,
    )
    return sign_certificate(issuer_key or key, tbs)


def verify_chain(
    cert: Certificate,
    trust_anchors: Iterable[Certificate],
    at: float | None = None,
) -> None:
    """Raise unless ``cert`` chains to a self-signed anchor and is valid at ``at``.

    ``trust_anchors`` may mix self-signed roots with authority certificates
    issued by them; the latter are themselves verified up to a root.
    """
    anchors = {a.subject_id: a for a in trust_anchors if a.kind is CertKind.AUTHORITY}
    if not anchors:
        raise ValueError("trust anchor set is empty")
    now = time.time() if at is None else at
    current = cert
    for _ in range(MAX_CHAIN_DEPTH):
        if now < current.valid_from:
            raise NotYetValid(f"certificate {current.serial:032x} not valid before {current.valid_from}")
        if now >= current.valid_until:
            raise Expired(f"certificate {current.serial:032x} expired at {current.valid_until}")
        issuer = anchors.get(current.issuer_id)
        if issuer is None:
            raise UnknownIssuer(f"no anchor for issuer {current.issuer_id!r}")
        if not current.verify_signature(issuer.subject_public_key):
            raise BadSignature(f"signature by {current.issuer_id!r} does not verify")
        if current.self_signed or issuer is current:
            return
        if issuer.self_signed:
            if not issuer.verify_signature(issuer.subject_public_key):
                raise BadSignature(f"root {issuer.subject_id!r} self-signature invalid")
            if not issuer.contains(now):
                raise Expired(f"root {issuer.subject_id!r} outside validity")
            return
        current = issuer
    raise UnknownIssuer("certificate chain too deep")


_POP_CONTEXT = b"vpkiaas/csr-pop/v1"


@dataclass(frozen=True)
class Csr:
    subject_public_key: PublicKey
    pop_signature: bytes

    @staticmethod
    def _pop_message(public_key: PublicKey) -> bytes:
        return tlv.encode_record({1: _POP_CONTEXT, 2: public_key.encode()})

    def encode(self) -> bytes:
        return tlv.encode_record({1: self.subject_public_key.encode(), 2: self.pop_signature})

    @classmethod
    def decode(cls, data: bytes) -> "Csr":
        f = tlv.decode_record(data)
        return cls(
            PublicKey.decode(tlv.require(f, 1, "subject_public_key")),
            tlv.require(f, 2, "pop_signature"),
        )


def make_csr(kp: KeyPair) -> Csr:
    pk = kp.public_key
    return Csr(pk, kp.sign(Csr._pop_message(pk)))


def verify_csr(csr: Csr) -> None:
    if not csr.subject_public_key.verify(csr.pop_signature, Csr._pop_message(csr.subject_public_key)):
        raise BadProofOfPossession("proof-of-possession signature does not verify")
