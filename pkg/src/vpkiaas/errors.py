"""Exception hierarchy shared by services, clients and the wire protocol.

Every error carries a stable ``code`` so it survives a trip over the wire:
the gateway serialises ``(code, message, step)`` and the client side maps
the code back to the same class.
"""

from __future__ import annotations


class VpkiError(Exception):
    code = "Internal"

    def __init__(self, message: str = "", *, step: str = "") -> None:
        super().__init__(message or self.code)
        self.message = message or self.code
        self.step = step


# credentials
class MalformedValidity(VpkiError):
    code = "MalformedValidity"


class UnknownIssuer(VpkiError):
    code = "UnknownIssuer"


class Expired(VpkiError):
    code = "Expired"


class NotYetValid(VpkiError):
    code = "NotYetValid"


class BadSignature(VpkiError):
    code = "BadSignature"


class BadProofOfPossession(VpkiError):
    code = "BadProofOfPossession"
    index: int | None = None

    def __init__(self, message: str = "", *, index: int | None = None, step: str = "") -> None:
        super().__init__(message, step=step)
        self.index = index


class DecodeError(VpkiError):
    code = "DecodeError"


# authorization
class Unauthorized(VpkiError):
    code = "Unauthorized"


# ltca
class DuplicateRegistration(VpkiError):
    code = "DuplicateRegistration"


class BadAuth(VpkiError):
    code = "BadAuth"


class RevokedLtc(VpkiError):
    code = "RevokedLtc"


class ExpiredLtc(VpkiError):
    code = "ExpiredLtc"


class WindowTooLarge(VpkiError):
    code = "WindowTooLarge"


class InvalidRequest(VpkiError):
    code = "InvalidRequest"


class UnknownTicket(VpkiError):
    code = "UnknownTicket"


class UnknownSerial(VpkiError):
    code = "UnknownSerial"


# pca
class BadTicketSignature(VpkiError):
    code = "BadTicketSignature"


class WrongPca(VpkiError):
    code = "WrongPca"


class TicketExpired(VpkiError):
    code = "TicketExpired"


class TicketAlreadyUsed(VpkiError):
    code = "TicketAlreadyUsed"


class TooManyCsrs(VpkiError):
    code = "TooManyCsrs"


# ra
class UpstreamUnavailable(VpkiError):
    code = "UpstreamUnavailable"


class PartialRevocation(UpstreamUnavailable):
    """Some revocation legs succeeded and one failed; retrying is safe."""

    code = "PartialRevocation"
    completed: tuple[str, ...] = ()
    failed = ""

    def __init__(self, message: str = "", *, completed: tuple[str, ...] = (),
                 failed: str = "", step: str = "") -> None:
        super().__init__(message, step=step or failed)
        self.completed = tuple(completed)
        self.failed = failed


# store
class NotFound(VpkiError):
    code = "NotFound"


class StoreUnavailable(VpkiError):
    code = "StoreUnavailable"


# orchestrator
class NoReadyPods(VpkiError):
    code = "NoReadyPods"


class SpawnFailed(VpkiError):
    code = "SpawnFailed"


class PodUnavailable(VpkiError):
    """The pod refused the request (crashed, draining or terminated)."""

    code = "PodUnavailable"


# gateway / transport
class UnknownVersion(DecodeError):
    code = "UnknownVersion"


class UnknownType(DecodeError):
    code = "UnknownType"


class TruncatedFrame(DecodeError):
    code = "TruncatedFrame"


class OversizeFrame(DecodeError):
    code = "OversizeFrame"


class TransportError(VpkiError):
    code = "TransportError"


class Timeout(TransportError):
    code = "Timeout"


class ConnectionFailed(TransportError):
    code = "ConnectionFailed"


class TargetUnreachable(TransportError):
    code = "TargetUnreachable"


# bench / config
class ConfigError(VpkiError):
    code = "ConfigError"


class ParseError(VpkiError):
    code = "ParseError"
    line: int | None = None

    def __init__(self, message: str = "", *, line: int | None = None, step: str = "") -> None:
        super().__init__(message, step=step)
        self.line = line


class EmptyTrace(VpkiError):
    code = "EmptyTrace"


class NoData(VpkiError):
    code = "NoData"


def _all_subclasses(cls: type) -> list[type]:
    out = []
    for sub in cls.__subclasses__():
        out.append(sub)
        out.extend(_all_subclasses(sub))
    return out


ERRORS_BY_CODE: dict[str, type[VpkiError]] = {c.code: c for c in _all_subclasses(VpkiError)}
ERRORS_BY_CODE[VpkiError.code] = VpkiError


def from_code(code: str, message: str = "", step: str = "") -> VpkiError:
    cls = ERRORS_BY_CODE.get(code, VpkiError)
    err = cls.__new__(cls)
    VpkiError.__init__(err, message, step=step)
    return err
