"""Exception hierarchy shared across the package."""


class PpidsError(Exception):
    pass


class ShapeMismatch(PpidsError, ValueError):
    pass


class PartyMismatch(PpidsError, ValueError):
    pass


RoleError = PartyMismatch


class ReuseError(PpidsError, RuntimeError):
    """Correlated randomness consumed twice."""


class TripleReuseError(ReuseError):
    pass


class PairReuseError(ReuseError):
    pass


class CompareReuseError(ReuseError):
    pass


class MaterialExhausted(PpidsError, RuntimeError):
    pass


class DomainError(PpidsError, ValueError):
    pass


class SpecError(PpidsError, ValueError):
    pass


class UnsupportedLayer(SpecError):
    pass


class MissingStats(PpidsError, KeyError):
    pass


class FormatError(PpidsError, ValueError):
    pass


class ChecksumError(FormatError):
    pass


class ParseError(FormatError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class TooFewRows(PpidsError, ValueError):
    pass


class FrameError(PpidsError, ValueError):
    pass


class ProtocolAbort(PpidsError, RuntimeError):
    """The peer (or this party) aborted the session; ``code`` names the reason."""

    code = "Abort"

    def __init__(self, message: str = "", code: str | None = None):
        if code is not None:
            self.code = code
        super().__init__(f"{self.code}: {message}" if message else self.code)
        self.detail = message


class ConfigMismatch(ProtocolAbort):
    code = "ConfigMismatch"


class QuotaExceeded(ProtocolAbort):
    code = "QuotaExceeded"


class DealerUnavailable(ProtocolAbort):
    code = "DealerUnavailable"


class OverflowAbort(ProtocolAbort):
    code = "OverflowAbort"


ABORT_CODES = {cls.code: cls for cls in
               (ConfigMismatch, QuotaExceeded, DealerUnavailable, OverflowAbort)}


def abort_from_code(code: str, message: str) -> ProtocolAbort:
    cls = ABORT_CODES.get(code)
    if cls is None:
        return ProtocolAbort(message, code=code)
    return cls(message)
