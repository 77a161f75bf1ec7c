"""Exception hierarchy shared by all pipeline stages.

The CLI maps the three top-level families to exit codes:
ConfigError -> 2, DataError -> 3, NumericalFailure -> 4.
"""


class VidpeaksError(Exception):
    pass


class ConfigError(VidpeaksError):
    pass


class DataError(VidpeaksError):
    pass


class NumericalFailure(VidpeaksError):
    pass


class ContractViolation(ValueError):
    """A caller broke a documented precondition."""


class VideoTooShort(DataError):
    pass


class ManifestCorrupt(DataError):
    def __init__(self, part, detail=""):
        super().__init__(f"{part}: {detail}" if detail else part)
        self.part = part


class MomentNotEmbedded(DataError):
    pass


class UnknownPart(DataError):
    pass


class DegenerateWeights(DataError):
    pass


class CannotTrain(DataError):
    pass


class UnknownField(DataError):
    pass


class Undefined(DataError):
    pass


class DegenerateConcept(DataError):
    pass


class IncompleteRecord(DataError):
    pass


class IncompletePayload(DataError):
    def __init__(self, feature):
        super().__init__(feature)
        self.feature = feature


class CodingFailed(DataError):
    def __init__(self, message, transcript=None):
        super().__init__(message)
        self.transcript = transcript or []


class TransportError(DataError):
    def __init__(self, message, attempts=0, backoff=()):
        super().__init__(message)
        self.attempts = attempts
        self.backoff = list(backoff)


class EmptyJoin(DataError):
    pass
