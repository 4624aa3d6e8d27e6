"""Exception hierarchy shared across steerlab modules."""


class SteerlabError(Exception):
    """Base class for all library errors."""


class BatchTooSmall(SteerlabError):
    pass


class NumericalFailure(SteerlabError):
    pass


class AllZeroSpectrum(SteerlabError):
    pass


class NotUnit(SteerlabError):
    pass


class AntipodalDirection(SteerlabError):
    pass


class ZeroVector(SteerlabError):
    pass


class DimMismatch(SteerlabError):
    pass


class EmptySpan(SteerlabError):
    pass


class DegenerateDirection(SteerlabError):
    pass


class EmptyPrototypes(SteerlabError):
    pass


class MissingArtifact(SteerlabError):
    pass


class IoError(SteerlabError):
    pass


class VersionMismatch(IoError):
    pass


class ChecksumMismatch(IoError):
    pass


class BadDims(SteerlabError):
    pass


class DidNotConverge(SteerlabError):
    pass


class HookOutOfRange(SteerlabError):
    pass


class MaxLenExceeded(SteerlabError):
    pass


class NoGateOpenExamples(SteerlabError):
    pass


class JudgeUnavailable(SteerlabError):
    pass


class JudgeParseError(SteerlabError):
    pass


class IdMismatch(SteerlabError):
    pass


class ParseError(SteerlabError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateId(SteerlabError):
    pass


class SchemaViolation(SteerlabError):
    pass
