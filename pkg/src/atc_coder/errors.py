"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class AtcError(Exception):
    """Base class for all errors raised by atc_coder."""


class InvalidCode(AtcError, ValueError):
    """A string could not be parsed as an ATC code."""


class InvalidLength(InvalidCode):
    pass


class InvalidPattern(InvalidCode):
    pass


class LevelExceedsCode(AtcError, ValueError):
    pass


class ParseError(AtcError):
    """A row of an input file is malformed. Carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class DuplicateCode(ParseError):
    pass


class OrphanCode(ParseError):
    pass


class MissingColumn(AtcError):
    pass


class UnknownCode(AtcError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class NoChildren(AtcError):
    pass


class AmbiguousMatch(AtcError):
    def __init__(self, codes: list[str], stage: int):
        self.codes = codes
        self.stage = stage
        super().__init__(f"reply matches {len(codes)} options at stage {stage}: {', '.join(codes)}")


class BackendError(AtcError):
    """Base class for failures while obtaining a model reply."""


class TransportError(BackendError):
    pass


class ServerError(BackendError):
    def __init__(self, status: int, body: str):
        self.status = status
        self.body = body
        super().__init__(f"server returned HTTP {status}: {body[:500]}")


class OracleMiss(BackendError):
    pass


class ScriptExhausted(BackendError):
    pass


class EmptyEligibleSet(AtcError, ValueError):
    pass


class EmptyEvaluation(AtcError, ValueError):
    pass


class GoldNotInOntology(AtcError):
    pass


class ConfigError(AtcError):
    pass
