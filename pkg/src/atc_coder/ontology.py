"""ATC code parsing, level arithmetic and the immutable prefix hierarchy.

An ATC code encodes its own ancestry: the level is implied by the length of
the code, and every ancestor is a prefix. The ontology is therefore stored as
a flat ``code -> entry`` map plus a precomputed children index.
"""

from __future__ import annotations

import hashlib
import io
import re
from collections import Counter
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from os import PathLike
from pathlib import Path
from types import MappingProxyType

from .errors import (
    DuplicateCode,
    InvalidLength,
    InvalidPattern,
    LevelExceedsCode,
    OrphanCode,
    ParseError,
    UnknownCode,
)

# characters used by a code at levels 1..5
LEVEL_LENGTHS: tuple[int, ...] = (1, 3, 4, 5, 7)
LENGTH_TO_LEVEL: Mapping[int, int] = MappingProxyType({n: k for k, n in enumerate(LEVEL_LENGTHS, 1)})
MAX_LEVEL = 5

# letter, 2 digits, letter, letter, 2 digits
_CHAR_CLASSES = ("alpha", "digit", "digit", "alpha", "alpha", "digit", "digit")
_FULL_CODE = re.compile(r"[A-Z](?:\d\d(?:[A-Z](?:[A-Z](?:\d\d)?)?)?)?")


def level_length(level: int) -> int:
    """Number of characters a code occupies at ``level`` (1-5)."""
    if not 1 <= level <= MAX_LEVEL:
        raise ValueError(f"ATC level must be 1..5, got {level}")
    return LEVEL_LENGTHS[level - 1]


@dataclass(frozen=True, order=True)
class AtcCode:
    """A validated ATC code. Construct through :func:`parse_code`."""

    text: str

    def __post_init__(self) -> None:
        _validate(self.text)

    @property
    def level(self) -> int:
        return LENGTH_TO_LEVEL[len(self.text)]

    @property
    def parent(self) -> AtcCode | None:
        if self.level == 1:
            return None
        return AtcCode(self.text[: level_length(self.level - 1)])

    def prefix(self, level: int) -> AtcCode:
        return prefix_at_level(self, level)

    def ancestors(self) -> list[AtcCode]:
        """Codes on the path from the level-1 root down to and including self."""
        return [AtcCode(self.text[:n]) for n in LEVEL_LENGTHS[: self.level]]

    def is_prefix_of(self, other: AtcCode) -> bool:
        return other.text.startswith(self.text)

    def __str__(self) -> str:
        return self.text


def _validate(text: str) -> None:
    if not isinstance(text, str):
        raise InvalidPattern(f"ATC code must be a string, got {type(text).__name__}")
    if len(text) not in LENGTH_TO_LEVEL:
        raise InvalidLength(f"{text!r} has length {len(text)}; ATC codes have 1, 3, 4, 5 or 7 characters")
    if not _FULL_CODE.fullmatch(text):
        for pos, (ch, cls) in enumerate(zip(text, _CHAR_CLASSES), 1):
            ok = (ch.isascii() and ch.isupper()) if cls == "alpha" else (ch.isascii() and ch.isdigit())
            if not ok:
                raise InvalidPattern(f"{text!r}: position {pos} must be a {'letter' if cls == 'alpha' else 'digit'}")
        raise InvalidPattern(f"{text!r} is not a valid ATC code")


def parse_code(text: str) -> AtcCode:
    """Parse ``text`` into an :class:`AtcCode`; surrounding whitespace is dropped and case is normalized."""
    if not isinstance(text, str):
        raise InvalidPattern(f"ATC code must be a string, got {type(text).__name__}")
    return AtcCode(text.strip().upper())


def prefix_at_level(code: AtcCode, level: int) -> AtcCode:
    if level > code.level:
        raise LevelExceedsCode(f"cannot take level {level} prefix of level {code.level} code {code}")
    return AtcCode(code.text[: level_length(level)])


@dataclass(frozen=True)
class OntologyEntry:
    code: AtcCode
    name: str

    def __post_init__(self) -> None:
        if not self.name or not self.name.strip():
            raise ValueError(f"entry {self.code} has an empty name")

    @property
    def level(self) -> int:
        return self.code.level


@dataclass(frozen=True)
class OptionStats:
    mean_branching: float
    max_branching: int


class Ontology:
    """Immutable ATC hierarchy closed under parents.

    ``None`` stands for the virtual root above the level-1 groups wherever a
    parent is expected.
    """

    def __init__(self, entries: Iterable[OntologyEntry]):
        table: dict[str, OntologyEntry] = {}
        for entry in entries:
            if entry.code.text in table:
                raise DuplicateCode(f"duplicate code {entry.code}")
            table[entry.code.text] = entry
        for entry in table.values():
            parent = entry.code.parent
            if parent is not None and parent.text not in table:
                raise OrphanCode(f"{entry.code} has no parent {parent} in the ontology")

        kids: dict[str | None, list[OntologyEntry]] = {}
        for text in sorted(table):
            entry = table[text]
            parent = entry.code.parent
            kids.setdefault(parent.text if parent else None, []).append(entry)

        self._entries = MappingProxyType(table)
        self._children = MappingProxyType({k: tuple(v) for k, v in kids.items()})

    @property
    def entries(self) -> Mapping[str, OntologyEntry]:
        return self._entries

    @property
    def roots(self) -> list[OntologyEntry]:
        return list(self._children.get(None, ()))

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[OntologyEntry]:
        return (self._entries[k] for k in sorted(self._entries))

    def __contains__(self, code: object) -> bool:
        if isinstance(code, AtcCode):
            code = code.text
        return code in self._entries

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Ontology):
            return NotImplemented
        return dict(self._entries) == dict(other._entries)

    def __hash__(self) -> int:
        return hash(self.fingerprint())

    def __repr__(self) -> str:
        return f"Ontology({len(self)} entries, {len(self.roots)} roots)"

    def get(self, code: AtcCode | str) -> OntologyEntry:
        text = code.text if isinstance(code, AtcCode) else parse_code(code).text
        try:
            return self._entries[text]
        except KeyError:
            raise UnknownCode(f"{text} is not in the ontology") from None

    def children(self, parent: AtcCode | str | None) -> list[OntologyEntry]:
        """Entries one level below ``parent`` sorted by code; ``None`` yields the roots."""
        if parent is None:
            return self.roots
        key = self.get(parent).code.text
        return list(self._children.get(key, ()))

    def level_counts(self) -> dict[int, int]:
        counts = Counter(e.level for e in self._entries.values())
        return {k: counts.get(k, 0) for k in range(1, MAX_LEVEL + 1)}

    def option_stats(self) -> OptionStats:
        return option_stats(self)

    def to_tsv(self) -> str:
        buf = io.StringIO()
        for entry in self:
            buf.write(f"{entry.code.text}\t{entry.name}\n")
        return buf.getvalue()

    def fingerprint(self) -> str:
        """SHA-256 of the canonical TSV serialization."""
        return hashlib.sha256(self.to_tsv().encode("utf-8")).hexdigest()


def children(ontology: Ontology, parent: AtcCode | str | None) -> list[OntologyEntry]:
    return ontology.children(parent)


def option_stats(ontology: Ontology) -> OptionStats:
    """Branching factor over every node, the virtual root included, that has children."""
    if len(ontology) == 0:
        raise ValueError("option_stats needs a non-empty ontology")
    sizes = [len(v) for v in ontology._children.values() if v]
    return OptionStats(mean_branching=sum(sizes) / len(sizes), max_branching=max(sizes))


def iter_tsv_rows(lines: Iterable[str], source: str | None = None) -> Iterator[tuple[int, str, str]]:
    """Yield ``(line_number, code_text, value)`` from a two-column TSV, skipping comments and blanks."""
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        if lineno == 1:
            line = line.lstrip("﻿")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "\t" not in line:
            raise ParseError("expected two tab-separated columns", lineno, source)
        code, value = line.split("\t", 1)
        yield lineno, code, value.strip()


def parse_ontology(lines: Iterable[str], source: str | None = None) -> Ontology:
    entries: list[OntologyEntry] = []
    seen: dict[str, int] = {}
    for lineno, code_text, name in iter_tsv_rows(lines, source):
        try:
            code = parse_code(code_text)
        except (InvalidLength, InvalidPattern) as exc:
            raise ParseError(str(exc), lineno, source) from exc
        if not name:
            raise ParseError(f"{code} has an empty name", lineno, source)
        if code.text in seen:
            raise DuplicateCode(f"{code} already defined on line {seen[code.text]}", lineno, source)
        seen[code.text] = lineno
        entries.append(OntologyEntry(code, name))
    for entry in entries:
        parent = entry.code.parent
        if parent is not None and parent.text not in seen:
            raise OrphanCode(f"{entry.code} has no parent {parent}", seen[entry.code.text], source)
    return Ontology(entries)


def load_ontology(source: str | PathLike[str]) -> Ontology:
    """Load a ``code<TAB>name`` file (no header, ``#`` comments) into an :class:`Ontology`."""
    path = Path(source)
    with path.open(encoding="utf-8") as fh:
        return parse_ontology(fh, str(path))
