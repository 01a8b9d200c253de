"""Grounding text for code options: generic names and external definitions."""

from __future__ import annotations

import enum
from collections.abc import Iterable, Iterator, Mapping
from os import PathLike
from pathlib import Path
from types import MappingProxyType

from .errors import DuplicateCode, InvalidCode, ParseError
from .ontology import AtcCode, OntologyEntry, iter_tsv_rows, parse_code


class GroundingSetting(str, enum.Enum):
    CODE_ONLY = "code-only"
    WITH_NAME = "with-name"
    WITH_UMLS = "with-umls"

    @classmethod
    def parse(cls, value: str | GroundingSetting) -> GroundingSetting:
        if isinstance(value, cls):
            return value
        norm = value.strip().lower().replace("_", "-")
        for member in cls:
            if member.value == norm:
                return member
        raise ValueError(f"unknown grounding setting {value!r}; choose from {', '.join(m.value for m in cls)}")


class DefinitionStore(Mapping[str, str]):
    """Read-only ``code text -> definition`` map. Codes need not exist in any ontology."""

    def __init__(self, definitions: Mapping[str, str] | Iterable[tuple[str, str]] = ()):
        items = definitions.items() if isinstance(definitions, Mapping) else definitions
        table: dict[str, str] = {}
        for code, text in items:
            key = parse_code(code).text
            if key in table:
                raise DuplicateCode(f"duplicate definition for {key}")
            if not text or not text.strip():
                raise ValueError(f"empty definition for {key}")
            table[key] = text
        self._table = MappingProxyType(table)

    def __getitem__(self, code: str) -> str:
        return self._table[code]

    def __iter__(self) -> Iterator[str]:
        return iter(self._table)

    def __len__(self) -> int:
        return len(self._table)

    def __repr__(self) -> str:
        return f"DefinitionStore({len(self)} definitions)"

    def lookup(self, code: AtcCode | str) -> str | None:
        return self._table.get(code.text if isinstance(code, AtcCode) else code)


EMPTY_DEFINITIONS = DefinitionStore()


def parse_definitions(lines: Iterable[str], source: str | None = None) -> DefinitionStore:
    rows: list[tuple[str, str]] = []
    seen: dict[str, int] = {}
    for lineno, code_text, definition in iter_tsv_rows(lines, source):
        try:
            code = parse_code(code_text)
        except InvalidCode as exc:
            raise ParseError(str(exc), lineno, source) from exc
        if not definition:
            raise ParseError(f"{code} has an empty definition", lineno, source)
        if code.text in seen:
            raise DuplicateCode(f"{code} already defined on line {seen[code.text]}", lineno, source)
        seen[code.text] = lineno
        rows.append((code.text, definition))
    return DefinitionStore(rows)


def load_definitions(source: str | PathLike[str]) -> DefinitionStore:
    """Load a ``code<TAB>definition`` file (no header, ``#`` comments)."""
    path = Path(source)
    with path.open(encoding="utf-8") as fh:
        return parse_definitions(fh, str(path))


def render_option(
    entry: OntologyEntry,
    setting: GroundingSetting,
    defs: Mapping[str, str] | None = None,
) -> str:
    """Render one option line of the level prompt.

    Under ``WITH_UMLS`` a code without a definition falls back to its name.
    """
    code = entry.code.text
    if setting is GroundingSetting.CODE_ONLY:
        return code
    if setting is GroundingSetting.WITH_UMLS and defs:
        definition = defs.get(code)
        if definition:
            return f"{code}: {definition}"
    return f"{code}: {entry.name}"
