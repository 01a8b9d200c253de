"""Labeled mention datasets: loading, canonical CSV, stratified splits, overlap diagnostic."""

from __future__ import annotations

import csv
import io
import logging
import random
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path

from .errors import EmptyEligibleSet, InvalidCode, MissingColumn, ParseError
from .ontology import AtcCode, parse_code

logger = logging.getLogger(__name__)

CANONICAL_COLUMNS = ("mention", "gold", "generic_name", "granularity")


@dataclass(frozen=True)
class LabeledMention:
    mention: str
    gold: AtcCode
    generic_name: str | None = None
    granularity: int | None = None

    def __post_init__(self) -> None:
        if not self.mention or not self.mention.strip():
            raise ValueError("mention must be non-empty")
        if self.granularity is not None and not 0 <= self.granularity <= 5:
            raise ValueError(f"granularity must be within 0..5, got {self.granularity}")


@dataclass(frozen=True)
class ColumnMapping:
    mention: str = "mention"
    gold: str = "gold"
    generic_name: str | None = None
    granularity: str | None = None

    @classmethod
    def canonical(cls) -> ColumnMapping:
        return cls("mention", "gold", "generic_name", "granularity")


@dataclass
class LoadedDataset:
    mentions: list[LabeledMention]
    skipped: list[tuple[int, str]] = field(default_factory=list)

    def __iter__(self):
        return iter(self.mentions)

    def __len__(self) -> int:
        return len(self.mentions)


def _sniff_delimiter(path: Path, sample: str) -> str:
    if path.suffix.lower() in (".tsv", ".tab"):
        return "\t"
    if path.suffix.lower() == ".csv":
        return ","
    first = sample.splitlines()[0] if sample else ""
    return "\t" if first.count("\t") > first.count(",") else ","


def _row_to_mention(row: dict[str, str | None], mapping: ColumnMapping) -> LabeledMention:
    mention = (row.get(mapping.mention) or "").strip()
    if not mention:
        raise ValueError("empty mention")
    try:
        gold = parse_code(row.get(mapping.gold) or "")
    except InvalidCode as exc:
        raise ValueError(str(exc)) from exc
    generic = None
    if mapping.generic_name:
        generic = (row.get(mapping.generic_name) or "").strip() or None
    granularity = None
    if mapping.granularity:
        raw = (row.get(mapping.granularity) or "").strip()
        if raw:
            try:
                granularity = int(raw)
            except ValueError:
                raise ValueError(f"granularity {raw!r} is not an integer") from None
    return LabeledMention(mention, gold, generic, granularity)


def read_dataset(
    text: str,
    mapping: ColumnMapping | None = None,
    *,
    strict: bool = True,
    delimiter: str = ",",
    source: str | None = None,
) -> LoadedDataset:
    mapping = mapping or ColumnMapping()
    reader = csv.DictReader(io.StringIO(text.lstrip("﻿"), newline=""), delimiter=delimiter)
    header = reader.fieldnames or []
    wanted = [c for c in (mapping.mention, mapping.gold, mapping.generic_name, mapping.granularity) if c]
    missing = [c for c in wanted if c not in header]
    if missing:
        raise MissingColumn(f"{source or 'dataset'}: missing column(s) {', '.join(missing)}; header is {header}")

    out = LoadedDataset([])
    for row in reader:
        lineno = reader.line_num
        if not any((v or "").strip() for v in row.values() if isinstance(v, str)):
            continue
        try:
            out.mentions.append(_row_to_mention(row, mapping))
        except ValueError as exc:
            if strict:
                raise ParseError(str(exc), lineno, source) from exc
            out.skipped.append((lineno, str(exc)))
    if out.skipped:
        logger.warning("%s: skipped %d invalid row(s)", source or "dataset", len(out.skipped))
    return out


def load_dataset(
    source: str | PathLike[str],
    mapping: ColumnMapping | None = None,
    *,
    strict: bool = True,
    delimiter: str | None = None,
) -> LoadedDataset:
    """Read a delimited file with a header row into labeled mentions.

    Strict mode raises :class:`ParseError` on the first bad row; lenient mode
    skips it and records ``(line, reason)`` in ``skipped``.
    """
    path = Path(source)
    text = path.read_text(encoding="utf-8")
    return read_dataset(text, mapping, strict=strict,
                        delimiter=delimiter or _sniff_delimiter(path, text), source=str(path))


def dataset_to_csv(items: Iterable[LabeledMention]) -> str:
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CANONICAL_COLUMNS)
    for it in items:
        writer.writerow([
            it.mention,
            it.gold.text,
            it.generic_name or "",
            "" if it.granularity is None else it.granularity,
        ])
    return buf.getvalue()


@dataclass
class SplitResult:
    train: list[LabeledMention]
    test: list[LabeledMention]
    seed: int
    ratio: float


def _round_half_up(x: float) -> int:
    return int(x + 0.5)


def stratified_split(data: Sequence[LabeledMention], ratio: float = 0.9, seed: int = 42) -> SplitResult:
    """Split by level-1 group, keeping ``ratio`` of each group for training.

    Each group is shuffled with a generator seeded once per call, then cut at
    ``round(size * ratio)``. Single-item groups always go to training. Both
    outputs keep the input order.
    """
    if not 0 < ratio < 1:
        raise ValueError("ratio must be strictly between 0 and 1")
    strata: dict[str, list[int]] = defaultdict(list)
    for i, item in enumerate(data):
        strata[item.gold.text[0]].append(i)

    rng = random.Random(seed)
    train_idx: list[int] = []
    for key in sorted(strata):
        members = strata[key]
        rng.shuffle(members)
        cut = len(members) if len(members) == 1 else _round_half_up(len(members) * ratio)
        train_idx.extend(members[:cut])

    in_train = set(train_idx)
    train = [it for i, it in enumerate(data) if i in in_train]
    test = [it for i, it in enumerate(data) if i not in in_train]
    return SplitResult(train, test, seed, ratio)


def is_substring_pair(mention: str, generic: str) -> bool:
    a, b = mention.strip().lower(), generic.strip().lower()
    return a in b or b in a


def substring_overlap_rate(data: Iterable[LabeledMention]) -> float:
    """Share of items whose mention and generic name contain one another (case-insensitive).

    Items without a generic name are ignored entirely.
    """
    eligible = [it for it in data if it.generic_name and it.generic_name.strip()]
    if not eligible:
        raise EmptyEligibleSet("no item carries a generic name")
    hits = sum(is_substring_pair(it.mention, it.generic_name) for it in eligible)
    return hits / len(eligible)
