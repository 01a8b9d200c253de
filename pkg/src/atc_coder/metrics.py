"""Correct-level scoring and cumulative accuracy reports."""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

from .data import LabeledMention
from .errors import EmptyEvaluation
from .ontology import LEVEL_LENGTHS, MAX_LEVEL, AtcCode

LEVELS = tuple(range(1, MAX_LEVEL + 1))


def correct_level(gold: AtcCode, predicted: AtcCode | None) -> int:
    """Deepest level at which both codes share the level prefix; 0 for none or an abstention."""
    if predicted is None:
        return 0
    best = 0
    for k in range(1, min(gold.level, predicted.level) + 1):
        n = LEVEL_LENGTHS[k - 1]
        if gold.text[:n] != predicted.text[:n]:
            break
        best = k
    return best


@dataclass(frozen=True)
class CappedLevel:
    level: int
    capped: bool
    excluded: bool = False


def capped_correct_level(gold: AtcCode, predicted: AtcCode | None, granularity: int | None = None) -> CappedLevel:
    """Correct level limited by the annotated granularity.

    ``capped`` is set whenever the granularity is at or below the raw level.
    Granularity 0 marks an item that cannot be scored at all.
    """
    raw = correct_level(gold, predicted)
    if granularity is None:
        return CappedLevel(raw, False)
    if granularity == 0:
        return CappedLevel(0, True, excluded=True)
    return CappedLevel(min(raw, granularity), granularity <= raw)


@dataclass
class ExampleScore:
    mention: str
    gold: str
    predicted: str | None
    correct_level: int
    capped: bool

    def to_dict(self) -> dict:
        return {
            "mention": self.mention,
            "gold": self.gold,
            "predicted": self.predicted,
            "correct_level": self.correct_level,
            "capped": self.capped,
        }


@dataclass
class EvalReport:
    per_example: list[ExampleScore]
    cumulative: dict[int, float]
    n_evaluated: int
    n_excluded: int
    excluded: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "cumulative": {str(k): self.cumulative[k] for k in LEVELS},
            "n_evaluated": self.n_evaluated,
            "n_excluded": self.n_excluded,
            "per_example": [e.to_dict() for e in self.per_example],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, **kwargs)


def cumulative_accuracy(levels: Iterable[int]) -> dict[int, float]:
    levels = list(levels)
    if not levels:
        raise EmptyEvaluation("nothing to evaluate")
    return {k: sum(lv >= k for lv in levels) / len(levels) for k in LEVELS}


def build_report(
    examples: Iterable[tuple[LabeledMention, AtcCode | None]],
    min_granularity: int | None = None,
) -> EvalReport:
    """Score ``(labeled mention, prediction)`` pairs; ``None`` predictions count as wrong.

    Items annotated with granularity 0 are always excluded. With
    ``min_granularity`` set, items annotated below it are excluded too, which
    restricts the run to e.g. the fully specified level-5 subset.
    """
    scores: list[ExampleScore] = []
    excluded: list[str] = []
    for item, predicted in examples:
        g = item.granularity
        if g is not None and min_granularity is not None and g < min_granularity:
            excluded.append(item.mention)
            continue
        cl = capped_correct_level(item.gold, predicted, g)
        if cl.excluded:
            excluded.append(item.mention)
            continue
        scores.append(ExampleScore(item.mention, item.gold.text,
                                   predicted.text if predicted else None, cl.level, cl.capped))
    if not scores:
        raise EmptyEvaluation(f"no evaluable examples ({len(excluded)} excluded)")
    return EvalReport(
        per_example=scores,
        cumulative=cumulative_accuracy(s.correct_level for s in scores),
        n_evaluated=len(scores),
        n_excluded=len(excluded),
        excluded=excluded,
    )


def format_table(reports: Mapping[str, EvalReport]) -> str:
    """Aligned text table, rows ``≥5`` down to ``≥1``, one percentage column per run."""
    names = list(reports)
    header = ["Correct Level", *names]
    rows = [header]
    for k in reversed(LEVELS):
        rows.append([f"≥{k}", *(f"{reports[n].cumulative[k] * 100:.1f}%" for n in names)])
    rows.append(["n", *(str(reports[n].n_evaluated) for n in names)])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"
