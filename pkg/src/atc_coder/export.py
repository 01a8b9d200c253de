"""Supervised fine-tuning export: replay each gold path as chat records."""

from __future__ import annotations

import json
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from datetime import datetime, timezone

from . import __version__
from .backend import ChatMessage
from .data import LabeledMention
from .engine import clean_mention, level_messages, level_options
from .errors import GoldNotInOntology
from .io import atomic_write_text
from .knowledge import GroundingSetting
from .ontology import Ontology

# reference recipe for the downstream trainer; nothing here runs training
REFERENCE_HYPERPARAMETERS = {
    "base_model": "meta-llama/Llama-3.1-8B-Instruct",
    "learning_rate": 2e-5,
    "epochs": 3,
    "batch_size": 4,
}


@dataclass(frozen=True)
class SftRecord:
    messages: tuple[ChatMessage, ChatMessage, ChatMessage]
    mention: str
    level: int
    gold_code: str

    def to_dict(self) -> dict:
        return {
            "messages": [m.to_dict() for m in self.messages],
            "meta": {"mention": self.mention, "level": self.level, "gold_code": self.gold_code},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)


def records_for(
    item: LabeledMention,
    ontology: Ontology,
    setting: GroundingSetting = GroundingSetting.WITH_NAME,
    defs: Mapping[str, str] | None = None,
    include_single_child: bool = False,
) -> list[SftRecord]:
    """Records for one mention, one per level on its gold path."""
    if item.gold not in ontology:
        raise GoldNotInOntology(f"{item.gold} ({item.mention!r}) is not in the ontology")
    mention = clean_mention(item.mention)
    out = []
    parent = None
    for target in item.gold.ancestors():
        options = level_options(parent, ontology, setting, defs)
        parent = target
        if len(options) == 1 and not include_single_child:
            continue
        gold_option = next(o for o in options if o.code == target)
        system, user = level_messages(mention, options)
        out.append(SftRecord(
            (system, user, ChatMessage("assistant", gold_option.rendered)),
            mention, target.level, item.gold.text,
        ))
    return out


def iter_sft_records(
    data: Iterable[LabeledMention],
    ontology: Ontology,
    setting: GroundingSetting = GroundingSetting.WITH_NAME,
    defs: Mapping[str, str] | None = None,
    include_single_child: bool = False,
    skipped: list[LabeledMention] | None = None,
) -> Iterator[SftRecord]:
    """Stream records; mentions whose gold code is unknown are appended to ``skipped`` when given."""
    for item in data:
        try:
            yield from records_for(item, ontology, setting, defs, include_single_child)
        except GoldNotInOntology:
            if skipped is None:
                raise
            skipped.append(item)


@dataclass
class SftExport:
    records: list[SftRecord]
    skipped: list[LabeledMention] = field(default_factory=list)


def export_sft(
    data: Iterable[LabeledMention],
    ontology: Ontology,
    setting: GroundingSetting = GroundingSetting.WITH_NAME,
    defs: Mapping[str, str] | None = None,
    include_single_child: bool = False,
) -> SftExport:
    skipped: list[LabeledMention] = []
    records = list(iter_sft_records(data, ontology, setting, defs, include_single_child, skipped))
    return SftExport(records, skipped)


def build_manifest(
    *,
    setting: GroundingSetting,
    ontology: Ontology,
    record_count: int,
    skipped_count: int = 0,
    mention_count: int | None = None,
    include_single_child: bool = False,
    hyperparameters: Mapping[str, object] | None = None,
    created_at: datetime | None = None,
) -> dict:
    created = created_at or datetime.now(timezone.utc)
    return {
        "format": "chat-jsonl",
        "generator": f"atc_coder {__version__}",
        "created_at": created.isoformat(timespec="seconds"),
        "grounding": setting.value,
        "ontology_fingerprint": f"sha256:{ontology.fingerprint()}",
        "ontology_entries": len(ontology),
        "include_single_child": include_single_child,
        "mention_count": mention_count,
        "record_count": record_count,
        "skipped_mentions": skipped_count,
        "hyperparameters": dict(hyperparameters or REFERENCE_HYPERPARAMETERS),
    }


def write_manifest(path, **config) -> dict:
    """Build a manifest from ``config`` (see :func:`build_manifest`) and write it as JSON."""
    manifest = build_manifest(**config)
    atomic_write_text(path, json.dumps(manifest, indent=2) + "\n")
    return manifest
