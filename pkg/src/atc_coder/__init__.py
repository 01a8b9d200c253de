"""Assign WHO ATC codes to drug mentions by walking the ATC hierarchy with a chat model."""

__version__ = "0.1.0"

from .backend import (  # noqa: E402
    AdversarialBackend,
    ChatBackend,
    ChatMessage,
    GenerationParams,
    HttpChatBackend,
    OracleBackend,
    complete,
)
from .data import (  # noqa: E402
    ColumnMapping,
    LabeledMention,
    SplitResult,
    load_dataset,
    stratified_split,
    substring_overlap_rate,
)
from .engine import (  # noqa: E402
    CodingTrace,
    HierarchicalCoder,
    LevelStep,
    code_batch,
    code_mention,
    normalize_reply,
    render_prompt,
)
from .export import export_sft, write_manifest  # noqa: E402
from .knowledge import DefinitionStore, GroundingSetting, load_definitions, render_option  # noqa: E402
from .metrics import EvalReport, build_report, capped_correct_level, correct_level  # noqa: E402
from .ontology import (  # noqa: E402
    AtcCode,
    Ontology,
    OntologyEntry,
    children,
    load_ontology,
    option_stats,
    parse_code,
    prefix_at_level,
)

__all__ = [
    "AdversarialBackend", "AtcCode", "ChatBackend", "ChatMessage", "CodingTrace", "ColumnMapping",
    "DefinitionStore", "EvalReport", "GenerationParams", "GroundingSetting", "HierarchicalCoder",
    "HttpChatBackend", "LabeledMention", "LevelStep", "Ontology", "OntologyEntry", "OracleBackend",
    "SplitResult", "build_report", "capped_correct_level", "children", "code_batch", "code_mention",
    "complete", "correct_level", "export_sft", "load_dataset", "load_definitions", "load_ontology",
    "normalize_reply", "option_stats", "parse_code", "prefix_at_level", "render_option",
    "render_prompt", "stratified_split", "substring_overlap_rate", "write_manifest",
]
