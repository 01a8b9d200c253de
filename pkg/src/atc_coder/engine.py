"""Level-by-level traversal of the ATC hierarchy.

At each node the model sees the node's children as a closed list of options
and must name one; the chosen child becomes the next node. Replies are only
ever mapped onto presented options, so a trace can never contain a code that
is missing from the ontology.
"""

from __future__ import annotations

import logging
import re
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .backend import ChatBackend, ChatMessage, GenerationParams
from .errors import AmbiguousMatch, NoChildren
from .knowledge import EMPTY_DEFINITIONS, GroundingSetting, render_option
from .ontology import AtcCode, Ontology
from .prompts import SYSTEM_PROMPT, user_prompt

logger = logging.getLogger(__name__)

_TOKEN = re.compile(r"[A-Z0-9]+")


@dataclass(frozen=True)
class Option:
    code: AtcCode
    rendered: str

    @property
    def label(self) -> str:
        """Text after ``code:`` in the rendered line, empty under code-only grounding."""
        _, sep, rest = self.rendered.partition(":")
        return rest.strip() if sep else ""


def level_options(
    parent: AtcCode | None,
    ontology: Ontology,
    setting: GroundingSetting,
    defs: Mapping[str, str] | None = None,
) -> list[Option]:
    return [Option(e.code, render_option(e, setting, defs)) for e in ontology.children(parent)]


def clean_mention(mention: str) -> str:
    """Trim and fold line breaks; prompts are line-oriented."""
    return " ".join(mention.strip().splitlines())


def render_prompt(
    mention: str,
    parent: AtcCode | None,
    ontology: Ontology,
    setting: GroundingSetting = GroundingSetting.WITH_NAME,
    defs: Mapping[str, str] | None = None,
) -> list[ChatMessage]:
    """System and user messages asking to choose among the children of ``parent`` (``None`` = roots)."""
    options = level_options(parent, ontology, setting, defs)
    if not options:
        raise NoChildren(f"{parent} has no children to choose from")
    return level_messages(clean_mention(mention), options)


def level_messages(mention: str, options: Sequence[Option]) -> list[ChatMessage]:
    level = options[0].code.level
    return [
        ChatMessage("system", SYSTEM_PROMPT),
        ChatMessage("user", user_prompt(mention, level, [o.rendered for o in options])),
    ]


def _unique(codes: Iterable[AtcCode], stage: int) -> AtcCode | None:
    found = sorted(set(codes))
    if len(found) > 1:
        raise AmbiguousMatch([c.text for c in found], stage)
    return found[0] if found else None


def normalize_reply(raw: str, options: Sequence[Option | tuple[AtcCode, str]]) -> AtcCode | None:
    """Map a free-text reply onto one presented option.

    Tried in order, the first stage with a hit wins:
    exact code, code at the start of the reply, a single code token anywhere,
    a single option label anywhere (case-insensitive). Returns ``None`` when
    nothing matches and raises :class:`AmbiguousMatch` when a stage hits
    several different options.
    """
    if not options:
        raise ValueError("options must be non-empty")
    opts = [o if isinstance(o, Option) else Option(*o) for o in options]
    text = raw.strip().upper()

    hit = _unique((o.code for o in opts if o.code.text == text), 1)
    if hit:
        return hit

    def starts(code: str) -> bool:
        if not text.startswith(code):
            return False
        rest = text[len(code):]
        return not rest or rest[0] == ":" or rest[0].isspace()

    tokens = set(_TOKEN.findall(text))
    mentioned = {o.code for o in opts if o.code.text in tokens}

    # a leading code only counts when no other option is named later ("N01 or N02")
    hit = _unique((o.code for o in opts if starts(o.code.text)), 2)
    if hit and mentioned <= {hit}:
        return hit

    hit = _unique(mentioned, 3)
    if hit:
        return hit

    folded = raw.casefold()
    return _unique((o.code for o in opts if o.label and o.label.casefold() in folded), 4)


@dataclass
class LevelStep:
    level: int
    options: list[Option]
    raw_reply: str
    selected: AtcCode | None
    auto_selected: bool = False
    # every reply received at this level, retries included; raw_reply is the last one
    attempts: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "options": [o.code.text for o in self.options],
            "raw_reply": self.raw_reply,
            "selected": self.selected.text if self.selected else None,
            "auto_selected": self.auto_selected,
            "attempts": list(self.attempts),
        }


@dataclass
class CodingTrace:
    mention: str
    grounding: GroundingSetting
    steps: list[LevelStep] = field(default_factory=list)
    final: AtcCode | None = None
    error: str | None = None

    @property
    def abstained(self) -> bool:
        return self.final is None and self.error is None

    @property
    def backend_calls(self) -> int:
        return sum(len(s.attempts) for s in self.steps)

    def to_dict(self) -> dict:
        return {
            "mention": self.mention,
            "grounding": self.grounding.value,
            "final": self.final.text if self.final else None,
            "abstained": self.abstained,
            "error": self.error,
            "steps": [s.to_dict() for s in self.steps],
        }


class HierarchicalCoder:
    """Holds the run configuration and codes mentions one traversal at a time.

    ``auto_select`` descends through single-child nodes without asking the
    model. ``retries_per_level`` re-sends the same prompt after an unusable
    reply; once exhausted the traversal stops at the deepest matched code.
    """

    def __init__(
        self,
        ontology: Ontology,
        backend: ChatBackend,
        params: GenerationParams | None = None,
        setting: GroundingSetting = GroundingSetting.WITH_NAME,
        defs: Mapping[str, str] | None = None,
        retries_per_level: int = 2,
        auto_select: bool = True,
    ):
        if len(ontology) == 0:
            raise ValueError("ontology is empty")
        if retries_per_level < 0:
            raise ValueError("retries_per_level must be >= 0")
        self.ontology = ontology
        self.backend = backend
        self.params = params or GenerationParams()
        self.setting = setting
        self.defs = defs if defs is not None else EMPTY_DEFINITIONS
        self.retries_per_level = retries_per_level
        self.auto_select = auto_select

    def code(self, mention: str) -> CodingTrace:
        """Traverse for one mention. Backend failures propagate."""
        trace = self._new_trace(mention)
        self._traverse(trace)
        return trace

    def code_batch(self, mentions: Sequence[str], max_concurrency: int = 1) -> list[CodingTrace]:
        """Code many mentions, at most ``max_concurrency`` at once, returning traces in input order.

        A failing mention yields a trace with ``error`` set instead of aborting the batch.
        """
        if max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if not mentions:
            return []
        if max_concurrency == 1:
            return [self._code_isolated(m) for m in mentions]
        with ThreadPoolExecutor(max_workers=max_concurrency) as pool:
            return list(pool.map(self._code_isolated, mentions))

    def _new_trace(self, mention: str) -> CodingTrace:
        cleaned = clean_mention(mention)
        if not cleaned:
            raise ValueError("mention is empty")
        return CodingTrace(mention=cleaned, grounding=self.setting)

    def _code_isolated(self, mention: str) -> CodingTrace:
        try:
            trace = self._new_trace(mention)
        except ValueError as exc:
            return CodingTrace(mention=mention, grounding=self.setting, error=str(exc))
        try:
            self._traverse(trace)
        except Exception as exc:
            logger.warning("coding %r failed: %s", trace.mention, exc)
            trace.error = f"{type(exc).__name__}: {exc}"
            trace.final = None
        return trace

    def _traverse(self, trace: CodingTrace) -> None:
        node: AtcCode | None = None
        while True:
            options = level_options(node, self.ontology, self.setting, self.defs)
            if not options:
                break
            level = options[0].code.level
            if self.auto_select and len(options) == 1:
                step = LevelStep(level, options, "", options[0].code, auto_selected=True)
            else:
                step = self._ask(trace.mention, level, options)
            trace.steps.append(step)
            if step.selected is None:
                break
            node = step.selected
            trace.final = node

    def _ask(self, mention: str, level: int, options: list[Option]) -> LevelStep:
        messages = level_messages(mention, options)
        step = LevelStep(level, options, "", None)
        for _ in range(self.retries_per_level + 1):
            reply = self.backend.complete(messages, self.params)
            step.attempts.append(reply)
            step.raw_reply = reply
            try:
                step.selected = normalize_reply(reply, options)
            except AmbiguousMatch as exc:
                logger.debug("level %d reply for %r ambiguous: %s", level, mention, exc)
                continue
            if step.selected is not None:
                break
            logger.debug("level %d reply for %r matched no option: %r", level, mention, reply)
        return step


def code_mention(
    mention: str,
    ontology: Ontology,
    backend: ChatBackend,
    params: GenerationParams | None = None,
    setting: GroundingSetting = GroundingSetting.WITH_NAME,
    defs: Mapping[str, str] | None = None,
    retries_per_level: int = 2,
    auto_select: bool = True,
) -> CodingTrace:
    coder = HierarchicalCoder(ontology, backend, params, setting, defs, retries_per_level, auto_select)
    return coder.code(mention)


def code_batch(
    mentions: Sequence[str],
    ontology: Ontology,
    backend: ChatBackend,
    params: GenerationParams | None = None,
    setting: GroundingSetting = GroundingSetting.WITH_NAME,
    defs: Mapping[str, str] | None = None,
    retries_per_level: int = 2,
    auto_select: bool = True,
    max_concurrency: int = 1,
) -> list[CodingTrace]:
    coder = HierarchicalCoder(ontology, backend, params, setting, defs, retries_per_level, auto_select)
    return coder.code_batch(mentions, max_concurrency)
