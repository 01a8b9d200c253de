"""Text of the level prompt. Shared by the engine, the oracle backend and the SFT exporter."""

from __future__ import annotations

import re

SYSTEM_PROMPT = "You are a pharmacology expert specializing in ATC classification."

USER_HEADER = "Classify the drug `{mention}' into one of the following ATC level {level} categories:"
USER_FOOTER = (
    "Provide ONLY one of the options listed above that best matches `{mention}'. "
    "Do not include any description."
)

_HEADER_RE = re.compile(
    r"^Classify the drug `(?P<mention>.*)' into one of the following ATC level (?P<level>[1-5]) categories:$"
)
_FOOTER_PREFIX = "Provide ONLY one of the options listed above that best matches `"


def user_prompt(mention: str, level: int, option_lines: list[str]) -> str:
    lines = [USER_HEADER.format(mention=mention, level=level), *option_lines,
             USER_FOOTER.format(mention=mention)]
    return "\n".join(lines)


def parse_user_prompt(text: str) -> tuple[str, int, list[str]]:
    """Recover ``(mention, level, option_lines)`` from a rendered user prompt.

    Raises ``ValueError`` when ``text`` does not have the prompt's shape.
    """
    lines = text.split("\n")
    if len(lines) < 3:
        raise ValueError("prompt too short")
    # option lines never contain the header sentence, so scan for the footer from the end
    footer_at = max((i for i, ln in enumerate(lines) if ln.startswith(_FOOTER_PREFIX)), default=-1)
    if footer_at < 1:
        raise ValueError("prompt footer not found")
    match = _HEADER_RE.match(lines[0])
    if not match:
        raise ValueError("prompt header not found")
    return match["mention"], int(match["level"]), lines[1:footer_at]
