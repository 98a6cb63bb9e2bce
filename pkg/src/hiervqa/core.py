"""Domain types for hierarchical visual QA chains.

A chain binds one image to three question-answer pairs ordered by
abstraction: perception (level 1), semantic bridge (level 2), and
connotation (level 3). Every type here is an immutable value object;
structural checks live in :func:`validate_benchmark_item` so that
malformed data coming off disk can be reported rather than crash.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Optional


class Level(IntEnum):
    """Abstraction level of a question, 1 (most concrete) to 3 (most abstract)."""

    PERCEPTION = 1
    BRIDGE = 2
    CONNOTATION = 3


LEVEL_NAMES = {
    Level.PERCEPTION: "Perception",
    Level.BRIDGE: "Semantic Bridge (Comprehensive Understanding)",
    Level.CONNOTATION: "Connotation",
}

# Maximum whitespace-delimited words allowed in an open-ended answer,
# enforced at parse time (generators are prompted with the same caps).
LEVEL_WORD_CAPS = {Level.PERCEPTION: 30, Level.BRIDGE: 40, Level.CONNOTATION: 50}

TASKS = ("implication", "aesthetic", "affective")

# The fifteen aspect tags accepted in benchmark files, grouped by task.
ASPECTS_BY_TASK = {
    "implication": ("metaphor", "symbolism", "contrast", "exaggeration", "dislocation"),
    "aesthetic": ("color", "composition", "font", "graphics"),
    "affective": ("joy", "affection", "wonder", "anger", "fear", "sadness"),
}
ASPECTS = tuple(a for group in ASPECTS_BY_TASK.values() for a in group)

# Generation runs that carry no aspect concept emit this placeholder.
UNSPECIFIED_ASPECT = "unspecified"

MULTIPLE_CHOICE = "multiple_choice"
OPEN_ENDED = "open_ended"


def level_name(level: int) -> str:
    return LEVEL_NAMES[Level(level)]


@dataclass(frozen=True)
class ImageRef:
    """Pointer to an image; no pixel access happens in this package."""

    path_or_uri: str
    media_type: str = "image/png"


@dataclass(frozen=True)
class OptionEntry:
    option_text: str
    is_correct: bool


@dataclass(frozen=True)
class QAPair:
    """One question-answer unit at a single abstraction level.

    Multiple-choice pairs carry exactly four options with one marked
    correct; open-ended pairs carry ``answer_text`` instead. Option
    order is meaningful (evaluation letters A-D follow it) and is never
    normalized.
    """

    level: int
    question: str
    answer_mode: str = MULTIPLE_CHOICE
    options: tuple[OptionEntry, ...] = ()
    answer_text: str = ""
    reasoning: str = ""

    def correct_option(self) -> OptionEntry:
        """Return the single option marked correct (multiple-choice only)."""
        winners = [o for o in self.options if o.is_correct]
        if len(winners) != 1:
            raise ValueError(f"expected exactly 1 correct option, found {len(winners)}")
        return winners[0]

    def answer(self) -> str:
        """Ground-truth answer text regardless of answer mode."""
        if self.answer_mode == OPEN_ENDED:
            return self.answer_text
        return self.correct_option().option_text


@dataclass(frozen=True)
class ValidationVerdict:
    """Judge output realizing the lower-supports-higher check between levels."""

    is_helpful: bool
    confidence: float
    reasoning: str


@dataclass(frozen=True)
class BenchmarkItem:
    """A validated three-level multiple-choice chain bound to one image."""

    id: str
    image: ImageRef
    task: str
    aspect: str
    levels: tuple[QAPair, ...]
    provenance: Optional[dict[str, Any]] = None

    def level(self, value: int) -> QAPair:
        for qa in self.levels:
            if qa.level == value:
                return qa
        raise KeyError(f"level {value} absent")


def _validate_qa(qa: QAPair, where: str, violations: list[str]) -> None:
    if qa.level not in (1, 2, 3):
        violations.append(f"{where}: level must be 1, 2, or 3, got {qa.level!r}")
    if not qa.question or not qa.question.strip():
        violations.append(f"{where}: question is empty")
    if qa.answer_mode == MULTIPLE_CHOICE:
        if len(qa.options) != 4:
            violations.append(f"{where}: expected exactly 4 options, found {len(qa.options)}")
        correct = sum(1 for o in qa.options if o.is_correct)
        if len(qa.options) and correct != 1:
            violations.append(f"{where}: expected exactly 1 correct option, found {correct}")
        for i, opt in enumerate(qa.options):
            if not opt.option_text:
                violations.append(f"{where}.options[{i}]: option_text is empty")
            elif opt.option_text != opt.option_text.strip():
                violations.append(f"{where}.options[{i}]: option_text has surrounding whitespace")
        if qa.answer_text:
            violations.append(f"{where}: answer_text present on multiple_choice pair")
    elif qa.answer_mode == OPEN_ENDED:
        if qa.options:
            violations.append(f"{where}: options present on open_ended pair")
        if not qa.answer_text.strip():
            violations.append(f"{where}: answer_text is empty")
    else:
        violations.append(f"{where}: unknown answer_mode {qa.answer_mode!r}")


def validate_benchmark_item(item: BenchmarkItem) -> list[str]:
    """Check every structural invariant; return human-readable violations.

    An empty list means the item is well formed. Violations are data,
    not failures: loaders attach line numbers and decide what to do.
    """
    violations: list[str] = []
    if not item.id:
        violations.append("id: empty")
    if not item.image.path_or_uri:
        violations.append("image: empty path_or_uri")
    if item.task not in TASKS:
        violations.append(f"task: {item.task!r} not one of {list(TASKS)}")
    allowed = set(ASPECTS) | {UNSPECIFIED_ASPECT}
    if item.aspect not in allowed:
        violations.append(f"aspect: {item.aspect!r} not a known aspect tag")

    present = [qa.level for qa in item.levels]
    for lvl in (1, 2, 3):
        if lvl not in present:
            violations.append(f"levels: level {lvl} absent")
        elif present.count(lvl) > 1:
            violations.append(f"levels: level {lvl} appears {present.count(lvl)} times")
    if present != sorted(present):
        violations.append("levels: not sorted ascending by level")

    for i, qa in enumerate(item.levels):
        if qa.answer_mode != MULTIPLE_CHOICE:
            violations.append(f"levels[{i}]: benchmark pairs must be multiple_choice")
        _validate_qa(qa, f"levels[{i}]", violations)
    return violations


def make_multiple_choice(
    level: int,
    question: str,
    options: list[tuple[str, bool]] | list[OptionEntry],
    reasoning: str = "",
) -> QAPair:
    """Convenience constructor used by generators and tests."""
    entries = tuple(
        o if isinstance(o, OptionEntry) else OptionEntry(option_text=o[0], is_correct=o[1])
        for o in options
    )
    return QAPair(
        level=level,
        question=question,
        answer_mode=MULTIPLE_CHOICE,
        options=entries,
        reasoning=reasoning,
    )


def make_open_ended(level: int, question: str, answer: str, reasoning: str = "") -> QAPair:
    return QAPair(
        level=level,
        question=question,
        answer_mode=OPEN_ENDED,
        answer_text=answer,
        reasoning=reasoning,
    )
