"""Parsers for the JSON response contracts of each prompt.

Model output is prose-tolerant: :func:`extract_json` finds the first
balanced JSON object anywhere in the text (code fences included) and the
typed parsers validate fields, ranges, and per-level answer word caps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .core import LEVEL_WORD_CAPS, OptionEntry, ValidationVerdict


class ParseError(Exception):
    pass


class NoJsonFound(ParseError):
    pass


class MalformedJson(ParseError):
    def __init__(self, offset: int):
        super().__init__(f"braces present but no balanced JSON object parses (first '{{' at byte {offset})")
        self.offset = offset


class SchemaError(ParseError):
    def __init__(self, field: str, detail: str = ""):
        super().__init__(f"field {field!r} {detail or 'missing or wrong type'}")
        self.field = field


class RangeError(ParseError):
    def __init__(self, field: str, value: float):
        super().__init__(f"field {field!r} out of [0, 1]: {value}")
        self.field = field
        self.value = value


class CapExceeded(ParseError):
    def __init__(self, level: int, count: int):
        cap = LEVEL_WORD_CAPS[level]
        super().__init__(f"level {level} answer has {count} words, cap is {cap}")
        self.level = int(level)
        self.count = count


@dataclass(frozen=True)
class GeneratedNodePayload:
    """An open-ended question/answer/reasoning triple from a generation call."""

    question: str
    answer: str
    reasoning: str


@dataclass(frozen=True)
class EvaluationPayload:
    quality_score: float
    reasoning: str


@dataclass(frozen=True)
class McPayload:
    """A multiple-choice generation payload: question + 4 options, 1 correct."""

    question: str
    options: tuple[OptionEntry, ...]
    reasoning: str = ""


def extract_json(text: str) -> dict:
    """Return the first balanced top-level JSON object embedded in text.

    Surrounding prose, code fences, and trailing text are ignored. Raises
    NoJsonFound when no '{' exists and MalformedJson (with the byte offset
    of the first '{') when braces never parse.
    """
    decoder = json.JSONDecoder()
    first = text.find("{")
    if first < 0:
        raise NoJsonFound("no JSON object in response")
    idx = first
    while idx >= 0:
        try:
            value, _ = decoder.raw_decode(text, idx)
        except json.JSONDecodeError:
            idx = text.find("{", idx + 1)
            continue
        if isinstance(value, dict):
            return value
        idx = text.find("{", idx + 1)
    raise MalformedJson(first)


def _require_str(data: dict, field: str, allow_empty: bool = False) -> str:
    value = data.get(field)
    if not isinstance(value, str):
        raise SchemaError(field)
    if not allow_empty and not value.strip():
        raise SchemaError(field, "is empty")
    return value


def _word_count(text: str) -> int:
    return len(text.split())


def parse_node_payload(text: str, level: int) -> GeneratedNodePayload:
    """Parse a tree-search generation response and enforce the level's word cap."""
    data = extract_json(text)
    question = _require_str(data, "question")
    answer = _require_str(data, "answer")
    reasoning = _require_str(data, "reasoning", allow_empty=True)
    count = _word_count(answer)
    if count > LEVEL_WORD_CAPS[level]:
        raise CapExceeded(level, count)
    return GeneratedNodePayload(question=question, answer=answer, reasoning=reasoning)


def parse_validation(text: str) -> ValidationVerdict:
    data = extract_json(text)
    is_helpful = data.get("is_helpful")
    if not isinstance(is_helpful, bool):
        raise SchemaError("is_helpful", "must be a boolean")
    confidence = data.get("confidence")
    if isinstance(confidence, bool) or not isinstance(confidence, (int, float)):
        raise SchemaError("confidence", "must be a number")
    if not 0.0 <= confidence <= 1.0:
        raise RangeError("confidence", float(confidence))
    reasoning = _require_str(data, "reasoning", allow_empty=True)
    return ValidationVerdict(is_helpful=is_helpful, confidence=float(confidence), reasoning=reasoning)


def parse_evaluation(text: str) -> EvaluationPayload:
    data = extract_json(text)
    score = data.get("quality_score")
    if isinstance(score, bool) or not isinstance(score, (int, float)):
        raise SchemaError("quality_score", "must be a number")
    if not 0.0 <= score <= 1.0:
        raise RangeError("quality_score", float(score))
    reasoning = data.get("reasoning")
    if not isinstance(reasoning, str):
        raise SchemaError("reasoning")
    return EvaluationPayload(quality_score=float(score), reasoning=reasoning)


def parse_mc_payload(text: str, require_reasoning: bool = False) -> McPayload:
    """Parse a benchmark-generation response: 4 options, exactly 1 correct."""
    data = extract_json(text)
    question = _require_str(data, "question").strip()
    raw_options = data.get("options")
    if not isinstance(raw_options, list):
        raise SchemaError("options", "must be an array")
    if len(raw_options) != 4:
        raise SchemaError("options", f"must have exactly 4 entries, found {len(raw_options)}")
    entries = []
    for i, row in enumerate(raw_options):
        if not isinstance(row, dict):
            raise SchemaError(f"options[{i}]", "must be an object")
        opt_text = row.get("option_text")
        if not isinstance(opt_text, str) or not opt_text.strip():
            raise SchemaError(f"options[{i}].option_text")
        is_correct = row.get("is_correct")
        if not isinstance(is_correct, bool):
            raise SchemaError(f"options[{i}].is_correct", "must be a boolean")
        entries.append(OptionEntry(option_text=opt_text.strip(), is_correct=is_correct))
    correct = sum(1 for e in entries if e.is_correct)
    if correct != 1:
        raise SchemaError("options", f"must mark exactly 1 correct, found {correct}")
    reasoning = data.get("reasoning", "")
    if require_reasoning:
        reasoning = _require_str(data, "reasoning")
    elif not isinstance(reasoning, str):
        raise SchemaError("reasoning")
    return McPayload(question=question, options=tuple(entries), reasoning=reasoning.strip())
