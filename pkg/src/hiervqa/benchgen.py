"""Top-down chain construction: connotation first, then bridge, then perception.

Each stage below the top is validated by a judge call checking that the
lower level genuinely supports the higher one; a failed stage is discarded
and regenerated with the failure reason injected as guidance and the
sampling temperature escalated monotonically.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Any, Optional

from .client import Backend, ChatRequest, user_message
from .config import BenchConfig, GenerationConfig
from .core import (
    UNSPECIFIED_ASPECT,
    BenchmarkItem,
    ImageRef,
    QAPair,
    ValidationVerdict,
    level_name,
    make_multiple_choice,
)
from .parsing import ParseError, parse_mc_payload, parse_validation
from .templates import render, validation_template

log = logging.getLogger(__name__)

JUDGE_UNPARSEABLE = "judge response unparseable"


class GenerationContractError(Exception):
    """The generation response parsed but violated a stage contract."""


class ValidationParseError(Exception):
    """The judge response could not be parsed into a verdict."""


@dataclass(frozen=True)
class RawSourceItem:
    """A source record anchoring the top level of one chain."""

    image: ImageRef
    explanation: str
    question: str
    options: tuple[str, ...]
    task: str = "implication"
    aspect: str = UNSPECIFIED_ASPECT

    def __post_init__(self):
        if not self.question.strip():
            raise ValueError("question is empty")
        if not self.options:
            raise ValueError("options are empty")


@dataclass(frozen=True)
class RefinementState:
    """Where a stage's retry loop stands; temperature escalates with attempts."""

    attempt: int
    last_failure_reason: Optional[str] = None
    temperature: float = 0.0

    @classmethod
    def for_attempt(cls, attempt: int, config: BenchConfig, reason: str | None = None):
        return cls(
            attempt=attempt,
            last_failure_reason=reason,
            temperature=config.temperature_for_attempt(attempt),
        )


@dataclass(frozen=True)
class ChainFailure:
    """A stage exhausted its attempts; nothing was emitted for this source."""

    stage: int
    attempts: int
    last_reason: str


def _retry_guidance(reason: str | None) -> str:
    if not reason:
        return ""
    return f"IMPORTANT - a previous attempt failed validation for this reason: {reason} Avoid repeating this flaw."


def _qa_analysis(qa: QAPair) -> dict[str, Any]:
    return {
        "level": qa.level,
        "level_name": level_name(qa.level),
        "question": qa.question,
        "options": [{"option_text": o.option_text, "is_correct": o.is_correct} for o in qa.options],
        "reasoning": qa.reasoning,
    }


def _ask(backend: Backend, prompt: str, image: ImageRef, temperature: float, tag: str) -> str:
    request = ChatRequest(
        messages=(user_message(prompt, image),),
        temperature=temperature,
        tag=tag,
    )
    return backend.complete(request).text


def synthesize_l3(
    backend: Backend,
    raw: RawSourceItem,
    temperature: float = 0.7,
    overrides_dir=None,
) -> QAPair:
    """Build the level-3 pair: original question, 1 correct + 3 distractors.

    The response must keep the question identical and draw every option
    from the source option list; anything else is a contract violation.
    """
    json_data = json.dumps(
        {"explanation": raw.explanation, "question": raw.question, "options": list(raw.options)},
        ensure_ascii=False,
        indent=2,
    )
    prompt = render("bench_l3_analysis", {"json_data": json_data}, overrides_dir)
    text = _ask(backend, prompt, raw.image, temperature, tag="bench.l3")
    try:
        payload = parse_mc_payload(text, require_reasoning=True)
    except ParseError as exc:
        raise GenerationContractError(f"level 3 response unparseable: {exc}") from exc
    if payload.question != raw.question.strip():
        raise GenerationContractError("level 3 question text was altered")
    allowed = {o.strip() for o in raw.options}
    stray = [o.option_text for o in payload.options if o.option_text not in allowed]
    if stray:
        raise GenerationContractError(f"level 3 options not drawn from source options: {stray}")
    return make_multiple_choice(3, payload.question, list(payload.options), payload.reasoning)


def _generate_level(
    backend: Backend,
    image: ImageRef,
    template_id: str,
    bindings: dict[str, str],
    state: RefinementState,
    level: int,
    overrides_dir=None,
) -> QAPair:
    bindings = dict(bindings)
    bindings["retry_guidance"] = _retry_guidance(state.last_failure_reason)
    prompt = render(template_id, bindings, overrides_dir)
    text = _ask(backend, prompt, image, state.temperature, tag=f"bench.l{level}")
    try:
        payload = parse_mc_payload(text)
    except ParseError as exc:
        raise GenerationContractError(f"level {level} response unparseable: {exc}") from exc
    return make_multiple_choice(level, payload.question, list(payload.options), payload.reasoning)


def formulate_l2(
    backend: Backend,
    image: ImageRef,
    l3: QAPair,
    state: RefinementState,
    explanation: str = "",
    overrides_dir=None,
) -> QAPair:
    if l3.level != 3:
        raise ValueError("formulate_l2 requires a level-3 pair")
    bindings = {
        "explanation_text": json.dumps(explanation, ensure_ascii=False),
        "level_3_data": json.dumps(_qa_analysis(l3), ensure_ascii=False),
    }
    return _generate_level(backend, image, "bench_l2_gen", bindings, state, 2, overrides_dir)


def ground_l1(
    backend: Backend,
    image: ImageRef,
    l3: QAPair,
    l2: QAPair,
    state: RefinementState,
    explanation: str = "",
    overrides_dir=None,
) -> QAPair:
    if l3.level != 3 or l2.level != 2:
        raise ValueError("ground_l1 requires level-3 and level-2 pairs")
    bindings = {
        "explanation_text": json.dumps(explanation, ensure_ascii=False),
        "level_3_data": json.dumps(_qa_analysis(l3), ensure_ascii=False),
        "level_2_data": json.dumps(_qa_analysis(l2), ensure_ascii=False),
    }
    return _generate_level(backend, image, "bench_l1_gen", bindings, state, 1, overrides_dir)


def validate_support(
    backend: Backend,
    image: ImageRef,
    lower: QAPair,
    higher: QAPair,
    temperature: float = 0.0,
    overrides_dir=None,
) -> ValidationVerdict:
    """Ask the judge whether the lower level supports the higher one."""
    if lower.level + 1 != higher.level:
        raise ValueError(f"levels must be consecutive, got {lower.level} and {higher.level}")
    lo, hi = lower.level, higher.level
    bindings = {
        f"question_l{lo}": lower.question,
        f"answer_l{lo}": lower.answer(),
        f"question_l{hi}": higher.question,
        f"answer_l{hi}": higher.answer(),
    }
    prompt = render(validation_template(lo), bindings, overrides_dir)
    text = _ask(backend, prompt, image, temperature, tag=f"bench.val_l{lo}_l{hi}")
    try:
        return parse_validation(text)
    except ParseError as exc:
        raise ValidationParseError(str(exc)) from exc


def _verdict_record(verdict: ValidationVerdict) -> dict[str, Any]:
    return {
        "is_helpful": verdict.is_helpful,
        "confidence": verdict.confidence,
        "reasoning": verdict.reasoning,
    }


def _run_stage(
    generate,
    validate,
    config: BenchConfig,
    stage: int,
) -> tuple[QAPair | None, list[dict[str, Any]], str]:
    """Shared retry loop: generate, validate, escalate until pass or budget."""
    attempts: list[dict[str, Any]] = []
    reason: str | None = None
    for attempt in range(config.max_validation_attempts):
        state = RefinementState.for_attempt(attempt, config, reason)
        record: dict[str, Any] = {"attempt": attempt, "temperature": state.temperature}
        try:
            qa = generate(state)
        except GenerationContractError as exc:
            reason = str(exc)
            record.update(outcome="generation_failed", reason=reason)
            attempts.append(record)
            continue
        try:
            verdict = validate(qa)
        except ValidationParseError:
            reason = JUDGE_UNPARSEABLE
            record.update(outcome="validation_unparseable", reason=reason)
            attempts.append(record)
            continue
        record["verdict"] = _verdict_record(verdict)
        if verdict.is_helpful:
            record["outcome"] = "passed"
            attempts.append(record)
            return qa, attempts, ""
        reason = verdict.reasoning
        record.update(outcome="validation_failed", reason=reason)
        attempts.append(record)
    log.info("stage %d exhausted %d attempts", stage, config.max_validation_attempts)
    return None, attempts, reason or "no attempt recorded"


def build_chain(
    backend: Backend,
    raw: RawSourceItem,
    config: GenerationConfig,
    item_id: str = "",
    overrides_dir=None,
) -> BenchmarkItem | ChainFailure:
    """Run the full three-stage pipeline for one source item.

    Returns a BenchmarkItem whose provenance records every attempt
    (temperatures, failure reasons, judge verdicts) or a ChainFailure
    naming the stage that exhausted its attempts. Failed candidates are
    discarded; only validated pairs appear in the emitted item.
    """
    bench = config.bench
    provenance: dict[str, Any] = {}

    try:
        l3 = synthesize_l3(backend, raw, temperature=bench.base_temperature, overrides_dir=overrides_dir)
    except GenerationContractError as exc:
        return ChainFailure(stage=1, attempts=1, last_reason=str(exc))
    provenance["l3"] = {"temperature": bench.base_temperature, "outcome": "passed"}

    l2, attempts, reason = _run_stage(
        generate=lambda s: formulate_l2(backend, raw.image, l3, s, raw.explanation, overrides_dir),
        validate=lambda qa: validate_support(
            backend, raw.image, qa, l3, bench.validation_temperature, overrides_dir
        ),
        config=bench,
        stage=2,
    )
    provenance["l2"] = {"attempts": attempts}
    if l2 is None:
        return ChainFailure(stage=2, attempts=len(attempts), last_reason=reason)

    l1, attempts, reason = _run_stage(
        generate=lambda s: ground_l1(backend, raw.image, l3, l2, s, raw.explanation, overrides_dir),
        validate=lambda qa: validate_support(
            backend, raw.image, qa, l2, bench.validation_temperature, overrides_dir
        ),
        config=bench,
        stage=3,
    )
    provenance["l1"] = {"attempts": attempts}
    if l1 is None:
        return ChainFailure(stage=3, attempts=len(attempts), last_reason=reason)

    return BenchmarkItem(
        id=item_id or raw.image.path_or_uri,
        image=raw.image,
        task=raw.task,
        aspect=raw.aspect,
        levels=(l1, l2, l3),
        provenance=provenance,
    )
