"""Leveled evaluation of a model on benchmark chains.

Two settings: "base" asks the three levels independently; "context"
prepends the earlier questions together with the model's own predictions
(never the ground truth) before the level-2 and level-3 questions. Answers
are extracted with a rule-based parser; anything unparseable counts as
incorrect.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Optional, Sequence

from .client import Backend, ChatRequest, user_message
from .core import BenchmarkItem, OptionEntry, QAPair, TASKS
from .templates import render

SETTINGS = ("base", "context")
LETTERS = "ABCD"


class EmptyInput(ValueError):
    pass


class MissingTask(ValueError):
    pass


@dataclass(frozen=True)
class LevelOutcome:
    level: int
    raw_response: str
    parsed_choice: Optional[str]
    correct: bool


@dataclass(frozen=True)
class ChainOutcome:
    item_id: str
    task: str
    aspect: str
    setting: str
    outcomes: tuple[LevelOutcome, LevelOutcome, LevelOutcome]
    full_correct: bool


@dataclass(frozen=True)
class TaskMetrics:
    """Per-task accuracies (percentages, unrounded) plus per-aspect splits."""

    task: str
    n_items: int
    acc_perc: float
    acc_bridge: float
    acc_conn: float
    acc_full: float
    per_aspect: dict[str, dict[str, float]]


def round_half_up(value: float, ndigits: int = 2) -> float:
    """Reporting rounding; Python's round() would round half to even."""
    q = Decimal(1).scaleb(-ndigits)
    return float(Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_UP))


# Rule 1: a standalone letter at the start of the response, optionally
# wrapped as "(A)", "A." or "A:".
_LEADING_LETTER = re.compile(r"^\s*[\(\[]?([A-D])[\)\]]?(?=[\s.:,;)\]]|$)")
# Rule 2: "answer is X" / "Answer: X", case-insensitive.
_ANSWER_IS = re.compile(
    r"\banswer\s*(?:is\b\s*:?|:)\s*[\(\[]?([A-Da-d])[\)\]]?(?![A-Za-z])", re.IGNORECASE
)


def parse_choice(text: str, options: Sequence[OptionEntry]) -> Optional[str]:
    """Extract the chosen letter; None means unparseable.

    Rules apply in order and the first match wins: leading standalone
    letter, an "answer is X" phrase, then unique containment of one
    option's full text (case-insensitive).
    """
    m = _LEADING_LETTER.match(text)
    if m:
        return m.group(1)
    m = _ANSWER_IS.search(text)
    if m:
        return m.group(1).upper()
    lowered = text.lower()
    hits = [i for i, opt in enumerate(options) if opt.option_text.lower() in lowered]
    if len(hits) == 1:
        return LETTERS[hits[0]]
    return None


def _question_bindings(qa: QAPair) -> dict[str, str]:
    return {
        "question": qa.question,
        "option_a": qa.options[0].option_text,
        "option_b": qa.options[1].option_text,
        "option_c": qa.options[2].option_text,
        "option_d": qa.options[3].option_text,
    }


def ask_level(
    backend: Backend,
    image,
    qa: QAPair,
    context_block: Optional[str] = None,
    overrides_dir=None,
) -> LevelOutcome:
    """Pose one level's question at temperature 0 and grade the reply."""
    bindings = _question_bindings(qa)
    if context_block is None:
        prompt = render("eval_question_base", bindings, overrides_dir)
    else:
        bindings["context_block"] = context_block
        prompt = render("eval_question_context", bindings, overrides_dir)
    request = ChatRequest(
        messages=(user_message(prompt, image),),
        temperature=0.0,
        tag=f"eval.l{qa.level}",
    )
    text = backend.complete(request).text
    choice = parse_choice(text, qa.options)
    correct = choice is not None and qa.options[LETTERS.index(choice)].is_correct
    return LevelOutcome(level=qa.level, raw_response=text, parsed_choice=choice, correct=correct)


def _context_entry(qa: QAPair, outcome: LevelOutcome) -> str:
    if outcome.parsed_choice is not None:
        idx = LETTERS.index(outcome.parsed_choice)
        answer = f"{outcome.parsed_choice}. {qa.options[idx].option_text}"
    else:
        answer = outcome.raw_response.strip()
    return f"Level {qa.level} question: {qa.question}\nYour answer: {answer}"


def evaluate_chain(
    backend: Backend,
    item: BenchmarkItem,
    setting: str,
    overrides_dir=None,
) -> ChainOutcome:
    """Evaluate levels 1 to 3 in order; context mode feeds each level the
    model's own earlier predictions, wrong or not."""
    if setting not in SETTINGS:
        raise ValueError(f"setting must be one of {SETTINGS}")
    outcomes: list[LevelOutcome] = []
    context_entries: list[str] = []
    for level in (1, 2, 3):
        qa = item.level(level)
        block = None
        if setting == "context" and context_entries:
            block = "\n\n".join(context_entries)
        outcome = ask_level(backend, item.image, qa, context_block=block, overrides_dir=overrides_dir)
        outcomes.append(outcome)
        if setting == "context":
            context_entries.append(_context_entry(qa, outcome))
    return ChainOutcome(
        item_id=item.id,
        task=item.task,
        aspect=item.aspect,
        setting=setting,
        outcomes=tuple(outcomes),
        full_correct=all(o.correct for o in outcomes),
    )


def _accuracies(outcomes: Sequence[ChainOutcome]) -> dict[str, float]:
    n = len(outcomes)
    per_level = [0, 0, 0]
    full = 0
    for chain in outcomes:
        for i, lvl in enumerate(chain.outcomes):
            per_level[i] += 1 if lvl.correct else 0
        full += 1 if chain.full_correct else 0
    return {
        "n_items": n,
        "acc_perc": 100.0 * per_level[0] / n,
        "acc_bridge": 100.0 * per_level[1] / n,
        "acc_conn": 100.0 * per_level[2] / n,
        "acc_full": 100.0 * full / n,
    }


def compute_task_metrics(outcomes: Sequence[ChainOutcome]) -> TaskMetrics:
    """Aggregate accuracies for one task; values stay unrounded here and
    are rounded half-up only at report time."""
    if not outcomes:
        raise EmptyInput("no outcomes to aggregate")
    tasks = {c.task for c in outcomes}
    if len(tasks) != 1:
        raise ValueError(f"outcomes span multiple tasks: {sorted(tasks)}")
    overall = _accuracies(outcomes)
    per_aspect: dict[str, dict[str, float]] = {}
    for aspect in sorted({c.aspect for c in outcomes}):
        per_aspect[aspect] = _accuracies([c for c in outcomes if c.aspect == aspect])
    return TaskMetrics(
        task=outcomes[0].task,
        n_items=int(overall["n_items"]),
        acc_perc=overall["acc_perc"],
        acc_bridge=overall["acc_bridge"],
        acc_conn=overall["acc_conn"],
        acc_full=overall["acc_full"],
        per_aspect=per_aspect,
    )


def overall_score(metrics: Iterable[TaskMetrics]) -> float:
    """Unweighted mean of the three per-task full-chain accuracies."""
    by_task = {m.task: m for m in metrics}
    missing = [t for t in TASKS if t not in by_task]
    if missing:
        raise MissingTask(f"missing tasks: {', '.join(missing)}")
    return sum(by_task[t].acc_full for t in TASKS) / len(TASKS)


def metrics_report(metrics_by_task: dict[str, TaskMetrics]) -> dict:
    """Report-ready dict: accuracies rounded half-up to 2 decimals, tasks
    in canonical order, overall score present only when all tasks are."""
    per_task = {}
    per_aspect = {}
    for task in TASKS:
        m = metrics_by_task.get(task)
        if m is None:
            continue
        per_task[task] = {
            "n_items": m.n_items,
            "acc_perc": round_half_up(m.acc_perc),
            "acc_bridge": round_half_up(m.acc_bridge),
            "acc_conn": round_half_up(m.acc_conn),
            "acc_full": round_half_up(m.acc_full),
        }
        per_aspect[task] = {
            aspect: {
                "n_items": int(vals["n_items"]),
                "acc_perc": round_half_up(vals["acc_perc"]),
                "acc_bridge": round_half_up(vals["acc_bridge"]),
                "acc_conn": round_half_up(vals["acc_conn"]),
                "acc_full": round_half_up(vals["acc_full"]),
            }
            for aspect, vals in m.per_aspect.items()
        }
    missing = [t for t in TASKS if t not in metrics_by_task]
    score = None
    if not missing:
        score = round_half_up(overall_score(metrics_by_task.values()))
    return {
        "schema_version": 1,
        "per_task": per_task,
        "per_aspect": per_aspect,
        "overall_score": score,
        "missing_tasks": missing,
    }


def format_report_table(report: dict) -> str:
    """Plain-text table: one row per task, four accuracy columns, then the
    aggregate score (or which task is missing)."""
    header = f"{'Task':<14}{'N':>6}{'Acc_perc':>10}{'Acc_bridge':>12}{'Acc_conn':>10}{'Acc_full':>10}"
    lines = [header, "-" * len(header)]
    for task, row in report["per_task"].items():
        lines.append(
            f"{task:<14}{row['n_items']:>6}"
            f"{row['acc_perc']:>10.2f}{row['acc_bridge']:>12.2f}"
            f"{row['acc_conn']:>10.2f}{row['acc_full']:>10.2f}"
        )
    if report["overall_score"] is not None:
        lines.append(f"Score: {report['overall_score']:.2f}")
    else:
        lines.append(f"Score: unavailable (missing {', '.join(report['missing_tasks'])})")
    return "\n".join(lines) + "\n"
