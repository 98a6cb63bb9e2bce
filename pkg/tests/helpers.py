"""Shared builders for mock payloads and well-formed domain objects."""

from __future__ import annotations

import json

from hiervqa.core import BenchmarkItem, ImageRef, make_multiple_choice


def mc_options(correct_idx: int = 0, prefix: str = "option"):
    return [(f"{prefix} {i}", i == correct_idx) for i in range(4)]


def make_item(
    item_id: str = "sample-0001",
    task: str = "implication",
    aspect: str = "metaphor",
    correct: tuple[int, int, int] = (0, 1, 2),
    image: str = "images/sample.png",
) -> BenchmarkItem:
    levels = tuple(
        make_multiple_choice(
            lvl,
            f"Level {lvl} question about the image?",
            mc_options(correct[lvl - 1], prefix=f"L{lvl} option"),
            reasoning=f"level {lvl} rationale",
        )
        for lvl in (1, 2, 3)
    )
    return BenchmarkItem(
        id=item_id,
        image=ImageRef(path_or_uri=image),
        task=task,
        aspect=aspect,
        levels=levels,
    )


def node_json(question: str, answer: str, reasoning: str = "fits the level") -> str:
    return json.dumps({"question": question, "answer": answer, "reasoning": reasoning})


def eval_json(score: float, reasoning: str = "adequate quality") -> str:
    return json.dumps({"quality_score": score, "reasoning": reasoning})


def validation_json(is_helpful: bool, confidence: float = 0.9, reasoning: str = "solid support") -> str:
    return json.dumps({"is_helpful": is_helpful, "confidence": confidence, "reasoning": reasoning})


def mc_json(
    question: str,
    option_texts: list[str],
    correct_idx: int = 0,
    level: int = 2,
    reasoning: str | None = None,
) -> str:
    payload = {
        "level": level,
        "level_name": "x",
        "question": question,
        "options": [
            {"option_text": text, "is_correct": i == correct_idx}
            for i, text in enumerate(option_texts)
        ],
    }
    if reasoning is not None:
        payload["reasoning"] = reasoning
    return json.dumps(payload)
