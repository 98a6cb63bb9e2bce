"""Bit-stable file formats.

Every writer emits UTF-8 JSON/JSONL with a fixed key order and atomic
replace, so identical in-memory states produce identical bytes. Every
record or document carries a ``schema_version`` field and readers reject
unknown versions. See FORMATS.md for annotated examples.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

from .benchgen import RawSourceItem
from .core import (
    BenchmarkItem,
    ImageRef,
    OptionEntry,
    QAPair,
    level_name,
    make_multiple_choice,
    make_open_ended,
    validate_benchmark_item,
)
from .evaluate import ChainOutcome, LevelOutcome
from .mcts import MctsNode, MctsTree, PathRecord

SCHEMA_VERSION = 1


class FormatError(ValueError):
    def __init__(self, line: int, violation: str):
        super().__init__(f"line {line}: {violation}")
        self.line = line
        self.violation = violation


class SchemaVersionMismatch(ValueError):
    pass


class DanglingNodeId(KeyError):
    pass


def _atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False)


def write_json(obj: Any, path: str | Path) -> None:
    _atomic_write(path, json.dumps(obj, ensure_ascii=False, indent=2) + "\n")


def write_jsonl(records: Iterable[dict], path: str | Path) -> None:
    _atomic_write(path, "".join(_dumps(r) + "\n" for r in records))


def _check_version(record: dict, line: int) -> None:
    version = record.get("schema_version")
    if version != SCHEMA_VERSION:
        raise FormatError(line, f"unsupported schema_version {version!r}")


def _iter_jsonl(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(line_no, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(record, dict):
                raise FormatError(line_no, "record must be a JSON object")
            yield line_no, record


# -- benchmark files ---------------------------------------------------------

def _image_record(image: ImageRef) -> dict:
    return {"path_or_uri": image.path_or_uri, "media_type": image.media_type}


def _image_from(value: Any, line: int) -> ImageRef:
    if isinstance(value, str):
        return ImageRef(path_or_uri=value)
    if isinstance(value, dict):
        return ImageRef(
            path_or_uri=str(value.get("path_or_uri", "")),
            media_type=str(value.get("media_type", "image/png")),
        )
    raise FormatError(line, "image must be a string or object")


def benchmark_record(item: BenchmarkItem) -> dict:
    record = {
        "schema_version": SCHEMA_VERSION,
        "id": item.id,
        "image": _image_record(item.image),
        "task": item.task,
        "aspect": item.aspect,
        "levels": [
            {
                "level": qa.level,
                "level_name": level_name(qa.level),
                "question": qa.question,
                "options": [
                    {"option_text": o.option_text, "is_correct": o.is_correct}
                    for o in qa.options
                ],
                "reasoning": qa.reasoning,
            }
            for qa in item.levels
        ],
    }
    if item.provenance is not None:
        record["provenance"] = item.provenance
    return record


def _qa_from_record(row: dict, line: int) -> QAPair:
    if not isinstance(row, dict):
        raise FormatError(line, "levels entries must be objects")
    options = row.get("options", [])
    if not isinstance(options, list):
        raise FormatError(line, "options must be an array")
    entries = [
        OptionEntry(
            option_text=str(o.get("option_text", "")) if isinstance(o, dict) else "",
            is_correct=bool(o.get("is_correct", False)) if isinstance(o, dict) else False,
        )
        for o in options
    ]
    return make_multiple_choice(
        level=int(row.get("level", 0)),
        question=str(row.get("question", "")),
        options=entries,
        reasoning=str(row.get("reasoning", "")),
    )


def item_from_record(record: dict, line: int = 0) -> BenchmarkItem:
    levels = record.get("levels")
    if not isinstance(levels, list):
        raise FormatError(line, "levels must be an array")
    item = BenchmarkItem(
        id=str(record.get("id", "")),
        image=_image_from(record.get("image", ""), line),
        task=str(record.get("task", "")),
        aspect=str(record.get("aspect", "")),
        levels=tuple(_qa_from_record(row, line) for row in levels),
        provenance=record.get("provenance"),
    )
    violations = validate_benchmark_item(item)
    if violations:
        raise FormatError(line, "; ".join(violations))
    return item


def load_benchmark(path: str | Path) -> list[BenchmarkItem]:
    """Parse a benchmark JSONL file; every record must validate cleanly."""
    items: list[BenchmarkItem] = []
    seen: set[str] = set()
    for line_no, record in _iter_jsonl(path):
        _check_version(record, line_no)
        item = item_from_record(record, line_no)
        if item.id in seen:
            raise FormatError(line_no, f"duplicate id {item.id!r}")
        seen.add(item.id)
        items.append(item)
    return items


def save_benchmark(items: Sequence[BenchmarkItem], path: str | Path) -> None:
    ordered = sorted(items, key=lambda i: i.id)
    write_jsonl((benchmark_record(i) for i in ordered), path)


# -- raw sources -------------------------------------------------------------

def load_raw_sources(path: str | Path) -> list[RawSourceItem]:
    """Input anchors: {image, explanation, question, options[], task?, aspect?}."""
    sources: list[RawSourceItem] = []
    for line_no, record in _iter_jsonl(path):
        options = record.get("options")
        if not isinstance(options, list) or not options:
            raise FormatError(line_no, "options must be a non-empty array")
        try:
            sources.append(
                RawSourceItem(
                    image=_image_from(record.get("image", ""), line_no),
                    explanation=str(record.get("explanation", "")),
                    question=str(record.get("question", "")),
                    options=tuple(str(o) for o in options),
                    task=str(record.get("task", "implication")),
                    aspect=str(record.get("aspect", "unspecified")),
                )
            )
        except ValueError as exc:
            raise FormatError(line_no, str(exc)) from exc
    return sources


# -- tree checkpoints --------------------------------------------------------

def _node_record(node: MctsNode) -> dict:
    return {
        "id": node.id,
        "parent_id": node.parent_id,
        "level": node.level,
        "question": node.qa.question if node.qa else None,
        "answer": node.qa.answer_text if node.qa else None,
        "reasoning": node.qa.reasoning if node.qa else None,
        "quality_score": node.quality_score,
        "visit_count": node.visit_count,
        "mean_reward": node.mean_reward,
        "children": list(node.children),
    }


def checkpoint_tree(tree: MctsTree, path: str | Path, config: dict | None = None) -> None:
    """Write a replayable snapshot: config, nodes sorted by id, event log."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config": config or {},
        "level_capacities": list(tree.level_capacities),
        "root_id": tree.root_id,
        "per_level_counts": list(tree.per_level_counts),
        "nodes": [_node_record(tree.nodes[i]) for i in sorted(tree.nodes)],
        "event_log": tree.event_log,
    }
    write_json(doc, path)


def restore_tree(path: str | Path) -> MctsTree:
    """Rebuild a tree structurally equal to the checkpointed one."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict) or doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"{path}: expected schema_version {SCHEMA_VERSION}, "
            f"found {doc.get('schema_version') if isinstance(doc, dict) else type(doc).__name__}"
        )
    tree = MctsTree(level_capacities=tuple(doc["level_capacities"]))
    tree.root_id = doc["root_id"]
    tree.per_level_counts = list(doc["per_level_counts"])
    tree.event_log = list(doc["event_log"])
    for row in doc["nodes"]:
        qa = None
        if row["question"] is not None:
            qa = make_open_ended(
                row["level"], row["question"], row["answer"], row.get("reasoning") or ""
            )
        tree.nodes[row["id"]] = MctsNode(
            id=row["id"],
            level=row["level"],
            parent_id=row["parent_id"],
            qa=qa,
            quality_score=row["quality_score"],
            visit_count=row["visit_count"],
            mean_reward=row["mean_reward"],
            children=list(row["children"]),
        )
    tree._next_id = max(tree.nodes) + 1
    counts = [0, 0, 0]
    for node in tree.nodes.values():
        if node.level > 0:
            counts[node.level - 1] += 1
    if counts != tree.per_level_counts:
        raise SchemaVersionMismatch(f"{path}: per_level_counts do not match stored nodes")
    return tree


# -- instruction-tuning export -----------------------------------------------

@dataclass(frozen=True)
class SftConversation:
    """Three user/assistant turn pairs, levels 1 to 3, on one image."""

    image: ImageRef
    turns: tuple[tuple[str, str], ...]


def export_sft(paths: Sequence[PathRecord], tree: MctsTree, image: ImageRef) -> list[SftConversation]:
    """One conversation per extracted path, turns in ascending level order."""
    conversations = []
    for record in paths:
        turns = []
        for node_id in record.node_ids:
            node = tree.nodes.get(node_id)
            if node is None or node.qa is None:
                raise DanglingNodeId(node_id)
            turns.append((node.qa.question, node.qa.answer_text))
        conversations.append(SftConversation(image=image, turns=tuple(turns)))
    return conversations


def conversation_records(conversations: Sequence[SftConversation], flat: bool = False):
    """Serialize conversations; flat mode yields one record per QA pair.

    The image binds to the whole conversation (first user turn carries it
    when rendered for training)."""
    for conv in conversations:
        if flat:
            for level, (question, answer) in enumerate(conv.turns, 1):
                yield {
                    "schema_version": SCHEMA_VERSION,
                    "image": _image_record(conv.image),
                    "level": level,
                    "question": question,
                    "answer": answer,
                }
        else:
            messages = []
            for question, answer in conv.turns:
                messages.append({"role": "user", "content": question})
                messages.append({"role": "assistant", "content": answer})
            yield {
                "schema_version": SCHEMA_VERSION,
                "image": _image_record(conv.image),
                "messages": messages,
            }


def write_conversations(
    conversations: Sequence[SftConversation], path: str | Path, flat: bool = False
) -> None:
    write_jsonl(conversation_records(conversations, flat=flat), path)


# -- evaluation outcomes -----------------------------------------------------

def outcome_record(chain: ChainOutcome) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "item_id": chain.item_id,
        "task": chain.task,
        "aspect": chain.aspect,
        "setting": chain.setting,
        "outcomes": [
            {
                "level": o.level,
                "raw_response": o.raw_response,
                "parsed_choice": o.parsed_choice,
                "correct": o.correct,
            }
            for o in chain.outcomes
        ],
        "full_correct": chain.full_correct,
    }


def outcome_from_record(record: dict, line: int = 0) -> ChainOutcome:
    raw = record.get("outcomes")
    if not isinstance(raw, list) or len(raw) != 3:
        raise FormatError(line, "outcomes must be an array of 3 entries")
    outcomes = tuple(
        LevelOutcome(
            level=int(o["level"]),
            raw_response=str(o["raw_response"]),
            parsed_choice=o["parsed_choice"],
            correct=bool(o["correct"]),
        )
        for o in raw
    )
    return ChainOutcome(
        item_id=str(record.get("item_id", "")),
        task=str(record.get("task", "")),
        aspect=str(record.get("aspect", "")),
        setting=str(record.get("setting", "")),
        outcomes=outcomes,
        full_correct=bool(record.get("full_correct")),
    )


def load_outcomes(path: str | Path) -> list[ChainOutcome]:
    chains = []
    for line_no, record in _iter_jsonl(path):
        _check_version(record, line_no)
        chains.append(outcome_from_record(record, line_no))
    return chains


def append_outcome(chain: ChainOutcome, path: str | Path) -> None:
    """Incremental checkpoint: one line per completed chain."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(_dumps(outcome_record(chain)) + "\n")
