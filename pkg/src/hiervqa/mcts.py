"""Bottom-up tree search over hierarchical QA chains.

A virtual root expands into level-1 perception questions, those into
level-2 connections, and those into level-3 reasoning questions. Selection
follows the upper-confidence-bound rule; candidate children are generated
in batches, judge-scored, and admitted only if they clear the quality
threshold, differ enough from existing siblings, and fit the per-level
capacity. Admitted scores backpropagate to the root, and complete paths
are ranked by mean node quality for export.
"""

from __future__ import annotations

import logging
import math
import string
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

from .client import Backend, ChatRequest, ClientError, user_message
from .config import MctsConfig
from .core import ImageRef, QAPair, make_open_ended
from .parsing import GeneratedNodePayload, ParseError, parse_evaluation, parse_node_payload
from .templates import (
    DIFFICULTY_GUIDANCE,
    LEVEL_DESCRIPTIONS,
    mcts_generation_template,
    render,
)

log = logging.getLogger(__name__)

ROOT_ID = 0
MAX_LEVEL = 3


class NoExpandableNode(Exception):
    """Every level is at capacity along the selection path."""


class RejectionReason(str, Enum):
    BELOW_QUALITY_THRESHOLD = "below_quality_threshold"
    SIBLING_TOO_SIMILAR = "sibling_too_similar"
    LEVEL_CAPACITY_FULL = "level_capacity_full"
    PARSE_FAILURE = "parse_failure"


@dataclass
class MctsNode:
    id: int
    level: int
    parent_id: Optional[int] = None
    qa: Optional[QAPair] = None
    quality_score: Optional[float] = None
    visit_count: int = 0
    mean_reward: Optional[float] = None
    children: list[int] = field(default_factory=list)

    @property
    def is_root(self) -> bool:
        return self.id == ROOT_ID


@dataclass
class MctsTree:
    """Search state plus an append-only event log that replays to it."""

    level_capacities: tuple[int, int, int]
    nodes: dict[int, MctsNode] = field(default_factory=dict)
    root_id: int = ROOT_ID
    per_level_counts: list[int] = field(default_factory=lambda: [0, 0, 0])
    event_log: list[dict[str, Any]] = field(default_factory=list)
    _next_id: int = field(default=1, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @classmethod
    def new(cls, level_capacities) -> "MctsTree":
        tree = cls(level_capacities=tuple(level_capacities))
        tree.nodes[ROOT_ID] = MctsNode(id=ROOT_ID, level=0)
        return tree

    def log_event(self, kind: str, payload: dict[str, Any]) -> None:
        self.event_log.append({"kind": kind, "payload": payload})

    def level_count(self, level: int) -> int:
        return self.per_level_counts[level - 1]

    def is_expandable(self, node: MctsNode) -> bool:
        """A node can take children while its child level has spare capacity."""
        if node.level >= MAX_LEVEL:
            return False
        child_level = node.level + 1
        return self.level_count(child_level) < self.level_capacities[child_level - 1]

    def insert_child(self, parent_id: int, qa: QAPair, score: float) -> MctsNode:
        with self._lock:
            parent = self.nodes[parent_id]
            node = MctsNode(
                id=self._next_id,
                level=parent.level + 1,
                parent_id=parent_id,
                qa=qa,
                quality_score=score,
            )
            self._next_id += 1
            self.nodes[node.id] = node
            parent.children.append(node.id)
            self.per_level_counts[node.level - 1] += 1
            return node

    def path_to_root(self, node_id: int) -> list[int]:
        path = [node_id]
        node = self.nodes[node_id]
        while node.parent_id is not None:
            path.append(node.parent_id)
            node = self.nodes[node.parent_id]
        return path


def ucb_score(
    mean_reward: float | None,
    visit_count: int,
    parent_visits: int,
    c: float,
) -> float:
    """Upper confidence bound; unvisited nodes sort first via +infinity."""
    if visit_count == 0:
        return math.inf
    if parent_visits < 1:
        raise ValueError("parent_visits must be >= 1 for a visited child")
    return mean_reward + c * math.sqrt(math.log(parent_visits) / visit_count)


def select_expansion_target(tree: MctsTree, c: float) -> int:
    """Descend by max-UCB (ties to the lowest id); return the first
    expandable node on the path. The descent is appended to the event log."""
    node = tree.nodes[tree.root_id]
    path = [node.id]
    while True:
        if tree.is_expandable(node):
            tree.log_event("selected", {"node_id": node.id, "path": path})
            return node.id
        if not node.children:
            log.info("selection dead-ends at node %d; tree saturated", node.id)
            raise NoExpandableNode(f"no expandable node along the selection path (at {node.id})")
        best = min(
            node.children,
            key=lambda cid: (
                -ucb_score(
                    tree.nodes[cid].mean_reward,
                    tree.nodes[cid].visit_count,
                    max(node.visit_count, 1),
                    c,
                ),
                cid,
            ),
        )
        node = tree.nodes[best]
        path.append(node.id)


_PUNCT_TABLE = str.maketrans({ch: " " for ch in string.punctuation})


def sibling_similarity(a: str, b: str) -> float:
    """Jaccard similarity over lowercased, punctuation-stripped word sets."""
    set_a = set(a.lower().translate(_PUNCT_TABLE).split())
    set_b = set(b.lower().translate(_PUNCT_TABLE).split())
    if not set_a and not set_b:
        return 1.0
    union = set_a | set_b
    return len(set_a & set_b) / len(union)


def _eval_bindings(parent: MctsNode, candidate: GeneratedNodePayload, child_level: int) -> dict[str, str]:
    if parent.qa is not None:
        parent_q, parent_a = parent.qa.question, parent.qa.answer()
    else:
        parent_q = parent_a = "(none)"
    return {
        "parent_level": str(parent.level),
        "parent_question": parent_q,
        "parent_answer": parent_a,
        "child_level": str(child_level),
        "child_question": candidate.question,
        "child_answer": candidate.answer,
        "level_description": LEVEL_DESCRIPTIONS[child_level],
    }


def generate_candidates(
    backend: Backend,
    image: ImageRef,
    parent: MctsNode,
    count: int,
    config: MctsConfig,
    overrides_dir=None,
) -> list[GeneratedNodePayload | None]:
    """Issue ``count`` independent generation calls for children of parent.

    A candidate that fails to parse becomes None so the rest of the batch
    survives; the caller records the per-candidate rejection.
    """
    child_level = parent.level + 1
    if child_level > MAX_LEVEL:
        raise ValueError("parent is at the deepest level")
    bindings = {
        "target_level": str(child_level),
        "level_description": LEVEL_DESCRIPTIONS[child_level],
        "difficulty_guidance": DIFFICULTY_GUIDANCE[child_level],
        "retry_guidance": "",
    }
    if parent.qa is not None:
        bindings["parent_question"] = parent.qa.question
        bindings["parent_answer"] = parent.qa.answer()
    prompt = render(mcts_generation_template(child_level), bindings, overrides_dir)
    out: list[GeneratedNodePayload | None] = []
    for _ in range(count):
        request = ChatRequest(
            messages=(user_message(prompt, image),),
            temperature=config.generation_temperature,
            tag=f"mcts.gen.l{child_level}",
        )
        text = backend.complete(request).text
        try:
            out.append(parse_node_payload(text, child_level))
        except ParseError as exc:
            log.debug("candidate parse failure at level %d: %s", child_level, exc)
            out.append(None)
    return out


def score_candidate(
    backend: Backend,
    image: ImageRef,
    parent: MctsNode,
    candidate: GeneratedNodePayload,
    config: MctsConfig,
    overrides_dir=None,
) -> float:
    """Judge one candidate; returns the quality score in [0, 1]."""
    child_level = parent.level + 1
    prompt = render("mcts_eval", _eval_bindings(parent, candidate, child_level), overrides_dir)
    request = ChatRequest(
        messages=(user_message(prompt, image),),
        temperature=config.evaluator_temperature,
        tag=f"mcts.eval.l{child_level}",
    )
    text = backend.complete(request).text
    return parse_evaluation(text).quality_score


def admit_candidate(
    tree: MctsTree,
    parent_id: int,
    candidate: GeneratedNodePayload,
    score: float,
    config: MctsConfig,
) -> int | RejectionReason:
    """Gate a scored candidate into the tree.

    Rejection checks run in fixed order: capacity, quality threshold,
    sibling diversity. Admission inserts the node unvisited and logs it;
    a rejection is a value, not an error.
    """
    parent = tree.nodes[parent_id]
    child_level = parent.level + 1

    def _reject(reason: RejectionReason) -> RejectionReason:
        tree.log_event("rejected", {"parent_id": parent_id, "reason": reason.value})
        return reason

    if tree.level_count(child_level) >= tree.level_capacities[child_level - 1]:
        return _reject(RejectionReason.LEVEL_CAPACITY_FULL)
    if score < config.quality_threshold:
        return _reject(RejectionReason.BELOW_QUALITY_THRESHOLD)
    for sibling_id in parent.children:
        sibling = tree.nodes[sibling_id]
        if sibling.qa is None:
            continue
        if sibling_similarity(candidate.question, sibling.qa.question) >= config.diversity_threshold:
            return _reject(RejectionReason.SIBLING_TOO_SIMILAR)

    qa = make_open_ended(child_level, candidate.question, candidate.answer, candidate.reasoning)
    node = tree.insert_child(parent_id, qa, score)
    tree.log_event(
        "admitted",
        {"node_id": node.id, "parent_id": parent_id, "level": child_level, "score": score},
    )
    return node.id


def backpropagate(tree: MctsTree, from_node_id: int, reward: float) -> None:
    """Leaf-to-root visit/mean update along the ancestor path."""
    path = tree.path_to_root(from_node_id)
    with tree._lock:
        for node_id in path:
            node = tree.nodes[node_id]
            node.visit_count += 1
            n = node.visit_count
            prev = node.mean_reward if node.mean_reward is not None else 0.0
            node.mean_reward = ((n - 1) * prev + reward) / n
    tree.log_event("backprop", {"path": path, "reward": reward})


def run_search(
    backend: Backend,
    image: ImageRef,
    config: MctsConfig,
    overrides_dir=None,
) -> MctsTree:
    """Iterate select / expand / score / admit / backpropagate until the
    iteration budget is spent or no node can take more children.

    Backend failures abort the search but leave the tree consistent; the
    raised error carries it as ``partial_tree`` so callers can checkpoint.
    """
    tree = MctsTree.new(config.level_capacities)
    try:
        _search_loop(backend, image, config, tree, overrides_dir)
    except ClientError as exc:
        exc.partial_tree = tree
        raise
    return tree


def _search_loop(backend, image, config, tree, overrides_dir) -> None:
    for iteration in range(config.iteration_budget):
        try:
            target_id = select_expansion_target(tree, config.exploration_c)
        except NoExpandableNode:
            log.info("halting at iteration %d: tree saturated", iteration)
            break
        parent = tree.nodes[target_id]
        candidates = generate_candidates(
            backend, image, parent, config.expansion_batch, config, overrides_dir
        )
        for candidate in candidates:
            if candidate is None:
                tree.log_event(
                    "generated", {"parent_id": target_id, "candidate": None, "score": None}
                )
                tree.log_event(
                    "rejected",
                    {"parent_id": target_id, "reason": RejectionReason.PARSE_FAILURE.value},
                )
                continue
            cand_record = {
                "question": candidate.question,
                "answer": candidate.answer,
                "reasoning": candidate.reasoning,
            }
            try:
                score = score_candidate(backend, image, parent, candidate, config, overrides_dir)
            except ParseError:
                tree.log_event(
                    "generated", {"parent_id": target_id, "candidate": cand_record, "score": None}
                )
                tree.log_event(
                    "rejected",
                    {"parent_id": target_id, "reason": RejectionReason.PARSE_FAILURE.value},
                )
                continue
            tree.log_event(
                "generated", {"parent_id": target_id, "candidate": cand_record, "score": score}
            )
            result = admit_candidate(tree, target_id, candidate, score, config)
            if isinstance(result, int):
                backpropagate(tree, result, score)


@dataclass(frozen=True)
class PathRecord:
    """A complete level 1-2-3 chain ranked by mean node quality."""

    node_ids: tuple[int, int, int]
    mean_score: float


def extract_top_k(tree: MctsTree, k: int) -> list[PathRecord]:
    """Enumerate complete paths, rank by mean score descending (ties by
    node-id order), and keep at most k."""
    records: list[PathRecord] = []
    root = tree.nodes[tree.root_id]
    for id1 in root.children:
        n1 = tree.nodes[id1]
        for id2 in n1.children:
            n2 = tree.nodes[id2]
            for id3 in n2.children:
                n3 = tree.nodes[id3]
                mean = (n1.quality_score + n2.quality_score + n3.quality_score) / 3.0
                records.append(PathRecord(node_ids=(id1, id2, id3), mean_score=mean))
    records.sort(key=lambda r: (-r.mean_score, r.node_ids))
    return records[:k]
