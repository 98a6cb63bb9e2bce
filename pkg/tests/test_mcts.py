import math
import random

import pytest

from hiervqa.client import MockClient
from hiervqa.config import MctsConfig
from hiervqa.core import ImageRef, make_open_ended
from hiervqa.mcts import (
    ROOT_ID,
    MctsTree,
    NoExpandableNode,
    RejectionReason,
    admit_candidate,
    backpropagate,
    extract_top_k,
    generate_candidates,
    run_search,
    score_candidate,
    select_expansion_target,
    sibling_similarity,
    ucb_score,
)
from hiervqa.parsing import GeneratedNodePayload, ParseError

from helpers import eval_json, node_json

IMAGE = ImageRef("images/sample.png")


def _payload(question, answer="a short answer"):
    return GeneratedNodePayload(question=question, answer=answer, reasoning="r")


def _add(tree, parent_id, question="q", score=0.8):
    qa = make_open_ended(tree.nodes[parent_id].level + 1, question, "ans")
    return tree.insert_child(parent_id, qa, score)


# -- ucb ----------------------------------------------------------------------

def test_ucb_frozen_example():
    assert ucb_score(0.8, 2, 10, 2.0) == pytest.approx(2.9460, abs=1e-4)


def test_ucb_unvisited_is_infinite():
    assert ucb_score(None, 0, 17, 2.0) == math.inf
    assert ucb_score(0.4, 0, 1, 0.0) == math.inf


def test_ucb_zero_c_is_exploitation_only():
    assert ucb_score(0.5, 7, 7, 0.0) == pytest.approx(0.5)


def test_ucb_matches_high_precision_oracle():
    import mpmath as mp

    mp.mp.dps = 50
    rng = random.Random(7)
    for _ in range(200):
        mean = rng.random()
        n = rng.randint(1, 500)
        parent = rng.randint(n, 2000)
        for c in (0.0, 1.0, 2.0):
            got = ucb_score(mean, n, parent, c)
            want = mp.mpf(repr(mean)) + mp.mpf(repr(c)) * mp.sqrt(mp.log(parent) / n)
            assert abs(got - float(want)) < 1e-9


# -- selection ----------------------------------------------------------------

def test_fresh_tree_selects_root():
    tree = MctsTree.new((8, 12, 15))
    assert select_expansion_target(tree, 2.0) == ROOT_ID
    assert tree.event_log[-1] == {
        "kind": "selected",
        "payload": {"node_id": ROOT_ID, "path": [ROOT_ID]},
    }


def test_unvisited_child_dominates():
    tree = MctsTree.new((3, 12, 15))
    a = _add(tree, ROOT_ID, "alpha")
    b = _add(tree, ROOT_ID, "beta")
    c = _add(tree, ROOT_ID, "gamma")
    backpropagate(tree, a.id, 0.9)
    backpropagate(tree, b.id, 0.7)
    # level 1 is now full, so selection must descend; c is unvisited
    assert select_expansion_target(tree, 2.0) == c.id


def test_equal_ucb_breaks_tie_to_lowest_id():
    tree = MctsTree.new((2, 12, 15))
    a = _add(tree, ROOT_ID, "alpha")
    b = _add(tree, ROOT_ID, "beta")
    backpropagate(tree, a.id, 0.5)
    backpropagate(tree, b.id, 0.5)
    assert select_expansion_target(tree, 1.0) == a.id


def test_selection_matches_brute_force_argmax_on_random_trees():
    rng = random.Random(99)
    for _ in range(50):
        caps = (rng.randint(1, 3), rng.randint(1, 4), 50)
        tree = MctsTree.new(caps)
        # fill some structure
        level1 = [_add(tree, ROOT_ID, f"l1 {i} {rng.random()}") for i in range(caps[0])]
        for n1 in level1:
            for j in range(rng.randint(0, caps[1])):
                if tree.level_count(2) >= caps[1]:
                    break
                _add(tree, n1.id, f"l2 {n1.id} {j}")
        for node_id in list(tree.nodes):
            if node_id != ROOT_ID:
                backpropagate(tree, node_id, rng.random())
        c = rng.choice((0.0, 1.0, 2.0))

        # independent greedy descent using the documented formula
        node = tree.nodes[ROOT_ID]
        expected_path = [ROOT_ID]
        expected = None
        while True:
            if tree.is_expandable(node):
                expected = node.id
                break
            if not node.children:
                break
            scored = []
            for cid in node.children:
                child = tree.nodes[cid]
                if child.visit_count == 0:
                    u = math.inf
                else:
                    u = child.mean_reward + c * math.sqrt(
                        math.log(node.visit_count) / child.visit_count
                    )
                scored.append((-u, cid))
            best = min(scored)[1]
            node = tree.nodes[best]
            expected_path.append(best)

        if expected is None:
            with pytest.raises(NoExpandableNode):
                select_expansion_target(tree, c)
        else:
            assert select_expansion_target(tree, c) == expected
            assert tree.event_log[-1]["payload"]["path"] == expected_path


# -- similarity ---------------------------------------------------------------

def test_similarity_identity_and_disjoint():
    assert sibling_similarity("What is here?", "What is here?") == 1.0
    assert sibling_similarity("red boat", "green sky") == 0.0
    assert sibling_similarity("", "") == 1.0


def test_similarity_known_overlap():
    got = sibling_similarity("what color is the car", "what color is the sky")
    assert got == pytest.approx(4 / 6)


def test_similarity_ignores_case_and_punctuation():
    assert sibling_similarity("What, color?", "what color") == 1.0


# -- admission ----------------------------------------------------------------

def test_admit_below_quality_threshold():
    tree = MctsTree.new((8, 12, 15))
    result = admit_candidate(tree, ROOT_ID, _payload("q1"), 0.60, MctsConfig())
    assert result is RejectionReason.BELOW_QUALITY_THRESHOLD


def test_admit_at_threshold_is_accepted():
    tree = MctsTree.new((8, 12, 15))
    result = admit_candidate(tree, ROOT_ID, _payload("q1"), 0.65, MctsConfig())
    assert isinstance(result, int)


def test_admit_rejects_similar_sibling():
    tree = MctsTree.new((8, 12, 15))
    admit_candidate(tree, ROOT_ID, _payload("what color is the large boat"), 0.9, MctsConfig())
    result = admit_candidate(
        tree, ROOT_ID, _payload("what color is the large boat today"), 0.9, MctsConfig()
    )
    assert result is RejectionReason.SIBLING_TOO_SIMILAR


def test_admit_rejects_when_level_full():
    config = MctsConfig(level_capacities=(1, 12, 15))
    tree = MctsTree.new(config.level_capacities)
    admit_candidate(tree, ROOT_ID, _payload("first question"), 0.9, config)
    result = admit_candidate(tree, ROOT_ID, _payload("another thing entirely"), 0.9, config)
    assert result is RejectionReason.LEVEL_CAPACITY_FULL


def test_rejection_order_capacity_then_quality_then_similarity():
    config = MctsConfig(level_capacities=(1, 12, 15))
    tree = MctsTree.new(config.level_capacities)
    admit_candidate(tree, ROOT_ID, _payload("what color is the boat"), 0.9, config)
    # candidate violates all three rules; capacity must be reported first
    bad = _payload("what color is the boat")
    assert admit_candidate(tree, ROOT_ID, bad, 0.1, config) is RejectionReason.LEVEL_CAPACITY_FULL
    # with capacity available, quality comes before similarity
    config2 = MctsConfig(level_capacities=(8, 12, 15))
    roomy = MctsTree.new(config2.level_capacities)
    admit_candidate(roomy, ROOT_ID, _payload("what color is the boat"), 0.9, config2)
    assert (
        admit_candidate(roomy, ROOT_ID, bad, 0.1, config2)
        is RejectionReason.BELOW_QUALITY_THRESHOLD
    )
    assert (
        admit_candidate(roomy, ROOT_ID, bad, 0.9, config2)
        is RejectionReason.SIBLING_TOO_SIMILAR
    )


def test_admitted_node_starts_unvisited():
    tree = MctsTree.new((8, 12, 15))
    node_id = admit_candidate(tree, ROOT_ID, _payload("q1"), 0.7, MctsConfig())
    node = tree.nodes[node_id]
    assert node.visit_count == 0
    assert node.mean_reward is None
    assert node.quality_score == 0.7
    assert tree.per_level_counts == [1, 0, 0]


# -- backpropagation ----------------------------------------------------------

def test_backprop_running_mean():
    tree = MctsTree.new((8, 12, 15))
    node = _add(tree, ROOT_ID)
    node.visit_count = 3
    node.mean_reward = 0.6
    backpropagate(tree, node.id, 1.0)
    assert node.visit_count == 4
    assert node.mean_reward == pytest.approx(0.7)


def test_backprop_first_visit():
    tree = MctsTree.new((8, 12, 15))
    node = _add(tree, ROOT_ID)
    backpropagate(tree, node.id, 0.9)
    assert node.visit_count == 1
    assert node.mean_reward == pytest.approx(0.9)


def test_backprop_updates_all_ancestors():
    tree = MctsTree.new((8, 12, 15))
    a = _add(tree, ROOT_ID, "a")
    b = _add(tree, a.id, "b")
    backpropagate(tree, b.id, 0.5)
    assert tree.nodes[ROOT_ID].visit_count == 1
    assert a.visit_count == 1
    assert b.visit_count == 1
    assert tree.event_log[-1]["payload"]["path"] == [b.id, a.id, ROOT_ID]


# -- candidate generation and scoring ------------------------------------------

def test_generate_candidates_full_batch():
    mock = MockClient([("", node_json(f"question {i}", "ans")) for i in range(5)])
    tree = MctsTree.new((8, 12, 15))
    out = generate_candidates(mock, IMAGE, tree.nodes[ROOT_ID], 5, MctsConfig())
    assert len(out) == 5
    assert all(p is not None for p in out)
    assert all(r.temperature == pytest.approx(0.9) for r in mock.requests)


def test_generate_candidates_isolates_parse_failure():
    entries = [("", node_json(f"question {i}", "ans")) for i in range(4)]
    entries.insert(2, ("", "not json"))
    mock = MockClient(entries)
    tree = MctsTree.new((8, 12, 15))
    out = generate_candidates(mock, IMAGE, tree.nodes[ROOT_ID], 5, MctsConfig())
    assert [p is None for p in out] == [False, False, True, False, False]


def test_generate_candidates_depth_precondition():
    tree = MctsTree.new((8, 12, 15))
    a = _add(tree, ROOT_ID)
    b = _add(tree, a.id)
    c = _add(tree, b.id)
    with pytest.raises(ValueError):
        generate_candidates(MockClient(), IMAGE, c, 1, MctsConfig())


def test_score_candidate_passthrough_and_errors():
    tree = MctsTree.new((8, 12, 15))
    parent = _add(tree, ROOT_ID, "parent q")
    mock = MockClient([("", eval_json(0.72)), ("", eval_json(1.0)), ("", "no json here")])
    assert score_candidate(mock, IMAGE, parent, _payload("q"), MctsConfig()) == 0.72
    assert score_candidate(mock, IMAGE, parent, _payload("q"), MctsConfig()) == 1.0
    with pytest.raises(ParseError):
        score_candidate(mock, IMAGE, parent, _payload("q"), MctsConfig())
    assert all(r.temperature == 0.0 for r in mock.requests)


# -- run_search ---------------------------------------------------------------

def test_budget_zero_yields_root_only():
    config = MctsConfig(iteration_budget=0)
    tree = run_search(MockClient(), IMAGE, config)
    assert set(tree.nodes) == {ROOT_ID}
    assert tree.event_log == []


def test_single_iteration_trace():
    questions = [
        "what color is the large boat",
        "how many people are there",
        "what season does it look like",
        "where is the sun in the frame",
        "what color is the large boat today",  # near-duplicate of the first
    ]
    scores = [0.9, 0.5, 0.8, 0.7, 0.9]
    entries = [("", node_json(q, "ans")) for q in questions]
    # candidate 2 is rejected on quality, so no admission; all get scored
    entries += [("", eval_json(s)) for s in scores]
    mock = MockClient(entries)
    config = MctsConfig(iteration_budget=1)
    tree = run_search(mock, IMAGE, config)
    assert tree.per_level_counts == [3, 0, 0]
    assert tree.nodes[ROOT_ID].visit_count == 3
    rejected = [e["payload"]["reason"] for e in tree.event_log if e["kind"] == "rejected"]
    assert rejected == ["below_quality_threshold", "sibling_too_similar"]
    assert mock.remaining == 0


def test_parse_failures_are_per_candidate_rejections():
    entries = [
        ("", node_json("good question one", "ans")),
        ("", "broken"),
        ("", node_json("good question two", "ans")),
        ("", eval_json(0.9)),
        ("", "also broken eval"),
    ]
    mock = MockClient(entries)
    config = MctsConfig(iteration_budget=1, expansion_batch=3)
    tree = run_search(mock, IMAGE, config)
    rejected = [e["payload"]["reason"] for e in tree.event_log if e["kind"] == "rejected"]
    assert rejected.count("parse_failure") == 2
    assert tree.per_level_counts == [1, 0, 0]


def test_backend_failure_carries_partial_tree():
    from hiervqa.client import ScriptExhausted

    entries = [
        ("", node_json("first good question", "ans")),
        ("", eval_json(0.9)),
        # script ends; iteration 2 dies mid-generation
    ]
    mock = MockClient(entries)
    config = MctsConfig(iteration_budget=3, expansion_batch=1)
    with pytest.raises(ScriptExhausted) as err:
        run_search(mock, IMAGE, config)
    partial = err.value.partial_tree
    assert partial.per_level_counts == [1, 0, 0]
    assert partial.nodes[ROOT_ID].visit_count == 1


def test_saturation_halts_before_budget():
    config = MctsConfig(
        level_capacities=(1, 1, 1), expansion_batch=1, iteration_budget=10, quality_threshold=0.0
    )
    entries = []
    for i in range(3):
        entries.append(("", node_json(f"distinct question {'x' * (i + 1)}", "ans")))
        entries.append(("", eval_json(0.9)))
    mock = MockClient(entries)
    tree = run_search(mock, IMAGE, config)
    assert tree.per_level_counts == [1, 1, 1]
    selected = [e for e in tree.event_log if e["kind"] == "selected"]
    assert len(selected) == 3  # fourth iteration found nothing to expand
    assert mock.remaining == 0


def test_admitted_levels_follow_parents():
    rng = random.Random(3)
    config = MctsConfig(
        level_capacities=(2, 2, 2), expansion_batch=2, iteration_budget=6, quality_threshold=0.0
    )
    entries = []
    for i in range(24):
        entries.append(("", node_json(f"q {i} {'z' * (i % 7)} {rng.random()}", "ans")))
        entries.append(("", eval_json(round(rng.random(), 3))))
    # interleave generation and eval entries in consumption order:
    # per iteration it is gen,gen,eval,eval; easiest is to rebuild below.
    mock = MockClient()
    gen = iter(range(100))
    for _ in range(6):
        batch = [
            node_json(f"iter question {next(gen)} {rng.choice('abcdefgh')}", "ans")
            for _ in range(2)
        ]
        for item in batch:
            mock.enqueue([("", item)])
        for _ in range(2):
            mock.enqueue([("", eval_json(round(rng.uniform(0.5, 1.0), 3)))])
    tree = run_search(mock, IMAGE, config)
    for node in tree.nodes.values():
        if node.id == ROOT_ID:
            continue
        parent = tree.nodes[node.parent_id]
        assert node.level == parent.level + 1
        assert node.level <= 3
    for level in (1, 2, 3):
        assert tree.level_count(level) <= config.level_capacities[level - 1]


# -- top-k extraction ----------------------------------------------------------

def test_top_k_empty_without_level3():
    tree = MctsTree.new((8, 12, 15))
    a = _add(tree, ROOT_ID)
    _add(tree, a.id)
    assert extract_top_k(tree, 10) == []


def test_top_k_orders_by_mean():
    tree = MctsTree.new((8, 12, 15))
    means = {}
    for triple in ((0.9, 0.9, 0.9), (0.7, 0.7, 0.7), (0.8, 0.8, 0.8)):
        n1 = _add(tree, ROOT_ID, f"q{triple}", score=triple[0])
        n2 = _add(tree, n1.id, "q2", score=triple[1])
        n3 = _add(tree, n2.id, "q3", score=triple[2])
        means[(n1.id, n2.id, n3.id)] = sum(triple) / 3
    top = extract_top_k(tree, 2)
    assert [round(r.mean_score, 6) for r in top] == [0.9, 0.8]


def _random_scored_tree(rng, n_nodes=30):
    tree = MctsTree.new((100, 100, 100))
    ids = [ROOT_ID]
    while len(tree.nodes) < n_nodes:
        parent_id = rng.choice(ids)
        parent = tree.nodes[parent_id]
        if parent.level >= 3:
            continue
        qa = make_open_ended(parent.level + 1, f"question {len(tree.nodes)}", "ans")
        node = tree.insert_child(parent_id, qa, round(rng.random(), 6))
        ids.append(node.id)
    return tree


def test_top_k_matches_brute_force_enumeration():
    rng = random.Random(2024)
    for _ in range(100):
        tree = _random_scored_tree(rng, n_nodes=rng.randint(5, 40))
        # independent enumeration: walk every level-1/2/3 chain
        expected = []
        for n1 in tree.nodes.values():
            if n1.level != 1:
                continue
            for id2 in n1.children:
                n2 = tree.nodes[id2]
                for id3 in n2.children:
                    n3 = tree.nodes[id3]
                    mean = (n1.quality_score + n2.quality_score + n3.quality_score) / 3
                    expected.append(((n1.id, id2, id3), mean))
        expected.sort(key=lambda t: (-t[1], t[0]))
        got = extract_top_k(tree, 10)
        assert [(r.node_ids, r.mean_score) for r in got] == expected[:10]


# -- invariants over the event log ----------------------------------------------

def _searched_tree(seed=11, iterations=8):
    rng = random.Random(seed)
    mock = MockClient()
    config = MctsConfig(
        level_capacities=(3, 4, 5),
        expansion_batch=3,
        iteration_budget=iterations,
        quality_threshold=0.4,
        diversity_threshold=0.8,
    )
    words = ["boat", "sky", "dog", "tree", "sign", "rain", "hat", "cup", "door", "lamp"]
    for _ in range(iterations):
        for _ in range(config.expansion_batch):
            q = " ".join(rng.sample(words, 4)) + f" {rng.randint(0, 999)}"
            mock.enqueue([("", node_json(q, "short answer"))])
        for _ in range(config.expansion_batch):
            mock.enqueue([("", eval_json(round(rng.uniform(0.2, 1.0), 3)))])
    return run_search(mock, IMAGE, config), config


def test_visit_count_conservation():
    tree, _ = _searched_tree()
    admitted = sum(1 for e in tree.event_log if e["kind"] == "admitted")
    backprops = sum(1 for e in tree.event_log if e["kind"] == "backprop")
    assert tree.nodes[ROOT_ID].visit_count == admitted == backprops


def test_mean_reward_matches_event_log_reconstruction():
    tree, _ = _searched_tree()
    rewards: dict[int, list[float]] = {}
    for event in tree.event_log:
        if event["kind"] != "backprop":
            continue
        for node_id in event["payload"]["path"]:
            rewards.setdefault(node_id, []).append(event["payload"]["reward"])
    for node_id, node in tree.nodes.items():
        got_visits = node.visit_count
        wanted = rewards.get(node_id, [])
        assert got_visits == len(wanted)
        if wanted:
            assert abs(node.mean_reward - sum(wanted) / len(wanted)) < 1e-9
        else:
            assert node.mean_reward is None


def test_event_log_replays_to_identical_tree():
    tree, config = _searched_tree()
    replayed = MctsTree.new(config.level_capacities)
    last_generated = None
    for event in tree.event_log:
        kind, payload = event["kind"], event["payload"]
        if kind == "generated":
            last_generated = payload
        elif kind == "admitted":
            cand = last_generated["candidate"]
            qa = make_open_ended(payload["level"], cand["question"], cand["answer"], cand["reasoning"])
            node = replayed.insert_child(payload["parent_id"], qa, payload["score"])
            assert node.id == payload["node_id"]
        elif kind == "backprop":
            for node_id in payload["path"]:
                node = replayed.nodes[node_id]
                node.visit_count += 1
                prev = node.mean_reward or 0.0
                node.mean_reward = ((node.visit_count - 1) * prev + payload["reward"]) / node.visit_count
    assert set(replayed.nodes) == set(tree.nodes)
    for node_id, node in tree.nodes.items():
        twin = replayed.nodes[node_id]
        assert (twin.level, twin.parent_id, twin.children) == (node.level, node.parent_id, node.children)
        assert twin.visit_count == node.visit_count
        if node.mean_reward is None:
            assert twin.mean_reward is None
        else:
            assert abs(twin.mean_reward - node.mean_reward) < 1e-12
        assert twin.quality_score == node.quality_score
        assert twin.qa == node.qa
    assert replayed.per_level_counts == tree.per_level_counts


def test_admission_labels_are_deterministic_on_replay():
    tree, config = _searched_tree()
    replayed = MctsTree.new(config.level_capacities)
    events = iter(tree.event_log)
    for event in events:
        if event["kind"] != "generated":
            continue
        payload = event["payload"]
        verdict = next(events)  # admitted or rejected follows its generated event
        if payload["candidate"] is None or payload["score"] is None:
            assert verdict["kind"] == "rejected"
            assert verdict["payload"]["reason"] == "parse_failure"
            continue
        cand = GeneratedNodePayload(**payload["candidate"])
        result = admit_candidate(replayed, payload["parent_id"], cand, payload["score"], config)
        if isinstance(result, int):
            assert verdict["kind"] == "admitted"
            assert verdict["payload"]["node_id"] == result
        else:
            assert verdict["kind"] == "rejected"
            assert verdict["payload"]["reason"] == result.value
        if verdict["kind"] == "admitted":
            backpropagate(replayed, verdict["payload"]["node_id"], payload["score"])


def test_capacity_safety_under_randomized_stress():
    rng = random.Random(5)
    config = MctsConfig(level_capacities=(2, 3, 4), quality_threshold=0.3, diversity_threshold=0.9)
    tree = MctsTree.new(config.level_capacities)
    for i in range(1000):
        parent_id = rng.choice(list(tree.nodes))
        parent = tree.nodes[parent_id]
        if parent.level >= 3:
            continue
        candidate = _payload(f"question {rng.randint(0, 50)} {'pad ' * rng.randint(0, 3)}")
        result = admit_candidate(tree, parent_id, candidate, round(rng.random(), 3), config)
        if isinstance(result, int):
            backpropagate(tree, result, rng.random())
        for level in (1, 2, 3):
            assert tree.level_count(level) <= config.level_capacities[level - 1]
