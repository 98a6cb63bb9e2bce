"""Prompt templates and their rendering.

Placeholders are ``{lowercase_name}`` tokens; literal braces elsewhere in a
template (e.g. JSON examples) are left untouched. Templates ship embedded
but can be overridden from a directory holding one ``<template_id>.txt``
file per id.
"""

from __future__ import annotations

import re
from pathlib import Path



class TemplateError(Exception):
    pass


class UnknownTemplate(TemplateError):
    pass


class MissingBinding(TemplateError):
    def __init__(self, placeholder: str, template_id: str):
        super().__init__(f"{template_id}: no binding for placeholder {placeholder!r}")
        self.placeholder = placeholder


# Per-level vocabulary injected into the tree-search prompts.
LEVEL_DESCRIPTIONS = {
    1: "basic perception (direct visual elements, objects, colors, positions, or basic attributes)",
    2: "connection and relationship (links, causes, implications between observed elements)",
    3: "high-level reasoning (abstract inference, analysis, implications, or deep understanding)",
}

DIFFICULTY_GUIDANCE = {
    1: "straightforward and clearly observable",
    2: "requires linking two facts",
    3: "requires abstract inference",
}


BENCH_L3_ANALYSIS = """\
# ROLE

You are an expert AI Benchmark Analyst. Your task is to deconstruct a given question and its context to find the correct answer, select the best distractors, and state the core reasoning.

# TASK

Analyze the provided JSON data, which contains ground-truth information, a question, and a list of potential options. Perform the following steps:
1. Use the image to understand the ground truth. If an image is provided, the explanation text is supplementary.
2. Read the question and evaluate all options against the image.
3. Identify the single best option that is most strongly supported by the ground truth.
4. From the remaining incorrect options, select the three most plausible and confusing distractors.
5. Write a concise, one-sentence reasoning that explains why the correct option is correct, based strictly on the image.

# INPUT CONTEXT

The input is a single JSON object containing the raw data for a question. It contains the following structure:
- explanation: A text string providing context for the scenario.
- question: The question to be analyzed.
- options: An array of strings, where one is the correct answer and the others are potential distractors.

# OUTPUT FORMAT

Return a single JSON object with the following structure:
{
  "level": 3,
  "level_name": "Connotation",
  "question": "The original question text",
  "options": [
    {"option_text": "Text of the correct option", "is_correct": true},
    {"option_text": "Text of the first distractor", "is_correct": false},
    {"option_text": "Text of the second distractor", "is_correct": false},
    {"option_text": "Text of the third distractor", "is_correct": false}
  ],
  "reasoning": "The one-sentence explanation for why the correct answer is correct, based on the provided ground truth."
}

# IMPORTANT RULES
- The question in the output must be identical to the input question.
- The output options array must contain exactly four options: the single correct answer and the three most plausible distractors selected from the original list.
- Ensure exactly one option is marked as is_correct: true.
- The reasoning is the most critical part. It must be clear and directly derivable from the image.
- Return ONLY the JSON object. Do not explain or add extra text.

Input:
{json_data}
"""


BENCH_L2_GEN = """\
# ROLE

You are an expert AI Benchmark Crafter. You create questions that build on each other to test understanding.

# TASK

You are given the analysis of a Level 3 question. Your task is to create a Level 2 (Comprehensive Understanding) question that logically precedes it.

The Level 2 question should address the "how" or "why" of the situation, bridging Level 1 facts and the Level 3 conclusion. It must be answerable using the image and help users understand the reasoning in the level_3_analysis.

# INPUT CONTEXT

The input is a JSON object containing the following keys:
- explanation: Supplementary text context. The primary ground truth is the image.
- level_3_analysis: The L3 QA and reasoning. Your L2 question must be a logical prerequisite for this.

# OUTPUT FORMAT

Return a single JSON object for the Level 2 question:
{
  "level": 2,
  "level_name": "Semantic Bridge (Comprehensive Understanding)",
  "question": "Your newly generated Level 2 question",
  "options": [
    {"option_text": "The correct answer text", "is_correct": true},
    {"option_text": "A plausible but incorrect distractor", "is_correct": false},
    {"option_text": "Another plausible but incorrect distractor", "is_correct": false},
    {"option_text": "A third plausible but incorrect distractor", "is_correct": false}
  ]
}

# IMPORTANT RULES
- The generated question and all options must be derived only from the image.
- The question should focus on understanding the relationships, causes, or implications described in the provided context.
- DISTRACTOR DIFFICULTY REQUIREMENTS FOR LEVEL 2 (CRITICAL):
  - Distractors must require deliberate analysis to rule out, not just superficial pattern matching.
  - All distractors must be from the same semantic/visual domain as the correct answer and share overlapping features.
  - Each distractor should be partially correct (it may align with part of the scene, concept, or logic) but contains a crucial flaw, such as:
    - Oversimplification of a process or mechanism
    - Misidentification of cause and effect
    - Confusion between similar entities, directions, or states
    - Overgeneralization from a local detail
  - Include at least one distractor that reflects a common but incorrect heuristic, such as:
    - Selecting the most visually salient item regardless of function
    - Assuming temporal sequence implies causality
    - Mistaking correlation for explanation
  - Avoid options that are impossible, irrelevant, or rely on external knowledge.
  - Test the ability to: differentiate superficial vs. deep correctness, resolve ambiguous cues, and recognize subtle misalignments.
- Ensure there are exactly four options and only one is marked is_correct: true.
- Return ONLY the JSON object. Do not explain or add extra text.
{retry_guidance}

Input:
{
  "explanation": {explanation_text},
  "level_3_analysis": {level_3_data}
}
"""


BENCH_L1_GEN = """\
# ROLE

You are an expert AI Benchmark Crafter. You create questions that build on each other to test understanding.

# TASK

You are given the analysis of a Level 3 question and the complete data for a generated Level 2 question. Your task is to create a very simple Level 1 (Perception) question that serves as the logical first step in this hierarchy.

The Level 1 question should ask about the most prominent and easily verifiable element in the image. The goal is to create a straightforward, entry-level question that almost any observer could answer easily. It should be significantly easier than the Level 2 question. It is the "what" that precedes the "how/why" of Level 2.

# INPUT CONTEXT

The input is a JSON object containing the following keys:
- explanation: A text string providing context for the scenario. If an image is part of the input, this explanation is supplementary information. The primary ground truth is defined by the image.
- level_3_analysis: A JSON object containing the Level 3 question, its correct answer, and the reasoning behind it. This provides the high-level context.
- level_2_qa: A JSON object containing the generated Level 2 question, its options, and the correct answer. Your Level 1 question should be a logical prerequisite for this question.

# OUTPUT FORMAT

Return a single JSON object for the Level 1 question:
{
  "level": 1,
  "level_name": "Perception",
  "question": "Your newly generated, simple Level 1 question about a prominent and central fact",
  "options": [
    {"option_text": "The correct factual answer", "is_correct": true},
    {"option_text": "A plausible but incorrect factual distractor", "is_correct": false},
    {"option_text": "Another plausible but incorrect factual distractor", "is_correct": false},
    {"option_text": "A third plausible but incorrect factual distractor", "is_correct": false}
  ]
}

# IMPORTANT RULES
- The generated question and all options must be derived only from the image.
- The question must be about a specific, observable, and obvious factual detail.
- The options must be plausible, with one clear correct answer based on the image.
- Ensure there are exactly four options, and only one is marked is_correct: true.
- Return ONLY the JSON object. Do not explain or add extra text.
{retry_guidance}

Input:
{
  "explanation": {explanation_text},
  "level_3_analysis": {level_3_data},
  "level_2_qa": {level_2_data}
}
"""


VALIDATE_L2_L3 = """\
# ROLE

You are a meticulous AI assistant specializing in logical and hierarchical analysis.

# TASK

Evaluate if knowing the answer to "Level 2 QA" provides a foundational building block that helps in reasoning about or answering "Level 3 QA".

CRITICAL REQUIREMENTS:
1. Logical dependency: Level 2 information must be DIRECTLY useful or necessary for Level 3
2. Difficulty progression: Level 2 MUST be more objective, concrete, and simpler than Level 3
3. Hierarchical coherence: Level 2 must provide intermediate knowledge that Level 3 builds upon
4. Complexity standard: Level 2 should involve basic analysis/interpretation while Level 3 requires deeper reasoning, hidden meanings, or abstract concepts

VALIDATION STANDARDS:
- Level 2 questions should involve straightforward analysis or interpretation
- Level 3 questions should require complex reasoning, metaphorical understanding, or deeper insights
- There must be a clear logical connection where Level 2 knowledge helps answer Level 3
- If Level 2 is not noticeably simpler and more concrete than Level 3, validation should FAIL

# REMEMBER

Your primary source of truth is the image.

# QA Pairs

Level 2 QA (The foundational knowledge - should be more objective/simple)
- Question: {question_l2}
- Correct Answer: {answer_l2}

Level 3 QA (The complex question that should build upon Level 2)
- Question: {question_l3}
- Correct Answer: {answer_l3}

# OUTPUT FORMAT

Respond with ONLY a JSON object with the following structure:
{
  "is_helpful": <boolean, true if Level 2 helps with Level 3 AND is significantly simpler, otherwise false>,
  "confidence": <float, your confidence in the "is_helpful" assessment from 0.0 to 1.0>,
  "reasoning": "<string, a brief explanation focusing on logical dependency and difficulty progression. If false, explain why Level 2 is not sufficiently simpler or helpful>"
}
"""


VALIDATE_L1_L2 = """\
# ROLE

You are a meticulous AI assistant specializing in logical and hierarchical analysis.

# TASK

Evaluate if knowing the answer to "Level 1 QA" provides a foundational building block that helps in reasoning about or answering "Level 2 QA".

CRITICAL REQUIREMENTS:
1. Logical dependency: Level 1 information must be DIRECTLY useful or necessary for Level 2
2. Difficulty progression: Level 1 MUST be significantly more objective, concrete, and simpler than Level 2
3. Hierarchical coherence: Level 1 must provide basic, factual knowledge that Level 2 builds upon
4. Objectivity standard: Level 1 should focus on observable facts (colors, objects, numbers, basic actions) while Level 2 involves interpretation or analysis

VALIDATION STANDARDS:
- Level 1 questions should be answerable by direct observation
- Level 2 questions should require reasoning, interpretation, or analysis
- There must be a clear logical connection where Level 1 knowledge helps answer Level 2
- If Level 1 is not noticeably simpler and more objective than Level 2, validation should FAIL

# REMEMBER

Your primary source of truth is the image.

# QA Pairs

Level 1 QA (The foundational knowledge - should be most objective/simple)
- Question: {question_l1}
- Correct Answer: {answer_l1}

Level 2 QA (The intermediate complexity question that should build upon Level 1)
- Question: {question_l2}
- Correct Answer: {answer_l2}

# OUTPUT FORMAT

Respond with ONLY a JSON object with the following structure:
{
  "is_helpful": <boolean, true if Level 1 helps with Level 2 AND is significantly simpler, otherwise false>,
  "confidence": <float, your confidence in the "is_helpful" assessment from 0.0 to 1.0>,
  "reasoning": "<string, a brief explanation focusing on logical dependency and difficulty progression. If false, explain why Level 1 is not sufficiently simpler or helpful>"
}
"""


MCTS_L1_GEN = """\
Your task is to generate a basic perception question based on the given context.

Context:
- Target Level: {target_level} - {level_description}
- {retry_guidance}

Instructions:
1. Create a question that focuses on direct visual elements, objects, colors, positions, or basic attributes
2. The question should be foundational and provide a building block for more complex reasoning
3. Ensure the question is different from existing questions in the hierarchy
4. The difficulty should be: {difficulty_guidance}
5. The answer MUST be concise (<= 30 words).

You must respond with a JSON object in exactly this format:
{
  "question": "Your generated question here",
  "answer": "The correct answer",
  "reasoning": "Brief explanation of why this question fits level 1"
}

Generate a level 1 basic perception question now.
"""


MCTS_L2_GEN = """\
Your task is to generate a connection-level question based on the parent context.

Parent Context:
- Parent Question: {parent_question}
- Parent Answer: {parent_answer}
- Target Level: {target_level} - {level_description}
- {retry_guidance}

Instructions:
1. Build upon the parent question/answer to create a more complex question
2. Focus on relationships, connections, implications, or broader understanding
3. The question should logically follow from the parent but require additional reasoning
4. The difficulty should be: {difficulty_guidance}
5. The answer MUST be concise (<= 40 words).
6. Ensure clear logical progression from the parent question

You must respond with a JSON object in exactly this format:
{
  "question": "Your generated question here",
  "answer": "The correct answer",
  "reasoning": "Brief explanation of how this connects to the parent and why it fits level 2"
}

Generate a level 2 connection question now.
"""


MCTS_L3_GEN = """\
Your task is to generate a high-level reasoning question based on the parent context.

Parent Context:
- Parent Question: {parent_question}
- Parent Answer: {parent_answer}
- Target Level: {target_level} - {level_description}
- {retry_guidance}

Instructions:
1. Build upon the parent question/answer to create a highly complex question
2. Focus on abstract reasoning, inference, analysis, implications, or deep understanding
3. The question should require sophisticated thinking beyond basic observation or connection
4. The difficulty should be: {difficulty_guidance}
5. Ensure the question represents the pinnacle of reasoning complexity for this hierarchy
6. The answer MUST be concise (<= 50 words).

You must respond with a JSON object in exactly this format:
{
  "question": "Your generated question here",
  "answer": "The correct answer",
  "reasoning": "Brief explanation of how this builds on the parent and why it requires high-level reasoning"
}

Generate a level 3 high-level reasoning question now.
"""


MCTS_EVAL = """\
You are an expert evaluator for hierarchical visual question-answer datasets. Evaluate the quality of the target Q&A pair.

Context (for reference only):
- Previous Level {parent_level} Question: {parent_question}
- Previous Level {parent_level} Answer: {parent_answer}

Target Q&A to Evaluate:
- Level {child_level} Question: {child_question}
- Level {child_level} Answer: {child_answer}
- Expected Level: {child_level} ({level_description})

Core Evaluation Criteria (3 key dimensions):
1. Logical Coherence: Is the question internally consistent and does the answer logically follow from the question?
2. Difficulty Appropriateness: Does the question match the cognitive demands of Level {child_level}? Does it demonstrate the expected depth of thinking?
3. Image Alignment: Do both the question and answer accurately reflect and align with the provided image content?

Evaluation Rules:
- Evaluate each dimension on a 0-1.0 scale with precision
- Consider overall quality holistically
- Focus reasoning on identifying current limitations and areas needing improvement
- High scores (0.8+) for excellent Q&A pairs, medium scores (0.5-0.7) for adequate ones, low scores (<0.5) for problematic ones

You must respond with JSON in exactly this format:
{
  "quality_score": 0.0-1.0,
  "reasoning": "Identify specific issues and areas that need improvement (focus on limitations, not strengths)"
}

Provide your evaluation now.
"""


EVAL_QUESTION_BASE = """\
You are answering a multiple-choice question about the provided image.

Question: {question}

Options:
A. {option_a}
B. {option_b}
C. {option_c}
D. {option_d}

Respond with ONLY the letter (A, B, C, or D) of the single best option.
"""


EVAL_QUESTION_CONTEXT = """\
You are answering a multiple-choice question about the provided image.

Previously answered questions about this image:
{context_block}

Question: {question}

Options:
A. {option_a}
B. {option_b}
C. {option_c}
D. {option_d}

Respond with ONLY the letter (A, B, C, or D) of the single best option.
"""


TEMPLATES: dict[str, str] = {
    "bench_l3_analysis": BENCH_L3_ANALYSIS,
    "bench_l2_gen": BENCH_L2_GEN,
    "bench_l1_gen": BENCH_L1_GEN,
    "validate_l2_l3": VALIDATE_L2_L3,
    "validate_l1_l2": VALIDATE_L1_L2,
    "mcts_l1_gen": MCTS_L1_GEN,
    "mcts_l2_gen": MCTS_L2_GEN,
    "mcts_l3_gen": MCTS_L3_GEN,
    "mcts_eval": MCTS_EVAL,
    "eval_question_base": EVAL_QUESTION_BASE,
    "eval_question_context": EVAL_QUESTION_CONTEXT,
}

TEMPLATE_IDS = tuple(TEMPLATES)

# A placeholder is a braced lowercase identifier; literal JSON braces in the
# template bodies never match this shape.
_PLACEHOLDER = re.compile(r"\{([a-z][a-z0-9_]*)\}")


def get_template(template_id: str, overrides_dir: str | Path | None = None) -> str:
    if template_id not in TEMPLATES:
        raise UnknownTemplate(f"no template named {template_id!r}")
    if overrides_dir is not None:
        candidate = Path(overrides_dir) / f"{template_id}.txt"
        if candidate.exists():
            return candidate.read_text(encoding="utf-8")
    return TEMPLATES[template_id]


def placeholders(template_id: str, overrides_dir: str | Path | None = None) -> set[str]:
    return set(_PLACEHOLDER.findall(get_template(template_id, overrides_dir)))


def render(
    template_id: str,
    bindings: dict[str, str],
    overrides_dir: str | Path | None = None,
) -> str:
    """Substitute every placeholder; bindings are inserted verbatim.

    Raises MissingBinding for any unresolved placeholder, so a rendered
    prompt never ships with a dangling slot. Substituted values are not
    re-scanned, so braces inside bindings stay literal.
    """
    template = get_template(template_id, overrides_dir)

    def _sub(match: re.Match) -> str:
        name = match.group(1)
        if name not in bindings:
            raise MissingBinding(name, template_id)
        return str(bindings[name])

    return _PLACEHOLDER.sub(_sub, template)


def mcts_generation_template(level: int) -> str:
    return {1: "mcts_l1_gen", 2: "mcts_l2_gen", 3: "mcts_l3_gen"}[int(level)]


def validation_template(lower_level: int) -> str:
    return {1: "validate_l1_l2", 2: "validate_l2_l3"}[int(lower_level)]
