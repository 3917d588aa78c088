"""Versioned prompt template assets.

Templates are plain text with {placeholder} markers. Rendering substitutes
exactly the declared placeholders and nothing else, so literal braces in the
text (JSON examples, LaTeX) pass through untouched. TEMPLATE_SET_HASH covers
every asset in this module and is recorded in each run manifest, so a run
directory can always be traced to the template set that produced it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .errors import TemplateError

EMPTY_LIST_TOKEN = "(none yet)"

SOLUTION_MARKER = "## Solution"


@dataclass(frozen=True)
class Template:
    name: str
    text: str
    placeholders: frozenset[str]

    def __post_init__(self) -> None:
        for key in self.placeholders:
            if "{" + key + "}" not in self.text:
                raise TemplateError(f"template {self.name}: placeholder {{{key}}} not in text")

    def render(self, **values: str) -> str:
        given = set(values)
        missing = self.placeholders - given
        if missing:
            raise TemplateError(f"template {self.name}: missing values for {sorted(missing)}")
        unknown = given - self.placeholders
        if unknown:
            raise TemplateError(f"template {self.name}: unknown placeholders {sorted(unknown)}")
        out = self.text
        for key in sorted(values):
            out = out.replace("{" + key + "}", values[key])
        return out


SYSTEM_PROMPT = (
    "You are a helpful assistant. To answer the user's question, you first think about "
    "the reasoning process and then provide the user with the answer. The reasoning "
    "process is enclosed within <think> </think> tags, i.e., <think> reasoning process "
    "here </think> answer here."
)


PROOF_GENERATION = Template(
    name="proof_generation",
    placeholders=frozenset({"question"}),
    text="""Your task is to solve a given problem. The problem may ask you to prove a statement, or ask for an answer. If finding an answer is required, you must come up with the answer, and your final solution must also be a rigorous proof of that answer being valid.

**Goal:** Your objective is to produce a solution that is **exceptionally comprehensive, strictly logical, and easy to follow**.

**Internal Quality Control Standards:**
Before generating your final response, you must internally verify your reasoning against the following strict criteria (though you do not need to output this verification):
1.  **Completeness:** The solution must cover all cases and steps. If minor details are omitted, it is considered imperfect.
2.  **Rigour:** Fatal errors or severe omissions are unacceptable.
3.  **Self-Containment:** Referencing external papers/theorems is allowed **IF AND ONLY IF** you also present a valid proof or clear derivation of the referenced argument. Merely citing a result without showing why it applies or how it works is considered a failure.

**Process:**
1.  Reason carefully about how to solve the problem.
2.  Draft your solution mentally or in your scratchpad.
3.  **Refine your solution** by fixing any potential logical gaps, ambiguity, or "hand-waving" arguments until it meets the highest standard of mathematical proof.
4.  Present *only* your best, finalized version.

**Output Format:**
Your response should follow this exact markdown format:

## Solution
...
// Your final, rigorous solution to the problem here. Ensure all steps are explicitly shown and justified.

---
Here is your task input:
## Problem
{question}""",
)


VERIFICATION = Template(
    name="verification",
    placeholders=frozenset({"question", "proof"}),
    text="""## Instruction
Your task is to evaluate the quality of a solution to a problem. The problem may ask for a proof of statement, or ask for an answer. If finding an answer is required, the solution should present the answer, and it should also be a rigorous proof of that answer being valid.

Please evaluate the solution and score it according to the following criteria:
- If the solution is completely correct, with all steps executed properly and clearly demonstrated, then the score is 1
- If the solution is generally correct, but with some details omitted or minor errors, then the score is 0.5
- If the solution does not actually address the required problem, contains fatal errors, or has severe omissions, then the score is 0
- Additionally, referencing anything from any paper does not save the need to prove the reference. It's okay IF AND ONLY IF the solution also presents a valid proof of the reference argument(s); otherwise, if the solution omits the proof or if the proof provided is not completely correct, the solution should be scored according to the criteria above, and definitely not with a score of 1.

Please carefully reason out and analyze the quality of the solution below, and in your final response present a detailed evaluation of the solution's quality followed by your score. Therefore, your response should be in the following format:

Here is my evaluation of the solution:
...
// Your evaluation here. You are required to present in detail the key steps of the solution or the steps for which you had doubts regarding their correctness, and explicitly analyze whether each step is accurate: for correct steps, explain why you initially doubted their correctness and why they are indeed correct; for erroneous steps, explain the reason for the error and the impact of that error on the solution.

Based on my evaluation, the final overall score should be:
\\boxed{...}
// where ... should be the final overall score (0, 0.5, or 1, and nothing else) based on the above criteria.

---
Here is your task input:
## Problem
{question}
## Solution
{proof}""",
)


REFINE_GENERATION = Template(
    name="refine_generation",
    placeholders=frozenset({"question"}),
    text="""Your task is to solve a given problem. The problem may ask you to prove a statement, or ask for an answer. If finding an answer is required, you must come up with the answer, and your final solution must also be a rigorous proof of that answer being valid.

**Context & Objective:**
Previous solution attempts have been made on this problem. Each attempt comes with a verification summary that identifies specific errors, gaps, or disputed steps. Your primary goal is to **carefully analyze these previous attempts and their feedback**, then produce a **new, corrected solution** that directly addresses the identified flaws.

**Internal Quality Control Standards:**
Before generating your final response, you must internally verify your reasoning against the following strict criteria:
1.  **Error Correction:** You must explicitly address the flaws pointed out in the verification summaries. Do NOT repeat logic that has already been identified as incorrect.
2.  **Completeness:** The solution must cover all cases and steps. If minor details are omitted, it is considered imperfect.
3.  **Rigour:** Fatal errors or severe omissions are unacceptable.
4.  **Self-Containment:** Referencing external papers/theorems is allowed **IF AND ONLY IF** you also present a valid proof or clear derivation of the referenced argument.

**Process:**
1.  Read the **Problem** carefully.
2.  Study each **Previous Attempt** and its **Verification Summary**. Identify exactly what went wrong, what was incomplete, and what (if anything) was correct.
3.  Reason about how to fix the specific issues while retaining any correct sub-results from previous attempts.
4.  Draft your refined solution, ensuring it does not repeat the confirmed errors.
5.  Present *only* your best, finalized, and fully corrected version.

**Output Format:**
Your response should follow this exact markdown format:

## Solution
...
// Your final, rigorous, and corrected solution to the problem here. Ensure all steps are explicitly shown and justified.

---
Here is your task input:
## Problem
{question}""",
)


EXPERIENCE_CONTEXT = Template(
    name="experience_context",
    placeholders=frozenset({"anchors_list", "heuristics_list"}),
    text="""[Accumulated Experience & Constraints]

### Verified Anchors (Proven Facts)
The following conclusions have already been rigorously verified.
**Action:** Use them directly as premises. Do NOT re-prove them.
{anchors_list}

### Strategic Heuristics (Methods & Pitfalls)
The following are verified strategies and identified pitfalls from previous attempts.
**Action:** Prioritize these methods and strictly avoid the errors mentioned.
{heuristics_list}""",
)


GUIDELINE_CONSTRAINT = Template(
    name="guideline_constraint",
    placeholders=frozenset({"tried_list"}),
    text="""[Exploration Directive --- Read Carefully Before Generating]

## What Are These Guidelines?
The entries below are a log of **high-level solution strategies** that have already been attempted on this exact problem in previous iterations. Each entry describes the broad mathematical framework, key structural insight, and angle of attack used --- for example: which technique was applied (induction, generating functions, algebraic manipulation, geometric transformation, probabilistic argument, etc.), what the central idea was, and why it ultimately failed or fell short.

## Why You Must Choose a Different Approach
This system runs many iterations to explore the solution space. Repeating a strategy that has already been tried wastes an entire iteration and produces no new information. The verification system has already evaluated these approaches and found them insufficient to produce a fully correct solution. Attempting the same strategy again --- even with minor tweaks in notation or presentation --- will almost certainly lead to the same failure modes.

To help us effectively explore the solution space, please try to avoid repeating the exact same paths that have already proven unsuccessful.

You are encouraged to explore a new direction. This could mean adopting a different mathematical framework entirely, or it could mean using a similar foundational approach while making distinctly different choices in your intermediate steps, structural manipulations, or angles of attack to bypass the previous pitfalls.

## Already-Attempted Strategies (DO NOT REPEAT ANY OF THESE):
{tried_list}""",
)


EXPERIENCE_EVOLUTION = Template(
    name="experience_evolution",
    placeholders=frozenset({"question", "existing_experiences", "rollouts"}),
    text="""You are the **Curator of a Mathematical Experience Bank**.

## What is the Experience Bank?
The Experience Bank stores **low-level, concrete, directly actionable knowledge** extracted from actual solution attempts. This is the fine-grained, technical residue of working through the mathematics itself -- not high-level strategy (that belongs in the Guideline Bank).
The bank contains two categories of entries:
---
### Category 1: Verified Anchors
A Verified Anchor is a **non-trivial intermediate result** that has been confirmed correct by verifiers and is worth preserving so that future solvers can build on it without re-deriving it. An anchor must meet **all three** of the following criteria:
1. **Non-trivial**: It must involve meaningful mathematical work -- a derivation, a transformation, a non-obvious equivalence, or a structural observation. Trivial arithmetic evaluations (e.g., "2025 == 2 mod 7") do NOT qualify unless the congruence itself is the key insight that unlocks a deeper argument.
2. **Reusable**: It must be a stepping stone -- something a future solver can directly cite and proceed from, without needing to redo the work. Prefer results that establish structure over results that are dead ends.
3. **Verifier-backed**: It must be explicitly confirmed correct by the verification summary. If verifiers are split on a step, do not add it as an Anchor.
Verified Anchors fall into the following sub-types (use these to guide what you extract):
- **Structural Reduction**: A transformation that rewrites the problem or a sub-problem into a simpler or more tractable form.
  - Example: "The substitution $u = x - 1/x$ reduces the integral to $\\int \\frac{du}{u^2+2}$, which is a standard form."
- **Algebraic Equivalence**: A non-obvious algebraic identity or simplification that holds specifically for this problem's constraints.
  - Example: "Under the constraint $a + b + c = 1$, the expression $a^2 + b^2 + c^2 - ab - bc - ca$ simplifies to $1 - 3(ab + bc + ca)$."
- **Logical Implication/Domain Constraint**: A deduction that narrows the solution space or establishes a necessary condition -- particularly useful for eliminating cases.
  - Example: "From the parity argument, the LHS is always even, so $n$ must be even. This eliminates all odd $n$ from consideration."
- **Correct Application of a Theorem or Identity**: A confirmed correct instantiation of a known result (e.g., AM-GM, Cauchy-Schwarz, Vieta's, Fermat's Little Theorem) in the specific context of this problem, including verification that the applicability conditions are met.
  - Example: "AM-GM applies here because all terms are positive under the constraint $x, y > 0$, giving $x/y + y/x \\geq 2$. The equality condition $x = y$ is achievable."
- **Boundary/Extremal Result**: A confirmed extremal value, equality case, or boundary behavior that characterizes the solution.
  - Example: "The maximum of $f(x) = x(1-x)$ on $[0,1]$ is $1/4$, achieved at $x = 1/2$."
---
### Category 2: Error Avoidance Heuristics
An Error Avoidance Heuristic records a **specific, concrete pitfall** that was encountered in a solution attempt and confirmed as an error by verifiers. Its purpose is to warn future solvers away from traps that look plausible but lead to failure.
A good heuristic must:
- Identify the **specific step or reasoning pattern** that failed (not just "the solution was wrong")
- Explain **why** it fails in the context of this problem
- Be specific enough that a solver can recognize and avoid it
Examples:
- "Squaring both sides of the inequality at step 3 introduces extraneous solutions when $x < 0$. Always case-split on the sign of $x$ before squaring."
- "The naive application of AM-GM fails here because the equality condition requires $a = b = c$, which is incompatible with the constraint $a + b + c = 0$. Do not use AM-GM without verifying the equality condition is reachable."
- "Treating the recurrence as linear and applying the characteristic equation ignores the non-linear term at step 5. The linearization is invalid beyond first order."
---
## What does NOT belong in the Experience Bank:
- High-level strategic directions (e.g., "try induction", "use a generating function approach") -- those belong in the Guideline Bank.
- Trivial arithmetic facts with no structural significance (e.g., "2025 = 45^2", "7 * 289 = 2023") -- these provide no leverage to a future solver.
- Vague general advice not tied to specific steps in the solution (e.g., "be careful with signs", "check boundary cases").
- Any result from a low-scoring rollout that has not been explicitly validated by the verification summary.
---
## Your Task
You are given all solution attempts (rollouts) from the current iteration, each paired with a verification summary. Your task is to **UPDATE** the existing Experience Bank by extracting new knowledge from these rollouts.
## Operations
1. **ADD**: Extract new Verified Anchors or Error Avoidance Heuristics that are not already covered by the existing bank. Prioritize insights confirmed consistently across multiple rollouts.
2. **KEEP**: Retain all existing entries that remain valid and are not contradicted by the new rollouts.
3. **REFINE**: If a new rollout provides a more precise version of an existing entry, rewrite it to be clearer. Only merge entries that say the exact same thing about the exact same step.
4. **DELETE**: Remove entries explicitly revealed as incorrect by the verification summary. Remove entries that become fully subsumed after refinement.
## Quantity Guideline
Aim for **20-35 entries** in total across both categories. Do NOT aggressively compress -- fine-grained, specific entries are more useful than over-generalized ones. Only merge entries that are truly redundant.
## Output Requirements
Output the **FULL updated bank** in JSON format (replacing the old bank entirely):
```json
{
    "verified_anchors": [
        "<sub-type>: <concrete verified intermediate result with enough context to be self-contained>",
        ...
    ],
    "error_avoidance_heuristics": [
        "Avoid: <specific pitfall, why it fails in this problem, and what to do instead>",
        ...
    ],
    "changes_log": "Brief summary of what was added, refined, or removed and why."
}
```

When writing a Verified Anchor, prefix it with its sub-type (e.g., `Structural Reduction:`, `Algebraic Equivalence:`, `Logical Implication:`, `Theorem Application:`, `Boundary Result:`).
## Task Input
### Problem:
{question}
### Existing Bank (Current State):
{existing_experiences}
### Current Iteration Rollouts:
{rollouts}""",
)


GUIDELINE_UPDATE = Template(
    name="guideline_update",
    placeholders=frozenset({"question", "existing_guidelines", "rollouts"}),
    text="""You are a **Strategic Advisor** managing the Guideline Bank for an iterative mathematical problem-solving system.
## What is the Guideline Bank?
The Guideline Bank is a **log of high-level solution strategies** that have been attempted so far on this problem. Its purpose is twofold:
1. **Memory of exploration**: It records which broad strategic directions have already been tried, so the solver does not waste computation repeating the same approach.
2. **Diversity enforcement**: When the solver is about to generate a new solution, it will be shown this bank and instructed to pursue a direction that is **fundamentally different** from everything listed here. The bank therefore acts as the primary mechanism for controlling exploration -- the richer and more precise this log is, the better the solver can navigate away from exhausted directions.
## What is a "Guideline" entry?
A guideline entry describes the **high-level conceptual approach and proof strategy** of a solution attempt -- not the low-level computation details (those belong in the Experience Bank). A good guideline entry answers:
- What is the overall mathematical framework or technique being used? (e.g., induction, generating functions, probabilistic method, algebraic manipulation, geometric transformation, etc.)
- What is the key structural insight or angle of attack? (e.g., "reduce to a fixed-point problem", "rewrite as a telescoping sum", "embed in a higher-dimensional space")
- If relevant: what makes this attempt distinct from others already in the bank?
A guideline entry should be **concise (2-4 sentences)** but **precise enough** that a future solver can clearly understand what approach it refers to and consciously choose a different one.
**Examples of good guideline entries:**
- "Attempted a direct induction on n. The inductive step tried to bound the sum by splitting into two halves, but the resulting inequality was too weak to close. Approach: elementary induction with splitting argument."
- "Used generating functions: encoded the recurrence as a rational function and attempted partial fraction decomposition to extract closed-form coefficients. The poles were algebraically intractable due to an irreducible quartic denominator."
- "Geometric approach: interpreted the inequality as a statement about convexity of a curve and attempted to apply Jensen's inequality. Failed because the function was not convex on the full domain."
**What does NOT belong in the Guideline Bank:**
- Low-level computation details or specific algebraic steps (those belong in the Experience Bank).
- Vague entries like "tried algebra" or "used calculus" -- entries must be specific enough to be distinguishable.
## Your Task
You are given all solution attempts (rollouts) from the current iteration. For each rollout, extract a guideline entry describing its high-level strategy. Then update the existing Guideline Bank by adding the new entries.
**Important: The Guideline Bank is append-only (only grows, never shrinks).** Do not remove or modify existing entries -- only add new ones. If a new rollout's strategy is essentially identical to an existing entry, do not add a duplicate; instead, note it in the changes log.
## Output Requirements
Output the **complete updated bank** (all existing entries + new entries) in JSON format:
```json
{
    "updated_guidelines": [
        "Guideline 1: <high-level strategy description>",
        "Guideline 2: ...",
        ...
    ],
    "changes_log": "Brief explanation of which new strategies were added and which rollouts were considered duplicates of existing entries."
}
```
## Task Input
### Problem:
{question}
### Existing Guideline Bank:
{existing_guidelines}
### Current Iteration Rollouts:
{rollouts}""",
)


# Authored in-house: consolidates the per-candidate verification reports into
# the single summary carried forward with each rollout.
SUMMARY_CONSOLIDATION = Template(
    name="summary_consolidation",
    placeholders=frozenset({"question", "proof", "verifications"}),
    text="""Your task is to consolidate several independent verification reports about one candidate solution into a single short summary.

You are given the problem, the candidate solution, and the full set of verification reports. Each report ends with a score: 1 means fully correct, 0.5 means generally correct with minor issues, 0 means fatal errors or severe omissions.

Write a consolidated verification summary that:
1. Highlights the reasoning steps the reports agree are valid, so a future attempt can keep them.
2. Identifies the remaining flaws, gaps, or disputed steps, citing the specific step each report objects to.
3. Notes any disagreement between the reports instead of papering over it.

Do not re-solve the problem. Do not introduce new mathematics. Keep the summary focused and concrete.

---
Here is your task input:
## Problem
{question}
## Candidate Solution
{proof}
## Verification Reports
{verifications}""",
)


JUDGE_SYSTEM = """You are an expert Math Evaluator. Your task is to verify if the [Student's Answer] is mathematically equivalent to the [Reference Answer] for the given [Problem].
Rules for Equivalence:
1. Numerical: 0.5 is equivalent to 1/2. 1000 is equivalent to 1,000.
2. Algebraic: x+1 is equivalent to 1+x. \\frac{1}{\\sqrt{2}} is equivalent to \\frac{\\sqrt{2}}{2}.
3. Formatting: Ignore Markdown formatting (bold, italic), latex styling (\\text{}, \\mathrm{}), or whitespace differences.
4. Content: Focus ONLY on the final result value. Ignore the student's reasoning steps unless the result is embedded within them.
5. Units: If the reference implies units and the student omits them (or vice versa) but the number is correct, count it as correct unless the problem explicitly demands unit conversion.

Output Format:
Respond strictly in JSON format. Do not output markdown code blocks."""


JUDGE_USER = Template(
    name="judge_user",
    placeholders=frozenset({"problem", "reference", "student_answer"}),
    text="""<problem>
{problem}
</problem>

<reference>
{reference}
</reference>

<student_answer>
{student_answer}
</student_answer>

[Task]
Compare the Student's Answer to the Reference Answer.
1. Analyze the mathematical value of both answers.
2. Determine if they represent the same solution (equivalent).
3. If the student answer contains a derivation, look for the final result.

Respond in JSON:
{
    "reasoning": "Brief explanation...",
    "equivalent": true/false
}""",
)


NOVELTY_JUDGE_SYSTEM = """You are an expert mathematical strategy analyst. Your task is to determine whether a student's solution follows the exploration directive given to them -- specifically, whether they repeated any of the previously-attempted strategies that they were explicitly instructed to avoid.

### Classification Rules:

**Label 0 (Violated -- strategy was repeated):**
- The student's solution uses a high-level approach, mathematical framework, or angle of attack that is essentially the same as one of the already-attempted strategies listed in the directive.
- Minor surface-level differences in notation or presentation do NOT count as a distinct strategy.

**Label 1 (Compliant -- genuinely new strategy):**
- The student's solution adopts a fundamentally different approach from all listed strategies.
- It may share some basic tools (e.g., both use algebra) but takes a clearly different structural route, key insight, or angle of attack.

**Label -1 (Unable to Judge):**
- The solution is too short, too vague, or too incomplete to determine its high-level strategy.

### Output Format:
Respond strictly in a JSON code block. Example:
```json
{"identified_strategy": "...", "matched_guideline": null, "reasoning": "...", "label": 1}
```
Do NOT output any text outside the code block."""


NOVELTY_JUDGE_USER = Template(
    name="novelty_judge_user",
    placeholders=frozenset({"problem", "tried_list", "student_solution"}),
    text="""<problem>
{problem}
</problem>

<already_attempted_strategies>
{tried_list}
</already_attempted_strategies>

<student_solution>
{student_solution}
</student_solution>

[Task]
Determine whether the student's solution repeats any of the already-attempted strategies.

1. **Identify** the high-level strategy used in the student's solution (mathematical framework, key structural insight, angle of attack).
2. **Compare** it against each entry in <already_attempted_strategies>.
3. **Classify**:
   - **1**: The student's strategy is genuinely different from ALL listed strategies.
   - **0**: The student's strategy is essentially the same as at least one listed strategy.
   - **-1**: Cannot determine the student's strategy (solution too vague/incomplete).

Respond in a JSON code block:
```json
{
    "identified_strategy": "Brief description of the strategy used in the student's solution...",
    "matched_guideline": "The guideline entry it matches, or null if none matched",
    "reasoning": "Explanation of why you assigned this label...",
    "label": 1
}
```""",
)


# Layout blocks used when composing multi-part prompts. Part of the hashed
# template set because changing them changes every rendered prompt.
PREVIOUS_ATTEMPTS_HEADER = "## Previous Attempts"

ATTEMPT_BLOCK = Template(
    name="attempt_block",
    placeholders=frozenset({"number", "solution", "summary"}),
    text="""### Attempt {number}
#### Solution
{solution}
#### Verification Summary
{summary}""",
)

ROLLOUT_BLOCK = Template(
    name="rollout_block",
    placeholders=frozenset({"number", "solution", "summary"}),
    text="""### Rollout {number}
#### Solution
{solution}
#### Verification Summary
{summary}""",
)

VERIFICATION_REPORT_BLOCK = Template(
    name="verification_report_block",
    placeholders=frozenset({"number", "score", "feedback"}),
    text="""### Verification {number} (score: {score})
{feedback}""",
)


_TEMPLATES: tuple[Template, ...] = (
    PROOF_GENERATION,
    VERIFICATION,
    REFINE_GENERATION,
    EXPERIENCE_CONTEXT,
    GUIDELINE_CONSTRAINT,
    EXPERIENCE_EVOLUTION,
    GUIDELINE_UPDATE,
    SUMMARY_CONSOLIDATION,
    JUDGE_USER,
    NOVELTY_JUDGE_USER,
    ATTEMPT_BLOCK,
    ROLLOUT_BLOCK,
    VERIFICATION_REPORT_BLOCK,
)

_STATIC_TEXTS: tuple[tuple[str, str], ...] = (
    ("system_prompt", SYSTEM_PROMPT),
    ("judge_system", JUDGE_SYSTEM),
    ("novelty_judge_system", NOVELTY_JUDGE_SYSTEM),
    ("previous_attempts_header", PREVIOUS_ATTEMPTS_HEADER),
    ("empty_list_token", EMPTY_LIST_TOKEN),
)


def template_set_hash() -> str:
    """SHA-256 over every template asset, for run-manifest provenance."""
    digest = hashlib.sha256()
    items = [(t.name, t.text) for t in _TEMPLATES] + list(_STATIC_TEXTS)
    for name, text in sorted(items):
        digest.update(name.encode("utf-8"))
        digest.update(b"\x00")
        digest.update(text.encode("utf-8"))
        digest.update(b"\x01")
    return digest.hexdigest()


TEMPLATE_SET_HASH = template_set_hash()
