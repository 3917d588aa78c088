"""Prompt composition and output parsing for every agent role.

Rendering is pure: (problem, conditioning state) -> prompt text. Parsing is
total: any model output maps to a value, with diagnostics instead of
exceptions for malformed content. Bank parsers fall back to the previous bank
so one bad update can never destroy accumulated memory.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Any, Sequence

from . import templates
from .domain import (
    Candidate,
    ExperienceBank,
    GuidelineBank,
    Problem,
    Rollout,
    VerificationResult,
    normalize_entry,
    normalize_experience_bank,
)
from .errors import TemplateError


@dataclass(frozen=True)
class InitialMode:
    """First iteration: plain attempt with no accumulated state."""


@dataclass(frozen=True)
class ExploitMode:
    """Refine against last iteration's rollouts; experience is None when ablated."""

    previous_rollouts: tuple[Rollout, ...]
    experience: ExperienceBank | None


@dataclass(frozen=True)
class ExploreMode:
    """Try a direction not already logged in the guideline bank."""

    guidelines: GuidelineBank


SolutionMode = InitialMode | ExploitMode | ExploreMode


@dataclass(frozen=True)
class ParseDiagnostics:
    ok: bool
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class JudgeDecision:
    equivalent: bool
    reasoning: str
    parse_ok: bool


def extract_solution(text: str) -> tuple[str, bool]:
    """Return (solution text, marker found).

    Takes everything after the last '## Solution' marker, which is the
    finalized section in the required output format. Without the marker the
    full text is returned and the caller records the fallback.
    """
    marker = templates.SOLUTION_MARKER
    pos = text.rfind(marker)
    if pos < 0:
        return text, False
    return text[pos + len(marker):].strip(), True


def _bullet_list(entries: Sequence[str]) -> str:
    if not entries:
        return templates.EMPTY_LIST_TOKEN
    return "\n".join(f"- {entry}" for entry in entries)


def _numbered_list(entries: Sequence[str]) -> str:
    if not entries:
        return templates.EMPTY_LIST_TOKEN
    return "\n".join(f"{i}. {entry}" for i, entry in enumerate(entries, start=1))


def _bank_json(data: dict[str, Any]) -> str:
    return json.dumps(data, ensure_ascii=False, sort_keys=True, indent=2)


def _attempts_block(rollouts: Sequence[Rollout]) -> str:
    blocks = [templates.PREVIOUS_ATTEMPTS_HEADER]
    for number, rollout in enumerate(rollouts, start=1):
        blocks.append(
            templates.ATTEMPT_BLOCK.render(
                number=str(number),
                solution=rollout.candidate.extracted_solution or "(empty solution)",
                summary=rollout.summary or "(none)",
            )
        )
    return "\n\n".join(blocks)


def _rollouts_block(rollouts: Sequence[Rollout]) -> str:
    blocks = []
    for number, rollout in enumerate(rollouts, start=1):
        blocks.append(
            templates.ROLLOUT_BLOCK.render(
                number=str(number),
                solution=rollout.candidate.extracted_solution or "(empty solution)",
                summary=rollout.summary or "(none)",
            )
        )
    return "\n\n".join(blocks)


def _score_str(score: float) -> str:
    return "1" if score == 1.0 else ("0.5" if score == 0.5 else "0")


def render_solution_prompt(problem: Problem, mode: SolutionMode) -> str:
    """Compose the solution-agent prompt for the given branch."""
    if isinstance(mode, InitialMode):
        return templates.PROOF_GENERATION.render(question=problem.statement)
    if isinstance(mode, ExploitMode):
        if not mode.previous_rollouts:
            raise TemplateError("exploit mode needs at least one previous rollout")
        parts = [
            templates.REFINE_GENERATION.render(question=problem.statement),
            _attempts_block(mode.previous_rollouts),
        ]
        if mode.experience is not None:
            parts.append(
                templates.EXPERIENCE_CONTEXT.render(
                    anchors_list=_bullet_list(mode.experience.verified_anchors),
                    heuristics_list=_bullet_list(mode.experience.error_avoidance_heuristics),
                )
            )
        return "\n\n".join(parts)
    if isinstance(mode, ExploreMode):
        return "\n\n".join(
            [
                templates.REFINE_GENERATION.render(question=problem.statement),
                templates.GUIDELINE_CONSTRAINT.render(
                    tried_list=_numbered_list(mode.guidelines.guidelines)
                ),
            ]
        )
    raise TemplateError(f"unknown solution mode: {mode!r}")


def render_verification_prompt(problem: Problem, candidate: Candidate) -> str:
    if not candidate.extracted_solution.strip():
        raise TemplateError("cannot verify a candidate with an empty solution")
    return templates.VERIFICATION.render(
        question=problem.statement, proof=candidate.extracted_solution
    )


def render_summary_prompt(
    problem: Problem,
    candidate: Candidate,
    verifications: Sequence[VerificationResult],
) -> str:
    if not verifications:
        raise TemplateError("summary needs at least one verification report")
    reports = "\n\n".join(
        templates.VERIFICATION_REPORT_BLOCK.render(
            number=str(i), score=_score_str(v.score), feedback=v.feedback
        )
        for i, v in enumerate(verifications, start=1)
    )
    return templates.SUMMARY_CONSOLIDATION.render(
        question=problem.statement,
        proof=candidate.extracted_solution,
        verifications=reports,
    )


def render_experience_prompt(
    problem: Problem, rollouts: Sequence[Rollout], previous: ExperienceBank
) -> str:
    return templates.EXPERIENCE_EVOLUTION.render(
        question=problem.statement,
        existing_experiences=_bank_json(previous.to_json_dict()),
        rollouts=_rollouts_block(rollouts),
    )


def render_guideline_prompt(
    problem: Problem, rollouts: Sequence[Rollout], previous: GuidelineBank
) -> str:
    return templates.GUIDELINE_UPDATE.render(
        question=problem.statement,
        existing_guidelines=_bank_json(previous.to_json_dict()),
        rollouts=_rollouts_block(rollouts),
    )


def render_judge_user_prompt(problem_statement: str, reference: str, student_answer: str) -> str:
    return templates.JUDGE_USER.render(
        problem=problem_statement, reference=reference, student_answer=student_answer
    )


def render_novelty_judge_user_prompt(
    problem_statement: str, tried_guidelines: Sequence[str], student_solution: str
) -> str:
    return templates.NOVELTY_JUDGE_USER.render(
        problem=problem_statement,
        tried_list=_numbered_list(tried_guidelines),
        student_solution=student_solution,
    )


_BOXED_MARKER = "\\boxed{"

_SCORE_MAP = {"0": 0.0, "0.5": 0.5, "1": 1.0}


def _last_boxed_content(text: str) -> str | None:
    """Content of the last \\boxed{...} with balanced braces, or None."""
    pos = text.rfind(_BOXED_MARKER)
    while pos >= 0:
        depth = 1
        start = pos + len(_BOXED_MARKER)
        for i in range(start, len(text)):
            ch = text[i]
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return text[start:i]
        # Unbalanced: try an earlier occurrence.
        pos = text.rfind(_BOXED_MARKER, 0, pos)
    return None


def parse_verification(text: str) -> VerificationResult:
    """Map verifier output to a scored result; the last boxed token wins.

    Anything other than a boxed 0, 0.5, or 1 scores 0 with parse_ok False.
    The full output text is kept as feedback either way.
    """
    content = _last_boxed_content(text)
    if content is None:
        return VerificationResult(score=0.0, feedback=text, parse_ok=False)
    token = content.strip()
    if token not in _SCORE_MAP:
        return VerificationResult(score=0.0, feedback=text, parse_ok=False)
    return VerificationResult(score=_SCORE_MAP[token], feedback=text, parse_ok=True)


_FENCED_JSON = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)


def _balanced_spans(text: str) -> list[str]:
    """Balanced {...} spans in order of opening position, string-aware."""
    spans: list[str] = []
    i = 0
    n = len(text)
    while i < n:
        if text[i] != "{":
            i += 1
            continue
        depth = 0
        in_string = False
        escaped = False
        for j in range(i, n):
            ch = text[j]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
            elif ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    spans.append(text[i : j + 1])
                    break
        i += 1
    return spans


def extract_json_object(text: str) -> dict[str, Any] | None:
    """First fenced json block, else first balanced brace span that parses."""
    for match in _FENCED_JSON.finditer(text):
        try:
            data = json.loads(match.group(1))
        except json.JSONDecodeError:
            continue
        if isinstance(data, dict):
            return data
    for span in _balanced_spans(text):
        try:
            data = json.loads(span)
        except json.JSONDecodeError:
            continue
        if isinstance(data, dict):
            return data
    return None


def _string_list(value: Any, key: str, warnings: list[str]) -> list[str] | None:
    if not isinstance(value, list):
        warnings.append(f"{key} is not a list")
        return None
    out: list[str] = []
    for item in value:
        if isinstance(item, str):
            out.append(item)
        else:
            warnings.append(f"{key} entry is not a string and was dropped")
    return out


def parse_experience_update(
    text: str, previous: ExperienceBank, cap: int = 64
) -> tuple[ExperienceBank, ParseDiagnostics]:
    """Parse a full replacement bank; on any failure keep the previous bank."""
    warnings: list[str] = []
    data = extract_json_object(text)
    if data is None:
        return previous, ParseDiagnostics(ok=False, warnings=("no JSON object found",))
    if "verified_anchors" not in data or "error_avoidance_heuristics" not in data:
        return previous, ParseDiagnostics(ok=False, warnings=("missing required bank keys",))
    anchors = _string_list(data["verified_anchors"], "verified_anchors", warnings)
    heuristics = _string_list(
        data["error_avoidance_heuristics"], "error_avoidance_heuristics", warnings
    )
    if anchors is None or heuristics is None:
        return previous, ParseDiagnostics(ok=False, warnings=tuple(warnings))
    changes_log = data.get("changes_log")
    if not isinstance(changes_log, str):
        if "changes_log" in data:
            warnings.append("changes_log is not a string; treated as empty")
        else:
            warnings.append("changes_log missing; treated as empty")
        changes_log = ""
    bank = normalize_experience_bank(anchors, heuristics, changes_log, cap=cap)
    return bank, ParseDiagnostics(ok=True, warnings=tuple(warnings))


def parse_guideline_update(text: str) -> tuple[tuple[str, ...], str, ParseDiagnostics]:
    """Parse the proposed full guideline list; the merge happens elsewhere.

    Returns (proposed entries, changes_log, diagnostics). Failure returns an
    empty proposal, which merges to the identity.
    """
    warnings: list[str] = []
    data = extract_json_object(text)
    if data is None:
        return (), "", ParseDiagnostics(ok=False, warnings=("no JSON object found",))
    if "updated_guidelines" not in data:
        return (), "", ParseDiagnostics(ok=False, warnings=("missing updated_guidelines",))
    entries = _string_list(data["updated_guidelines"], "updated_guidelines", warnings)
    if entries is None:
        return (), "", ParseDiagnostics(ok=False, warnings=tuple(warnings))
    changes_log = data.get("changes_log")
    if not isinstance(changes_log, str):
        if "changes_log" in data:
            warnings.append("changes_log is not a string; treated as empty")
        else:
            warnings.append("changes_log missing; treated as empty")
        changes_log = ""
    return tuple(entries), normalize_entry(changes_log), ParseDiagnostics(
        ok=True, warnings=tuple(warnings)
    )


def parse_judge(text: str) -> JudgeDecision:
    """Equivalence verdict; anything unparseable counts as not equivalent."""
    data = extract_json_object(text)
    if data is None or not isinstance(data.get("equivalent"), bool):
        return JudgeDecision(equivalent=False, reasoning=text, parse_ok=False)
    reasoning = data.get("reasoning")
    return JudgeDecision(
        equivalent=data["equivalent"],
        reasoning=reasoning if isinstance(reasoning, str) else "",
        parse_ok=True,
    )


def parse_novelty_judge(text: str) -> int:
    """Label in {1, 0, -1}; unparseable output maps to -1 (unable to judge)."""
    data = extract_json_object(text)
    if data is None:
        return -1
    label = data.get("label")
    if isinstance(label, bool) or label not in (1, 0, -1):
        return -1
    return label
