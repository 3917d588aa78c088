"""Shared fixtures and script-building helpers.

Scripted backends are keyed by (role, sequence), so a full deterministic run
script can be generated from per-role response functions. The sequence layout
matches the engine's assignment: solutions and summaries at t*N + i,
verifications at (t*N + i)*M + m, memory agents at t.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable

import pytest

from tmas.backend import FinishReason, RoleTag, ScriptEntry, ScriptedBackend
from tmas.domain import Problem, RunConfig


def solution_text(answer: str, preamble: str = "Working through it.") -> str:
    return f"{preamble}\n## Solution\n{answer}"


def verification_text(score: float, feedback: str = "Checked each step.") -> str:
    token = {0.0: "0", 0.5: "0.5", 1.0: "1"}[float(score)]
    return f"{feedback}\n\\boxed{{{token}}}"


def experience_json(
    anchors: list[str], heuristics: list[str], changes_log: str = "updated"
) -> str:
    return json.dumps(
        {
            "verified_anchors": anchors,
            "error_avoidance_heuristics": heuristics,
            "changes_log": changes_log,
        }
    )


def guideline_json(guidelines: list[str], changes_log: str = "appended") -> str:
    return json.dumps({"updated_guidelines": guidelines, "changes_log": changes_log})


def judge_json(equivalent: bool, reasoning: str = "compared to reference") -> str:
    return json.dumps({"equivalent": equivalent, "reasoning": reasoning})


class ScriptBuilder:
    """Accumulates script entries and materializes backends or JSONL files."""

    def __init__(self) -> None:
        self.entries: list[ScriptEntry] = []

    def add(
        self,
        role: RoleTag | str,
        seq: int,
        response: str,
        finish_reason: FinishReason = FinishReason.STOP,
        fail: str | None = None,
    ) -> "ScriptBuilder":
        self.entries.append(
            ScriptEntry(
                role_tag=RoleTag(role),
                key=f"seq:{seq}",
                response=response,
                finish_reason=finish_reason,
                fail=fail,
            )
        )
        return self

    def add_hash(self, role: RoleTag | str, prompt_hash: str, response: str) -> "ScriptBuilder":
        self.entries.append(
            ScriptEntry(role_tag=RoleTag(role), key=f"sha256:{prompt_hash}", response=response)
        )
        return self

    def backend(self, max_in_flight: int = 8) -> ScriptedBackend:
        return ScriptedBackend(self.entries, max_in_flight=max_in_flight)

    def write(self, path: Path) -> Path:
        lines = []
        for entry in self.entries:
            record = {
                "role_tag": entry.role_tag.value,
                "key": entry.key,
                "response": entry.response,
            }
            if entry.finish_reason is not FinishReason.STOP:
                record["finish_reason"] = entry.finish_reason.value
            if entry.fail:
                record["fail"] = entry.fail
            lines.append(json.dumps(record, ensure_ascii=False))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


SolutionFn = Callable[[int, int], str]
VerificationFn = Callable[[int, int, int], str]
SummaryFn = Callable[[int, int], str]
MemoryFn = Callable[[int], str]


def build_run_script(
    config: RunConfig,
    solution_fn: SolutionFn | None = None,
    verification_fn: VerificationFn | None = None,
    summary_fn: SummaryFn | None = None,
    experience_fn: MemoryFn | None = None,
    guideline_fn: MemoryFn | None = None,
) -> ScriptBuilder:
    """Script an entire run where every call succeeds and parses.

    Default responses: distinct correct-looking solutions, all-1.0
    verifications, plain summaries, and cumulative bank updates.
    """
    n, m, iters = config.num_candidates, config.num_verifications, config.max_iterations
    solution_fn = solution_fn or (lambda t, i: solution_text(f"answer t{t} c{i}"))
    verification_fn = verification_fn or (lambda t, i, j: verification_text(1.0))
    summary_fn = summary_fn or (lambda t, i: f"candidate {i} of iteration {t} looks sound")
    experience_fn = experience_fn or (
        lambda t: experience_json([f"fact {k}" for k in range(t + 1)], [])
    )
    guideline_fn = guideline_fn or (
        lambda t: guideline_json([f"strategy {k}" for k in range(t + 1)])
    )

    builder = ScriptBuilder()
    for t in range(iters):
        for i in range(n):
            s = t * n + i
            builder.add(RoleTag.SOLUTION, s, solution_fn(t, i))
            if m > 0:
                for j in range(m):
                    builder.add(RoleTag.VERIFICATION, s * m + j, verification_fn(t, i, j))
                builder.add(RoleTag.SUMMARY, s, summary_fn(t, i))
        if config.use_experience:
            builder.add(RoleTag.EXPERIENCE, t, experience_fn(t))
        if config.use_guideline:
            builder.add(RoleTag.GUIDELINE, t, guideline_fn(t))
    return builder


@pytest.fixture
def problem() -> Problem:
    return Problem(
        id="p-demo",
        statement="Count the tilings of a 2 by 4 board.",
        reference_answer="12",
    )


@pytest.fixture
def small_config() -> RunConfig:
    return RunConfig(
        max_iterations=2,
        num_candidates=2,
        num_verifications=2,
        epsilon=0.0,
        rng_seed=11,
    )
