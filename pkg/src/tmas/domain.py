"""Core value types, config validation, and canonical JSON codecs.

Every type here is an immutable value object, safe to share between
concurrent tasks. Serialization is canonical: sorted keys, UTF-8, no
timestamps, so equal values always produce identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import EmptyBenchmark, ParseError, RangeError

_SCORE_VALUES = (0.0, 0.5, 1.0)
_MAX_SEED = (1 << 64) - 1


def canonical_dumps(obj: Any) -> str:
    """One-line canonical JSON, used for JSONL records."""
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def canonical_file_dumps(obj: Any) -> str:
    """Indented canonical JSON for standalone files, trailing newline included."""
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2) + "\n"


def normalize_entry(text: str) -> str:
    """Trim and collapse internal whitespace runs to single spaces."""
    return " ".join(text.split())


class Branch(str, Enum):
    INITIAL = "initial"
    EXPLOIT = "exploit"
    EXPLORE = "explore"


@dataclass(frozen=True)
class Problem:
    id: str
    statement: str
    reference_answer: str | None = None

    def __post_init__(self) -> None:
        if not self.id.strip():
            raise ValueError("problem id must be non-empty")
        if not self.statement.strip():
            raise ValueError("problem statement must be non-empty")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "statement": self.statement,
            "reference_answer": self.reference_answer,
        }

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> Problem:
        return cls(
            id=data["id"],
            statement=data["statement"],
            reference_answer=data.get("reference_answer"),
        )


@dataclass(frozen=True)
class Candidate:
    iteration: int
    index: int
    text: str
    extracted_solution: str
    branch: Branch
    truncated: bool

    def __post_init__(self) -> None:
        if self.iteration < 0:
            raise ValueError("iteration must be >= 0")
        if self.index < 0:
            raise ValueError("index must be >= 0")
        if (self.branch is Branch.INITIAL) != (self.iteration == 0):
            raise ValueError("branch is initial exactly when iteration is 0")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "index": self.index,
            "text": self.text,
            "extracted_solution": self.extracted_solution,
            "branch": self.branch.value,
            "truncated": self.truncated,
        }

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> Candidate:
        return cls(
            iteration=data["iteration"],
            index=data["index"],
            text=data["text"],
            extracted_solution=data["extracted_solution"],
            branch=Branch(data["branch"]),
            truncated=data["truncated"],
        )


@dataclass(frozen=True)
class VerificationResult:
    score: float
    feedback: str
    parse_ok: bool

    def __post_init__(self) -> None:
        if self.score not in _SCORE_VALUES:
            raise ValueError(f"score must be one of {_SCORE_VALUES}, got {self.score}")
        if not self.parse_ok and self.score != 0.0:
            raise ValueError("a verification that failed to parse must score 0")

    def to_json_dict(self) -> dict[str, Any]:
        return {"score": self.score, "feedback": self.feedback, "parse_ok": self.parse_ok}

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> VerificationResult:
        return cls(score=data["score"], feedback=data["feedback"], parse_ok=data["parse_ok"])


@dataclass(frozen=True)
class Rollout:
    candidate: Candidate
    verifications: tuple[VerificationResult, ...]
    summary: str

    def mean_score(self) -> float:
        if not self.verifications:
            return 0.0
        return sum(v.score for v in self.verifications) / len(self.verifications)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "candidate": self.candidate.to_json_dict(),
            "verifications": [v.to_json_dict() for v in self.verifications],
            "summary": self.summary,
        }

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> Rollout:
        return cls(
            candidate=Candidate.from_json_dict(data["candidate"]),
            verifications=tuple(
                VerificationResult.from_json_dict(v) for v in data["verifications"]
            ),
            summary=data["summary"],
        )


@dataclass(frozen=True)
class ExperienceBank:
    """Curated memory: proven anchor facts plus error-avoidance heuristics."""

    verified_anchors: tuple[str, ...] = ()
    error_avoidance_heuristics: tuple[str, ...] = ()
    changes_log: str = ""

    def total_entries(self) -> int:
        return len(self.verified_anchors) + len(self.error_avoidance_heuristics)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "verified_anchors": list(self.verified_anchors),
            "error_avoidance_heuristics": list(self.error_avoidance_heuristics),
            "changes_log": self.changes_log,
        }

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> ExperienceBank:
        return cls(
            verified_anchors=tuple(data["verified_anchors"]),
            error_avoidance_heuristics=tuple(data["error_avoidance_heuristics"]),
            changes_log=data["changes_log"],
        )

    @classmethod
    def empty(cls) -> ExperienceBank:
        return cls()


def normalize_experience_bank(
    anchors: Iterable[str],
    heuristics: Iterable[str],
    changes_log: str = "",
    cap: int = 64,
) -> ExperienceBank:
    """Build a canonical bank: entries trimmed, deduplicated, capped.

    Entries are normalized (whitespace collapsed), empties dropped, and exact
    duplicates removed per list keeping first occurrence. If the combined
    count still exceeds cap, the oldest entry of the longer list is dropped
    until it fits (ties drop a heuristic, keeping anchor facts). Idempotent.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")

    def clean(items: Iterable[str]) -> list[str]:
        seen: set[str] = set()
        out: list[str] = []
        for item in items:
            norm = normalize_entry(item)
            if norm and norm not in seen:
                seen.add(norm)
                out.append(norm)
        return out

    kept_anchors = clean(anchors)
    kept_heuristics = clean(heuristics)
    while len(kept_anchors) + len(kept_heuristics) > cap:
        if len(kept_anchors) > len(kept_heuristics):
            kept_anchors.pop(0)
        else:
            kept_heuristics.pop(0)
    return ExperienceBank(
        verified_anchors=tuple(kept_anchors),
        error_avoidance_heuristics=tuple(kept_heuristics),
        changes_log=normalize_entry(changes_log),
    )


@dataclass(frozen=True)
class GuidelineBank:
    """Append-only log of strategy directions already tried."""

    guidelines: tuple[str, ...] = ()
    changes_log: str = ""

    def to_json_dict(self) -> dict[str, Any]:
        return {"updated_guidelines": list(self.guidelines), "changes_log": self.changes_log}

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> GuidelineBank:
        return cls(guidelines=tuple(data["updated_guidelines"]), changes_log=data["changes_log"])

    @classmethod
    def empty(cls) -> GuidelineBank:
        return cls()


@dataclass(frozen=True)
class RunConfig:
    max_iterations: int = 20
    num_candidates: int = 8
    num_verifications: int = 8
    epsilon: float = 0.2
    temperature: float = 1.0
    top_p: float = 0.95
    max_output_tokens: int = 131072
    max_in_flight: int = 8
    retry_max_attempts: int = 4
    retry_backoff_ms: int = 500
    rng_seed: int = 0
    use_experience: bool = True
    use_guideline: bool = True
    bank_entry_cap: int = 64

    def to_json_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> RunConfig:
        return validate_config(data)


def validate_config(raw: RunConfig | Mapping[str, Any]) -> RunConfig:
    """Validate ranges; mappings get defaults for absent fields.

    Raises RangeError naming the offending field, including unknown fields.
    """
    if isinstance(raw, RunConfig):
        config = raw
    else:
        known = {f.name for f in fields(RunConfig)}
        unknown = set(raw) - known
        if unknown:
            raise RangeError(sorted(unknown)[0], "unknown config field")
        config = RunConfig(**dict(raw))

    def require(cond: bool, name: str, message: str) -> None:
        if not cond:
            raise RangeError(name, message)

    c = config
    require(isinstance(c.max_iterations, int) and c.max_iterations >= 1, "max_iterations", "must be an integer >= 1")
    require(isinstance(c.num_candidates, int) and c.num_candidates >= 1, "num_candidates", "must be an integer >= 1")
    require(isinstance(c.num_verifications, int) and c.num_verifications >= 0, "num_verifications", "must be an integer >= 0")
    require(isinstance(c.epsilon, (int, float)) and 0.0 <= c.epsilon <= 1.0, "epsilon", "must be in [0, 1]")
    require(isinstance(c.temperature, (int, float)) and c.temperature >= 0.0, "temperature", "must be >= 0")
    require(isinstance(c.top_p, (int, float)) and 0.0 < c.top_p <= 1.0, "top_p", "must be in (0, 1]")
    require(isinstance(c.max_output_tokens, int) and c.max_output_tokens >= 1, "max_output_tokens", "must be an integer >= 1")
    require(isinstance(c.max_in_flight, int) and c.max_in_flight >= 1, "max_in_flight", "must be an integer >= 1")
    require(isinstance(c.retry_max_attempts, int) and c.retry_max_attempts >= 1, "retry_max_attempts", "must be an integer >= 1")
    require(isinstance(c.retry_backoff_ms, int) and c.retry_backoff_ms >= 0, "retry_backoff_ms", "must be an integer >= 0")
    require(isinstance(c.rng_seed, int) and 0 <= c.rng_seed <= _MAX_SEED, "rng_seed", "must be a 64-bit unsigned integer")
    require(isinstance(c.use_experience, bool), "use_experience", "must be a boolean")
    require(isinstance(c.use_guideline, bool), "use_guideline", "must be a boolean")
    require(isinstance(c.bank_entry_cap, int) and c.bank_entry_cap >= 1, "bank_entry_cap", "must be an integer >= 1")
    # Normalize numeric types so serialization is stable.
    return replace(c, epsilon=float(c.epsilon), temperature=float(c.temperature), top_p=float(c.top_p))


@dataclass(frozen=True)
class CallLedger:
    """Completed backend call counts per agent role."""

    solution: int = 0
    verification: int = 0
    summary: int = 0
    experience: int = 0
    guideline: int = 0

    def add(self, other: CallLedger) -> CallLedger:
        return CallLedger(
            solution=self.solution + other.solution,
            verification=self.verification + other.verification,
            summary=self.summary + other.summary,
            experience=self.experience + other.experience,
            guideline=self.guideline + other.guideline,
        )

    def total(self) -> int:
        return self.solution + self.verification + self.summary + self.experience + self.guideline

    def to_json_dict(self) -> dict[str, int]:
        return {
            "solution": self.solution,
            "verification": self.verification,
            "summary": self.summary,
            "experience": self.experience,
            "guideline": self.guideline,
        }

    @classmethod
    def from_json_dict(cls, data: Mapping[str, int]) -> CallLedger:
        return cls(
            solution=data["solution"],
            verification=data["verification"],
            summary=data["summary"],
            experience=data["experience"],
            guideline=data["guideline"],
        )


@dataclass(frozen=True)
class Event:
    """Something noteworthy that happened during an iteration."""

    kind: str
    detail: str
    candidate: int | None = None

    def to_json_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "detail": self.detail, "candidate": self.candidate}

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> Event:
        return cls(kind=data["kind"], detail=data["detail"], candidate=data.get("candidate"))


@dataclass(frozen=True)
class RunState:
    """Orchestration state between iterations; advanced functionally."""

    problem: Problem
    config: RunConfig
    t: int
    history: tuple[tuple[Rollout, ...], ...] = ()
    experience: ExperienceBank = field(default_factory=ExperienceBank.empty)
    guideline: GuidelineBank = field(default_factory=GuidelineBank.empty)
    rng_state: str = "0000000000000000"
    ledger: CallLedger = field(default_factory=CallLedger)

    def previous_rollouts(self) -> tuple[Rollout, ...]:
        return self.history[-1] if self.history else ()


def load_benchmark_jsonl(path: str | Path) -> list[Problem]:
    """Load problems from a JSONL file of {id, statement, reference_answer}.

    Ids must be non-empty and unique within the file.
    """
    problems: list[Problem] = []
    seen: set[str] = set()
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc}", path=str(path), line=line_no) from exc
            if not isinstance(data, dict) or "id" not in data or "statement" not in data:
                raise ParseError("record needs 'id' and 'statement'", path=str(path), line=line_no)
            try:
                problem = Problem.from_json_dict(data)
            except ValueError as exc:
                raise ParseError(str(exc), path=str(path), line=line_no) from exc
            if problem.id in seen:
                raise ParseError(f"duplicate problem id {problem.id!r}", path=str(path), line=line_no)
            seen.add(problem.id)
            problems.append(problem)
    if not problems:
        raise EmptyBenchmark(f"{path}: no problems found")
    return problems
