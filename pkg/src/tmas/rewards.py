"""Reward kernels and group-normalized advantages for RL training.

All kernels are pure functions over outcome values, deterministic and
backend-free, except judge_novelty which needs one completion call. Shaping
never flips the sign of correctness: a shaped reward is positive exactly when
the outcome is correct.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

from . import templates
from .agents import parse_novelty_judge, render_novelty_judge_user_prompt
from .backend import CompletionBackend, CompletionRequest, RoleTag
from .errors import EmptyGroup, ParseError, PartitionError

DEFAULT_BETA = 0.6
DEFAULT_DELTA = 1e-8


class Group(str, Enum):
    BASE = "base"
    BANK = "bank"
    NONE = "none"


@dataclass(frozen=True)
class RewardOutcome:
    correct: bool
    group: Group = Group.NONE
    novel: bool | None = None


@dataclass(frozen=True)
class RewardBatch:
    outcomes: tuple[RewardOutcome, ...]
    beta: float = DEFAULT_BETA
    delta: float = DEFAULT_DELTA


@dataclass(frozen=True)
class AdvantageVector:
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]
    mu: float
    sigma: float


def standard_correctness_reward(correct: bool) -> float:
    """+1 for a correct outcome, -1 otherwise."""
    return 1.0 if correct else -1.0


def base_accuracy(base_outcomes: Sequence[bool]) -> float:
    """Fraction correct in the no-memory comparison group."""
    if not base_outcomes:
        raise EmptyGroup("base group must be non-empty")
    return sum(1.0 for outcome in base_outcomes if outcome) / len(base_outcomes)


def experience_utilization_rewards(batch: RewardBatch) -> list[float]:
    """Shaped rewards for the memory-conditioned half of a Base/Bank batch.

    Bank rollouts that are correct earn 1 + beta * (1 - p_base) where p_base
    is the Base group's accuracy: the harder the problem without memory, the
    larger the bonus for solving it with memory. Everything else is +/-1.
    Rewards come back in batch order.
    """
    if batch.beta < 0:
        raise PartitionError("beta must be >= 0")
    base = [o for o in batch.outcomes if o.group is Group.BASE]
    bank = [o for o in batch.outcomes if o.group is Group.BANK]
    if len(base) + len(bank) != len(batch.outcomes):
        raise PartitionError("every outcome must be tagged base or bank")
    if not base or not bank:
        raise PartitionError("base and bank groups must both be non-empty")
    if len(base) != len(bank):
        raise PartitionError(
            f"base and bank groups must be the same size, got {len(base)} vs {len(bank)}"
        )
    p_base = base_accuracy([o.correct for o in base])
    rewards: list[float] = []
    for outcome in batch.outcomes:
        if outcome.group is Group.BANK and outcome.correct:
            rewards.append(1.0 + batch.beta * (1.0 - p_base))
        else:
            rewards.append(standard_correctness_reward(outcome.correct))
    return rewards


def novel_strategy_reward(correct: bool, novel: bool) -> float:
    """Four-case table rewarding correctness first, novelty second."""
    if correct and novel:
        return 1.0
    if correct and not novel:
        return 0.2
    if not correct and novel:
        return -0.5
    return -1.0


def group_normalized_advantages(
    rewards: Sequence[float], delta: float = DEFAULT_DELTA
) -> AdvantageVector:
    """Center by the batch mean and scale by population std plus delta.

    The advantage mean is zero up to floating point; an all-equal batch maps
    to exactly zero advantages because the numerator vanishes while delta
    keeps the denominator positive.
    """
    if not rewards:
        raise EmptyGroup("advantage batch must be non-empty")
    if delta <= 0:
        raise PartitionError("delta must be > 0")
    n = len(rewards)
    mu = math.fsum(rewards) / n
    variance = math.fsum((r - mu) ** 2 for r in rewards) / n
    sigma = math.sqrt(variance)
    advantages = tuple((r - mu) / (sigma + delta) for r in rewards)
    return AdvantageVector(
        rewards=tuple(float(r) for r in rewards),
        advantages=advantages,
        mu=mu,
        sigma=sigma,
    )


def judge_novelty(
    problem_statement: str,
    tried_guidelines: Sequence[str],
    solution: str,
    backend: CompletionBackend,
    sequence: int = 0,
) -> int:
    """Label a solution 1 (new strategy), 0 (repeated), or -1 (unjudgeable).

    An empty tried list is trivially novel and costs no backend call.
    """
    if not tried_guidelines:
        return 1
    request = CompletionRequest(
        system_prompt=templates.NOVELTY_JUDGE_SYSTEM,
        user_prompt=render_novelty_judge_user_prompt(
            problem_statement, tried_guidelines, solution
        ),
        role_tag=RoleTag.NOVELTY_JUDGE,
        sequence=sequence,
    )
    result = backend.complete(request)
    return parse_novelty_judge(result.text)


# -- reward audit file processing -------------------------------------------


@dataclass(frozen=True)
class AuditRow:
    record_id: str | None
    correct: bool
    group: Group
    novel: bool | None
    reward: float | None
    advantage: float | None
    excluded: bool


@dataclass(frozen=True)
class AuditResult:
    task: str
    rows: tuple[AuditRow, ...]
    mu: float | None
    sigma: float | None
    p_base: float | None

    def summary_dict(self) -> dict[str, Any]:
        included = [r for r in self.rows if not r.excluded]
        return {
            "task": self.task,
            "count": len(self.rows),
            "included": len(included),
            "excluded": len(self.rows) - len(included),
            "mu": self.mu,
            "sigma": self.sigma,
            "p_base": self.p_base,
        }


def load_outcomes_jsonl(path: str | Path) -> list[dict[str, Any]]:
    path = Path(path)
    records: list[dict[str, Any]] = []
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc}", path=str(path), line=line_no) from exc
            if not isinstance(data, dict) or not isinstance(data.get("correct"), bool):
                raise ParseError(
                    "record needs a boolean 'correct' field", path=str(path), line=line_no
                )
            group = data.get("group")
            if group not in (None, "base", "bank"):
                raise ParseError(f"bad group {group!r}", path=str(path), line=line_no)
            novel = data.get("novel")
            if novel not in (None, True, False):
                raise ParseError(f"bad novel flag {novel!r}", path=str(path), line=line_no)
            records.append(data)
    if not records:
        raise ParseError("no outcome records found", path=str(path))
    return records


def audit_outcomes(
    records: Sequence[dict[str, Any]],
    beta: float = DEFAULT_BETA,
    delta: float = DEFAULT_DELTA,
) -> AuditResult:
    """Infer the reward task from the records and compute rewards + advantages.

    Any 'novel' field makes this a novelty batch: records with novel null are
    the unjudgeable label and are excluded from rewards and normalization.
    Otherwise any 'group' field makes it an experience-utilization batch,
    which must partition evenly into base and bank. Plain records get the
    standard correctness reward.
    """
    has_novel = any("novel" in r for r in records)
    has_group = any(r.get("group") in ("base", "bank") for r in records)
    if has_novel and has_group:
        raise PartitionError("records mix novelty and base/bank fields; pick one task")

    ids = [r.get("id") if isinstance(r.get("id"), str) else None for r in records]
    corrects = [bool(r["correct"]) for r in records]

    if has_novel:
        task = "novel_strategy"
        novels = [r.get("novel") for r in records]
        rewards: list[float | None] = [
            None if novel is None else novel_strategy_reward(correct, novel)
            for correct, novel in zip(corrects, novels)
        ]
        groups = [Group.NONE] * len(records)
        p_base = None
    elif has_group:
        task = "experience_utilization"
        groups = []
        for r in records:
            if r.get("group") not in ("base", "bank"):
                raise PartitionError("every record needs group base or bank for this task")
            groups.append(Group(r["group"]))
        batch = RewardBatch(
            outcomes=tuple(
                RewardOutcome(correct=c, group=g) for c, g in zip(corrects, groups)
            ),
            beta=beta,
            delta=delta,
        )
        rewards = list(experience_utilization_rewards(batch))
        novels = [None] * len(records)
        p_base = base_accuracy([c for c, g in zip(corrects, groups) if g is Group.BASE])
    else:
        task = "standard_correctness"
        rewards = [standard_correctness_reward(c) for c in corrects]
        novels = [None] * len(records)
        groups = [Group.NONE] * len(records)
        p_base = None

    included = [r for r in rewards if r is not None]
    if included:
        vector = group_normalized_advantages(included, delta=delta)
        advantage_iter = iter(vector.advantages)
        advantages: list[float | None] = [
            None if r is None else next(advantage_iter) for r in rewards
        ]
        mu: float | None = vector.mu
        sigma: float | None = vector.sigma
    else:
        advantages = [None] * len(rewards)
        mu = None
        sigma = None

    rows = tuple(
        AuditRow(
            record_id=ids[k],
            correct=corrects[k],
            group=groups[k],
            novel=novels[k],
            reward=rewards[k],
            advantage=advantages[k],
            excluded=rewards[k] is None,
        )
        for k in range(len(records))
    )
    return AuditResult(task=task, rows=rows, mu=mu, sigma=sigma, p_base=p_base)


def write_audit_jsonl(path: str | Path, result: AuditResult) -> None:
    path = Path(path)
    lines = []
    for row in result.rows:
        record: dict[str, Any] = {
            "id": row.record_id,
            "correct": row.correct,
            "reward": row.reward,
            "advantage": row.advantage,
            "excluded": row.excluded,
        }
        if row.group is not Group.NONE:
            record["group"] = row.group.value
        if row.novel is not None:
            record["novel"] = row.novel
        lines.append(json.dumps(record, ensure_ascii=False, sort_keys=True))
    lines.append(json.dumps({"summary": result.summary_dict()}, ensure_ascii=False, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
