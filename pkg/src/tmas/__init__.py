"""Iterative multi-agent solving loop with persistent memory banks.

The package wires a solution agent, parallel verifiers, a summarizer, and two
memory agents (experience and guideline banks) into a resumable, deterministic
run loop over any chat-completion endpoint, plus pure reward/advantage kernels
and an evaluation kit.
"""

from .backend import LiveBackend, ScriptedBackend
from .domain import (
    Branch,
    Candidate,
    ExperienceBank,
    GuidelineBank,
    Problem,
    Rollout,
    RunConfig,
    VerificationResult,
    load_benchmark_jsonl,
    validate_config,
)
from .errors import (
    CorruptStore,
    EmptyBenchmark,
    EmptyGroup,
    EmptyHistory,
    ParseError,
    PartitionError,
    RangeError,
    SchemaError,
    ScriptMatchError,
    TemplateError,
    TmasError,
    TransportError,
)
from .orchestrator import RunReport, resume, run, select_final
from .rewards import (
    experience_utilization_rewards,
    group_normalized_advantages,
    novel_strategy_reward,
    standard_correctness_reward,
)
from .rng import SplitMix64
from .store import RunStore

__version__ = "0.1.0"

__all__ = [
    "Branch",
    "Candidate",
    "CorruptStore",
    "EmptyBenchmark",
    "EmptyGroup",
    "EmptyHistory",
    "ExperienceBank",
    "GuidelineBank",
    "LiveBackend",
    "ParseError",
    "PartitionError",
    "Problem",
    "RangeError",
    "Rollout",
    "RunConfig",
    "RunReport",
    "RunStore",
    "SchemaError",
    "ScriptMatchError",
    "ScriptedBackend",
    "SplitMix64",
    "TemplateError",
    "TmasError",
    "TransportError",
    "VerificationResult",
    "experience_utilization_rewards",
    "group_normalized_advantages",
    "load_benchmark_jsonl",
    "novel_strategy_reward",
    "resume",
    "run",
    "select_final",
    "standard_correctness_reward",
    "validate_config",
]
