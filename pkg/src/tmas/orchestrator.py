"""The iterative solve loop.

Each iteration: draw branches, generate N candidates in parallel from the
previous iteration's state, verify each candidate M times in parallel,
consolidate each candidate's verifications into a summary, then update the
two memory banks from this iteration's rollouts. Nothing produced inside an
iteration is visible to that iteration's candidates; all conditioning is on
iteration t-1.

Per-candidate backend failures degrade that rollout (score-0 verifications,
empty summary) instead of aborting the run. Bank-update failures keep the
previous bank and record an event.
"""

from __future__ import annotations

import logging
import time
from collections import Counter
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from . import templates
from .agents import (
    ExploitMode,
    ExploreMode,
    InitialMode,
    SolutionMode,
    extract_solution,
    parse_experience_update,
    parse_guideline_update,
    parse_verification,
    render_experience_prompt,
    render_guideline_prompt,
    render_solution_prompt,
    render_summary_prompt,
    render_verification_prompt,
)
from .backend import CompletionBackend, CompletionRequest, CompletionResult, FinishReason, RoleTag
from .domain import (
    Branch,
    CallLedger,
    Candidate,
    Event,
    ExperienceBank,
    GuidelineBank,
    Problem,
    Rollout,
    RunConfig,
    RunState,
    VerificationResult,
    normalize_entry,
    validate_config,
)
from .errors import CorruptStore, EmptyHistory, SchemaError, TransportError
from .rng import SplitMix64
from .store import RunStore, StoredIteration

logger = logging.getLogger(__name__)

STORE_FORMAT = 1


@dataclass(frozen=True)
class IterationRecord:
    t: int
    rollouts: tuple[Rollout, ...]
    branch_draws: tuple[Branch, ...]
    experience: ExperienceBank
    guideline: GuidelineBank
    events: tuple[Event, ...]
    calls: CallLedger
    rng_state_after: str
    wall_clock_s: float | None = None


@dataclass(frozen=True)
class Selection:
    t: int
    iteration: int
    index: int
    mean_score: float

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "iteration": self.iteration,
            "index": self.index,
            "mean_score": self.mean_score,
        }


@dataclass(frozen=True)
class RunReport:
    problem_id: str
    iterations_completed: int
    final: Selection
    final_solution: str
    prefix_selections: tuple[Selection, ...]
    ledger: CallLedger
    event_counts: dict[str, int]

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "problem_id": self.problem_id,
            "iterations_completed": self.iterations_completed,
            "final": self.final.to_json_dict(),
            "final_solution": self.final_solution,
            "prefix_selections": [s.to_json_dict() for s in self.prefix_selections],
            "ledger": self.ledger.to_json_dict(),
            "event_counts": dict(sorted(self.event_counts.items())),
        }


ScorePolicy = Callable[[Rollout], float]


def default_score_policy(rollout: Rollout) -> float:
    """Mean verification score; rollouts with no verifications score 0."""
    return rollout.mean_score()


def _select_rollout(rollouts: Iterable[Rollout], policy: ScorePolicy) -> tuple[Rollout, float]:
    best: tuple[float, int, int] | None = None
    best_rollout: Rollout | None = None
    best_score = 0.0
    for rollout in rollouts:
        score = policy(rollout)
        key = (score, rollout.candidate.iteration, -rollout.candidate.index)
        if best is None or key > best:
            best = key
            best_rollout = rollout
            best_score = score
    if best_rollout is None:
        raise EmptyHistory("no rollouts to select from")
    return best_rollout, best_score


def select_final(rollouts: Iterable[Rollout], policy: ScorePolicy | None = None) -> Candidate:
    """Best rollout by score; ties prefer later iteration, then lower index.

    With no verifications anywhere (M = 0) every score is 0, so the latest
    iteration's lowest-index candidate wins.
    """
    rollout, _ = _select_rollout(rollouts, policy or default_score_policy)
    return rollout.candidate


def merge_guidelines(
    previous: GuidelineBank, parsed: Sequence[str], changes_log: str = ""
) -> GuidelineBank:
    """Append-only merge: previous entries verbatim, then genuinely new ones.

    A parsed entry is appended (normalized) only if its normalized form is not
    already present. The model's own output is never trusted to preserve the
    prefix; this merge enforces it.
    """
    seen = {normalize_entry(g) for g in previous.guidelines}
    merged = list(previous.guidelines)
    for entry in parsed:
        norm = normalize_entry(entry)
        if norm and norm not in seen:
            merged.append(norm)
            seen.add(norm)
    return GuidelineBank(guidelines=tuple(merged), changes_log=normalize_entry(changes_log))


def initial_run_state(problem: Problem, config: RunConfig) -> RunState:
    return RunState(
        problem=problem,
        config=config,
        t=0,
        history=(),
        experience=ExperienceBank.empty(),
        guideline=GuidelineBank.empty(),
        rng_state=SplitMix64(config.rng_seed).state_hex,
        ledger=CallLedger(),
    )


def advance_state(state: RunState, record: IterationRecord) -> RunState:
    return RunState(
        problem=state.problem,
        config=state.config,
        t=state.t + 1,
        history=state.history + (record.rollouts,),
        experience=record.experience,
        guideline=record.guideline,
        rng_state=record.rng_state_after,
        ledger=state.ledger.add(record.calls),
    )


def solution_sequence(config: RunConfig, t: int, i: int) -> int:
    return t * config.num_candidates + i


def verification_sequence(config: RunConfig, t: int, i: int, m: int) -> int:
    return (t * config.num_candidates + i) * config.num_verifications + m


def summary_sequence(config: RunConfig, t: int, i: int) -> int:
    return t * config.num_candidates + i


def _draw_branches(state: RunState, rng: SplitMix64) -> list[Branch]:
    """Branch per candidate, consuming draws in candidate-index order.

    Iteration 0 is all-initial and consumes no draws. An explore draw with
    the guideline bank ablated redirects to exploit; the draw is still
    consumed so the stream stays aligned across ablations.
    """
    config = state.config
    if state.t == 0:
        return [Branch.INITIAL] * config.num_candidates
    branches: list[Branch] = []
    for _ in range(config.num_candidates):
        explore = rng.bernoulli(config.epsilon)
        if explore and config.use_guideline:
            branches.append(Branch.EXPLORE)
        else:
            branches.append(Branch.EXPLOIT)
    return branches


def _run_phase(
    pool: ThreadPoolExecutor,
    thunks: Sequence[Callable[[], CompletionResult]],
) -> list[CompletionResult | Exception]:
    """Run thunks concurrently; contain per-call terminal failures.

    Transport and schema errors come back as values for per-candidate
    degradation. Anything else (notably an unmatched script entry) propagates
    and aborts the run.
    """
    futures: list[Future[CompletionResult]] = [pool.submit(thunk) for thunk in thunks]
    results: list[CompletionResult | Exception] = []
    error: Exception | None = None
    for future in futures:
        try:
            results.append(future.result())
        except (TransportError, SchemaError) as exc:
            results.append(exc)
        except Exception as exc:  # noqa: BLE001 - recorded, re-raised after drain
            if error is None:
                error = exc
            results.append(exc)
    if error is not None:
        raise error
    return results


def step_iteration(state: RunState, backend: CompletionBackend, store: RunStore) -> IterationRecord:
    """Run one full iteration and persist it. State advances via advance_state."""
    started = time.monotonic()
    config = state.config
    problem = state.problem
    t = state.t
    n = config.num_candidates
    m = config.num_verifications
    events: list[Event] = []

    rng = SplitMix64.from_state_hex(state.rng_state)
    branches = _draw_branches(state, rng)

    def make_request(role: RoleTag, prompt: str, sequence: int) -> CompletionRequest:
        return CompletionRequest(
            system_prompt=templates.SYSTEM_PROMPT,
            user_prompt=prompt,
            role_tag=role,
            temperature=config.temperature,
            top_p=config.top_p,
            max_output_tokens=config.max_output_tokens,
            sequence=sequence,
        )

    def note_truncation(result: CompletionResult, role: RoleTag, candidate: int | None) -> None:
        if result.finish_reason is FinishReason.LENGTH_CAPPED:
            events.append(
                Event(kind="output_truncated", detail=f"{role.value} output hit the token cap", candidate=candidate)
            )

    solution_prompts: list[str] = []
    for i, branch in enumerate(branches):
        mode: SolutionMode
        if branch is Branch.INITIAL:
            mode = InitialMode()
        elif branch is Branch.EXPLORE:
            mode = ExploreMode(guidelines=state.guideline)
        else:
            mode = ExploitMode(
                previous_rollouts=state.previous_rollouts(),
                experience=state.experience if config.use_experience else None,
            )
        solution_prompts.append(render_solution_prompt(problem, mode))

    calls = {"solution": 0, "verification": 0, "summary": 0, "experience": 0, "guideline": 0}

    with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
        solution_thunks = []
        for i in range(n):
            request = make_request(RoleTag.SOLUTION, solution_prompts[i], solution_sequence(config, t, i))
            solution_thunks.append(lambda req=request: backend.complete(req))
        calls["solution"] += n
        solution_results = _run_phase(pool, solution_thunks)

        candidates: list[Candidate] = []
        verifiable: list[bool] = []
        for i in range(n):
            result = solution_results[i]
            if isinstance(result, Exception):
                events.append(Event(kind="generation_failed", detail=str(result), candidate=i))
                candidates.append(
                    Candidate(iteration=t, index=i, text="", extracted_solution="", branch=branches[i], truncated=False)
                )
                verifiable.append(False)
                continue
            note_truncation(result, RoleTag.SOLUTION, i)
            extracted, marker_found = extract_solution(result.text)
            if not marker_found:
                events.append(
                    Event(
                        kind="solution_marker_missing",
                        detail="no '## Solution' marker; using full text",
                        candidate=i,
                    )
                )
            candidates.append(
                Candidate(
                    iteration=t,
                    index=i,
                    text=result.text,
                    extracted_solution=extracted,
                    branch=branches[i],
                    truncated=result.finish_reason is FinishReason.LENGTH_CAPPED,
                )
            )
            if extracted.strip():
                verifiable.append(True)
            else:
                events.append(Event(kind="empty_solution", detail="candidate produced no usable solution text", candidate=i))
                verifiable.append(False)

        verifications: list[list[VerificationResult]] = [[] for _ in range(n)]
        if m > 0:
            ver_tasks: list[tuple[int, int]] = []
            ver_thunks = []
            for i in range(n):
                if not verifiable[i]:
                    continue
                prompt = render_verification_prompt(problem, candidates[i])
                for j in range(m):
                    request = make_request(
                        RoleTag.VERIFICATION, prompt, verification_sequence(config, t, i, j)
                    )
                    ver_tasks.append((i, j))
                    ver_thunks.append(lambda req=request: backend.complete(req))
            calls["verification"] += len(ver_thunks)
            ver_results = _run_phase(pool, ver_thunks)
            by_candidate: dict[int, dict[int, CompletionResult | Exception]] = {}
            for (i, j), result in zip(ver_tasks, ver_results):
                by_candidate.setdefault(i, {})[j] = result
            for i in range(n):
                if not verifiable[i]:
                    verifications[i] = [
                        VerificationResult(score=0.0, feedback="[not verified: no candidate solution]", parse_ok=False)
                        for _ in range(m)
                    ]
                    continue
                per = []
                for j in range(m):
                    result = by_candidate[i][j]
                    if isinstance(result, Exception):
                        events.append(
                            Event(kind="verification_failed", detail=f"verifier {j}: {result}", candidate=i)
                        )
                        per.append(
                            VerificationResult(score=0.0, feedback=f"[verification call failed: {result}]", parse_ok=False)
                        )
                        continue
                    note_truncation(result, RoleTag.VERIFICATION, i)
                    parsed = parse_verification(result.text)
                    if not parsed.parse_ok:
                        events.append(
                            Event(
                                kind="verification_parse_failed",
                                detail=f"verifier {j} output had no valid boxed score",
                                candidate=i,
                            )
                        )
                    per.append(parsed)
                verifications[i] = per

        summaries = [""] * n
        if m > 0:
            sum_indices = [i for i in range(n) if verifiable[i]]
            sum_thunks = []
            for i in sum_indices:
                prompt = render_summary_prompt(problem, candidates[i], verifications[i])
                request = make_request(RoleTag.SUMMARY, prompt, summary_sequence(config, t, i))
                sum_thunks.append(lambda req=request: backend.complete(req))
            calls["summary"] += len(sum_thunks)
            sum_results = _run_phase(pool, sum_thunks)
            for i, result in zip(sum_indices, sum_results):
                if isinstance(result, Exception):
                    events.append(Event(kind="summary_failed", detail=str(result), candidate=i))
                    continue
                note_truncation(result, RoleTag.SUMMARY, i)
                summaries[i] = result.text

        rollouts = [
            Rollout(candidate=candidates[i], verifications=tuple(verifications[i]), summary=summaries[i])
            for i in range(n)
        ]

        memory_thunks = []
        memory_roles: list[RoleTag] = []
        if config.use_experience:
            request = make_request(
                RoleTag.EXPERIENCE, render_experience_prompt(problem, rollouts, state.experience), t
            )
            memory_thunks.append(lambda req=request: backend.complete(req))
            memory_roles.append(RoleTag.EXPERIENCE)
            calls["experience"] += 1
        if config.use_guideline:
            request = make_request(
                RoleTag.GUIDELINE, render_guideline_prompt(problem, rollouts, state.guideline), t
            )
            memory_thunks.append(lambda req=request: backend.complete(req))
            memory_roles.append(RoleTag.GUIDELINE)
            calls["guideline"] += 1
        memory_results = _run_phase(pool, memory_thunks)

    new_experience = state.experience
    new_guideline = state.guideline
    for role, result in zip(memory_roles, memory_results):
        if role is RoleTag.EXPERIENCE:
            if isinstance(result, Exception):
                events.append(Event(kind="experience_update_failed", detail=str(result)))
                continue
            note_truncation(result, RoleTag.EXPERIENCE, None)
            new_experience, diag = parse_experience_update(
                result.text, state.experience, cap=config.bank_entry_cap
            )
            if not diag.ok:
                events.append(
                    Event(kind="experience_update_failed", detail="; ".join(diag.warnings))
                )
            elif diag.warnings:
                events.append(
                    Event(kind="experience_update_warning", detail="; ".join(diag.warnings))
                )
        else:
            if isinstance(result, Exception):
                events.append(Event(kind="guideline_update_failed", detail=str(result)))
                continue
            note_truncation(result, RoleTag.GUIDELINE, None)
            entries, changes_log, diag = parse_guideline_update(result.text)
            if not diag.ok:
                events.append(
                    Event(kind="guideline_update_failed", detail="; ".join(diag.warnings))
                )
                continue
            if diag.warnings:
                events.append(
                    Event(kind="guideline_update_warning", detail="; ".join(diag.warnings))
                )
            new_guideline = merge_guidelines(state.guideline, entries, changes_log)

    wall_clock_s = time.monotonic() - started
    calls_ledger = CallLedger(**calls)
    record = IterationRecord(
        t=t,
        rollouts=tuple(rollouts),
        branch_draws=tuple(branches),
        experience=new_experience,
        guideline=new_guideline,
        events=tuple(events),
        calls=calls_ledger,
        rng_state_after=rng.state_hex,
        wall_clock_s=wall_clock_s,
    )
    store.write_iteration(
        t=t,
        rollouts=list(record.rollouts),
        branch_draws=[b.value for b in record.branch_draws],
        events=list(record.events),
        calls=record.calls,
        experience=record.experience,
        guideline=record.guideline,
        rng_state_json=rng.state_json(),
    )
    store.append_timing(t, wall_clock_s)
    logger.info(
        "iteration %d done: %d rollouts, %d events, %.2fs", t, len(rollouts), len(events), wall_clock_s
    )
    return record


def build_manifest(config: RunConfig, backend: CompletionBackend) -> dict[str, Any]:
    return {
        "backend_id": backend.describe(),
        "rng_seed": config.rng_seed,
        "store_format": STORE_FORMAT,
        "template_set_hash": templates.TEMPLATE_SET_HASH,
    }


def _build_report(problem: Problem, records: Sequence[IterationRecord]) -> RunReport:
    prefix_selections: list[Selection] = []
    pool: list[Rollout] = []
    policy = default_score_policy
    for record in records:
        pool.extend(record.rollouts)
        rollout, score = _select_rollout(pool, policy)
        prefix_selections.append(
            Selection(
                t=record.t,
                iteration=rollout.candidate.iteration,
                index=rollout.candidate.index,
                mean_score=score,
            )
        )
    if not prefix_selections:
        raise EmptyHistory("run produced no iterations")
    final_rollout, final_score = _select_rollout(pool, policy)
    final = Selection(
        t=records[-1].t,
        iteration=final_rollout.candidate.iteration,
        index=final_rollout.candidate.index,
        mean_score=final_score,
    )
    ledger = CallLedger()
    counts: Counter[str] = Counter()
    for record in records:
        ledger = ledger.add(record.calls)
        counts.update(event.kind for event in record.events)
    return RunReport(
        problem_id=problem.id,
        iterations_completed=len(records),
        final=final,
        final_solution=final_rollout.candidate.extracted_solution,
        prefix_selections=tuple(prefix_selections),
        ledger=ledger,
        event_counts=dict(counts),
    )


def run(
    problem: Problem,
    config: RunConfig | dict,
    backend: CompletionBackend,
    store: RunStore,
) -> RunReport:
    """Execute a full run from scratch into an empty or fresh run directory."""
    config = validate_config(config)
    store.create(problem, config, build_manifest(config, backend))
    state = initial_run_state(problem, config)
    records: list[IterationRecord] = []
    for _ in range(config.max_iterations):
        record = step_iteration(state, backend, store)
        records.append(record)
        state = advance_state(state, record)
    report = _build_report(problem, records)
    store.write_report(report.to_json_dict())
    return report


def _record_from_stored(stored: StoredIteration) -> IterationRecord:
    rng_state_hex = SplitMix64.from_state_json(stored.rng_state).state_hex
    return IterationRecord(
        t=stored.t,
        rollouts=stored.rollouts,
        branch_draws=tuple(Branch(b) for b in stored.branch_draws),
        experience=stored.experience,
        guideline=stored.guideline,
        events=stored.events,
        calls=stored.calls,
        rng_state_after=rng_state_hex,
        wall_clock_s=None,
    )


def resume(run_dir: str | Path, backend: CompletionBackend) -> RunReport:
    """Continue an interrupted run; a finished one just gets its report rebuilt.

    Committed iterations are replayed from disk, partial trailing files are
    discarded, and the loop continues from the persisted RNG state, so the
    finished directory is byte-identical (timing sidecar aside) to one from
    an uninterrupted run.
    """
    store = RunStore(run_dir)
    if not store.exists():
        raise CorruptStore(str(store.config_path), "missing config or manifest")
    problem, config = store.load_problem_and_config()
    manifest = store.load_manifest()
    if manifest.get("template_set_hash") != templates.TEMPLATE_SET_HASH:
        raise CorruptStore(
            str(store.manifest_path),
            "template set hash mismatch; this package version cannot continue the run",
        )
    if manifest.get("backend_id") != backend.describe():
        raise CorruptStore(
            str(store.manifest_path),
            f"backend mismatch: run was recorded with {manifest.get('backend_id')!r}, "
            f"got {backend.describe()!r}",
        )
    committed, leftovers = store.scan_committed()
    if committed > config.max_iterations:
        raise CorruptStore(str(store.run_dir), "more committed iterations than configured")
    store.discard_partial(leftovers)

    records: list[IterationRecord] = []
    for t in range(committed):
        stored = store.load_iteration(t)
        if stored.t != t:
            raise CorruptStore(str(store.rollouts_path(t)), "iteration index mismatch")
        records.append(_record_from_stored(stored))

    state = initial_run_state(problem, config)
    for record in records:
        state = advance_state(state, record)

    if committed < config.max_iterations:
        logger.info("resuming %s from iteration %d", store.run_dir, committed)
    for _ in range(committed, config.max_iterations):
        record = step_iteration(state, backend, store)
        records.append(record)
        state = advance_state(state, record)
    report = _build_report(problem, records)
    store.write_report(report.to_json_dict())
    return report
