"""Evaluation kit: accuracy metrics, judging, and analysis reports.

The statistics here are deliberately dependency-free so each kernel has one
obvious implementation to test against brute force: Pass@1 from a judgment
matrix, majority vote over normalized answer classes, and a Mann-Whitney U
with an exact permutation p-value for small samples and a tie-corrected
normal approximation above that.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import templates
from .agents import parse_judge, render_judge_user_prompt
from .backend import CompletionBackend, CompletionRequest, RoleTag
from .domain import RunConfig
from .errors import EmptyBenchmark, EmptyGroup, SchemaError, TransportError
from .store import RunStore, StoredIteration

EXACT_PERMUTATION_LIMIT = 12
DEFAULT_JUDGE_RUNS = 4


# -- Pass@1 -------------------------------------------------------------------


@dataclass(frozen=True)
class JudgmentMatrix:
    """Correct counts per problem per judge run.

    counts[r][i] is how many of problem i's n_i rollouts judge run r marked
    correct.
    """

    problem_ids: tuple[str, ...]
    rollouts_per_problem: tuple[int, ...]
    counts: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if not self.problem_ids:
            raise EmptyBenchmark("judgment matrix has no problems")
        if len(self.rollouts_per_problem) != len(self.problem_ids):
            raise ValueError("rollouts_per_problem length mismatch")
        if any(n < 1 for n in self.rollouts_per_problem):
            raise ValueError("every problem needs at least one rollout")
        if not self.counts:
            raise ValueError("at least one judge run is required")
        for row in self.counts:
            if len(row) != len(self.problem_ids):
                raise ValueError("judge run row length mismatch")
            for count, n in zip(row, self.rollouts_per_problem):
                if not 0 <= count <= n:
                    raise ValueError(f"count {count} outside [0, {n}]")

    @property
    def judge_runs(self) -> int:
        return len(self.counts)


@dataclass(frozen=True)
class PassAt1Result:
    per_run: tuple[float, ...]
    averaged: float


def pass_at_1(matrix: JudgmentMatrix) -> PassAt1Result:
    """Mean over problems of (correct rollouts / rollouts), then mean over runs."""
    per_run = []
    num_problems = len(matrix.problem_ids)
    for row in matrix.counts:
        per_run.append(
            math.fsum(c / n for c, n in zip(row, matrix.rollouts_per_problem)) / num_problems
        )
    averaged = math.fsum(per_run) / len(per_run)
    return PassAt1Result(per_run=tuple(per_run), averaged=averaged)


# -- LLM-as-judge --------------------------------------------------------------


def judge_solution(
    problem_statement: str,
    reference: str,
    solution: str,
    runs: int,
    backend: CompletionBackend,
    sequence_base: int = 0,
    events: list[str] | None = None,
) -> list[bool]:
    """R independent equivalence labels; failed calls degrade to False."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if not reference:
        raise ValueError("reference answer must be non-empty")
    user_prompt = render_judge_user_prompt(problem_statement, reference, solution)
    labels: list[bool] = []
    for r in range(runs):
        request = CompletionRequest(
            system_prompt=templates.JUDGE_SYSTEM,
            user_prompt=user_prompt,
            role_tag=RoleTag.JUDGE,
            sequence=sequence_base + r,
        )
        try:
            result = backend.complete(request)
        except (TransportError, SchemaError) as exc:
            if events is not None:
                events.append(f"judge call failed: {exc}")
            labels.append(False)
            continue
        decision = parse_judge(result.text)
        if not decision.parse_ok and events is not None:
            events.append("judge output was not valid JSON; counted as not equivalent")
        labels.append(decision.equivalent)
    return labels


# -- majority vote -------------------------------------------------------------


def normalize_answer(answer: str) -> str:
    """Collapse whitespace and strip any wrapping \\boxed{...} layers."""
    out = " ".join(answer.split())
    while out.startswith("\\boxed{") and out.endswith("}"):
        inner = out[len("\\boxed{"):-1]
        depth = 0
        balanced = True
        for ch in inner:
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth < 0:
                    balanced = False
                    break
        if not balanced or depth != 0:
            break
        out = " ".join(inner.split())
    return out


def majority_vote(final_answers: Sequence[str]) -> str:
    """Most frequent normalized answer class; ties go to the earliest seen."""
    if not final_answers:
        raise EmptyGroup("majority vote needs at least one answer")
    order: dict[str, int] = {}
    votes: Counter[str] = Counter()
    for position, answer in enumerate(final_answers):
        key = normalize_answer(answer)
        if key not in order:
            order[key] = position
        votes[key] += 1
    best = max(votes, key=lambda key: (votes[key], -order[key]))
    return best


# -- Mann-Whitney U -------------------------------------------------------------


@dataclass(frozen=True)
class MannWhitneyResult:
    u: float
    p_two_sided: float
    method: str


def _u_doubled(x: Sequence[float], y: Sequence[float]) -> int:
    """2*U for the first sample: wins count 2, ties count 1."""
    doubled = 0
    for a in x:
        for b in y:
            if a > b:
                doubled += 2
            elif a == b:
                doubled += 1
    return doubled


def _exact_two_sided_p(pooled: Sequence[float], n1: int, observed_doubled: int) -> float:
    total = 0
    at_most = 0
    at_least = 0
    indices = range(len(pooled))
    for chosen in combinations(indices, n1):
        chosen_set = set(chosen)
        xs = [pooled[i] for i in chosen]
        ys = [pooled[i] for i in indices if i not in chosen_set]
        doubled = _u_doubled(xs, ys)
        total += 1
        if doubled <= observed_doubled:
            at_most += 1
        if doubled >= observed_doubled:
            at_least += 1
    return min(1.0, 2.0 * min(at_most, at_least) / total)


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def mann_whitney_u(x: Sequence[float], y: Sequence[float]) -> MannWhitneyResult:
    """Two-sided Mann-Whitney U for x against y.

    U counts pairs where x wins, plus half a point per tie. Combined sizes up
    to 12 get an exact permutation p-value (ties handled exactly); larger
    samples use the normal approximation with tie correction and a 0.5
    continuity correction.
    """
    if not x or not y:
        raise EmptyGroup("both samples must be non-empty")
    n1, n2 = len(x), len(y)
    doubled = _u_doubled(x, y)
    u = doubled / 2.0
    if n1 + n2 <= EXACT_PERMUTATION_LIMIT:
        pooled = list(x) + list(y)
        p = _exact_two_sided_p(pooled, n1, doubled)
        return MannWhitneyResult(u=u, p_two_sided=p, method="exact")
    n = n1 + n2
    mu = n1 * n2 / 2.0
    tie_counts = Counter(list(x) + list(y)).values()
    tie_term = sum(t**3 - t for t in tie_counts) / (n * (n - 1))
    variance = (n1 * n2 / 12.0) * ((n + 1) - tie_term)
    if variance <= 0:
        return MannWhitneyResult(u=u, p_two_sided=1.0, method="normal")
    z = (abs(u - mu) - 0.5) / math.sqrt(variance)
    z = max(z, 0.0)
    p = min(1.0, 2.0 * _normal_sf(z))
    return MannWhitneyResult(u=u, p_two_sided=p, method="normal")


# -- verification paradox -------------------------------------------------------


@dataclass(frozen=True)
class ParadoxReport:
    """Do verifiers score never-solved problems higher than solved ones?"""

    ever_correct_ids: tuple[str, ...]
    never_correct_ids: tuple[str, ...]
    mean_ever_correct: float | None
    mean_never_correct: float | None
    delta: float | None
    u: float | None
    p_two_sided: float | None
    degenerate: bool
    include_parse_failed: bool

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "ever_correct_count": len(self.ever_correct_ids),
            "never_correct_count": len(self.never_correct_ids),
            "mean_ever_correct": self.mean_ever_correct,
            "mean_never_correct": self.mean_never_correct,
            "delta": self.delta,
            "u": self.u,
            "p_two_sided": self.p_two_sided,
            "degenerate": self.degenerate,
            "include_parse_failed": self.include_parse_failed,
        }


def verification_paradox_report(
    per_problem_scores: Mapping[str, Sequence[float]],
    ever_correct: Mapping[str, bool],
    include_parse_failed: bool = True,
) -> ParadoxReport:
    """Compare mean verification scores between solved and never-solved problems.

    per_problem_scores holds every verification score a problem received
    across all iterations and rollouts (already filtered by the caller if
    include_parse_failed is False). delta is never-correct minus ever-correct.
    With an empty group the report is degenerate: means where defined, no test.
    """
    if not per_problem_scores:
        raise EmptyBenchmark("paradox report needs at least one problem")
    missing = set(per_problem_scores) - set(ever_correct)
    if missing:
        raise EmptyBenchmark(f"missing judge labels for problems: {sorted(missing)[:3]}")
    solved: list[str] = []
    unsolved: list[str] = []
    means: dict[str, float] = {}
    for problem_id in sorted(per_problem_scores):
        scores = per_problem_scores[problem_id]
        if not scores:
            continue
        means[problem_id] = math.fsum(scores) / len(scores)
        if ever_correct[problem_id]:
            solved.append(problem_id)
        else:
            unsolved.append(problem_id)
    solved_means = [means[p] for p in solved]
    unsolved_means = [means[p] for p in unsolved]
    mean_solved = math.fsum(solved_means) / len(solved_means) if solved_means else None
    mean_unsolved = math.fsum(unsolved_means) / len(unsolved_means) if unsolved_means else None
    if not solved_means or not unsolved_means:
        return ParadoxReport(
            ever_correct_ids=tuple(solved),
            never_correct_ids=tuple(unsolved),
            mean_ever_correct=mean_solved,
            mean_never_correct=mean_unsolved,
            delta=None,
            u=None,
            p_two_sided=None,
            degenerate=True,
            include_parse_failed=include_parse_failed,
        )
    result = mann_whitney_u(unsolved_means, solved_means)
    return ParadoxReport(
        ever_correct_ids=tuple(solved),
        never_correct_ids=tuple(unsolved),
        mean_ever_correct=mean_solved,
        mean_never_correct=mean_unsolved,
        delta=mean_unsolved - mean_solved,
        u=result.u,
        p_two_sided=result.p_two_sided,
        degenerate=False,
        include_parse_failed=include_parse_failed,
    )


# -- guideline diversity ---------------------------------------------------------


def guideline_diversity_curve(per_run_counts: Sequence[Sequence[int]]) -> list[float]:
    """Mean guideline-bank size per iteration across runs.

    Input: one sequence per run of |G_t| by iteration. Runs of different
    lengths contribute to the iterations they have.
    """
    if not per_run_counts:
        return []
    length = max(len(counts) for counts in per_run_counts)
    curve: list[float] = []
    for t in range(length):
        values = [counts[t] for counts in per_run_counts if t < len(counts)]
        curve.append(math.fsum(values) / len(values))
    return curve


# -- run-directory evaluation ----------------------------------------------------


@dataclass(frozen=True)
class LoadedRun:
    run_dir: Path
    problem_id: str
    statement: str
    reference_answer: str | None
    config: RunConfig
    iterations: tuple[StoredIteration, ...]


def load_run(run_dir: str | Path) -> LoadedRun:
    store = RunStore(run_dir)
    problem, config = store.load_problem_and_config()
    committed, _ = store.scan_committed()
    iterations = tuple(store.load_iteration(t) for t in range(committed))
    return LoadedRun(
        run_dir=Path(run_dir),
        problem_id=problem.id,
        statement=problem.statement,
        reference_answer=problem.reference_answer,
        config=config,
        iterations=iterations,
    )


def discover_run_dirs(run_root: str | Path) -> list[Path]:
    """Run directories directly under run_root, sorted by name."""
    root = Path(run_root)
    if (root / "config.json").is_file():
        return [root]
    return sorted(
        child for child in root.iterdir() if child.is_dir() and (child / "config.json").is_file()
    )


def judgments_path_for(run_dir: str | Path) -> Path:
    run_dir = Path(run_dir)
    return run_dir.parent / f"{run_dir.name}.judgments.jsonl"


def judge_run_rollouts(
    run: LoadedRun,
    backend: CompletionBackend,
    runs: int = DEFAULT_JUDGE_RUNS,
    sequence_base: int = 0,
    max_workers: int = 8,
) -> tuple[list[dict[str, Any]], int]:
    """Judge every rollout of a run R times.

    Returns (judgment records, next sequence). Sequence numbers are assigned
    deterministically in (iteration, candidate index, run) order before any
    call is dispatched, so scripted judges replay exactly.
    """
    if run.reference_answer is None:
        raise EmptyBenchmark(f"problem {run.problem_id} has no reference answer")
    tasks: list[tuple[int, int]] = []
    for stored in run.iterations:
        for rollout in stored.rollouts:
            tasks.append((rollout.candidate.iteration, rollout.candidate.index))
    solutions = {
        (stored.t, rollout.candidate.index): rollout.candidate.extracted_solution
        for stored in run.iterations
        for rollout in stored.rollouts
    }

    def judge_one(task: tuple[int, int], base: int) -> list[dict[str, Any]]:
        t, i = task
        events: list[str] = []
        labels = judge_solution(
            run.statement,
            run.reference_answer or "",
            solutions[(t, i)],
            runs,
            backend,
            sequence_base=base,
            events=events,
        )
        records = []
        for r, label in enumerate(labels):
            records.append(
                {
                    "problem_id": run.problem_id,
                    "iteration": t,
                    "index": i,
                    "run": r,
                    "equivalent": label,
                }
            )
        if events:
            records[-1]["events"] = events
        return records

    bases = [sequence_base + k * runs for k in range(len(tasks))]
    records: list[dict[str, Any]] = []
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        for chunk in pool.map(judge_one, tasks, bases):
            records.extend(chunk)
    return records, sequence_base + len(tasks) * runs


def write_judgments(path: str | Path, records: Sequence[Mapping[str, Any]]) -> None:
    lines = [json.dumps(dict(r), ensure_ascii=False, sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_judgments(path: str | Path) -> list[dict[str, Any]]:
    records = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                records.append(json.loads(line))
    return records


def matrix_for_prefix(
    judgments_by_problem: Mapping[str, Sequence[Mapping[str, Any]]],
    prefix_t: int,
    judge_runs: int,
) -> JudgmentMatrix:
    """Judgment matrix restricted to rollouts with iteration <= prefix_t."""
    problem_ids = tuple(sorted(judgments_by_problem))
    rollout_counts: list[int] = []
    counts: list[list[int]] = [[0] * len(problem_ids) for _ in range(judge_runs)]
    for col, problem_id in enumerate(problem_ids):
        rows = [r for r in judgments_by_problem[problem_id] if r["iteration"] <= prefix_t]
        rollouts = {(r["iteration"], r["index"]) for r in rows}
        rollout_counts.append(len(rollouts))
        for record in rows:
            if record["equivalent"]:
                counts[record["run"]][col] += 1
    return JudgmentMatrix(
        problem_ids=problem_ids,
        rollouts_per_problem=tuple(rollout_counts),
        counts=tuple(tuple(row) for row in counts),
    )


# -- report emission --------------------------------------------------------------


def _render_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [len(h) for h in headers]
    for row in rows:
        for k, cell in enumerate(row):
            widths[k] = max(widths[k], len(cell))
    def fmt(cells: Sequence[str]) -> str:
        return "  ".join(cell.ljust(widths[k]) for k, cell in enumerate(cells)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(row) for row in rows)
    return "\n".join(lines) + "\n"


def emit_report(run_root: str | Path, out_dir: str | Path) -> list[Path]:
    """Emit accuracy tables and plots for all runs under run_root.

    Writes pass_at_1_by_iteration.{csv,txt} plus accuracy_vs_iteration.svg,
    and when several epsilon values are present, diversity_vs_epsilon.{csv,svg}.
    Returns the written paths. Deterministic for deterministic inputs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_dirs = discover_run_dirs(run_root)
    if not run_dirs:
        raise EmptyBenchmark(f"no run directories under {run_root}")

    runs = [load_run(d) for d in run_dirs]
    judgments_by_problem: dict[str, list[dict[str, Any]]] = {}
    judge_runs = 0
    max_t = -1
    for run in runs:
        path = judgments_path_for(run.run_dir)
        if not path.is_file():
            raise EmptyBenchmark(f"missing judgments file {path}; run the eval command first")
        records = load_judgments(path)
        judgments_by_problem.setdefault(run.problem_id, []).extend(records)
        for record in records:
            judge_runs = max(judge_runs, record["run"] + 1)
            max_t = max(max_t, record["iteration"])
    if max_t < 0:
        raise EmptyBenchmark("judgment files contain no records")

    prefix_rows: list[tuple[int, PassAt1Result]] = []
    for t in range(max_t + 1):
        matrix = matrix_for_prefix(judgments_by_problem, t, judge_runs)
        prefix_rows.append((t, pass_at_1(matrix)))

    written: list[Path] = []

    csv_lines = ["iteration,pass_at_1" + "".join(f",run_{r}" for r in range(judge_runs))]
    for t, result in prefix_rows:
        csv_lines.append(
            f"{t},{result.averaged:.6f}" + "".join(f",{v:.6f}" for v in result.per_run)
        )
    csv_path = out / "pass_at_1_by_iteration.csv"
    csv_path.write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    written.append(csv_path)

    table_path = out / "pass_at_1_by_iteration.txt"
    table_path.write_text(
        _render_table(
            ["iteration", "pass@1"] + [f"run {r}" for r in range(judge_runs)],
            [
                [str(t), f"{res.averaged:.4f}"] + [f"{v:.4f}" for v in res.per_run]
                for t, res in prefix_rows
            ],
        ),
        encoding="utf-8",
    )
    written.append(table_path)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "tmas-report"

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot([t for t, _ in prefix_rows], [res.averaged for _, res in prefix_rows], marker="o")
    ax.set_xlabel("iteration")
    ax.set_ylabel("pass@1")
    ax.set_title("Accuracy by iteration prefix")
    ax.grid(True, alpha=0.3)
    accuracy_svg = out / "accuracy_vs_iteration.svg"
    fig.savefig(accuracy_svg, format="svg", metadata={"Date": None})
    plt.close(fig)
    written.append(accuracy_svg)

    by_epsilon: dict[float, list[int]] = {}
    for run in runs:
        if run.iterations:
            by_epsilon.setdefault(run.config.epsilon, []).append(
                len(run.iterations[-1].guideline.guidelines)
            )
    if len(by_epsilon) > 1:
        epsilons = sorted(by_epsilon)
        means = [math.fsum(by_epsilon[e]) / len(by_epsilon[e]) for e in epsilons]
        div_csv = out / "diversity_vs_epsilon.csv"
        div_csv.write_text(
            "epsilon,mean_final_guidelines\n"
            + "\n".join(f"{e},{m:.6f}" for e, m in zip(epsilons, means))
            + "\n",
            encoding="utf-8",
        )
        written.append(div_csv)
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(epsilons, means, marker="s")
        ax.set_xlabel("epsilon")
        ax.set_ylabel("mean final guideline count")
        ax.set_title("Strategy diversity by exploration rate")
        ax.grid(True, alpha=0.3)
        div_svg = out / "diversity_vs_epsilon.svg"
        fig.savefig(div_svg, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(div_svg)

    return written
