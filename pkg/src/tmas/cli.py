"""Command-line entry points.

Four subcommands: `run` drives the solving loop over a benchmark, `eval`
judges finished runs and emits accuracy reports, `rewards-audit` recomputes
shaped rewards and advantages from an outcomes file, and `report` regenerates
report files from existing judgments.

Exit codes: 0 success, 1 at least one run aborted, 2 configuration or input
error. Run parameters live in a single JSON config file; flags carry only
paths, filters, --force, and --resume. Completed outputs are detected and
skipped unless --force.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

from . import evalkit, orchestrator, rewards
from .backend import CompletionBackend, LiveBackend, ScriptedBackend
from .domain import Problem, RunConfig, load_benchmark_jsonl, validate_config
from .errors import (
    CorruptStore,
    EmptyBenchmark,
    EmptyGroup,
    ParseError,
    PartitionError,
    RangeError,
    TmasError,
)
from .store import RunStore

log = logging.getLogger("tmas")

EXIT_OK = 0
EXIT_RUN_FAILED = 1
EXIT_CONFIG = 2

_BACKEND_KEYS = {"script": {"kind", "path"}, "live": {"kind", "endpoint", "model"}}
_TOP_KEYS = {"run", "backend", "benchmark", "output_root", "max_parallel_problems"}


class ConfigFileError(ValueError):
    pass


def _resolve(base: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else base / path


def load_cli_config(path: str | Path) -> dict[str, Any]:
    """Parse and validate the run-command config file.

    Relative paths inside the file resolve against the file's directory.
    Returns a dict with keys: config (RunConfig), backend_spec, benchmark_path,
    output_root, max_parallel_problems.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigFileError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"config file is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigFileError("config file must hold a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigFileError(f"unknown config keys: {sorted(unknown)}")
    for key in ("run", "backend", "benchmark", "output_root"):
        if key not in raw:
            raise ConfigFileError(f"config file is missing required key {key!r}")

    try:
        config = validate_config(raw["run"])
    except (RangeError, TypeError) as exc:
        raise ConfigFileError(f"invalid run config: {exc}")

    backend_spec = raw["backend"]
    if not isinstance(backend_spec, dict) or "kind" not in backend_spec:
        raise ConfigFileError('backend must be an object with a "kind" field')
    kind = backend_spec["kind"]
    if kind not in _BACKEND_KEYS:
        raise ConfigFileError(f'backend kind must be "script" or "live", got {kind!r}')
    extra = set(backend_spec) - _BACKEND_KEYS[kind]
    if extra:
        raise ConfigFileError(f"backend keys {sorted(extra)} do not belong to kind {kind!r}")
    if kind == "script" and not backend_spec.get("path"):
        raise ConfigFileError("script backend needs a path")

    base = path.parent
    parallel = raw.get("max_parallel_problems", 1)
    if not isinstance(parallel, int) or parallel < 1:
        raise ConfigFileError("max_parallel_problems must be a positive integer")
    return {
        "config": config,
        "backend_spec": backend_spec,
        "benchmark_path": _resolve(base, raw["benchmark"]),
        "output_root": _resolve(base, raw["output_root"]),
        "max_parallel_problems": parallel,
        "config_dir": base,
    }


def build_backend(spec: dict[str, Any], config: RunConfig, config_dir: Path) -> CompletionBackend:
    if spec["kind"] == "script":
        return ScriptedBackend.from_file(
            _resolve(config_dir, spec["path"]), max_in_flight=config.max_in_flight
        )
    kwargs: dict[str, Any] = {"max_in_flight": config.max_in_flight}
    if spec.get("endpoint"):
        return LiveBackend(
            endpoint=spec["endpoint"],
            api_key=os.environ.get("TMAS_API_KEY"),
            model=spec.get("model") or os.environ.get("TMAS_MODEL"),
            **kwargs,
        )
    return LiveBackend.from_env(os.environ, **kwargs)


def _run_dir_for(output_root: Path, problem_id: str) -> Path:
    safe = problem_id.replace(os.sep, "_").replace("/", "_")
    return output_root / safe


def _run_one_problem(
    problem: Problem,
    config: RunConfig,
    backend: CompletionBackend,
    run_dir: Path,
    force: bool,
    resume: bool,
) -> tuple[str, str | None]:
    """Returns (status, error). status: done | skipped | resumed | failed."""
    store = RunStore(run_dir)
    try:
        if store.exists():
            if store.load_report() is not None and not force:
                return "skipped", None
            if force:
                shutil.rmtree(run_dir)
            elif resume:
                orchestrator.resume(run_dir, backend)
                return "resumed", None
            else:
                return (
                    "failed",
                    f"{run_dir} already exists and is incomplete; pass --resume to "
                    "continue it or --force to start over",
                )
        orchestrator.run(problem, config, backend, store)
        return "done", None
    except (TmasError, OSError) as exc:
        return "failed", f"{type(exc).__name__}: {exc}"


def cmd_run(args: argparse.Namespace) -> int:
    try:
        parsed = load_cli_config(args.config)
        problems = load_benchmark_jsonl(parsed["benchmark_path"])
    except (ConfigFileError, ParseError, EmptyBenchmark, OSError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG

    if args.filter:
        problems = [p for p in problems if args.filter in p.id]
        if not problems:
            log.warning("filter %r matched no problems; nothing to do", args.filter)
            return EXIT_OK

    config: RunConfig = parsed["config"]
    try:
        backend = build_backend(parsed["backend_spec"], config, parsed["config_dir"])
    except (TmasError, ParseError, OSError, ValueError) as exc:
        log.error("cannot build backend: %s", exc)
        return EXIT_CONFIG

    output_root: Path = parsed["output_root"]
    output_root.mkdir(parents=True, exist_ok=True)

    def work(problem: Problem) -> tuple[Problem, str, str | None]:
        run_dir = _run_dir_for(output_root, problem.id)
        status, error = _run_one_problem(
            problem, config, backend, run_dir, args.force, args.resume
        )
        return problem, status, error

    results: list[tuple[Problem, str, str | None]] = []
    workers = min(parsed["max_parallel_problems"], len(problems))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, problems))
    else:
        results = [work(p) for p in problems]

    failures = 0
    for problem, status, error in results:
        if status == "failed":
            failures += 1
            log.error("problem %s failed: %s", problem.id, error)
        else:
            log.info("problem %s: %s", problem.id, status)
    if failures:
        log.error("%d of %d runs failed", failures, len(results))
        return EXIT_RUN_FAILED
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        run_dirs = evalkit.discover_run_dirs(args.run_root)
        if not run_dirs:
            raise EmptyBenchmark(f"no run directories under {args.run_root}")
        references: dict[str, str] = {}
        if args.benchmark:
            for problem in load_benchmark_jsonl(args.benchmark):
                if problem.reference_answer:
                    references[problem.id] = problem.reference_answer
        if args.script:
            backend: CompletionBackend = ScriptedBackend.from_file(args.script)
        else:
            backend = LiveBackend.from_env(os.environ)
    except (TmasError, ParseError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG

    runs = []
    try:
        for run_dir in run_dirs:
            run = evalkit.load_run(run_dir)
            if run.problem_id in references:
                run = evalkit.LoadedRun(
                    run_dir=run.run_dir,
                    problem_id=run.problem_id,
                    statement=run.statement,
                    reference_answer=references[run.problem_id],
                    config=run.config,
                    iterations=run.iterations,
                )
            if not run.reference_answer:
                log.error(
                    "problem %s has no reference answer (in the run config or "
                    "the benchmark); cannot judge",
                    run.problem_id,
                )
                return EXIT_CONFIG
            runs.append(run)
    except (CorruptStore, ParseError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG

    sequence = 0
    try:
        for run in runs:
            path = evalkit.judgments_path_for(run.run_dir)
            task_count = sum(len(stored.rollouts) for stored in run.iterations)
            if path.is_file() and not args.force:
                log.info("judgments for %s already exist; skipping", run.problem_id)
                sequence += task_count * args.judge_runs
                continue
            records, sequence = evalkit.judge_run_rollouts(
                run, backend, runs=args.judge_runs, sequence_base=sequence
            )
            evalkit.write_judgments(path, records)
            log.info("judged %s: %d records", run.problem_id, len(records))
    except TmasError as exc:
        log.error("judging aborted: %s", exc)
        return EXIT_RUN_FAILED

    out_dir = Path(args.out) if args.out else Path(args.run_root) / "report"
    try:
        written = evalkit.emit_report(args.run_root, out_dir)
    except (TmasError, OSError) as exc:
        log.error("report emission failed: %s", exc)
        return EXIT_RUN_FAILED
    for path in written:
        log.info("wrote %s", path)
    return EXIT_OK


def cmd_rewards_audit(args: argparse.Namespace) -> int:
    out_path = Path(args.out) if args.out else Path(args.outcomes).with_suffix(".audit.jsonl")
    if out_path.exists() and not args.force:
        log.info("audit output %s already exists; skipping (use --force to redo)", out_path)
        return EXIT_OK
    try:
        records = rewards.load_outcomes_jsonl(args.outcomes)
        result = rewards.audit_outcomes(records, beta=args.beta, delta=args.delta)
    except (ParseError, PartitionError, EmptyGroup, RangeError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    rewards.write_audit_jsonl(out_path, result)
    summary = result.summary_dict()
    log.info("audit written to %s", out_path)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    out_dir = Path(args.out) if args.out else Path(args.run_root) / "report"
    marker = out_dir / "pass_at_1_by_iteration.csv"
    if marker.exists() and not args.force:
        log.info("report already exists at %s; skipping (use --force to redo)", out_dir)
        return EXIT_OK
    try:
        written = evalkit.emit_report(args.run_root, out_dir)
    except (TmasError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    for path in written:
        log.info("wrote %s", path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tmas",
        description="Iterative multi-agent solving loop with memory banks, "
        "reward auditing, and evaluation reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="solve a benchmark per a JSON config file")
    p_run.add_argument("--config", required=True, help="path to the run config JSON")
    p_run.add_argument("--filter", default=None, help="only run problems whose id contains this")
    p_run.add_argument("--force", action="store_true", help="redo completed or partial runs")
    p_run.add_argument("--resume", action="store_true", help="continue interrupted runs")
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="judge finished runs and emit accuracy reports")
    p_eval.add_argument("--run-root", required=True, help="run directory or directory of runs")
    p_eval.add_argument("--benchmark", default=None, help="benchmark JSONL with reference answers")
    p_eval.add_argument("--judge-runs", type=int, default=evalkit.DEFAULT_JUDGE_RUNS)
    p_eval.add_argument("--script", default=None, help="scripted judge responses (JSONL)")
    p_eval.add_argument("--out", default=None, help="report directory (default <run-root>/report)")
    p_eval.add_argument("--force", action="store_true", help="re-judge even if judgments exist")
    p_eval.set_defaults(func=cmd_eval)

    p_audit = sub.add_parser("rewards-audit", help="recompute shaped rewards and advantages")
    p_audit.add_argument("--outcomes", required=True, help="outcomes JSONL path")
    p_audit.add_argument("--beta", type=float, default=rewards.DEFAULT_BETA)
    p_audit.add_argument("--delta", type=float, default=rewards.DEFAULT_DELTA)
    p_audit.add_argument("--out", default=None, help="audit output path")
    p_audit.add_argument("--force", action="store_true")
    p_audit.set_defaults(func=cmd_rewards_audit)

    p_report = sub.add_parser("report", help="regenerate report files from judgments")
    p_report.add_argument("--run-root", required=True)
    p_report.add_argument("--out", default=None)
    p_report.add_argument("--force", action="store_true")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
