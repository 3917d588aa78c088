"""Run directory persistence.

Layout:

    run_dir/
      config.json               problem + validated run config
      manifest.json             template set hash, seed, backend id
      iters/iter_<t>.rollouts.jsonl   header line, then one line per rollout
      banks/iter_<t>.experience.json
      banks/iter_<t>.guideline.json
      rng/iter_<t>.state        rng state after iteration t; written last
      report.json               final selection and ledger
      timing.sidecar.jsonl      wall-clock per iteration; the only timestamps

Within an iteration, files are written in the order listed and the rng state
acts as the commit marker. On resume, an iteration with a state file but a
missing or unreadable artifact is corruption (the writer cannot produce that),
while trailing files without a state file are a discarded partial iteration.
All JSON is canonical (sorted keys, UTF-8), so identical runs produce
identical bytes everywhere except the timing sidecar.
"""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .domain import (
    CallLedger,
    Event,
    ExperienceBank,
    GuidelineBank,
    Problem,
    Rollout,
    RunConfig,
    canonical_dumps,
    canonical_file_dumps,
    validate_config,
)
from .errors import CorruptStore

_ITER_FILE = re.compile(r"^iter_(\d+)\.")


@dataclass(frozen=True)
class StoredIteration:
    """One committed iteration, as reloaded from disk."""

    t: int
    rollouts: tuple[Rollout, ...]
    branch_draws: tuple[str, ...]
    events: tuple[Event, ...]
    calls: CallLedger
    experience: ExperienceBank
    guideline: GuidelineBank
    rng_state: str


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


class RunStore:
    def __init__(self, run_dir: str | Path):
        self.run_dir = Path(run_dir)

    # -- paths ------------------------------------------------------------

    @property
    def config_path(self) -> Path:
        return self.run_dir / "config.json"

    @property
    def manifest_path(self) -> Path:
        return self.run_dir / "manifest.json"

    @property
    def report_path(self) -> Path:
        return self.run_dir / "report.json"

    @property
    def timing_path(self) -> Path:
        return self.run_dir / "timing.sidecar.jsonl"

    def rollouts_path(self, t: int) -> Path:
        return self.run_dir / "iters" / f"iter_{t}.rollouts.jsonl"

    def experience_path(self, t: int) -> Path:
        return self.run_dir / "banks" / f"iter_{t}.experience.json"

    def guideline_path(self, t: int) -> Path:
        return self.run_dir / "banks" / f"iter_{t}.guideline.json"

    def rng_path(self, t: int) -> Path:
        return self.run_dir / "rng" / f"iter_{t}.state"

    # -- creation ----------------------------------------------------------

    def create(self, problem: Problem, config: RunConfig, manifest: dict[str, Any]) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        for sub in ("iters", "banks", "rng"):
            (self.run_dir / sub).mkdir(exist_ok=True)
        _write_text(
            self.config_path,
            canonical_file_dumps(
                {"problem": problem.to_json_dict(), "config": config.to_json_dict()}
            ),
        )
        _write_text(self.manifest_path, canonical_file_dumps(manifest))

    def exists(self) -> bool:
        return self.config_path.is_file() and self.manifest_path.is_file()

    def load_problem_and_config(self) -> tuple[Problem, RunConfig]:
        data = self._load_json(self.config_path)
        return Problem.from_json_dict(data["problem"]), validate_config(data["config"])

    def load_manifest(self) -> dict[str, Any]:
        return self._load_json(self.manifest_path)

    def _load_json(self, path: Path) -> Any:
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise CorruptStore(str(path), "missing file") from exc
        except json.JSONDecodeError as exc:
            raise CorruptStore(str(path), f"invalid JSON: {exc}") from exc

    # -- iteration writes ---------------------------------------------------

    def write_iteration(
        self,
        t: int,
        rollouts: list[Rollout],
        branch_draws: list[str],
        events: list[Event],
        calls: CallLedger,
        experience: ExperienceBank,
        guideline: GuidelineBank,
        rng_state_json: str,
    ) -> None:
        header = {
            "kind": "header",
            "iteration": t,
            "branch_draws": branch_draws,
            "events": [e.to_json_dict() for e in events],
            "calls": calls.to_json_dict(),
        }
        lines = [canonical_dumps(header)]
        for rollout in rollouts:
            record = {"kind": "rollout"}
            record.update(rollout.to_json_dict())
            lines.append(canonical_dumps(record))
        _write_text(self.rollouts_path(t), "\n".join(lines) + "\n")
        _write_text(self.experience_path(t), canonical_file_dumps(experience.to_json_dict()))
        _write_text(self.guideline_path(t), canonical_file_dumps(guideline.to_json_dict()))
        # Commit marker: written last, checked first on resume.
        _write_text(self.rng_path(t), rng_state_json)

    def append_timing(self, t: int, wall_clock_s: float) -> None:
        line = canonical_dumps(
            {"iteration": t, "unix_time": time.time(), "wall_clock_s": wall_clock_s}
        )
        with self.timing_path.open("a", encoding="utf-8") as handle:
            handle.write(line + "\n")

    def write_report(self, report: dict[str, Any]) -> None:
        _write_text(self.report_path, canonical_file_dumps(report))

    def load_report(self) -> dict[str, Any] | None:
        if not self.report_path.is_file():
            return None
        return self._load_json(self.report_path)

    # -- resume scan ---------------------------------------------------------

    def _indexed_files(self, subdir: str) -> dict[int, list[Path]]:
        out: dict[int, list[Path]] = {}
        directory = self.run_dir / subdir
        if not directory.is_dir():
            return out
        for path in directory.iterdir():
            match = _ITER_FILE.match(path.name)
            if match:
                out.setdefault(int(match.group(1)), []).append(path)
        return out

    def scan_committed(self) -> tuple[int, list[Path]]:
        """Return (count of committed iterations, leftover partial files).

        Committed means the rng state file exists. A committed iteration with
        a missing companion file, or any file for an iteration beyond the
        first uncommitted one, is corruption. Files belonging to the first
        uncommitted iteration are a partial write and are returned for the
        caller to discard.
        """
        by_iter: dict[int, list[Path]] = {}
        for subdir in ("iters", "banks", "rng"):
            for t, paths in self._indexed_files(subdir).items():
                by_iter.setdefault(t, []).extend(paths)

        committed = 0
        while self.rng_path(committed).is_file():
            committed += 1

        for t in sorted(by_iter):
            if t > committed:
                raise CorruptStore(
                    str(by_iter[t][0]),
                    f"file for iteration {t} exists but iteration {committed} was never committed",
                )

        for t in range(committed):
            for path in (self.rollouts_path(t), self.experience_path(t), self.guideline_path(t)):
                if not path.is_file():
                    raise CorruptStore(str(path), "missing from a committed iteration")

        return committed, by_iter.get(committed, [])

    def discard_partial(self, leftovers: list[Path]) -> None:
        for path in leftovers:
            path.unlink(missing_ok=True)

    def load_iteration(self, t: int) -> StoredIteration:
        rollouts_file = self.rollouts_path(t)
        try:
            lines = rollouts_file.read_text(encoding="utf-8").splitlines()
        except FileNotFoundError as exc:
            raise CorruptStore(str(rollouts_file), "missing file") from exc
        if not lines:
            raise CorruptStore(str(rollouts_file), "empty rollouts file")

        def parse_line(index: int) -> dict[str, Any]:
            try:
                data = json.loads(lines[index])
            except json.JSONDecodeError as exc:
                raise CorruptStore(str(rollouts_file), f"line {index + 1}: {exc}") from exc
            if not isinstance(data, dict):
                raise CorruptStore(str(rollouts_file), f"line {index + 1}: not an object")
            return data

        header = parse_line(0)
        if header.get("kind") != "header" or header.get("iteration") != t:
            raise CorruptStore(str(rollouts_file), "first line is not a matching header")
        rollouts: list[Rollout] = []
        for i in range(1, len(lines)):
            data = parse_line(i)
            if data.get("kind") != "rollout":
                raise CorruptStore(str(rollouts_file), f"line {i + 1}: expected a rollout record")
            try:
                rollouts.append(Rollout.from_json_dict(data))
            except (KeyError, ValueError, TypeError) as exc:
                raise CorruptStore(str(rollouts_file), f"line {i + 1}: {exc}") from exc

        try:
            experience = ExperienceBank.from_json_dict(self._load_json(self.experience_path(t)))
            guideline = GuidelineBank.from_json_dict(self._load_json(self.guideline_path(t)))
        except (KeyError, TypeError) as exc:
            raise CorruptStore(str(self.run_dir), f"iteration {t} bank: {exc}") from exc
        rng_state = self.rng_path(t).read_text(encoding="utf-8")
        try:
            events = tuple(Event.from_json_dict(e) for e in header.get("events", []))
            calls = CallLedger.from_json_dict(header["calls"])
            branch_draws = tuple(str(b) for b in header["branch_draws"])
        except (KeyError, TypeError) as exc:
            raise CorruptStore(str(rollouts_file), f"header: {exc}") from exc
        return StoredIteration(
            t=t,
            rollouts=tuple(rollouts),
            branch_draws=branch_draws,
            events=events,
            calls=calls,
            experience=experience,
            guideline=guideline,
            rng_state=rng_state,
        )
