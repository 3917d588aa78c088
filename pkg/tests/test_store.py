import json

import pytest

from tmas.domain import (
    Branch,
    CallLedger,
    Candidate,
    Event,
    ExperienceBank,
    GuidelineBank,
    Problem,
    Rollout,
    RunConfig,
    VerificationResult,
)
from tmas.errors import CorruptStore
from tmas.rng import SplitMix64
from tmas.store import RunStore


def make_rollout(t, i, score=1.0):
    return Rollout(
        candidate=Candidate(
            iteration=t, index=i, text=f"text {t}/{i}",
            extracted_solution=f"sol {t}/{i}",
            branch=Branch.INITIAL if t == 0 else Branch.EXPLOIT,
            truncated=False,
        ),
        verifications=(VerificationResult(score=score, feedback="fb", parse_ok=True),),
        summary=f"summary {t}/{i}",
    )


def write_iter(store, t, n=2):
    rng = SplitMix64(seed=t)
    store.write_iteration(
        t=t,
        rollouts=[make_rollout(t, i) for i in range(n)],
        branch_draws=["initial" if t == 0 else "exploit"] * n,
        events=[Event(kind="solution_marker_missing", detail="d", candidate=0)],
        calls=CallLedger(solution=n, verification=n, summary=n, experience=1, guideline=1),
        experience=ExperienceBank(verified_anchors=(f"fact {t}",),
                                  error_avoidance_heuristics=(), changes_log=""),
        guideline=GuidelineBank(guidelines=tuple(f"g{k}" for k in range(t + 1)),
                                changes_log=""),
        rng_state_json=rng.state_json(),
    )


@pytest.fixture
def store(tmp_path, problem, small_config):
    s = RunStore(tmp_path / "run")
    s.create(problem, small_config, {"backend_id": "script:abc", "rng_seed": 11,
                                     "store_format": 1, "template_set_hash": "h"})
    return s


def test_create_and_reload(store, problem, small_config):
    assert store.exists()
    loaded_problem, loaded_config = store.load_problem_and_config()
    assert loaded_problem == problem
    assert loaded_config == small_config
    assert store.load_manifest()["backend_id"] == "script:abc"


def test_layout_paths(store):
    write_iter(store, 0)
    root = store.run_dir
    assert (root / "config.json").is_file()
    assert (root / "manifest.json").is_file()
    assert (root / "iters" / "iter_0.rollouts.jsonl").is_file()
    assert (root / "banks" / "iter_0.experience.json").is_file()
    assert (root / "banks" / "iter_0.guideline.json").is_file()
    assert (root / "rng" / "iter_0.state").is_file()


def test_no_temp_files_left_behind(store):
    write_iter(store, 0)
    leftovers = [p for p in store.run_dir.rglob("*") if p.suffix == ".tmp"]
    assert leftovers == []


def test_iteration_roundtrip(store):
    write_iter(store, 0)
    write_iter(store, 1, n=3)
    stored = store.load_iteration(1)
    assert stored.t == 1
    assert len(stored.rollouts) == 3
    assert stored.rollouts[2].candidate.extracted_solution == "sol 1/2"
    assert stored.branch_draws == ("exploit", "exploit", "exploit")
    assert stored.calls.total() == 3 + 3 + 3 + 1 + 1
    assert stored.events[0].kind == "solution_marker_missing"
    assert stored.experience.verified_anchors == ("fact 1",)
    assert stored.guideline.guidelines == ("g0", "g1")
    assert SplitMix64.from_state_json(stored.rng_state)


def test_bank_files_use_exact_field_names(store):
    write_iter(store, 0)
    exp = json.loads(store.experience_path(0).read_text())
    assert set(exp) == {"verified_anchors", "error_avoidance_heuristics", "changes_log"}
    gl = json.loads(store.guideline_path(0).read_text())
    assert set(gl) == {"updated_guidelines", "changes_log"}


def test_json_files_are_canonical(store):
    write_iter(store, 0)
    for path in (store.config_path, store.manifest_path,
                 store.experience_path(0), store.guideline_path(0)):
        text = path.read_text(encoding="utf-8")
        assert text.endswith("\n")
        data = json.loads(text)
        assert text == json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    # rollouts lines are compact
    first = store.rollouts_path(0).read_text().splitlines()[0]
    assert ": " not in first and ", " not in first


def test_rollouts_header_line(store):
    write_iter(store, 0)
    lines = store.rollouts_path(0).read_text().splitlines()
    header = json.loads(lines[0])
    assert header["kind"] == "header"
    assert header["iteration"] == 0
    assert header["branch_draws"] == ["initial", "initial"]
    assert all(json.loads(line)["kind"] == "rollout" for line in lines[1:])


def test_timing_sidecar_holds_the_only_timestamps(store):
    write_iter(store, 0)
    store.append_timing(0, 1.25)
    rows = [json.loads(line) for line in store.timing_path.read_text().splitlines()]
    assert rows[0]["iteration"] == 0
    assert rows[0]["wall_clock_s"] == 1.25
    assert "unix_time" in rows[0]
    # nothing time-like in the replayable files
    for path in (store.rollouts_path(0), store.experience_path(0),
                 store.guideline_path(0), store.config_path, store.manifest_path):
        assert "unix_time" not in path.read_text()


def test_scan_empty(store):
    assert store.scan_committed() == (0, [])


def test_scan_counts_committed(store):
    write_iter(store, 0)
    write_iter(store, 1)
    committed, leftovers = store.scan_committed()
    assert committed == 2
    assert leftovers == []


def test_scan_partial_iteration_listed_for_discard(store):
    write_iter(store, 0)
    write_iter(store, 1)
    store.rng_path(1).unlink()  # iteration 1 never committed
    committed, leftovers = store.scan_committed()
    assert committed == 1
    assert {p.name for p in leftovers} == {
        "iter_1.rollouts.jsonl", "iter_1.experience.json", "iter_1.guideline.json",
    }
    store.discard_partial(leftovers)
    assert store.scan_committed() == (1, [])


def test_scan_rejects_files_beyond_first_uncommitted(store):
    write_iter(store, 0)
    write_iter(store, 1)
    write_iter(store, 2)
    store.rng_path(1).unlink()
    with pytest.raises(CorruptStore):
        store.scan_committed()


def test_scan_rejects_committed_iteration_with_missing_companion(store):
    write_iter(store, 0)
    store.experience_path(0).unlink()
    with pytest.raises(CorruptStore):
        store.scan_committed()


def test_scan_rejects_missing_rollouts_for_committed(store):
    write_iter(store, 0)
    store.rollouts_path(0).unlink()
    with pytest.raises(CorruptStore):
        store.scan_committed()


def test_load_iteration_rejects_corrupt_lines(store):
    write_iter(store, 0)
    store.rollouts_path(0).write_text("garbage\n")
    with pytest.raises(CorruptStore):
        store.load_iteration(0)


def test_load_iteration_rejects_wrong_header(store):
    write_iter(store, 0)
    lines = store.rollouts_path(0).read_text().splitlines()
    header = json.loads(lines[0])
    header["iteration"] = 5
    lines[0] = json.dumps(header)
    store.rollouts_path(0).write_text("\n".join(lines) + "\n")
    with pytest.raises(CorruptStore):
        store.load_iteration(0)


def test_load_iteration_rejects_bad_bank(store):
    write_iter(store, 0)
    store.guideline_path(0).write_text('{"wrong": []}\n')
    with pytest.raises(CorruptStore):
        store.load_iteration(0)


def test_report_roundtrip(store):
    assert store.load_report() is None
    store.write_report({"problem_id": "p-demo", "iterations_completed": 2})
    assert store.load_report()["iterations_completed"] == 2
