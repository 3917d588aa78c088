import json

import pytest
from hypothesis import given, strategies as st

from tmas import templates
from tmas.agents import (
    ExploitMode,
    ExploreMode,
    InitialMode,
    extract_json_object,
    extract_solution,
    parse_experience_update,
    parse_guideline_update,
    parse_judge,
    parse_novelty_judge,
    parse_verification,
    render_experience_prompt,
    render_guideline_prompt,
    render_judge_user_prompt,
    render_novelty_judge_user_prompt,
    render_solution_prompt,
    render_summary_prompt,
    render_verification_prompt,
)
from tmas.domain import (
    Branch,
    Candidate,
    ExperienceBank,
    GuidelineBank,
    Problem,
    Rollout,
    VerificationResult,
)
from tmas.errors import TemplateError

PROBLEM = Problem(id="p", statement="Compute the tilings of a 2 by 4 board.",
                  reference_answer="12")


def make_rollout(t=1, i=0, solution="sol text", summary="sum text", score=1.0):
    return Rollout(
        candidate=Candidate(
            iteration=t, index=i, text=f"blah\n## Solution\n{solution}",
            extracted_solution=solution,
            branch=Branch.INITIAL if t == 0 else Branch.EXPLOIT, truncated=False,
        ),
        verifications=(VerificationResult(score=score, feedback="fb", parse_ok=True),),
        summary=summary,
    )


# -- solution extraction ---------------------------------------------------------


def test_extract_solution_takes_last_marker():
    text = "## Solution\nfirst\n## Solution\nsecond part"
    extracted, found = extract_solution(text)
    assert found
    assert extracted.strip() == "second part"


def test_extract_solution_missing_marker_returns_full_text():
    extracted, found = extract_solution("no markers at all")
    assert not found
    assert extracted == "no markers at all"


# -- prompt rendering -------------------------------------------------------------


def test_initial_prompt_has_question_only():
    out = render_solution_prompt(PROBLEM, InitialMode())
    assert PROBLEM.statement in out
    assert templates.PREVIOUS_ATTEMPTS_HEADER not in out


def test_exploit_prompt_contains_attempts_and_experience():
    bank = ExperienceBank(verified_anchors=("T(2)=3",),
                          error_avoidance_heuristics=("avoid undercounting",),
                          changes_log="")
    out = render_solution_prompt(
        PROBLEM,
        ExploitMode(previous_rollouts=(make_rollout(solution="six", summary="weak"),),
                    experience=bank),
    )
    assert PROBLEM.statement in out
    assert "six" in out
    assert "weak" in out
    assert "T(2)=3" in out
    assert "avoid undercounting" in out


def test_exploit_prompt_without_experience_block():
    out = render_solution_prompt(
        PROBLEM, ExploitMode(previous_rollouts=(make_rollout(),), experience=None)
    )
    assert "Accumulated Experience" not in out


def test_exploit_prompt_requires_previous_rollouts():
    with pytest.raises(TemplateError):
        render_solution_prompt(PROBLEM, ExploitMode(previous_rollouts=(), experience=None))


def test_explore_prompt_lists_tried_strategies():
    bank = GuidelineBank(guidelines=("direct casework", "transfer matrix"), changes_log="")
    out = render_solution_prompt(PROBLEM, ExploreMode(guidelines=bank))
    assert "DO NOT REPEAT" in out
    assert "direct casework" in out
    assert "transfer matrix" in out


def test_explore_prompt_empty_bank_uses_placeholder_token():
    out = render_solution_prompt(PROBLEM, ExploreMode(guidelines=GuidelineBank.empty()))
    assert templates.EMPTY_LIST_TOKEN in out


def test_verification_prompt_embeds_solution():
    cand = make_rollout(solution="the answer is 12").candidate
    out = render_verification_prompt(PROBLEM, cand)
    assert "the answer is 12" in out
    assert PROBLEM.statement in out


def test_verification_prompt_rejects_empty_solution():
    cand = Candidate(iteration=1, index=0, text="x", extracted_solution="  ",
                     branch=Branch.EXPLOIT, truncated=False)
    with pytest.raises(TemplateError):
        render_verification_prompt(PROBLEM, cand)


def test_summary_prompt_includes_all_reports():
    cand = make_rollout().candidate
    vers = [VerificationResult(score=0.5, feedback=f"issue {k}", parse_ok=True)
            for k in range(3)]
    out = render_summary_prompt(PROBLEM, cand, vers)
    for k in range(3):
        assert f"issue {k}" in out


def test_summary_prompt_requires_verifications():
    with pytest.raises(TemplateError):
        render_summary_prompt(PROBLEM, make_rollout().candidate, [])


def test_experience_prompt_shows_previous_bank_and_rollouts():
    prev = ExperienceBank(verified_anchors=("old fact",),
                          error_avoidance_heuristics=(), changes_log="")
    out = render_experience_prompt(PROBLEM, [make_rollout()], prev)
    assert "old fact" in out
    assert "sol text" in out


def test_guideline_prompt_shows_previous_guidelines():
    prev = GuidelineBank(guidelines=("tried A",), changes_log="")
    out = render_guideline_prompt(PROBLEM, [make_rollout()], prev)
    assert "tried A" in out


def test_judge_prompt_fields():
    out = render_judge_user_prompt("prob", "42", "my answer")
    assert "prob" in out and "42" in out and "my answer" in out


def test_novelty_judge_prompt_lists_tried():
    out = render_novelty_judge_user_prompt("prob", ["strat A", "strat B"], "sol")
    assert "strat A" in out and "strat B" in out


# -- verification parsing -----------------------------------------------------------


@pytest.mark.parametrize(
    "text,score",
    [
        ("analysis...\n\\boxed{1}", 1.0),
        ("\\boxed{0.5} early then \\boxed{0} later", 0.0),
        ("nested ok \\boxed{0.5}", 0.5),
        ("Final grade: \\boxed{0}", 0.0),
    ],
)
def test_parse_verification_last_boxed_wins(text, score):
    v = parse_verification(text)
    assert v.parse_ok
    assert v.score == score


@pytest.mark.parametrize(
    "text",
    [
        "no box at all",
        "\\boxed{2}",
        "\\boxed{0.7}",
        "\\boxed{}",
        "\\boxed{one}",
        "\\boxed{unbalanced",
    ],
)
def test_parse_verification_failures_score_zero(text):
    v = parse_verification(text)
    assert not v.parse_ok
    assert v.score == 0.0


def test_parse_verification_unbalanced_final_box_falls_back_to_earlier():
    v = parse_verification("\\boxed{1} then \\boxed{oops")
    assert v.parse_ok
    assert v.score == 1.0


def test_parse_verification_nested_braces():
    v = parse_verification("\\boxed{\\text{score}} is prose; real one \\boxed{0.5}")
    assert v.parse_ok
    assert v.score == 0.5


def test_parse_verification_keeps_feedback():
    v = parse_verification("detailed critique here\n\\boxed{1}")
    assert "detailed critique" in v.feedback


# -- JSON extraction -----------------------------------------------------------------


def test_extract_json_prefers_fenced_block():
    text = 'prose {"decoy": 1} more\n```json\n{"a": 2}\n```\ntail'
    assert extract_json_object(text) == {"a": 2}


def test_extract_json_balanced_scan():
    text = 'reasoning... {"x": {"y": [1, 2]}, "z": "s"} done'
    assert extract_json_object(text) == {"x": {"y": [1, 2]}, "z": "s"}


def test_extract_json_braces_inside_strings():
    text = '{"a": "brace } inside", "b": 1}'
    assert extract_json_object(text) == {"a": "brace } inside", "b": 1}


def test_extract_json_none_for_garbage():
    assert extract_json_object("nothing here") is None
    assert extract_json_object("{broken: json}") is None


# -- bank update parsing ---------------------------------------------------------------


PREV = ExperienceBank(verified_anchors=("kept",), error_avoidance_heuristics=(),
                      changes_log="")


def test_parse_experience_update_success():
    text = json.dumps({
        "verified_anchors": ["kept", "new fact"],
        "error_avoidance_heuristics": ["dont guess"],
        "changes_log": "added new fact",
    })
    bank, diag = parse_experience_update(text, PREV)
    assert diag.ok
    assert bank.verified_anchors == ("kept", "new fact")
    assert bank.error_avoidance_heuristics == ("dont guess",)


def test_parse_experience_update_garbage_keeps_previous():
    for text in ("not json", "{}", json.dumps({"verified_anchors": "notalist",
                                               "error_avoidance_heuristics": []}),
                 json.dumps({"verified_anchors": ["a"]})):
        bank, diag = parse_experience_update(text, PREV)
        assert not diag.ok
        assert bank == PREV


def test_parse_experience_update_nonstring_items_dropped_with_warning():
    text = json.dumps({"verified_anchors": ["ok", 5],
                       "error_avoidance_heuristics": []})
    bank, diag = parse_experience_update(text, PREV)
    assert diag.ok
    assert diag.warnings
    assert bank.verified_anchors == ("ok",)


def test_parse_experience_update_applies_cap():
    text = json.dumps({
        "verified_anchors": [f"a{i}" for i in range(80)],
        "error_avoidance_heuristics": [],
        "changes_log": "",
    })
    bank, diag = parse_experience_update(text, PREV, cap=64)
    assert diag.ok
    assert len(bank.verified_anchors) == 64


def test_parse_guideline_update_success():
    text = "thinking...\n" + json.dumps(
        {"updated_guidelines": ["g1", "g2"], "changes_log": "x"}
    )
    entries, changes_log, diag = parse_guideline_update(text)
    assert diag.ok
    assert entries == ("g1", "g2")
    assert changes_log == "x"


def test_parse_guideline_update_failures():
    for text in ("prose only", json.dumps({"wrong_key": []}),
                 json.dumps({"updated_guidelines": "not a list"})):
        entries, _, diag = parse_guideline_update(text)
        assert not diag.ok
        assert entries == ()


def test_parse_guideline_update_nonstring_entries_dropped_with_warning():
    entries, _, diag = parse_guideline_update(
        json.dumps({"updated_guidelines": ["ok", 3]})
    )
    assert diag.ok
    assert diag.warnings
    assert entries == ("ok",)


# -- judge parsing ------------------------------------------------------------------


def test_parse_judge():
    d = parse_judge(json.dumps({"equivalent": True, "reasoning": "same"}))
    assert d.equivalent and d.parse_ok
    d = parse_judge(json.dumps({"equivalent": False}))
    assert not d.equivalent and d.parse_ok


def test_parse_judge_failures_count_as_not_equivalent():
    for text in ("garbage", json.dumps({"equivalent": "yes"}), json.dumps({"eq": True})):
        d = parse_judge(text)
        assert not d.equivalent
        assert not d.parse_ok


def test_parse_novelty_judge():
    assert parse_novelty_judge(json.dumps({"label": 1})) == 1
    assert parse_novelty_judge(json.dumps({"label": 0})) == 0
    assert parse_novelty_judge(json.dumps({"label": -1})) == -1
    assert parse_novelty_judge(json.dumps({"label": True})) == -1
    assert parse_novelty_judge(json.dumps({"label": 2})) == -1
    assert parse_novelty_judge("nope") == -1


# -- fuzzing the parsers ---------------------------------------------------------------


@given(st.text(max_size=300))
def test_parse_verification_never_raises(text):
    v = parse_verification(text)
    assert v.score in (0.0, 0.5, 1.0)
    if not v.parse_ok:
        assert v.score == 0.0


@given(st.text(max_size=300))
def test_parse_experience_never_raises(text):
    bank, diag = parse_experience_update(text, PREV)
    if not diag.ok:
        assert bank == PREV


@given(st.text(max_size=300))
def test_parse_guideline_never_raises(text):
    parse_guideline_update(text)


@given(st.text(max_size=300))
def test_parse_judge_never_raises(text):
    parse_judge(text)
    assert parse_novelty_judge(text) in (1, 0, -1)
