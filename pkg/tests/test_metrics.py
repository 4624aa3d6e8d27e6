import sys

import pytest
from hypothesis import given
from hypothesis import strategies as st

from steerlab.errors import IdMismatch, JudgeParseError, JudgeUnavailable
from steerlab.metrics import (
    ForgottenAttribute,
    MockJudge,
    ReasoningSample,
    ScriptedJudge,
    SubprocessJudge,
    explicit_leak,
    implicit_leak,
    lcs_length,
    cloze_accuracy,
    mc_accuracy,
    parse_verdict,
    rcr,
    ril,
    rouge_l,
)

JAPAN = ForgottenAttribute("residence", "Japan")
JUDGE = MockJudge({"Japan": ["Tokyo", "Osaka"]})
words = st.lists(st.sampled_from(["a", "b", "c", "d", "e"]), max_size=8).map(" ".join)


# ----- leakage -----

def test_explicit_leak_examples():
    assert explicit_leak("He lives in Japan now", JAPAN)
    assert not explicit_leak("He lives in Tokyo", JAPAN)
    assert not explicit_leak("", JAPAN)
    assert not explicit_leak("Japanese food", JAPAN)


def test_implicit_leak_examples():
    assert implicit_leak("He lives in Tokyo", JAPAN, JUDGE)
    assert not implicit_leak("He likes tea", JAPAN, JUDGE)
    with pytest.raises(JudgeParseError):
        implicit_leak("He lives in Tokyo", JAPAN, MockJudge(reply="maybe"))
    with pytest.raises(JudgeUnavailable):
        implicit_leak("x", JAPAN, None)


def test_parse_verdict_is_strict():
    assert parse_verdict('"Yes."').answer == "YES"
    assert parse_verdict("no, because").answer == "NO"
    for bad in ("", "perhaps yes", "Y"):
        with pytest.raises(JudgeParseError):
            parse_verdict(bad)


def test_ril_worked_example():
    samples = [
        ("He lives in Japan", [JAPAN]),
        ("He lives in Tokyo", [JAPAN]),
        ("Near Osaka castle", [JAPAN]),
        ("He likes tea", [JAPAN]),
    ]
    out = ril(samples, JUDGE, alpha=0.5)
    assert (out.n_explicit, out.n_implicit, out.n_clean) == (1, 2, 1)
    assert out.score == 0.375
    assert ril([("tea", [JAPAN])] * 3, JUDGE).score == 0.0


@given(st.lists(st.sampled_from(["Japan trip", "Tokyo trip", "tea"]), min_size=1, max_size=10), st.floats(0, 1))
def test_ril_levels_are_exclusive(cots, alpha):
    out = ril([(c, [JAPAN]) for c in cots], JUDGE, alpha)
    assert out.n_explicit == cots.count("Japan trip")
    assert out.n_implicit == cots.count("Tokyo trip")
    n = len(cots)
    assert out.score == pytest.approx(alpha * out.n_explicit / n + (1 - alpha) * out.n_implicit / n)
    assert 0.0 <= out.score <= 1.0


def test_ril_argument_checks():
    with pytest.raises(ValueError):
        ril([], JUDGE)
    with pytest.raises(ValueError):
        ril([("x", [JAPAN])], JUDGE, alpha=1.5)


# ----- reasoning retention -----

def scripted(votes):
    return [ReasoningSample(question=str(i), cot="c", answer="a") for i in range(len(votes))], ScriptedJudge(votes)


def test_rcr_majority_examples():
    samples, judge = scripted([(1, 1, 0)])
    assert rcr(samples, judge).score == 1.0
    samples, judge = scripted([(1, 1, 0), (0, 0, 1), (1, 1, 1)])
    assert rcr(samples, judge).score == 2 / 3
    assert rcr([ReasoningSample("q", "c", "a")] * 4, MockJudge(reply="NO")).score == 0.0


def test_rcr_trials_must_be_odd():
    samples, judge = scripted([(1, 1, 1, 1)])
    with pytest.raises(ValueError):
        rcr(samples, judge, trials=4)


def test_mock_rcr_is_deterministic_and_uses_reference():
    good = ReasoningSample("q", "profile shows hobby chess", "chess", reference_cot="profile shows hobby chess", reference_answer="chess")
    wrong = ReasoningSample("q", "profile shows hobby chess", "diving", reference_cot="profile shows hobby chess", reference_answer="chess")
    empty = ReasoningSample("q", "", "chess", reference_cot="profile shows hobby chess", reference_answer="chess")
    judge = MockJudge()
    assert rcr([good, wrong, empty], judge).score == rcr([good, wrong, empty], judge).score == 1 / 3


# ----- overlap and accuracy -----

def test_rouge_l_examples():
    assert rouge_l("a b c", "a b c") == 1.0
    assert rouge_l("a b c", "a c") == pytest.approx(0.8, abs=1e-15)
    assert rouge_l("a b", "c d") == 0.0
    assert rouge_l("", "") == 1.0
    assert rouge_l("a", "") == 0.0
    assert rouge_l("A B", "a b") == 1.0


def brute_lcs(a, b):
    if not a or not b:
        return 0
    if a[0] == b[0]:
        return 1 + brute_lcs(a[1:], b[1:])
    return max(brute_lcs(a[1:], b), brute_lcs(a, b[1:]))


@given(words, words)
def test_rouge_l_properties(ref, hyp):
    assert lcs_length(ref.split(), hyp.split()) == brute_lcs(ref.split(), hyp.split())
    score = rouge_l(ref, hyp)
    assert 0.0 <= score <= 1.0
    assert score == pytest.approx(rouge_l(hyp, ref))


def test_accuracy_examples():
    recs = {"1": "A", "2": "B", "3": "C", "4": "D"}
    assert mc_accuracy(recs, dict(recs)) == 1.0
    assert mc_accuracy(recs, {"1": "a", "2": "B", "3": "C", "4": None}) == 0.75
    assert cloze_accuracy({"1": "Tokyo", "2": "Lima"}, {"1": " tokyo ", "2": "Rome"}) == 0.5
    with pytest.raises(IdMismatch):
        mc_accuracy(recs, {"1": "A"})
    with pytest.raises(IdMismatch):
        cloze_accuracy({"1": "x"}, {"2": "x"})


# ----- external judge adapter -----

def test_subprocess_judge(tmp_path):
    yes = SubprocessJudge([sys.executable, "-c", "import sys; sys.stdin.read(); print('YES')"])
    assert implicit_leak("He lives in Tokyo", JAPAN, yes)
    sample = ReasoningSample("q", "c", "a", profile="p", regions="r")
    assert yes.reasoning_valid(sample, 0).answer == "YES"
    echo = SubprocessJudge([sys.executable, "-c", "import sys; print(sys.stdin.read().count('Tokyo') > 0 and 'NO' or 'YES')"])
    assert not implicit_leak("He lives in Tokyo", JAPAN, echo)
    with pytest.raises(JudgeUnavailable):
        SubprocessJudge([sys.executable, "-c", "import sys; sys.exit(3)"]).leak("x", JAPAN)
    with pytest.raises(JudgeUnavailable):
        SubprocessJudge([str(tmp_path / "missing-judge")]).leak("x", JAPAN)
