import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinelab.consensus import (build_group, grouped_advantages, leave_one_out_vote,
                                majority_vote, reward)
from spinelab.oracles import oracle_advantages
from spinelab.tasks import AnswerExtraction

INVALID = AnswerExtraction((), None, False)


def test_majority_examples():
    assert majority_vote(["7", "7", "5", "7"]) == "7"
    assert majority_vote(["7", "5", "7", "5"]) == "7"
    assert majority_vote(["5", "7", "7", "5"]) == "5"
    assert majority_vote([INVALID, INVALID]) is None
    assert majority_vote([INVALID, "3", INVALID]) == "3"


def test_leave_one_out_examples():
    assert leave_one_out_vote(["7", "7", "5"], 0) == "7"
    assert leave_one_out_vote(["7", "7", "7"], 2) == "7"
    assert leave_one_out_vote(["7", "5", "5"], 0) == "5"


def test_reward_examples():
    assert reward("7", "7") == 1.0
    assert reward("5", "7") == 0.0
    assert reward(INVALID, "7") == 0.0
    assert reward("7", None) == 0.0


def test_advantage_examples():
    a = grouped_advantages([1, 1, 0, 0], 1e-6)
    np.testing.assert_allclose(a, np.array([1, 1, -1, -1]) * 0.5 / (0.5 + 1e-6), rtol=0, atol=1e-15)
    assert np.array_equal(grouped_advantages([1, 1, 1, 1]), np.zeros(4))
    np.testing.assert_allclose(grouped_advantages([1, 0]), [1, -1], atol=1e-5)


def test_advantage_errors():
    with pytest.raises(ValueError):
        grouped_advantages([1.0])
    with pytest.raises(ValueError):
        grouped_advantages([1.0, 0.0], eps=0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([0.0, 1.0]), min_size=2, max_size=16))
def test_standardisation_property(r):
    a = grouped_advantages(r, 1e-6)
    assert np.all(np.isfinite(a))
    if len(set(r)) == 1:
        assert np.all(a == 0)
    else:
        sd = np.std(r)
        assert abs(a.mean()) < 1e-9
        assert abs(a.std() - sd / (sd + 1e-6)) < 1e-9
        assert np.max(np.abs(a)) <= np.sqrt(len(r) - 1) + 1e-9
    np.testing.assert_allclose(a, oracle_advantages(r, 1e-6), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["1", "2", "3", None]), min_size=2, max_size=10), st.randoms())
def test_permutation_equivariance(answers, rnd):
    answers = [a if a is not None else INVALID for a in answers]
    perm = list(range(len(answers)))
    rnd.shuffle(perm)
    c = majority_vote(answers)
    counts = {}
    for a in answers:
        if a is not INVALID:
            counts[a] = counts.get(a, 0) + 1
    if c is not None and list(counts.values()).count(counts[c]) == 1:
        permuted = [answers[i] for i in perm]
        assert majority_vote(permuted) == c
        r = [reward(a, c) for a in answers]
        rp = [reward(a, c) for a in permuted]
        assert rp == [r[i] for i in perm]
        np.testing.assert_allclose(grouped_advantages(rp), grouped_advantages(r)[perm])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["1", "2", "3", None]), min_size=2, max_size=10))
def test_duplication_invariance(answers):
    answers = [a if a is not None else INVALID for a in answers]
    assert majority_vote(answers + answers) == majority_vote(answers)


def test_build_group():
    g = build_group("p", [object()] * 4, ["7", "7", "5", INVALID])
    assert g.consensus == "7" and list(g.rewards) == [1, 1, 0, 0] and g.n == 4
    g = build_group("p", [object()] * 3, ["7", "7", "5"], leave_one_out=True)
    assert g.loo_consensus == ["7", "7", "7"] and list(g.rewards) == [1, 1, 0]
    g = build_group("p", [object()] * 2, [INVALID, INVALID])
    assert g.consensus is None and np.all(g.advantages == 0)
    with pytest.raises(ValueError):
        build_group("p", [object()] * 2, ["1", "2"], leave_one_out=True)
    with pytest.raises(ValueError):
        build_group("p", [object()], ["1"])
