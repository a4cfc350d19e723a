from __future__ import annotations

import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resptime.cohort import (
    ConfigError,
    CourseStructure,
    QualificationConfig,
    apply_attempt_cap,
    build_subsets,
    drop_post_correct_seconds,
    filter_explored,
    prepare_observations,
    qualify_matrix,
    read_matrix,
    subset_observations,
    write_matrix,
)
from resptime.extraction import ResponseObservation
from resptime.matrix import ResponseMatrix

from conftest import load, log_of

CFG = QualificationConfig()


def obs(user, question, attempt=1, t=10.0, correct=True, score=None):
    return ResponseObservation(user, question, attempt, t, correct, 0.0, score)


def structure(n_chapters):
    chapters = tuple(f"ch{i}" for i in range(n_chapters))
    return CourseStructure("c1", chapters, {f"p{i}": f"ch{i}" for i in range(n_chapters)})


@pytest.mark.parametrize("n_chapters, visited, included", [(10, 5, True), (10, 4, False), (5, 3, True), (5, 2, False)])
def test_filter_explored(n_chapters, visited, included):
    log = log_of(*(load("u1", f"p{i}", i) for i in range(visited)))
    assert (filter_explored(log, structure(n_chapters), CFG) == {"u1"}) is included


def test_repeat_visits_count_once_and_unmapped_pages_tallied():
    tally = Counter()
    log = log_of(load("u1", "p0", 0), load("u1", "p0", 1), load("u1", "zz", 2))
    assert filter_explored(log, structure(2), CFG, tally) == {"u1"}
    assert tally["unmapped_page_load"] == 1


def test_fraction_rounding_edge():
    cfg = QualificationConfig(explored_fraction=0.7)
    log = log_of(*(load("u1", f"p{i}", i) for i in range(7)))
    assert filter_explored(log, structure(10), cfg) == {"u1"}


@pytest.mark.parametrize("submits, kept", [(5, 2), (6, 0)])
def test_attempt_cap(submits, kept):
    data = [obs("u1", "q1", 1, correct=False), obs("u1", "q1", 2)]
    assert len(apply_attempt_cap(data, {("u1", "q1"): submits}, CFG)) == kept


def test_attempt_cap_empty():
    assert apply_attempt_cap([], {}, CFG) == []


def test_post_correct_second_dropped():
    data = [obs("u1", "q1", 1, correct=True), obs("u1", "q1", 2)]
    tally = Counter()
    assert drop_post_correct_seconds(data, CFG, tally) == data[:1]
    assert tally["second_after_correct"] == 1


def test_second_after_incorrect_kept():
    data = [obs("u1", "q1", 1, correct=False), obs("u1", "q1", 2)]
    assert drop_post_correct_seconds(data, CFG) == data


def test_partial_credit_is_incorrect():
    data = [obs("u1", "q1", 1, correct=True, score=0.5), obs("u1", "q1", 2)]
    assert drop_post_correct_seconds(data, CFG) == data


def grid(n_users, n_questions, skip=()):
    return [
        obs(f"u{u:02d}", f"q{q:02d}", t=float(1 + u + q))
        for u in range(n_users)
        for q in range(n_questions)
        if (u, q) not in skip
    ]


def test_sparse_question_removed():
    # q10 is answered by only 9 of the 12 users
    data = grid(12, 11, skip={(u, 10) for u in range(9, 12)})
    m = qualify_matrix(data, CFG)
    assert "q10" not in m.question_ids
    assert m.n_questions == 10 and m.n_users == 12


def test_cascading_removal():
    # u00 answers 10 questions, one of which (q10) only 9 users answer;
    # dropping q10 leaves u00 with 9 and removes u00 in the next round
    skip = {(0, q) for q in range(1, 2)} | {(u, 10) for u in range(9, 12)}
    data = grid(12, 11, skip=skip)
    m = qualify_matrix(data, CFG)
    assert "q10" not in m.question_ids
    assert "u00" not in m.user_ids
    assert m.tallies["pruning_rounds"] >= 2
    assert (m.user_counts() >= 10).all() and (m.question_counts() >= 10).all()


def test_lowered_user_cutoff():
    data = grid(12, 7)
    m = qualify_matrix(data, CFG)
    assert m.tallies["user_cutoff"] == 7
    assert m.n_users == 12 and m.n_questions == 7


def test_duplicate_cell_raises():
    with pytest.raises(ValueError):
        qualify_matrix([obs("u1", "q1"), obs("u1", "q1")], CFG)


def test_first_attempt_only_subsets():
    subsets = build_subsets(grid(12, 12), CFG)
    assert len(subsets) == 6
    populated = sorted(k for k, m in subsets.items() if m.fittable)
    assert populated == ["1_any", "1_correct"]
    assert sum(not m.fittable for m in subsets.values()) == 4
    data = grid(12, 12)
    data = [obs(o.user_id, o.question_id, 1, o.response_time, correct=(i % 2 == 0)) for i, o in enumerate(data)]
    subsets = build_subsets(data, QualificationConfig(min_users_per_question=1, min_questions_per_user=1))
    assert sorted(k for k, m in subsets.items() if m.fittable) == ["1_any", "1_correct", "1_incorrect"]


def test_correct_observation_membership():
    o = obs("u1", "q1", 1, correct=True)
    assert subset_observations([o], 1, "any", CFG) == [o]
    assert subset_observations([o], 1, "correct", CFG) == [o]
    assert subset_observations([o], 1, "incorrect", CFG) == []


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5), st.sampled_from([1, 2]), st.booleans()), max_size=60))
def test_partition_identity(cells):
    seen, data = set(), []
    for u, q, a, c in cells:
        if (u, q, a) not in seen:
            seen.add((u, q, a))
            data.append(obs(f"u{u}", f"q{q}", a, correct=c))
    for attempt in (1, 2):
        parts = [subset_observations(data, attempt, c, CFG) for c in ("any", "correct", "incorrect")]
        assert len(parts[0]) == len(parts[1]) + len(parts[2])
        assert Counter(parts[0]) == Counter(parts[1]) + Counter(parts[2])


@settings(max_examples=60, deadline=None)
@given(
    st.sets(st.tuples(st.integers(0, 9), st.integers(0, 9)), max_size=80),
    st.integers(1, 4),
    st.integers(1, 4),
)
def test_qualify_is_monotone_and_idempotent(cells, qmin, umin):
    cfg = QualificationConfig(min_users_per_question=qmin, min_questions_per_user=umin)
    data = [obs(f"u{u}", f"q{q}", t=1.0 + u + q / 10) for u, q in sorted(cells)]
    m = qualify_matrix(data, cfg)
    assert set(m.user_ids) <= {o.user_id for o in data}
    assert set(m.question_ids) <= {o.question_id for o in data}
    if m.fittable:
        assert (m.question_counts() >= qmin).all()
        assert (m.user_counts() >= m.tallies["user_cutoff"]).all()
        again = qualify_matrix(
            [obs(u, q, t=math.exp(v)) for u, q, v in m.triplets()], cfg
        )
        assert again.triplets() == m.triplets()


def test_prepare_pipeline_tallies():
    log = log_of(load("u1", "p0", 0), load("u1", "p1", 1), load("u2", "p0", 0))
    data = [
        obs("u1", "q1", 1, correct=True), obs("u1", "q1", 2),
        obs("u1", "q2", 1, correct=False), obs("u1", "q2", 2),
        obs("u2", "q1", 1),
        obs("u1", "q3", 1),
    ]
    counts = {("u1", "q1"): 2, ("u1", "q2"): 2, ("u2", "q1"): 1, ("u1", "q3"): 6}
    prep = prepare_observations(data, counts, log, structure(4), CFG)
    assert prep.explored_users == {"u1"}
    assert [(o.question_id, o.attempt) for o in prep.observations] == [("q1", 1), ("q2", 1), ("q2", 2)]
    assert prep.tallies == {"over_attempt_cap": 1, "second_after_correct": 1, "unexplored_user_obs": 1}


@pytest.mark.parametrize(
    "kwargs",
    [dict(explored_fraction=0), dict(explored_fraction=1.5), dict(max_attempts=0), dict(min_users_per_question=0), dict(full_credit_threshold=0)],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        QualificationConfig(**kwargs)


def test_structure_validation():
    with pytest.raises(ConfigError):
        CourseStructure("c", ("ch0",), {"p0": "nope"})
    with pytest.raises(ConfigError):
        CourseStructure.from_json({"course_id": "c"})
    s = structure(3)
    assert CourseStructure.from_json(s.to_json()) == s


def test_matrix_io_round_trip(tmp_path):
    m = qualify_matrix(grid(12, 12), CFG)
    write_matrix(m, tmp_path / "m.csv", tmp_path / "m.json")
    assert (tmp_path / "m.csv").read_text().startswith("user_id,question_id,ln_time\n")
    back = read_matrix(tmp_path / "m.csv", tmp_path / "m.json")
    assert back.triplets() == m.triplets()
    assert back.tallies == m.tallies and back.label == m.label
    assert np.isfinite(back.log_times).all()


def test_matrix_entries_are_unique():
    m = ResponseMatrix.from_triplets([("u1", "q1", 1.0), ("u2", "q1", 2.0)])
    assert len({(r, c) for r, c in zip(m.rows, m.cols)}) == m.n_obs
    with pytest.raises(ValueError):
        ResponseMatrix.from_triplets([("u1", "q1", 1.0), ("u1", "q1", 2.0)])
