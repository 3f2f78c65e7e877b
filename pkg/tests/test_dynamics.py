import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssft.dynamics import (
    NEVER,
    EmptyHistoryError,
    MetricRecord,
    compute_metrics,
    cumulative_metrics,
    forgetting_events,
    fslt,
    joint_rank,
    read_history_csv,
    read_metrics_csv,
    ssft,
    write_history_csv,
    write_metrics_csv,
)
from ssft.models import PredictionHistory

from .oracles import forgetting_naive, fslt_naive, ssft_naive

rows = st.lists(st.booleans(), min_size=1, max_size=50)


@pytest.mark.parametrize(
    "row, expected",
    [([0, 1, 1, 1], 2), ([1, 1, 0], NEVER), ([1] * 7, 1), ([0], NEVER), ([1], 1)],
)
def test_fslt_examples(row, expected):
    assert fslt(np.array(row, bool)) == expected


@pytest.mark.parametrize(
    "row, expected",
    [([1, 1, 0, 0], 3), ([1, 1, 1], NEVER), ([0, 1, 0, 0], 3), ([0, 0], 1)],
)
def test_ssft_examples(row, expected):
    assert ssft(np.array(row, bool)) == expected


@pytest.mark.parametrize("row, expected", [([0, 1, 0, 1, 1], 1), ([1, 1, 1], 0), ([1, 0, 1, 0], 2), ([1], 0)])
def test_forgetting_events_examples(row, expected):
    assert forgetting_events(np.array(row, bool)) == expected


def test_empty_rows_raise():
    with pytest.raises(EmptyHistoryError):
        fslt(np.array([], bool))
    with pytest.raises(EmptyHistoryError):
        ssft(np.array([], bool))


def test_cumulative_examples():
    acc_l, conf_l, acc_f = cumulative_metrics(np.array([1, 0, 1, 1], bool), np.array([0.5, 0.5, 0, 0]), np.zeros(3, bool))
    assert (acc_l, conf_l, acc_f) == (3, 1.0, 0)


@given(rows)
def test_streaming_matches_quadratic_oracle(row):
    r = np.array(row, bool)
    assert fslt(r) == fslt_naive(row)
    assert ssft(r) == ssft_naive(row)
    assert forgetting_events(r) == forgetting_naive(row)


@given(rows, st.booleans())
def test_ssft_monotone_under_append(row, nxt):
    before = ssft(np.array(row, bool))
    after = ssft(np.array(row + [nxt], bool))
    if nxt:
        assert after is NEVER
    else:
        # a wrong epoch keeps a finite ssft fixed, or starts one at the end
        assert after is not NEVER
        if before is not NEVER:
            assert after == before


@given(rows)
def test_fslt_one_and_no_forgetting_iff_all_correct(row):
    r = np.array(row, bool)
    assert (fslt(r) == 1 and forgetting_events(r) == 0) == bool(r.all())


@given(rows)
def test_finite_metrics_bound_the_suffix(row):
    r = np.array(row, bool)
    f, s = fslt(r), ssft(r)
    if f is not NEVER:
        assert r[f - 1 :].all() and 1 <= f <= len(r)
    if s is not NEVER:
        assert (~r[s - 1 :]).all() and 1 <= s <= len(r)


def _hist(phase, correct, conf=None):
    correct = np.asarray(correct, bool)
    conf = np.where(correct, 0.9, 0.1) if conf is None else np.asarray(conf, float)
    return PredictionHistory(phase, np.arange(correct.shape[0]), correct, conf)


@given(st.integers(1, 6), st.integers(0, 8), st.integers(0, 8), st.data())
def test_record_invariants(n, T, Tb, data):
    ca = np.array(data.draw(st.lists(st.lists(st.booleans(), min_size=T + 1, max_size=T + 1), min_size=n, max_size=n)), bool)
    cb = np.array(data.draw(st.lists(st.lists(st.booleans(), min_size=Tb + 1, max_size=Tb + 1), min_size=n, max_size=n)), bool)
    recs = compute_metrics(_hist("A", ca), _hist("B", cb))
    for r in recs:
        assert r.acc_l <= T and r.acc_f <= Tb and r.conf_l <= T
        assert r.fslt is NEVER or 1 <= r.fslt <= T
        assert r.ssft is NEVER or 1 <= r.ssft <= Tb
        if r.ssft is NEVER and Tb > 0:
            assert r.acc_f >= 1
    assert sorted(r.joint_rank for r in recs) == list(range(1, n + 1))


def test_empty_phase_b_gives_never():
    recs = compute_metrics(_hist("A", [[0, 1, 1]]), _hist("B", [[1]]))
    assert recs[0].ssft is NEVER and recs[0].horizon_b == 0


def test_forgetting_counts_the_handoff_epoch():
    # epoch 0 -> 1 drop counts
    recs = compute_metrics(_hist("A", [[1, 0, 1]]), _hist("B", [[1, 1]]))
    assert recs[0].n_f == 1 and recs[0].fslt == 2


def test_mismatched_ids_rejected():
    a = _hist("A", [[1, 1]])
    b = PredictionHistory("B", np.array([5]), np.ones((1, 2), bool), np.ones((1, 2)))
    with pytest.raises(ValueError):
        compute_metrics(a, b)


def _rec(eid, fslt_v, ssft_v):
    return MetricRecord(eid, "clean", fslt_v, ssft_v, 0, 0, 0.0, 0, 10, 10)


def test_joint_rank_dominance():
    recs = joint_rank([_rec(0, 2, 5), _rec(1, 9, 1), _rec(2, 1, NEVER)])
    assert {r.example_id: r.joint_rank for r in recs}[1] == 1


def test_joint_rank_all_tied_follows_ids():
    recs = joint_rank([_rec(e, 3, 3) for e in (7, 2, 5)])
    assert {r.example_id: r.joint_rank for r in recs} == {2: 1, 5: 2, 7: 3}


def test_joint_rank_hand_oracle():
    # ssft:  a=2, b=NEVER, c=2   -> ranks a=1.5, c=1.5, b=3
    # fslt:  a=1, b=NEVER, c=4   -> descending, NEVER first: b=1, c=2, a=3
    # sums:  a=4.5, b=4, c=3.5   -> c, b, a
    recs = joint_rank([_rec(0, 1, 2), _rec(1, NEVER, NEVER), _rec(2, 4, 2)])
    assert {r.example_id: r.joint_rank for r in recs} == {2: 1, 1: 2, 0: 3}


def test_joint_rank_sum_tie_broken_by_ssft_rank():
    # a: ssft rank 1, fslt rank 2; b: ssft rank 2, fslt rank 1 -> equal sums, a wins on ssft
    recs = joint_rank([_rec(1, 5, 1), _rec(0, 9, 4)])
    assert {r.example_id: r.joint_rank for r in recs} == {1: 1, 0: 2}


def test_csv_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    ha = _hist("A", rng.random((5, 7)) > 0.3, rng.random((5, 7)))
    hb = _hist("B", rng.random((5, 4)) > 0.5, rng.random((5, 4)))
    recs = compute_metrics(ha, hb, {0: "mislabeled"})
    write_metrics_csv(recs, tmp_path / "m.csv")
    assert read_metrics_csv(tmp_path / "m.csv") == recs
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header.startswith("example_id,provenance,fslt,ssft,n_f,acc_l,conf_l,acc_f,joint_rank")
    write_history_csv([ha, hb], tmp_path / "h.csv")
    back = read_history_csv(tmp_path / "h.csv")
    for h in (ha, hb):
        np.testing.assert_array_equal(back[h.phase].correct, h.correct)
        np.testing.assert_array_equal(back[h.phase].confidence, h.confidence)


def test_never_serialised_as_token(tmp_path):
    write_metrics_csv([_rec(3, NEVER, NEVER)], tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[1].startswith("3,clean,NEVER,NEVER,")
    assert read_metrics_csv(tmp_path / "m.csv")[0].ssft is NEVER
