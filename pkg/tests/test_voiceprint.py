import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vsvc.conversion import apply_profile, make_profile_pool
from vsvc.dsp import FeatureConfig, mfcc_from_log_mel
from vsvc.voiceprint import (
    SelectionError,
    SelectionResult,
    SimilarityMatrix,
    VoiceprintEmbedding,
    calibration_set,
    embed_profiles,
    extract_embedding,
    random_select,
    select_candidates,
    similarity_matrix,
)

from .conftest import sine, utt


def reference_select(ids, values, n, threshold):
    """Straight transcription of the greedy candidate loop, no shortcuts."""
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    cand = []
    for i in order:
        if len(cand) < n:
            ok = True
            for j in cand:
                if not values[i][j] > threshold:
                    ok = False
            if ok:
                cand.append(i)
    return [ids[i] for i in cand]


def _sm(points, ids=None):
    points = np.asarray(points, dtype=float)
    ids = ids or [f"P{i:03d}" for i in range(len(points))]
    return similarity_matrix([VoiceprintEmbedding(i, v) for i, v in zip(ids, points)])


def _hand_matrix():
    d = {(0, 1): 0.5, (0, 2): 2, (0, 3): 2, (2, 3): 0.4, (1, 2): 2, (1, 3): 2}
    values = np.zeros((4, 4))
    for (i, j), v in d.items():
        values[i, j] = values[j, i] = v
    return SimilarityMatrix(("P000", "P001", "P002", "P003"), values)


def test_hand_example():
    sm = _hand_matrix()
    res = select_candidates(sm, 2, 1.0)
    assert res.selected_ids == ("P000", "P002")
    assert list(res.selected_ids) == reference_select(sm.ids, sm.values, 2, 1.0)


def test_single_target_takes_first_id():
    sm = _sm(np.random.default_rng(0).standard_normal((5, 4)), ["b", "d", "a", "e", "c"])
    for t in (0.0, 1.0, 1e9):
        assert select_candidates(sm, 1, t).selected_ids == ("a",)


def test_infeasible_threshold_reports_found_and_feasible():
    sm = _hand_matrix()
    big = float(sm.values.max()) + 1
    with pytest.raises(SelectionError, match="found 1 of 2") as info:
        select_candidates(sm, 2, big)
    assert info.value.found == 1
    # P001 is accepted only below 0.5; at 0.5 the scan skips to P002 (distance 2)
    assert info.value.feasible_threshold == pytest.approx(0.5)
    assert len(select_candidates(sm, 2, info.value.feasible_threshold).selected_ids) == 2


def test_error_when_no_threshold_works():
    sm = _sm([[0.0], [0.0], [0.0]])
    with pytest.raises(SelectionError, match="no threshold"):
        select_candidates(sm, 2, 0.0)


def test_bad_arguments():
    sm = _hand_matrix()
    with pytest.raises(ValueError):
        select_candidates(sm, 0, 1.0)
    with pytest.raises(ValueError):
        select_candidates(sm, 2, -1.0)


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 10), st.integers(1, 10), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_matches_reference(k, n, q, seed):
    rng = np.random.default_rng(seed)
    sm = _sm(rng.standard_normal((k, 3)))
    t = float(np.quantile(sm.off_diagonal(), q))
    ref = reference_select(sm.ids, sm.values, n, t)
    if len(ref) < n:
        with pytest.raises(SelectionError):
            select_candidates(sm, n, t)
    else:
        res = select_candidates(sm, n, t)
        assert list(res.selected_ids) == ref
        assert res.min_pairwise_distance is None or res.min_pairwise_distance > t


def test_feasible_threshold_is_maximal():
    rng = np.random.default_rng(11)
    for _ in range(30):
        sm = _sm(rng.standard_normal((8, 2)))
        t = float(sm.values.max())
        with pytest.raises(SelectionError) as info:
            select_candidates(sm, 3, t)
        best = info.value.feasible_threshold
        brute = max(c for c in np.concatenate([[0.0], sm.off_diagonal()])
                    if len(reference_select(sm.ids, sm.values, 3, c)) == 3)
        assert best == brute


def test_distance_345():
    sm = _sm([[0, 0], [3, 4]])
    assert sm.values[0, 1] == 5.0
    assert sm.distance("P001", "P000") == 5.0


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 9), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_matrix_invariants(k, dim, seed):
    sm = _sm(np.random.default_rng(seed).standard_normal((k, dim)) * 10)
    v = sm.values
    assert np.all(np.diag(v) == 0)
    assert np.array_equal(v, v.T)
    assert np.all(v >= 0)
    for i, j, m in itertools.permutations(range(k), 3):
        assert v[i, j] <= v[i, m] + v[m, j] + 1e-9


def test_matrix_dimension_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        similarity_matrix([VoiceprintEmbedding("a", np.zeros(3)), VoiceprintEmbedding("b", np.zeros(4))])
    with pytest.raises(ValueError):
        similarity_matrix([VoiceprintEmbedding("a", np.zeros(3))])


def test_matrix_csv_roundtrip():
    sm = _sm(np.random.default_rng(3).standard_normal((4, 5)))
    text = sm.to_csv()
    assert text.splitlines()[0] == "id,P000,P001,P002,P003"
    back = SimilarityMatrix.from_csv(text)
    assert back.ids == sm.ids
    np.testing.assert_allclose(back.values, sm.values, atol=5e-10)


def test_random_select_all_ids():
    ids = ["c", "a", "b"]
    assert set(random_select(ids, 3, 0).selected_ids) == set(ids)


def test_random_select_deterministic_and_bounds():
    ids = [f"P{i:03d}" for i in range(10)]
    assert random_select(ids, 3, 5) == random_select(ids, 3, 5)
    with pytest.raises(ValueError):
        random_select(ids, 11, 0)


def test_random_select_uniform():
    ids = ["a", "b", "c", "d", "e"]
    counts = dict.fromkeys(ids, 0)
    for seed in range(10000):
        counts[random_select(ids, 1, seed).selected_ids[0]] += 1
    for c in counts.values():
        assert abs(c / 10000 - 0.2) <= 0.02


def test_random_can_violate_threshold_where_vsvc_holds():
    rng = np.random.default_rng(0)
    sm = _sm(rng.standard_normal((10, 4)))
    t = sm.median_threshold()
    vsvc = select_candidates(sm, 2, t)
    assert vsvc.min_pairwise_distance > t
    violations = [s for s in range(50)
                  if random_select(list(sm.ids), 2, s, sm, t).min_pairwise_distance <= t]
    assert violations


def test_selection_json(tmp_path):
    res = SelectionResult(("P001", "P004"), 1.5, "vsvc", 2.0)
    res.save(tmp_path / "s.json")
    data = json.loads((tmp_path / "s.json").read_text())
    assert data["selected_ids"] == ["P001", "P004"] and data["mode"] == "vsvc" and data["threshold"] == 1.5


# -- embeddings

def test_embedding_repeat_invariant():
    u = utt(sine(220.0, 0.3) + 0.01 * np.random.default_rng(0).standard_normal(16000))
    one = extract_embedding("x", [u])
    five = extract_embedding("x", [u] * 5)
    np.testing.assert_allclose(one.vector, five.vector, atol=1e-12)
    assert one.vector.shape == (26,)


def test_embedding_of_silence():
    cfg = FeatureConfig()
    e = extract_embedding("s", [utt(np.zeros(16000))], cfg)
    floor_row = mfcc_from_log_mel(np.full((1, 40), np.log(cfg.log_floor)), 13)[0]
    np.testing.assert_allclose(e.vector[:13], floor_row, atol=1e-9)
    np.testing.assert_allclose(e.vector[13:], 0.0, atol=1e-9)


def test_embedding_empty_rejected():
    with pytest.raises(ValueError):
        extract_embedding("x", [])


def test_distinct_profiles_distinct_embeddings(small_split):
    _, train, _ = small_split
    ids = calibration_set(train, 10, seed=0)
    calib = [train.load(i) for i in ids]
    pool = make_profile_pool(10, seed=0)
    embs = embed_profiles(pool, calib, apply_profile)
    sm = similarity_matrix(embs)
    assert np.all(sm.off_diagonal() > 0)
    again = embed_profiles(pool[:2], calib, apply_profile)
    assert np.array_equal(again[0].vector, embs[0].vector)


def test_calibration_set(small_split):
    _, train, _ = small_split
    ids = calibration_set(train, 8, seed=1)
    assert len(set(ids)) == 8 and ids == sorted(ids)
    assert ids == calibration_set(train, 8, seed=1)
    with pytest.raises(ValueError):
        calibration_set(train, len(train) + 1)
