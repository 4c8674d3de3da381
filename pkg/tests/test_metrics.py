import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spice.labels import IntelligibilityClass
from spice.metrics import (
    DEFAULT_CLASS_MAP,
    ZeroVarianceError,
    accuracy,
    binarize_mildplus,
    binarized_accuracy,
    build_report,
    intelligibility_percent,
    macro_f1,
    ovr_auc,
    pearson,
    speaker_aggregate,
)


def brute_force_auc(scores, positive):
    """O(n^2) pairwise oracle: P(s_pos > s_neg) + 1/2 P(tie)."""
    pos = scores[positive]
    neg = scores[~positive]
    if len(pos) == 0 or len(neg) == 0:
        return None
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


# --- binarization -----------------------------------------------------------

def test_binarize_all_classes():
    assert binarize_mildplus(IntelligibilityClass.TYPICAL) == 0
    for c in (IntelligibilityClass.MILD, IntelligibilityClass.MODERATE,
              IntelligibilityClass.SEVERE, IntelligibilityClass.PROFOUND):
        assert binarize_mildplus(c) == 1


def test_binarize_rejects_out_of_range():
    with pytest.raises(ValueError):
        binarize_mildplus(5)


# --- accuracy / F1 ----------------------------------------------------------

def test_accuracy_cases():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([0, 1, 1], [0, 1, 2]) == pytest.approx(2 / 3)
    assert accuracy([1, 2, 3], [0, 1, 2]) == 0.0


def test_accuracy_errors():
    with pytest.raises(ValueError):
        accuracy([0], [0, 1])
    with pytest.raises(ValueError):
        accuracy([], [])


def test_macro_f1_perfect():
    assert macro_f1([0, 1, 2, 3, 4], [0, 1, 2, 3, 4], 5) == 1.0


def test_macro_f1_hand_computed():
    # class0: P=0.5, R=1 -> F1 = 2/3 ; class1: F1 = 0 -> macro = 1/3
    assert macro_f1([0, 0, 0, 0], [0, 0, 1, 1], 5) == pytest.approx(1 / 3)


def test_macro_f1_single_correct():
    assert macro_f1([2], [2], 5) == 1.0


def test_macro_f1_excludes_absent_classes():
    # only classes 0 and 1 appear -> mean over two classes
    v = macro_f1([0, 1], [0, 0], 5)
    # class0: tp=1 fp=0 fn=1 -> P=1 R=.5 F1=2/3; class1: tp=0 fp=1 -> F1=0
    assert v == pytest.approx((2 / 3 + 0) / 2)


def test_accuracy_is_one_minus_hamming():
    rng = np.random.default_rng(0)
    pred = rng.integers(0, 5, 50)
    ref = rng.integers(0, 5, 50)
    assert accuracy(pred, ref) == pytest.approx(1 - np.mean(pred != ref))


def test_macro_f1_is_one_iff_exact_match():
    # every ref class appears; any single flip must pull macro F1 below 1
    rng = np.random.default_rng(1)
    for _ in range(20):
        ref = np.concatenate([np.arange(5), rng.integers(0, 5, 20)])
        assert macro_f1(ref.copy(), ref, 5) == 1.0
        pred = ref.copy()
        i = rng.integers(0, len(ref))
        pred[i] = (pred[i] + 1 + rng.integers(0, 4)) % 5
        assert macro_f1(pred, ref, 5) < 1.0


# --- AUC --------------------------------------------------------------------

def test_auc_perfect_separation():
    scores = np.array([[0.9, 0.1], [0.8, 0.2], [0.2, 0.8], [0.1, 0.9]])
    ref = np.array([0, 0, 1, 1])
    mean, per = ovr_auc(scores, ref, 2)
    assert per == [1.0, 1.0]
    assert mean == 1.0


def test_auc_all_ties():
    scores = np.full((6, 2), 0.5)
    ref = np.array([0, 0, 0, 1, 1, 1])
    mean, per = ovr_auc(scores, ref, 2)
    assert per == [0.5, 0.5]


def test_auc_matches_brute_force_seeded():
    rng = np.random.default_rng(11)
    for trial in range(10):
        n, k = 200, 5
        scores = rng.random((n, k))
        if trial % 2:  # tie-heavy instances
            scores = np.round(scores, 1)
        ref = rng.integers(0, k, n)
        mean, per = ovr_auc(scores, ref, k)
        for c in range(k):
            oracle = brute_force_auc(scores[:, c], ref == c)
            if oracle is None:
                assert per[c] is None
            else:
                assert per[c] == pytest.approx(oracle, abs=1e-12)


def test_auc_single_class_is_na():
    scores = np.array([[0.9, 0.1], [0.8, 0.2]])
    mean, per = ovr_auc(scores, np.array([0, 0]), 2)
    assert mean is None
    assert per == [None, None]


def test_auc_invariant_under_increasing_transform():
    rng = np.random.default_rng(5)
    scores = rng.random((100, 3))
    ref = rng.integers(0, 3, 100)
    base, _ = ovr_auc(scores, ref, 3)
    for f in (np.exp, lambda s: s * 10):
        warped = scores.copy()
        warped[:, 1] = f(warped[:, 1])
        assert ovr_auc(warped, ref, 3)[0] == base


# --- speaker aggregation ----------------------------------------------------

def test_speaker_aggregate_single_utterance():
    s = np.array([[0.1, 0.2, 0.3, 0.2, 0.2]])
    out = speaker_aggregate(["u1"], ["spk"], s)
    assert len(out) == 1
    assert np.array_equal(out[0].mean_scores, s[0])
    assert out[0].predicted_class == 2


def test_speaker_aggregate_tie_goes_to_lower_class():
    s = np.array([[1, 0, 0, 0, 0], [0, 1, 0, 0, 0]], dtype=float)
    out = speaker_aggregate(["a", "b"], ["spk", "spk"], s)
    assert np.array_equal(out[0].mean_scores, [0.5, 0.5, 0, 0, 0])
    assert out[0].predicted_class == 0


def test_speaker_aggregate_permutation_invariant():
    rng = np.random.default_rng(9)
    uids = [f"u{i:02d}" for i in range(20)]
    spks = [f"s{i % 3}" for i in range(20)]
    scores = rng.random((20, 5))
    base = speaker_aggregate(uids, spks, scores)
    perm = rng.permutation(20)
    shuf = speaker_aggregate(
        [uids[i] for i in perm], [spks[i] for i in perm], scores[perm]
    )
    for a, b in zip(base, shuf):
        assert a.speaker_id == b.speaker_id
        assert a.mean_scores.tobytes() == b.mean_scores.tobytes()


# --- binarized accuracy / intelligibility percent ---------------------------

def test_binarized_accuracy_all_typical():
    s = np.tile([0.9, 0.05, 0.02, 0.02, 0.01], (122, 1))
    assert binarized_accuracy(s, 0) == 100.0


def test_binarized_accuracy_half():
    typ = [0.9, 0.1, 0, 0, 0]
    sev = [0.1, 0.1, 0.1, 0.6, 0.1]
    s = np.array([typ, sev], dtype=float)
    assert binarized_accuracy(s, 0) == 50.0


def test_intelligibility_map_values():
    assert intelligibility_percent([0, 0, 0]) == 100.0
    assert intelligibility_percent([1, 1, 2]) == pytest.approx(80.0)
    assert intelligibility_percent([4, 4]) == 20.0
    assert DEFAULT_CLASS_MAP == (100.0, 90.0, 60.0, 40.0, 20.0)


def test_intelligibility_nonmonotone_map_warns():
    with pytest.warns(UserWarning):
        intelligibility_percent([0, 1], class_map=(100, 90, 95, 40, 20))


@given(
    h1=st.lists(st.integers(0, 30), min_size=5, max_size=5),
    shift=st.lists(st.integers(0, 10), min_size=5, max_size=5),
    maps=st.lists(
        st.lists(st.integers(1, 1000), min_size=5, max_size=5).map(
            lambda v: tuple(sorted(set(v), reverse=True))
        ).filter(lambda m: len(m) == 5),
        min_size=1,
        max_size=4,
    ),
)
@settings(max_examples=60, deadline=None)
def test_monotone_map_preserves_speaker_ordering(h1, shift, maps):
    # speaker B's histogram is speaker A's shifted toward higher severity
    if sum(h1) == 0:
        h1[0] += 1
    h2 = [0] * 5
    for c, (n, s) in enumerate(zip(h1, shift)):
        moved = min(n, s) if c < 4 else 0
        h2[c] += n - moved
        if c < 4:
            h2[c + 1] += moved
    preds1 = np.repeat(np.arange(5), h1)
    preds2 = np.repeat(np.arange(5), h2)
    results = []
    for m in maps:
        p1 = intelligibility_percent(preds1, class_map=m)
        p2 = intelligibility_percent(preds2, class_map=m)
        results.append(np.sign(round(p1 - p2, 9)))
    # stochastically ordered histograms keep the same ranking under any
    # strictly decreasing map
    assert all(r >= 0 for r in results)


# --- pearson ----------------------------------------------------------------

def test_pearson_identity():
    assert pearson([1, 2, 3, 4], [1, 2, 3, 4]) == pytest.approx(1.0)


def test_pearson_affine_anticorrelation():
    x = np.array([0.0, 1.0, 2.0, 5.0])
    assert pearson(x, -2 * x + 7) == pytest.approx(-1.0)


def test_pearson_frozen_value():
    # direct formula: cov = 3, sx = sqrt(2), sy = sqrt(14/3)
    assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(0.9819805060619659, abs=1e-12)


def test_pearson_zero_variance_distinct_error():
    with pytest.raises(ZeroVarianceError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ZeroVarianceError):
        pearson([1, 2, 3], [5, 5, 5])


# --- report assembly --------------------------------------------------------

def test_report_serialization_key_order_and_na():
    scores = np.array([[0.9, 0.1], [0.7, 0.3]])
    rep = build_report(2, [0, 0], scores, speaker_ids=["s1", "s1"], utterance_ids=["a", "b"])
    d = rep.to_dict()
    keys = list(d.keys())
    assert keys == [
        "task", "n_utterances", "class_counts", "accuracy", "macro_f1",
        "mean_ovr_auc", "per_class_auc", "speakers", "slices",
    ]
    assert d["mean_ovr_auc"] is None  # single-class slice -> NA
    assert "null" in rep.to_json()
    assert d["accuracy"] == 1.0


def test_report_slices():
    rng = np.random.default_rng(2)
    n = 40
    ref = rng.integers(0, 2, n)
    scores = np.stack([1.0 - ref + rng.normal(0, 0.1, n), ref + rng.normal(0, 0.1, n)], axis=1)
    etio = ["als" if i % 2 else "cp" for i in range(n)]
    rep = build_report(2, ref, scores, slice_values=etio)
    assert set(rep.slices) == {"als", "cp"}
    assert rep.slices["als"].n_utterances == n // 2


def test_report_speaker_table_argmax_then_binarize():
    # speaker whose mean scores argmax to MILD -> binarized prediction atypical
    scores = np.array([[0.4, 0.6, 0, 0, 0], [0.45, 0.55, 0, 0, 0]])
    rep = build_report(
        5, [1, 1], scores, speaker_ids=["sp", "sp"], utterance_ids=["u1", "u2"]
    )
    assert rep.speakers[0]["predicted_class"] == 1
    assert rep.speakers[0]["binarized_accuracy_pct"] == 100.0
