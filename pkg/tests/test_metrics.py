import numpy as np
import pytest

from xego import metrics as mx
from xego.errors import DomainError


def _random_pair(rng, n=50, labels=23):
    y = rng.integers(0, 2, size=(n, labels))
    pred = rng.integers(0, 2, size=(n, labels))
    return pred, y


# ---------------------------------------------------------------------------
# counting oracles (straight loops, no vectorization)

def oracle_subset(pred, y):
    hits = sum(1 for p, t in zip(pred, y) if list(p) == list(t))
    return 100.0 * hits / len(pred)


def oracle_hamming(pred, y):
    mism = sum(1 for p, t in zip(pred, y) for a, b in zip(p, t) if a != b)
    return 100.0 * mism / (len(pred) * len(pred[0]))


def oracle_micro(pred, y):
    tp = fp = fn = 0
    for p, t in zip(pred, y):
        for a, b in zip(p, t):
            tp += a == 1 and b == 1
            fp += a == 1 and b == 0
            fn += a == 0 and b == 1
    return 100.0 * 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0


def oracle_macro(pred, y):
    n_labels = len(pred[0])
    f1s = []
    for j in range(n_labels):
        tp = fp = fn = 0
        for p, t in zip(pred, y):
            tp += p[j] == 1 and t[j] == 1
            fp += p[j] == 1 and t[j] == 0
            fn += p[j] == 0 and t[j] == 1
        f1s.append(100.0 * 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0)
    return sum(f1s) / n_labels


def test_classify_threshold_and_tie():
    logits = np.array([[0.1, -0.1, 0.0, 50.0, -50.0]])
    np.testing.assert_array_equal(mx.classify(logits), [[1, 0, 0, 1, 0]])


def test_classify_matches_sigmoid_threshold():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(20, 23))
    prob = 1.0 / (1.0 + np.exp(-logits))
    np.testing.assert_array_equal(mx.classify(logits), (prob > 0.5).astype(int))


def test_perfect_and_single_flip():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, size=(10, 23))
    assert mx.subset_accuracy(y, y) == 100.0
    assert mx.hamming_distance(y, y) == 0.0
    pred = y.copy()
    pred[3, 7] ^= 1
    assert mx.subset_accuracy(pred, y) == pytest.approx(100.0 * 9 / 10)


def test_all_flipped_hamming():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, size=(6, 23))
    assert mx.hamming_distance(1 - y, y) == 100.0


def test_all_zero_pred_micro_zero():
    y = np.zeros((5, 23), dtype=int)
    y[:, 3] = 1
    pred = np.zeros_like(y)
    assert mx.micro_f1(pred, y) == 0.0


def test_perfect_micro_macro():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 2, size=(8, 23))
    y[:, 0] = 1  # at least one positive
    # labels with zero support drag macro below 100 by convention
    full = np.ones((4, 3), dtype=int)
    assert mx.micro_f1(full, full) == 100.0
    assert mx.macro_f1(full, full) == 100.0


@pytest.mark.parametrize("seed", range(5))
def test_metrics_match_oracles(seed):
    rng = np.random.default_rng(seed)
    pred, y = _random_pair(rng)
    assert mx.subset_accuracy(pred, y) == pytest.approx(oracle_subset(pred, y), abs=1e-12)
    assert mx.hamming_distance(pred, y) == pytest.approx(oracle_hamming(pred, y), abs=1e-12)
    assert mx.micro_f1(pred, y) == pytest.approx(oracle_micro(pred, y), abs=1e-10)
    assert mx.macro_f1(pred, y) == pytest.approx(oracle_macro(pred, y), abs=1e-10)


def test_sample_permutation_invariance():
    rng = np.random.default_rng(7)
    pred, y = _random_pair(rng, n=30)
    perm = rng.permutation(30)
    for fn in (mx.subset_accuracy, mx.hamming_distance, mx.micro_f1, mx.macro_f1):
        assert fn(pred, y) == pytest.approx(fn(pred[perm], y[perm]), abs=1e-12)


def test_hamming_symmetry():
    rng = np.random.default_rng(8)
    pred, y = _random_pair(rng)
    assert mx.hamming_distance(pred, y) == mx.hamming_distance(y, pred)


def test_report_fields_in_range():
    rng = np.random.default_rng(9)
    pred, y = _random_pair(rng)
    rep = mx.compute_report(pred, y)
    for v in (rep.subset_acc, rep.hamming_dist, rep.macro_f1, rep.micro_f1):
        assert 0.0 <= v <= 100.0
    assert rep.n_samples == 50
    assert len(rep.per_label) == 23


def test_rejects_non_binary_and_mismatched():
    with pytest.raises(DomainError):
        mx.subset_accuracy(np.array([[0.5]]), np.array([[1]]))
    with pytest.raises(DomainError):
        mx.subset_accuracy(np.zeros((2, 3), dtype=int), np.zeros((2, 4), dtype=int))


# ---------------------------------------------------------------------------
# separation ratio and PCA

def test_separation_two_tight_far_clusters():
    rng = np.random.default_rng(10)
    a = rng.normal(scale=0.1, size=(40, 2))
    b = rng.normal(scale=0.1, size=(40, 2)) + np.array([10.0, 0.0])
    pts = np.vstack([a, b])
    labels = np.array([0] * 40 + [1] * 40)
    assert mx.separation_ratio(pts, labels) > 5.0


def test_separation_shuffled_labels_near_one():
    rng = np.random.default_rng(11)
    pts = rng.normal(size=(1000, 2))
    labels = rng.integers(0, 2, size=1000)
    ratio = mx.separation_ratio(pts, labels)
    assert abs(ratio - 1.0) < 0.1


def test_separation_identical_point_sets_ratio_one():
    base = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    pts = np.vstack([base, base])
    labels = np.array([0] * 4 + [1] * 4)
    assert mx.separation_ratio(pts, labels) == pytest.approx(1.0, rel=1e-12)


def test_separation_degenerate_inputs():
    pts = np.zeros((3, 2))
    with pytest.raises(DomainError):
        mx.separation_ratio(pts, [0, 0, 0])  # single class
    with pytest.raises(DomainError):
        mx.separation_ratio(pts, [0, 0, 1])  # class with one point


def test_pca_2d_deterministic_and_shaped():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(50, 16))
    p1 = mx.pca_2d(x)
    p2 = mx.pca_2d(x.copy())
    assert p1.shape == (50, 2)
    np.testing.assert_array_equal(p1, p2)


def test_pca_2d_recovers_planted_direction():
    rng = np.random.default_rng(13)
    direction = np.zeros(8)
    direction[2] = 1.0
    x = rng.normal(size=(200, 1)) * direction * 10 + rng.normal(scale=0.1, size=(200, 8))
    proj = mx.pca_2d(x)
    # the first component should carry almost all the variance
    v = proj.var(axis=0)
    assert v[0] > 50 * v[1]
