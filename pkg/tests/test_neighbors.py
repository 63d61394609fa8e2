import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pwcf.neighbors import (ScreenedDistances, compute_hfon, hfon_distance,
                            hfon_sq_distances, k_smallest, knn_indices, knn_pseudo_label,
                            majority_vote, select_smallest, sq_distances)

from oracles import brute_knn, brute_vote


def test_identical_point_k1_takes_its_label():
    S = np.array([[0.0, 5.0, 9.0], [0.0, 1.0, 2.0]])
    res = knn_pseudo_label(S, [2, 0, 1], S[:, [1]], k=1, num_classes=3)
    assert res.labels[0] == 0 and res.confidence[0] == 1.0


def test_majority_two_thirds():
    S = np.array([[0.0, 1.0, 2.0, 50.0]])
    res = knn_pseudo_label(S, [1, 1, 2, 0], np.array([[0.5]]), k=3, num_classes=3)
    assert res.labels[0] == 1
    assert res.confidence[0] == pytest.approx(2 / 3)


def test_vote_tie_goes_to_smaller_class():
    labels, conf = majority_vote(np.array([[2, 1], [0, 2]]), 3)
    np.testing.assert_array_equal(labels, [1, 0])
    np.testing.assert_array_equal(conf, [0.5, 0.5])


def test_distance_tie_goes_to_smaller_index():
    # four reference points on a circle around the query, all equidistant
    R = np.array([[1.0, 0.0, -1.0, 0.0], [0.0, 1.0, 0.0, -1.0]])
    q = np.zeros((2, 1))
    np.testing.assert_array_equal(knn_indices(q, R, 2), [[0, 1]])
    np.testing.assert_array_equal(knn_indices(q, R[:, ::-1], 3), [[0, 1, 2]])


def test_k_smallest_orders_by_distance_then_index():
    D = np.array([[3.0, 1.0, 1.0, 0.0, 1.0]])
    np.testing.assert_array_equal(k_smallest(D, 3), [[3, 1, 2]])
    np.testing.assert_array_equal(k_smallest(D, 5), [[3, 1, 2, 4, 0]])


def test_knn_errors():
    S = np.zeros((2, 3))
    with pytest.raises(ValueError, match="k=4"):
        knn_pseudo_label(S, [0, 1, 0], np.zeros((2, 1)), k=4)
    with pytest.raises(ValueError, match="dimension"):
        knn_pseudo_label(S, [0, 1, 0], np.zeros((3, 1)), k=1)


def test_random_instance_matches_bruteforce(rng):
    S = rng.standard_normal((4, 30))
    T = rng.standard_normal((4, 10))
    y = rng.integers(0, 3, 30)
    res = knn_pseudo_label(S, y, T, k=5, num_classes=3)
    nn = brute_knn(T, S, 5)
    for i in range(10):
        lab, conf = brute_vote(y[nn[i]], 3)
        assert res.labels[i] == lab and res.confidence[i] == conf


def test_hfon_single_class_is_one():
    X = np.random.default_rng(0).standard_normal((3, 8))
    H = compute_hfon(X, np.zeros(8, dtype=int), 3, 1)
    np.testing.assert_array_equal(H, np.ones((1, 8)))


def test_hfon_direct_count():
    # sample 0 sits at the origin; its 4 nearest others have labels 0,0,1,2
    X = np.array([[0.0, 1.0, 2.0, 3.0, 4.0, 100.0]])
    labels = np.array([1, 0, 0, 1, 2, 1])
    H = compute_hfon(X, labels, 4, 3)
    # neighbours of 0: indices 1,2,3,4 -> labels 0,0,1,2
    np.testing.assert_array_equal(H[:, 0], [0.5, 0.25, 0.25])


def test_hfon_excludes_self_and_errors():
    X = np.arange(4.0)[None, :]
    with pytest.raises(ValueError, match="more than k"):
        compute_hfon(X, [0, 1, 0, 1], 4, 2)
    H = compute_hfon(X, [0, 1, 1, 1], 1, 2)
    # sample 1's single nearest other sample is 0 (tie with 2 broken by index)
    np.testing.assert_array_equal(H[:, 1], [1.0, 0.0])


def test_hfon_random_matches_bruteforce(rng):
    X = rng.standard_normal((3, 20))
    y = rng.integers(0, 3, 20)
    H = compute_hfon(X, y, 5, 3)
    nn = brute_knn(X, X, 5, exclude_self=True)
    for i in range(20):
        expected = np.bincount(y[nn[i]], minlength=3) / 5
        np.testing.assert_array_equal(H[:, i], expected)
    np.testing.assert_allclose(H.sum(axis=0), 1.0, rtol=0, atol=1e-15)


def test_hfon_distance_examples():
    assert hfon_distance([0.2, 0.8], [0.2, 0.8]) == 0.0
    assert hfon_distance([1, 0], [0, 1]) == 2.0
    assert hfon_distance([0.5, 0.5, 0], [0.25, 0.25, 0.5]) == pytest.approx(0.375, abs=1e-15)
    with pytest.raises(ValueError):
        hfon_distance([1, 0], [1, 0, 0])


def test_same_neighbour_multiset_gives_zero_hfon_distance():
    # two domains with the same class layout of neighbours
    Xa = np.array([[0.0, 1.0, 2.0, 10.0]])
    Xb = np.array([[5.0, 5.5, 6.0, 50.0]])
    y = np.array([0, 1, 1, 0])
    Ha = compute_hfon(Xa, y, 2, 2)
    Hb = compute_hfon(Xb, y, 2, 2)
    assert hfon_distance(Ha[:, 0], Hb[:, 0]) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(2, 4))
def test_hfon_on_simplex_with_granularity(seed, k, c):
    rng = np.random.default_rng(seed)
    n = k + 1 + int(rng.integers(0, 10))
    X = rng.integers(-2, 3, size=(2, n)).astype(float)  # many exact ties
    y = rng.integers(0, c, n)
    H = compute_hfon(X, y, k, c)
    assert np.all(H >= 0)
    np.testing.assert_array_equal(np.round(H * k), H * k)
    np.testing.assert_allclose(H.sum(axis=0), 1.0, atol=1e-12)
    nn = brute_knn(X, X, k, exclude_self=True)
    for i in range(n):
        np.testing.assert_array_equal(H[:, i] * k, np.bincount(y[nn[i]], minlength=c))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_source_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    S = rng.standard_normal((3, 15))
    y = rng.integers(0, 3, 15)
    T = rng.standard_normal((3, 6))
    perm = rng.permutation(15)
    a = knn_pseudo_label(S, y, T, 3, 3)
    b = knn_pseudo_label(S[:, perm], y[perm], T, 3, 3)
    # continuous data has no ties, so the labels are ordering independent
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.confidence, b.confidence)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_knn_matches_bruteforce_with_ties(seed, k):
    rng = np.random.default_rng(seed)
    R = rng.integers(-1, 2, size=(2, 12)).astype(float)
    Q = rng.integers(-1, 2, size=(2, 5)).astype(float)
    np.testing.assert_array_equal(knn_indices(Q, R, k), brute_knn(Q, R, k))
    np.testing.assert_array_equal(knn_indices(R, R, k, exclude_self=True),
                                  brute_knn(R, R, k, exclude_self=True))


def brute_select(A, B, k, primary=None, exclude_self=False):
    """Sort every column by (primary, exact distance, index) with plain loops."""
    out = []
    for i in range(A.shape[1]):
        cand = []
        for j in range(B.shape[1]):
            if exclude_self and i == j:
                continue
            diff = A[:, i] - B[:, j]
            p = 0.0 if primary is None else primary[i, j]
            cand.append((p, float(diff @ diff), j))
        cand.sort()
        out.append([j for _, _, j in cand[:k]])
    return np.array(out)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.booleans())
def test_screened_selection_matches_bruteforce(seed, k, use_primary):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 5))
    A = rng.integers(-2, 3, (d, 9)).astype(float)
    B = rng.integers(-2, 3, (d, 14)).astype(float)
    primary = rng.integers(0, 3, (9, 14)).astype(float) if use_primary else None
    nn, sq = select_smallest(ScreenedDistances.between(A, B), k, primary)
    np.testing.assert_array_equal(nn, brute_select(A, B, k, primary))
    np.testing.assert_array_equal(sq, np.sum((A[:, :, None] - B[:, None, :]) ** 2,
                                             axis=0)[np.arange(9)[:, None], nn])


def test_screening_survives_large_offsets(rng):
    # Gram-form rounding is ~1e-8 here, far above the unit gaps between points
    base = rng.integers(-3, 4, (3, 30)).astype(float)
    X = 1e4 + np.concatenate([base, base[:, :10]], axis=1)  # ten exact duplicates
    nn = knn_indices(X, X, 4, exclude_self=True)
    np.testing.assert_array_equal(nn, brute_select(X, X, 4, exclude_self=True))
    assert all(30 + i in nn[i] for i in range(10))


def test_screened_transpose_and_errors(rng):
    A, B = rng.standard_normal((3, 5)), rng.standard_normal((3, 7))
    D = ScreenedDistances.between(A, B)
    np.testing.assert_allclose(D.T.approx, sq_distances(B, A), atol=1e-12)
    with pytest.raises(ValueError, match="outside"):
        select_smallest(D, 8)
    with pytest.raises(ValueError, match="dimension mismatch"):
        ScreenedDistances.between(A, rng.standard_normal((4, 2)))


def test_hfon_distances_exact_on_grid(rng):
    k = 7
    X = rng.standard_normal((3, 40))
    H = compute_hfon(X, rng.integers(0, 4, 40), k, 4)
    D = hfon_sq_distances(H[:, :15], H[:, 15:], k)
    counts = np.rint(H * k).astype(np.int64)
    expected = np.sum((counts[:, :15, None] - counts[:, None, 15:]) ** 2, axis=0) / k**2
    np.testing.assert_array_equal(D, expected)
    assert hfon_distance(H[:, 0], H[:, 15]) == pytest.approx(D[0, 0], abs=1e-15)
