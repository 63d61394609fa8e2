"""Exact k-nearest-neighbour search, KNN pseudo-labelling and the
histogram feature of neighbours (HFON).

All neighbour searches are brute force.  Distance ties go to the smaller
sample index and vote ties to the smaller class index, so every result is
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist


def sq_distances(A, B):
    """Squared Euclidean distances between the columns of ``A`` and ``B``."""
    return cdist(np.asarray(A, dtype=np.float64).T,
                 np.asarray(B, dtype=np.float64).T, "sqeuclidean")


def exact_sq_distances(A, B, rows, cols, chunk=1 << 20):
    """``|A[:, rows[i]] - B[:, cols[i]]|^2`` from coordinate differences."""
    out = np.empty(len(rows))
    step = max(1, chunk // max(A.shape[0], 1))
    for lo in range(0, len(rows), step):
        diff = A[:, rows[lo:lo + step]] - B[:, cols[lo:lo + step]]
        out[lo:lo + step] = np.einsum("ij,ij->j", diff, diff)
    return out


@dataclass(frozen=True)
class ScreenedDistances:
    """All pairwise squared distances between the columns of ``A`` and ``B``
    in the fast Gram form ``|a|^2 + |b|^2 - 2 a.b``, with a bound on its
    rounding error.

    Gram-form values are only used to screen candidates.  Whatever decides
    a ranking is recomputed exactly from coordinate differences, so ties
    (duplicate points, integer data) behave exactly as with a direct scan.
    With ``exclude_self`` the diagonal is never a candidate.
    """

    A: np.ndarray
    B: np.ndarray
    approx: np.ndarray
    norm_a: np.ndarray
    norm_b: np.ndarray
    factor: float

    @classmethod
    def between(cls, A, B, exclude_self=False):
        A = np.asarray(A, dtype=np.float64)
        B = np.asarray(B, dtype=np.float64)
        if A.shape[0] != B.shape[0]:
            raise ValueError(f"dimension mismatch: d={A.shape[0]} vs d={B.shape[0]}")
        norm_a = np.einsum("ij,ij->j", A, A)
        norm_b = np.einsum("ij,ij->j", B, B)
        approx = A.T @ B
        approx *= -2.0
        approx += norm_a[:, None]
        approx += norm_b[None, :]
        if exclude_self:
            np.fill_diagonal(approx, np.inf)
        # |error| <= gamma_{d+2} (|a|^2 + |b|^2 + 2|a||b|); 4x covers the cross
        # term and leaves headroom for blocked or fused BLAS kernels
        factor = 4.0 * (A.shape[0] + 4) * np.finfo(np.float64).eps
        return cls(A, B, approx, norm_a, norm_b, factor)

    @property
    def shape(self):
        return self.approx.shape

    @property
    def T(self):
        return ScreenedDistances(self.B, self.A, np.ascontiguousarray(self.approx.T),
                                 self.norm_b, self.norm_a, self.factor)

    def row_slack(self):
        """Per-row bound on ``|approx - exact|`` (loosened to the row maximum)."""
        top = self.norm_b.max() if self.norm_b.size else 0.0
        return self.factor * (self.norm_a + top)

    def exact(self, rows, cols):
        return exact_sq_distances(self.A, self.B, rows, cols)


def select_smallest(dists, k, primary=None):
    """Per row, the ``k`` columns with the smallest ``(primary, distance, index)``.

    ``dists`` is a :class:`ScreenedDistances`; ``primary`` an optional exact
    matrix of the same shape ranked ahead of the distance.  Returns the
    column indices ordered by that key and their exact distances.
    """
    n_rows, n_cols = dists.shape
    if not 1 <= k <= n_cols:
        raise ValueError(f"k={k} outside [1, {n_cols}]")
    if primary is None:
        key = dists.approx
    else:
        # entries below the k-th primary value are in regardless of distance,
        # entries above it are out, and entries equal to it compete
        primary = np.asarray(primary)
        pk = np.partition(primary, k - 1, axis=1)[:, k - 1:k]
        key = np.where(primary < pk, -np.inf,
                       np.where(primary == pk, dists.approx, np.inf))
    # any entry whose lower bound clears the k-th upper bound may belong
    slack = dists.row_slack()
    cap = np.partition(key, k - 1, axis=1)[:, k - 1] + 2.0 * slack
    rows, cols = np.nonzero(key <= cap[:, None])
    exact = dists.exact(rows, cols)
    keys = (cols, exact) if primary is None else (cols, exact, primary[rows, cols])
    order = np.lexsort(keys + (rows,))
    counts = np.bincount(rows, minlength=n_rows)
    if counts.min() < k:
        raise ValueError("fewer than k finite candidates in a row")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pick = order[(starts[:, None] + np.arange(k)).ravel()]
    return cols[pick].reshape(n_rows, k), exact[pick].reshape(n_rows, k)


def k_smallest(D, k):
    """Column indices of the ``k`` smallest entries in each row of ``D``.

    Rows of the result are ordered by (distance, index).  Equal distances
    are resolved in favour of the smaller column index, including at the
    k-th position, which a plain ``argpartition`` does not guarantee.
    Runs in O(size of D) apart from sorting the ``k`` winners.
    """
    D = np.asarray(D)
    n_rows, n_cols = D.shape
    if not 1 <= k <= n_cols:
        raise ValueError(f"k={k} outside [1, {n_cols}]")
    if k == n_cols:
        return np.argsort(D, axis=1, kind="stable")
    kth = np.partition(D, k - 1, axis=1)[:, k - 1:k]
    less = D < kth
    equal = D == kth
    need = k - less.sum(axis=1, keepdims=True)
    take = less | equal
    # only rows with more tied candidates than free slots need trimming
    tied = np.flatnonzero(equal.sum(axis=1) > need[:, 0])
    if tied.size:
        eq = equal[tied]
        take[tied] = less[tied] | (eq & (np.cumsum(eq, axis=1) <= need[tied]))
    idx = np.nonzero(take)[1].reshape(n_rows, k)  # row-major, so index order
    order = np.argsort(np.take_along_axis(D, idx, axis=1), axis=1, kind="stable")
    return np.take_along_axis(idx, order, axis=1)


def knn_indices(queries, reference, k, exclude_self=False, dists=None):
    """Indices into ``reference`` of each query column's ``k`` nearest columns.

    With ``exclude_self`` the queries are the reference set and a sample is
    never its own neighbour.  ``dists`` may hold a precomputed
    :class:`ScreenedDistances` built with the same ``exclude_self``.
    """
    n_ref = np.shape(reference)[1]
    if exclude_self:
        if k > n_ref - 1:
            raise ValueError(
                f"k={k} neighbours requested but only {n_ref - 1} other samples exist")
    elif k > n_ref:
        raise ValueError(f"k={k} exceeds the {n_ref} reference samples")
    if dists is None:
        dists = ScreenedDistances.between(queries, reference, exclude_self)
    return select_smallest(dists, k)[0]


def majority_vote(neighbor_labels, num_classes):
    """Winning class per row and the fraction of votes it received."""
    neighbor_labels = np.asarray(neighbor_labels)
    n, k = neighbor_labels.shape
    counts = np.zeros((n, num_classes), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(n), k), neighbor_labels.ravel()), 1)
    winners = counts.argmax(axis=1)  # first maximum = smallest class index
    return winners, counts[np.arange(n), winners] / k


@dataclass(frozen=True)
class PseudoLabels:
    labels: np.ndarray
    confidence: np.ndarray


def knn_pseudo_label(source, source_labels, target, k, num_classes=None, dists=None):
    """Label each target column by majority vote of its ``k`` nearest source columns."""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    source_labels = np.asarray(source_labels, dtype=np.int64)
    if source.shape[0] != target.shape[0]:
        raise ValueError(f"dimension mismatch: source d={source.shape[0]}, "
                         f"target d={target.shape[0]}")
    if k > source.shape[1]:
        raise ValueError(f"k={k} exceeds the number of source samples ({source.shape[1]})")
    if num_classes is None:
        num_classes = int(source_labels.max()) + 1
    nn = knn_indices(target, source, k, dists=dists)
    labels, confidence = majority_vote(source_labels[nn], num_classes)
    return PseudoLabels(labels, confidence)


def compute_hfon(features, labels, k, num_classes, dists=None):
    """Histogram of neighbour classes, one ``c``-vector per sample.

    Column ``i`` holds the class frequencies among the ``k`` nearest
    neighbours of sample ``i`` inside ``features`` (the sample itself
    excluded), so entries are multiples of ``1/k`` summing to one.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = features.shape[1]
    if n <= k:
        raise ValueError(f"need more than k={k} samples for HFON, got {n}")
    if labels.size != n:
        raise ValueError(f"{labels.size} labels for {n} samples")
    if labels.size and labels.max() >= num_classes:
        raise ValueError(f"label {labels.max()} >= num_classes={num_classes}")
    nn = knn_indices(features, features, k, exclude_self=True, dists=dists)
    return hfon_from_neighbors(labels, nn, num_classes)


def hfon_from_neighbors(labels, nn, num_classes):
    """HFON columns from precomputed ``(n, k)`` neighbour index lists."""
    n, k = nn.shape
    counts = np.zeros((num_classes, n))
    np.add.at(counts, (np.asarray(labels)[nn].ravel(), np.repeat(np.arange(n), k)), 1.0)
    return counts / k


def hfon_sq_distances(h_a, h_b, k):
    """Pairwise squared HFON distances, exact.

    HFON entries are counts over ``k``, so the distances are computed on the
    integer counts, where the Gram form has no rounding error, and scaled by
    ``1/k^2`` afterwards.  Equal distances therefore compare equal.
    """
    ca = np.rint(np.asarray(h_a, dtype=np.float64) * k)
    cb = np.rint(np.asarray(h_b, dtype=np.float64) * k)
    D = ca.T @ cb
    D *= -2.0
    D += np.einsum("ij,ij->j", ca, ca)[:, None]
    D += np.einsum("ij,ij->j", cb, cb)[None, :]
    return D / float(k * k)


def hfon_distance(h_i, h_j):
    """Squared Euclidean distance between two histograms."""
    h_i = np.asarray(h_i, dtype=np.float64)
    h_j = np.asarray(h_j, dtype=np.float64)
    if h_i.shape != h_j.shape:
        raise ValueError(f"histogram shapes differ: {h_i.shape} vs {h_j.shape}")
    diff = h_i - h_j
    return float(diff @ diff)
