"""Cross-domain hard triplets and the manifold affinity graph.

Pooled sample order follows ``X = [X_t, X_s]``: target columns first
(indices ``0 .. n_t-1``), then source columns.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .neighbors import (ScreenedDistances, exact_sq_distances, hfon_sq_distances,
                        select_smallest, sq_distances)

log = logging.getLogger(__name__)

TARGET, SOURCE = 0, 1


@dataclass(frozen=True)
class TripletSet:
    """Index triples into the pooled sample order.

    ``anchor_domain[i]`` is ``TARGET`` or ``SOURCE``; positive and negative
    always come from the other domain.
    """

    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    anchor_domain: np.ndarray
    skipped: int = 0

    def __len__(self):
        return self.anchor.size

    @classmethod
    def empty(cls):
        e = np.zeros(0, dtype=np.int64)
        return cls(e, e, e, e)


def mine_triplets(target_labels, source_labels, target_desc, source_desc, dists=None):
    """One hard cross-domain triplet per sample.

    For every anchor the positive is the same-class sample of the other
    domain farthest from it in descriptor space and the negative is the
    closest sample of a different class.  Descriptors are HFON columns
    normally, raw features for the no-HFON ablation.  Anchors whose class is
    missing from (or the only class in) the other domain are skipped.
    ``dists`` may hold the precomputed target-by-source descriptor distances.
    """
    yt = np.asarray(target_labels, dtype=np.int64)
    ys = np.asarray(source_labels, dtype=np.int64)
    n_t = yt.size
    D = sq_distances(target_desc, source_desc) if dists is None else dists  # n_t x n_s

    parts = []
    skipped = 0
    for dom, Dm, y_anchor, y_other, offset in (
            (TARGET, D, yt, ys, n_t),  # target anchors pick source samples
            (SOURCE, D.T, ys, yt, 0)):
        same = y_anchor[:, None] == y_other[None, :]
        ok = same.any(axis=1) & (~same).any(axis=1)
        skipped += int((~ok).sum())
        pos = np.where(same, Dm, -np.inf).argmax(axis=1)
        neg = np.where(same, np.inf, Dm).argmin(axis=1)
        rows = np.flatnonzero(ok)
        anchor_offset = 0 if dom == TARGET else n_t
        parts.append((rows + anchor_offset, pos[rows] + offset,
                      neg[rows] + offset, np.full(rows.size, dom)))
    if skipped:
        log.warning("skipped %d anchors without an admissible positive/negative", skipped)
    a, p, n, g = (np.concatenate(x).astype(np.int64) for x in zip(*parts))
    return TripletSet(a, p, n, g, skipped)


@dataclass(frozen=True)
class LaplacianGraph:
    Z: sp.csr_matrix
    L: sp.csr_matrix
    sigma_within: float
    sigma_cross: float

    @property
    def degree(self):
        return np.asarray(self.Z.sum(axis=1)).ravel()


def _bandwidth(sq_dists, mode):
    if mode != "median":
        sigma = float(mode)
        if not sigma > 0:
            raise ValueError(f"sigma must be > 0, got {mode!r}")
        return sigma
    dist = np.sqrt(sq_dists)
    if dist.size == 0:
        return 1.0
    sigma = float(np.median(dist))
    if sigma == 0.0:
        # a zero median would send every nonzero distance to weight 0
        nonzero = dist[dist > 0]
        sigma = float(nonzero.mean()) if nonzero.size else 1.0
    return sigma


def _hfon_distances(h_t, h_s, k):
    """Exact integer-count distances when the histograms are on the 1/k grid."""
    h_t = np.asarray(h_t, dtype=np.float64)
    h_s = np.asarray(h_s, dtype=np.float64)
    on_grid = all(np.allclose(h * k, np.rint(h * k), rtol=0, atol=1e-9) for h in (h_t, h_s))
    return hfon_sq_distances(h_t, h_s, k) if on_grid else sq_distances(h_t, h_s)


def _edges(nn, sq, offset_rows, offset_cols):
    rows = np.repeat(np.arange(nn.shape[0]), nn.shape[1])
    return np.column_stack([rows + offset_rows, nn.ravel() + offset_cols]), sq.ravel()


def _unique_undirected(edges, sq):
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    key = np.column_stack([lo, hi])
    key, first = np.unique(key, axis=0, return_index=True)
    return key, sq[first]


def build_affinity(target, source, target_hfon, source_hfon, k,
                   sigma_mode="median", use_hfon=True, dists=None, within=None):
    """Sparse affinity ``Z`` and Laplacian ``L = D - Z`` over ``[X_t, X_s]``.

    Edges join each sample to its ``k`` nearest same-domain samples (feature
    distance) and its ``k`` nearest other-domain samples (HFON distance, or
    feature distance when ``use_hfon`` is off); the union is symmetrized.
    HFON distances tie massively, so cross edges rank by HFON distance, then
    feature distance, then index.  Weights are ``exp(-dist^2 / sigma^2)``,
    with one bandwidth per edge kind taken as the median edge length unless
    ``sigma_mode`` is a number.

    ``dists`` optionally supplies precomputed distances as a dict: ``tt``,
    ``ss`` and ``ts`` hold :class:`ScreenedDistances` (the first two built
    with ``exclude_self``) and ``hfon`` the exact t x s HFON matrix.
    ``within`` may give the same-domain neighbour lists ``(nn_t, nn_s)``.
    """
    target = np.asarray(target, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    n_t, n_s = target.shape[1], source.shape[1]
    n = n_t + n_s

    dists = dict(dists or {})
    if "tt" not in dists and within is None:
        dists["tt"] = ScreenedDistances.between(target, target, exclude_self=True)
    if "ss" not in dists and within is None:
        dists["ss"] = ScreenedDistances.between(source, source, exclude_self=True)
    if "ts" not in dists:
        dists["ts"] = ScreenedDistances.between(target, source)

    within_edges = []
    for key, X, offset, pre in (("tt", target, 0, None if within is None else within[0]),
                                ("ss", source, n_t, None if within is None else within[1])):
        kk = min(k, X.shape[1] - 1)
        if kk < 1:
            within_edges.append((np.zeros((0, 2), dtype=np.int64), np.zeros(0)))
            continue
        if pre is None:
            nn, sq = select_smallest(dists[key], kk)
        else:
            nn = np.asarray(pre)[:, :kk]
            rows = np.repeat(np.arange(nn.shape[0]), kk)
            sq = exact_sq_distances(X, X, rows, nn.ravel()).reshape(nn.shape)
        within_edges.append(_edges(nn, sq, offset, offset))

    Df = dists["ts"]
    k_ts, k_st = min(k, n_s), min(k, n_t)
    if use_hfon:
        Dh = dists["hfon"] if "hfon" in dists else _hfon_distances(target_hfon,
                                                                    source_hfon, k)
        nn_ts, _ = select_smallest(Df, k_ts, primary=Dh)
        Dh_st = np.ascontiguousarray(Dh.T)
        nn_st, _ = select_smallest(Df.T, k_st, primary=Dh_st)
        sq_ts = np.take_along_axis(Dh, nn_ts, axis=1)
        sq_st = np.take_along_axis(Dh_st, nn_st, axis=1)
    else:
        nn_ts, sq_ts = select_smallest(Df, k_ts)
        nn_st, sq_st = select_smallest(Df.T, k_st)
    cross = [_edges(nn_ts, sq_ts, 0, n_t), _edges(nn_st, sq_st, n_t, 0)]

    def assemble(parts, mode):
        edges = np.concatenate([e for e, _ in parts])
        sq = np.concatenate([s for _, s in parts])
        edges, sq = _unique_undirected(edges, sq)
        sigma = _bandwidth(sq, mode)
        return edges, np.exp(-sq / sigma**2), sigma

    e_w, w_w, sigma_w = assemble(within_edges, sigma_mode)
    e_c, w_c, sigma_c = assemble(cross, sigma_mode)
    edges = np.concatenate([e_w, e_c])
    weights = np.concatenate([w_w, w_c])
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    vals = np.concatenate([weights, weights])
    Z = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    Z.eliminate_zeros()
    deg = np.asarray(Z.sum(axis=1)).ravel()
    L = (sp.diags(deg) - Z).tocsr()
    L.eliminate_zeros()
    return LaplacianGraph(Z, L, sigma_w, sigma_c)


def laplacian_gram(X, L):
    """``X L X^T`` for pooled features ``X`` (d x n)."""
    X = np.asarray(X, dtype=np.float64)
    return X @ (L @ X.T)


def manifold_quadratic(W, X, L):
    """``trace(W^T X L X^T W)``, the Laplacian-weighted spread of ``W^T X``."""
    F = np.asarray(X, dtype=np.float64).T @ W  # n x r
    return float(np.sum(F * (L @ F)))
