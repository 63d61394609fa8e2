"""Loss terms of the PWCF objective and their gradients with respect to ``W``.

The objective is

    Tri + theta * Q + lambda1 * Cls + lambda2 * ||C||^2 + lambda3 * M

with ``Tri`` the focal-weighted cross-domain triplet hinge, ``Q`` the
quantization error between codes and projections, ``Cls`` the source-domain
label regression error of the linear classifier ``C`` and ``M`` the graph
Laplacian smoothness of the projections.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .graph import TripletSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossBreakdown:
    triplet: float
    quantization: float
    classification: float
    regularizer: float
    manifold: float
    total: float

    COLUMNS = ("triplet", "quantization", "classification", "regularizer",
               "manifold", "total")

    def as_tuple(self):
        return tuple(getattr(self, c) for c in self.COLUMNS)


@dataclass(frozen=True)
class FocalWeightTrace:
    hinge: np.ndarray
    weight: np.ndarray


def focal_weights(hinge, gamma):
    """``(1 - exp(-[hinge]_+))^gamma``; zero for inactive triplets when gamma > 0."""
    act = np.maximum(hinge, 0.0)
    return (-np.expm1(-act)) ** gamma if gamma != 0 else np.ones_like(act)


def triplet_differences(triplets, X):
    """Anchor-minus-positive and anchor-minus-negative columns (each d x n)."""
    Xa = X[:, triplets.anchor]
    return Xa - X[:, triplets.positive], Xa - X[:, triplets.negative]


def _triplet_terms(W, triplets, X, diffs=None):
    Dp, Dn = triplet_differences(triplets, X) if diffs is None else diffs
    d_pos = np.sum((Dp.T @ W) ** 2, axis=1)
    d_neg = np.sum((Dn.T @ W) ** 2, axis=1)
    return d_pos, d_neg


def _check_orthonormal(W):
    err = np.linalg.norm(W.T @ W - np.eye(W.shape[1]))
    if err > 1e-6:
        log.warning("W is not orthonormal (||W^T W - I|| = %.3g)", err)


def focal_triplet_loss(W, triplets, X, m, gamma, check=True, diffs=None):
    """Focal-weighted triplet hinge summed over ``triplets``.

    Returns the loss and the per-triplet hinge values and weights.
    ``diffs`` may carry precomputed ``triplet_differences``.
    """
    W = np.asarray(W, dtype=np.float64)
    if check:
        _check_orthonormal(W)
    if len(triplets) == 0:
        empty = np.zeros(0)
        return 0.0, FocalWeightTrace(empty, empty)
    d_pos, d_neg = _triplet_terms(W, triplets, X, diffs)
    hinge = np.maximum(d_pos - d_neg + m, 0.0)
    weight = focal_weights(hinge, gamma)
    return float(np.sum(weight * hinge)), FocalWeightTrace(hinge, weight)


def triplet_gradient(W, triplets, X, m, gamma, diffs=None):
    """Gradient of the triplet term with the focal weights held constant.

    ``2 sum_{active} w_i [(a-p)(a-p)^T - (a-n)(a-n)^T] W``, evaluated without
    forming any ``d x d`` matrix.
    """
    W = np.asarray(W, dtype=np.float64)
    if len(triplets) == 0:
        return np.zeros_like(W)
    Dp, Dn = triplet_differences(triplets, X) if diffs is None else diffs
    Pp = Dp.T @ W
    Pn = Dn.T @ W
    hinge = np.sum(Pp**2, axis=1) - np.sum(Pn**2, axis=1) + m
    w = np.where(hinge >= 0, focal_weights(hinge, gamma), 0.0)
    return 2.0 * (Dp @ (w[:, None] * Pp) - Dn @ (w[:, None] * Pn))


def quantization_loss(W, X_t, X_s, B_t, B_s):
    """``||B_t - W^T X_t||^2 + ||B_s - W^T X_s||^2``."""
    return float(np.sum((B_t - W.T @ X_t) ** 2) + np.sum((B_s - W.T @ X_s) ** 2))


def quantization_gradient(W, X_t, X_s, B_t, B_s):
    """Gradient of ``quantization_loss`` in ``W`` (without the theta factor)."""
    return 2.0 * (X_t @ (X_t.T @ W) - X_t @ B_t.T + X_s @ (X_s.T @ W) - X_s @ B_s.T)


def classification_loss(C, B_s, Y_s):
    """``||Y_s - C^T B_s||^2`` over the labelled source codes."""
    return float(np.sum((Y_s - C.T @ B_s) ** 2))


def manifold_gradient(W, lap_gram):
    """Gradient of ``trace(W^T X L X^T W)`` given ``lap_gram = X L X^T``."""
    return 2.0 * lap_gram @ W


@dataclass
class Problem:
    """Fixed training data: standardized features, labels, triplets, graph."""

    X_t: np.ndarray
    X_s: np.ndarray
    Y_s: np.ndarray
    triplets: TripletSet
    lap_gram: np.ndarray
    X: np.ndarray = field(init=False, repr=False)
    gram: np.ndarray = field(init=False, repr=False)
    diffs: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.X = np.concatenate([self.X_t, self.X_s], axis=1)
        self.gram = self.X @ self.X.T
        self.diffs = triplet_differences(self.triplets, self.X)


@dataclass(frozen=True)
class CodeMoments:
    """``X B^T`` and ``||B||^2`` for the pooled codes, fixed during a W-step."""

    cross: np.ndarray
    sq_norm: float

    @classmethod
    def of(cls, problem, state):
        return cls(problem.X_t @ state.B_t.T + problem.X_s @ state.B_s.T,
                   float(np.sum(state.B_t**2) + np.sum(state.B_s**2)))


@dataclass
class State:
    W: np.ndarray
    C: np.ndarray
    B_t: np.ndarray
    B_s: np.ndarray


@dataclass(frozen=True)
class Weights:
    """Term weights after applying ablation switches."""

    use_triplet: bool
    gamma: float
    m: float
    theta: float
    lambda1: float
    lambda2: float
    lambda3: float

    @classmethod
    def from_config(cls, config):
        return cls(
            use_triplet=not config.disable_triplet,
            gamma=0.0 if config.standard_triplet else config.gamma,
            m=config.m,
            theta=0.0 if config.disable_quantization else config.theta,
            lambda1=0.0 if config.disable_classifier else config.lambda1,
            lambda2=config.lambda2,
            lambda3=0.0 if config.disable_manifold else config.lambda3,
        )


def total_objective(problem, state, config):
    """Evaluate every term and their weighted sum; disabled terms read 0."""
    wts = Weights.from_config(config)
    W = state.W
    tri = 0.0
    if wts.use_triplet:
        tri, _ = focal_triplet_loss(W, problem.triplets, problem.X, wts.m, wts.gamma,
                                    check=False, diffs=problem.diffs)
    q = 0.0
    if not config.disable_quantization:
        q = quantization_loss(W, problem.X_t, problem.X_s, state.B_t, state.B_s)
    cls = 0.0
    if not config.disable_classifier:
        cls = classification_loss(state.C, state.B_s, problem.Y_s)
    reg = float(np.sum(state.C**2))
    man = 0.0
    if not config.disable_manifold:
        man = max(float(np.sum(W * (problem.lap_gram @ W))), 0.0)
    total = (tri + config.theta * q + config.lambda1 * cls
             + config.lambda2 * reg + config.lambda3 * man)
    return LossBreakdown(tri, q, cls, reg, man, total)


def w_objective(problem, state, W, wts, moments=None):
    """The ``W``-dependent part of the objective (what the W-step minimizes).

    With ``moments`` the quantization term is expanded as
    ``||B||^2 - 2 tr(W^T X B^T) + tr(W^T X X^T W)``, which avoids touching
    the samples.
    """
    f = 0.0
    if wts.use_triplet:
        f += focal_triplet_loss(W, problem.triplets, problem.X, wts.m, wts.gamma,
                                check=False, diffs=problem.diffs)[0]
    if wts.theta:
        if moments is None:
            q = quantization_loss(W, problem.X_t, problem.X_s, state.B_t, state.B_s)
        else:
            q = (moments.sq_norm - 2.0 * float(np.sum(W * moments.cross))
                 + float(np.sum(W * (problem.gram @ W))))
        f += wts.theta * q
    if wts.lambda3:
        f += wts.lambda3 * float(np.sum(W * (problem.lap_gram @ W)))
    return f


def full_gradient(problem, state, wts, W=None, moments=None):
    """Gradient of the W-dependent objective: triplet + quantization + manifold."""
    W = state.W if W is None else W
    G = np.zeros_like(W)
    if wts.use_triplet:
        G += triplet_gradient(W, problem.triplets, problem.X, wts.m, wts.gamma,
                              diffs=problem.diffs)
    if wts.theta:
        if moments is None:
            G += wts.theta * quantization_gradient(W, problem.X_t, problem.X_s,
                                                   state.B_t, state.B_s)
        else:
            G += 2.0 * wts.theta * (problem.gram @ W - moments.cross)
    if wts.lambda3:
        G += wts.lambda3 * manifold_gradient(W, problem.lap_gram)
    return G
