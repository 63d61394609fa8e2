"""Alternating optimization of the projection, classifier and codes.

Each outer iteration runs a W-step (orthogonality-preserving Cayley updates
with Barzilai-Borwein step sizes), the closed-form classifier update and the
two sign updates for target and source codes.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio
from .dataio import RunConfig, Standardizer
from .graph import build_affinity, laplacian_gram, mine_triplets, TripletSet
from .hamming import pack, sign
from .neighbors import (ScreenedDistances, hfon_from_neighbors, hfon_sq_distances,
                        knn_indices, knn_pseudo_label)
from .objective import (CodeMoments, Problem, State, Weights, full_gradient,
                        total_objective, w_objective)

log = logging.getLogger(__name__)

MODEL_MAGIC = b"PWM1"
_MODEL_HEADER = struct.Struct("<IQQQ")

# relative objective change that counts as converged
CONVERGENCE_TOL = 1e-4
CONVERGENCE_WINDOW = 5
# bounds on the normalized step tau * ||A||_F
_TAU_MIN, _TAU_MAX = 1e-4, 10.0
_MAX_HALVINGS = 10
_ARMIJO = 1e-4


def orthogonality_error(W):
    return float(np.linalg.norm(W.T @ W - np.eye(W.shape[1])))


def pca_init(X, r):
    """Top-``r`` eigenvectors of ``X X^T`` as columns, largest first.

    Each column is signed so that its first non-negligible entry is positive.
    When ``r`` exceeds the rank of ``X X^T`` the trailing columns come from
    the eigensolver's (deterministic) orthonormal basis of the null space.
    """
    X = np.asarray(X, dtype=np.float64)
    d = X.shape[0]
    if r > d:
        raise ValueError(f"code length r={r} exceeds feature dimension d={d}")
    evals, evecs = np.linalg.eigh(X @ X.T)
    order = np.argsort(-evals, kind="stable")
    evals = evals[order]
    W = evecs[:, order[:r]].copy()
    tol = max(evals[0], 0.0) * d * np.finfo(float).eps
    if np.sum(evals > tol) < r:
        log.warning("r=%d exceeds the data rank %d; padding with an orthonormal "
                    "complement", r, int(np.sum(evals > tol)))
    for j in range(r):
        col = W[:, j]
        lead = np.flatnonzero(np.abs(col) > 1e-12)
        if lead.size and col[lead[0]] < 0:
            W[:, j] = -col
    return W


def _skew_factors(W, G):
    # A = G W^T - W G^T = U V^T
    return np.hstack([G, W]), np.hstack([W, -G])


def skew_norm(W, G):
    """Frobenius norm of ``A = G W^T - W G^T`` without forming ``A``."""
    U, V = _skew_factors(W, G)
    return float(np.sqrt(max(np.sum((U.T @ U) * (V.T @ V)), 0.0)))


def cayley_step(W, G, tau):
    """``W' = (I + tau/2 A)^{-1} (I - tau/2 A) W`` with ``A = G W^T - W G^T``.

    For ``2r < d`` the solve uses the rank-``2r`` factorization of ``A``
    (Sherman-Morrison-Woodbury) and costs O(d r^2); otherwise it is a dense
    ``d x d`` solve.
    """
    W = np.asarray(W, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    d, r = W.shape
    h = 0.5 * tau
    try:
        if 2 * r < d:
            U, V = _skew_factors(W, G)
            inner = np.eye(2 * r) + h * (V.T @ U)
            return W - tau * U @ np.linalg.solve(inner, V.T @ W)
        A = G @ W.T - W @ G.T
        eye = np.eye(d)
        return np.linalg.solve(eye + h * A, (eye - h * A) @ W)
    except np.linalg.LinAlgError as exc:
        A = G @ W.T - W @ G.T
        cond = np.linalg.cond(np.eye(d) + h * A)
        raise np.linalg.LinAlgError(
            f"Cayley solve failed (condition estimate {cond:.3g})") from exc


@dataclass
class WStepResult:
    W: np.ndarray
    objective: float
    tau: float  # normalized step to start the next call from


def w_step(problem, state, wts, inner_iters, tau=0.1):
    """Several Cayley updates of ``W`` with Barzilai-Borwein step sizes.

    ``tau`` is a normalized step: the step actually taken is
    ``tau / ||A||_F``, so the rotation per update is scale free.  The first
    update uses ``tau``; later ones use the BB1 ratio
    ``<S, S> / <S, Y>`` over successive iterates ``S`` and Riemannian
    gradients ``Y`` (doubled when ``<S, Y> <= 0``), clamped to
    ``[1e-4, 10]`` in normalized units.

    A step is accepted when it passes an Armijo sufficient-decrease test and
    is halved up to ten times otherwise; if no halving passes, the loop stops
    and the current ``W`` is returned.  The objective therefore strictly
    decreases over accepted inner iterations and never rises above the
    entry value.
    """
    W = state.W
    moments = CodeMoments.of(problem, state) if wts.theta else None
    f = w_objective(problem, state, W, wts, moments)
    tau_n = float(np.clip(tau, _TAU_MIN, _TAU_MAX))
    prev = None
    for _ in range(inner_iters):
        G = full_gradient(problem, state, wts, W, moments)
        a_norm = skew_norm(W, G)
        if a_norm <= 1e-14 * max(1.0, np.linalg.norm(G)):
            break
        R = G - W @ (G.T @ W)
        if prev is not None:
            S = W - prev[0]
            Y = R - prev[1]
            sy = float(np.sum(S * Y))
            if sy > 0:
                tau_n = float(np.sum(S * S)) / sy * a_norm
            else:
                # negative curvature: no BB estimate, so probe a longer step
                tau_n *= 2.0
        tau_n = float(np.clip(tau_n, _TAU_MIN, _TAU_MAX))
        for _ in range(_MAX_HALVINGS + 1):
            W_new = cayley_step(W, G, tau_n / a_norm)
            f_new = w_objective(problem, state, W_new, wts, moments)
            # along the Cayley curve df/dt = -||A||^2 / 2 at t = 0
            if f_new <= f - _ARMIJO * tau_n * a_norm / 2:
                break
            tau_n *= 0.5
        else:
            break
        prev = (W, R)
        W, f = W_new, f_new
    return WStepResult(W, f, tau_n)


def c_step(B_s, Y_s, lambda1, lambda2):
    """Ridge solution ``(lambda1 B B^T + lambda2 I)^{-1} lambda1 B Y^T``."""
    r = B_s.shape[0]
    if lambda1 == 0:
        return np.zeros((r, Y_s.shape[0]))
    M = lambda1 * (B_s @ B_s.T) + lambda2 * np.eye(r)
    if lambda2 <= 0 and np.linalg.matrix_rank(M) < r:
        raise ValueError("lambda2 must be > 0: B_s B_s^T is rank deficient")
    return np.linalg.solve(M, lambda1 * (B_s @ Y_s.T))


def bt_step(W, X_t):
    return sign(W.T @ X_t)


def bs_step(W, X_s, C, Y_s, theta, lambda1):
    """``sgn((theta I + lambda1 C C^T)^{-1} (theta W^T X_s + lambda1 C Y_s))``."""
    r = W.shape[1]
    M = theta * np.eye(r) + lambda1 * (C @ C.T)
    rhs = theta * (W.T @ X_s) + lambda1 * (C @ Y_s)
    if np.linalg.matrix_rank(M) < r:
        raise ValueError("theta I + lambda1 C C^T is singular; need theta > 0")
    return sign(np.linalg.solve(M, rhs))


@dataclass(frozen=True)
class CodesPair:
    B_t: np.ndarray
    B_s: np.ndarray


@dataclass
class PwcfModel:
    """Learned projection and classifier plus everything needed to encode
    new samples the same way as the training data."""

    W: np.ndarray
    C: np.ndarray
    config: RunConfig
    standardizer: Standardizer
    trace: list = field(default_factory=list)
    orthogonality: list = field(default_factory=list)
    kind: str = "pwcf"

    @property
    def dim(self):
        return self.W.shape[0]

    @property
    def bits(self):
        return self.W.shape[1]

    @property
    def num_classes(self):
        return self.C.shape[1]

    def project(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] != self.dim:
            raise ValueError(f"dimension mismatch: data d={X.shape[0]}, model d={self.dim}")
        return self.W.T @ self.standardizer.transform(X)

    def encode(self, X):
        """Packed codes ``sgn(W^T standardize(X))``."""
        return pack(sign(self.project(X)))


@dataclass
class _Prepared:
    problem: Problem
    standardizer: Standardizer
    pseudo_labels: np.ndarray


def prepare(pair, config):
    """Steps before the loop: standardize, pseudo-label, HFON, triplets, graph."""
    c = pair.num_classes
    k = config.k
    if pair.n_source < k + 1 or pair.n_target < k + 1:
        raise ValueError(f"each domain needs more than k={k} samples "
                         f"(n_s={pair.n_source}, n_t={pair.n_target})")
    std = Standardizer.fit(np.concatenate([pair.target, pair.source], axis=1))
    X_t = std.transform(pair.target)
    X_s = std.transform(pair.source)
    y_s = pair.source_labels

    # distance matrices are built once and shared by every neighbour search
    D_ts = ScreenedDistances.between(X_t, X_s)
    pseudo = knn_pseudo_label(X_s, y_s, X_t, k, c, dists=D_ts)
    y_t = pseudo.labels
    need_hfon = not config.disable_hfon
    need_graph = not config.disable_manifold
    within = None
    if need_hfon or need_graph:
        within = tuple(
            knn_indices(X, X, k, exclude_self=True,
                        dists=ScreenedDistances.between(X, X, exclude_self=True))
            for X in (X_t, X_s))
    if need_hfon:
        h_t = hfon_from_neighbors(y_t, within[0], c)
        h_s = hfon_from_neighbors(y_s, within[1], c)
        D_h = hfon_sq_distances(h_t, h_s, k)
    else:
        h_s = h_t = None

    if config.disable_triplet:
        triplets = TripletSet.empty()
    elif need_hfon:
        triplets = mine_triplets(y_t, y_s, h_t, h_s, dists=D_h)
    else:
        triplets = mine_triplets(y_t, y_s, X_t, X_s)

    d = X_t.shape[0]
    if config.disable_manifold:
        lap = np.zeros((d, d))
    else:
        dists = {"ts": D_ts, "hfon": D_h} if need_hfon else {"ts": D_ts}
        graph = build_affinity(X_t, X_s, h_t, h_s, k, use_hfon=need_hfon, dists=dists,
                               within=within)
        lap = laplacian_gram(np.concatenate([X_t, X_s], axis=1), graph.L)
    problem = Problem(X_t, X_s, dataio.one_hot(y_s, c), triplets, lap)
    return _Prepared(problem, std, y_t)


def _solve_bs(problem, state, wts):
    if wts.theta > 0:
        return bs_step(state.W, problem.X_s, state.C, problem.Y_s, wts.theta, wts.lambda1)
    # no quantization term: minimum-norm solution of the classifier fit alone
    M = wts.lambda1 * (state.C @ state.C.T)
    rhs = wts.lambda1 * (state.C @ problem.Y_s)
    return sign(np.linalg.lstsq(M, rhs, rcond=None)[0])


def _converged(totals, tol=None, window=None):
    """Relative objective change over the last ``window`` iterations below ``tol``.

    A single small step is not enough: the alternation can stall for one
    iteration and then drop again.
    """
    tol = CONVERGENCE_TOL if tol is None else tol
    window = CONVERGENCE_WINDOW if window is None else window
    if len(totals) <= window:
        return False
    old, cur = totals[-1 - window], totals[-1]
    return abs(old - cur) <= tol * max(abs(cur), np.finfo(float).tiny)


def train(pair, config=RunConfig(), log_every=0):
    """Learn a PWCF model from a labelled source and unlabelled target domain.

    Only ``pair.source``, ``pair.source_labels`` and ``pair.target`` are read.
    Returns the model (with its per-iteration objective trace, entry 0 being
    the initial state) and the final training codes.
    """
    prep = prepare(pair, config)
    problem = prep.problem
    wts = Weights.from_config(config)
    r = config.r
    W = pca_init(problem.X, r)
    rng = np.random.default_rng(config.seed)
    B_t = rng.choice([-1.0, 1.0], size=(r, problem.X_t.shape[1]))
    B_s = rng.choice([-1.0, 1.0], size=(r, problem.X_s.shape[1]))
    C = c_step(B_s, problem.Y_s, wts.lambda1, wts.lambda2)
    state = State(W, C, B_t, B_s)

    trace = [total_objective(problem, state, config)]
    ortho = [orthogonality_error(W)]
    tau = config.tau
    for it in range(config.max_iters):
        step = w_step(problem, state, wts, config.inner_w_iters, tau)
        state.W, tau = step.W, step.tau
        ortho.append(orthogonality_error(state.W))
        state.C = c_step(state.B_s, problem.Y_s, wts.lambda1, wts.lambda2)
        state.B_t = bt_step(state.W, problem.X_t)
        state.B_s = _solve_bs(problem, state, wts)
        trace.append(total_objective(problem, state, config))
        if log_every and it % log_every == 0:
            log.info("iter %d total %.6g", it, trace[-1].total)
        if config.tol and _converged([t.total for t in trace], config.tol):
            break

    model = PwcfModel(state.W, state.C, config, prep.standardizer, trace, ortho)
    return model, CodesPair(state.B_t, state.B_s)


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------


def save_model(path, model):
    d, r = model.W.shape
    c = model.C.shape[1]
    meta = {"kind": model.kind}
    meta.update(model.config.to_mapping())
    text = dataio.format_kv(meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(_MODEL_HEADER.pack(1, d, r, c))
        for arr in (model.standardizer.mean, model.standardizer.scale):
            fh.write(np.asarray(arr, dtype="<f8").tobytes())
        fh.write(np.asarray(model.W, dtype="<f8").tobytes(order="F"))
        fh.write(np.asarray(model.C, dtype="<f8").tobytes(order="F"))
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)


def load_model(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a PWM1 model file")
    version, d, r, c = _MODEL_HEADER.unpack_from(raw, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported model version {version}")
    pos = 4 + _MODEL_HEADER.size

    def take(count, shape=None):
        nonlocal pos
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        return arr if shape is None else arr.reshape(shape, order="F")

    try:
        mean, scale = take(d), take(d)
        W = take(d * r, (d, r))
        C = take(r * c, (r, c))
        (length,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        text = raw[pos:pos + length].decode("utf-8")
    except (ValueError, struct.error) as exc:
        raise ValueError(f"{path}: truncated model file") from exc
    meta = {}
    for line in text.splitlines():
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    kind = meta.pop("kind", "pwcf")
    config = RunConfig.from_mapping(meta)
    return PwcfModel(W, C, config, Standardizer(mean, scale), kind=kind)
