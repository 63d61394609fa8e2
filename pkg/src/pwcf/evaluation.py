"""Retrieval metrics (MAP, precision/recall at k) and repeated query-split trials."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dataio import DatasetPair
from .hamming import pack, retrieve

log = logging.getLogger(__name__)

DEFAULT_K_GRID = (1, 5, 10, 20, 50, 100, 200, 500, 1000)
PROTOCOLS = ("cross_domain", "single_domain")


def average_precision(relevant):
    """AP of one ranked list of relevance flags; 0 when nothing is relevant."""
    rel = np.asarray(relevant, dtype=bool)
    total = rel.sum()
    if total == 0:
        return 0.0
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1)
    return float(np.sum(hits[rel] / ranks[rel]) / total)


@dataclass
class EvalReport:
    map: float
    precision_at: list
    recall_at: list
    num_queries: int
    num_database: int
    trials: list = field(default_factory=list)
    mean: float = 0.0
    std: float = 0.0

    @property
    def stderr(self):
        n = len(self.trials)
        return self.std / math.sqrt(n) if n > 1 else 0.0


def _relevance(results, query_labels, db_labels):
    query_labels = np.asarray(query_labels)
    db_labels = np.asarray(db_labels)
    if results.indices.shape != (query_labels.size, db_labels.size):
        raise ValueError(
            f"result shape {results.indices.shape} does not match "
            f"{query_labels.size} queries x {db_labels.size} database items")
    return db_labels[results.indices] == query_labels[:, None]


def _clamp_grid(k_grid, n_db):
    out = []
    for k in k_grid:
        if k > n_db:
            log.warning("k=%d exceeds database size %d; clamped", k, n_db)
            k = n_db
        out.append(int(k))
    return out


def evaluate(results, query_labels, db_labels, k_grid=DEFAULT_K_GRID):
    """MAP over all queries plus mean precision and recall at each ``k``.

    Queries with no relevant database item score AP 0 and are left out of
    the recall average.
    """
    rel = _relevance(results, query_labels, db_labels)
    n_q, n_db = rel.shape
    hits = np.cumsum(rel, axis=1)
    ranks = np.arange(1, n_db + 1)
    total = hits[:, -1]
    ap = np.where(total > 0,
                  np.sum(np.where(rel, hits / ranks, 0.0), axis=1) / np.maximum(total, 1),
                  0.0)
    grid = _clamp_grid(k_grid, n_db)
    has_rel = total > 0
    precision, recall = [], []
    for k in grid:
        top = hits[:, k - 1]
        precision.append((k, float(np.mean(top / k))))
        rec = float(np.mean(top[has_rel] / total[has_rel])) if has_rel.any() else 0.0
        recall.append((k, rec))
    m = float(np.mean(ap))
    return EvalReport(m, precision, recall, n_q, n_db, [m], m, 0.0)


def aggregate(reports):
    """Combine per-trial reports: curves averaged, MAP mean and sample std."""
    maps = [r.map for r in reports]
    mean = float(np.mean(maps))
    std = float(np.std(maps, ddof=1)) if len(maps) > 1 else 0.0
    ks = [k for k, _ in reports[0].precision_at]
    prec = [(k, float(np.mean([r.precision_at[i][1] for r in reports])))
            for i, k in enumerate(ks)]
    rec = [(k, float(np.mean([r.recall_at[i][1] for r in reports])))
           for i, k in enumerate(ks)]
    return EvalReport(mean, prec, rec, reports[0].num_queries,
                      reports[0].num_database, maps, mean, std)


def split_queries(n_t, num_queries, seed):
    """Random disjoint (query, rest) index split of the target domain."""
    if not 0 < num_queries < n_t:
        raise ValueError(f"need 0 < queries ({num_queries}) < n_t ({n_t})")
    perm = np.random.default_rng(seed).permutation(n_t)
    return np.sort(perm[:num_queries]), np.sort(perm[num_queries:])


def _normalize_protocol(protocol):
    aliases = {"cross": "cross_domain", "single": "single_domain"}
    protocol = aliases.get(protocol, protocol)
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    return protocol


def evaluate_codes(query_codes, query_labels, db_codes, db_labels, k_grid=DEFAULT_K_GRID):
    """Rank ``db_codes`` for each query code and score the ranking."""
    return evaluate(retrieve(query_codes, db_codes), query_labels, db_labels, k_grid)


def _fit_pwcf(config):
    from .optimizer import train

    def fit(train_pair):
        model, codes = train(train_pair, config)
        return model.encode, pack(codes.B_s), pack(codes.B_t)
    return fit


def _fit_baseline(kind, config):
    from .baselines import encode_baseline, fit_baseline

    def fit(train_pair):
        pooled = np.concatenate([train_pair.target, train_pair.source], axis=1)
        model = fit_baseline(kind, pooled, config.r, config.seed)
        enc = lambda X: encode_baseline(model, X)  # noqa: E731
        return enc, enc(train_pair.source), enc(train_pair.target)
    return fit


def run_trials(pair, config, protocol="cross_domain", num_trials=10,
               queries_per_trial=500, k_grid=DEFAULT_K_GRID, method="pwcf"):
    """Repeated random query splits of the target domain.

    Each trial holds out ``queries_per_trial`` target samples as queries,
    trains ``method`` (``"pwcf"``, ``"lsh"`` or ``"pca_sign"``) on the source
    plus the remaining target samples, and ranks the source codes
    (cross-domain) or the remaining target codes (single-domain).  Relevance
    uses ``pair.target_truth``.  ``protocol`` may also be a tuple of
    protocols, which share the trained models; a dict of reports is then
    returned.
    """
    if pair.target_truth is None:
        raise ValueError("evaluation requires target ground truth labels")
    many = not isinstance(protocol, str)
    protocols = [_normalize_protocol(p) for p in (protocol if many else [protocol])]
    fit = _fit_pwcf(config) if method == "pwcf" else _fit_baseline(method, config)

    per_protocol = {p: [] for p in protocols}
    for t in range(num_trials):
        q_idx, rest = split_queries(pair.n_target, queries_per_trial, config.seed + t)
        train_pair = DatasetPair(pair.source, pair.source_labels, pair.target[:, rest],
                                 pair.num_classes)
        encode, src_codes, tgt_codes = fit(train_pair)
        q_codes = encode(pair.target[:, q_idx])
        q_labels = pair.target_truth[q_idx]
        for p in protocols:
            if p == "cross_domain":
                db, db_labels = src_codes, pair.source_labels
            else:
                db, db_labels = tgt_codes, pair.target_truth[rest]
            per_protocol[p].append(evaluate_codes(q_codes, q_labels, db, db_labels, k_grid))
    out = {p: aggregate(reps) for p, reps in per_protocol.items()}
    return out if many else out[protocols[0]]


def evaluate_model(model, pair, protocol="cross_domain", num_trials=1,
                   queries_per_trial=500, k_grid=DEFAULT_K_GRID, seed=0):
    """Query-split evaluation of an already trained encoder (no retraining).

    Database codes are the model's encodings of the source domain
    (cross-domain) or of the non-query target samples (single-domain).
    """
    if pair.target_truth is None:
        raise ValueError("evaluation requires target ground truth labels")
    protocol = _normalize_protocol(protocol)
    src_codes = model.encode(pair.source)
    tgt_codes = model.encode(pair.target)
    reps = []
    for t in range(num_trials):
        q_idx, rest = split_queries(pair.n_target, queries_per_trial, seed + t)
        if protocol == "cross_domain":
            db, db_labels = src_codes, pair.source_labels
        else:
            db, db_labels = tgt_codes[rest], pair.target_truth[rest]
        reps.append(evaluate_codes(tgt_codes[q_idx], pair.target_truth[q_idx],
                                   db, db_labels, k_grid))
    return aggregate(reps)


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------


def format_table(report, title="PWCF"):
    lines = [
        f"# {title}",
        f"{'queries':<12}{report.num_queries}",
        f"{'database':<12}{report.num_database}",
        f"{'map':<12}{report.map:.6f}",
        f"{'std':<12}{report.std:.6f}",
        "",
        f"{'trial':<8}{'map':>12}",
    ]
    lines += [f"{i:<8}{m:>12.6f}" for i, m in enumerate(report.trials)]
    lines += ["", f"{'k':<8}{'precision':>12}{'recall':>12}"]
    for (k, p), (_, r) in zip(report.precision_at, report.recall_at):
        lines.append(f"{k:<8}{p:>12.6f}{r:>12.6f}")
    return "\n".join(lines) + "\n"


def format_kv(report):
    out = [
        f"map={report.map:.10f}",
        f"mean={report.mean:.10f}",
        f"std={report.std:.10f}",
        f"num_queries={report.num_queries}",
        f"num_database={report.num_database}",
        f"num_trials={len(report.trials)}",
    ]
    out += [f"trial_{i}_map={m:.10f}" for i, m in enumerate(report.trials)]
    out += [f"precision_at_{k}={v:.10f}" for k, v in report.precision_at]
    out += [f"recall_at_{k}={v:.10f}" for k, v in report.recall_at]
    return "\n".join(out) + "\n"


def format_curve(points):
    return "".join(f"{k} {v:.10f}\n" for k, v in points)
