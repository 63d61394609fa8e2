"""Reference encoders: random-projection LSH and PCA-sign hashing.

Both standardize with pooled statistics and output ``sgn(P^T x)`` codes, so
they go through exactly the same retrieval and evaluation path as PWCF.
"""

from __future__ import annotations

import numpy as np

from .dataio import RunConfig, Standardizer
from .optimizer import PwcfModel, pca_init

KINDS = ("lsh", "pca_sign")


def fit_baseline(kind, X, r, seed=0):
    """Fit a baseline on pooled ``d x n`` features.

    ``lsh`` draws a standard normal ``d x r`` projection from ``seed``;
    ``pca_sign`` takes the top-``r`` principal directions of the
    standardized data.
    """
    X = np.asarray(X, dtype=np.float64)
    d = X.shape[0]
    std = Standardizer.fit(X)
    if kind == "lsh":
        P = np.random.default_rng(seed).standard_normal((d, r))
    elif kind == "pca_sign":
        if r > d:
            raise ValueError(f"pca_sign needs r <= d (r={r}, d={d})")
        P = pca_init(std.transform(X), r)
    else:
        raise ValueError(f"unknown baseline kind {kind!r}; expected one of {KINDS}")
    return PwcfModel(P, np.zeros((r, 0)), RunConfig(r=r, seed=seed), std, kind=kind)


def encode_baseline(model, X):
    return model.encode(X)
