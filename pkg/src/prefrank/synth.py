"""Synthetic corpora with known ground truth.

Features are uniform on [-1, 1]^dim; latent utilities are either a seeded
linear function of the features or a draw from a Matern 3/2 GP with unit
hyperparameters (so the GP ranker is well-specified in at least one regime).
Simulated annotators vote on sampled pairs through the probit random-utility
model, which makes desk-scale oracle experiments possible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky
from scipy.special import ndtr

from .bws import ScoreVector
from .corpus import FeatureMatrix, PairLabel


class SynthError(ValueError):
    """Raised for invalid generator configurations."""


@dataclass(frozen=True)
class SynthConfig:
    n_docs: int
    dim: int
    utility_fn: str = "linear"          # or "gp_sample"
    pairs_total: int = 100
    annotators_per_pair: int = 1
    sigma2: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_docs", "dim", "pairs_total", "annotators_per_pair"):
            if getattr(self, name) < 1:
                raise SynthError(f"{name} must be a positive integer")
        if self.sigma2 <= 0:
            raise SynthError("sigma2 must be positive")
        if self.utility_fn not in ("linear", "gp_sample"):
            raise SynthError(f"unknown utility_fn {self.utility_fn!r}")


def _doc_ids(n):
    width = max(4, len(str(n - 1)))
    return [f"d{i:0{width}d}" for i in range(n)]


def generate(cfg: SynthConfig):
    """Sample (features, true utilities, pairs) deterministically per seed.

    Every annotator vote on a sampled unordered pair goes to the first item
    with probability Phi((u_a - u_b) / (sqrt(2) * sigma2)); votes accumulate
    into pair counts.
    """
    rng = np.random.default_rng(cfg.seed)
    X = rng.uniform(-1.0, 1.0, size=(cfg.n_docs, cfg.dim))
    ids = _doc_ids(cfg.n_docs)

    if cfg.utility_fn == "linear":
        beta = rng.standard_normal(cfg.dim)
        beta /= np.linalg.norm(beta)
        u = X @ beta
    else:
        from .gppl import matern32_gram

        K = matern32_gram(X, None, signal_var=1.0, lengthscales=1.0)
        L = cholesky(K + 1e-8 * np.eye(cfg.n_docs), lower=True)
        u = L @ rng.standard_normal(cfg.n_docs)

    c = np.sqrt(2.0) * cfg.sigma2
    counts: dict[tuple[str, str], int] = {}
    for _ in range(cfg.pairs_total):
        i = int(rng.integers(0, cfg.n_docs))
        j = int(rng.integers(0, cfg.n_docs - 1))
        if j >= i:
            j += 1
        p_i_wins = ndtr((u[i] - u[j]) / c)
        votes_i = int(np.sum(rng.random(cfg.annotators_per_pair) < p_i_wins))
        votes_j = cfg.annotators_per_pair - votes_i
        if votes_i:
            key = (ids[i], ids[j])
            counts[key] = counts.get(key, 0) + votes_i
        if votes_j:
            key = (ids[j], ids[i])
            counts[key] = counts.get(key, 0) + votes_j

    pairs = [PairLabel(w, l, c_) for (w, l), c_ in counts.items()]
    features = FeatureMatrix(ids, X)
    truth = ScoreVector({d: float(u[k]) for k, d in enumerate(ids)}, "synthetic")
    return features, truth, pairs
