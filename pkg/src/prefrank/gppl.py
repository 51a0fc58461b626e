"""Gaussian process preference learning.

Latent utilities get a zero-mean GP prior with a Matern 3/2 kernel; a pair
(a beats b) is observed with probability Phi((u_a - u_b) / (sqrt(2) * sigma2)),
the probit random-utility likelihood. Inference is sparse variational:
a Gaussian q(u) over inducing-point utilities is optimized by natural-gradient
ascent on the evidence lower bound, with the expected log-likelihood and its
moment gradients evaluated by Gauss-Hermite quadrature. A dense Laplace
approximation over all training documents serves as the exact reference for
small problems.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from types import MappingProxyType

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular
from scipy.special import log_ndtr, ndtr
from sklearn.cluster import KMeans

from .bws import ScoreVector
from .corpus import FeatureMatrix

logger = logging.getLogger(__name__)

_SQRT3 = math.sqrt(3.0)
_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite.hermgauss(24)
_GH_WEIGHTS = _GH_WEIGHTS / math.sqrt(math.pi)


class GpplError(ValueError):
    """Raised for invalid configurations, inputs, or numerical failure."""


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------

def _scaled_dists(X, Y, lengthscales):
    ls = np.asarray(lengthscales, dtype=np.float64)
    if ls.ndim == 0:
        ls = np.full(X.shape[1], float(ls))
    if ls.shape != (X.shape[1],):
        raise GpplError(
            f"lengthscales shape {ls.shape} incompatible with dim {X.shape[1]}"
        )
    if np.any(ls <= 0):
        raise GpplError("lengthscales must be positive")
    Xs = X / ls
    Ys = Y / ls
    sq = (
        np.sum(Xs**2, axis=1)[:, None]
        + np.sum(Ys**2, axis=1)[None, :]
        - 2.0 * Xs @ Ys.T
    )
    return np.sqrt(np.maximum(sq, 0.0))


def matern32_gram(X, Y=None, signal_var=1.0, lengthscales=1.0):
    """Matern 3/2 Gram matrix: k = s * (1 + sqrt(3) r) * exp(-sqrt(3) r)
    with r the lengthscale-scaled Euclidean distance."""
    if signal_var <= 0:
        raise GpplError("signal_var must be positive")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = X if Y is None else np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[1] != Y.shape[1]:
        raise GpplError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    r = _scaled_dists(X, Y, lengthscales)
    return signal_var * (1.0 + _SQRT3 * r) * np.exp(-_SQRT3 * r)


def matern32(x, y, signal_var=1.0, lengthscales=1.0) -> float:
    """Matern 3/2 kernel between two feature vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise GpplError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return float(matern32_gram(x[None, :], y[None, :], signal_var, lengthscales)[0, 0])


def median_lengthscales(X, rng=None, max_pairs=100_000):
    """Per-feature median absolute pairwise difference, the usual heuristic
    for initializing kernel lengthscales. Zero medians fall back to the
    overall scale (or 1.0 if everything is constant)."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        return np.ones(X.shape[1])
    if n * (n - 1) // 2 <= max_pairs:
        ii, jj = np.triu_indices(n, k=1)
    else:
        rng = rng or np.random.default_rng(0)
        ii = rng.integers(0, n, size=max_pairs)
        jj = rng.integers(0, n, size=max_pairs)
        keep = ii != jj
        ii, jj = ii[keep], jj[keep]
    med = np.median(np.abs(X[ii] - X[jj]), axis=0)
    fallback = np.median(med[med > 0]) if np.any(med > 0) else 1.0
    med[med <= 0] = fallback
    return med


# ---------------------------------------------------------------------------
# Likelihood
# ---------------------------------------------------------------------------

def pair_probability(u1, u2, sigma2) -> float:
    """Probability that the first item wins: Phi((u1 - u2) / (sqrt(2) * sigma2))."""
    if sigma2 <= 0:
        raise GpplError("sigma2 must be positive")
    return float(ndtr((u1 - u2) / (math.sqrt(2.0) * sigma2)))


def _normal_cdf_ratio(z):
    """phi(z) / Phi(z), computed in log space so large negative z stay finite."""
    z = np.asarray(z, dtype=np.float64)
    log_pdf = -0.5 * z**2 - 0.5 * math.log(2.0 * math.pi)
    return np.exp(log_pdf - log_ndtr(z))


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GpplConfig:
    """Settings for sparse variational preference learning.

    `lengthscales=None` triggers the median heuristic at fit time.
    `step_size` is the fixed natural-gradient step; `optimize_hypers` turns on
    a bound-improving probe of signal variance and lengthscale scale every
    `hyper_every` iterations.
    """

    sigma2: float = 1.0
    signal_var: float = 1.0
    lengthscales: float | np.ndarray | None = None
    n_inducing: int = 500
    batch_size: int = 200
    max_iters: int = 400
    tol: float = 1e-5
    seed: int = 0
    step_size: float = 0.1
    optimize_hypers: bool = False
    hyper_every: int = 25

    def __post_init__(self):
        for name in ("sigma2", "signal_var", "tol", "step_size"):
            if getattr(self, name) <= 0:
                raise GpplError(f"{name} must be positive")
        for name in ("n_inducing", "batch_size", "max_iters", "hyper_every"):
            if getattr(self, name) < 1:
                raise GpplError(f"{name} must be a positive integer")
        if self.step_size > 1.0:
            raise GpplError("step_size must be in (0, 1]")


@dataclass(frozen=True)
class GpplPosterior:
    """Variational posterior over inducing-point utilities plus the kernel
    hyperparameters it was fit with."""

    inducing_inputs: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    signal_var: float
    lengthscales: np.ndarray
    sigma2: float
    jitter: float
    bound_trace: tuple = ()

    def __post_init__(self):
        if not np.all(np.isfinite(self.mean)):
            raise GpplError("posterior mean contains non-finite values")
        asym = np.max(np.abs(self.cov - self.cov.T))
        if asym > 1e-8:
            raise GpplError(f"posterior covariance asymmetric by {asym}")
        min_eig = float(np.min(np.linalg.eigvalsh(0.5 * (self.cov + self.cov.T))))
        if min_eig < -1e-8:
            raise GpplError(f"posterior covariance has eigenvalue {min_eig}")


@dataclass(frozen=True)
class UtilityPrediction:
    """Posterior utility mean and variance per document id."""

    entries: MappingProxyType

    def __init__(self, entries):
        for doc_id, (mean, var) in entries.items():
            if var < 0:
                raise GpplError(f"negative predictive variance for {doc_id!r}")
        object.__setattr__(self, "entries", MappingProxyType(dict(entries)))

    def mean_of(self, doc_id: str) -> float:
        return self.entries[doc_id][0]

    def variance_of(self, doc_id: str) -> float:
        return self.entries[doc_id][1]

    def to_scores(self) -> ScoreVector:
        return ScoreVector({d: mv[0] for d, mv in self.entries.items()}, "gppl")


# ---------------------------------------------------------------------------
# Shared numerics
# ---------------------------------------------------------------------------

def _chol_with_jitter(K, signal_var):
    """Cholesky with escalating diagonal jitter: 1e-6 * signal_var, x10 up to
    three escalations. Raises once the ladder is exhausted."""
    jitter = 1e-6 * signal_var
    for _ in range(4):
        try:
            L = cholesky(K + jitter * np.eye(K.shape[0]), lower=True)
            return L, jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise GpplError("kernel matrix numerically singular after jitter escalation")


def _cross_kernel(X, Z, signal_var, lengthscales, jitter):
    """Cross-covariance to the inducing inputs under the jittered prior: the
    nugget applies wherever a row of X coincides with an inducing input, so
    that predictions interpolate the variational mean there exactly."""
    K = matern32_gram(X, Z, signal_var, lengthscales)
    coincident = K >= signal_var * (1.0 - 1e-12)
    if np.any(coincident):
        K = K + jitter * coincident
    return K


def _pairs_to_indices(features: FeatureMatrix, pairs):
    if not pairs:
        raise GpplError("at least one pairwise label is required")
    wi = np.array([features.index_of(p.winner_id) for p in pairs], dtype=np.intp)
    li = np.array([features.index_of(p.loser_id) for p in pairs], dtype=np.intp)
    counts = np.array([p.count for p in pairs], dtype=np.float64)
    return wi, li, counts


class SviWorkspace:
    """Precomputed quantities for the variational bound on one training set.

    Holds the inducing inputs Z, the prior Cholesky of K_mm, the projection
    A = K_nm K_mm^-1, and per-pair difference projections. The bound and its
    gradient with respect to the variational mean are exposed for testing.
    """

    def __init__(self, features: FeatureMatrix, pairs, cfg: GpplConfig,
                 lengthscales, inducing_inputs):
        self.cfg = cfg
        self.c = math.sqrt(2.0) * cfg.sigma2
        self.lengthscales = np.asarray(lengthscales, dtype=np.float64)
        X = features.rows
        self.Z = np.asarray(inducing_inputs, dtype=np.float64)
        self.m = self.Z.shape[0]

        K_mm = matern32_gram(self.Z, None, cfg.signal_var, self.lengthscales)
        self.L_mm, self.jitter = _chol_with_jitter(K_mm, cfg.signal_var)
        self.K_mm = K_mm + self.jitter * np.eye(self.m)

        K_nm = _cross_kernel(X, self.Z, cfg.signal_var, self.lengthscales, self.jitter)
        # A = K_nm K_mm^-1 via two triangular solves
        tmp = solve_triangular(self.L_mm, K_nm.T, lower=True)
        self.A = solve_triangular(self.L_mm.T, tmp, lower=False).T

        wi, li, counts = _pairs_to_indices(features, pairs)
        self.winner_idx, self.loser_idx, self.counts = wi, li, counts
        self.n_pairs = len(counts)
        self.B = self.A[wi] - self.A[li]

        # Residual conditional variance of each pair difference given u:
        # d^T (K_nn - A K_mn) d, needing only the (ii, jj, ij) kernel entries.
        k_ii = np.full(len(wi), cfg.signal_var)
        k_ij = np.array([
            matern32(X[i], X[j], cfg.signal_var, self.lengthscales)
            for i, j in zip(wi, li)
        ])
        AK_ii = np.einsum("ij,ij->i", self.A[wi], K_nm[wi])
        AK_jj = np.einsum("ij,ij->i", self.A[li], K_nm[li])
        AK_ij = np.einsum("ij,ij->i", self.A[wi], K_nm[li])
        AK_ji = np.einsum("ij,ij->i", self.A[li], K_nm[wi])
        self.k_resid = np.maximum(
            (k_ii - AK_ii) + (k_ii - AK_jj) - (k_ij - AK_ij) - (k_ij - AK_ji), 0.0
        )

    def prior_inv(self):
        return cho_solve((self.L_mm, True), np.eye(self.m))

    def z_moments(self, mean, cov, idx=None):
        B = self.B if idx is None else self.B[idx]
        k_resid = self.k_resid if idx is None else self.k_resid[idx]
        mu_z = (B @ mean) / self.c
        v_z = (k_resid + np.einsum("ij,jk,ik->i", B, cov, B)) / self.c**2
        return mu_z, np.maximum(v_z, 1e-12)

    def expected_loglik_terms(self, mu_z, v_z):
        """Gauss-Hermite E[log Phi(z)] per pair plus its derivatives with
        respect to the z-mean and z-variance."""
        shift = np.sqrt(2.0 * v_z)[:, None] * _GH_NODES[None, :]
        zs = mu_z[:, None] + shift
        log_cdf = log_ndtr(zs)
        ratio = np.exp(-0.5 * zs**2 - 0.5 * math.log(2.0 * math.pi) - log_cdf)
        e = log_cdf @ _GH_WEIGHTS
        de_dmu = ratio @ _GH_WEIGHTS
        dv = (ratio * _GH_NODES[None, :]) @ _GH_WEIGHTS / np.sqrt(2.0 * v_z)
        return e, de_dmu, dv

    def kl(self, mean, cov):
        L_s = cholesky(cov + 1e-12 * np.eye(self.m), lower=True)
        inv_term = cho_solve((self.L_mm, True), cov)
        alpha = cho_solve((self.L_mm, True), mean)
        logdet_k = 2.0 * np.sum(np.log(np.diag(self.L_mm)))
        logdet_s = 2.0 * np.sum(np.log(np.diag(L_s)))
        return 0.5 * (
            np.trace(inv_term) + mean @ alpha - self.m + logdet_k - logdet_s
        )

    def bound(self, mean, cov) -> float:
        """Full-data evidence lower bound at variational parameters (mean, cov)."""
        mu_z, v_z = self.z_moments(mean, cov)
        e, _, _ = self.expected_loglik_terms(mu_z, v_z)
        return float(self.counts @ e - self.kl(mean, cov))

    def bound_mean_grad(self, mean, cov) -> np.ndarray:
        """Analytic gradient of `bound` with respect to the variational mean."""
        mu_z, v_z = self.z_moments(mean, cov)
        _, de_dmu, _ = self.expected_loglik_terms(mu_z, v_z)
        grad_lik = self.B.T @ (self.counts * de_dmu) / self.c
        return grad_lik - cho_solve((self.L_mm, True), mean)


def _choose_inducing(X, n_inducing, seed):
    n = X.shape[0]
    if n_inducing >= n:
        return X.copy()
    km = KMeans(n_clusters=n_inducing, init="k-means++", n_init=1,
                random_state=seed & 0x7FFFFFFF, algorithm="lloyd")
    km.fit(X)
    return km.cluster_centers_


def fit(features: FeatureMatrix, pairs, cfg: GpplConfig) -> GpplPosterior:
    """Fit the sparse variational posterior on pairwise labels.

    Natural-gradient coordinate ascent on the bound: with natural parameters
    (S^-1 m, -S^-1/2), the update at step rho blends the prior precision with
    the quadrature estimate of the likelihood curvature. The bound over the
    full data is evaluated every iteration; convergence is declared when its
    relative change stays below `tol` for two consecutive iterations.
    """
    rng = np.random.default_rng(cfg.seed)
    X = features.rows
    n = X.shape[0]

    lengthscales = (
        median_lengthscales(X, rng)
        if cfg.lengthscales is None
        else np.broadcast_to(
            np.atleast_1d(np.asarray(cfg.lengthscales, dtype=np.float64)),
            (X.shape[1],),
        ).copy()
    )

    Z = _choose_inducing(X, min(cfg.n_inducing, n), cfg.seed)
    ws = SviWorkspace(features, pairs, cfg, lengthscales, Z)

    prior_inv = ws.prior_inv()
    lam = prior_inv.copy()          # precision of q(u)
    theta1 = np.zeros(ws.m)         # precision-weighted mean
    cov = ws.K_mm.copy()
    mean = np.zeros(ws.m)

    batch = min(cfg.batch_size, ws.n_pairs)
    scale = ws.n_pairs / batch
    rho = cfg.step_size

    trace = [ws.bound(mean, cov)]
    steady = 0
    for it in range(cfg.max_iters):
        idx = None if batch == ws.n_pairs else rng.choice(ws.n_pairs, batch, replace=False)
        B = ws.B if idx is None else ws.B[idx]
        counts = ws.counts if idx is None else ws.counts[idx]

        mu_z, v_z = ws.z_moments(mean, cov, idx)
        _, de_dmu, de_dv = ws.expected_loglik_terms(mu_z, v_z)

        grad_m = scale * (B.T @ (counts * de_dmu)) / ws.c
        curv = scale * (B.T * (counts * de_dv)) @ B / ws.c**2  # dL/dS, negative definite

        lam = (1.0 - rho) * lam + rho * (prior_inv - 2.0 * curv)
        theta1 = (1.0 - rho) * theta1 + rho * (grad_m - 2.0 * curv @ mean)

        lam = 0.5 * (lam + lam.T)
        c_lam = cho_factor(lam, lower=True)
        cov = cho_solve(c_lam, np.eye(ws.m))
        cov = 0.5 * (cov + cov.T)
        mean = cov @ theta1

        if cfg.optimize_hypers and (it + 1) % cfg.hyper_every == 0:
            ws, changed = _probe_hypers(features, pairs, cfg, ws, mean, cov)
            if changed:
                prior_inv = ws.prior_inv()

        trace.append(ws.bound(mean, cov))
        rel = abs(trace[-1] - trace[-2]) / max(1.0, abs(trace[-2]))
        steady = steady + 1 if rel < cfg.tol else 0
        if steady >= 2:
            break

    if not np.all(np.isfinite(mean)):
        raise GpplError("variational mean diverged to non-finite values")

    return GpplPosterior(
        inducing_inputs=ws.Z,
        mean=mean,
        cov=cov,
        signal_var=ws.cfg.signal_var,
        lengthscales=ws.lengthscales,
        sigma2=cfg.sigma2,
        jitter=ws.jitter,
        bound_trace=tuple(trace),
    )


def _probe_hypers(features, pairs, cfg, ws, mean, cov):
    """Greedy bound-improving probe: rescale lengthscales or signal variance
    by fixed factors and keep any candidate that raises the full bound."""
    current = ws.bound(mean, cov)
    best = (current, ws, cfg)
    for ls_mult, sv_mult in ((0.75, 1.0), (4.0 / 3.0, 1.0), (1.0, 0.75), (1.0, 4.0 / 3.0)):
        cand_cfg = replace(cfg, signal_var=cfg.signal_var * sv_mult)
        try:
            cand = SviWorkspace(
                features, pairs, cand_cfg, ws.lengthscales * ls_mult, ws.Z
            )
        except GpplError:
            continue
        b = cand.bound(mean, cov)
        if b > best[0] + 1e-9:
            best = (b, cand, cand_cfg)
    _, chosen, _ = best
    return chosen, chosen is not ws


def predict(post: GpplPosterior, features: FeatureMatrix) -> UtilityPrediction:
    """Sparse-GP predictive mean and variance at each feature row."""
    if features.dim != post.inducing_inputs.shape[1]:
        raise GpplError(
            f"feature dim {features.dim} does not match the "
            f"{post.inducing_inputs.shape[1]}-d training space"
        )
    K_sm = _cross_kernel(features.rows, post.inducing_inputs,
                         post.signal_var, post.lengthscales, post.jitter)
    K_mm = matern32_gram(post.inducing_inputs, None,
                         post.signal_var, post.lengthscales)
    K_mm_hat = K_mm + post.jitter * np.eye(K_mm.shape[0])
    try:
        L = cholesky(K_mm_hat, lower=True)
    except np.linalg.LinAlgError:
        raise GpplError("stored inducing kernel matrix is numerically singular")
    tmp = solve_triangular(L, K_sm.T, lower=True)
    A = solve_triangular(L.T, tmp, lower=False).T

    mean = A @ post.mean
    # var = k** - a K_mm a^T + a S a^T
    var = (
        post.signal_var
        - np.einsum("ij,ij->i", A @ K_mm_hat, A)
        + np.einsum("ij,jk,ik->i", A, post.cov, A)
    )
    var = np.maximum(var, 0.0)
    return UtilityPrediction(
        {d: (float(mean[i]), float(var[i])) for i, d in enumerate(features.doc_ids)}
    )


def fit_exact_reference(features: FeatureMatrix, pairs, cfg: GpplConfig,
                        max_docs: int = 200) -> UtilityPrediction:
    """Dense Laplace-approximated posterior over all training documents.

    Damped Newton ascent on log p(pairs | f) - f^T K^-1 f / 2; the result is
    the oracle that the sparse route is checked against on small problems.
    """
    n = len(features)
    if n > max_docs:
        raise GpplError(f"exact reference is limited to {max_docs} documents, got {n}")
    wi, li, counts = _pairs_to_indices(features, pairs)
    X = features.rows
    lengthscales = (
        median_lengthscales(X)
        if cfg.lengthscales is None
        else np.broadcast_to(
            np.atleast_1d(np.asarray(cfg.lengthscales, dtype=np.float64)),
            (X.shape[1],),
        ).copy()
    )
    K = matern32_gram(X, None, cfg.signal_var, lengthscales)
    L, _ = _chol_with_jitter(K, cfg.signal_var)
    c = math.sqrt(2.0) * cfg.sigma2

    def objective(f):
        z = (f[wi] - f[li]) / c
        alpha = cho_solve((L, True), f)
        return float(counts @ log_ndtr(z) - 0.5 * f @ alpha), alpha

    f = np.zeros(n)
    obj, alpha = objective(f)
    for _ in range(100):
        z = (f[wi] - f[li]) / c
        ratio = _normal_cdf_ratio(z)
        g_pairs = counts * ratio / c
        grad = np.zeros(n)
        np.add.at(grad, wi, g_pairs)
        np.add.at(grad, li, -g_pairs)
        grad -= alpha

        w_pairs = counts * ratio * (ratio + z) / c**2
        W = np.zeros((n, n))
        np.add.at(W, (wi, wi), w_pairs)
        np.add.at(W, (li, li), w_pairs)
        np.add.at(W, (wi, li), -w_pairs)
        np.add.at(W, (li, wi), -w_pairs)

        K_inv = cho_solve((L, True), np.eye(n))
        H = K_inv + W
        step = np.linalg.solve(H, grad)

        # backtracking line search on the penalized objective
        t = 1.0
        for _ in range(30):
            f_new = f + t * step
            obj_new, alpha_new = objective(f_new)
            if obj_new >= obj:
                break
            t *= 0.5
        if obj_new < obj:
            break
        improved = obj_new - obj
        f, obj, alpha = f_new, obj_new, alpha_new
        if improved < 1e-10 * (abs(obj) + 1.0):
            break

    z = (f[wi] - f[li]) / c
    ratio = _normal_cdf_ratio(z)
    w_pairs = counts * ratio * (ratio + z) / c**2
    W = np.zeros((n, n))
    np.add.at(W, (wi, wi), w_pairs)
    np.add.at(W, (li, li), w_pairs)
    np.add.at(W, (wi, li), -w_pairs)
    np.add.at(W, (li, wi), -w_pairs)
    K_inv = cho_solve((L, True), np.eye(n))
    post_cov = np.linalg.inv(K_inv + W)
    var = np.maximum(np.diag(post_cov), 0.0)

    return UtilityPrediction(
        {d: (float(f[i]), float(var[i])) for i, d in enumerate(features.doc_ids)}
    )


# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------

def save_posterior(post: GpplPosterior, path) -> None:
    with open(path, "wb") as fh:
        np.savez(
            fh,
            container=np.array(["gppl-posterior", "1"]),
            inducing_inputs=post.inducing_inputs,
            mean=post.mean,
            cov=post.cov,
            signal_var=np.float64(post.signal_var),
            lengthscales=post.lengthscales,
            sigma2=np.float64(post.sigma2),
            jitter=np.float64(post.jitter),
        )


def load_posterior(path) -> GpplPosterior:
    with np.load(path, allow_pickle=False) as data:
        kind, version = data["container"]
        if kind != "gppl-posterior" or version != "1":
            raise GpplError(f"{path}: not a v1 gppl posterior container")
        return GpplPosterior(
            inducing_inputs=data["inducing_inputs"],
            mean=data["mean"],
            cov=data["cov"],
            signal_var=float(data["signal_var"]),
            lengthscales=data["lengthscales"],
            sigma2=float(data["sigma2"]),
            jitter=float(data["jitter"]),
        )
