import math

import numpy as np
import pytest
from scipy.special import ndtr
from scipy.stats import spearmanr

from prefrank.corpus import FeatureMatrix, PairLabel
from prefrank.gppl import (
    GpplConfig,
    GpplError,
    GpplPosterior,
    SviWorkspace,
    fit,
    fit_exact_reference,
    load_posterior,
    matern32,
    matern32_gram,
    median_lengthscales,
    pair_probability,
    predict,
    save_posterior,
)


def toy_matrix(n, dim, seed=0, low=-1.0, high=1.0):
    rng = np.random.default_rng(seed)
    ids = [f"d{i:03d}" for i in range(n)]
    return FeatureMatrix(ids, rng.uniform(low, high, size=(n, dim))), ids


def noise_free_pairs(ids, u):
    out = []
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            if u[i] > u[j]:
                out.append(PairLabel(ids[i], ids[j]))
            else:
                out.append(PairLabel(ids[j], ids[i]))
    return out


class TestMatern32:
    def test_same_point_gives_signal_var(self):
        x = np.array([0.3, -0.7])
        assert matern32(x, x, signal_var=2.5) == pytest.approx(2.5, abs=1e-15)

    def test_closed_form_at_unit_scaled_distance(self):
        # r = 1/sqrt(3) makes k = (1 + 1) * exp(-1)
        x = np.array([0.0])
        y = np.array([1.0 / math.sqrt(3.0)])
        assert matern32(x, y) == pytest.approx(2.0 * math.exp(-1.0), rel=1e-12)

    def test_monotone_decay_to_zero(self):
        x = np.zeros(1)
        vals = [matern32(x, np.array([r]), lengthscales=1.0) for r in np.linspace(0, 40, 200)]
        diffs = np.diff(vals)
        assert np.all(diffs <= 1e-15)
        assert vals[-1] < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(GpplError):
            matern32(np.zeros(2), np.zeros(3))

    def test_ard_lengthscales(self):
        x, y = np.array([1.0, 0.0]), np.array([0.0, 0.0])
        wide = matern32(x, y, lengthscales=np.array([10.0, 1.0]))
        narrow = matern32(x, y, lengthscales=np.array([0.1, 1.0]))
        assert wide > narrow

    def test_gram_psd_on_random_points(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal((50, 4))
        K = matern32_gram(X, None, signal_var=1.3, lengthscales=0.8)
        min_eig = np.min(np.linalg.eigvalsh(K))
        assert min_eig >= -1e-8

    def test_median_heuristic_positive(self):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((40, 3))
        X[:, 1] = 0.0  # constant feature must not yield a zero lengthscale
        ls = median_lengthscales(X)
        assert ls.shape == (3,)
        assert np.all(ls > 0)


class TestPairProbability:
    def test_equal_utilities_give_half(self):
        assert pair_probability(1.7, 1.7, 2.0) == pytest.approx(0.5, abs=1e-15)

    def test_unit_z_matches_normal_cdf(self):
        sigma2 = 1.4
        diff = math.sqrt(2.0) * sigma2
        assert pair_probability(diff, 0.0, sigma2) == pytest.approx(
            float(ndtr(1.0)), abs=1e-12
        )

    def test_antisymmetry_sums_to_one(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            u1, u2 = rng.standard_normal(2) * 3
            s2 = float(rng.uniform(0.1, 3.0))
            total = pair_probability(u1, u2, s2) + pair_probability(u2, u1, s2)
            assert total == pytest.approx(1.0, abs=1e-12)

    def test_strictly_increasing_in_difference(self):
        grid = np.linspace(-6, 6, 400)
        vals = [pair_probability(g, 0.0, 1.0) for g in grid]
        assert np.all(np.diff(vals) > 0)

    def test_sigma2_must_be_positive(self):
        with pytest.raises(GpplError):
            pair_probability(0.0, 0.0, 0.0)


def small_cfg(**kw):
    base = dict(n_inducing=50, batch_size=10_000, max_iters=300, tol=1e-7, seed=0)
    base.update(kw)
    return GpplConfig(**base)


class TestFit:
    def test_single_pair_orders_posterior(self):
        fm, ids = toy_matrix(2, 2, seed=1)
        post = fit(fm, [PairLabel(ids[0], ids[1])], small_cfg())
        pred = predict(post, fm)
        assert pred.mean_of(ids[0]) > pred.mean_of(ids[1])

    def test_no_pairs_rejected(self):
        fm, _ = toy_matrix(3, 2)
        with pytest.raises(GpplError):
            fit(fm, [], small_cfg())

    def test_unknown_endpoint_rejected(self):
        fm, ids = toy_matrix(3, 2)
        with pytest.raises(Exception):
            fit(fm, [PairLabel(ids[0], "ghost")], small_cfg())

    def test_exhaustive_noise_free_recovery(self):
        # noise-free generator, likelihood variance matched tight: the
        # predicted ranking must reproduce the true order exactly
        for seed in range(5):
            rng = np.random.default_rng(seed)
            fm, ids = toy_matrix(30, 1, seed=seed)
            u = fm.rows[:, 0]
            pairs = noise_free_pairs(ids, u)
            post = fit(fm, pairs, small_cfg(sigma2=0.3, seed=seed))
            means = [predict(post, fm).mean_of(d) for d in ids]
            assert spearmanr(means, u).statistic == pytest.approx(1.0, abs=1e-12)

    def test_doubling_counts_never_shrinks_the_gap(self):
        fm, ids = toy_matrix(2, 2, seed=5)
        pair = [PairLabel(ids[0], ids[1], 1)]
        doubled = [PairLabel(ids[0], ids[1], 2)]
        cfg = small_cfg()
        gap = lambda post: (
            predict(post, fm).mean_of(ids[0]) - predict(post, fm).mean_of(ids[1])
        )
        g1 = gap(fit(fm, pair, cfg))
        g2 = gap(fit(fm, doubled, cfg))
        assert abs(g2) >= abs(g1) - 1e-9

    def test_deterministic_for_fixed_seed(self):
        fm, ids = toy_matrix(12, 2, seed=2)
        rng = np.random.default_rng(0)
        pairs = [
            PairLabel(ids[i], ids[j])
            for i, j in rng.choice(12, size=(30, 2), replace=True)
            if i != j
        ]
        cfg = small_cfg(n_inducing=6, batch_size=8, max_iters=60)
        p1 = fit(fm, pairs, cfg)
        p2 = fit(fm, pairs, cfg)
        np.testing.assert_array_equal(p1.mean, p2.mean)
        np.testing.assert_array_equal(p1.cov, p2.cov)

    def test_full_batch_bound_is_nondecreasing(self):
        fm, ids = toy_matrix(15, 2, seed=3)
        u = fm.rows[:, 0]
        pairs = noise_free_pairs(ids, u)
        post = fit(fm, pairs, small_cfg(n_inducing=8))
        drops = np.diff(np.array(post.bound_trace))
        assert drops.min() >= -1e-6 * (1.0 + abs(post.bound_trace[-1]))

    def test_label_flip_negates_posterior_mean(self):
        fm, ids = toy_matrix(14, 2, seed=7)
        rng = np.random.default_rng(1)
        pairs = [
            PairLabel(ids[i], ids[j], int(rng.integers(1, 3)))
            for i, j in rng.choice(14, size=(40, 2), replace=True)
            if i != j
        ]
        flipped = [PairLabel(p.loser_id, p.winner_id, p.count) for p in pairs]
        cfg = small_cfg(lengthscales=0.9, n_inducing=14)
        p1 = fit(fm, pairs, cfg)
        p2 = fit(fm, flipped, cfg)
        assert np.max(np.abs(p1.mean + p2.mean)) < 1e-6

    def test_monotone_evidence(self):
        # appending one more consistent label never shrinks the winner's lead
        rng = np.random.default_rng(21)
        for trial in range(20):
            n = int(rng.integers(4, 9))
            fm, ids = toy_matrix(n, 2, seed=100 + trial)
            pairs = [
                PairLabel(ids[i], ids[j])
                for i, j in rng.choice(n, size=(3 * n, 2), replace=True)
                if i != j
            ]
            if not pairs:
                continue
            a, b = pairs[0].winner_id, pairs[0].loser_id
            cfg = small_cfg(n_inducing=n, max_iters=400, tol=1e-9, seed=trial)
            before = fit(fm, pairs, cfg)
            after = fit(fm, pairs + [PairLabel(a, b)], cfg)
            gap = lambda post: (
                predict(post, fm).mean_of(a) - predict(post, fm).mean_of(b)
            )
            assert gap(after) >= gap(before) - 1e-6


class TestBoundGradient:
    def test_mean_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(17)
        fm, ids = toy_matrix(10, 2, seed=13)
        pairs = [
            PairLabel(ids[i], ids[j], int(rng.integers(1, 3)))
            for i, j in rng.choice(10, size=(25, 2), replace=True)
            if i != j
        ]
        cfg = small_cfg(n_inducing=5)
        Z = fm.rows[:5].copy()
        ws = SviWorkspace(fm, pairs, cfg, np.array([0.8, 1.1]), Z)

        mean = rng.standard_normal(5) * 0.5
        M = rng.standard_normal((5, 5)) * 0.2
        cov = M @ M.T + 0.5 * np.eye(5)

        analytic = ws.bound_mean_grad(mean, cov)
        h = 1e-6
        numeric = np.zeros_like(mean)
        for k in range(len(mean)):
            e = np.zeros_like(mean)
            e[k] = h
            numeric[k] = (ws.bound(mean + e, cov) - ws.bound(mean - e, cov)) / (2 * h)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
        assert rel.max() < 1e-4


class TestPredict:
    def fitted(self, n=20, dim=2, seed=4, **kw):
        fm, ids = toy_matrix(n, dim, seed=seed)
        u = fm.rows[:, 0]
        pairs = noise_free_pairs(ids, u)
        post = fit(fm, pairs, small_cfg(n_inducing=kw.pop("n_inducing", 8), **kw))
        return fm, ids, post

    def test_interpolates_variational_mean_at_inducing_inputs(self):
        _, _, post = self.fitted()
        zfm = FeatureMatrix(
            [f"z{i}" for i in range(post.inducing_inputs.shape[0])],
            post.inducing_inputs,
        )
        pred = predict(post, zfm)
        for i in range(len(zfm)):
            assert pred.mean_of(f"z{i}") == pytest.approx(post.mean[i], abs=1e-6)

    def test_far_point_reverts_to_prior(self):
        _, _, post = self.fitted()
        far = FeatureMatrix(["far"], np.full((1, 2), 50.0))
        pred = predict(post, far)
        assert abs(pred.mean_of("far")) < 1e-3
        assert pred.variance_of("far") == pytest.approx(post.signal_var, abs=1e-3)

    def test_variances_nonnegative(self):
        fm, _, post = self.fitted()
        pred = predict(post, fm)
        assert all(v >= 0 for _, v in pred.entries.values())

    def test_dimension_mismatch_rejected(self):
        _, _, post = self.fitted()
        with pytest.raises(GpplError):
            predict(post, FeatureMatrix(["x"], np.zeros((1, 5))))

    def test_sparse_matches_exact_reference_ranking(self):
        rhos = []
        for seed in range(3):
            rng = np.random.default_rng(seed)
            fm, ids = toy_matrix(30, 2, seed=40 + seed)
            u = fm.rows[:, 0] + 0.3 * fm.rows[:, 1]
            pairs = [
                PairLabel(ids[i], ids[j]) if u[i] > u[j] else PairLabel(ids[j], ids[i])
                for i, j in rng.choice(30, size=(120, 2), replace=True)
                if i != j
            ]
            cfg = small_cfg(n_inducing=20, seed=seed)
            sparse = fit(fm, pairs, cfg)
            sp = predict(sparse, fm)
            ex = fit_exact_reference(fm, pairs, cfg)
            sv = [sp.mean_of(d) for d in ids]
            ev = [ex.mean_of(d) for d in ids]
            rhos.append(spearmanr(sv, ev).statistic)
        assert np.median(rhos) >= 0.95


class TestExactReference:
    def test_zero_pairs_rejected(self):
        fm, _ = toy_matrix(5, 2)
        with pytest.raises(GpplError):
            fit_exact_reference(fm, [], small_cfg())

    def test_guard_on_document_count(self):
        fm, ids = toy_matrix(201, 2)
        with pytest.raises(GpplError):
            fit_exact_reference(fm, [PairLabel(ids[0], ids[1])], small_cfg())

    def test_symmetric_evidence_keeps_means_equal(self):
        fm, ids = toy_matrix(4, 2, seed=8)
        pairs = [PairLabel(ids[0], ids[1], 3), PairLabel(ids[1], ids[0], 3)]
        pred = fit_exact_reference(fm, pairs, small_cfg())
        assert pred.mean_of(ids[0]) == pytest.approx(pred.mean_of(ids[1]), abs=1e-6)

    def test_single_pair_orders_posterior(self):
        fm, ids = toy_matrix(2, 2, seed=1)
        pred = fit_exact_reference(fm, [PairLabel(ids[0], ids[1])], small_cfg())
        assert pred.mean_of(ids[0]) > pred.mean_of(ids[1])

    def test_exhaustive_noise_free_recovery(self):
        for seed in range(5):
            fm, ids = toy_matrix(30, 1, seed=seed)
            u = fm.rows[:, 0]
            pred = fit_exact_reference(
                fm, noise_free_pairs(ids, u), small_cfg(sigma2=0.3, seed=seed)
            )
            means = [pred.mean_of(d) for d in ids]
            assert spearmanr(means, u).statistic == pytest.approx(1.0, abs=1e-12)

    def test_doubling_counts_never_shrinks_the_gap(self):
        fm, ids = toy_matrix(2, 2, seed=5)
        gap = lambda pred: pred.mean_of(ids[0]) - pred.mean_of(ids[1])
        g1 = gap(fit_exact_reference(fm, [PairLabel(ids[0], ids[1], 1)], small_cfg()))
        g2 = gap(fit_exact_reference(fm, [PairLabel(ids[0], ids[1], 2)], small_cfg()))
        assert abs(g2) >= abs(g1) - 1e-9


class TestPosteriorContainer:
    def test_round_trip(self, tmp_path):
        fm, ids = toy_matrix(10, 2, seed=6)
        pairs = noise_free_pairs(ids, fm.rows[:, 0])
        post = fit(fm, pairs, small_cfg(n_inducing=6))
        path = tmp_path / "model.gppl"
        save_posterior(post, path)
        loaded = load_posterior(path)
        np.testing.assert_array_equal(loaded.mean, post.mean)
        np.testing.assert_array_equal(loaded.cov, post.cov)
        np.testing.assert_array_equal(loaded.inducing_inputs, post.inducing_inputs)
        p1 = predict(post, fm)
        p2 = predict(loaded, fm)
        for d in ids:
            assert p1.mean_of(d) == p2.mean_of(d)

    def test_posterior_invariants_enforced(self):
        with pytest.raises(GpplError):
            GpplPosterior(
                inducing_inputs=np.zeros((2, 1)),
                mean=np.array([0.0, np.inf]),
                cov=np.eye(2),
                signal_var=1.0,
                lengthscales=np.ones(1),
                sigma2=1.0,
                jitter=1e-6,
            )
        with pytest.raises(GpplError):
            GpplPosterior(
                inducing_inputs=np.zeros((2, 1)),
                mean=np.zeros(2),
                cov=np.array([[1.0, 0.5], [0.5, -1.0]]),
                signal_var=1.0,
                lengthscales=np.ones(1),
                sigma2=1.0,
                jitter=1e-6,
            )


class TestConfig:
    def test_positivity_validation(self):
        with pytest.raises(GpplError):
            GpplConfig(sigma2=0.0)
        with pytest.raises(GpplError):
            GpplConfig(n_inducing=0)
        with pytest.raises(GpplError):
            GpplConfig(step_size=1.5)
