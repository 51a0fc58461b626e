import numpy as np
import pytest

from prefrank.bws import ScoreVector
from prefrank.evaluation import (
    EvalError,
    build_report,
    emit_report,
    mrd_segments,
    parse_report,
    segment_sizes,
    shift_scores,
    spearman,
)


def sv(values, provenance="bws"):
    return ScoreVector({f"d{i:02d}": float(v) for i, v in enumerate(values)}, provenance)


def average_ranks(values):
    """Fractional ranking oracle: ties share the mean of their positions."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pearson(a, b):
    a = np.asarray(a) - np.mean(a)
    b = np.asarray(b) - np.mean(b)
    return float(a @ b / np.sqrt((a @ a) * (b @ b)))


class TestSpearman:
    def test_identity(self):
        gold = sv([0.1, 0.4, -0.2, 0.9])
        assert spearman(gold, gold) == pytest.approx(1.0, abs=1e-12)

    def test_reversal(self):
        gold = sv([1, 2, 3, 4])
        pred = sv([-1, -2, -3, -4])
        assert spearman(pred, gold) == pytest.approx(-1.0, abs=1e-12)

    def test_single_swap_closed_form(self):
        # ranks (1,2,3,5,4) against (1,2,3,4,5): 1 - 6*2 / (5*24) = 0.9
        gold = sv([1, 2, 3, 4, 5])
        pred = sv([1, 2, 3, 5, 4])
        assert spearman(pred, gold) == pytest.approx(0.9, abs=1e-12)

    def test_tie_handling_matches_fractional_rank_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(3, 30))
            p = rng.integers(0, 5, size=n).astype(float)  # many ties
            g = rng.integers(0, 5, size=n).astype(float)
            if len(set(p)) < 2 or len(set(g)) < 2:
                continue
            expected = pearson(average_ranks(p), average_ranks(g))
            got = spearman(sv(p), sv(g))
            assert got == pytest.approx(expected, abs=1e-12)

    def test_invariant_under_increasing_transform(self):
        rng = np.random.default_rng(1)
        vals = rng.standard_normal(40)
        gold = sv(rng.standard_normal(40))
        base = spearman(sv(vals), gold)
        warped = spearman(sv(np.exp(2.0 * vals) + 3.0), gold)
        assert warped == pytest.approx(base, abs=1e-12)

    def test_coverage_mismatch(self):
        with pytest.raises(EvalError):
            spearman(sv([1, 2]), sv([1, 2, 3]))

    def test_needs_two_documents(self):
        with pytest.raises(EvalError):
            spearman(sv([1.0]), sv([2.0]))


class TestShiftScores:
    def test_endpoints_and_midpoint(self):
        shifted = shift_scores(sv([-1.0, 0.0, 1.0]))
        assert shifted["d00"] == 0.0
        assert shifted["d01"] == 0.5
        assert shifted["d02"] == 1.0

    def test_direct_substitution(self):
        assert shift_scores(sv([0.2]))["d00"] == pytest.approx(0.6, abs=1e-15)

    def test_out_of_range_rejected(self):
        with pytest.raises(EvalError):
            shift_scores(sv([1.2]))

    def test_order_preserved(self):
        rng = np.random.default_rng(2)
        vals = rng.uniform(-1, 1, size=30)
        before = sv(vals)
        after = shift_scores(before)
        order_before = sorted(before.entries, key=before.entries.get)
        order_after = sorted(after.entries, key=after.entries.get)
        assert order_before == order_after


def brute_force_mrd(pred: ScoreVector, gold: ScoreVector, n_segments):
    """O(n^2)-flavoured oracle: positions by explicit comparison counting."""
    ids = sorted(gold.ids())
    n = len(ids)

    def position(scores, d):
        return sum(
            1
            for other in ids
            if (scores[other], other) < (scores[d], d)
        )

    pos_gold = {d: position(gold, d) for d in ids}
    pos_pred = {d: position(pred, d) for d in ids}
    ordered = sorted(ids, key=lambda d: pos_gold[d])
    sizes = segment_sizes(n, n_segments)
    out, start = [], 0
    for size in sizes:
        members = ordered[start : start + size]
        out.append(sum(abs(pos_pred[d] - pos_gold[d]) for d in members) / (n * size))
        start += size
    return out


class TestMrdSegments:
    def test_perfect_ranking_is_zero(self):
        gold = sv(np.linspace(-1, 1, 20))
        assert mrd_segments(gold, gold) == [0.0] * 10

    def test_reversal_single_segment(self):
        # N=10 reversed: sum |2i - 9| / 100 = 0.5
        gold = sv(np.arange(10))
        pred = sv(-np.arange(10))
        assert mrd_segments(pred, gold, n_segments=1) == [pytest.approx(0.5, abs=1e-12)]

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(15):
            n = int(rng.integers(10, 51))
            gold = sv(rng.standard_normal(n))
            pred = sv(rng.standard_normal(n))
            got = mrd_segments(pred, gold)
            expected = brute_force_mrd(pred, gold, 10)
            np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_invariant_to_constant_shift(self):
        rng = np.random.default_rng(4)
        vals = rng.standard_normal(25)
        gold = sv(rng.standard_normal(25))
        base = mrd_segments(sv(vals), gold)
        shifted = mrd_segments(sv(vals + 123.0), gold)
        np.testing.assert_allclose(base, shifted, atol=0)

    def test_remainder_goes_to_earliest_segments(self):
        assert segment_sizes(23, 10) == [3, 3, 3, 2, 2, 2, 2, 2, 2, 2]
        assert segment_sizes(10, 10) == [1] * 10

    def test_requires_enough_documents(self):
        with pytest.raises(EvalError):
            mrd_segments(sv(np.arange(5)), sv(np.arange(5)))

    def test_coverage_mismatch(self):
        with pytest.raises(EvalError):
            mrd_segments(sv(np.arange(12)), sv(np.arange(13)))


class TestReports:
    def make_report(self, n=40, seed=5):
        rng = np.random.default_rng(seed)
        gold = sv(rng.uniform(-1, 1, size=n))
        pred = sv(np.clip(
            np.array([gold[d] for d in sorted(gold.ids())]) + rng.normal(0, 0.3, n),
            -1, 1,
        ), "directranker")
        return build_report(pred, gold, model_id="directranker", fraction=0.6, seed=seed)

    def test_round_trip_lossless(self, tmp_path):
        report = self.make_report()
        path = tmp_path / "report.txt"
        emit_report(report, path)
        loaded = parse_report(path)
        assert loaded == report

    def test_histogram_counts_sum_to_n_test(self):
        report = self.make_report()
        assert sum(c for _, _, c in report.histogram) == report.n_test

    def test_scatter_row_count(self):
        report = self.make_report()
        assert len(report.scatter) == report.n_test

    def test_unbounded_scores_are_rescaled_not_rejected(self):
        gold = sv(np.linspace(-1, 1, 15))
        pred = sv(np.linspace(-4, 7, 15), "gppl")  # raw utilities
        report = build_report(pred, gold)
        assert sum(c for _, _, c in report.histogram) == 15
        assert report.spearman == pytest.approx(1.0, abs=1e-12)

    def test_segment_count_enforced(self):
        from prefrank.evaluation import EvalReport

        with pytest.raises(EvalError):
            EvalReport(0.5, (0.0,) * 9, 10, (), ())
