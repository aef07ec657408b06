import numpy as np
import pytest

from vog import nn
from vog.engine import VogRecord
from vog.evaluation.ood import (aupr, auroc, msp_scores, ood_metrics, ood_percentile_representation,
                                vog_detection_scores)


def brute_auroc(pos, neg):
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def brute_ap(pos, neg):
    """Enumerate every distinct threshold; predict positive when score >= threshold."""
    scores = list(pos) + list(neg)
    labels = [True] * len(pos) + [False] * len(neg)
    total = len(pos)
    area, prev_recall = 0.0, 0.0
    for tau in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= tau and y)
        k = sum(1 for s in scores if s >= tau)
        recall = tp / total
        area += (recall - prev_recall) * (tp / k)
        prev_recall = recall
    return area


def random_instance(rng):
    n1, n2 = rng.integers(1, 201, size=2)
    if rng.random() < 0.5:
        # coarse values force many ties
        return rng.integers(0, 8, size=n1).astype(float), rng.integers(0, 8, size=n2).astype(float)
    return rng.normal(0.3, 1, size=n1), rng.normal(size=n2)


class TestAuroc:
    def test_examples(self):
        assert auroc([0.9, 0.8], [0.1, 0.2]) == 1.0
        assert auroc([0.8, 0.3], [0.5, 0.1]) == 0.75
        assert auroc([1, 2, 2, 3], [3, 2, 1, 2]) == 0.5

    def test_brute_force_bit_exact(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            pos, neg = random_instance(rng)
            assert auroc(pos, neg) == brute_auroc(pos, neg)

    def test_complement(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            pos, neg = random_instance(rng)
            assert abs(auroc(pos, neg) + auroc(neg, pos) - 1.0) < 1e-12

    def test_permutation_invariant(self):
        rng = np.random.default_rng(2)
        pos, neg = rng.normal(size=30), rng.normal(size=40)
        assert auroc(pos, neg) == auroc(rng.permutation(pos), rng.permutation(neg))

    def test_empty(self):
        with pytest.raises(ValueError):
            auroc([], [1.0])


class TestAupr:
    def test_perfect(self):
        assert aupr([0.9, 0.8], [0.1, 0.2], "in") == 1.0
        assert aupr([0.9, 0.8], [0.1, 0.2], "out") == 1.0

    def test_hand_example(self):
        # thresholds 0.8, 0.5, 0.3, 0.1: (P, R) = (1, 1/2), (1/2, 1/2), (2/3, 1), (1/2, 1)
        assert aupr([0.8, 0.3], [0.5, 0.1], "in") == pytest.approx(0.5 * 1 + 0.5 * 2 / 3, abs=1e-15)
        assert aupr([0.8, 0.3], [0.5, 0.1], "in") == pytest.approx(brute_ap([0.8, 0.3], [0.5, 0.1]), abs=1e-12)

    def test_out_mode_negates(self):
        pos, neg = [0.8, 0.3], [0.5, 0.1]
        assert aupr(pos, neg, "out") == pytest.approx(brute_ap([-0.5, -0.1], [-0.8, -0.3]), abs=1e-12)

    def test_exhaustive_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            pos, neg = random_instance(rng)
            assert abs(aupr(pos, neg, "in") - brute_ap(pos, neg)) < 1e-12
            assert abs(aupr(pos, neg, "out") - brute_ap(-neg, -pos)) < 1e-12

    def test_base_rate_limit(self):
        rng = np.random.default_rng(4)
        s = rng.random(20000)
        assert abs(aupr(s[:10000], s[10000:]) - 0.5) < 0.05

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            aupr([1.0], [0.0], "both")


class TestMetrics:
    def test_bundle(self):
        m = ood_metrics([0.9, 0.8, 0.7], [0.1])
        assert (m.auroc, m.aupr_in, m.aupr_out) == (1.0, 1.0, 1.0)
        assert (m.auroc_base, m.aupr_in_base, m.aupr_out_base, m.n_in, m.n_out) == (0.5, 0.75, 0.25, 3, 1)

    def test_detection_score_is_negated_vog(self):
        recs = [VogRecord(1, 0, 0, 0.0, normalized_vog=2.0), VogRecord(0, 0, 0, 0.0, normalized_vog=-1.0)]
        assert vog_detection_scores(recs).tolist() == [1.0, -2.0]


def logit_net(z):
    z = np.asarray(z, dtype=np.float64)
    spec = nn.ModelSpec((nn.FLATTEN, nn.dense(1, z.size)), (1, 1, 1), z.size)
    return nn.Params(spec, (np.zeros((z.size, 1)), z))


class TestMsp:
    def test_confident(self):
        want = 1.0 / (1.0 + 2.0 * np.exp(-10.0))
        assert msp_scores(logit_net([10, 0, 0]), np.zeros((1, 1, 1, 1)))[0] == pytest.approx(want, rel=1e-14)
        assert 1.0 / (1.0 + np.exp(-10.0)) == pytest.approx(0.99995, abs=1e-5)  # two-class analogue

    def test_uniform(self):
        assert msp_scores(logit_net(np.zeros(10)), np.zeros((3, 1, 1, 1))) == pytest.approx([0.1] * 3, rel=1e-14)

    def test_shift_invariant(self):
        a = msp_scores(logit_net([1.0, 2.0, -1.0]), np.zeros((1, 1, 1, 1)))
        b = msp_scores(logit_net([101.0, 102.0, 99.0]), np.zeros((1, 1, 1, 1)))
        assert a[0] == pytest.approx(b[0], rel=1e-13)

    def test_chunking(self, small_mlp, rng):
        x = rng.normal(size=(9, 1, 2, 3))
        np.testing.assert_allclose(msp_scores(small_mlp, x, chunk=2), msp_scores(small_mlp, x), rtol=1e-14)


def recs(values, start=0):
    return [VogRecord(start + i, 0, 0, 0.0, normalized_vog=float(v)) for i, v in enumerate(values)]


class TestQuartiles:
    def test_separated(self):
        rows = ood_percentile_representation(recs(range(300)), recs(range(1000, 1100), start=300))
        assert [r.n_ood for r in rows] == [0, 0, 0, 100]
        assert rows[-1].fraction_of_ood == 1.0 and rows[-1].ood_share == 1.0

    def test_overflow_fills_top_down(self):
        rows = ood_percentile_representation(recs(range(20)), recs(range(100, 140), start=20))
        assert [r.n_ood for r in rows] == [0, 10, 15, 15]
        assert sum(r.size for r in rows) == 60

    def test_identical_distributions_roughly_uniform(self):
        rng = np.random.default_rng(5)
        n = 4000
        rows = ood_percentile_representation(recs(rng.normal(size=n)), recs(rng.normal(size=n), start=n))
        sigma = np.sqrt(n * 0.25 * 0.75)
        for r in rows:
            assert abs(r.n_ood - n / 4) < 3 * sigma

    def test_empty(self):
        with pytest.raises(ValueError):
            ood_percentile_representation([], recs([1.0]))
