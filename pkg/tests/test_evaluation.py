import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from perceptad.evaluation import (EvalReport, ScoredSample, anomaly_score, evaluate,
                                  roc_auc, roc_curve_points, score_batch)
from perceptad.features import compute_stats, make_fixed_random_extractor, unit_stats
from perceptad.model import Autoencoder, ModelConfig


def brute_force_auc(scores, labels):
    """O(n^2) pairwise oracle: anomalous > normal counts 1, ties 0.5."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestRocAuc:
    def test_hand_case(self):
        auc = roc_auc(scores=np.array([0.1, 0.4, 0.35, 0.8]),
                      labels=np.array([0, 0, 1, 1]))
        assert auc == pytest.approx(0.75, abs=1e-12)

    def test_perfect_separation(self):
        auc = roc_auc(scores=np.array([0.1, 0.2, 0.8, 0.9]),
                      labels=np.array([0, 0, 1, 1]))
        assert auc == 1.0

    def test_all_ties(self):
        auc = roc_auc(scores=np.ones(10), labels=np.array([0, 1] * 5))
        assert auc == pytest.approx(0.5)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            roc_auc(scores=np.array([0.1, 0.2]), labels=np.array([0, 0]))

    def test_matches_brute_force_randomized(self):
        rng = np.random.default_rng(0)
        for trial in range(200):
            n = rng.integers(4, 40)
            # tie-heavy sets: quantize scores to few distinct values
            levels = rng.integers(2, 8)
            scores = rng.integers(0, levels, n).astype(float) / levels
            labels = rng.integers(0, 2, n)
            if labels.sum() in (0, n):
                labels[0], labels[-1] = 0, 1
            fast = roc_auc(scores=scores, labels=labels)
            slow = brute_force_auc(scores, labels)
            assert fast == pytest.approx(slow, abs=1e-12)

    @given(st.lists(st.tuples(st.integers(0, 40), st.integers(0, 1)),
                    min_size=4, max_size=30))
    @settings(max_examples=50, deadline=None)
    def test_rank_invariance_and_complement(self, pairs):
        # quantized scores so the monotone transform cannot create new ties
        scores = np.array([p[0] for p in pairs], dtype=float) / 40.0
        labels = np.array([p[1] for p in pairs])
        if labels.sum() in (0, len(labels)):
            return
        auc = roc_auc(scores=scores, labels=labels)
        # strictly increasing transform leaves AUC unchanged
        auc2 = roc_auc(scores=np.exp(3 * scores), labels=labels)
        assert auc2 == pytest.approx(auc, abs=1e-9)
        # flipping labels maps AUC to 1 - AUC
        auc3 = roc_auc(scores=scores, labels=1 - labels)
        assert auc3 == pytest.approx(1.0 - auc, abs=1e-12)

    def test_from_scored_samples(self):
        samples = [ScoredSample("a", 0.1, 0), ScoredSample("b", 0.9, 1)]
        assert roc_auc(samples) == 1.0


def test_scored_sample_validation():
    with pytest.raises(ValueError):
        ScoredSample("x", 0.5, 2)
    with pytest.raises(ValueError):
        ScoredSample("x", float("nan"), 0)


@pytest.fixture(scope="module")
def tiny_setup():
    extractor = make_fixed_random_extractor(3, 2, (8, 16))
    model = Autoencoder(ModelConfig(target_resolution=16, bottleneck_dim=8,
                                    base_channels=8, min_channels=4), seed=0)
    model.grow()
    model.set_alpha(1.0)
    gen = torch.Generator().manual_seed(0)
    imgs = torch.rand(12, 1, 16, 16, generator=gen)
    stats = compute_stats(extractor, imgs, 1)
    return model, extractor, stats


class TestScoring:
    def test_score_reproducible(self, tiny_setup):
        model, extractor, stats = tiny_setup
        x = torch.rand(1, 16, 16, generator=torch.Generator().manual_seed(1))
        a = anomaly_score(model, extractor, stats, x, stage=1)
        b = anomaly_score(model, extractor, stats, x, stage=1)
        assert a == b

    def test_resolution_mismatch_rejected(self, tiny_setup):
        model, extractor, stats = tiny_setup
        with pytest.raises(ValueError):
            anomaly_score(model, extractor, stats, torch.rand(1, 8, 8), stage=1)

    def test_identity_model_scores_zero(self):
        class Identity:
            class config:
                target_resolution = 16

            def reconstruct(self, x, blend=None):
                return x

        extractor = make_fixed_random_extractor(3, 2, (8, 16))
        x = torch.rand(1, 16, 16, generator=torch.Generator().manual_seed(2))
        stats = unit_stats(1, 16)
        assert anomaly_score(Identity(), extractor, stats, x, stage=1) == 0.0


class TestEvaluate:
    def test_report_fields_and_two_point_case(self, tiny_setup):
        model, extractor, stats = tiny_setup
        gen = torch.Generator().manual_seed(3)
        imgs = torch.rand(4, 1, 16, 16, generator=gen)
        labels = np.array([0, 0, 1, 1])
        report = evaluate(model, extractor, stats, imgs, labels, stage=1)
        assert 0.0 <= report.roc_auc <= 1.0
        assert report.n_normal == 2 and report.n_anomalous == 2
        assert report.roc_curve[0] == (0.0, 0.0)
        assert report.roc_curve[-1] == (1.0, 1.0)

    def test_permutation_invariance(self, tiny_setup):
        model, extractor, stats = tiny_setup
        gen = torch.Generator().manual_seed(4)
        imgs = torch.rand(8, 1, 16, 16, generator=gen)
        labels = np.array([0, 1] * 4)
        a = evaluate(model, extractor, stats, imgs, labels, stage=1).roc_auc
        perm = np.array([3, 1, 4, 0, 7, 5, 2, 6])
        b = evaluate(model, extractor, stats, imgs[perm], labels[perm], stage=1).roc_auc
        assert a == pytest.approx(b, abs=1e-12)

    def test_single_class_rejected(self, tiny_setup):
        model, extractor, stats = tiny_setup
        imgs = torch.rand(2, 1, 16, 16)
        with pytest.raises(ValueError):
            evaluate(model, extractor, stats, imgs, np.array([0, 0]), stage=1)


def test_roc_curve_monotone():
    rng = np.random.default_rng(1)
    scores, labels = rng.random(50), rng.integers(0, 2, 50)
    labels[0], labels[1] = 0, 1
    pts = roc_curve_points(scores, labels)
    fprs = [p[0] for p in pts]
    tprs = [p[1] for p in pts]
    assert fprs == sorted(fprs) and tprs == sorted(tprs)
