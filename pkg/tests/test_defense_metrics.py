import numpy as np
import pytest

from hsiadv.cube import extract_patches, make_synthetic_scene, split
from hsiadv.defenses import (
    RandomNoiseDefense, SpectralSmoothingDefense, defend_noise, defend_spectral_filter,
)
from hsiadv.metrics import (
    ConfusionMatrix, average_accuracy, confusion_matrix, evaluate, kappa, overall_accuracy,
)
from hsiadv.models import CNNClassifier


class TestNoiseDefense:
    def test_zero_intensity_is_identity(self, rng):
        x = rng.random((3, 5, 5)).astype(np.float32)
        assert np.array_equal(defend_noise(x, 0.0, seed=1), x)

    def test_bounded_change_and_range(self, rng):
        x = rng.random((4, 8, 8)).astype(np.float32)
        out = defend_noise(x, 0.1, seed=2)
        assert np.absolute(out - x).max() <= 0.1 + 1e-7
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert out.shape == x.shape

    def test_noise_mean_near_zero(self):
        # 1e6 draws away from the clip boundary: empirical mean within 1e-3
        x = np.full((1, 1000, 1000), 0.5, dtype=np.float32)
        out = defend_noise(x, 0.1, seed=3)
        assert abs(float((out - x).mean())) <= 1e-3

    def test_deterministic_under_seed(self, rng):
        x = rng.random((2, 6, 6)).astype(np.float32)
        assert np.array_equal(defend_noise(x, 0.05, seed=9), defend_noise(x, 0.05, seed=9))


class TestSpectralFilter:
    def test_window_one_is_identity(self, rng):
        x = rng.random((5, 4, 4)).astype(np.float32)
        assert np.array_equal(defend_spectral_filter(x, 1), x)

    def test_constant_spectrum_unchanged(self):
        x = np.full((6, 3, 3), 0.42, dtype=np.float32)
        assert np.allclose(defend_spectral_filter(x, 3), x, atol=1e-7)

    def test_hand_computed_edge_truncation(self):
        spectrum = np.array([0.0, 1.0, 0.0, 1.0, 0.0], dtype=np.float32)
        x = spectrum[:, None, None]
        out = defend_spectral_filter(x, 3)[:, 0, 0]
        assert np.allclose(out, [0.5, 1 / 3, 2 / 3, 1 / 3, 0.5], atol=1e-7)

    def test_even_window_rejected(self, rng):
        with pytest.raises(ValueError):
            defend_spectral_filter(rng.random((4, 2, 2)), 2)

    def test_batch_axis_handling(self, rng):
        X = rng.random((3, 5, 4, 4)).astype(np.float32)
        out = defend_spectral_filter(X, 3)
        assert out.shape == X.shape
        single = defend_spectral_filter(X[1], 3)
        assert np.allclose(out[1], single, atol=1e-7)

    def test_estimator_wrappers(self, rng):
        X = rng.random((2, 7, 6, 6)).astype(np.float32)
        a = RandomNoiseDefense(intensity=0.1, seed=4).fit(X).transform(X)
        b = SpectralSmoothingDefense(window=3).fit(X).transform(X)
        for out in (a, b):
            assert out.shape == X.shape
            assert out.min() >= 0.0 and out.max() <= 1.0


class TestMetrics:
    def test_perfect_predictions(self):
        cm = confusion_matrix([1, 2, 3] * 4, [1, 2, 3] * 4, (1, 2, 3))
        assert overall_accuracy(cm) == 100.0
        aa, excluded = average_accuracy(cm)
        assert aa == 100.0 and excluded == ()
        assert kappa(cm) == 100.0

    def test_hand_computed_confusion(self):
        # [[5,0],[2,3]]: OA 80, AA 80, kappa 60
        cm = ConfusionMatrix(np.array([[5, 0], [2, 3]]), (1, 2))
        assert abs(overall_accuracy(cm) - 80.0) < 1e-9
        aa, _ = average_accuracy(cm)
        assert abs(aa - 80.0) < 1e-9
        assert abs(kappa(cm) - 60.0) < 1e-9

    def test_second_hand_computed_case(self):
        # [[8,1,1],[2,6,2],[0,1,9]]: OA = 23/30; recalls .8,.6,.9
        cm = ConfusionMatrix(np.array([[8, 1, 1], [2, 6, 2], [0, 1, 9]]), (1, 2, 3))
        assert abs(overall_accuracy(cm) - 100 * 23 / 30) < 1e-9
        aa, _ = average_accuracy(cm)
        assert abs(aa - 100 * (0.8 + 0.6 + 0.9) / 3) < 1e-9
        p_o = 23 / 30
        p_e = (10 * 10 + 10 * 8 + 10 * 12) / 900
        assert abs(kappa(cm) - 100 * (p_o - p_e) / (1 - p_e)) < 1e-9

    def test_random_predictions_kappa_near_zero(self):
        rng = np.random.default_rng(7)
        n = 100_000
        y = rng.integers(1, 3, size=n)
        p = rng.integers(1, 3, size=n)
        cm = confusion_matrix(y, p, (1, 2))
        assert abs(kappa(cm)) <= 2.0

    def test_kappa_100_iff_diagonal(self):
        diag = ConfusionMatrix(np.diag([3, 4, 5]), (1, 2, 3))
        assert kappa(diag) == 100.0
        off = ConfusionMatrix(np.array([[3, 1], [0, 4]]), (1, 2))
        assert kappa(off) < 100.0

    def test_absent_class_excluded_and_flagged(self):
        cm = ConfusionMatrix(np.array([[4, 0, 0], [1, 3, 0], [0, 0, 0]]), (1, 2, 3))
        aa, excluded = average_accuracy(cm)
        assert excluded == (3,)
        assert abs(aa - 100 * (1.0 + 0.75) / 2) < 1e-9

    def test_unknown_label_rejected(self):
        with pytest.raises(ValueError):
            confusion_matrix([1, 5], [1, 1], (1, 2))


class TestEvaluate:
    def test_order_invariance_and_fields(self):
        cube, grid = make_synthetic_scene(3, 6, 32, 32, seed=2)
        ps = extract_patches(cube, grid, patch_size=8, max_per_class=30, seed=2)
        train, test = split(ps, 0.6, seed=2)
        clf = CNNClassifier("cnn-a", epochs=8, seed=2).fit(train.values, train.labels)
        r1 = evaluate(clf, test)
        perm = np.random.default_rng(0).permutation(len(test))
        r2 = evaluate(clf, test.subset(perm))
        assert r1.oa == r2.oa and r1.aa == r2.aa and r1.kappa == r2.kappa
        assert np.array_equal(r1.confusion.counts, r2.confusion.counts)
        assert 0.0 <= r1.oa <= 100.0
