"""Loss and metric contracts against hand-expanded and brute-force oracles."""

import numpy as np
import pytest

from scanseg import autodiff as ad
from scanseg import objective as obj
from scanseg.rng import Rng


class TestCeSmoothed:
    def test_uniform_logits_log_k(self):
        logits = np.zeros((2, 3, 2, 2))
        target = np.array([[[0, 1], [2, 0]], [[1, 1], [2, 2]]])
        loss = obj.ce_smoothed(logits, target, None, eps=0.0)
        assert float(loss) == pytest.approx(np.log(3), rel=1e-12)

    def test_confident_correct_goes_to_zero(self):
        target = np.zeros((1, 2, 2), dtype=int)
        logits = np.zeros((1, 2, 2, 2))
        logits[:, 0] = 50.0
        loss = obj.ce_smoothed(logits, target, None, eps=0.0)
        assert float(loss) < 1e-20

    def test_hand_expanded_oracle_2x2_k3(self):
        rng = Rng(61)
        logits = rng.normal((1, 3, 2, 2)) * 2
        target = np.array([[[0, 2], [1, 1]]])
        weights = np.array([1.0, 0.5, 2.0])
        eps = 0.1
        acc = np.longdouble(0)
        for r in range(2):
            for c in range(2):
                z = logits[0, :, r, c].astype(np.longdouble)
                p = np.exp(z) / np.exp(z).sum()
                q = np.full(3, eps / 3, dtype=np.longdouble)
                q[target[0, r, c]] += 1 - eps
                acc += weights[target[0, r, c]] * -(q * np.log(p)).sum()
        want = float(acc / 4)
        got = float(obj.ce_smoothed(logits, target, weights, eps))
        assert got == pytest.approx(want, rel=1e-10)

    def test_out_of_range_target_rejected(self):
        with pytest.raises(ValueError, match="out of range"):
            obj.ce_smoothed(np.zeros((1, 2, 1, 1)), np.array([[[2]]]), None)

    def test_spatial_permutation_invariance(self):
        rng = Rng(62)
        logits = rng.normal((1, 3, 2, 4))
        target = rng.integers(0, 3, (1, 2, 4))
        perm = Rng(63).permutation(8)
        lp = logits.reshape(1, 3, 8)[:, :, perm].reshape(1, 3, 2, 4)
        tp = target.reshape(1, 8)[:, perm].reshape(1, 2, 4)
        a = float(obj.ce_smoothed(logits, target, None))
        b = float(obj.ce_smoothed(lp, tp, None))
        assert a == pytest.approx(b, rel=1e-12)


class TestDiceLoss:
    def test_perfect_prediction_zero(self):
        target = np.array([[[0, 1], [1, 0]]])
        probs = obj._one_hot(target, 2, np.float64)
        assert float(obj.dice_loss(probs, target)) == pytest.approx(0.0, abs=1e-15)

    def test_uniform_probs_closed_form(self):
        # K=2, n=4 pixels per class: dice_c = (n+1)/(1.5n+1) = 5/7 each
        target = np.array([[[0, 0, 0, 0], [1, 1, 1, 1]]])
        probs = np.full((1, 2, 2, 4), 0.5)
        loss = float(obj.dice_loss(probs, target, smooth=1.0))
        assert loss == pytest.approx(1.0 - 5.0 / 7.0, rel=1e-12)

    def test_empty_class_no_penalty(self):
        # class 2 appears nowhere: smoothing keeps its dice at 1
        target = np.array([[[0, 1], [1, 0]]])
        probs = np.zeros((1, 3, 2, 2))
        probs[:, :2] = obj._one_hot(target, 2, np.float64)
        loss = float(obj.dice_loss(probs, target, smooth=1.0))
        assert loss == pytest.approx(0.0, abs=1e-15)

    def test_gradcheck(self):
        rng = Rng(64)
        logits = ad.Parameter(rng.normal((1, 3, 2, 2)))
        target = np.array([[[0, 2], [1, 1]]])
        fn = lambda: obj.total_loss(logits, target, np.array([1.0, 0.7, 1.3]))
        report = ad.gradcheck(fn, {"logits": logits}, tol=1e-6)
        assert report.passed, str(report)


class TestTotalLoss:
    def test_zero_dice_weight_equals_ce(self):
        rng = Rng(65)
        logits = rng.normal((1, 3, 2, 2))
        target = rng.integers(0, 3, (1, 2, 2))
        a = float(obj.total_loss(logits, target, dice_weight=0.0))
        b = float(obj.ce_smoothed(logits, target))
        assert a == b

    def test_equals_sum_of_terms(self):
        rng = Rng(66)
        logits = rng.normal((2, 3, 3, 3))
        target = rng.integers(0, 3, (2, 3, 3))
        w = np.array([1.0, 0.8, 1.2])
        total = float(obj.total_loss(logits, target, w))
        from scanseg.tensor import softmax
        parts = float(obj.ce_smoothed(logits, target, w)) + float(
            obj.dice_loss(softmax(logits, axis=1), target))
        assert total == pytest.approx(parts, rel=1e-12)


class TestMiou:
    def test_identity(self):
        rng = Rng(67)
        m = rng.integers(0, 3, (8, 8))
        per, mean = obj.miou(m, m, 3)
        present = ~np.isnan(per)
        assert np.all(per[present] == 1.0) and mean == 1.0

    def test_worked_2x2_example(self):
        pred = np.array([[0, 1], [1, 1]])
        gt = np.array([[0, 1], [0, 1]])
        per, mean = obj.miou(pred, gt, 2)
        assert per[0] == pytest.approx(0.5)
        assert per[1] == pytest.approx(2.0 / 3.0)
        assert mean == pytest.approx(7.0 / 12.0)

    def test_disjoint_maps(self):
        pred = np.zeros((3, 3), dtype=int)
        gt = np.ones((3, 3), dtype=int)
        per, mean = obj.miou(pred, gt, 2)
        assert per[0] == 0.0 and per[1] == 0.0 and mean == 0.0

    def test_absent_class_excluded(self):
        pred = np.zeros((2, 2), dtype=int)
        gt = np.zeros((2, 2), dtype=int)
        per, mean = obj.miou(pred, gt, 3)
        assert mean == 1.0 and np.isnan(per[1]) and np.isnan(per[2])

    def test_symmetry(self):
        rng = Rng(68)
        a = rng.integers(0, 4, (10, 10))
        b = rng.integers(0, 4, (10, 10))
        assert obj.miou(a, b, 4)[1] == pytest.approx(obj.miou(b, a, 4)[1])

    def test_confusion_merge(self):
        rng = Rng(69)
        a1, g1 = rng.integers(0, 3, (6, 6)), rng.integers(0, 3, (6, 6))
        a2, g2 = rng.integers(0, 3, (6, 6)), rng.integers(0, 3, (6, 6))
        merged = obj.confusion_matrix(a1, g1, 3) + obj.confusion_matrix(a2, g2, 3)
        whole = obj.confusion_matrix(np.concatenate([a1.ravel(), a2.ravel()]),
                                     np.concatenate([g1.ravel(), g2.ravel()]), 3)
        np.testing.assert_array_equal(merged, whole)


def boundary_oracle(pred, gt, n_classes, t):
    """Pixel-set brute force: contour by neighbor checks, band by pairwise
    L-inf distance, all in integer arithmetic."""
    h, w = pred.shape

    def band(m, c):
        mask = m == c
        contour = []
        for r in range(h):
            for s in range(w):
                if not mask[r, s]:
                    continue
                if r == 0 or s == 0 or r == h - 1 or s == w - 1:
                    contour.append((r, s))
                elif not (mask[r - 1, s] and mask[r + 1, s]
                          and mask[r, s - 1] and mask[r, s + 1]):
                    contour.append((r, s))
        out = set()
        for r in range(h):
            for s in range(w):
                if mask[r, s] and any(max(abs(r - a), abs(s - b)) <= t
                                      for a, b in contour):
                    out.add((r, s))
        return out

    inter = np.zeros(n_classes, dtype=np.int64)
    union = np.zeros(n_classes, dtype=np.int64)
    for c in range(n_classes):
        bp, bg = band(pred, c), band(gt, c)
        inter[c] = len(bp & bg)
        union[c] = len(bp | bg)
    return inter, union


class TestBoundaryIou:
    def test_identity(self):
        rng = Rng(70)
        m = rng.integers(0, 3, (8, 8))
        per, mean = obj.boundary_iou(m, m, 3, t=2)
        present = ~np.isnan(per)
        assert np.all(per[present] == 1.0) and mean == 1.0

    def test_distant_single_pixels_zero(self):
        t = 2
        pred = np.zeros((12, 12), dtype=int)
        gt = np.zeros((12, 12), dtype=int)
        pred[1, 1] = 1
        gt[10, 10] = 1  # L-inf distance 9 > 2t+1
        per, _ = obj.boundary_iou(pred, gt, 2, t=t)
        assert per[1] == 0.0

    def test_shifted_square_matches_brute_force(self):
        pred = np.zeros((8, 8), dtype=int)
        gt = np.zeros((8, 8), dtype=int)
        pred[2:6, 2:6] = 1
        gt[3:7, 2:6] = 1
        for t in (1, 2, 3):
            inter, union = obj.boundary_counts(pred, gt, 2, t)
            oi, ou = boundary_oracle(pred, gt, 2, t)
            np.testing.assert_array_equal(inter, oi)
            np.testing.assert_array_equal(union, ou)

    def test_random_maps_match_brute_force(self):
        rng = Rng(71)
        for trial in range(10):
            k = 2 + trial % 3
            pred = rng.integers(0, k, (9, 9))
            gt = rng.integers(0, k, (9, 9))
            t = 1 + trial % 3
            inter, union = obj.boundary_counts(pred, gt, k, t)
            oi, ou = boundary_oracle(pred, gt, k, t)
            np.testing.assert_array_equal(inter, oi)
            np.testing.assert_array_equal(union, ou)

    def test_negative_tolerance_rejected(self):
        with pytest.raises(ValueError, match="t"):
            obj.boundary_iou(np.zeros((2, 2), int), np.zeros((2, 2), int), 2, t=-1)

    def test_large_t_reduces_to_region_iou(self):
        rng = Rng(72)
        pred = rng.integers(0, 3, (8, 8))
        gt = rng.integers(0, 3, (8, 8))
        per_b, mean_b = obj.boundary_iou(pred, gt, 3, t=8)
        per_r, mean_r = obj.miou(pred, gt, 3)
        np.testing.assert_allclose(per_b, per_r, rtol=1e-12)
        assert mean_b == pytest.approx(mean_r)

    def test_symmetry(self):
        rng = Rng(73)
        a = rng.integers(0, 3, (8, 8))
        b = rng.integers(0, 3, (8, 8))
        assert obj.boundary_iou(a, b, 3, 2)[1] == pytest.approx(
            obj.boundary_iou(b, a, 3, 2)[1])


class TestClassWeights:
    def test_mean_one_and_ordering(self):
        masks = [np.array([[0, 0], [0, 1]]), np.array([[0, 0], [1, 2]])]
        w = obj.class_weights(masks, 3)
        assert w.mean() == pytest.approx(1.0)
        assert w[0] < w[1] < w[2]  # rarer classes get larger weights

    def test_scale_invariance(self):
        masks = [np.array([[0, 1], [1, 2]])]
        doubled = [np.array([[0, 1], [1, 2]])] * 2
        np.testing.assert_allclose(obj.class_weights(masks, 3),
                                   obj.class_weights(doubled, 3), rtol=1e-12)

    def test_floor_keeps_finite(self):
        w = obj.class_weights([np.zeros((4, 4), dtype=int)], 3)
        assert np.all(np.isfinite(w))
