"""Image quality metrics against loop oracles; detection metric behavior."""

import math

import numpy as np
import pytest

from srvd.boxes import BoundingBox
from srvd.errors import ShapeError
from srvd.metrics import (
    average_precision,
    evaluate_detections,
    f1_score,
    image_quality,
    match_detections,
    ms_ssim,
    psnr,
    roc_auc,
    uqi,
    vif,
)

from oracles import (
    ap_11point_ref,
    auc_pairwise_ref,
    ms_ssim_ref,
    uqi_ref,
    vif_ref,
)


def textured(seed, channels=3, side=48, lo=0.2, hi=0.8):
    """Bandlimited random image: smooth base plus mild grain."""
    rng = np.random.default_rng(seed)
    base = np.kron(rng.normal(size=(channels, side // 8, side // 8)), np.ones((8, 8)))
    img = base + 0.3 * rng.normal(size=(channels, side, side))
    img = img - img.min()
    return lo + (hi - lo) * img / img.max()


def degrade(img, seed, sigma):
    rng = np.random.default_rng(seed)
    return np.clip(img + rng.normal(0.0, sigma, size=img.shape), 0.0, 1.0)


class TestPsnr:
    def test_identical_is_infinite(self):
        img = textured(0)
        assert psnr(img, img) == math.inf

    def test_uniform_offset_hand_value(self):
        ref = np.full((1, 16, 16), 0.5)
        test = np.full((1, 16, 16), 0.6)
        np.testing.assert_allclose(psnr(ref, test), 20.0, rtol=1e-9)

    def test_tenfold_error_reduction_adds_twenty_db(self):
        ref = np.full((3, 16, 16), 0.5)
        rng = np.random.default_rng(1)
        err = rng.uniform(-0.1, 0.1, size=ref.shape)
        a = psnr(ref, ref + err)
        b = psnr(ref, ref + err / 10.0)
        np.testing.assert_allclose(b - a, 20.0, rtol=1e-9)

    def test_sixteenth_offset_hand_value(self):
        ref = np.zeros((1, 8, 8))
        test = np.full((1, 8, 8), 1.0 / 16.0)
        np.testing.assert_allclose(psnr(ref, test), 10.0 * math.log10(256.0), rtol=1e-12)

    def test_eight_bit_peak_shifts_by_constant(self):
        ref = textured(3)
        test = degrade(ref, 4, 0.05)
        np.testing.assert_allclose(
            psnr(ref, test, peak=255.0) - psnr(ref, test),
            20.0 * math.log10(255.0),
            rtol=1e-12,
        )

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((1, 8, 8)), np.zeros((1, 8, 9)))


class TestMsSsim:
    def test_identical_is_one(self):
        img = textured(2)
        np.testing.assert_allclose(ms_ssim(img, img), 1.0, rtol=0, atol=1e-12)

    def test_matches_loop_reference(self):
        """Separable filtering equals the window-by-window definition."""
        ref = textured(3, channels=3, side=48)
        test = degrade(ref, 4, 0.05)
        np.testing.assert_allclose(ms_ssim(ref, test), ms_ssim_ref(ref, test), rtol=1e-9)

    def test_matches_loop_reference_single_scale(self):
        """A 16px image leaves room for exactly one scale."""
        ref = textured(5, channels=1, side=16)
        test = degrade(ref, 6, 0.1)
        np.testing.assert_allclose(ms_ssim(ref, test), ms_ssim_ref(ref, test), rtol=1e-9)

    def test_monotone_in_noise(self):
        ref = textured(7)
        mild = ms_ssim(ref, degrade(ref, 8, 0.02))
        heavy = ms_ssim(ref, degrade(ref, 8, 0.25))
        assert 0.0 < heavy < mild < 1.0

    def test_too_small_raises(self):
        img = np.full((1, 10, 10), 0.5)
        with pytest.raises(ShapeError):
            ms_ssim(img, img)


class TestUqi:
    def test_identical_is_one(self):
        img = textured(9)
        np.testing.assert_allclose(uqi(img, img), 1.0, rtol=0, atol=1e-12)

    def test_matches_loop_reference(self):
        ref = textured(10, channels=3, side=24)
        test = degrade(ref, 11, 0.08)
        np.testing.assert_allclose(uqi(ref, test), uqi_ref(ref, test), rtol=1e-9)

    def test_constant_pair_degenerate_values(self):
        flat = np.full((1, 16, 16), 0.4)
        assert uqi(flat, flat.copy()) == 1.0
        assert uqi(flat, np.full((1, 16, 16), 0.6)) == 0.0

    def test_constant_reference_vs_texture_scores_zeroish(self):
        """Flat-vs-textured windows survive the skip rule but carry no covariance."""
        flat = np.full((1, 24, 24), 0.4)
        test = degrade(flat, 12, 0.1)
        assert abs(uqi(flat, test)) < 0.2

    def test_luminance_shift_penalized(self):
        ref = textured(13)
        shifted = np.clip(ref * 0.8, 0.0, 1.0)
        assert uqi(ref, shifted) < 0.99


class TestVif:
    def test_identical_is_one(self):
        img = textured(14, side=64)
        np.testing.assert_allclose(vif(img, img), 1.0, rtol=0, atol=1e-6)

    def test_matches_loop_reference(self):
        ref = textured(15, channels=1, side=64)
        test = degrade(ref, 16, 0.1)
        np.testing.assert_allclose(vif(ref, test), vif_ref(ref, test), rtol=1e-9)

    def test_heavy_noise_scores_low(self):
        ref = textured(17, side=64)
        noisy = degrade(ref, 18, 0.5)
        assert vif(ref, noisy) < 0.3

    def test_monotone_in_noise(self):
        ref = textured(19, side=64)
        mild = vif(ref, degrade(ref, 20, 0.02))
        heavy = vif(ref, degrade(ref, 20, 0.3))
        assert heavy < mild <= 1.0 + 1e-9

    def test_constant_pair_degenerate_values(self):
        flat = np.full((1, 64, 64), 0.4)
        assert vif(flat, flat.copy()) == 1.0
        assert vif(flat, np.full((1, 64, 64), 0.6)) == 0.0


class TestMatchDetections:
    def test_duplicate_claims_one_tp_one_fp(self):
        gt = [BoundingBox(0.5, 0.5, 0.2, 0.2)]
        preds = [
            BoundingBox(0.5, 0.5, 0.2, 0.2, confidence=0.9),
            BoundingBox(0.51, 0.5, 0.2, 0.2, confidence=0.8),
        ]
        ranked, unmatched = match_detections(preds, gt, 0.5)
        assert ranked == [(0.9, True), (0.8, False)]
        assert unmatched == 0

    def test_iou_threshold_inclusive(self):
        gt = [BoundingBox(0.25, 0.5, 0.5, 0.5)]
        pred = BoundingBox(0.75, 0.5, 0.5, 0.5, confidence=0.9)
        from srvd.boxes import iou as iou_fn

        at = iou_fn(pred, gt[0])
        ranked, _ = match_detections([pred], gt, at)
        assert ranked[0][1] is True
        ranked, _ = match_detections([pred], gt, at + 1e-9)
        assert ranked[0][1] is False

    def test_confidence_priority_over_order(self):
        gt = [BoundingBox(0.5, 0.5, 0.2, 0.2)]
        preds = [
            BoundingBox(0.52, 0.5, 0.2, 0.2, confidence=0.3),
            BoundingBox(0.5, 0.5, 0.2, 0.2, confidence=0.9),
        ]
        ranked, _ = match_detections(preds, gt, 0.5)
        assert ranked == [(0.9, True), (0.3, False)]

    def test_unmatched_ground_truth_counted(self):
        gt = [BoundingBox(0.2, 0.2, 0.1, 0.1), BoundingBox(0.8, 0.8, 0.1, 0.1)]
        _, unmatched = match_detections([], gt, 0.5)
        assert unmatched == 2

    def test_requires_confidence(self):
        with pytest.raises(ValueError):
            match_detections([BoundingBox(0.5, 0.5, 0.1, 0.1)], [], 0.5)


class TestAveragePrecision:
    def test_fp_then_tp_halves_ap(self):
        """One FP at 0.9 and one TP at 0.8 over a single truth box."""
        ap, points = average_precision([(0.9, False), (0.8, True)], n_gt=1)
        assert ap == 0.5
        assert points == [(0.0, 0.0), (1.0, 0.5)]

    def test_perfect_detections(self):
        ranked = [(0.9, True), (0.8, True), (0.7, True)]
        ap, _ = average_precision(ranked, n_gt=3)
        assert ap == 1.0

    def test_matches_threshold_sweep_reference(self):
        rng = np.random.default_rng(21)
        for trial in range(20):
            n = int(rng.integers(1, 40))
            ranked = [
                (float(rng.uniform(0, 1)), bool(rng.random() < 0.5)) for _ in range(n)
            ]
            n_gt = max(1, sum(t for _, t in ranked) + int(rng.integers(0, 5)))
            ap, _ = average_precision(ranked, n_gt)
            np.testing.assert_allclose(ap, ap_11point_ref(ranked, n_gt), rtol=0, atol=1e-12)

    def test_zero_gt_conventions(self):
        """No truth: an empty prediction list is perfect, anything else is 0."""
        assert average_precision([], n_gt=0) == (1.0, [])
        assert average_precision([(0.9, True)], n_gt=0) == (0.0, [])
        with pytest.raises(ValueError):
            average_precision([], n_gt=-1)

    def test_area_method_equals_exact_envelope(self):
        """Recall steps of 1/10 make the area integral a finite sum."""
        ranked = [(0.9, False), (0.8, True)]
        ap_area, _ = average_precision(ranked, n_gt=1, method="area")
        assert ap_area == 0.5
        perfect = [(0.9, True), (0.8, True)]
        ap_area, _ = average_precision(perfect, n_gt=2, method="area")
        assert ap_area == 1.0
        with pytest.raises(ValueError):
            average_precision(ranked, n_gt=1, method="trapezoid")


class TestF1:
    def test_hand_values(self):
        assert f1_score(5, 0, 0) == 1.0
        np.testing.assert_allclose(f1_score(3, 2, 1), 2 * 3 / (2 * 3 + 2 + 1))
        assert f1_score(0, 0, 0) == 0.0
        assert f1_score(0, 4, 2) == 0.0

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            f1_score(-1, 0, 0)


class TestRocAuc:
    def test_all_tied_scores_give_half(self):
        ranked = [(0.5, True), (0.5, False), (0.5, True), (0.5, False)]
        auc, points = roc_auc(ranked)
        assert auc == 0.5
        assert points == [(0.0, 0.0), (1.0, 1.0)]

    def test_perfect_separation(self):
        ranked = [(0.9, True), (0.8, True), (0.2, False), (0.1, False)]
        auc, points = roc_auc(ranked)
        assert auc == 1.0
        assert points[0] == (0.0, 0.0) and points[-1] == (1.0, 1.0)

    def test_matches_pairwise_reference(self):
        rng = np.random.default_rng(22)
        for trial in range(20):
            n = int(rng.integers(4, 60))
            # quantized confidences force plenty of ties
            ranked = [
                (round(float(rng.uniform(0, 1)), 1), bool(rng.random() < 0.5))
                for _ in range(n)
            ]
            if not any(t for _, t in ranked) or all(t for _, t in ranked):
                continue
            auc, points = roc_auc(ranked)
            np.testing.assert_allclose(auc, auc_pairwise_ref(ranked), rtol=0, atol=1e-9)
            xs = [p[0] for p in points]
            ys = [p[1] for p in points]
            assert xs == sorted(xs) and ys == sorted(ys)

    def test_degenerate_raises(self):
        with pytest.raises(ValueError):
            roc_auc([(0.9, True), (0.8, True)])
        with pytest.raises(ValueError):
            roc_auc([(0.9, False)])

    def test_wider_negative_basis(self):
        ranked = [(0.9, True), (0.4, False)]
        auc, points = roc_auc(ranked, n_negatives=4)
        assert points[-1] == (1.0, 1.0)
        assert 0.0 < auc <= 1.0
        with pytest.raises(ValueError):
            roc_auc(ranked, n_negatives=0)


class TestAggregates:
    def test_image_quality_report_fields(self):
        ref = textured(23, side=64)
        test = degrade(ref, 24, 0.05)
        rep = image_quality(ref, test)
        assert rep.psnr > 10.0
        assert 0.0 < rep.ms_ssim <= 1.0
        assert 0.0 < rep.uqi <= 1.0
        assert 0.0 < rep.vif <= 1.1

    def test_evaluate_detections_pools_images(self):
        gt1 = [BoundingBox(0.5, 0.5, 0.2, 0.2)]
        gt2 = [BoundingBox(0.3, 0.3, 0.2, 0.2), BoundingBox(0.7, 0.7, 0.2, 0.2)]
        preds1 = [BoundingBox(0.5, 0.5, 0.2, 0.2, confidence=0.9)]
        preds2 = [
            BoundingBox(0.3, 0.3, 0.2, 0.2, confidence=0.8),
            BoundingBox(0.1, 0.9, 0.1, 0.1, confidence=0.7),
        ]
        rep = evaluate_detections([preds1, preds2], [gt1, gt2])
        assert (rep.n_images, rep.n_gt) == (2, 3)
        assert (rep.tp, rep.fp, rep.fn) == (2, 1, 1)
        np.testing.assert_allclose(rep.f1, f1_score(2, 1, 1))
        assert rep.auc is not None

    def test_evaluate_detections_degenerate_auc_is_none(self):
        gt = [BoundingBox(0.5, 0.5, 0.2, 0.2)]
        preds = [BoundingBox(0.5, 0.5, 0.2, 0.2, confidence=0.9)]
        rep = evaluate_detections([preds], [gt])
        assert rep.auc is None
        assert rep.ap == 1.0
