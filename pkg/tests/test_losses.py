"""Loss-function tests with hand-derived oracle values.

Expected numbers are computed without the library:
- focal at logit 0, target 1: 0.25 * 0.5^2 * ln 2 = 0.04332169.
- dice of a hard 50-px prediction inside a 100-px target with eps=1:
  1 - (2*50 + 1) / (50 + 100 + 1) = 1 - 101/151 = 0.33112583.
- point matching of GT {(0,0),(2,0)} against refined {(0,0)}:
  mean(0, 4) = 2.0, and 0.0 with the arguments swapped (asymmetry).
"""

import math

import numpy as np
import pytest

from promptseg import losses as L
from promptseg import tensor as T


def logits_for(mask: np.ndarray, scale: float = 20.0) -> T.Tensor:
    return T.Tensor(np.where(mask, scale, -scale).astype(np.float32))


# ---------------------------------------------------------------------------
# focal


def test_focal_single_pixel_half_confidence():
    gt = np.array([[True]])
    got = L.focal_loss(T.Tensor(np.zeros((1, 1), np.float32)), gt).item()
    assert got == pytest.approx(0.25 * 0.25 * math.log(2.0), abs=1e-5)
    assert got == pytest.approx(0.043322, abs=1e-5)


def test_focal_single_background_pixel_half_confidence():
    gt = np.array([[False]])
    got = L.focal_loss(T.Tensor(np.zeros((1, 1), np.float32)), gt).item()
    assert got == pytest.approx(0.75 * 0.25 * math.log(2.0), abs=1e-5)


def test_focal_confident_correct_is_near_zero_and_finite_at_extremes():
    gt = np.zeros((4, 4), bool)
    gt[:2] = True
    val = L.focal_loss(logits_for(gt, scale=100.0), gt).item()
    assert math.isfinite(val)
    assert val < 1e-6
    wrong = L.focal_loss(logits_for(~gt, scale=100.0), gt).item()
    assert math.isfinite(wrong)
    assert wrong > 1.0


def test_focal_is_mean_over_pixels():
    # One pixel at logit 0 (target 1) among three confident-correct pixels:
    # the mean divides the single-pixel value by 4.
    gt = np.array([[True, True], [False, False]])
    logits = np.array([[0.0, 30.0], [-30.0, -30.0]], np.float32)
    got = L.focal_loss(T.Tensor(logits), gt).item()
    assert got == pytest.approx(0.25 * 0.25 * math.log(2.0) / 4.0, rel=1e-4)


def test_gradcheck_focal():
    rng = np.random.default_rng(0)
    gt = rng.random((6, 6)) > 0.5
    x = T.Tensor(rng.standard_normal((6, 6)).astype(np.float32), requires_grad=True)
    err = T.finite_diff_check(lambda: L.focal_loss(x, gt), [x], h=1e-3, n_probes=36)
    assert err <= 1e-3


# ---------------------------------------------------------------------------
# dice


def test_dice_hard_subset_is_one_third():
    gt = np.zeros((16, 16), bool)
    gt.reshape(-1)[:100] = True
    pred = np.zeros((16, 16), bool)
    pred.reshape(-1)[:50] = True
    got = L.dice_loss(logits_for(pred), gt).item()
    assert got == pytest.approx(1.0 - 101.0 / 151.0, abs=1e-2)
    assert got == pytest.approx(1.0 / 3.0, abs=1e-2)


def test_dice_perfect_prediction_near_zero():
    gt = np.zeros((8, 8), bool)
    gt[2:6, 2:6] = True
    assert L.dice_loss(logits_for(gt), gt).item() < 1e-3


def test_dice_empty_prediction_and_target():
    gt = np.zeros((8, 8), bool)
    got = L.dice_loss(logits_for(gt), gt).item()
    assert got == pytest.approx(0.0, abs=1e-3)


def test_dice_range_is_unit_interval():
    rng = np.random.default_rng(1)
    for seed in range(5):
        gt = rng.random((8, 8)) > 0.5
        z = T.Tensor(rng.standard_normal((8, 8)).astype(np.float32) * 3)
        v = L.dice_loss(z, gt).item()
        assert 0.0 <= v <= 1.0


def test_gradcheck_dice():
    rng = np.random.default_rng(2)
    gt = rng.random((6, 6)) > 0.4
    x = T.Tensor(rng.standard_normal((6, 6)).astype(np.float32), requires_grad=True)
    err = T.finite_diff_check(lambda: L.dice_loss(x, gt), [x], h=1e-3, n_probes=36)
    assert err <= 1e-3


# ---------------------------------------------------------------------------
# point matching


def test_point_matching_literal_values():
    gt = np.array([[0.0, 0.0], [2.0, 0.0]])
    refined = T.Tensor(np.array([[0.0, 0.0]], np.float32))
    assert L.point_matching_loss(gt, refined).item() == pytest.approx(2.0, abs=1e-6)


def test_point_matching_is_one_directional():
    gt = np.array([[0.0, 0.0]])
    refined = T.Tensor(np.array([[0.0, 0.0], [2.0, 0.0]], np.float32))
    assert L.point_matching_loss(gt, refined).item() == pytest.approx(0.0, abs=1e-7)


def test_point_matching_zero_iff_every_gt_point_covered():
    rng = np.random.default_rng(3)
    pts = rng.random((8, 2)).astype(np.float32) * 10
    assert L.point_matching_loss(pts, T.Tensor(pts)).item() == 0.0
    shifted = pts.copy()
    shifted[3] += 0.5
    assert L.point_matching_loss(pts, T.Tensor(shifted)).item() > 0.0


def test_point_matching_invariant_to_refined_permutation():
    rng = np.random.default_rng(4)
    gt = rng.random((6, 2)) * 5
    ref = rng.random((9, 2)).astype(np.float32) * 5
    a = L.point_matching_loss(gt, T.Tensor(ref)).item()
    b = L.point_matching_loss(gt, T.Tensor(ref[rng.permutation(9)])).item()
    assert a == pytest.approx(b, abs=1e-5)


def test_gradcheck_point_matching():
    # Generic random points; ties in the min are measure-zero, and the
    # perturbation h=1e-3 is far smaller than inter-point distances here.
    rng = np.random.default_rng(5)
    gt = rng.random((5, 2)) * 8
    ref = T.Tensor((rng.random((7, 2)) * 8).astype(np.float32), requires_grad=True)
    err = T.finite_diff_check(lambda: L.point_matching_loss(gt, ref), [ref], h=1e-3, n_probes=14)
    assert err <= 1e-3


# ---------------------------------------------------------------------------
# composite segmentation loss


def fabricate(seed=0, h=8, w=8):
    rng = np.random.default_rng(seed)
    gt = np.zeros((h, w), bool)
    gt[2:6, 3:7] = True
    logits = T.Tensor(rng.standard_normal((3, h, w)).astype(np.float32) * 2,
                      requires_grad=True)
    iou_pred = T.Tensor(np.array([0.3, 0.8, 0.5], np.float32), requires_grad=True)
    return logits, iou_pred, gt


def test_seg_loss_composition_identity():
    logits, iou_pred, gt = fabricate()
    frag = L.seg_loss(logits, iou_pred, gt, select=1)
    composed = 20.0 * frag.focal.item() + frag.dice.item() + frag.iou_head.item()
    assert frag.seg.item() == pytest.approx(composed, abs=1e-6)


def test_seg_loss_iou_head_matches_hand_value():
    logits, iou_pred, gt = fabricate(seed=1)
    sel = 2
    pred_mask = logits.data[sel] > 0.0
    inter = np.logical_and(pred_mask, gt).sum()
    union = np.logical_or(pred_mask, gt).sum()
    actual = 1.0 if union == 0 else inter / union
    frag = L.seg_loss(logits, iou_pred, gt, select=sel)
    want = (iou_pred.data[sel] - actual) ** 2
    assert frag.iou_head.item() == pytest.approx(float(want), abs=1e-6)


def test_seg_loss_pinned_iou_targets_override_measured_ones():
    logits, iou_pred, gt = fabricate(seed=1)
    sel = 2
    frag = L.seg_loss(logits, iou_pred, gt, select=sel, iou_targets=[0.1, 0.2, 0.3])
    want = (iou_pred.data[sel] - 0.3) ** 2
    assert frag.iou_head.item() == pytest.approx(float(want), abs=1e-6)
    # argmin mode pins every head's target
    frag = L.seg_loss(logits, iou_pred, gt, select="argmin", iou_targets=[0.5, 0.5, 0.5])
    want = np.mean([(iou_pred.data[i] - 0.5) ** 2 for i in range(3)])
    assert frag.iou_head.item() == pytest.approx(float(want), abs=1e-6)
    # and total_loss forwards the override
    full = L.total_loss(logits, iou_pred, gt, None, None, 0.0, select=sel,
                        iou_targets=[0.1, 0.2, 0.3])
    assert full.iou_head.item() == pytest.approx(
        float((iou_pred.data[sel] - 0.3) ** 2), abs=1e-6)


def test_seg_loss_argmin_picks_smallest_candidate_loss():
    gt = np.zeros((8, 8), bool)
    gt[2:6, 2:6] = True
    stack = np.stack([
        np.where(gt, -10.0, 10.0),   # inverted: large loss
        np.where(gt, 10.0, -10.0),   # perfect: small loss
        np.full((8, 8), -10.0),      # empty: medium loss
    ]).astype(np.float32)
    logits = T.Tensor(stack)
    iou_pred = T.Tensor(np.array([0.9, 0.1, 0.5], np.float32))
    frag = L.seg_loss(logits, iou_pred, gt, select="argmin")
    assert frag.selected == 1
    # and the argmin value equals the explicitly selected one
    explicit = L.seg_loss(logits, iou_pred, gt, select=1)
    assert frag.focal.item() == pytest.approx(explicit.focal.item(), abs=1e-7)
    assert frag.dice.item() == pytest.approx(explicit.dice.item(), abs=1e-7)


def test_seg_loss_best_pred_selects_highest_iou_estimate():
    logits, iou_pred, gt = fabricate(seed=2)
    frag = L.seg_loss(logits, iou_pred, gt, select="best_pred")
    assert frag.selected == int(np.argmax(iou_pred.data))


def test_seg_loss_argmin_trains_iou_head_on_all_candidates():
    logits, iou_pred, gt = fabricate(seed=3)
    frag = L.seg_loss(logits, iou_pred, gt, select="argmin")
    per_head = []
    for i in range(3):
        pred = logits.data[i] > 0
        union = np.logical_or(pred, gt).sum()
        actual = 1.0 if union == 0 else np.logical_and(pred, gt).sum() / union
        per_head.append((iou_pred.data[i] - actual) ** 2)
    assert frag.iou_head.item() == pytest.approx(float(np.mean(per_head)), abs=1e-6)


def test_total_loss_weighted_sum_and_lambda_zero():
    logits, iou_pred, gt = fabricate(seed=4)
    gt_pts = np.array([[1.0, 1.0], [4.0, 5.0]])
    refined = T.Tensor(np.array([[1.5, 1.0], [4.0, 5.5]], np.float32))
    full = L.total_loss(logits, iou_pred, gt, gt_pts, refined, lam=1.0, select=0)
    assert full.total.item() == pytest.approx(full.seg.item() + full.pm.item(), abs=1e-6)
    bare = L.total_loss(logits, iou_pred, gt, gt_pts, refined, lam=0.0, select=0)
    assert bare.total.item() == pytest.approx(bare.seg.item(), abs=1e-7)
    half = L.total_loss(logits, iou_pred, gt, gt_pts, refined, lam=0.5, select=0)
    assert half.total.item() == pytest.approx(half.seg.item() + 0.5 * half.pm.item(), abs=1e-6)


def test_gradcheck_seg_loss():
    logits, iou_pred, gt = fabricate(seed=5)
    err = T.finite_diff_check(
        lambda: L.seg_loss(logits, iou_pred, gt, select=1).seg,
        [logits, iou_pred], h=1e-3, n_probes=64)
    assert err <= 1e-3
