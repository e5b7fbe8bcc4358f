"""Training objectives: focal, dice, IoU-regression, and point matching.

The composite segmentation loss is ``20 * focal + 1 * dice + iou_head``.
The point-matching term is one-directional: it averages, over ground-truth
boundary points, the squared distance to the nearest refined point. The
full objective is ``seg + lam * pm``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import tensor as T
from .tensor import Tensor

FOCAL_WEIGHT = 20.0
DICE_WEIGHT = 1.0

MaskSelect = Union[int, str]  # an index, "argmin", or "best_pred"


def _gt_map(gt: np.ndarray) -> np.ndarray:
    return (np.asarray(gt) > 0.5 if np.asarray(gt).dtype != bool else np.asarray(gt)).astype(np.float32)


def binary_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean masks.

    Two empty masks agree perfectly (1.0); one empty mask against a
    non-empty one scores 0.0.
    """
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def focal_loss(logits: Tensor, gt: np.ndarray,
               alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean focal loss over pixels, stable for arbitrarily large logits.

    Written with log-sigmoid identities: for target 1 the per-pixel term is
    alpha * sigmoid(-z)^gamma * softplus(-z), and symmetrically for target 0,
    so saturated logits contribute exact zeros instead of 0 * inf.
    """
    g = _gt_map(gt)
    neg_z = logits * -1.0
    pos_term = (T.sigmoid(neg_z) ** gamma) * T.softplus(neg_z) * alpha
    neg_term = (T.sigmoid(logits) ** gamma) * T.softplus(logits) * (1.0 - alpha)
    per_pixel = pos_term * g + neg_term * (1.0 - g)
    return per_pixel.mean()


def dice_loss(logits: Tensor, gt: np.ndarray, eps: float = 1.0) -> Tensor:
    """Soft dice loss ``1 - (2 * intersection + eps) / (|p| + |g| + eps)``."""
    g = _gt_map(gt)
    p = T.sigmoid(logits)
    inter = (p * g).sum()
    denom = p.sum() + float(g.sum())
    return 1.0 - (2.0 * inter + eps) / (denom + eps)


def point_matching_loss(gt_points, refined, assignment=None) -> Tensor:
    """Mean over GT points of the squared distance to the closest refined point.

    One-directional by construction: refined points that cover no GT point
    are not penalized. Ties in the minimum resolve to the first index, which
    yields the usual subgradient. ``refined`` may be a Tensor of shape (M, 2)
    or any object exposing ``live`` (a Tensor) such as a contour point set.
    ``assignment`` (one refined-point index per GT point) overrides the
    argmin; the choice is a detached constant in the backward pass either
    way, and pinning it keeps the loss surface smooth while probing it.
    """
    if not isinstance(refined, Tensor):
        refined = getattr(refined, "live", None) or Tensor(np.asarray(refined.points, np.float32))
    gt_arr = np.asarray(getattr(gt_points, "points", gt_points), dtype=np.float32)
    if assignment is None:
        d2 = ((gt_arr[:, None, :] - refined.data[None, :, :]) ** 2).sum(axis=-1)
        nearest = d2.argmin(axis=1)
    else:
        nearest = np.asarray(assignment, dtype=int)
    picked = T.take_rows(refined, nearest)
    diff = Tensor(gt_arr) - picked
    return (diff * diff).sum(axis=1).mean()


@dataclass
class SegLossFragment:
    focal: Tensor
    dice: Tensor
    iou_head: Tensor
    seg: Tensor
    selected: int


@dataclass
class LossBreakdown:
    focal: Tensor
    dice: Tensor
    iou_head: Tensor
    pm: Tensor
    seg: Tensor
    total: Tensor
    selected: int

    def scalars(self) -> dict[str, float]:
        return {
            "focal": self.focal.item(), "dice": self.dice.item(),
            "iou_head": self.iou_head.item(), "pm": self.pm.item(),
            "seg": self.seg.item(), "total": self.total.item(),
        }


def _iou_target(mask_logits_value: np.ndarray, gt: np.ndarray) -> float:
    return binary_iou(mask_logits_value > 0.0, np.asarray(gt, bool))


def seg_loss(mask_logits: Tensor, iou_pred: Tensor, gt: np.ndarray,
             select: MaskSelect, iou_targets=None) -> SegLossFragment:
    """Composite mask loss over one of several candidate masks.

    ``select`` picks the candidate: an explicit index, ``"best_pred"``
    (highest predicted IoU, the adaptation setting), or ``"argmin"``
    (smallest 20*focal + dice, the multi-candidate pretraining setting).
    The IoU head regresses the measured IoU of each thresholded mask as a
    constant target: every head in argmin mode, only the chosen head
    otherwise. ``iou_targets`` (one value per head) overrides the measured
    targets with fixed constants — they are detached either way, and
    pinning them keeps the loss surface smooth while probing it.
    """
    n = mask_logits.shape[0]

    def head_target(i: int) -> float:
        if iou_targets is not None:
            return float(iou_targets[i])
        return _iou_target(mask_logits.data[i], gt)

    if select == "argmin":
        candidates = []
        for i in range(n):
            f = focal_loss(mask_logits[i], gt)
            d = dice_loss(mask_logits[i], gt)
            candidates.append((f, d, FOCAL_WEIGHT * f.item() + DICE_WEIGHT * d.item()))
        chosen = int(np.argmin([c[2] for c in candidates]))
        f, d, _ = candidates[chosen]
        heads = []
        for i in range(n):
            diff = iou_pred[i] - head_target(i)
            heads.append(diff * diff)
        iou_term = sum(heads[1:], heads[0]) / float(n)
    else:
        chosen = int(np.argmax(iou_pred.data)) if select == "best_pred" else int(select)
        f = focal_loss(mask_logits[chosen], gt)
        d = dice_loss(mask_logits[chosen], gt)
        diff = iou_pred[chosen] - head_target(chosen)
        iou_term = diff * diff
    iou_term = iou_term.reshape(()) if iou_term.shape else iou_term
    seg = FOCAL_WEIGHT * f + DICE_WEIGHT * d + iou_term
    return SegLossFragment(focal=f, dice=d, iou_head=iou_term, seg=seg, selected=chosen)


def total_loss(mask_logits: Tensor, iou_pred: Tensor, gt: np.ndarray,
               gt_points, refined_points, lam: float,
               select: MaskSelect = "best_pred", iou_targets=None) -> LossBreakdown:
    """Full objective ``seg + lam * pm`` for one sample.

    With ``lam == 0`` or without boundary points the total equals the
    segmentation term alone (the point term is still reported when points
    are given). ``iou_targets`` is forwarded to the segmentation term.
    """
    frag = seg_loss(mask_logits, iou_pred, gt, select, iou_targets=iou_targets)
    if gt_points is None or refined_points is None:
        pm = Tensor(np.float32(0.0))
    else:
        pm = point_matching_loss(gt_points, refined_points)
    total = frag.seg + float(lam) * pm if lam != 0.0 else frag.seg
    return LossBreakdown(focal=frag.focal, dice=frag.dice, iou_head=frag.iou_head,
                         pm=pm, seg=frag.seg, total=total, selected=frag.selected)
