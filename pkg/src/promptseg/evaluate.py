"""Evaluation protocols, prompt-position sweeps, and baselines.

The standard protocol prompts each sample at the most interior point of
its ground-truth mask (distance-transform argmax), takes the candidate
with the highest predicted IoU, and scores mean IoU per task. The oracle
protocol instead scores the best of the three candidates — an upper
bound that any report must dominate its standard score with. The refined
protocol additionally passes the chosen mask through the two-step
boundary refiner.

Reports are plain dataclasses with stable identifiers (config hash and
checkpoint checksum) and per-sample rows, so two runs over the same
inputs serialize to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensor as T
from .backbone import BackboneConfig, DecoderOutputs, decode_masks, encode_image, encode_prompt
from .errors import DimensionError, InputError
from .losses import binary_iou
from .params import ParamStore
from .point_refiner import RefinerConfig, coarsen_mask, refine_mask_twostep
from .prompt_adapter import apply_prompt_offset, plm_offset
from .synth import write_pgm
from .trainer import Checkpoint, refiner_config_for

__all__ = [
    "compute_iou", "center_prompt", "EvalReport", "eval_miou", "cross_task_eval",
    "refinement_study",
    "SamFParams", "samf_fit", "samf_apply", "samf_checkpoint", "samf_params_from",
    "IoUMap", "iou_map_sweep", "emit_heatmap",
]

MODES = ("standard", "oracle", "refined")


# ---------------------------------------------------------------------------
# metric and prompt rule


def compute_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks.

    Both masks empty counts as a perfect match (1.0); exactly one empty
    scores 0.0.
    """
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return binary_iou(a, b)


def center_prompt(mask: np.ndarray) -> tuple[float, float]:
    """The most interior foreground pixel, as an ``(x, y)`` prompt.

    Argmax of the Euclidean distance transform; ties resolve to the first
    maximum in row-major scan order, so the rule is deterministic.
    """
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise InputError("cannot place a prompt on an empty mask")
    dist = ndimage.distance_transform_edt(mask)
    r, c = divmod(int(np.argmax(dist)), mask.shape[1])
    return (float(c), float(r))


# ---------------------------------------------------------------------------
# model invocation


def _ckpt_configs(ckpt: Checkpoint) -> tuple[BackboneConfig, RefinerConfig]:
    bcfg = BackboneConfig(**ckpt.config["backbone"])
    if "refiner" in ckpt.config:
        rcfg = RefinerConfig(**ckpt.config["refiner"])
    else:
        rcfg = refiner_config_for(bcfg)
    return bcfg, rcfg


def _has_adapter(store: ParamStore) -> bool:
    return "adapter.mlp.fc2.w" in store


def _require_refiner(store: ParamStore) -> None:
    if "refiner.in_proj.w" not in store:
        raise InputError("checkpoint has no boundary refiner; "
                         "adapt or fine-tune it first")


def _decode_at(store: ParamStore, bcfg: BackboneConfig, f_i, point) -> DecoderOutputs:
    """Decode one prompt, applying the prompt-offset adapter when present."""
    f_p = encode_prompt([point], store, bcfg)
    if _has_adapter(store):
        f_p = apply_prompt_offset(f_p, plm_offset(f_p, f_i, store, bcfg))
    return decode_masks(f_i, f_p, store, bcfg)


def _candidate_masks(out: DecoderOutputs) -> tuple[np.ndarray, int]:
    masks = out.mask_logits.data > 0.0
    return masks, int(np.argmax(out.iou_pred.data))


# ---------------------------------------------------------------------------
# mIoU report


@dataclass
class EvalReport:
    """Per-task mean IoU under each protocol, plus identification."""

    miou: dict = field(default_factory=dict)        # task -> {protocol: mIoU}
    n_samples: dict = field(default_factory=dict)   # task -> count
    per_sample: list = field(default_factory=list)  # rows with per-protocol IoU
    config_hash: str = ""
    checkpoint_id: str = ""


def eval_miou(ckpt: Checkpoint, samples, mode: str = "standard",
              predictor=None) -> EvalReport:
    """Score a checkpoint on a dataset.

    ``mode`` picks the deepest protocol to run: ``standard`` and
    ``oracle`` are always computed (the oracle is free given the three
    candidates); ``refined`` additionally re-rasterizes the chosen mask
    through the boundary refiner. A prediction too degenerate to refine
    (empty, or with a sub-4-pixel component) keeps its unrefined score.

    ``predictor`` replaces the model call for instrumentation: it maps a
    sample to ``DecoderOutputs``.
    """
    if mode not in MODES:
        raise InputError(f"mode must be one of {MODES}, got {mode!r}")
    if not samples:
        raise InputError("evaluation needs at least one sample")
    bcfg, rcfg = _ckpt_configs(ckpt)
    store = ckpt.store
    if mode == "refined":
        _require_refiner(store)
    rows = []
    with T.no_grad():
        for sample in samples:
            if predictor is None:
                f_i = encode_image(sample.image, store, bcfg)
                out = _decode_at(store, bcfg, f_i, center_prompt(sample.mask))
            else:
                out = predictor(sample)
            masks, best = _candidate_masks(out)
            ious = [compute_iou(masks[k], sample.mask) for k in range(len(masks))]
            row = {"instance_id": sample.instance_id, "task": sample.task,
                   "standard": ious[best], "oracle": max(ious)}
            if mode == "refined":
                row["refined"] = row["standard"]
                if masks[best].any():
                    try:
                        refined = refine_mask_twostep(masks[best], out.f_dt,
                                                      store, rcfg)
                        row["refined"] = compute_iou(refined, sample.mask)
                    except InputError:
                        pass  # degenerate blob: keep the unrefined score
            rows.append(row)

    protocols = ("standard", "oracle", "refined") if mode == "refined" \
        else ("standard", "oracle")
    miou: dict = {}
    counts: dict = {}
    for task in sorted({r["task"] for r in rows}):
        task_rows = [r for r in rows if r["task"] == task]
        counts[task] = len(task_rows)
        miou[task] = {p: float(np.mean([r[p] for r in task_rows])) for p in protocols}
    config_hash = hashlib.sha256(
        json.dumps(ckpt.config, sort_keys=True).encode()).hexdigest()[:16]
    return EvalReport(miou=miou, n_samples=counts, per_sample=rows,
                      config_hash=config_hash,
                      checkpoint_id=ckpt.store.checksum()[:16])


def cross_task_eval(ckpt: Checkpoint, samples) -> EvalReport:
    """Standard protocol on another task's data (transfer inspection)."""
    return eval_miou(ckpt, samples, mode="standard")


def refinement_study(ckpt: Checkpoint, samples, coarsen_factor: int = 4,
                     predictor=None) -> dict:
    """Mean IoU with and without boundary refinement, on normal and
    deliberately coarsened predictions.

    Returns ``{"standard", "standard_refined", "coarse", "coarse_refined",
    "n"}``. Refinement that degenerates (empty input or sub-minimal blob)
    keeps the unrefined score, matching the refined protocol's convention.
    """
    if not samples:
        raise InputError("refinement study needs at least one sample")
    bcfg, rcfg = _ckpt_configs(ckpt)
    store = ckpt.store
    _require_refiner(store)

    def refined_iou(mask, f_dt, gt, fallback):
        if not mask.any():
            return fallback
        try:
            return compute_iou(refine_mask_twostep(mask, f_dt, store, rcfg), gt)
        except InputError:
            return fallback

    rows = []
    with T.no_grad():
        for sample in samples:
            if predictor is None:
                f_i = encode_image(sample.image, store, bcfg)
                out = _decode_at(store, bcfg, f_i, center_prompt(sample.mask))
            else:
                out = predictor(sample)
            masks, best = _candidate_masks(out)
            pred = masks[best]
            coarse = coarsen_mask(pred, coarsen_factor)
            iou_std = compute_iou(pred, sample.mask)
            iou_coarse = compute_iou(coarse, sample.mask)
            rows.append((iou_std,
                         refined_iou(pred, out.f_dt, sample.mask, iou_std),
                         iou_coarse,
                         refined_iou(coarse, out.f_dt, sample.mask, iou_coarse)))
    means = np.mean(rows, axis=0)
    return {"standard": float(means[0]), "standard_refined": float(means[1]),
            "coarse": float(means[2]), "coarse_refined": float(means[3]),
            "n": len(rows)}


# ---------------------------------------------------------------------------
# fixed-blend baseline


@dataclass
class SamFParams:
    """Blend weights for three candidate masks: w1, w2, and 1 - w1 - w2."""

    w1: float
    w2: float


def _dice_on_probs(p: T.Tensor, gt: np.ndarray, eps: float = 1.0) -> T.Tensor:
    g = np.asarray(gt, np.float32)
    inter = (p * g).sum()
    return 1.0 - (2.0 * inter + eps) / (p.sum() + float(g.sum()) + eps)


def samf_fit(backbone: Checkpoint, samples, steps: int = 500, lr: float = 0.1,
             probs_fn=None) -> SamFParams:
    """Fit the two free blend weights by gradient descent on dice loss.

    Candidate probabilities come from the frozen model under the standard
    center prompt (or from ``probs_fn(sample) -> (3, H, W)`` when given)
    and are treated as constants; only the scalar weights move. The loss
    sees the clamped blend — the same map ``samf_apply`` thresholds —
    which also keeps the objective bounded for out-of-simplex weights.
    """
    if not samples:
        raise InputError("fitting needs at least one sample")
    bcfg, _ = _ckpt_configs(backbone)
    store = backbone.store
    stacks = []
    with T.no_grad():
        for sample in samples:
            if probs_fn is None:
                f_i = encode_image(sample.image, store, bcfg)
                out = _decode_at(store, bcfg, f_i, center_prompt(sample.mask))
                probs = 1.0 / (1.0 + np.exp(-out.mask_logits.data.astype(np.float64)))
            else:
                probs = np.asarray(probs_fn(sample), np.float64)
            stacks.append((probs.astype(np.float32), sample.mask))

    w1 = T.Tensor(np.float32(1.0 / 3.0), requires_grad=True)
    w2 = T.Tensor(np.float32(1.0 / 3.0), requires_grad=True)
    for _ in range(steps):
        losses = []
        for probs, gt in stacks:
            blend = (w1 * T.Tensor(probs[0]) + w2 * T.Tensor(probs[1])
                     + (1.0 - w1 - w2) * T.Tensor(probs[2]))
            losses.append(_dice_on_probs(T.clamp(blend, 0.0, 1.0), gt))
        total = losses[0]
        for term in losses[1:]:
            total = total + term
        total = total / float(len(losses))
        w1.grad = None
        w2.grad = None
        total.backward()
        w1.data = (w1.data - lr * w1.grad).astype(np.float32)
        w2.data = (w2.data - lr * w2.grad).astype(np.float32)
    return SamFParams(w1=float(w1.data), w2=float(w2.data))


def samf_apply(params: SamFParams, probs: np.ndarray) -> np.ndarray:
    """Blend three probability maps and threshold at 0.5.

    Out-of-simplex weights are allowed; the blend is clamped to [0, 1]
    before thresholding.
    """
    probs = np.asarray(probs, np.float64)
    if probs.ndim != 3 or probs.shape[0] != 3:
        raise DimensionError(f"expected (3, H, W) probabilities, got {probs.shape}")
    w3 = 1.0 - params.w1 - params.w2
    blend = params.w1 * probs[0] + params.w2 * probs[1] + w3 * probs[2]
    return np.clip(blend, 0.0, 1.0) > 0.5


def samf_checkpoint(backbone: Checkpoint, params: SamFParams) -> Checkpoint:
    """Bundle fitted blend weights with the backbone they were fitted on.

    The weights are stored as scalar tensors under the reserved ``samf.``
    namespace, so the result saves and loads like any other checkpoint.
    """
    store = ParamStore()
    for name, t in backbone.store.items():
        store[name] = T.Tensor(t.data.copy(), requires_grad=t.requires_grad)
    store["samf.w1"] = T.Tensor(np.float32(params.w1))
    store["samf.w2"] = T.Tensor(np.float32(params.w2))
    config = dict(backbone.config)
    config["stage"] = "samf"
    return Checkpoint(store=store, config=config)


def samf_params_from(ckpt: Checkpoint) -> SamFParams:
    """Recover blend weights from a checkpoint written by ``samf_checkpoint``."""
    for name in ("samf.w1", "samf.w2"):
        if name not in ckpt.store:
            raise InputError(f"checkpoint holds no fitted blend weights ({name} missing)")
    return SamFParams(w1=float(ckpt.store["samf.w1"].data),
                      w2=float(ckpt.store["samf.w2"].data))


# ---------------------------------------------------------------------------
# prompt-position sweeps


@dataclass
class IoUMap:
    """IoU of the standard protocol at every strided prompt position."""

    values: np.ndarray          # (ceil(H/stride), ceil(W/stride)) in [0, 1]
    stride: int
    image_id: str = ""
    mask_id: str = ""


def iou_map_sweep(ckpt: Checkpoint, image: np.ndarray, gt_mask: np.ndarray,
                  stride: int, predictor=None) -> IoUMap:
    """Run the segmenter from every strided pixel prompt and score it."""
    if stride < 1:
        raise InputError(f"stride must be >= 1, got {stride}")
    bcfg, _ = _ckpt_configs(ckpt)
    store = ckpt.store
    gt = np.asarray(gt_mask, bool)
    h, w = gt.shape
    rows = range(0, h, stride)
    cols = range(0, w, stride)
    values = np.zeros((len(rows), len(cols)), np.float64)
    with T.no_grad():
        f_i = None if predictor is not None else encode_image(image, store, bcfg)
        for i, r in enumerate(rows):
            for j, c in enumerate(cols):
                if predictor is None:
                    out = _decode_at(store, bcfg, f_i, (float(c), float(r)))
                else:
                    out = predictor(_SweepPoint(image, gt, (float(c), float(r))))
                masks, best = _candidate_masks(out)
                values[i, j] = compute_iou(masks[best], gt)
    return IoUMap(values=values, stride=stride)


@dataclass
class _SweepPoint:
    """Sample-shaped view handed to injected predictors during sweeps."""

    image: np.ndarray
    mask: np.ndarray
    point: tuple


# ---------------------------------------------------------------------------
# heatmap emission


def emit_heatmap(iomap: IoUMap, prefix) -> tuple[Path, Path]:
    """Write an IoU map as an 8-bit PGM image plus an exact CSV.

    The PGM scales values by 255 (rounded); the CSV holds one
    ``row,col,iou`` line per cell with full float precision, so the map
    reconstructs exactly from the CSV and to 1/255 from the PGM.
    """
    prefix = Path(prefix)
    pgm_path = prefix.with_suffix(".pgm")
    csv_path = prefix.with_suffix(".csv")
    write_pgm(pgm_path, np.round(iomap.values * 255.0).astype(np.uint8))
    lines = [f"{r},{c},{float(iomap.values[r, c])!r}"
             for r in range(iomap.values.shape[0])
             for c in range(iomap.values.shape[1])]
    csv_path.write_text("\n".join(lines) + "\n")
    return pgm_path, csv_path
