"""Finite-difference battery for every backward rule and the assembled model.

``run_gradcheck()`` exercises each autodiff operation on small randomized
inputs, projecting every output through a fixed random weighting to a
smooth O(1) scalar so float32 difference quotients stay well conditioned.
``run_gradcheck(full=True)`` additionally differentiates the complete
training objective — prompt encoding, offset prediction, mask decoding,
boundary refinement, and the composite loss — with respect to the adapter
parameters and the refiner parameters on a 16x16 model.

Kinked operations (relu, clamp) are probed away from their corners. The
full-model checks pin the supervised head and the IoU regression targets
at the evaluation point: both are detached constants in the backward pass,
so the pinned objective has exactly the gradient a training step consumes
while staying smooth for central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, decode_masks, encode_image, encode_prompt, init_backbone
from .losses import binary_iou, point_matching_loss, seg_loss
from .point_refiner import (RefinerConfig, boundary_transform, default_jitter_sigma,
                            extract_contour, gather_point_features, init_refiner,
                            jitter_points)
from .prompt_adapter import apply_prompt_offset, init_plm, plm_offset

TOLERANCE = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_err: float
    n_tensors: int
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_err <= TOLERANCE


def _leaf(rng: np.random.Generator, shape, lo=-1.0, hi=1.0) -> T.Tensor:
    return T.Tensor(rng.uniform(lo, hi, shape).astype(np.float32), requires_grad=True)


def _leaf_off_kinks(rng: np.random.Generator, shape, kinks, margin=0.05,
                    lo=-1.0, hi=1.0) -> T.Tensor:
    """Uniform leaf resampled until every entry clears each kink by ``margin``.

    A central difference straddling a non-differentiable point measures the
    two one-sided slopes averaged, not the gradient, so kink neighborhoods
    are excluded up front.
    """
    data = rng.uniform(lo, hi, shape)
    for k in kinks:
        near = np.abs(data - k) < margin
        while near.any():
            data[near] = rng.uniform(lo, hi, int(near.sum()))
            near = np.abs(data - k) < margin
    return T.Tensor(data.astype(np.float32), requires_grad=True)


def _probed(build, rng: np.random.Generator):
    """Project ``build()`` to a scalar through a fixed random weighting."""
    w = rng.uniform(-1.0, 1.0, build().shape).astype(np.float32)

    def objective():
        return (build() * T.Tensor(w)).mean()

    return objective


def _attention_leaves(rng: np.random.Generator, c: int) -> T.AttentionParams:
    def mat(shape, scale):
        return T.Tensor((scale * rng.standard_normal(shape)).astype(np.float32),
                        requires_grad=True)

    return T.AttentionParams(
        wq=mat((c, c), 0.4), bq=mat((c,), 0.1),
        wk=mat((c, c), 0.4), bk=mat((c,), 0.1),
        wv=mat((c, c), 0.4), bv=mat((c,), 0.1),
        wo=mat((c, c), 0.4), bo=mat((c,), 0.1),
    )


def _primitive_checks(seed: int) -> list:
    """(name, objective, leaves) triples covering every backward closure."""
    rng = np.random.default_rng(seed)
    checks = []

    def add(name, build, leaves):
        checks.append((name, _probed(build, rng), leaves))

    a = _leaf(rng, (5, 7))
    b = _leaf(rng, (7,))
    add("add-broadcast", lambda a=a, b=b: a + b, [a, b])

    a = _leaf(rng, (5, 7))
    b = _leaf(rng, (7,))
    add("mul-broadcast", lambda a=a, b=b: a * b, [a, b])

    a = _leaf(rng, (4, 6))
    b = _leaf(rng, (6,), lo=0.5, hi=1.5)
    add("div", lambda a=a, b=b: a / b, [a, b])

    x = _leaf(rng, (5, 5), lo=0.5, hi=2.0)
    add("pow(1.7)", lambda x=x: x ** 1.7, [x])

    x = _leaf(rng, (5, 5), lo=0.5, hi=2.0)
    add("pow(-0.5)", lambda x=x: x ** -0.5, [x])

    x = _leaf_off_kinks(rng, (6, 6), kinks=(0.0,))
    add("relu", lambda x=x: T.relu(x), [x])

    x = _leaf(rng, (5, 5))
    add("exp", lambda x=x: T.exp(x), [x])

    x = _leaf(rng, (5, 5), lo=0.5, hi=2.0)
    add("log", lambda x=x: T.log(x), [x])

    x = _leaf(rng, (5, 5), lo=-3.0, hi=3.0)
    add("sigmoid", lambda x=x: T.sigmoid(x), [x])

    x = _leaf(rng, (5, 5), lo=-3.0, hi=3.0)
    add("softplus", lambda x=x: T.softplus(x), [x])

    x = _leaf(rng, (5, 5), lo=-3.0, hi=3.0)
    add("gelu", lambda x=x: T.gelu(x), [x])

    x = _leaf_off_kinks(rng, (6, 6), kinks=(-0.5, 0.5))
    add("clamp", lambda x=x: T.clamp(x, -0.5, 0.5), [x])

    a = _leaf(rng, (4, 6))
    b = _leaf(rng, (6, 5))
    add("matmul", lambda a=a, b=b: a @ b, [a, b])

    a = _leaf(rng, (3, 4, 6))
    b = _leaf(rng, (3, 6, 5))
    add("matmul-batched", lambda a=a, b=b: a @ b, [a, b])

    x = _leaf(rng, (7, 6))
    w = _leaf(rng, (6, 4))
    bias = _leaf(rng, (4,))
    add("linear", lambda x=x, w=w, bias=bias: T.linear(x, w, bias), [x, w, bias])

    x = _leaf(rng, (4, 5, 3))
    add("sum-axis", lambda x=x: x.sum(axis=1), [x])

    x = _leaf(rng, (4, 5))
    add("sum-all", lambda x=x: x.sum(), [x])

    x = _leaf(rng, (4, 5))
    add("mean-keepdims", lambda x=x: x.mean(axis=-1, keepdims=True), [x])

    x = _leaf(rng, (4, 6))
    add("reshape", lambda x=x: x.reshape(3, 8), [x])

    x = _leaf(rng, (2, 3, 4))
    add("transpose", lambda x=x: T.transpose(x, (2, 0, 1)), [x])

    parts = [_leaf(rng, (2, 3)), _leaf(rng, (4, 3)), _leaf(rng, (1, 3))]
    add("concat", lambda parts=parts: T.concat(parts, axis=0), parts)

    x = _leaf(rng, (10, 4))
    idx = np.array([0, 3, 3, 7, 9, 0])  # repeats must accumulate
    add("take-rows", lambda x=x, idx=idx: T.take_rows(x, idx), [x])

    x = _leaf(rng, (6, 8))
    add("slice", lambda x=x: x[1:5, ::2], [x])

    x = _leaf(rng, (5, 7), lo=-2.0, hi=2.0)
    add("softmax", lambda x=x: T.softmax(x, axis=-1), [x])

    x = _leaf(rng, (6, 8))
    g = _leaf(rng, (8,), lo=0.5, hi=1.5)
    bias = _leaf(rng, (8,), lo=-0.5, hi=0.5)
    add("layer-norm", lambda x=x, g=g, bias=bias: T.layer_norm(x, g, bias), [x, g, bias])

    q = _leaf(rng, (5, 8))
    kv = _leaf(rng, (6, 8))
    attn = _attention_leaves(rng, 8)
    add("attention", lambda q=q, kv=kv, attn=attn: T.multi_head_attention(q, kv, attn, 2),
        [q, kv] + attn.tensors())

    return checks


def _model_checks(seed: int) -> list:
    """Differentiate the full objective through a small end-to-end model.

    Returns two entries over the same forward pass: one probing the adapter
    parameters, one probing the refiner parameters. The frozen backbone is
    excluded from both the backward pass and the probes.
    """
    cfg = BackboneConfig(image_size=16, patch=8, channels=16, enc_width=24,
                         enc_blocks=1, dec_blocks=2, heads=4)
    rcfg = RefinerConfig(channels=cfg.channels)
    rng = np.random.default_rng(seed)

    store = init_backbone(cfg, seed=seed)
    store.update(init_plm(cfg, seed=seed))
    store.update(init_refiner(rcfg, seed=seed + 1))
    store.set_trainable("backbone.", False)
    for t in store.trainable().values():
        # move off the zero-initialized output layers so gradients are generic
        t.data = (t.data + 0.05 * rng.standard_normal(t.data.shape)).astype(np.float32)

    mask = np.zeros((16, 16), bool)
    mask[4:12, 5:13] = True
    image = rng.uniform(0.0, 0.3, (16, 16)).astype(np.float32)
    image[mask] = np.clip(image[mask] + 0.6, 0.0, 1.0)
    point = (8.0, 7.0)
    size = (16, 16)

    contour = extract_contour(mask, rcfg.points)
    jittered = jitter_points(contour, sigma=default_jitter_sigma(size), seed=(seed, 0, 0))

    with T.no_grad():
        f_i = encode_image(image, store, cfg)
        f_p = encode_prompt([point], store, cfg)
        out0 = decode_masks(f_i, apply_prompt_offset(f_p, plm_offset(f_p, f_i, store, cfg)),
                            store, cfg)
        feat0 = gather_point_features(out0.f_dt, jittered.points, size)
        refined0 = boundary_transform(feat0, jittered.points, store, rcfg, size)
    chosen = int(np.argmax(out0.iou_pred.data))
    targets = [binary_iou(out0.mask_logits.data[i] > 0.0, mask)
               for i in range(out0.mask_logits.shape[0])]
    d2 = ((contour.points[:, None, :] - refined0.live.data[None, :, :]) ** 2).sum(axis=-1)
    pairing = d2.argmin(axis=1)

    def objective():
        # seg + 1.0 * pm with the detached choices (supervised head, IoU
        # targets, point pairing) held at this evaluation point. The 1/16
        # scale keeps difference quotients inside float32 measurement
        # precision at h=1e-3; it multiplies analytic and central values
        # alike, so the comparison itself is unchanged.
        delta = plm_offset(f_p, f_i, store, cfg)
        out = decode_masks(f_i, apply_prompt_offset(f_p, delta), store, cfg)
        feat = gather_point_features(out.f_dt, jittered.points, size)
        refined = boundary_transform(feat, jittered.points, store, rcfg, size)
        frag = seg_loss(out.mask_logits, out.iou_pred, mask, select=chosen,
                        iou_targets=targets)
        pm = point_matching_loss(contour.points, refined, assignment=pairing)
        return (frag.seg + pm) * 0.0625

    adapter = [t for name, t in sorted(store.items()) if name.startswith("adapter.")]
    refiner = [t for name, t in sorted(store.items()) if name.startswith("refiner.")]
    return [("loss-wrt-adapter", objective, adapter),
            ("loss-wrt-refiner", objective, refiner)]


def run_gradcheck(full: bool = False, n_probes: int = 100, seed: int = 0) -> list[CheckResult]:
    """Run the battery; ``full`` adds the end-to-end model checks.

    Every check compares analytic gradients against central differences at
    h=1e-3 over up to ``n_probes`` coordinates per tensor and reports the
    worst relative error.
    """
    checks = _primitive_checks(seed)
    if full:
        checks += _model_checks(seed)
    results = []
    for name, objective, leaves in checks:
        start = time.perf_counter()
        err = T.finite_diff_check(objective, leaves, n_probes=n_probes, seed=seed)
        results.append(CheckResult(name=name, max_err=float(err), n_tensors=len(leaves),
                                   seconds=time.perf_counter() - start))
    return results
