"""Boundary-point mask refinement.

A predicted mask is converted to a closed contour, resampled to a fixed
number of points at uniform arc length, and each point is moved by a
small transformer conditioned on image features sampled at the point.
The moved points are rasterized back into a mask. Applied twice, the
second pass starts from the once-refined mask.

Pixel coordinates are ``(x, y)`` with ``x`` along columns and ``y`` along
rows; masks and feature maps are indexed ``[row, col]``.

The offset head's final layer starts at zero, so an untrained refiner is
an exact identity on the points it is given.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.measure import find_contours

from . import tensor as T
from .errors import DegenerateInputError, InputError
from .params import ParamStore, add_attention, add_layer_norm, add_linear, attention_view

__all__ = [
    "ContourPointSet", "RefinerConfig", "init_refiner",
    "contour_polyline", "extract_contour", "default_jitter_sigma",
    "jitter_points", "gather_point_features", "boundary_transform",
    "rasterize_polygon", "coarsen_mask", "refine_mask_twostep",
]


@dataclass
class ContourPointSet:
    """An ordered ring of boundary points on an image.

    ``points`` is ``(K, 2)`` float32 in ``(x, y)`` pixel coordinates.
    ``live`` optionally holds the same points as a graph tensor so a loss
    can differentiate through the module that produced them.
    """

    points: np.ndarray
    image_size: tuple
    live: T.Tensor | None = None


@dataclass
class RefinerConfig:
    channels: int = 64      # feature channels sampled per point
    points: int = 32        # contour points K
    width: int = 32         # transformer width
    heads: int = 4
    blocks: int = 3
    jitter_frac: float = 0.02  # training-time jitter as a fraction of the image diagonal


def init_refiner(cfg: RefinerConfig, seed: int = 0) -> ParamStore:
    """Create refiner parameters under the ``refiner.`` namespace."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    add_linear(store, "refiner.in_proj", rng, cfg.channels + 2, cfg.width)
    for b in range(cfg.blocks):
        blk = f"refiner.block{b}"
        add_attention(store, blk + ".attn", rng, cfg.width)
        add_layer_norm(store, blk + ".ln1", cfg.width)
        add_linear(store, blk + ".mlp.fc1", rng, cfg.width, 4 * cfg.width)
        add_linear(store, blk + ".mlp.fc2", rng, 4 * cfg.width, cfg.width)
        add_layer_norm(store, blk + ".ln2", cfg.width)
    add_linear(store, "refiner.head.fc1", rng, cfg.width, cfg.width)
    add_linear(store, "refiner.head.fc2", rng, cfg.width, cfg.width)
    add_linear(store, "refiner.head.out", rng, cfg.width, 2, zero=True)
    return store


# ---------------------------------------------------------------------------
# contour extraction


def _shoelace(xy: np.ndarray) -> float:
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def contour_polyline(mask: np.ndarray) -> np.ndarray:
    """Closed boundary polyline of the largest foreground component.

    Returns an ``(N, 2)`` float64 array of ``(x, y)`` vertices with a
    fixed orientation (positive signed area) and a fixed starting vertex
    (lexicographically smallest ``(y, x)``), so equal masks always yield
    the identical polyline. The last vertex is not repeated.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InputError(f"mask must be 2-D, got shape {mask.shape}")
    mask = mask > 0.5 if mask.dtype != bool else mask
    if not mask.any():
        raise InputError("mask has no foreground pixels")
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), bool))
    if n > 1:
        sizes = np.bincount(labels.ravel())[1:]
        mask = labels == (int(np.argmax(sizes)) + 1)
    padded = np.pad(mask.astype(np.float32), 1)
    contours = find_contours(padded, 0.5, fully_connected="high")
    if not contours:
        raise InputError("no contour found at the 0.5 level")
    best = max(contours, key=lambda c: abs(_shoelace(c)))
    if np.allclose(best[0], best[-1]):
        best = best[:-1]
    if len(best) < 3:
        raise DegenerateInputError("contour collapsed to fewer than 3 vertices")
    xy = best[:, ::-1] - 1.0  # (row, col) -> (x, y), undo padding offset
    if _shoelace(xy) < 0:
        xy = xy[::-1]
    start = np.lexsort((xy[:, 0], xy[:, 1]))[0]
    return np.ascontiguousarray(np.roll(xy, -start, axis=0))


def _resample_ring(poly: np.ndarray, k: int) -> np.ndarray:
    """k points at uniform arc length along a closed polyline, starting at
    vertex 0."""
    seg = np.roll(poly, -1, axis=0) - poly
    lens = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    total = cum[-1]
    if total <= 0.0:
        raise DegenerateInputError("contour has zero perimeter")
    targets = np.arange(k) * (total / k)
    idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(poly) - 1)
    t = (targets - cum[idx]) / np.maximum(lens[idx], 1e-12)
    return poly[idx] + t[:, None] * seg[idx]


def extract_contour(mask: np.ndarray, k: int = 32) -> ContourPointSet:
    """Boundary of the largest component, resampled to ``k`` points.

    Raises ``DegenerateInputError`` for ``k < 3`` and ``InputError`` for an
    empty mask.
    """
    if k < 3:
        raise DegenerateInputError(f"a closed contour needs k >= 3 points, got {k}")
    poly = contour_polyline(mask)
    pts = _resample_ring(poly, k).astype(np.float32)
    h, w = np.asarray(mask).shape
    pts[:, 0] = np.clip(pts[:, 0], 0.0, w - 1.0)
    pts[:, 1] = np.clip(pts[:, 1], 0.0, h - 1.0)
    return ContourPointSet(points=pts, image_size=(h, w))


def default_jitter_sigma(image_size: tuple, frac: float = 0.02) -> float:
    h, w = image_size
    return frac * float(np.hypot(h, w))


def jitter_points(ps: ContourPointSet, sigma: float | None = None,
                  seed: int = 0) -> ContourPointSet:
    """Gaussian perturbation of contour points, clamped to the image."""
    if sigma is None:
        sigma = default_jitter_sigma(ps.image_size)
    rng = np.random.default_rng(seed)
    pts = ps.points + rng.normal(0.0, sigma, ps.points.shape).astype(np.float32)
    h, w = ps.image_size
    pts[:, 0] = np.clip(pts[:, 0], 0.0, w - 1.0)
    pts[:, 1] = np.clip(pts[:, 1], 0.0, h - 1.0)
    return ContourPointSet(points=pts.astype(np.float32), image_size=ps.image_size)


# ---------------------------------------------------------------------------
# feature gathering


def gather_point_features(f_dt: T.Tensor, points: np.ndarray,
                          image_size: tuple) -> T.Tensor:
    """Bilinearly sample decoder-side image features at pixel points.

    ``f_dt`` is ``(Hf, Wf, C)``. Sampling treats feature cell ``(r, c)`` as
    centered on pixel ``((c + 0.5) * W / Wf, (r + 0.5) * H / Hf)`` and
    clamps at the border. The result is ``(K, C + 2)``: sampled features
    with the normalized point coordinates ``(x / W, y / H)`` appended.

    The sample weights form a constant matrix, so gradients flow to
    ``f_dt`` through a single matrix product.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InputError(f"points must be (K, 2), got shape {pts.shape}")
    hf, wf, c = f_dt.shape
    h, w = image_size
    u = pts[:, 0] * (wf / w) - 0.5
    v = pts[:, 1] * (hf / h) - 0.5
    x0 = np.floor(u).astype(int)
    y0 = np.floor(v).astype(int)
    wx = u - x0
    wy = v - y0
    weights = np.zeros((len(pts), hf * wf), dtype=np.float64)
    rows = np.arange(len(pts))
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        xi = np.clip(x0 + dx, 0, wf - 1)
        yi = np.clip(y0 + dy, 0, hf - 1)
        wgt = (wx if dx else 1.0 - wx) * (wy if dy else 1.0 - wy)
        np.add.at(weights, (rows, yi * wf + xi), wgt)
    feat = T.matmul(T.Tensor(weights.astype(np.float32)),
                    T.reshape(f_dt, (hf * wf, c)))
    coords = np.stack([pts[:, 0] / w, pts[:, 1] / h], axis=1).astype(np.float32)
    return T.concat([feat, T.Tensor(coords)], axis=1)


# ---------------------------------------------------------------------------
# boundary transformer


def boundary_transform(feat: T.Tensor, base_points: np.ndarray, store: ParamStore,
                       cfg: RefinerConfig, image_size: tuple) -> ContourPointSet:
    """Move each boundary point by a feature-conditioned offset.

    ``feat`` is the ``(K, C + 2)`` output of ``gather_point_features`` for
    ``base_points``. Offsets are predicted in normalized units and scaled
    by the image size; the returned ``points`` are clamped to the image
    while ``live`` keeps the unclamped graph tensor for losses.
    """
    h, w = image_size
    x = T.linear(feat, store["refiner.in_proj.w"], store["refiner.in_proj.b"])
    for b in range(cfg.blocks):
        blk = f"refiner.block{b}"
        attended = T.multi_head_attention(x, x, attention_view(store, blk + ".attn"),
                                          cfg.heads)
        x = T.layer_norm(x + attended, store[blk + ".ln1.g"], store[blk + ".ln1.b"])
        hidden = T.gelu(T.linear(x, store[blk + ".mlp.fc1.w"], store[blk + ".mlp.fc1.b"]))
        x = T.layer_norm(x + T.linear(hidden, store[blk + ".mlp.fc2.w"],
                                      store[blk + ".mlp.fc2.b"]),
                         store[blk + ".ln2.g"], store[blk + ".ln2.b"])
    hidden = T.gelu(T.linear(x, store["refiner.head.fc1.w"], store["refiner.head.fc1.b"]))
    hidden = T.gelu(T.linear(hidden, store["refiner.head.fc2.w"], store["refiner.head.fc2.b"]))
    delta = T.linear(hidden, store["refiner.head.out.w"], store["refiner.head.out.b"])
    scale = T.Tensor(np.array([[w, h]], dtype=np.float32))
    live = T.Tensor(np.asarray(base_points, dtype=np.float32)) + delta * scale
    pts = live.data.copy()
    pts[:, 0] = np.clip(pts[:, 0], 0.0, w - 1.0)
    pts[:, 1] = np.clip(pts[:, 1], 0.0, h - 1.0)
    return ContourPointSet(points=pts, image_size=(h, w), live=live)


# ---------------------------------------------------------------------------
# rasterization


def rasterize_polygon(points: np.ndarray, shape: tuple) -> np.ndarray:
    """Even-odd scanline fill of a closed polygon over pixel centers.

    Edges are half-open in ``y`` (a scanline at ``y`` crosses an edge when
    ``min(y0, y1) <= y < max(y0, y1)``), and each crossing pair
    ``(xa, xb)`` fills integer columns ``ceil(xa) .. ceil(xb) - 1``. Both
    conventions together count every boundary case exactly once, so an
    axis-aligned square with corners on pixel centers fills exactly
    ``side * side`` pixels.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InputError(f"polygon must be (K, 2), got shape {pts.shape}")
    if len(pts) < 3:
        raise DegenerateInputError(f"polygon needs at least 3 points, got {len(pts)}")
    h, w = shape
    x1, y1 = pts[:, 0], pts[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    keep = y1 != y2
    if not keep.any():
        raise DegenerateInputError("all polygon edges are horizontal")
    x1, y1, x2, y2 = x1[keep], y1[keep], x2[keep], y2[keep]
    mask = np.zeros((h, w), dtype=bool)
    y_lo = max(0, int(np.ceil(min(y1.min(), y2.min()))))
    y_hi = min(h - 1, int(np.floor(max(y1.max(), y2.max()))))
    for y in range(y_lo, y_hi + 1):
        crossing = ((y1 <= y) & (y < y2)) | ((y2 <= y) & (y < y1))
        if not crossing.any():
            continue
        t = (y - y1[crossing]) / (y2[crossing] - y1[crossing])
        xs = np.sort(x1[crossing] + t * (x2[crossing] - x1[crossing]))
        for xa, xb in zip(xs[0::2], xs[1::2]):
            lo = max(int(np.ceil(xa)), 0)
            hi = min(int(np.ceil(xb)) - 1, w - 1)
            if lo <= hi:
                mask[y, lo:hi + 1] = True
    if not mask.any():
        raise DegenerateInputError("polygon encloses no pixel centers")
    return mask


# ---------------------------------------------------------------------------
# full refinement


def coarsen_mask(mask: np.ndarray, factor: int = 4) -> np.ndarray:
    """Degrade a mask to a blocky version of itself (majority per block).

    Downsamples by ``factor`` with per-block majority vote, then repeats
    each block back up, so the boundary becomes stair-stepped while the
    covered area stays roughly put. Useful for studying how much boundary
    detail refinement can recover.
    """
    if factor < 1:
        raise InputError(f"factor must be >= 1, got {factor}")
    m = np.asarray(mask, bool)
    if factor == 1:
        return m.copy()
    h, w = m.shape
    ph, pw = (-h) % factor, (-w) % factor
    padded = np.pad(m, ((0, ph), (0, pw)))
    blocks = padded.reshape((h + ph) // factor, factor, (w + pw) // factor, factor)
    majority = blocks.mean(axis=(1, 3)) > 0.5
    out = np.repeat(np.repeat(majority, factor, axis=0), factor, axis=1)
    return out[:h, :w]


def refine_mask_twostep(mask: np.ndarray, f_dt: T.Tensor, store: ParamStore,
                        cfg: RefinerConfig, steps: int = 2) -> np.ndarray:
    """Contour -> gather -> transform -> rasterize, applied ``steps`` times."""
    current = np.asarray(mask)
    size = current.shape
    with T.no_grad():
        for _ in range(steps):
            ring = extract_contour(current, cfg.points)
            feat = gather_point_features(f_dt, ring.points, size)
            moved = boundary_transform(feat, ring.points, store, cfg, size)
            current = rasterize_polygon(moved.points, size)
    return current
