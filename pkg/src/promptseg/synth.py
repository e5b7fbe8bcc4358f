"""Deterministic synthetic scenes for training and evaluating the model.

Four task families, all 64x64 grayscale in [0, 1]:

- ``generic``: 1-4 non-overlapping shapes per scene. About 30% of the
  shapes carry a clearly visible inner sub-shape, and such composites
  emit two samples over the same image -- whole mask and part mask -- so
  a model trained on the corpus sees both granularities for one prompt.
- ``subpart``: one bright ellipse with a faint inner disk and a faint
  stripe. The ground truth is always the inner disk, whose contrast is
  deliberately low; a model without task adaptation tends to return the
  dominant outer contour instead.
- ``banner``: a bright affinely-placed parallelogram with dark marks
  inside it, over a cluttered background; ground truth is the exact
  rasterization of the parallelogram.
- ``plate``: a small bright rectangle on a large dark one; ground truth
  is the small rectangle.

Datasets serialize as binary PGM (P5, maxval 255; masks use {0, 255})
plus a JSONL manifest. Images are quantized to the 8-bit grid at
generation time so write->read is exact. All generation is a pure
function of (spec, seed); file bytes are identical across runs.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, FormatError, InputError
from .point_refiner import rasterize_polygon

__all__ = [
    "TaskSpec", "Sample", "gen_generic", "gen_subpart", "gen_banner",
    "gen_plate", "generate", "write_pgm", "read_pgm", "write_dataset",
    "read_dataset", "split_dataset", "split_exact", "scene_key",
]

logger = logging.getLogger("promptseg.synth")

_GRID = None


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size]
    return yy.astype(np.float64), xx.astype(np.float64)


@dataclass
class TaskSpec:
    """What to generate: task family, scene count, seed, image size.

    ``params`` overrides per-task constants (noise level, contrast
    ranges, composite probability); unset keys fall back to defaults.
    """

    task: str
    count: int
    seed: int
    size: int = 64
    params: dict = field(default_factory=dict)

    def get(self, key, default):
        return self.params.get(key, default)


@dataclass
class Sample:
    """One training/eval case: an image, its target mask, and identity."""

    image: np.ndarray          # (H, W) float32 in [0, 1], on the 8-bit grid
    mask: np.ndarray           # (H, W) bool, non-empty
    task: str
    instance_id: str
    meta: dict | None = None   # in-process extras (shape params); never serialized


def scene_key(instance_id: str) -> str:
    """Samples sharing an image share this key; splits keep them together."""
    return instance_id.rsplit("-", 1)[0]


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _check_count(spec: TaskSpec):
    if spec.count < 1:
        raise InputError(f"count must be >= 1, got {spec.count}")


# ---------------------------------------------------------------------------
# shape rasterizers (pixel-center membership; all convex, hence connected)


def _disk(size, cx, cy, r):
    yy, xx = _grid(size)
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def _ellipse(size, cx, cy, a, b):
    yy, xx = _grid(size)
    return ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0


def _rot_rect(size, cx, cy, ha, hb, theta):
    yy, xx = _grid(size)
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (np.abs(u) <= ha) & (np.abs(v) <= hb)


def _triangle(size, verts):
    yy, xx = _grid(size)
    inside = np.ones((size, size), bool)
    v = np.asarray(verts, np.float64)
    for i in range(3):
        x1, y1 = v[i]
        x2, y2 = v[(i + 1) % 3]
        cross = (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1)
        inside &= cross >= 0 if _shoelace3(v) > 0 else cross <= 0
    return inside


def _shoelace3(v):
    return 0.5 * ((v[1, 0] - v[0, 0]) * (v[2, 1] - v[0, 1])
                  - (v[2, 0] - v[0, 0]) * (v[1, 1] - v[0, 1]))


def _contrasting(rng, base, lo=0.15, hi=0.45):
    """A gray level at least ``lo`` away from ``base``."""
    step = rng.uniform(lo, hi) * (1.0 if rng.random() < 0.5 else -1.0)
    value = base + step
    if not 0.03 <= value <= 0.97:
        value = base - step
    return float(np.clip(value, 0.03, 0.97))


# ---------------------------------------------------------------------------
# generic corpus


def _sample_object(rng, size):
    """One random convex shape with inradius >= 4.5, fully in frame."""
    kind = ("disk", "rect", "tri")[rng.integers(0, 3)]
    if kind == "disk":
        r = rng.uniform(6.0, 11.0)
        cx = rng.uniform(r + 1.5, size - 2.5 - r)
        cy = rng.uniform(r + 1.5, size - 2.5 - r)
        return _disk(size, cx, cy, r)
    if kind == "rect":
        ha = rng.uniform(4.5, 10.0)
        hb = rng.uniform(4.5, 8.0)
        theta = rng.uniform(0.0, np.pi)
        reach = float(np.hypot(ha, hb))
        cx = rng.uniform(reach + 1.5, size - 2.5 - reach)
        cy = rng.uniform(reach + 1.5, size - 2.5 - reach)
        return _rot_rect(size, cx, cy, ha, hb, theta)
    for _ in range(50):
        cx = rng.uniform(14.0, size - 15.0)
        cy = rng.uniform(14.0, size - 15.0)
        ang = np.sort(rng.uniform(0.0, 2 * np.pi, 3))
        rad = rng.uniform(8.0, 13.0, 3)
        v = np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], axis=1)
        area = abs(_shoelace3(v))
        perimeter = sum(np.linalg.norm(v[i] - v[(i + 1) % 3]) for i in range(3))
        if 2.0 * area / perimeter >= 4.6:  # inradius keeps sub-shapes placeable
            return _triangle(size, v)
    return None


def gen_generic(spec: TaskSpec) -> list:
    """Multi-shape scenes; composite shapes emit whole+part sample pairs."""
    _check_count(spec)
    size = spec.size
    p_comp = spec.get("composite_p", 0.3)
    sigma = spec.get("noise_sigma", 0.05)
    out = []
    for i in range(spec.count):
        rng = np.random.default_rng((spec.seed, i))
        bg = rng.uniform(0.25, 0.75)
        img = np.full((size, size), bg, np.float64)
        occupied = np.zeros((size, size), bool)
        scene_samples = []
        n_shapes = int(rng.integers(1, 5))
        for j in range(n_shapes):
            composite = bool(rng.random() < p_comp)
            placed = None
            for _ in range(100):
                mask = _sample_object(rng, size)
                if mask is None or mask.sum() < 16:
                    continue
                if (mask & ndimage.binary_dilation(occupied)).any():
                    continue
                if composite:
                    edt = ndimage.distance_transform_edt(mask)
                    r_in = min(rng.uniform(2.6, 3.4), float(edt.max()) - 1.6)
                    if r_in < 2.3:
                        continue
                    safe = np.argwhere(edt >= r_in + 1.5)
                    if len(safe) == 0:
                        continue
                    iy, ix = safe[rng.integers(0, len(safe))]
                    inner = _disk(size, float(ix), float(iy), r_in)
                    if inner.sum() < 16 or (inner & ~mask).any():
                        continue
                    placed = (mask, inner)
                else:
                    placed = (mask, None)
                break
            if placed is None:
                logger.warning("scene %s-%06d: object %d skipped after 100 placement tries",
                               spec.task, i, j)
                continue
            whole, inner = placed
            gray = _contrasting(rng, bg)
            img[whole] = gray
            occupied |= whole
            base_id = f"{spec.task}-{i:06d}-{j}"
            if inner is None:
                scene_samples.append((base_id, whole))
            else:
                img[inner] = _contrasting(rng, gray, 0.15, 0.35)
                scene_samples.append((base_id + "w", whole))
                scene_samples.append((base_id + "p", inner))
        img = _quantize(img + rng.normal(0.0, sigma, img.shape))
        for sid, mask in scene_samples:
            out.append(Sample(image=img, mask=mask, task=spec.task, instance_id=sid))
    return out


# ---------------------------------------------------------------------------
# subpart task


def gen_subpart(spec: TaskSpec) -> list:
    """Bright ellipse with a faint inner disk (the target) and a faint stripe."""
    _check_count(spec)
    size = spec.size
    lo, hi = spec.get("part_contrast", (0.08, 0.16))
    sigma = spec.get("noise_sigma", 0.05)
    out = []
    for i in range(spec.count):
        rng = np.random.default_rng((spec.seed, i, 1))
        bg = rng.uniform(0.18, 0.38)
        a = rng.uniform(14.0, 20.0)
        b = rng.uniform(10.0, 16.0)
        cx = rng.uniform(a + 3.0, size - 4.0 - a)
        cy = rng.uniform(b + 3.0, size - 4.0 - b)
        body_gray = rng.uniform(0.62, 0.82)
        ellipse = _ellipse(size, cx, cy, a, b)
        inner_ok = ndimage.binary_erosion(ellipse, iterations=2)
        disk = None
        for _ in range(60):
            ratio = rng.uniform(0.08, 0.20)
            r = float(np.sqrt(ratio * a * b))
            dx = cx + rng.uniform(-0.35, 0.35) * a
            dy = cy + rng.uniform(-0.35, 0.35) * b
            cand = _disk(size, dx, dy, r)
            if cand.sum() >= 16 and not (cand & ~inner_ok).any():
                disk = cand
                break
        if disk is None:  # extremely unlikely at these ranges; keep scenes countable
            disk = _disk(size, cx, cy, float(np.sqrt(0.1 * a * b)))
        img = np.full((size, size), bg, np.float64)
        img[ellipse] = body_gray
        y0 = int(rng.uniform(cy - 0.7 * b, cy + 0.4 * b))
        stripe = np.zeros((size, size), bool)
        stripe[max(y0, 0):min(y0 + int(rng.integers(3, 6)), size)] = True
        stripe &= ellipse
        s_sign = 1.0 if rng.random() < 0.5 else -1.0
        img[stripe] = body_gray + s_sign * rng.uniform(lo, hi)
        d_sign = 1.0 if rng.random() < 0.5 else -1.0
        img[disk] = body_gray + d_sign * rng.uniform(lo, hi)
        img = _quantize(img + rng.normal(0.0, sigma, img.shape))
        out.append(Sample(image=img, mask=disk, task=spec.task,
                          instance_id=f"{spec.task}-{i:06d}-0",
                          meta={"ellipse": (cx, cy, a, b),
                                "disk": (dx, dy, r)}))
    return out


# ---------------------------------------------------------------------------
# banner and plate tasks


def gen_banner(spec: TaskSpec) -> list:
    """Affinely placed bright parallelogram with dark marks, cluttered scene."""
    _check_count(spec)
    size = spec.size
    sigma = spec.get("noise_sigma", 0.05)
    out = []
    for i in range(spec.count):
        rng = np.random.default_rng((spec.seed, i, 2))
        bg = rng.uniform(0.2, 0.45)
        img = np.full((size, size), bg, np.float64)
        for _ in range(int(rng.integers(3, 7))):  # background clutter
            r = rng.uniform(3.0, 7.0)
            blob = _disk(size, rng.uniform(0, size), rng.uniform(0, size), r)
            img[blob] = _contrasting(rng, bg, 0.05, 0.15)

        quad = mask = None
        for attempt in range(200):
            hw = rng.uniform(12.0, 20.0)
            hh = rng.uniform(6.0, 12.0)
            theta = rng.uniform(-0.6, 0.6)
            shear = rng.uniform(-0.25, 0.25)
            slack = 8.0 if attempt < 100 else 2.0
            tx = size / 2 + rng.uniform(-slack, slack)
            ty = size / 2 + rng.uniform(-slack, slack)
            rot = np.array([[np.cos(theta), -np.sin(theta)],
                            [np.sin(theta), np.cos(theta)]])
            lin = rot @ np.array([[1.0, shear], [0.0, 1.0]])
            corners = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
            cand = corners @ lin.T + np.array([tx, ty])
            try:
                inside = rasterize_polygon(cand, (size, size))
                full = rasterize_polygon(cand + 2.0 * size, (4 * size, 4 * size))
            except DegenerateInputError:
                continue
            if inside.sum() >= 0.9 * full.sum() and inside.sum() >= 120:
                quad, mask = cand, inside
                break
        if quad is None:
            logger.warning("scene banner-%06d: no in-frame placement found; skipped", i)
            continue

        fill = rng.uniform(0.75, 0.92)
        img[mask] = fill
        marks = []
        want = int(rng.integers(3, 7))
        for _ in range(200):
            if len(marks) >= want:
                break
            u = rng.uniform(-0.72 * hw, 0.72 * hw)
            v = rng.uniform(-0.72 * hh, 0.72 * hh)
            mx, my = np.array([u, v]) @ lin.T + np.array([tx, ty])
            rho = rng.uniform(1.2, 2.2)
            px, py = int(round(mx)), int(round(my))
            if not (0 <= px < size and 0 <= py < size and mask[py, px]):
                continue
            spot = _disk(size, mx, my, rho) & mask
            if spot.sum() < 2:
                continue
            img[spot] = fill - rng.uniform(0.45, 0.55)
            marks.append((float(mx), float(my), float(rho)))
        if len(marks) < 3:
            logger.warning("scene banner-%06d: under 3 marks placed; skipped", i)
            continue
        img = _quantize(img + rng.normal(0.0, sigma, img.shape))
        out.append(Sample(image=img, mask=mask, task=spec.task,
                          instance_id=f"{spec.task}-{i:06d}-0",
                          meta={"quad": tuple(map(tuple, quad)),
                                "marks": marks, "fill": float(fill)}))
    return out


def gen_plate(spec: TaskSpec) -> list:
    """Small bright rectangle on a large dark one, plus bright decoys."""
    _check_count(spec)
    size = spec.size
    sigma = spec.get("noise_sigma", 0.05)
    out = []
    for i in range(spec.count):
        rng = np.random.default_rng((spec.seed, i, 3))
        bg = rng.uniform(0.5, 0.7)
        img = np.full((size, size), bg, np.float64)
        vw = rng.uniform(30.0, 42.0)
        vh = rng.uniform(20.0, 28.0)
        vx0 = rng.uniform(4.0, size - 6.0 - vw)
        vy0 = rng.uniform(10.0, size - 6.0 - vh)
        vx1, vy1 = vx0 + vw, vy0 + vh
        vehicle = np.zeros((size, size), bool)
        vehicle[int(np.ceil(vy0)):int(vy1) + 1, int(np.ceil(vx0)):int(vx1) + 1] = True
        img[vehicle] = rng.uniform(0.12, 0.28)
        for _ in range(int(rng.integers(1, 4))):  # bright decoys off the vehicle
            r = rng.uniform(2.0, 4.0)
            for _ in range(40):
                dx, dy = rng.uniform(r + 1, size - 2 - r), rng.uniform(r + 1, size - 2 - r)
                decoy = _disk(size, dx, dy, r)
                if not (decoy & vehicle).any():
                    img[decoy] = rng.uniform(0.8, 0.95)
                    break
        pw = rng.uniform(10.0, 16.0)
        ph = rng.uniform(4.0, 7.0)
        px0 = rng.uniform(vx0 + 3.0, vx1 - 3.0 - pw)
        py0 = rng.uniform(vy0 + 0.55 * vh, vy1 - 3.0 - ph)
        plate = np.zeros((size, size), bool)
        plate[int(np.ceil(py0)):int(py0 + ph) + 1,
              int(np.ceil(px0)):int(px0 + pw) + 1] = True
        img[plate] = rng.uniform(0.85, 0.95)
        img = _quantize(img + rng.normal(0.0, sigma, img.shape))
        out.append(Sample(image=img, mask=plate, task=spec.task,
                          instance_id=f"{spec.task}-{i:06d}-0",
                          meta={"vehicle": (float(vx0), float(vy0),
                                            float(vx1), float(vy1))}))
    return out


_GENERATORS = {"generic": gen_generic, "subpart": gen_subpart,
               "banner": gen_banner, "plate": gen_plate}


def generate(spec: TaskSpec) -> list:
    """Dispatch to the task family named by ``spec.task``."""
    if spec.task not in _GENERATORS:
        raise InputError(f"unknown task {spec.task!r}; expected one of "
                         f"{sorted(_GENERATORS)}")
    return _GENERATORS[spec.task](spec)


# ---------------------------------------------------------------------------
# PGM + manifest IO


def write_pgm(path, arr: np.ndarray):
    arr = np.asarray(arr)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise InputError(f"PGM wants a 2-D uint8 array, got {arr.dtype} {arr.shape}")
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + arr.tobytes())


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise FormatError(f"{path}: unreadable ({e})") from e
    if not raw.startswith(b"P5"):
        raise FormatError(f"{path}: not a binary PGM (magic must be P5)")
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        token = raw[start:pos]
        if not token.isdigit():
            raise FormatError(f"{path}: bad header token {token!r}")
        fields.append(int(token))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: maxval must be 255, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    payload = raw[pos:]
    if len(payload) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, np.uint8).reshape(h, w).copy()


def write_dataset(samples, out_dir) -> Path:
    """Write images, masks, and ``manifest.jsonl``; returns the directory.

    Samples sharing an image (same scene) share one image file, named by
    a content hash so output bytes do not depend on anything but the data.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        img8 = np.round(np.asarray(s.image, np.float64) * 255.0).astype(np.uint8)
        img_name = f"img-{hashlib.md5(img8.tobytes()).hexdigest()[:16]}.pgm"
        if not (out / img_name).exists():
            write_pgm(out / img_name, img8)
        mask_name = f"{s.instance_id}-mask.pgm"
        write_pgm(out / mask_name, np.where(s.mask, 255, 0).astype(np.uint8))
        rows.append(json.dumps({"image": img_name, "mask": mask_name,
                                "task": s.task, "instance_id": s.instance_id},
                               sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(rows) + "\n")
    return out


def read_dataset(dir_path) -> list:
    """Load a dataset written by ``write_dataset``; validates every file."""
    root = Path(dir_path)
    manifest = root / "manifest.jsonl"
    if not manifest.is_file():
        raise FormatError(f"{manifest}: manifest not found")
    samples = []
    for lineno, line in enumerate(manifest.read_text().split("\n"), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{manifest} line {lineno}: invalid JSON ({e.msg})") from e
        for key in ("image", "mask", "task", "instance_id"):
            if key not in row:
                raise FormatError(f"{manifest} line {lineno}: missing key {key!r}")
        img8 = read_pgm(root / row["image"])
        mask8 = read_pgm(root / row["mask"])
        bad = set(np.unique(mask8)) - {0, 255}
        if bad:
            raise FormatError(f"{root / row['mask']} (manifest line {lineno}): "
                              f"mask values must be 0 or 255, found {sorted(bad)}")
        if img8.shape != mask8.shape:
            raise FormatError(f"{manifest} line {lineno}: image {img8.shape} and "
                              f"mask {mask8.shape} differ in size")
        samples.append(Sample(image=(img8.astype(np.float32) / 255.0),
                              mask=mask8 == 255, task=row["task"],
                              instance_id=row["instance_id"]))
    return samples


# ---------------------------------------------------------------------------
# train/val split


def split_dataset(samples, val_fraction: float = 0.2):
    """Hash-of-scene split: stable across runs, scene-disjoint by design."""
    cut = int(round(val_fraction * 100))
    train, val = [], []
    for s in samples:
        digest = hashlib.md5(scene_key(s.instance_id).encode()).digest()
        bucket = int.from_bytes(digest[:4], "big") % 100
        (val if bucket < cut else train).append(s)
    return train, val


def split_exact(samples, n_train: int, n_val: int):
    """Hash split truncated to exact sizes (keeps input order)."""
    train, val = split_dataset(samples)
    if len(train) < n_train or len(val) < n_val:
        raise InputError(f"split produced {len(train)}/{len(val)} samples; "
                         f"need at least {n_train}/{n_val}")
    return train[:n_train], val[:n_val]
