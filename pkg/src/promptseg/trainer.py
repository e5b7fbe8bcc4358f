"""Training loops, optimizer, schedule, prompt sampling, checkpoints.

Three loops share one engine: ``pretrain_backbone`` trains the whole
predictor on generic shapes with argmin-mask selection, ``train_adapter``
trains only the prompt-offset adapter and boundary refiner against a
frozen backbone, and ``finetune_decoder`` is the comparison baseline that
unfreezes the mask decoder instead. Every run is deterministic given
(seed, config, dataset): identical runs produce byte-identical
checkpoints.

Checkpoints are single files: a 4-byte magic, a version word, a JSON
header naming every tensor (dtype, shape, offset, trainable flag) plus a
config snapshot, then the raw little-endian float32 blobs in sorted name
order. No timestamps or environment data are written, so saving the same
state twice yields the same bytes.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass
from math import floor
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensor as T
from .backbone import BackboneConfig, decode_masks, encode_image, encode_prompt, init_backbone
from .errors import ConfigError, ContractError, FormatError, InputError, TrainingDiverged
from .losses import LossBreakdown, total_loss
from .params import ParamStore
from .point_refiner import (RefinerConfig, boundary_transform, default_jitter_sigma,
                            extract_contour, gather_point_features, init_refiner,
                            jitter_points)
from .prompt_adapter import apply_prompt_offset, init_plm, plm_offset

__all__ = [
    "TrainConfig", "lr_at_step", "AdamW", "sample_prompt", "Checkpoint",
    "save_checkpoint", "load_checkpoint", "attach_adapter", "refiner_config_for",
    "pretrain_backbone", "train_adapter", "finetune_decoder",
    "pretrain_recipe", "adapt_recipe", "finetune_recipe",
]

logger = logging.getLogger(__name__)

MAGIC = b"SAMA"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# configuration and schedule


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 0.01
    warmup_steps: int = 250
    total_steps: int = 1000
    batch: int = 4
    gamma: float = 0.1
    lam: float = 1.0           # weight of the point-matching term
    seed: int = 0

    def milestones(self) -> tuple[int, int]:
        return (floor(0.66667 * self.total_steps), floor(0.86666 * self.total_steps))

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.lam < 0:
            raise ConfigError(f"point-term weight must be >= 0, got {self.lam}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.total_steps > 0:
            if not 1 <= self.warmup_steps < self.total_steps:
                raise ConfigError(f"warmup ({self.warmup_steps}) must be shorter "
                                  f"than the run ({self.total_steps})")
            m1, m2 = self.milestones()
            if not m1 < m2:
                raise ConfigError(f"decay milestones must be increasing, got {m1}, {m2}")
        return self


def _fitted_warmup(steps: int) -> int:
    """Standard 250-step warmup, shortened proportionally for tiny runs."""
    return min(250, max(1, steps // 4))


def pretrain_recipe(steps: int = 2000, seed: int = 0) -> TrainConfig:
    """Settings for backbone pretraining on the generic corpus."""
    return TrainConfig(lr=1e-3, warmup_steps=_fitted_warmup(steps),
                       total_steps=steps, lam=0.0, seed=seed)


def adapt_recipe(steps: int = 1000, lam: float = 1.0, seed: int = 0) -> TrainConfig:
    """Settings for adapter training against a frozen backbone."""
    return TrainConfig(lr=2e-4, warmup_steps=_fitted_warmup(steps),
                       total_steps=steps, lam=lam, seed=seed)


def finetune_recipe(steps: int = 1000, seed: int = 0) -> TrainConfig:
    """Settings for the decoder fine-tuning baseline."""
    return TrainConfig(lr=2e-4, warmup_steps=_fitted_warmup(steps),
                       total_steps=steps, lam=0.0, seed=seed)


def lr_at_step(s: int, cfg: TrainConfig) -> float:
    """Warmup then two-milestone decay; the result is an exact float32.

    Linear warmup reaches ``cfg.lr`` at step ``warmup_steps - 1``; the
    rate then drops by ``gamma`` at each milestone (66.667% and 86.666%
    of the run, floored — the step AT the milestone already uses the
    reduced rate).
    """
    if s < cfg.warmup_steps:
        value = cfg.lr * (s + 1) / cfg.warmup_steps
    else:
        value = cfg.lr
        for m in cfg.milestones():
            if s >= m:
                value *= cfg.gamma
    return float(np.float32(value))


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay over a named parameter dict.

    Only the tensors handed to the constructor are ever read or written;
    gradients appearing on other tensors are invisible to it. ``step``
    consumes and clears the gradients of its parameters.
    """

    def __init__(self, params: dict[str, T.Tensor], weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"no gradient for trainable tensor {k!r}")
            g = np.asarray(p.grad, np.float32)
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - lr * (update + self.wd * p.data)).astype(np.float32)
            p.grad = None


# ---------------------------------------------------------------------------
# prompt sampling


def sample_prompt(gt_mask: np.ndarray, rng) -> tuple[float, float]:
    """Draw a foreground pixel with probability proportional to its
    distance from the background, so prompts favour the mask interior.

    ``rng`` is a ``numpy`` Generator or a seed. Returns ``(x, y)``.
    """
    mask = np.asarray(gt_mask, bool)
    if not mask.any():
        raise InputError("cannot sample a prompt from an empty mask")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    weight = ndimage.distance_transform_edt(mask).ravel()
    idx = np.flatnonzero(weight)
    probs = weight[idx] / weight[idx].sum()
    choice = int(rng.choice(idx, p=probs))
    r, c = divmod(choice, mask.shape[1])
    return (float(c), float(r))


# ---------------------------------------------------------------------------
# checkpoint container


@dataclass
class Checkpoint:
    """A parameter store plus the config snapshot it was trained with."""

    store: ParamStore
    config: dict


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    tensors = {}
    blobs = []
    offset = 0
    for name in sorted(ckpt.store):
        t = ckpt.store[name]
        raw = np.ascontiguousarray(t.data.astype("<f4")).tobytes()
        tensors[name] = {"dtype": "<f4", "shape": list(t.data.shape),
                         "offset": offset, "trainable": bool(t.requires_grad)}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": ckpt.config, "tensors": tensors},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.writelines(blobs)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated preamble at offset {len(data)}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version} at offset 4")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    if 16 + hlen > len(data):
        raise FormatError(f"{path}: truncated header at offset 16 "
                          f"({hlen} bytes declared, {len(data) - 16} available)")
    try:
        header = json.loads(data[16:16 + hlen])
    except ValueError as e:
        raise FormatError(f"{path}: malformed header JSON at offset 16: {e}") from e
    base = 16 + hlen
    store = ParamStore()
    for name in sorted(header["tensors"]):
        meta = header["tensors"][name]
        count = int(np.prod(meta["shape"], dtype=np.int64)) if meta["shape"] else 1
        start = base + meta["offset"]
        end = start + 4 * count
        if end > len(data):
            raise FormatError(f"{path}: truncated tensor {name!r} at offset {start}")
        arr = np.frombuffer(data, "<f4", count=count, offset=start)
        store.add(name, arr.reshape(meta["shape"]).copy(), trainable=meta["trainable"])
    return Checkpoint(store=store, config=header["config"])


def attach_adapter(base: ParamStore, ckpt: Checkpoint) -> None:
    """Merge non-backbone tensors of ``ckpt`` into ``base`` (plug-and-play).

    Warns when the adapter was trained against a different backbone than
    the one it is being attached to.
    """
    want = ckpt.config.get("backbone_checksum")
    have = base.checksum("backbone.")
    if want is not None and want != have:
        logger.warning("adapter was trained against backbone %s… but is being "
                       "attached to %s…", want[:12], have[:12])
    for name, t in ckpt.store.items():
        if not name.startswith("backbone."):
            base[name] = t


# ---------------------------------------------------------------------------
# shared training engine


def _mean_scalars(breakdowns: list[LossBreakdown]) -> dict[str, float]:
    keys = ("focal", "dice", "iou_head", "pm", "total")
    acc = {k: 0.0 for k in keys}
    for lb in breakdowns:
        s = lb.scalars()
        for k in keys:
            acc[k] += s[k]
    return {k: v / len(breakdowns) for k, v in acc.items()}


def _run(store: ParamStore, samples, tcfg: TrainConfig, forward, log_path) -> None:
    """Drive ``tcfg.total_steps`` optimization steps of ``forward``.

    ``forward(sample, rng, step, j) -> LossBreakdown`` rebuilds the graph;
    the batch loss is the mean of the per-sample totals.
    """
    if not samples:
        raise InputError("training needs at least one sample")
    tcfg.validate()
    opt = AdamW(store.trainable(), weight_decay=tcfg.weight_decay)
    rng = np.random.default_rng(tcfg.seed)
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        for step in range(tcfg.total_steps):
            lr = lr_at_step(step, tcfg)
            idx = rng.integers(0, len(samples), tcfg.batch)
            breakdowns = [forward(samples[int(i)], rng, step, j)
                          for j, i in enumerate(idx)]
            total = breakdowns[0].total
            for lb in breakdowns[1:]:
                total = total + lb.total
            total = total / float(len(breakdowns))
            if not np.isfinite(total.item()):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}: "
                    + json.dumps(_mean_scalars(breakdowns)))
            total.backward()
            opt.step(lr)
            if log_file is not None:
                row = {"step": step, "lr": lr, **_mean_scalars(breakdowns)}
                log_file.write(json.dumps(row, sort_keys=True) + "\n")
    finally:
        if log_file is not None:
            log_file.close()


def _clone_backbone(src: ParamStore, frozen: bool) -> ParamStore:
    """Copy the ``backbone.`` tensors into a fresh store."""
    out = ParamStore()
    for name, t in src.items():
        if name.startswith("backbone."):
            out.add(name, t.data.copy(),
                    trainable=False if frozen else t.requires_grad)
    return out


def refiner_config_for(bcfg: BackboneConfig) -> RefinerConfig:
    """Boundary-refiner dimensions matching a backbone's channel count."""
    return RefinerConfig(channels=bcfg.channels)


# ---------------------------------------------------------------------------
# training entry points


def pretrain_backbone(samples, bcfg: BackboneConfig, tcfg: TrainConfig,
                      log_path=None) -> Checkpoint:
    """Train every backbone weight on (image, mask) pairs.

    Each prompt is drawn from the sample's own mask and the loss is taken
    on whichever of the three candidate masks fits best (argmin), so
    composite scenes teach the model several granularities per prompt.
    The returned checkpoint is flagged frozen throughout.
    """
    if not samples:
        raise InputError("training needs at least one sample")
    bcfg.validate()
    store = init_backbone(bcfg, seed=tcfg.seed)

    def forward(sample, rng, step, j):
        f_i = encode_image(sample.image, store, bcfg)
        point = sample_prompt(sample.mask, rng)
        f_p = encode_prompt([point], store, bcfg)
        out = decode_masks(f_i, f_p, store, bcfg)
        return total_loss(out.mask_logits, out.iou_pred, sample.mask,
                          None, None, 0.0, select="argmin")

    _run(store, samples, tcfg, forward, log_path)
    store.set_trainable("", False)
    return Checkpoint(store=store,
                      config={"stage": "pretrain", "backbone": asdict(bcfg),
                              "train": asdict(tcfg)})


def train_adapter(backbone: Checkpoint, samples, tcfg: TrainConfig,
                  rcfg: RefinerConfig | None = None, log_path=None) -> Checkpoint:
    """Adapt to a task by training only the prompt-offset adapter and the
    boundary refiner; the backbone is bit-frozen.

    Image features are cached per instance (the encoder never changes),
    ground-truth contours are cached likewise, and the refiner trains on
    jittered contours gathered from the live decoder features. With
    ``tcfg.lam == 0`` the refiner is left untouched at its initialization.
    """
    bcfg = BackboneConfig(**backbone.config["backbone"])
    rcfg = rcfg or refiner_config_for(bcfg)
    if rcfg.channels != bcfg.channels:
        raise ConfigError(f"refiner expects {rcfg.channels} feature channels, "
                          f"backbone provides {bcfg.channels}")
    store = _clone_backbone(backbone.store, frozen=True)
    checksum_before = store.checksum("backbone.")
    store.update(init_plm(bcfg, seed=tcfg.seed))
    store.update(init_refiner(rcfg, seed=tcfg.seed + 1))
    if tcfg.lam == 0.0:
        store.set_trainable("refiner.", False)

    size = (bcfg.image_size, bcfg.image_size)
    sigma = default_jitter_sigma(size, rcfg.jitter_frac)
    features: dict[str, object] = {}
    contours: dict[str, object] = {}

    def forward(sample, rng, step, j):
        sid = sample.instance_id
        if sid not in features:
            with T.no_grad():
                features[sid] = encode_image(sample.image, store, bcfg)
        f_i = features[sid]
        point = sample_prompt(sample.mask, rng)
        f_p = encode_prompt([point], store, bcfg)
        delta = plm_offset(f_p, f_i, store, bcfg)
        out = decode_masks(f_i, apply_prompt_offset(f_p, delta), store, bcfg)
        if tcfg.lam == 0.0:
            return total_loss(out.mask_logits, out.iou_pred, sample.mask,
                              None, None, 0.0, select="best_pred")
        if sid not in contours:
            contours[sid] = extract_contour(sample.mask, rcfg.points)
        gt_contour = contours[sid]
        jittered = jitter_points(gt_contour, sigma=sigma, seed=(tcfg.seed, step, j))
        feat = gather_point_features(out.f_dt, jittered.points, size)
        refined = boundary_transform(feat, jittered.points, store, rcfg, size)
        return total_loss(out.mask_logits, out.iou_pred, sample.mask,
                          gt_contour.points, refined, tcfg.lam, select="best_pred")

    _run(store, samples, tcfg, forward, log_path)
    store.set_trainable("refiner.", True)   # partition label, regardless of lam
    assert store.checksum("backbone.") == checksum_before
    return Checkpoint(store=store,
                      config={"stage": "adapt", "backbone": asdict(bcfg),
                              "refiner": asdict(rcfg), "train": asdict(tcfg),
                              "backbone_checksum": checksum_before})


def finetune_decoder(backbone: Checkpoint, samples, tcfg: TrainConfig,
                     log_path=None) -> Checkpoint:
    """Baseline: unfreeze and train the mask decoder on task data.

    Encoders stay frozen (features are cached), no adapter or refiner is
    involved. Exists to measure how much a small task set overfits when
    the decoder itself moves.
    """
    bcfg = BackboneConfig(**backbone.config["backbone"])
    store = _clone_backbone(backbone.store, frozen=True)
    enc_checksum = store.checksum("backbone.enc.")
    store.set_trainable("backbone.dec.", True)
    features: dict[str, object] = {}

    def forward(sample, rng, step, j):
        sid = sample.instance_id
        if sid not in features:
            with T.no_grad():
                features[sid] = encode_image(sample.image, store, bcfg)
        point = sample_prompt(sample.mask, rng)
        f_p = encode_prompt([point], store, bcfg)
        out = decode_masks(features[sid], f_p, store, bcfg)
        return total_loss(out.mask_logits, out.iou_pred, sample.mask,
                          None, None, 0.0, select="best_pred")

    _run(store, samples, tcfg, forward, log_path)
    assert store.checksum("backbone.enc.") == enc_checksum
    return Checkpoint(store=store,
                      config={"stage": "finetune_decoder", "backbone": asdict(bcfg),
                              "train": asdict(tcfg),
                              "backbone_checksum": enc_checksum})
