"""Shared builders and a small disk cache for the end-to-end test suite.

Training runs that take minutes (backbone pretraining, task adaptation)
are built once and cached under ``tests/.cache`` keyed by their full
configuration plus an initialization fingerprint, so editing the model
or the recipes invalidates stale artifacts automatically. Each cache
entry records the wall-clock seconds measured when the artifact was
actually built; timing assertions read that measurement instead of
re-timing a cache hit.

Pilot scripts may import this module directly to warm the cache.
"""

from __future__ import annotations

import functools
import json
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from promptseg import evaluate as E
from promptseg import synth as S
from promptseg import trainer as TR
from promptseg.backbone import BackboneConfig, init_backbone
from promptseg.cli import _report_payload

CACHE = Path(__file__).resolve().parent / ".cache"
SCHEMA = 1

_SALT = None


def init_fingerprint() -> str:
    """Checksum of a fresh full-size initialization (cache invalidator)."""
    global _SALT
    if _SALT is None:
        _SALT = init_backbone(BackboneConfig(), seed=0).checksum()[:16]
    return _SALT


def cached(name: str, config: dict, build) -> tuple[Path, dict]:
    """Return ``(artifact_path, meta)``, building via ``build(path)`` on miss.

    ``build`` may return a dict of extra metadata; ``meta`` always carries
    the config key and the measured build duration in ``seconds``.
    """
    CACHE.mkdir(exist_ok=True)
    art = CACHE / name
    meta_path = CACHE / (name + ".meta.json")
    key = json.dumps({"schema": SCHEMA, "init": init_fingerprint(), **config},
                     sort_keys=True)
    if art.exists() and meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("key") == key:
            return art, meta
    t0 = time.perf_counter()
    extra = build(art) or {}
    meta = {"key": key, "seconds": time.perf_counter() - t0, **extra}
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return art, meta


# ---------------------------------------------------------------------------
# datasets (deterministic, so regenerated rather than stored)


@functools.lru_cache(maxsize=None)
def generic_train():
    return S.generate(S.TaskSpec(task="generic", count=800, seed=0))


@functools.lru_cache(maxsize=None)
def generic_val():
    return S.generate(S.TaskSpec(task="generic", count=150, seed=1))


@functools.lru_cache(maxsize=None)
def subpart_train_val():
    # generated count leaves slack above the exact 1000/250 hash split
    samples = S.generate(S.TaskSpec(task="subpart", count=1400, seed=7))
    return S.split_exact(samples, 1000, 250)


@functools.lru_cache(maxsize=None)
def banner_train_val():
    samples = S.generate(S.TaskSpec(task="banner", count=520, seed=11))
    return S.split_exact(samples, 400, 40)


# ---------------------------------------------------------------------------
# checkpoints


PRETRAIN_STEPS = 2000
ADAPT_STEPS = 1000
BANNER_STEPS = 800
SMALLSET_STEPS = 600
SMALLSET_IMAGES = 50


def pretrain_checkpoint() -> tuple[TR.Checkpoint, dict]:
    recipe = TR.pretrain_recipe(steps=PRETRAIN_STEPS, seed=0)
    config = {"stage": "pretrain", "task": "generic", "scenes": 800,
              "data_seed": 0, "recipe": asdict(recipe)}

    def build(path):
        ckpt = TR.pretrain_backbone(generic_train(), BackboneConfig(), recipe)
        TR.save_checkpoint(ckpt, path)
        report = E.eval_miou(ckpt, generic_val())
        return {"generic_val_miou": report.miou["generic"]["standard"]}

    path, meta = cached("pretrain.ckpt", config, build)
    return TR.load_checkpoint(path), meta


def adapted_checkpoint() -> tuple[TR.Checkpoint, dict]:
    """Joint adapter+refiner training on the sub-part task."""
    backbone, pmeta = pretrain_checkpoint()
    recipe = TR.adapt_recipe(steps=ADAPT_STEPS, lam=1.0, seed=0)
    config = {"stage": "adapt", "task": "subpart", "split": [1000, 250],
              "data_seed": 7, "gen_count": 1400,
              "recipe": asdict(recipe), "backbone": pmeta["key"]}

    def build(path):
        train, _ = subpart_train_val()
        ckpt = TR.train_adapter(backbone, train, recipe)
        TR.save_checkpoint(ckpt, path)
        return {"backbone_checksum_before": backbone.store.checksum("backbone."),
                "backbone_checksum_after": ckpt.store.checksum("backbone.")}

    path, meta = cached("adapted-subpart.ckpt", config, build)
    return TR.load_checkpoint(path), meta


def shortadapt_checkpoint() -> tuple[TR.Checkpoint, dict]:
    """A deliberately short adaptation run for invariance checks."""
    backbone, pmeta = pretrain_checkpoint()
    recipe = TR.adapt_recipe(steps=200, lam=1.0, seed=3)
    config = {"stage": "adapt", "task": "subpart", "n_train": 50,
              "data_seed": 19, "recipe": asdict(recipe), "backbone": pmeta["key"]}

    def build(path):
        train = S.generate(S.TaskSpec(task="subpart", count=50, seed=19))
        ckpt = TR.train_adapter(backbone, train, recipe)
        TR.save_checkpoint(ckpt, path)
        return {"backbone_checksum_before": backbone.store.checksum("backbone."),
                "backbone_checksum_after": ckpt.store.checksum("backbone.")}

    path, meta = cached("adapted-short.ckpt", config, build)
    return TR.load_checkpoint(path), meta


def banner_checkpoint() -> tuple[TR.Checkpoint, dict]:
    backbone, pmeta = pretrain_checkpoint()
    recipe = TR.adapt_recipe(steps=BANNER_STEPS, lam=1.0, seed=0)
    config = {"stage": "adapt", "task": "banner", "split": [400, 40],
              "data_seed": 11, "recipe": asdict(recipe), "backbone": pmeta["key"]}

    def build(path):
        train, _ = banner_train_val()
        ckpt = TR.train_adapter(backbone, train, recipe)
        TR.save_checkpoint(ckpt, path)
        return {}

    path, meta = cached("adapted-banner.ckpt", config, build)
    return TR.load_checkpoint(path), meta


def smallset_checkpoints() -> tuple[TR.Checkpoint, TR.Checkpoint, dict]:
    """Adapter vs decoder fine-tune trained on the same small image set."""
    backbone, pmeta = pretrain_checkpoint()
    recipe = TR.adapt_recipe(steps=SMALLSET_STEPS, lam=0.0, seed=0)
    ft_recipe = TR.finetune_recipe(steps=SMALLSET_STEPS, seed=0)
    config = {"stage": "smallset", "task": "subpart", "n_train": SMALLSET_IMAGES,
              "data_seed": 23, "recipe": asdict(recipe),
              "ft_recipe": asdict(ft_recipe), "backbone": pmeta["key"]}

    def build(path):
        train = S.generate(S.TaskSpec(task="subpart", count=SMALLSET_IMAGES, seed=23))
        plm = TR.train_adapter(backbone, train, recipe)
        ft = TR.finetune_decoder(backbone, train, ft_recipe)
        path.mkdir(exist_ok=True)
        TR.save_checkpoint(plm, path / "plm.ckpt")
        TR.save_checkpoint(ft, path / "ft.ckpt")
        return {}

    path, meta = cached("smallset", config, build)
    return (TR.load_checkpoint(path / "plm.ckpt"),
            TR.load_checkpoint(path / "ft.ckpt"), meta)


# ---------------------------------------------------------------------------
# evaluation reports (cached as the same JSON payload the CLI writes)


def cached_report(name: str, config: dict, ckpt, samples, mode: str) -> tuple[dict, dict]:
    def build(path):
        report = E.eval_miou(ckpt, samples, mode=mode)
        protocols = ("standard", "oracle", "refined") if mode == "refined" \
            else ("standard", "oracle")
        path.write_text(json.dumps(_report_payload(report, protocols),
                                   sort_keys=True, indent=2) + "\n")
        return {}

    path, meta = cached(name, config, build)
    return json.loads(path.read_text()), meta


def subpart_reports() -> dict:
    """Frozen, adapted-standard, and adapted-refined reports on sub-part val.

    Returns ``{"frozen", "adapted", "refined"}`` payloads plus a ``.meta``
    twin for each, and ``adapt_meta`` for the training run itself.
    """
    backbone, pmeta = pretrain_checkpoint()
    adapted, ameta = adapted_checkpoint()
    _, val = subpart_train_val()
    out = {"adapt_meta": ameta}
    out["frozen"], out["frozen_meta"] = cached_report(
        "report-subpart-frozen.json",
        {"ckpt": pmeta["key"], "mode": "standard", "n": len(val)},
        backbone, val, "standard")
    out["adapted"], out["adapted_meta"] = cached_report(
        "report-subpart-adapted.json",
        {"ckpt": ameta["key"], "mode": "standard", "n": len(val)},
        adapted, val, "standard")
    out["refined"], out["refined_meta"] = cached_report(
        "report-subpart-refined.json",
        {"ckpt": ameta["key"], "mode": "refined", "n": len(val)},
        adapted, val, "refined")
    return out


def cached_refinement_study() -> tuple[dict, dict]:
    """Refinement effect on normal and coarsened predictions, sub-part val."""
    adapted, ameta = adapted_checkpoint()
    _, val = subpart_train_val()
    config = {"ckpt": ameta["key"], "n": len(val), "coarsen": 4}

    def build(path):
        study = E.refinement_study(adapted, val, coarsen_factor=4)
        path.write_text(json.dumps(study, sort_keys=True, indent=2) + "\n")
        return {}

    path, meta = cached("refinement-study.json", config, build)
    return json.loads(path.read_text()), meta


def smallset_gaps() -> tuple[dict, dict]:
    """Train/val mIoU for adapter-only vs decoder fine-tune checkpoints."""
    plm, ft, smeta = smallset_checkpoints()
    config = {"runs": smeta["key"], "val_seed": 29, "n_val": 100}

    def build(path):
        train = S.generate(S.TaskSpec(task="subpart", count=SMALLSET_IMAGES, seed=23))
        val = S.generate(S.TaskSpec(task="subpart", count=100, seed=29))
        scores = {}
        for tag, ckpt in (("plm", plm), ("ft", ft)):
            for split, samples in (("train", train), ("val", val)):
                report = E.eval_miou(ckpt, samples)
                scores[f"{tag}_{split}"] = report.miou["subpart"]["standard"]
        path.write_text(json.dumps(scores, sort_keys=True, indent=2) + "\n")
        return {}

    path, meta = cached("smallset-gaps.json", config, build)
    return json.loads(path.read_text()), meta


# ---------------------------------------------------------------------------
# banner prompt-position sweeps


SWEEP_IMAGES = 4


def banner_sweeps() -> tuple[dict, dict]:
    """Stride-2 IoU maps for frozen and banner-adapted checkpoints.

    The payload holds, per validation image, both maps plus the
    prompt-position grid restricted to the GT quadrilateral; meta records
    the per-image sweep seconds measured for the adapted model.
    """
    backbone, pmeta = pretrain_checkpoint()
    adapted, ameta = banner_checkpoint()
    _, val = banner_train_val()
    images = val[:SWEEP_IMAGES]
    config = {"stride": 2, "images": [s.instance_id for s in images],
              "frozen": pmeta["key"], "adapted": ameta["key"]}

    def build(path):
        arrays = {}
        seconds = []
        for i, s in enumerate(images):
            t0 = time.perf_counter()
            adapted_map = E.iou_map_sweep(adapted, s.image, s.mask, stride=2)
            seconds.append(time.perf_counter() - t0)
            frozen_map = E.iou_map_sweep(backbone, s.image, s.mask, stride=2)
            arrays[f"adapted{i}"] = adapted_map.values
            arrays[f"frozen{i}"] = frozen_map.values
            arrays[f"inquad{i}"] = s.mask[::2, ::2]
        np.savez(path, **arrays)
        return {"seconds_per_image": seconds, "n_images": len(images)}

    path, meta = cached("banner-sweeps.npz", config, build)
    with np.load(path) as data:
        payload = {k: data[k] for k in data.files}
    return payload, meta
