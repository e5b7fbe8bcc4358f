"""Command-line surface: data generation, training, evaluation, and checks.

Every subcommand exits 0 on success. Failures print one machine-readable
JSON object to stderr — ``{"error": <kind>, "message": <detail>}`` — and
exit nonzero, including argument-parsing problems.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .checks import TOLERANCE, run_gradcheck
from .errors import FormatError, InputError, PromptsegError
from .evaluate import (cross_task_eval, emit_heatmap, eval_miou, iou_map_sweep,
                       samf_checkpoint, samf_fit)
from .synth import TaskSpec, generate, read_dataset, read_pgm, write_dataset
from .trainer import (adapt_recipe, finetune_decoder, finetune_recipe, load_checkpoint,
                      pretrain_backbone, pretrain_recipe, save_checkpoint, train_adapter)


class _Parser(argparse.ArgumentParser):
    """Parser whose usage errors raise instead of printing + exiting."""

    def error(self, message):
        raise InputError(message)


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_gen_data(args) -> int:
    spec = TaskSpec(task=args.task, count=args.count, seed=args.seed)
    samples = generate(spec)
    out = write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def _log_path(ckpt_path: str) -> Path:
    return Path(str(ckpt_path) + ".log.jsonl")


def _cmd_pretrain(args) -> int:
    samples = read_dataset(args.data)
    ckpt = pretrain_backbone(samples, BackboneConfig(), pretrain_recipe(args.steps),
                             log_path=_log_path(args.out))
    path = save_checkpoint(ckpt, args.out)
    print(f"pretrained {args.steps} steps on {len(samples)} samples -> {path}")
    return 0


def _cmd_adapt(args) -> int:
    base = load_checkpoint(args.backbone)
    samples = read_dataset(args.data)
    ckpt = train_adapter(base, samples, adapt_recipe(args.steps, lam=args.lam),
                         log_path=_log_path(args.out))
    path = save_checkpoint(ckpt, args.out)
    print(f"adapted {args.steps} steps (lambda={args.lam}) on "
          f"{len(samples)} samples -> {path}")
    return 0


def _cmd_finetune_decoder(args) -> int:
    base = load_checkpoint(args.backbone)
    samples = read_dataset(args.data)
    ckpt = finetune_decoder(base, samples, finetune_recipe(args.steps),
                            log_path=_log_path(args.out))
    path = save_checkpoint(ckpt, args.out)
    print(f"fine-tuned decoder {args.steps} steps on {len(samples)} samples -> {path}")
    return 0


def _report_payload(report, protocols) -> dict:
    """Serializable report restricted to the requested protocols."""
    keep = [p for p in ("standard", "oracle", "refined") if p in protocols]
    rows = [{k: v for k, v in row.items() if k in ("instance_id", "task") or k in keep}
            for row in report.per_sample]
    return {
        "miou": {task: {p: vals[p] for p in keep if p in vals}
                 for task, vals in report.miou.items()},
        "n_samples": report.n_samples,
        "per_sample": rows,
        "config_hash": report.config_hash,
        "checkpoint_id": report.checkpoint_id,
    }


def _write_report(payload: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def _print_miou(payload: dict) -> None:
    for task, vals in payload["miou"].items():
        scores = " ".join(f"{p}={vals[p]:.4f}" for p in vals)
        print(f"task {task}: {scores} (n={payload['n_samples'][task]})")


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    samples = read_dataset(args.data)
    mode = "refined" if args.refine else "standard"
    report = eval_miou(ckpt, samples, mode=mode)
    protocols = ["standard"]
    if args.oracle:
        protocols.append("oracle")
    if args.refine:
        protocols.append("refined")
    payload = _report_payload(report, protocols)
    path = _write_report(payload, args.report)
    _print_miou(payload)
    print(f"report -> {path}")
    return 0


def _cmd_cross_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    samples = read_dataset(args.data)
    report = cross_task_eval(ckpt, samples)
    payload = _report_payload(report, ["standard"])
    path = _write_report(payload, args.report)
    _print_miou(payload)
    print(f"report -> {path}")
    return 0


def _read_mask_pgm(path) -> np.ndarray:
    raw = read_pgm(path)
    bad = set(np.unique(raw)) - {0, 255}
    if bad:
        raise FormatError(f"{path}: mask values must be 0 or 255, found {sorted(bad)}")
    return raw == 255


def _cmd_sweep(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    image = read_pgm(args.image).astype(np.float32) / 255.0
    gt = _read_mask_pgm(args.gt)
    iomap = iou_map_sweep(ckpt, image, gt, args.stride)
    pgm, csv = emit_heatmap(iomap, args.out)
    print(f"swept {iomap.values.size} prompts at stride {args.stride} -> {pgm}, {csv}")
    return 0


def _cmd_samf(args) -> int:
    base = load_checkpoint(args.backbone)
    samples = read_dataset(args.data)
    params = samf_fit(base, samples)
    path = save_checkpoint(samf_checkpoint(base, params), args.out)
    print(f"fitted blend w1={params.w1:.4f} w2={params.w2:.4f} "
          f"w3={1.0 - params.w1 - params.w2:.4f} -> {path}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_gradcheck(full=args.full)
    for r in results:
        flag = "ok  " if r.ok else "FAIL"
        print(f"{flag} {r.name:18s} max_err={r.max_err:.3e} "
              f"tensors={r.n_tensors} ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(json.dumps({"error": "GradcheckFailed",
                          "message": f"{len(failed)} checks exceeded {TOLERANCE}: "
                                     + ", ".join(failed)}), file=sys.stderr)
        return 1
    print(f"{len(results)} checks passed (tolerance {TOLERANCE})")
    return 0


# ---------------------------------------------------------------------------
# parser assembly


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="promptseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--task", required=True,
                   help="task family: generic, subpart, banner, or plate")
    p.add_argument("--count", required=True, type=int, help="number of scenes")
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain a backbone from scratch")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--steps", required=True, type=int)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("adapt", help="train prompt-offset and boundary modules")
    p.add_argument("--backbone", required=True, help="pretrained checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--steps", required=True, type=int)
    p.add_argument("--lambda", dest="lam", required=True, type=float,
                   help="weight of the point-matching term")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=_cmd_adapt)

    p = sub.add_parser("finetune-decoder", help="decoder fine-tuning baseline")
    p.add_argument("--backbone", required=True, help="pretrained checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--steps", required=True, type=int)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0,
                   help="accepted for symmetry with adapt; unused")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=_cmd_finetune_decoder)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--oracle", action="store_true",
                   help="also report best-of-three candidate scores")
    p.add_argument("--refine", action="store_true",
                   help="also report scores after two-step boundary refinement")
    p.add_argument("--report", required=True, help="output JSON path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="IoU map over strided prompt positions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="input image (binary PGM)")
    p.add_argument("--gt", required=True, help="ground-truth mask (binary PGM)")
    p.add_argument("--stride", required=True, type=int)
    p.add_argument("--out", required=True, help="output prefix for .pgm/.csv")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("samf", help="fit the fixed three-mask blend baseline")
    p.add_argument("--backbone", required=True, help="pretrained checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=_cmd_samf)

    p = sub.add_parser("cross-eval", help="standard protocol on another task's data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--report", required=True, help="output JSON path")
    p.set_defaults(func=_cmd_cross_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient battery")
    p.add_argument("--full", action="store_true",
                   help="include the end-to-end model checks")
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except PromptsegError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1
    except OSError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
