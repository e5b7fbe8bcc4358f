"""End-to-end command-line behavior, run in-process through ``main``."""

import json

import numpy as np
import pytest

from promptseg.cli import main
from promptseg.evaluate import samf_params_from
from promptseg.synth import read_dataset, read_pgm, write_pgm
from promptseg.trainer import load_checkpoint


def stderr_error(capsys) -> dict:
    err = capsys.readouterr().err.strip().splitlines()[-1]
    payload = json.loads(err)
    assert set(payload) == {"error", "message"}
    return payload


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny dataset plus briefly trained checkpoints, built via the CLI."""
    root = tmp_path_factory.mktemp("cli-ws")
    data = root / "data"
    assert main(["gen-data", "--task", "generic", "--count", "2",
                 "--seed", "1", "--out", str(data)]) == 0
    backbone = root / "backbone.ckpt"
    assert main(["pretrain", "--data", str(data), "--steps", "4",
                 "--out", str(backbone)]) == 0
    adapted = root / "adapted.ckpt"
    assert main(["adapt", "--backbone", str(backbone), "--data", str(data),
                 "--steps", "4", "--lambda", "1.0", "--out", str(adapted)]) == 0
    return {"root": root, "data": data, "backbone": backbone, "adapted": adapted}


def test_gen_data_writes_a_readable_dataset(workspace):
    samples = read_dataset(workspace["data"])
    assert len(samples) >= 2
    assert all(s.task == "generic" for s in samples)


def test_gen_data_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--task", "subpart", "--count", "3",
                     "--seed", "9", "--out", str(tmp_path / name)]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    files_a = sorted(p.name for p in a.iterdir())
    assert files_a == sorted(p.name for p in b.iterdir())
    for name in files_a:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_gen_data_rejects_unknown_task(tmp_path, capsys):
    rc = main(["gen-data", "--task", "nonsense", "--count", "1",
               "--seed", "0", "--out", str(tmp_path / "d")])
    assert rc == 1
    payload = stderr_error(capsys)
    assert "nonsense" in payload["message"]


def test_pretrain_writes_checkpoint_and_log(workspace):
    ckpt = load_checkpoint(workspace["backbone"])
    assert ckpt.config["stage"] == "pretrain"
    log_lines = (workspace["root"] / "backbone.ckpt.log.jsonl").read_text().splitlines()
    assert len(log_lines) == 4
    row = json.loads(log_lines[0])
    assert set(row) == {"step", "lr", "focal", "dice", "iou_head", "pm", "total"}


def test_adapt_adds_modules_and_keeps_backbone_bits(workspace):
    base = load_checkpoint(workspace["backbone"])
    adapted = load_checkpoint(workspace["adapted"])
    assert "adapter.mlp.fc2.w" in adapted.store
    assert "refiner.head.out.w" in adapted.store
    assert adapted.store.checksum("backbone.") == base.store.checksum("backbone.")


def test_adapt_is_deterministic_at_the_byte_level(workspace, tmp_path):
    out1, out2 = tmp_path / "r1.ckpt", tmp_path / "r2.ckpt"
    for out in (out1, out2):
        assert main(["adapt", "--backbone", str(workspace["backbone"]),
                     "--data", str(workspace["data"]), "--steps", "4",
                     "--lambda", "1.0", "--out", str(out)]) == 0
    assert out1.read_bytes() == out2.read_bytes()


def test_finetune_decoder_runs(workspace, tmp_path):
    out = tmp_path / "dec.ckpt"
    rc = main(["finetune-decoder", "--backbone", str(workspace["backbone"]),
               "--data", str(workspace["data"]), "--steps", "4", "--out", str(out)])
    assert rc == 0
    assert load_checkpoint(out).config["stage"] == "finetune_decoder"


def test_eval_report_respects_protocol_flags(workspace, tmp_path):
    base = ["eval", "--ckpt", str(workspace["adapted"]),
            "--data", str(workspace["data"])]
    plain = tmp_path / "plain.json"
    assert main(base + ["--report", str(plain)]) == 0
    payload = json.loads(plain.read_text())
    assert set(payload) == {"miou", "n_samples", "per_sample",
                            "config_hash", "checkpoint_id"}
    for vals in payload["miou"].values():
        assert set(vals) == {"standard"}
    assert sum(payload["n_samples"].values()) == len(payload["per_sample"])

    rich = tmp_path / "rich.json"
    assert main(base + ["--oracle", "--refine", "--report", str(rich)]) == 0
    payload = json.loads(rich.read_text())
    for vals in payload["miou"].values():
        assert set(vals) == {"standard", "oracle", "refined"}
        assert vals["oracle"] >= vals["standard"]
    for row in payload["per_sample"]:
        assert set(row) == {"instance_id", "task", "standard", "oracle", "refined"}


def test_eval_reports_are_byte_identical(workspace, tmp_path):
    paths = [tmp_path / "e1.json", tmp_path / "e2.json"]
    for p in paths:
        assert main(["eval", "--ckpt", str(workspace["adapted"]), "--data",
                     str(workspace["data"]), "--oracle", "--report", str(p)]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_eval_missing_dataset_is_json_error(workspace, tmp_path, capsys):
    rc = main(["eval", "--ckpt", str(workspace["adapted"]),
               "--data", str(tmp_path / "absent"), "--report", str(tmp_path / "r.json")])
    assert rc == 1
    assert stderr_error(capsys)["error"] == "FormatError"


def test_sweep_emits_heatmap_and_csv(workspace, tmp_path):
    rng = np.random.default_rng(0)
    image = rng.integers(0, 100, (64, 64)).astype(np.uint8)
    image[20:44, 16:48] = 220
    gt = np.zeros((64, 64), np.uint8)
    gt[20:44, 16:48] = 255
    write_pgm(tmp_path / "img.pgm", image)
    write_pgm(tmp_path / "gt.pgm", gt)
    rc = main(["sweep", "--ckpt", str(workspace["adapted"]),
               "--image", str(tmp_path / "img.pgm"), "--gt", str(tmp_path / "gt.pgm"),
               "--stride", "16", "--out", str(tmp_path / "map")])
    assert rc == 0
    heat = read_pgm(tmp_path / "map.pgm")
    assert heat.shape == (4, 4)
    rows = (tmp_path / "map.csv").read_text().strip().splitlines()
    assert len(rows) == 16
    for line in rows:
        r, c, v = line.split(",")
        assert 0.0 <= float(v) <= 1.0


def test_sweep_rejects_nonbinary_mask(workspace, tmp_path, capsys):
    arr = np.zeros((64, 64), np.uint8)
    arr[10, 10] = 7
    write_pgm(tmp_path / "img.pgm", np.full((64, 64), 50, np.uint8))
    write_pgm(tmp_path / "bad.pgm", arr)
    rc = main(["sweep", "--ckpt", str(workspace["adapted"]),
               "--image", str(tmp_path / "img.pgm"), "--gt", str(tmp_path / "bad.pgm"),
               "--stride", "16", "--out", str(tmp_path / "map")])
    assert rc == 1
    payload = stderr_error(capsys)
    assert payload["error"] == "FormatError" and "7" in payload["message"]


def test_samf_writes_blend_checkpoint(workspace, tmp_path):
    out = tmp_path / "blend.ckpt"
    rc = main(["samf", "--backbone", str(workspace["backbone"]),
               "--data", str(workspace["data"]), "--out", str(out)])
    assert rc == 0
    ckpt = load_checkpoint(out)
    assert ckpt.config["stage"] == "samf"
    params = samf_params_from(ckpt)
    assert np.isfinite(params.w1) and np.isfinite(params.w2)


def test_cross_eval_reports_standard_protocol_only(workspace, tmp_path):
    report = tmp_path / "cross.json"
    rc = main(["cross-eval", "--ckpt", str(workspace["adapted"]),
               "--data", str(workspace["data"]), "--report", str(report)])
    assert rc == 0
    payload = json.loads(report.read_text())
    for vals in payload["miou"].values():
        assert set(vals) == {"standard"}
        assert np.isfinite(vals["standard"])


def test_gradcheck_quick_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "checks passed" in out
    assert out.count("ok  ") >= 26
    assert "FAIL" not in out


def test_usage_errors_are_json(capsys):
    assert main(["adapt"]) == 1
    assert stderr_error(capsys)["error"] == "InputError"
    assert main(["no-such-command"]) == 1
    assert stderr_error(capsys)["error"] == "InputError"


def test_corrupt_checkpoint_is_json_error(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX not a checkpoint")
    rc = main(["eval", "--ckpt", str(bad), "--data", str(workspace["data"]),
               "--report", str(tmp_path / "r.json")])
    assert rc == 1
    assert stderr_error(capsys)["error"] == "FormatError"
