import json
import subprocess
import sys

import numpy as np
import pytest

from coordinpaint import io as cio
from coordinpaint.cli import main

TINY = [
    "--set", "data.scene.image_size=32",
    "--set", "data.scene.tex_size=16",
    "--set", "data.train_pairs=16",
    "--set", "data.test_pairs=3",
    "--set", "inpainter.widths=[4,8,8]",
    "--set", "refiner.widths=[4,4,8,8]",
    "--set", "refiner.residual_blocks=1",
    "--set", "discriminator.widths=[4,8,8]",
    "--set", "stage1.steps=3",
    "--set", "stage2.steps=2",
    "--set", "stage1.batch_size=2",
    "--set", "stage2.batch_size=2",
]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synthetic", "--seed", "3", "--out", str(root / "data"), "--subjects", "3", "--poses", "2",
                 "--image-size", "32", "--tex-size", "16"]) == 0
    assert main(["train-inpainter", "--seed", "0", *TINY, "--out", str(root / "run")]) == 0
    assert main(["train-refiner", "--seed", "0", *TINY, "--stage1", str(root / "run" / "stage1.ckpt"), "--out", str(root / "run")]) == 0
    return root


def test_gen_synthetic_layout(workspace):
    data = workspace / "data"
    assert (data / "s00000_p0.png").exists() and (data / "s00000_p1.uvm").exists()
    assert (data / "s00002_texture.png").exists() and (data / "s00001_p0.identity.png").exists()
    assert json.loads((data / "scene.json").read_text())["image_size"] == 32
    assert len(cio.dataset_index(data)) == 3 * 2


def test_training_outputs(workspace):
    run_dir = workspace / "run"
    for name in ("stage1.ckpt", "stage1.ckpt.json", "stage1_log.csv", "stage2.ckpt", "stage2_log.csv"):
        assert (run_dir / name).exists(), name
    cfg = json.loads((run_dir / "stage2.ckpt.json").read_text())
    assert cfg["seed"] == 0 and cfg["data"]["scene"]["image_size"] == 32


def test_infer_and_dump(workspace, capsys):
    data, run_dir, out = workspace / "data", workspace / "run", workspace / "out"
    code, stdout, _ = run(
        capsys, "infer", "--stage1", run_dir / "stage1.ckpt", "--stage2", run_dir / "stage2.ckpt",
        "--source", data / "s00000_p0.png", "--source-uvm", data / "s00000_p0.uvm", "--target-uvm", data / "s00000_p1.uvm",
        "--out", out / "n.png", "--dump-intermediates", out / "inter",
    )
    assert code == 0 and json.loads(stdout)["out"].endswith("n.png")
    assert cio.read_png(out / "n.png").shape == (3, 32, 32)
    assert {p.name for p in (out / "inter").iterdir()} == {"C.png", "D.png", "T.png", "W.png", "E.png"}


def test_infer_deterministic(workspace, capsys):
    data, run_dir = workspace / "data", workspace / "run"
    outs = []
    for name in ("a.png", "b.png"):
        code, _, _ = run(
            capsys, "infer", "--stage1", run_dir / "stage1.ckpt", "--stage2", run_dir / "stage2.ckpt",
            "--source", data / "s00001_p1.png", "--source-uvm", data / "s00001_p1.uvm", "--target-uvm", data / "s00001_p0.uvm",
            "--out", workspace / name,
        )
        assert code == 0
        outs.append((workspace / name).read_bytes())
    assert outs[0] == outs[1]


def test_eval_report(workspace, capsys):
    code, stdout, _ = run(
        capsys, "eval", "--stage1", workspace / "run" / "stage1.ckpt", "--stage2", workspace / "run" / "stage2.ckpt",
        "--csv", workspace / "m.csv",
    )
    rep = json.loads(stdout)
    assert code == 0 and rep["count"] == 3
    assert 0 <= rep["l1"] <= 1 and -1 <= rep["ssim"] <= 1
    assert len((workspace / "m.csv").read_text().strip().splitlines()) == 4


def test_missing_checkpoint(workspace, capsys):
    data = workspace / "data"
    code, _, err = run(
        capsys, "infer", "--stage1", workspace / "nope.ckpt", "--stage2", workspace / "run" / "stage2.ckpt",
        "--source", data / "s00000_p0.png", "--source-uvm", data / "s00000_p0.uvm", "--target-uvm", data / "s00000_p1.uvm",
        "--out", workspace / "x.png",
    )
    assert code == 1
    line = json.loads(err.strip().splitlines()[-1])
    assert line["error"] == "FileNotFoundError" and "nope.ckpt" in line["message"]


def test_refiner_needs_stage1(workspace, capsys):
    code, _, err = run(capsys, "train-refiner", "--seed", "0", *TINY, "--out", workspace / "r2")
    assert code == 1 and json.loads(err)["error"] == "FileNotFoundError"


def test_seed_is_mandatory(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train-inpainter", "--out", "x"])
    assert exc.value.code == 2


def test_bad_override(capsys, tmp_path):
    code, _, err = run(capsys, "train-inpainter", "--seed", "0", "--set", "stage1.bogus=1", "--out", tmp_path)
    assert code == 1 and json.loads(err)["error"] == "KeyError"


def test_config_file(capsys, tmp_path):
    from coordinpaint.pipeline import PipelineConfig

    cfg = PipelineConfig().with_overrides([a for a in TINY if a != "--set"] + ["stage1.steps=2"])
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    code, stdout, _ = run(capsys, "train-inpainter", "--config", tmp_path / "c.json", "--seed", "4", "--out", tmp_path / "r")
    assert code == 0 and json.loads(stdout)["steps"] == 2
    assert json.loads((tmp_path / "r" / "stage1.ckpt.json").read_text())["seed"] == 4


def test_corrupt_uvm_is_clean_error(workspace, capsys, tmp_path):
    bad = tmp_path / "bad.uvm"
    bad.write_bytes((workspace / "data" / "s00000_p1.uvm").read_bytes()[:20])
    data = workspace / "data"
    code, _, err = run(
        capsys, "infer", "--stage1", workspace / "run" / "stage1.ckpt", "--stage2", workspace / "run" / "stage2.ckpt",
        "--source", data / "s00000_p0.png", "--source-uvm", data / "s00000_p0.uvm", "--target-uvm", bad,
        "--out", tmp_path / "x.png",
    )
    assert code == 1 and json.loads(err)["error"] == "FormatError"


def test_transfer_requires_garment_model(workspace, capsys, tmp_path):
    data = workspace / "data"
    code, _, err = run(
        capsys, "transfer", "--stage1", workspace / "run" / "stage1.ckpt", "--stage2", workspace / "run" / "stage2.ckpt",
        "--person", data / "s00000_p0.png", "--person-uvm", data / "s00000_p0.uvm",
        "--cloth", data / "s00001_p0.png", "--cloth-uvm", data / "s00001_p0.uvm", "--out", tmp_path / "t.png",
    )
    assert code == 1 and "garment" in json.loads(err)["message"]


def test_gradcheck_subset(capsys):
    code, stdout, _ = run(capsys, "gradcheck", "--ops", "conv2d", "gram")
    rep = json.loads(stdout)
    assert code == 0 and rep["failed"] == [] and rep["worst_normwise"] <= 1e-5


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "coordinpaint", "infer", "--stage2", str(tmp_path / "none.ckpt"),
                           "--source", "a", "--source-uvm", "b", "--target-uvm", "c", "--out", "d"],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert json.loads(proc.stderr.strip())["error"] == "FileNotFoundError"
    proc = subprocess.run([sys.executable, "-m", "coordinpaint", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2
