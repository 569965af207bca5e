import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from c2gan import ablation, cli
from c2gan.synthdata import load_dataset
from c2gan.trainer import read_loss_csv

TINY = ["--base-filters", "4", "--unet-depth", "4", "--patch-layers", "2", "--batch-size", "4",
        "--checkpoint-every", "1"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert run("generate-data", "--out", root, "--n-train", 8, "--n-test", 4, "--seed", 7) == 0
    return root


@pytest.fixture(scope="module")
def trained(data_root, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("run")
    assert run("train", "--data", data_root, "--epochs", 2, "--run-dir", run_dir, *TINY) == 0
    return run_dir


def test_generate_data_layout(data_root):
    for split, n in (("train", 8), ("test", 4)):
        assert (data_root / split / "manifest.json").exists()
        assert len(list((data_root / split / "images").glob("*.png"))) == 2 * n
    train, test = load_dataset(data_root / "train"), load_dataset(data_root / "test")
    assert train.seed == 7 and test.seed != train.seed


def test_generate_data_refuses_non_empty_then_force_is_bitwise(data_root, tmp_path, capsys):
    assert run("generate-data", "--out", data_root, "--n-train", 8, "--n-test", 4) == 1
    assert "--force" in capsys.readouterr().err
    out = tmp_path / "again"
    assert run("generate-data", "--out", out, "--n-train", 8, "--n-test", 4, "--seed", 7) == 0
    assert run("generate-data", "--out", out, "--n-train", 8, "--n-test", 4, "--seed", 7,
               "--force") == 0
    for split in ("train", "test"):
        assert ((out / split / "manifest.json").read_bytes()
                == (data_root / split / "manifest.json").read_bytes())
        for img in (data_root / split / "images").iterdir():
            assert (out / split / "images" / img.name).read_bytes() == img.read_bytes()


def test_missing_out_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        run("generate-data")
    assert exc.value.code == 2


def test_module_entry_point_exit_codes(tmp_path):
    r = subprocess.run([sys.executable, "-m", "c2gan", "generate-data"], capture_output=True)
    assert r.returncode == 2
    r = subprocess.run([sys.executable, "-m", "c2gan", "eval", "--checkpoint", tmp_path / "x.ckpt",
                        "--data", tmp_path], capture_output=True, text=True)
    assert r.returncode == 1 and "checkpoint not found" in r.stderr


def test_train_outputs(trained):
    manifest = json.loads((trained / "run_manifest.json").read_text())
    assert manifest["config"]["epochs_total"] == 2
    assert manifest["dataset_manifest_hash"]
    assert set(manifest["metrics"]) >= {"ssim_mean", "psnr_mean", "mask_ssim_mean",
                                        "keypoint_err_mean", "n_samples", "l1_mean"}
    assert sorted(p.name for p in (trained / "grids").iterdir()) == ["epoch_0001.png",
                                                                     "epoch_0002.png"]
    grid = np.asarray(Image.open(trained / "grids" / "epoch_0001.png"))
    assert grid.shape == (4 * 64, 5 * 64, 3)
    assert (trained / "checkpoints" / "last.ckpt").exists()
    assert len(read_loss_csv(trained / "losses.csv")) == 2 * 2


def test_train_default_weights():
    args = cli.parse_args(["train", "--data", "x"])
    assert (args.lambda_img_gan, args.lambda_guid_gan, args.lambda_ic, args.lambda_pixel,
            args.lambda_gc) == (1, 1, 10, 10, 10)
    assert args.cycles == "i2i2i,g2i2g,g2r2g" and args.share_generators
    assert args.discriminator == "cross"


def test_train_same_seed_identical_csv(data_root, trained, tmp_path):
    again = tmp_path / "again"
    assert run("train", "--data", data_root, "--epochs", 2, "--run-dir", again, *TINY) == 0
    assert (again / "losses.csv").read_bytes() == (trained / "losses.csv").read_bytes()


def test_train_resume_matches_uninterrupted(data_root, trained, tmp_path):
    out = tmp_path / "resumed"
    assert run("train", "--data", data_root, "--epochs", 2, "--run-dir", out,
               "--resume", trained / "checkpoints" / "epoch_0001.ckpt", *TINY) == 0
    assert (out / "losses.csv").read_bytes() == (trained / "losses.csv").read_bytes()
    assert run("train", "--data", data_root, "--epochs", 3, "--run-dir", tmp_path / "other",
               "--resume", trained / "checkpoints" / "epoch_0001.ckpt", *TINY) == 1


def test_train_image_cycle_only_zeroes_guidance_columns(data_root, tmp_path):
    out = tmp_path / "i2i2i"
    assert run("train", "--data", data_root, "--epochs", 1, "--run-dir", out, "--cycles", "i2i2i",
               *TINY) == 0
    rows = read_loss_csv(out / "losses.csv")
    assert all(r["guid_gan_g"] == r["guid_gan_d"] == r["gc"] == 0.0 for r in rows)


def test_train_usage_errors(data_root, tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("train", "--data", data_root, "--cycles", "i2i2i,nope", "--run-dir", tmp_path)
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run("train", "--data", data_root, "--lambda-pixel", -1, "--run-dir", tmp_path)
    assert exc.value.code == 2
    assert run("train", "--data", tmp_path / "none", "--run-dir", tmp_path) == 1


def test_config_file_defaults_and_flag_precedence(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# desk run\nepochs = 7\nbase-filters = 16\nshare_generators = false\n")
    args = cli.parse_args(["train", "--data", "x", "--config", str(conf), "--epochs", "3"])
    assert args.epochs == 3 and args.base_filters == 16 and args.share_generators is False
    conf.write_text("bogus = 1\n")
    with pytest.raises(cli.UsageError):
        cli.parse_args(["train", "--data", "x", "--config", str(conf)])


def test_eval_twice_identical_and_limit(trained, data_root, tmp_path, capsys):
    ckpt = trained / "checkpoints" / "last.ckpt"
    assert run("eval", "--checkpoint", ckpt, "--data", data_root, "--out", tmp_path / "a") == 0
    assert run("eval", "--checkpoint", ckpt, "--data", data_root, "--out", tmp_path / "b") == 0
    assert ((tmp_path / "a" / "report.json").read_bytes()
            == (tmp_path / "b" / "report.json").read_bytes())
    assert run("eval", "--checkpoint", ckpt, "--data", data_root, "--limit", 2,
               "--out", tmp_path / "c") == 0
    assert json.loads((tmp_path / "c" / "report.json").read_text())["n_samples"] == 2
    with open(tmp_path / "c" / "per_sample.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2


def test_eval_corrupt_checkpoint_exit_1(trained, data_root, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes((trained / "checkpoints" / "last.ckpt").read_bytes()[:1000])
    assert run("eval", "--checkpoint", bad, "--data", data_root) == 1


def test_infer_writes_images(trained, data_root, tmp_path, capsys):
    ckpt = trained / "checkpoints" / "last.ckpt"
    img = data_root / "test" / "images" / "00000_x.png"
    manifest = data_root / "test" / "manifest.json"
    assert run("infer", "--checkpoint", ckpt, "--image", img, "--manifest", manifest,
               "--index", 0, "--out", tmp_path / "o") == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert (tmp_path / "o" / "generated_image.png").exists()
    assert (tmp_path / "o" / "generated_guidance.png").exists()
    assert np.load(tmp_path / "o" / "generated_guidance.npy").shape == (5, 64, 64)
    assert out["l1_to_input"] >= 0


def test_infer_identity_pose_reports_l1(trained, data_root, tmp_path, capsys):
    ckpt = trained / "checkpoints" / "last.ckpt"
    src = json.loads((data_root / "test" / "manifest.json").read_text())["samples"][0]["keypoints_x"]
    kp = ";".join(f"{x},{y}" for x, y in src)
    assert run("infer", "--checkpoint", ckpt, "--image", data_root / "test" / "images" / "00000_x.png",
               "--keypoints", kp, "--out", tmp_path / "o") == 0
    assert "l1_to_input" in json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_infer_wrong_keypoint_count(trained, data_root, tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("infer", "--checkpoint", trained / "checkpoints" / "last.ckpt",
            "--image", data_root / "test" / "images" / "00000_x.png",
            "--keypoints", "1,2;3,4;5,6;7,8", "--out", tmp_path)
    assert exc.value.code == 2


def test_ablate_table(data_root, tmp_path, capsys):
    out = tmp_path / "abl"
    assert run("ablate", "--data", data_root, "--epochs", 1, "--seeds", 2, "--n-test", 2,
               "--variants", "I2I2I,non-sharing-G", "--out", out, *TINY) == 0
    with open(out / "ablation.csv") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    assert tuple(reader.fieldnames) == ablation.TABLE_COLUMNS
    assert [r["variant"] for r in rows] == ["I2I2I", "non-sharing-G"]
    with open(out / "ablation_runs.csv") as fh:
        runs = list(csv.DictReader(fh))
    assert len(runs) == 4
    for variant in ("I2I2I", "non-sharing-G"):
        ssims = sorted(float(r["ssim"]) for r in runs if r["variant"] == variant)
        row = next(r for r in rows if r["variant"] == variant)
        assert float(row["ssim"]) == pytest.approx(float(np.median(ssims)))
    params = {r["variant"]: int(r["generator_params"]) for r in runs}
    assert params["non-sharing-G"] == 2 * params["I2I2I"]


def test_ablate_unknown_variant(data_root, tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("ablate", "--data", data_root, "--variants", "I2I2I,bogus", "--out", tmp_path)
    assert exc.value.code == 2


def test_no_command_mutates_dataset(data_root, trained):
    before = {p: p.read_bytes() for p in data_root.rglob("*") if p.is_file()}
    run("eval", "--checkpoint", trained / "checkpoints" / "last.ckpt", "--data", data_root,
        "--out", trained / "eval2")
    after = {p: p.read_bytes() for p in data_root.rglob("*") if p.is_file()}
    assert before == after
