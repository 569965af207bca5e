"""Command-line entry point: generate-data, train, eval, infer, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage error. A ``--config`` file of
``key = value`` lines (``#`` comments) supplies defaults; explicit flags win.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import ablation, synthdata
from .losses import LossWeights
from .metrics import evaluate
from .nets import NetConfig
from .pipeline import CycleToggles, collate, infer
from .trainer import CheckpointError, TrainConfig, fit, load_networks, sample_grid

log = logging.getLogger("c2gan")

# test split seeds are offset so train/test never share a pair seed
TEST_SEED_OFFSET = 1_000_003
RUN_MANIFEST_VERSION = 1


class UsageError(Exception):
    pass


# -- helpers -------------------------------------------------------------------

def git_blob_hash(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def parse_config_file(path) -> dict:
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(parser: argparse.ArgumentParser, key: str, value: str):
    for action in parser._actions:
        if action.dest != key:
            continue
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction,
                               argparse.BooleanOptionalAction)):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise UsageError(f"config key {key!r}: expected a boolean, got {value!r}")
        if action.type is not None:
            try:
                value = action.type(value)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key!r}: {value!r} not in {list(action.choices)}")
        return value
    raise UsageError(f"unknown config key {key!r}")


def _atomic_json(obj, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True, default=str) + "\n")
    os.replace(tmp, path)


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def make_run_dir(args, tag) -> Path:
    if getattr(args, "run_dir", None):
        run_dir = Path(args.run_dir)
    else:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        run_dir = Path(args.runs_root) / f"{stamp}-{args.tag or tag}"
        k = 1
        while run_dir.exists():
            run_dir = Path(args.runs_root) / f"{stamp}-{args.tag or tag}-{k}"
            k += 1
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def split_dir(data_root, split) -> Path:
    d = Path(data_root) / split
    if not (d / "manifest.json").exists():
        raise FileNotFoundError(f"no {split} split at {d} (missing manifest.json)")
    return d


def parse_keypoints(text: str) -> np.ndarray:
    """'x,y;x,y;...' -> (K, 2) integer array."""
    try:
        pts = [[int(round(float(v))) for v in p.split(",")] for p in text.split(";") if p.strip()]
        arr = np.asarray(pts, dtype=np.int64)
    except ValueError as exc:
        raise UsageError(f"bad keypoint list {text!r}: {exc}") from exc
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise UsageError(f"keypoints must be 'x,y;x,y;...', got {text!r}")
    return arr


# -- config assembly -----------------------------------------------------------

def net_config_from_args(args, dataset) -> NetConfig:
    return NetConfig(image_size=dataset.image_size, num_keypoints=dataset.num_keypoints,
                     base_filters=args.base_filters, unet_depth=args.unet_depth,
                     patch_layers=args.patch_layers, disc_filters=args.disc_filters,
                     norm_kind=args.norm)


def train_config_from_args(args, dataset) -> TrainConfig:
    for name in ("lambda_img_gan", "lambda_ic", "lambda_pixel", "lambda_guid_gan", "lambda_gc"):
        if getattr(args, name) < 0:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 0")
    try:
        toggles = CycleToggles.from_names(args.cycles.split(","))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    decay = args.decay_start if args.decay_start is not None else args.epochs // 2
    try:
        return TrainConfig(
            epochs_total=args.epochs, decay_start_epoch=decay, base_lr=args.lr,
            batch_size=args.batch_size,
            weights=LossWeights(args.lambda_img_gan, args.lambda_ic, args.lambda_pixel,
                                args.lambda_guid_gan, args.lambda_gc),
            toggles=toggles, share_generators=args.share_generators,
            discriminator_mode="cross_modal" if args.discriminator == "cross" else "single_modal",
            seed=args.seed, checkpoint_every=args.checkpoint_every,
            literal_gan=args.literal_gan, stop_gradient=args.stop_gradient,
            guid_gan_trains_g_i=args.guid_gan_trains_gi,
            net=net_config_from_args(args, dataset))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--data", required=True, help="dataset root holding train/ and test/")
    p.add_argument("--cycles", default="i2i2i,g2i2g,g2r2g",
                   help="comma list of i2i2i, g2i2g, g2r2g")
    p.add_argument("--share-generators", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--discriminator", choices=("cross", "single"), default="cross")
    p.add_argument("--lambda-img-gan", type=float, default=1.0)
    p.add_argument("--lambda-ic", type=float, default=10.0)
    p.add_argument("--lambda-pixel", type=float, default=10.0)
    p.add_argument("--lambda-guid-gan", type=float, default=1.0)
    p.add_argument("--lambda-gc", type=float, default=10.0)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--decay-start", type=int, default=None, help="default: epochs // 2")
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=5)
    p.add_argument("--base-filters", type=int, default=64)
    p.add_argument("--disc-filters", type=int, default=0, help="0: same as --base-filters")
    p.add_argument("--unet-depth", type=int, default=6)
    p.add_argument("--patch-layers", type=int, default=3)
    p.add_argument("--norm", choices=("instance", "batch"), default="instance")
    p.add_argument("--literal-gan", action="store_true",
                   help="generators minimize log(1 - D) instead of -log D")
    p.add_argument("--stop-gradient", action="store_true",
                   help="detach the generated image before reconstruction")
    p.add_argument("--guid-gan-trains-gi", action="store_true",
                   help="let the guidance adversarial term update the image generator too")
    p.add_argument("--n-train", type=int, default=None, help="use only the first N training pairs")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--runs-root", default="runs")
    p.add_argument("--tag", default=None)
    p.add_argument("--config", default=None, help="key = value defaults file")


# -- commands ------------------------------------------------------------------

def cmd_generate_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise RuntimeError(f"{out} is not empty; pass --force to overwrite")
        for split in ("train", "test"):
            if (out / split).exists():
                shutil.rmtree(out / split)
    for split, n, seed in (("train", args.n_train, args.seed),
                           ("test", args.n_test, args.seed + TEST_SEED_OFFSET)):
        ds = synthdata.make_dataset(n, seed, args.image_size, args.k, args.sigma)
        path = synthdata.save_dataset(ds, out / split)
        log.info("wrote %d %s pairs -> %s", n, split, path)
    print(out)
    return 0


def _eval_rows_csv(rows, path):
    cols = ["index", "psnr", "ssim", "mask_ssim", "keypoint_err", "l1"]
    ablation.write_csv(rows, cols, path)


def cmd_train(args) -> int:
    train = synthdata.load_dataset(split_dir(args.data, "train"), limit=args.n_train)
    cfg = train_config_from_args(args, train)
    test_dir = Path(args.data) / "test"
    test = synthdata.load_dataset(test_dir) if (test_dir / "manifest.json").exists() else None
    run_dir = make_run_dir(args, "train")
    started = _now()
    grid_src = collate((test or train).pairs[:4])
    grid_dir = run_dir / "grids"
    grid_dir.mkdir(exist_ok=True)

    def on_epoch(epoch, nets):
        Image.fromarray(sample_grid(nets, grid_src)).save(grid_dir / f"epoch_{epoch + 1:04d}.png")

    t0 = time.time()
    result = fit(train, cfg, run_dir=run_dir, resume=args.resume, epoch_callback=on_epoch)
    elapsed = time.time() - t0
    summary = None
    if test is not None:
        report, rows = evaluate(result.nets, test)
        report.write(run_dir / "report.json", run_dir / "report.csv")
        _eval_rows_csv(rows, run_dir / "per_sample.csv")
        summary = {**report.to_dict(), "l1_mean": float(np.mean([r["l1"] for r in rows]))}
    manifest = {
        "version": RUN_MANIFEST_VERSION,
        "command": "train",
        "argv": sys.argv[1:],
        "args": vars(args) | {"func": None},
        "config": cfg.to_dict(),
        "dataset_manifest_hash": git_blob_hash(Path(args.data) / "train" / "manifest.json"),
        "started": started, "finished": _now(), "train_seconds": elapsed,
        "outputs": {"losses": str(run_dir / "losses.csv"),
                    "checkpoints": [str(p) for p in result.checkpoints],
                    "grids": str(grid_dir)},
        "metrics": summary,
    }
    _atomic_json(manifest, run_dir / "run_manifest.json")
    print(run_dir)
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    nets, cfg = load_networks(ckpt)
    data = Path(args.data)
    test = synthdata.load_dataset(data if (data / "manifest.json").exists() else split_dir(data, "test"),
                                  limit=args.limit)
    if (test.num_keypoints, test.image_size) != (cfg.net.num_keypoints, cfg.net.image_size):
        raise ValueError("dataset does not match the checkpoint's NetConfig")
    report, rows = evaluate(nets, test)
    out = Path(args.out) if args.out else ckpt.parent.parent / "eval"
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.json", out / "report.csv")
    _eval_rows_csv(rows, out / "per_sample.csv")
    print(json.dumps(report.to_dict()))
    return 0


def cmd_infer(args) -> int:
    nets, cfg = load_networks(args.checkpoint)
    k, size = cfg.net.num_keypoints, cfg.net.image_size
    if args.keypoints:
        target = parse_keypoints(args.keypoints)
    elif args.manifest is not None:
        manifest = json.loads(Path(args.manifest).read_text())
        target = np.asarray(manifest["samples"][args.index]["keypoints_y"], dtype=np.int64)
    else:
        raise UsageError("give target keypoints with --keypoints or --manifest/--index")
    if len(target) != k:
        raise UsageError(f"expected {k} target keypoints, got {len(target)}")
    with Image.open(args.image) as im:
        pixels = np.asarray(im.convert("RGB"))
    if pixels.shape[:2] != (size, size):
        raise UsageError(f"input image must be {size}x{size}, got {pixels.shape[1]}x{pixels.shape[0]}")
    image_x = torch.from_numpy(synthdata.from_uint8(pixels))
    guidance_y = torch.from_numpy(synthdata.render_guidance(target, args.sigma, size))
    gen_y, guid_x = infer(nets.G_i, nets.G_g, image_x, guidance_y)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(synthdata.to_uint8(gen_y.numpy())).save(out / "generated_image.png")
    heat = (guid_x.max(0).values.numpy() * 255).round().clip(0, 255).astype(np.uint8)
    Image.fromarray(heat, mode="L").save(out / "generated_guidance.png")
    np.save(out / "generated_guidance.npy", guid_x.numpy())
    l1 = float((gen_y - image_x).abs().mean())
    print(json.dumps({"generated_image": str(out / "generated_image.png"),
                      "generated_guidance": str(out / "generated_guidance.png"),
                      "l1_to_input": l1}))
    return 0


def cmd_ablate(args) -> int:
    seeds = [args.seed + s for s in range(args.seeds)]
    variants = args.variants.split(",") if args.variants else list(ablation.VARIANTS)
    bad = [v for v in variants if v not in ablation.VARIANTS]
    if bad:
        raise UsageError(f"unknown variant(s) {bad}; choose from {list(ablation.VARIANTS)}")
    train = synthdata.load_dataset(split_dir(args.data, "train"), limit=args.n_train)
    test = synthdata.load_dataset(split_dir(args.data, "test"), limit=args.n_test)
    base = train_config_from_args(args, train)
    out = Path(args.out) if args.out else make_run_dir(args, "ablate")
    started = _now()
    fingerprint = git_blob_hash(Path(args.data) / "train" / "manifest.json")
    table, runs = ablation.run_ablation(base, train, test, out, seeds, variants, fingerprint)
    _atomic_json({
        "version": RUN_MANIFEST_VERSION, "command": "ablate", "argv": sys.argv[1:],
        "args": vars(args) | {"func": None}, "config": base.to_dict(),
        "dataset_manifest_hash": fingerprint, "started": started, "finished": _now(),
        "outputs": {"table": str(out / "ablation.csv"), "runs": str(out / "ablation_runs.csv")},
        "metrics": table,
    }, out / "run_manifest.json")
    print((out / "ablation.csv").read_text(), end="")
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c2gan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write the synthetic train/test splits")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--image-size", type=int, default=synthdata.DEFAULT_SIZE)
    p.add_argument("--k", type=int, default=synthdata.DEFAULT_K)
    p.add_argument("--sigma", type=float, default=synthdata.DEFAULT_SIGMA)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train C2GAN")
    add_train_flags(p)
    p.add_argument("--run-dir", default=None, help="explicit output directory")
    p.add_argument("--resume", default=None, help="checkpoint of the same configuration to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root or split directory")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="translate one image to target keypoints")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--keypoints", default=None, help="target keypoints 'x,y;x,y;...'")
    p.add_argument("--manifest", default=None, help="take target keypoints from a manifest")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--sigma", type=float, default=synthdata.DEFAULT_SIGMA)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="train and compare the ablation variants")
    add_train_flags(p)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds per variant")
    p.add_argument("--variants", default=None, help="comma list (default: all)")
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def parse_args(argv, parser=None):
    parser = parser or build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = parser._subparsers._group_actions[0].choices[args.command]
        try:
            values = parse_config_file(args.config)
            sub.set_defaults(**{k: _coerce(sub, k, v) for k, v in values.items()})
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parse_args(argv, parser)
    except UsageError as exc:
        parser.error(str(exc))
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None):
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (OSError, RuntimeError, ValueError, CheckpointError, FloatingPointError) as exc:
        print(f"c2gan: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
