"""Ablation matrix: cycle combinations, discriminator modality, sharing, pixel weight sweep."""

from __future__ import annotations

import csv
import json
import logging
import shutil
import statistics
from dataclasses import replace
from pathlib import Path

from .pipeline import CycleToggles
from .trainer import TrainConfig, build_networks, fit
from .metrics import evaluate

log = logging.getLogger(__name__)

VARIANTS = (
    "I2I2I",
    "I2I2I+G2I2G",
    "I2I2I+G2R2G",
    "I2I2I+G2I2G+G2R2G",
    "single-modal-D",
    "non-sharing-G",
    "lambda-pixel-1",
    "lambda-pixel-100",
)
TABLE_COLUMNS = ("variant", "ssim", "psnr", "mask_ssim", "keypoint_err")
RUN_COLUMNS = ("variant", "seed", "ssim", "psnr", "mask_ssim", "keypoint_err", "l1",
               "generator_params")
FULL = CycleToggles(True, True, True)


def variant_config(name: str, base: TrainConfig) -> TrainConfig:
    """``base`` with the variant's toggles and overrides applied (base toggles are ignored)."""
    full = replace(base, toggles=FULL)
    if name == "I2I2I":
        return replace(full, toggles=CycleToggles(True, False, False))
    if name == "I2I2I+G2I2G":
        return replace(full, toggles=CycleToggles(True, True, False))
    if name == "I2I2I+G2R2G":
        return replace(full, toggles=CycleToggles(True, False, True))
    if name == "I2I2I+G2I2G+G2R2G":
        return full
    if name == "single-modal-D":
        return replace(full, discriminator_mode="single_modal")
    if name == "non-sharing-G":
        return replace(full, share_generators=False)
    if name.startswith("lambda-pixel-"):
        w = float(name.rsplit("-", 1)[1])
        return replace(full, weights=replace(full.weights, w_pixel=w))
    raise ValueError(f"unknown ablation variant {name!r}; expected one of {VARIANTS}")


def estimate_run_bytes(cfg: TrainConfig) -> int:
    """Rough checkpoint footprint: parameters + two Adam moments, two files per checkpoint."""
    nets = build_networks(cfg.net, cfg.share_generators, cfg.cross_modal, cfg.seed)
    n_params = sum(p.numel() for p in nets.parameters())
    n_ckpts = cfg.epochs_total // cfg.checkpoint_every + 2
    return n_params * 4 * 3 * n_ckpts + (1 << 20)


def check_disk_space(out_dir, needed: int):
    out_dir = Path(out_dir)
    probe = out_dir if out_dir.exists() else next(p for p in out_dir.parents if p.exists())
    free = shutil.disk_usage(probe).free
    if free < needed:
        raise OSError(f"insufficient disk space under {probe}: need ~{needed >> 20} MiB, "
                      f"have {free >> 20} MiB")


def run_variant(name, base, seed, train_data, test_data, out_dir) -> dict:
    cfg = replace(variant_config(name, base), seed=seed)
    run_dir = Path(out_dir) / name / f"seed{seed}"
    result = fit(train_data, cfg, run_dir=run_dir)
    report, rows = evaluate(result.nets, test_data)
    return {
        "variant": name, "seed": seed,
        "ssim": report.ssim_mean, "psnr": report.psnr_mean,
        "mask_ssim": report.mask_ssim_mean, "keypoint_err": report.keypoint_err_mean,
        "l1": sum(r["l1"] for r in rows) / len(rows),
        "generator_params": result.nets.generator_parameter_count(),
    }


def summarize_runs(runs: list, variants=VARIANTS) -> list:
    table = []
    for name in variants:
        rs = [r for r in runs if r["variant"] == name]
        if not rs:
            continue
        table.append({"variant": name, **{c: statistics.median(r[c] for r in rs)
                                          for c in TABLE_COLUMNS[1:]}})
    return table


def write_csv(rows, columns, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            if k not in ("variant",):
                r[k] = float(v) if k != "seed" else int(v)
    return rows


def run_ablation(base: TrainConfig, train_data, test_data, out_dir, seeds=(0, 1, 2),
                 variants=VARIANTS, data_fingerprint: str = "") -> tuple[list, list]:
    """Train every (variant, seed); write ``ablation_runs.csv`` and the median ``ablation.csv``.

    Runs already present in ``ablation_runs.csv`` are kept rather than retrained,
    so an interrupted sweep can be resumed. The base config and data fingerprint
    are pinned in ``ablation_config.json``; resuming with different ones fails.
    """
    out_dir = Path(out_dir)
    pinned = {"base": {**base.to_dict(), "seed": None}, "data": data_fingerprint,
              "n_train": len(train_data), "n_test": len(test_data)}
    for v in variants:
        variant_config(v, base)
    needed = sum(estimate_run_bytes(variant_config(v, base)) for v in variants) * len(seeds)
    check_disk_space(out_dir, needed)
    out_dir.mkdir(parents=True, exist_ok=True)
    pin_path = out_dir / "ablation_config.json"
    if pin_path.exists():
        if json.loads(pin_path.read_text()) != json.loads(json.dumps(pinned)):
            raise ValueError(f"{out_dir} holds an ablation run with a different configuration")
    else:
        pin_path.write_text(json.dumps(pinned, indent=1, sort_keys=True))
    runs_path = out_dir / "ablation_runs.csv"
    runs = read_csv(runs_path) if runs_path.exists() else []
    done = {(r["variant"], r["seed"]) for r in runs}
    for name in variants:
        for seed in seeds:
            if (name, seed) in done:
                continue
            log.info("ablation: training %s seed %d", name, seed)
            runs.append(run_variant(name, base, seed, train_data, test_data, out_dir))
            write_csv(runs, RUN_COLUMNS, runs_path)
    runs = [r for r in runs if r["variant"] in variants and r["seed"] in seeds]
    table = summarize_runs(runs, variants)
    write_csv(table, TABLE_COLUMNS, out_dir / "ablation.csv")
    return table, runs
