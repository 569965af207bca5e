"""Pixel-level image metrics and heatmap keypoint error.

``psnr`` and ``ssim`` take images already mapped to [0, 1] (use ``to_unit``
on generator outputs). SSIM uses an 11x11 Gaussian window (sigma 1.5),
population statistics, and averages the local map over valid window
positions and channels.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .pipeline import collate

PSNR_INF = float("inf")


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def to_unit(x) -> np.ndarray:
    """Map a [-1, 1] image to [0, 1]."""
    return (_np(x) + 1.0) / 2.0


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def psnr(a, b) -> float:
    a, b = _np(a), _np(b)
    _same_shape(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_INF
    return float(10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x, g):
    """Separable 'valid' correlation of (C, H, W) with the 1-D kernel ``g`` along H and W."""
    x = sliding_window_view(x, len(g), axis=2) @ g
    return sliding_window_view(x, len(g), axis=1) @ g


def ssim_map(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03, sigma: float = 1.5):
    a, b = _np(a), _np(b)
    _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < window:
        raise ValueError(f"image {a.shape[-2:]} smaller than SSIM window {window}")
    c1, c2 = k1 ** 2, k2 ** 2
    g = gaussian_window(window, sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03) -> float:
    return float(ssim_map(a, b, window, k1, k2).mean())


def mask_from_guidance(kp, image_size: int = 64, radius: float = 6.0) -> np.ndarray:
    """Boolean (H, W) mask: skeleton pixels plus everything within ``radius`` of a limb or joint."""
    from skimage.draw import line

    kp = np.asarray(kp)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    mask = np.zeros((image_size, image_size), dtype=bool)
    segs = [(kp[j], kp[j + 1]) for j in range(len(kp) - 1)] or [(kp[0], kp[0])]
    for p, q in segs:
        rr, cc = line(int(p[1]), int(p[0]), int(q[1]), int(q[0]))
        ok = (rr >= 0) & (rr < image_size) & (cc >= 0) & (cc < image_size)
        mask[rr[ok], cc[ok]] = True
        d = q.astype(np.float64) - p
        dd = float(d @ d)
        t = 0.0 if dd == 0 else np.clip(((xx - p[0]) * d[0] + (yy - p[1]) * d[1]) / dd, 0, 1)
        dist = np.hypot(xx - (p[0] + t * d[0]), yy - (p[1] + t * d[1]))
        mask |= dist <= radius
    return mask


def masked_ssim(a, b, mask, **kw) -> float:
    """SSIM after zeroing the background of both images."""
    a, b = _np(a), _np(b)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    return ssim(a * mask, b * mask, **kw)


def keypoint_error(gen_guid, kp_true) -> float:
    """Mean distance between each channel's argmax and its true (x, y) keypoint."""
    h = _np(gen_guid)
    kp = np.asarray(kp_true, dtype=np.float64)
    flat = h.reshape(h.shape[0], -1).argmax(axis=1)
    rows, cols = np.unravel_index(flat, h.shape[1:])
    return float(np.mean(np.hypot(cols - kp[:, 0], rows - kp[:, 1])))


@dataclass
class MetricReport:
    psnr_mean: float
    ssim_mean: float
    mask_ssim_mean: float
    keypoint_err_mean: float
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, json_path, csv_path=None):
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(self.to_dict()))
                w.writeheader()
                w.writerow(self.to_dict())


def score_sample(gen_y, image_y, kp_y, gen_guid_x, kp_x, image_size) -> dict:
    a, b = to_unit(gen_y), to_unit(image_y)
    return {
        "psnr": psnr(a, b),
        "ssim": ssim(a, b),
        "mask_ssim": masked_ssim(a, b, mask_from_guidance(kp_y, image_size)),
        "keypoint_err": keypoint_error(gen_guid_x, kp_x),
        "l1": float(np.mean(np.abs(_np(gen_y) - _np(image_y)))),
    }


def summarize(rows: list) -> MetricReport:
    if not rows:
        raise ValueError("cannot summarize an empty evaluation")
    mean = lambda k: float(np.mean([r[k] for r in rows]))
    return MetricReport(mean("psnr"), mean("ssim"), mean("mask_ssim"), mean("keypoint_err"),
                        len(rows))


def score_outputs(dataset, gen_images, gen_guidances) -> tuple[MetricReport, list]:
    """Score precomputed generator outputs against ``dataset`` (one per pair, same order)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rows = []
    for i, p in enumerate(dataset):
        r = score_sample(gen_images[i], p.image_y, p.keypoints_y, gen_guidances[i],
                         p.keypoints_x, dataset.image_size)
        rows.append({"index": i, **r})
    return summarize(rows), rows


@torch.no_grad()
def evaluate(nets, dataset, batch_size: int = 32) -> tuple[MetricReport, list]:
    """Run inference over ``dataset`` and return the report plus per-sample rows (incl. pixel L1)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    was_training = nets.training
    nets.eval()
    gen_images, gen_guids = [], []
    for start in range(0, len(dataset), batch_size):
        b = collate(dataset.pairs[start:start + batch_size])
        gen_images.append(nets.G_i(torch.cat([b.image_x, b.guidance_y], 1)))
        gen_guids.append(nets.G_g(b.image_x))
    nets.train(was_training)
    return score_outputs(dataset, torch.cat(gen_images), torch.cat(gen_guids))
