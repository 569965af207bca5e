"""Procedural keypoint-guided pairs: a stick creature drawn at two poses.

Every sample is a pure function of a seed. Keypoints are integer pixel
coordinates ``(x, y)`` with ``x`` the column and ``y`` the row, origin top-left.
Images are quantized to the 8-bit grid so that PNG storage is lossless.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

SCHEMA_VERSION = 1
DEFAULT_SIZE = 64
DEFAULT_K = 5
DEFAULT_SIGMA = 1.5
MARGIN = 4
MAX_POSE_ATTEMPTS = 1000
MIN_POSE_SHIFT = 2.0
# minimum |mean(body) - background| so the figure stays visible
MIN_CONTRAST = 0.25


class PoseSamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Identity:
    body_color: tuple[float, float, float]
    limb_thickness: float
    limb_lengths: tuple[float, ...]
    background_shade: float

    @property
    def head_radius(self) -> float:
        # a larger disk on keypoint 0 makes the chain direction visible
        return self.limb_thickness + 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Identity":
        return cls(tuple(d["body_color"]), float(d["limb_thickness"]),
                   tuple(d["limb_lengths"]), float(d["background_shade"]))


@dataclass(frozen=True)
class SamplePair:
    identity: Identity
    image_x: np.ndarray
    keypoints_x: np.ndarray
    guidance_x: np.ndarray
    image_y: np.ndarray
    keypoints_y: np.ndarray
    guidance_y: np.ndarray


def _rng(rng_state) -> np.random.Generator:
    if isinstance(rng_state, np.random.Generator):
        return rng_state
    return np.random.default_rng(rng_state)


def sample_identity(rng_state, num_keypoints: int = DEFAULT_K,
                    image_size: int = DEFAULT_SIZE) -> Identity:
    rng = _rng(rng_state)
    while True:
        body = rng.uniform(0.0, 1.0, size=3)
        bg = float(rng.uniform(0.0, 1.0))
        if abs(body.mean() - bg) >= MIN_CONTRAST:
            break
    thickness = float(rng.uniform(1.5, 3.0))
    lengths = rng.uniform(0.12, 0.22, size=num_keypoints - 1) * image_size
    return Identity(tuple(float(c) for c in body), thickness,
                    tuple(float(v) for v in lengths), bg)


def sample_pose(identity: Identity, rng_state, image_size: int = DEFAULT_SIZE,
                margin: int = MARGIN) -> np.ndarray:
    """Rejection-sample a chain of integer keypoints, shape (K, 2) as (x, y).

    Each attempt draws a root position and a heading per limb; an attempt is
    rejected when a joint leaves the margin box or rounding moves a limb length
    by more than half a pixel.
    """
    rng = _rng(rng_state)
    lo, hi = margin, image_size - 1 - margin
    if hi < lo:
        raise PoseSamplingError(f"image_size={image_size} too small for margin {margin}")
    k = len(identity.limb_lengths) + 1
    for _ in range(MAX_POSE_ATTEMPTS):
        pts = np.empty((k, 2), dtype=np.int64)
        pts[0] = rng.integers(lo, hi + 1, size=2)
        heading = rng.uniform(-math.pi, math.pi)
        bends = rng.uniform(-0.6 * math.pi, 0.6 * math.pi, size=k - 1)
        ok = True
        for j, length in enumerate(identity.limb_lengths):
            if j > 0:
                heading += bends[j]
            x = pts[j, 0] + length * math.cos(heading)
            y = pts[j, 1] + length * math.sin(heading)
            p = np.array([round(x), round(y)], dtype=np.int64)
            if p.min() < lo or p.max() > hi or abs(np.hypot(*(p - pts[j])) - length) > 0.5:
                ok = False
                break
            pts[j + 1] = p
        if ok:
            return pts
    raise PoseSamplingError(
        f"no valid pose after {MAX_POSE_ATTEMPTS} attempts "
        f"(limb_lengths={identity.limb_lengths}, image_size={image_size})")


def _segment_distance(xx, yy, p, q):
    d = q - p
    dd = float(d @ d)
    if dd == 0.0:
        return np.hypot(xx - p[0], yy - p[1])
    t = np.clip(((xx - p[0]) * d[0] + (yy - p[1]) * d[1]) / dd, 0.0, 1.0)
    return np.hypot(xx - (p[0] + t * d[0]), yy - (p[1] + t * d[1]))


def coverage(identity: Identity, kp: np.ndarray, image_size: int = DEFAULT_SIZE) -> np.ndarray:
    """Anti-aliased foreground coverage in [0, 1], shape (H, W)."""
    kp = np.asarray(kp, dtype=np.float64)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    half = identity.limb_thickness / 2.0
    cov = np.clip(identity.head_radius + 0.5 - np.hypot(xx - kp[0, 0], yy - kp[0, 1]), 0.0, 1.0)
    for j in range(len(kp)):
        q = kp[min(j + 1, len(kp) - 1)]
        cov = np.maximum(cov, np.clip(half + 0.5 - _segment_distance(xx, yy, kp[j], q), 0.0, 1.0))
    return cov


def quantize(unit: np.ndarray) -> np.ndarray:
    return np.round(np.clip(unit, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [-1, 1]."""
    return (pixels.astype(np.float64) / 127.5 - 1.0).astype(np.float32).transpose(2, 0, 1).copy()


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    return quantize((np.asarray(image, dtype=np.float64).transpose(1, 2, 0) + 1.0) / 2.0)


def render_image(identity: Identity, kp: np.ndarray, image_size: int = DEFAULT_SIZE) -> np.ndarray:
    cov = coverage(identity, kp, image_size)[..., None]
    body = np.asarray(identity.body_color, dtype=np.float64)
    unit = identity.background_shade + cov * (body - identity.background_shade)
    return from_uint8(quantize(unit))


def render_guidance(kp: np.ndarray, sigma: float = DEFAULT_SIGMA,
                    image_size: int = DEFAULT_SIZE) -> np.ndarray:
    """One Gaussian heatmap per keypoint, shape (K, H, W), peak normalized to 1."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    kp = np.asarray(kp, dtype=np.float64)
    grid = np.arange(image_size, dtype=np.float64)
    gx = np.exp(-((grid[None, :] - kp[:, :1]) ** 2) / (2 * sigma ** 2))  # (K, W)
    gy = np.exp(-((grid[None, :] - kp[:, 1:]) ** 2) / (2 * sigma ** 2))  # (K, H)
    maps = gy[:, :, None] * gx[:, None, :]
    maps /= maps.reshape(len(kp), -1).max(axis=1)[:, None, None]
    return maps.astype(np.float32)


def make_pair(rng_state, image_size: int = DEFAULT_SIZE, num_keypoints: int = DEFAULT_K,
              sigma: float = DEFAULT_SIGMA) -> SamplePair:
    rng = _rng(rng_state)
    identity = sample_identity(rng, num_keypoints, image_size)
    kp_x = sample_pose(identity, rng, image_size)
    while True:
        kp_y = sample_pose(identity, rng, image_size)
        if np.hypot(*(kp_x - kp_y).T).max() >= MIN_POSE_SHIFT:
            break
    return build_pair(identity, kp_x, kp_y, image_size, sigma)


def build_pair(identity, kp_x, kp_y, image_size=DEFAULT_SIZE, sigma=DEFAULT_SIGMA) -> SamplePair:
    kp_x = np.asarray(kp_x, dtype=np.int64)
    kp_y = np.asarray(kp_y, dtype=np.int64)
    return SamplePair(identity,
                      render_image(identity, kp_x, image_size), kp_x,
                      render_guidance(kp_x, sigma, image_size),
                      render_image(identity, kp_y, image_size), kp_y,
                      render_guidance(kp_y, sigma, image_size))


def pair_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


class Dataset:
    """An ordered collection of pairs plus the parameters that produced them."""

    def __init__(self, pairs, image_size=DEFAULT_SIZE, num_keypoints=DEFAULT_K,
                 sigma=DEFAULT_SIGMA, seed=None):
        self.pairs = list(pairs)
        self.image_size = image_size
        self.num_keypoints = num_keypoints
        self.sigma = sigma
        self.seed = seed

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    def __iter__(self):
        return iter(self.pairs)

    def subset(self, n):
        return Dataset(self.pairs[:n], self.image_size, self.num_keypoints, self.sigma, self.seed)

    def manifest(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "image_size": self.image_size,
            "K": self.num_keypoints,
            "sigma": self.sigma,
            "seed": self.seed,
            "keypoint_layout": "[x, y] = [col, row], origin top-left, pixel units",
            "samples": [
                {"index": i,
                 "identity": p.identity.to_dict(),
                 "keypoints_x": p.keypoints_x.tolist(),
                 "keypoints_y": p.keypoints_y.tolist()}
                for i, p in enumerate(self.pairs)
            ],
        }


def make_dataset(n: int, seed: int, image_size: int = DEFAULT_SIZE,
                 num_keypoints: int = DEFAULT_K, sigma: float = DEFAULT_SIGMA) -> Dataset:
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    pairs = [make_pair(pair_seed(seed, i), image_size, num_keypoints, sigma) for i in range(n)]
    return Dataset(pairs, image_size, num_keypoints, sigma, seed)


def _atomic_write_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_dataset(dataset: Dataset, split_dir) -> Path:
    """Write ``images/<idx>_{x,y}.png`` and ``manifest.json`` under ``split_dir``."""
    split_dir = Path(split_dir)
    img_dir = split_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
        for i, p in enumerate(dataset.pairs):
            for tag, img in (("x", p.image_x), ("y", p.image_y)):
                path = img_dir / f"{i:05d}_{tag}.png"
                Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")
        _atomic_write_text(split_dir / "manifest.json",
                           json.dumps(dataset.manifest(), indent=1, sort_keys=True))
    except OSError as exc:
        raise OSError(f"failed writing dataset under {split_dir}: {exc}") from exc
    return split_dir / "manifest.json"


def load_dataset(split_dir, limit: int | None = None) -> Dataset:
    split_dir = Path(split_dir)
    manifest_path = split_dir / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read dataset manifest {manifest_path}: {exc}") from exc
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{manifest_path}: unsupported schema_version {manifest.get('schema_version')}")
    size, sigma = manifest["image_size"], manifest["sigma"]
    samples = manifest["samples"][:limit] if limit else manifest["samples"]
    pairs = []
    for s in samples:
        i = s["index"]
        images = []
        for tag in ("x", "y"):
            path = split_dir / "images" / f"{i:05d}_{tag}.png"
            try:
                with Image.open(path) as im:
                    images.append(from_uint8(np.asarray(im.convert("RGB"))))
            except OSError as exc:
                raise OSError(f"cannot read dataset image {path}: {exc}") from exc
        kp_x = np.asarray(s["keypoints_x"], dtype=np.int64)
        kp_y = np.asarray(s["keypoints_y"], dtype=np.int64)
        pairs.append(SamplePair(Identity.from_dict(s["identity"]),
                                images[0], kp_x, render_guidance(kp_x, sigma, size),
                                images[1], kp_y, render_guidance(kp_y, sigma, size)))
    return Dataset(pairs, size, manifest["K"], sigma, manifest["seed"])
