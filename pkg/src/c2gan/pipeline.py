"""Forward computation of the image cycle and the two guidance cycles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class CycleToggles:
    ic_loss_on: bool = True
    g2i2g_on: bool = True
    g2r2g_on: bool = True

    @property
    def needs_reconstruction(self) -> bool:
        return self.ic_loss_on or self.g2r2g_on

    @property
    def guidance_on(self) -> bool:
        return self.g2i2g_on or self.g2r2g_on

    @classmethod
    def from_names(cls, names) -> "CycleToggles":
        """Parse cycle names such as ``["i2i2i", "g2i2g"]``."""
        names = [n.strip().lower() for n in names if n.strip()]
        unknown = set(names) - {"i2i2i", "g2i2g", "g2r2g"}
        if unknown:
            raise ValueError(f"unknown cycle name(s): {', '.join(sorted(unknown))}")
        return cls("i2i2i" in names, "g2i2g" in names, "g2r2g" in names)

    def names(self) -> list[str]:
        return [n for n, on in (("i2i2i", self.ic_loss_on), ("g2i2g", self.g2i2g_on),
                                ("g2r2g", self.g2r2g_on)) if on]


@dataclass
class Batch:
    image_x: torch.Tensor
    guidance_x: torch.Tensor
    image_y: torch.Tensor
    guidance_y: torch.Tensor
    keypoints_x: np.ndarray | None = None
    keypoints_y: np.ndarray | None = None

    def to(self, dtype) -> "Batch":
        return Batch(self.image_x.to(dtype), self.guidance_x.to(dtype), self.image_y.to(dtype),
                     self.guidance_y.to(dtype), self.keypoints_x, self.keypoints_y)

    def __len__(self):
        return self.image_x.shape[0]


def collate(pairs) -> Batch:
    """Stack SamplePairs into a batch of tensors."""
    pairs = list(pairs)
    t = lambda attr: torch.from_numpy(np.stack([getattr(p, attr) for p in pairs]))
    return Batch(t("image_x"), t("guidance_x"), t("image_y"), t("guidance_y"),
                 np.stack([p.keypoints_x for p in pairs]),
                 np.stack([p.keypoints_y for p in pairs]))


@dataclass
class CycleOutputs:
    gen_y: torch.Tensor
    rec_x: torch.Tensor | None = None
    gen_guid_y: torch.Tensor | None = None
    gen_guid_x: torch.Tensor | None = None


def _check(name, tensor, channels, like=None):
    if tensor.dim() != 4 or tensor.shape[1] != channels:
        raise ValueError(f"{name}: expected shape (N, {channels}, H, W), got {tuple(tensor.shape)}")
    if like is not None and (tensor.shape[0] != like.shape[0] or tensor.shape[2:] != like.shape[2:]):
        raise ValueError(f"{name}: shape {tuple(tensor.shape)} does not match image {tuple(like.shape)}")


def run_cycles(G_i, G_g, batch: Batch, toggles: CycleToggles = CycleToggles(),
               G_i_rec=None, G_g_rec=None, stop_gradient: bool = False) -> CycleOutputs:
    """Compute every generated tensor the enabled cycles need.

    ``G_i_rec``/``G_g_rec`` are the reconstruction-side generators; they default
    to ``G_i``/``G_g`` (parameter sharing). ``stop_gradient`` detaches the
    generated image before it is fed back for reconstruction.
    """
    G_i_rec = G_i if G_i_rec is None else G_i_rec
    G_g_rec = G_g if G_g_rec is None else G_g_rec
    k = G_i.in_channels - 3
    _check("image_x", batch.image_x, 3)
    _check("guidance_y", batch.guidance_y, k, batch.image_x)
    _check("guidance_x", batch.guidance_x, k, batch.image_x)

    gen_y = G_i(torch.cat([batch.image_x, batch.guidance_y], 1))
    out = CycleOutputs(gen_y)
    if toggles.needs_reconstruction:
        src = gen_y.detach() if stop_gradient else gen_y
        out.rec_x = G_i_rec(torch.cat([src, batch.guidance_x], 1))
    if toggles.g2i2g_on:
        out.gen_guid_y = G_g(gen_y)
    if toggles.g2r2g_on:
        out.gen_guid_x = G_g_rec(out.rec_x)
    return out


@torch.no_grad()
def infer(G_i, G_g, image_x, guidance_y):
    """Inference path: target image from (image, target guidance), source guidance from the image."""
    single = image_x.dim() == 3
    if single:
        image_x, guidance_y = image_x[None], guidance_y[None]
    _check("image_x", image_x, 3)
    _check("guidance_y", guidance_y, G_i.in_channels - 3, image_x)
    gen_y = G_i(torch.cat([image_x, guidance_y], 1))
    guid_x = G_g(image_x)
    if single:
        return gen_y[0], guid_x[0]
    return gen_y, guid_x
