"""Adversarial, cycle and pixel losses, and the weighted joint objective.

All expectations reduce by the mean over batch, channels and space. The
discriminator terms are the negation of the log-likelihood sums the
discriminators maximize; they are computed from logits (``log D = logsigmoid(l)``,
``log(1 - D) = logsigmoid(-l)``), which agrees with the probability form.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F

from .pipeline import Batch, CycleOutputs, CycleToggles


@dataclass(frozen=True)
class LossWeights:
    w_img_gan: float = 1.0
    w_img_cyc: float = 10.0
    w_pixel: float = 10.0
    w_guid_gan: float = 1.0
    w_guid_cyc: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossBundle:
    img_gan_g: torch.Tensor
    img_gan_d: torch.Tensor
    guid_gan_g: torch.Tensor
    guid_gan_d: torch.Tensor
    ic: torch.Tensor
    gc: torch.Tensor
    pixel: torch.Tensor
    total_g: torch.Tensor
    total_d: torch.Tensor

    NAMES = ("img_gan_g", "img_gan_d", "guid_gan_g", "guid_gan_d", "ic", "gc", "pixel",
             "total_g", "total_d")

    def as_floats(self) -> dict:
        return {n: getattr(self, n).item() for n in self.NAMES}


def _logits(D, x):
    out = D.logits(x)
    if torch.isnan(out).any():
        raise FloatingPointError("discriminator produced NaN scores")
    return out


def _log_d(logits):
    return F.logsigmoid(logits)


def _log_one_minus_d(logits):
    return F.logsigmoid(-logits)


def _gen_adv(fake_logits, literal):
    if literal:
        return _log_one_minus_d(fake_logits).mean()
    return -_log_d(fake_logits).mean()


def _adv_pair(D, real_in, fake_in, fake_in_detached, literal):
    """One real/fake comparison: (generator term, negated discriminator objective)."""
    if getattr(D, "per_sample", False):
        # one call for both halves; valid because no statistic is shared across the batch
        n = real_in.shape[0]
        both = _logits(D, torch.cat([real_in, fake_in_detached], 0))
        real, fake_d = both[:n], both[n:]
    else:
        real, fake_d = _logits(D, real_in), _logits(D, fake_in_detached)
    disc = -(_log_d(real).mean() + _log_one_minus_d(fake_d).mean())
    gen = _gen_adv(_logits(D, fake_in), literal)
    return gen, disc


def _zero(ref):
    return ref.new_zeros(())


def img_adv_losses(D_i, batch: Batch, outputs: CycleOutputs,
                   toggles: CycleToggles = CycleToggles(), cross_modal: bool = True,
                   literal: bool = False):
    """Image adversarial terms for the generation mapping and, with the image cycle on, reconstruction.

    Generation: real [I_x, L_y, I_y] vs fake [I_x, L_y, I_y'].
    Reconstruction: real [I_y, L_x, I_x] vs fake [I_y, L_x, I_x'].
    Single-modal discriminators only see the candidate image.
    """
    def triplet(cond, guid, cand):
        return torch.cat([cond, guid, cand], 1) if cross_modal else cand

    b = batch
    gen, disc = _adv_pair(D_i,
                          triplet(b.image_x, b.guidance_y, b.image_y),
                          triplet(b.image_x, b.guidance_y, outputs.gen_y),
                          triplet(b.image_x, b.guidance_y, outputs.gen_y.detach()),
                          literal)
    if toggles.ic_loss_on:
        if outputs.rec_x is None:
            raise ValueError("reconstruction adversarial term needs rec_x")
        g2, d2 = _adv_pair(D_i,
                           triplet(b.image_y, b.guidance_x, b.image_x),
                           triplet(b.image_y, b.guidance_x, outputs.rec_x),
                           triplet(b.image_y, b.guidance_x, outputs.rec_x.detach()),
                           literal)
        gen, disc = gen + g2, disc + d2
    return gen, disc


def guid_adv_losses(D_g, batch: Batch, outputs: CycleOutputs,
                    toggles: CycleToggles = CycleToggles(), cross_modal: bool = True,
                    literal: bool = False):
    """Guidance adversarial terms; the image in both pairs is the generated one.

    G2I2G: real [I_y', L_y] vs fake [I_y', L_y'].  G2R2G: real [I_x', L_x] vs fake [I_x', L_x'].
    Terms for disabled cycles contribute zero.
    """
    def pair(img, guid):
        return torch.cat([img, guid], 1) if cross_modal else guid

    gen = disc = _zero(outputs.gen_y)
    cycles = []
    if toggles.g2i2g_on:
        cycles.append((outputs.gen_y, batch.guidance_y, outputs.gen_guid_y, "gen_guid_y"))
    if toggles.g2r2g_on:
        cycles.append((outputs.rec_x, batch.guidance_x, outputs.gen_guid_x, "gen_guid_x"))
    for img, real_guid, fake_guid, name in cycles:
        if img is None or fake_guid is None:
            raise ValueError(f"guidance adversarial term needs {name}")
        g, d = _adv_pair(D_g,
                         pair(img.detach(), real_guid),
                         pair(img, fake_guid),
                         pair(img.detach(), fake_guid.detach()),
                         literal)
        gen, disc = gen + g, disc + d
    return gen, disc


def _l1(a, b, name):
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def ic_loss(image_x, rec_x):
    return _l1(rec_x, image_x, "ic_loss")


def gc_loss(guidance_y, gen_guid_y, guidance_x, gen_guid_x,
            toggles: CycleToggles = CycleToggles()):
    ref = guidance_y if guidance_y is not None else guidance_x
    total = _zero(ref)
    if toggles.g2i2g_on:
        total = total + _l1(gen_guid_y, guidance_y, "gc_loss (y)")
    if toggles.g2r2g_on:
        total = total + _l1(gen_guid_x, guidance_x, "gc_loss (x)")
    return total


def pixel_loss(image_y, gen_y):
    return _l1(gen_y, image_y, "pixel_loss")


def total_objective(components: dict, weights: LossWeights = LossWeights()):
    """Return (total_g, total_d); discriminator objectives are halved."""
    for name in ("img_gan_g", "ic", "pixel", "guid_gan_g", "gc", "img_gan_d", "guid_gan_d"):
        v = components[name]
        if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            raise FloatingPointError(f"non-finite loss term {name!r}: {float(v)}")
    total_g = (weights.w_img_gan * components["img_gan_g"]
               + weights.w_img_cyc * components["ic"]
               + weights.w_pixel * components["pixel"]
               + weights.w_guid_gan * components["guid_gan_g"]
               + weights.w_guid_cyc * components["gc"])
    total_d = (components["img_gan_d"] + components["guid_gan_d"]) / 2
    return total_g, total_d


def compute_losses(D_i, D_g, batch: Batch, outputs: CycleOutputs,
                   toggles: CycleToggles = CycleToggles(),
                   weights: LossWeights = LossWeights(),
                   cross_modal: bool = True, literal: bool = False) -> LossBundle:
    img_g, img_d = img_adv_losses(D_i, batch, outputs, toggles, cross_modal, literal)
    if toggles.guidance_on:
        guid_g, guid_d = guid_adv_losses(D_g, batch, outputs, toggles, cross_modal, literal)
    else:
        guid_g = guid_d = _zero(outputs.gen_y)
    comps = {
        "img_gan_g": img_g, "img_gan_d": img_d,
        "guid_gan_g": guid_g, "guid_gan_d": guid_d,
        "ic": ic_loss(batch.image_x, outputs.rec_x) if toggles.ic_loss_on else _zero(outputs.gen_y),
        "gc": gc_loss(batch.guidance_y, outputs.gen_guid_y, batch.guidance_x,
                      outputs.gen_guid_x, toggles),
        "pixel": pixel_loss(batch.image_y, outputs.gen_y),
    }
    total_g, total_d = total_objective(comps, weights)
    return LossBundle(**comps, total_g=total_g, total_d=total_d)
