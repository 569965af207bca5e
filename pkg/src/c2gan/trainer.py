"""Joint optimization of the two generators and two discriminators.

Each step computes every loss once from the current parameters, then applies
one Adam update per network in the order G_i, D_i, G_g, D_g. Each update uses
only the gradient of the objective terms that reference that network. The
guidance adversarial term treats the generated images as given data, so by
default it trains G_g but sends no gradient into G_i (``guid_gan_trains_g_i``
restores the fully coupled variant).
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .losses import LossBundle, LossWeights, compute_losses
from .nets import (NetConfig, build_guidance_discriminator, build_guidance_generator,
                   build_image_discriminator, build_image_generator, count_parameters,
                   shared_or_cloned)
from .pipeline import Batch, CycleToggles, collate, run_cycles
from .synthdata import Dataset, to_uint8

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
CHECKPOINT_MAGIC = b"C2GANCKPT\n"
HISTORY_COLUMNS = ("step", "epoch", "lr") + LossBundle.NAMES
DISCRIMINATOR_MODES = ("cross_modal", "single_modal")


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs_total: int = 40
    decay_start_epoch: int = 20
    base_lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    toggles: CycleToggles = field(default_factory=CycleToggles)
    share_generators: bool = True
    discriminator_mode: str = "cross_modal"
    seed: int = 0
    checkpoint_every: int = 5
    literal_gan: bool = False
    stop_gradient: bool = False
    guid_gan_trains_g_i: bool = False
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if not 0 <= self.decay_start_epoch <= self.epochs_total:
            raise ValueError("need 0 <= decay_start_epoch <= epochs_total")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("batch_size and checkpoint_every must be >= 1")
        if self.discriminator_mode not in DISCRIMINATOR_MODES:
            raise ValueError(f"discriminator_mode must be one of {DISCRIMINATOR_MODES}")

    @property
    def cross_modal(self) -> bool:
        return self.discriminator_mode == "cross_modal"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        d["toggles"] = CycleToggles(**d["toggles"])
        d["net"] = NetConfig(**d["net"])
        return cls(**d)


class C2GANNets(nn.Module):
    """The four networks, plus separate reconstruction-side generators when not sharing."""

    def __init__(self, G_i, G_g, D_i, D_g, G_i_rec=None, G_g_rec=None):
        super().__init__()
        self.G_i, self.G_g, self.D_i, self.D_g = G_i, G_g, D_i, D_g
        self.G_i_rec = G_i_rec
        self.G_g_rec = G_g_rec

    @property
    def shared(self) -> bool:
        return self.G_i_rec is None

    def image_generators(self):
        return [self.G_i] + ([self.G_i_rec] if self.G_i_rec is not None else [])

    def guidance_generators(self):
        return [self.G_g] + ([self.G_g_rec] if self.G_g_rec is not None else [])

    def generator_parameter_count(self) -> int:
        return count_parameters(*self.image_generators(), *self.guidance_generators())

    def param_groups(self) -> dict:
        groups = {
            "G_i": [p for m in self.image_generators() for p in m.parameters()],
            "D_i": list(self.D_i.parameters()),
            "G_g": [p for m in self.guidance_generators() for p in m.parameters()],
            "D_g": list(self.D_g.parameters()),
        }
        return groups


def _seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence([seed, 0x6E657473]).generate_state(n)]


def build_networks(net_cfg: NetConfig, share_generators: bool = True, cross_modal: bool = True,
                   seed: int = 0) -> C2GANNets:
    s = _seeds(seed, 6)
    G_i = build_image_generator(net_cfg, s[0])
    G_g = build_guidance_generator(net_cfg, s[1])
    D_i = build_image_discriminator(net_cfg, s[2], cross_modal=cross_modal)
    D_g = build_guidance_discriminator(net_cfg, s[3], cross_modal=cross_modal)
    if share_generators:
        return C2GANNets(G_i, G_g, D_i, D_g)
    return C2GANNets(G_i, G_g, D_i, D_g,
                     shared_or_cloned(G_i, False, s[4]), shared_or_cloned(G_g, False, s[5]))


def build_optimizers(nets: C2GANNets, cfg: TrainConfig) -> dict:
    return {name: torch.optim.Adam(params, lr=cfg.base_lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
                                   foreach=True)
            for name, params in nets.param_groups().items()}


def lr_schedule(epoch: float, cfg: TrainConfig) -> float:
    """Constant ``base_lr`` until ``decay_start_epoch``, then linear to zero at ``epochs_total``."""
    if not 0 <= epoch <= cfg.epochs_total:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs_total}]")
    if epoch < cfg.decay_start_epoch:
        return cfg.base_lr
    return cfg.base_lr * (cfg.epochs_total - epoch) / (cfg.epochs_total - cfg.decay_start_epoch)


def set_lr(optimizers: dict, lr: float):
    for opt in optimizers.values():
        for group in opt.param_groups:
            group["lr"] = lr


def forward_losses(nets: C2GANNets, batch: Batch, cfg: TrainConfig) -> LossBundle:
    outputs = run_cycles(nets.G_i, nets.G_g, batch, cfg.toggles,
                         nets.G_i_rec, nets.G_g_rec, stop_gradient=cfg.stop_gradient)
    return compute_losses(nets.D_i, nets.D_g, batch, outputs, cfg.toggles, cfg.weights,
                          cross_modal=cfg.cross_modal, literal=cfg.literal_gan)


def image_objective(bundle: LossBundle, cfg: TrainConfig):
    """The part of total_g that G_i minimizes."""
    if cfg.guid_gan_trains_g_i or not cfg.toggles.guidance_on:
        return bundle.total_g
    return bundle.total_g - cfg.weights.w_guid_gan * bundle.guid_gan_g


def compute_gradients(bundle: LossBundle, groups: dict, guidance_on: bool,
                      g_i_objective=None) -> dict:
    """Per-network gradients: generators from total_g, discriminators from total_d.

    ``g_i_objective`` replaces total_g for G_i only (see ``image_objective``).
    """
    if g_i_objective is None:
        g_i_objective = bundle.total_g
    jobs = [(bundle.total_d, ["D_i"] + (["D_g"] if guidance_on else []))]
    if g_i_objective is bundle.total_g:
        jobs.insert(0, (bundle.total_g, ["G_i"] + (["G_g"] if guidance_on else [])))
    else:
        jobs[:0] = [(g_i_objective, ["G_i"])] + ([(bundle.total_g, ["G_g"])] if guidance_on else [])
    grads = {}
    for loss, names in jobs:
        params = [p for n in names for p in groups[n]]
        gs = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
        it = iter(gs)
        for n in names:
            grads[n] = [g if g is not None else torch.zeros_like(p)
                        for p, g in zip(groups[n], it)]
    return grads


def train_step(batch: Batch, nets: C2GANNets, optimizers: dict, cfg: TrainConfig) -> dict:
    """One alternating update; returns the loss values measured before any update."""
    bundle = forward_losses(nets, batch, cfg)
    for name in ("total_g", "total_d"):
        if not math.isfinite(getattr(bundle, name).item()):
            raise FloatingPointError(f"non-finite loss term {name!r}")
    groups = nets.param_groups()
    guidance_on = cfg.toggles.guidance_on
    grads = compute_gradients(bundle, groups, guidance_on, image_objective(bundle, cfg))
    for name in ("G_i", "D_i", "G_g", "D_g"):
        if name not in grads:
            continue
        opt = optimizers[name]
        opt.zero_grad(set_to_none=True)
        for p, g in zip(groups[name], grads[name]):
            p.grad = g
        opt.step()
        opt.zero_grad(set_to_none=True)
        # a finite sum of the parameter sums implies every entry is finite
        if not torch.isfinite(torch.stack([p.detach().sum() for p in groups[name]]).sum()):
            raise FloatingPointError(f"non-finite parameters in {name} after update")
    return bundle.as_floats()


# -- checkpoints ---------------------------------------------------------------

def checkpoint_state(nets, optimizers, cfg: TrainConfig, epoch: int, history: list) -> dict:
    return {
        "schema_version": CHECKPOINT_SCHEMA,
        "epoch": epoch,
        "net_config": cfg.net.to_dict(),
        "train_config": cfg.to_dict(),
        "networks": nets.state_dict(),
        "optimizers": {k: o.state_dict() for k, o in optimizers.items()},
        "rng": {"torch": torch.get_rng_state()},
        "history": [dict(r) for r in history],
    }


def save_checkpoint(state: dict, path) -> Path:
    """Write a single-file checkpoint atomically (temp file, then rename)."""
    path = Path(path)
    buf = io.BytesIO()
    torch.save(state, buf)
    payload = buf.getvalue()
    header = CHECKPOINT_MAGIC + CHECKPOINT_SCHEMA.to_bytes(4, "little")
    digest = hashlib.sha256(payload).digest()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header + len(payload).to_bytes(8, "little") + digest + payload)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected_net: NetConfig | None = None) -> dict:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    head = len(CHECKPOINT_MAGIC)
    if not blob.startswith(CHECKPOINT_MAGIC) or len(blob) < head + 44:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version = int.from_bytes(blob[head:head + 4], "little")
    if version != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"{path}: schema_version {version}, expected {CHECKPOINT_SCHEMA}")
    size = int.from_bytes(blob[head + 4:head + 12], "little")
    digest, payload = blob[head + 12:head + 44], blob[head + 44:]
    if len(payload) != size or hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint")
    state = torch.load(io.BytesIO(payload), weights_only=True)
    if state.get("schema_version") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"{path}: schema_version mismatch")
    if expected_net is not None and state["net_config"] != expected_net.to_dict():
        raise CheckpointError(
            f"{path}: NetConfig mismatch (checkpoint {state['net_config']}, "
            f"expected {expected_net.to_dict()})")
    return state


def restore(state: dict):
    """Rebuild (nets, optimizers, cfg) from a loaded checkpoint state."""
    cfg = TrainConfig.from_dict(state["train_config"])
    nets = build_networks(cfg.net, cfg.share_generators, cfg.cross_modal, cfg.seed)
    nets.load_state_dict(state["networks"])
    optimizers = build_optimizers(nets, cfg)
    for k, o in optimizers.items():
        o.load_state_dict(state["optimizers"][k])
    torch.set_rng_state(state["rng"]["torch"])
    return nets, optimizers, cfg


def load_networks(path, expected_net: NetConfig | None = None):
    """Networks and config from a checkpoint, in evaluation mode."""
    nets, _, cfg = restore(load_checkpoint(path, expected_net))
    nets.eval()
    return nets, cfg


# -- history / grids -----------------------------------------------------------

def write_loss_csv(history: list, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([repr(row[c]) for c in HISTORY_COLUMNS])
    os.replace(tmp, path)
    return path


def read_loss_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in r.items()} for r in rows]


@torch.no_grad()
def sample_grid(nets: C2GANNets, batch: Batch) -> np.ndarray:
    """Rows of: input | target guidance | generated | ground truth | generated guidance."""
    was_training = nets.training
    nets.eval()
    gen_y = nets.G_i(torch.cat([batch.image_x, batch.guidance_y], 1))
    gen_guid = nets.G_g(gen_y)
    nets.train(was_training)

    def heat(h):
        g = (h.max(0).values.numpy() * 255).round().clip(0, 255).astype(np.uint8)
        return np.repeat(g[..., None], 3, axis=2)

    rows = []
    for i in range(len(batch)):
        rows.append(np.concatenate([
            to_uint8(batch.image_x[i].numpy()), heat(batch.guidance_y[i]),
            to_uint8(gen_y[i].numpy()), to_uint8(batch.image_y[i].numpy()), heat(gen_guid[i]),
        ], axis=1))
    return np.concatenate(rows, axis=0)


# -- fit -----------------------------------------------------------------------

@dataclass
class FitResult:
    nets: C2GANNets
    history: list
    checkpoints: list


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x73687566, epoch])).permutation(n)


def configure_determinism():
    torch.use_deterministic_algorithms(True)


def fit(dataset: Dataset, cfg: TrainConfig, run_dir=None, resume=None,
        epoch_callback=None) -> FitResult:
    """Train for ``cfg.epochs_total`` epochs.

    ``resume`` is a checkpoint path; training continues after its epoch and the
    stored loss history is extended. Checkpoints go to ``run_dir/checkpoints``.
    ``epoch_callback(epoch, nets)`` runs after every epoch.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.num_keypoints != cfg.net.num_keypoints or dataset.image_size != cfg.net.image_size:
        raise ValueError(
            f"dataset (K={dataset.num_keypoints}, size={dataset.image_size}) does not match "
            f"NetConfig (K={cfg.net.num_keypoints}, size={cfg.net.image_size})")
    configure_determinism()
    if resume is not None:
        state = load_checkpoint(resume, cfg.net)
        if TrainConfig.from_dict(state["train_config"]) != cfg:
            raise CheckpointError(f"{resume}: TrainConfig differs from the requested run")
        nets, optimizers, _ = restore(state)
        history = list(state["history"])
        start_epoch = state["epoch"] + 1
    else:
        torch.manual_seed(cfg.seed)
        nets = build_networks(cfg.net, cfg.share_generators, cfg.cross_modal, cfg.seed)
        optimizers = build_optimizers(nets, cfg)
        history = []
        start_epoch = 0
    nets.train()

    data = collate(dataset.pairs)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    ckpt_dir = Path(run_dir) / "checkpoints" if run_dir is not None else None
    checkpoints = []

    for epoch in range(start_epoch, cfg.epochs_total):
        lr = lr_schedule(epoch, cfg)
        set_lr(optimizers, lr)
        order = epoch_order(n, cfg.seed, epoch)
        for b in range(steps_per_epoch):
            idx = torch.from_numpy(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            batch = Batch(data.image_x[idx], data.guidance_x[idx],
                          data.image_y[idx], data.guidance_y[idx])
            try:
                losses = train_step(batch, nets, optimizers, cfg)
            except FloatingPointError as exc:
                last = checkpoints[-1] if checkpoints else None
                raise FloatingPointError(
                    f"epoch {epoch} step {b}: {exc}; last good checkpoint: {last}") from exc
            history.append({"step": len(history), "epoch": epoch, "lr": lr, **losses})
        recent = history[-steps_per_epoch:]
        log.info("epoch %d/%d lr=%.2e total_g=%.4f total_d=%.4f", epoch + 1, cfg.epochs_total, lr,
                 float(np.mean([r["total_g"] for r in recent])),
                 float(np.mean([r["total_d"] for r in recent])))
        if epoch_callback is not None:
            epoch_callback(epoch, nets)
        last_epoch = epoch == cfg.epochs_total - 1
        if ckpt_dir is not None and ((epoch + 1) % cfg.checkpoint_every == 0 or last_epoch):
            state = checkpoint_state(nets, optimizers, cfg, epoch, history)
            path = save_checkpoint(state, ckpt_dir / f"epoch_{epoch + 1:04d}.ckpt")
            save_checkpoint(state, ckpt_dir / "last.ckpt")
            write_loss_csv(history, Path(run_dir) / "losses.csv")
            checkpoints.append(path)
    if run_dir is not None:
        write_loss_csv(history, Path(run_dir) / "losses.csv")
    nets.eval()
    return FitResult(nets, history, checkpoints)


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
