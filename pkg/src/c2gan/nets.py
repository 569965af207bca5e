"""U-Net generators and PatchGAN discriminators.

Four networks take part in training: the image generator (image + target
heatmaps -> image), the guidance generator (image -> heatmaps), and one
PatchGAN per modality. Discriminators return probabilities from ``forward``
and expose ``logits`` so the losses can stay numerically stable.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

NORM_KINDS = ("batch", "instance")
INIT_SCHEMES = ("gaussian_0_0.02",)


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 64
    num_keypoints: int = 5
    base_filters: int = 64
    unet_depth: int = 6
    patch_layers: int = 3
    disc_filters: int = 0  # 0 -> same as base_filters
    norm_kind: str = "instance"
    init_scheme: str = "gaussian_0_0.02"

    def __post_init__(self):
        if self.image_size < 1 or self.num_keypoints < 1 or self.base_filters < 1:
            raise ValueError(f"invalid NetConfig sizes: {self}")
        if self.unet_depth < 1 or self.image_size // 2 ** self.unet_depth < 1:
            raise ValueError(
                f"unet_depth={self.unet_depth} leaves no spatial extent at the "
                f"bottleneck for image_size={self.image_size}"
            )
        if self.patch_layers < 1:
            raise ValueError("patch_layers must be >= 1")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {NORM_KINDS}, got {self.norm_kind!r}")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"init_scheme must be one of {INIT_SCHEMES}, got {self.init_scheme!r}")

    @property
    def d_filters(self) -> int:
        return self.disc_filters or self.base_filters

    def to_dict(self) -> dict:
        return asdict(self)


def _norm(kind, channels):
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    return nn.InstanceNorm2d(channels, affine=True)


def init_weights(module: nn.Module, seed: int) -> None:
    """Zero-mean Gaussian (std 0.02) for convs; norm scales ~ N(1, 0.02), shifts zero."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)) and m.weight is not None:
            with torch.no_grad():
                m.weight.normal_(1.0, 0.02, generator=gen)
                m.bias.zero_()


class UNetGenerator(nn.Module):
    """Encoder-decoder; decoder level i sees the encoder level i activations as a skip input.

    Channel widths follow the pix2pix ladder base * min(2**i, 8). The innermost
    level has no normalization because its spatial extent can be 1x1.
    """

    def __init__(self, in_channels, out_channels, base_filters=64, depth=6,
                 norm_kind="instance", output="tanh"):
        super().__init__()
        if in_channels < 1 or out_channels < 1:
            raise ValueError(f"invalid channel counts {in_channels} -> {out_channels}")
        if output not in ("tanh", "sigmoid"):
            raise ValueError(f"unknown output activation {output!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        widths = [base_filters * min(2 ** i, 8) for i in range(depth)]

        self.down = nn.ModuleList()
        self.up = nn.ModuleList()
        for i in range(depth):
            c_in = in_channels if i == 0 else widths[i - 1]
            if i == 0:
                self.down.append(nn.Conv2d(c_in, widths[0], 4, 2, 1))
            elif i == depth - 1:
                self.down.append(nn.Sequential(
                    nn.LeakyReLU(0.2), nn.Conv2d(c_in, widths[i], 4, 2, 1)))
            else:
                # no bias ahead of a norm layer: it would be cancelled
                self.down.append(nn.Sequential(
                    nn.LeakyReLU(0.2), nn.Conv2d(c_in, widths[i], 4, 2, 1, bias=False),
                    _norm(norm_kind, widths[i])))
        for i in range(depth):
            c_in = widths[i] if i == depth - 1 else 2 * widths[i]
            if i == 0:
                self.up.append(nn.Sequential(
                    nn.ReLU(), nn.ConvTranspose2d(c_in, out_channels, 4, 2, 1)))
            else:
                self.up.append(nn.Sequential(
                    nn.ReLU(), nn.ConvTranspose2d(c_in, widths[i - 1], 4, 2, 1, bias=False),
                    _norm(norm_kind, widths[i - 1])))
        self.activation = nn.Tanh() if output == "tanh" else nn.Sigmoid()

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"generator expects (N, {self.in_channels}, H, W) input, got {tuple(x.shape)}")
        skips = []
        for layer in self.down:
            x = layer(x)
            skips.append(x)
        x = self.up[-1](skips[-1])
        for i in range(len(self.up) - 2, -1, -1):
            x = self.up[i](torch.cat([skips[i], x], 1))
        return self.activation(x)


class PatchDiscriminator(nn.Module):
    """PatchGAN: ``patch_layers`` stride-2 conv blocks, one stride-1 block, 1-channel score map."""

    def __init__(self, in_channels, base_filters=64, patch_layers=3, norm_kind="instance"):
        super().__init__()
        if in_channels < 1:
            raise ValueError(f"invalid discriminator input channels {in_channels}")
        self.in_channels = in_channels
        self.per_sample = norm_kind == "instance"
        layers = [nn.Conv2d(in_channels, base_filters, 4, 2, 1), nn.LeakyReLU(0.2)]
        mult = 1
        for n in range(1, patch_layers):
            prev, mult = mult, min(2 ** n, 8)
            layers += [nn.Conv2d(base_filters * prev, base_filters * mult, 4, 2, 1, bias=False),
                       _norm(norm_kind, base_filters * mult), nn.LeakyReLU(0.2)]
        prev, mult = mult, min(2 ** patch_layers, 8)
        layers += [nn.Conv2d(base_filters * prev, base_filters * mult, 4, 1, 1, bias=False),
                   _norm(norm_kind, base_filters * mult), nn.LeakyReLU(0.2),
                   nn.Conv2d(base_filters * mult, 1, 4, 1, 1)]
        self.model = nn.Sequential(*layers)

    def logits(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"discriminator expects (N, {self.in_channels}, H, W) input, got {tuple(x.shape)}")
        return self.model(x)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def patch_map_size(image_size: int, patch_layers: int) -> int:
    s = image_size
    for _ in range(patch_layers):
        s = (s + 2 - 4) // 2 + 1
    # two stride-1 k4 p1 convs each shrink by one
    return s - 2


def count_parameters(*modules: nn.Module) -> int:
    seen = set()
    total = 0
    for m in modules:
        for p in m.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                total += p.numel()
    return total


def build_image_generator(cfg: NetConfig, seed: int = 0, in_channels=None, out_channels=3):
    in_channels = 3 + cfg.num_keypoints if in_channels is None else in_channels
    if in_channels != 3 + cfg.num_keypoints or out_channels != 3:
        raise ValueError(
            f"image generator maps {3 + cfg.num_keypoints} -> 3 channels, "
            f"got {in_channels} -> {out_channels}")
    net = UNetGenerator(in_channels, out_channels, cfg.base_filters, cfg.unet_depth,
                        cfg.norm_kind, output="tanh")
    init_weights(net, seed)
    return net


def build_guidance_generator(cfg: NetConfig, seed: int = 0, in_channels=3, out_channels=None):
    out_channels = cfg.num_keypoints if out_channels is None else out_channels
    if in_channels != 3 or out_channels != cfg.num_keypoints:
        raise ValueError(
            f"guidance generator maps 3 -> {cfg.num_keypoints} channels, "
            f"got {in_channels} -> {out_channels}")
    net = UNetGenerator(3, cfg.num_keypoints, cfg.base_filters, cfg.unet_depth,
                        cfg.norm_kind, output="sigmoid")
    init_weights(net, seed)
    return net


def build_image_discriminator(cfg: NetConfig, seed: int = 0, cross_modal: bool = True,
                              in_channels=None):
    """Cross-modal input is [conditioning image, guidance, candidate]; single-modal is the candidate."""
    expected = 3 + cfg.num_keypoints + 3 if cross_modal else 3
    in_channels = expected if in_channels is None else in_channels
    if in_channels != expected:
        raise ValueError(f"image discriminator expects {expected} channels, got {in_channels}")
    net = PatchDiscriminator(in_channels, cfg.d_filters, cfg.patch_layers, cfg.norm_kind)
    init_weights(net, seed)
    return net


def build_guidance_discriminator(cfg: NetConfig, seed: int = 0, cross_modal: bool = True,
                                 in_channels=None):
    """Cross-modal input is [image, guidance]; single-modal sees only the guidance."""
    expected = 3 + cfg.num_keypoints if cross_modal else cfg.num_keypoints
    in_channels = expected if in_channels is None else in_channels
    if in_channels != expected:
        raise ValueError(f"guidance discriminator expects {expected} channels, got {in_channels}")
    net = PatchDiscriminator(in_channels, cfg.d_filters, cfg.patch_layers, cfg.norm_kind)
    init_weights(net, seed)
    return net


def shared_or_cloned(net: nn.Module, share: bool, seed: int = 0) -> nn.Module:
    """Return ``net`` itself when sharing, else a deep copy re-initialized from ``seed``."""
    if share:
        return net
    clone = copy.deepcopy(net)
    init_weights(clone, seed)
    return clone
