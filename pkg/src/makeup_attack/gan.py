"""Eye-shadow patch generator and patch discriminator, with their GAN losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

LOG_EPS = 1e-12
# keeps the discriminator output strictly inside (0, 1) even in float32
PROB_EPS = 1e-6


@dataclass(frozen=True)
class GeneratorArch:
    """U-Net descriptor.

    ``cond_channels`` > 0 feeds an extra conditioning patch (the target's
    orbital crop) alongside the source patch; 0 gives a plain ``G(O_s)``.
    """

    patch_shape: tuple[int, int] = (32, 64)
    base_width: int = 16
    depth: int = 3
    cond_channels: int = 3

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["patch_shape"] = tuple(d["patch_shape"])
        return cls(**d)


@dataclass(frozen=True)
class DiscriminatorArch:
    patch_shape: tuple[int, int] = (32, 64)
    base_width: int = 16
    n_layers: int = 3

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["patch_shape"] = tuple(d["patch_shape"])
        return cls(**d)


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.LeakyReLU(0.2),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.LeakyReLU(0.2),
    )


class UNetGenerator(nn.Module):
    """Encoder-decoder with skip connections producing a patch in [0, 1].

    The decoder predicts a residual in logit space on top of the input patch
    and its last conv starts at zero, so an untrained generator reproduces its
    input (up to the logit clamp).
    """

    def __init__(self, arch: GeneratorArch = GeneratorArch()):
        super().__init__()
        self.arch = arch
        h, w = arch.patch_shape
        if h % 2 ** (arch.depth - 1) or w % 2 ** (arch.depth - 1):
            raise ValueError(f"patch shape {arch.patch_shape} not divisible by 2^{arch.depth - 1}")
        widths = [arch.base_width * 2 ** i for i in range(arch.depth)]
        cin = 3 + arch.cond_channels
        self.down = nn.ModuleList()
        for wd in widths:
            self.down.append(_block(cin, wd))
            cin = wd
        self.up = nn.ModuleList()
        for wd in reversed(widths[:-1]):
            self.up.append(_block(cin + wd, wd))
            cin = wd
        # the head also sees the input and conditioning logits, so colour transfer
        # from the conditioning patch is a linear map of its inputs
        self.head = nn.Conv2d(cin + 3 + arch.cond_channels, 3, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x, cond=None):
        if tuple(x.shape[-2:]) != self.arch.patch_shape or x.shape[-3] != 3:
            raise ValueError(f"generator expects (.., 3, {self.arch.patch_shape}), got {tuple(x.shape)}")
        base = torch.logit(x.clamp(1e-3, 1 - 1e-3))
        if self.arch.cond_channels:
            if cond is None:
                raise ValueError("this generator needs a conditioning patch")
            h = torch.cat([x, cond], dim=-3)
            direct = torch.cat([base, torch.logit(cond.clamp(1e-3, 1 - 1e-3))], dim=-3)
        else:
            h = x
            direct = base
        skips = []
        for i, block in enumerate(self.down):
            if i:
                h = F.avg_pool2d(h, 2)
            h = block(h)
            skips.append(h)
        for block, skip in zip(self.up, reversed(skips[:-1])):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skip], dim=-3))
        return torch.sigmoid(base + self.head(torch.cat([h, direct], dim=-3)))


class PatchDiscriminator(nn.Module):
    """Strided-conv classifier mapping a patch to a probability in (0, 1)."""

    def __init__(self, arch: DiscriminatorArch = DiscriminatorArch()):
        super().__init__()
        self.arch = arch
        layers = []
        cin = 3
        for i in range(arch.n_layers):
            cout = arch.base_width * 2 ** i
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(cin, 1)

    def forward(self, x):
        if tuple(x.shape[-2:]) != self.arch.patch_shape or x.shape[-3] != 3:
            raise ValueError(f"discriminator expects (.., 3, {self.arch.patch_shape}), got {tuple(x.shape)}")
        z = self.features(x).mean(dim=(-2, -1))
        logit = self.head(z).squeeze(-1)
        return PROB_EPS + (1 - 2 * PROB_EPS) * torch.sigmoid(logit)


def _check_finite(params):
    for name, p in params.items():
        if not torch.isfinite(p).all():
            raise ValueError(f"non-finite generator parameter {name}")


def generate(patch, generator: UNetGenerator, params=None, cond=None):
    """``O_hat = G(O_s)``; ``params`` overrides the module's own parameters."""
    if params is None:
        return generator(patch, cond)
    _check_finite(params)
    return functional_call(generator, params, (patch, cond))


def discriminate(patch, discriminator: PatchDiscriminator, params=None):
    if params is None:
        return discriminator(patch)
    return functional_call(discriminator, params, (patch,))


def gen_loss(d_on_fake: torch.Tensor) -> torch.Tensor:
    """E[log(1 - D(G(O_s)))] over the batch; the generator minimizes it."""
    d_on_fake = torch.as_tensor(d_on_fake)
    if d_on_fake.numel() == 0:
        raise ValueError("empty batch")
    return torch.log((1 - d_on_fake).clamp_min(LOG_EPS)).mean()


def dis_loss(d_on_real: torch.Tensor, d_on_fake: torch.Tensor) -> torch.Tensor:
    """-(E[log D(O_m)] + E[log(1 - D(G(O_s)))])."""
    d_on_real = torch.as_tensor(d_on_real)
    d_on_fake = torch.as_tensor(d_on_fake)
    if d_on_real.numel() == 0 or d_on_fake.numel() == 0:
        raise ValueError("empty batch")
    real_term = torch.log(d_on_real.clamp_min(LOG_EPS)).mean()
    fake_term = torch.log((1 - d_on_fake).clamp_min(LOG_EPS)).mean()
    return -(real_term + fake_term)
