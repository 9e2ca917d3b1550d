"""Imperceptibility losses: gradient-domain constraint, content and style."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import OrbitalPatch, embed_patch


def _per_sample_sum(x: torch.Tensor, n_item_dims: int) -> torch.Tensor:
    """Sum the trailing item dims, then average any leading batch dims."""
    s = x.sum(dim=tuple(range(-n_item_dims, 0)))
    return s.mean() if s.dim() else s


# ---------------------------------------------------------------------------
# gradient-domain constraint


def spatial_gradient(img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward differences along x (columns) and y (rows).

    The last column of ``gx`` and last row of ``gy`` are zero, i.e. the edge
    pixel is replicated before differencing.
    """
    if img.shape[-1] < 2 or img.shape[-2] < 2:
        raise ValueError(f"spatial_gradient needs H, W >= 2, got {tuple(img.shape[-2:])}")
    gx = F.pad(img[..., :, 1:] - img[..., :, :-1], (0, 1))
    gy = F.pad(img[..., 1:, :] - img[..., :-1, :], (0, 0, 0, 1))
    return gx, gy


def grad_loss(source: torch.Tensor, generated: OrbitalPatch, composite_img: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance between the guidance field and the composite's gradient.

    Guidance is the source gradient outside ``M*`` and the gradient of the
    zero-canvas generated patch inside it.
    """
    if source.shape != composite_img.shape:
        raise ValueError("source and composite shapes differ")
    m = generated.mask.expanded().to(source)
    if m.dim() >= 3 and m.dim() == source.dim() - 1:
        m = m.unsqueeze(-3)
    h_patch = embed_patch(generated.pixels.to(source), generated.mask.bbox, generated.mask.image_shape)
    total = 0.0
    for g_src, g_gen, g_cmp in zip(spatial_gradient(source), spatial_gradient(h_patch), spatial_gradient(composite_img)):
        diff = g_src * (1 - m) + g_gen * m - g_cmp
        total = total + _per_sample_sum(diff ** 2, 3)
    return total


# ---------------------------------------------------------------------------
# feature extractor


class FeatureExtractor(nn.Module):
    """Frozen stack of named stages; each stage output is one feature layer.

    ``content_weights`` / ``style_weights`` default to ``1/P``. ``input_size``
    set means inputs are bilinearly resized to it first; None means any size
    the stages accept.
    """

    def __init__(self, stages, content_weights=None, style_weights=None, input_size=None):
        super().__init__()
        names = [name for name, _ in stages]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self.names = names
        self.stages = nn.ModuleList([m for _, m in stages])
        p = len(stages)
        self.content_weights = list(content_weights) if content_weights is not None else [1.0 / p] * p
        self.style_weights = list(style_weights) if style_weights is not None else [1.0 / p] * p
        if min(self.content_weights + self.style_weights) < 0:
            raise ValueError("layer weights must be non-negative")
        self.input_size = input_size
        for param in self.parameters():
            param.requires_grad_(False)
        self.eval()

    def forward(self, img):
        if self.input_size is not None and tuple(img.shape[-2:]) != tuple(self.input_size):
            img = F.interpolate(img, size=tuple(self.input_size), mode="bilinear", align_corners=False)
        outs = []
        h = img
        for stage in self.stages:
            h = stage(h)
            outs.append(h)
        return outs


def random_pyramid(seed: int = 0, widths=(8, 16, 32), dtype=torch.float32) -> FeatureExtractor:
    """Fixed random-weight three-stage conv pyramid, a stand-in for VGG16."""
    gen = torch.Generator().manual_seed(seed)
    stages = []
    cin = 3
    for i, wd in enumerate(widths):
        conv = nn.Conv2d(cin, wd, 3, padding=1)
        with torch.no_grad():
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (cin * 9)) ** 0.5)
            conv.bias.zero_()
        layers = [conv, nn.ReLU()]
        if i:
            layers.insert(0, nn.AvgPool2d(2))
        stages.append((f"stage{i + 1}", nn.Sequential(*layers)))
        cin = wd
    return FeatureExtractor(stages).to(dtype)


def feature_maps(img: torch.Tensor, extractor: FeatureExtractor) -> list[torch.Tensor]:
    """Per-layer activations flattened to ``(..., N_p, M_p)``."""
    batched = img.dim() == 4
    x = img if batched else img.unsqueeze(0)
    outs = [a.flatten(-2) for a in extractor(x)]
    return outs if batched else [a.squeeze(0) for a in outs]


def gram(a: torch.Tensor) -> torch.Tensor:
    """``A A^T`` over the last two dims."""
    if not torch.isfinite(a).all():
        raise ValueError("non-finite features")
    return a @ a.transpose(-1, -2)


def _mask_at(mask_full: torch.Tensor, spatial: tuple[int, int], like: torch.Tensor) -> torch.Tensor:
    m = mask_full.to(like.dtype)
    if m.dim() == 2:
        m = m[None, None]
    elif m.dim() == 3:  # batch of (H, W) masks
        m = m.unsqueeze(1)
    return F.interpolate(m, size=spatial, mode="nearest")


def _as_batch(x):
    return x if x.dim() == 4 else x.unsqueeze(0)


def _content_from_features(feats_hat, feats, mask_full, weights):
    total = 0.0
    for w, a_hat, a in zip(weights, feats_hat, feats):
        n_p = a.shape[-3]
        m_p = a.shape[-2] * a.shape[-1]
        m = _mask_at(mask_full, tuple(a.shape[-2:]), a)
        energy = (((a_hat - a) * m) ** 2).sum(dim=(-3, -2, -1))
        total = total + w / (2 * n_p * m_p) * energy
    return total.mean()


def _style_from_features(feats_hat, feats, weights, normalization):
    if normalization not in ("literal", "gatys"):
        raise ValueError(f"unknown normalization {normalization!r}")
    total = 0.0
    for w, a_hat, a in zip(weights, feats_hat, feats):
        a_hat = a_hat.flatten(-2)
        a = a.flatten(-2)
        n_p, m_p = a.shape[-2], a.shape[-1]
        diff = ((gram(a_hat) - gram(a)) ** 2).sum(dim=(-2, -1))
        if normalization == "literal":
            total = total + w / (2 * n_p ** 2) * diff
        else:
            total = total + w / (4 * n_p ** 2 * m_p ** 2) * diff
    return total.mean()


def content_loss(composite_img, source, mask_full, extractor: FeatureExtractor) -> torch.Tensor:
    """Masked feature-difference energy, weighted per layer by ``a_p / (2 N_p M_p)``.

    ``mask_full`` is ``M*`` at image resolution; it is nearest-neighbour
    downsampled to each layer grid.
    """
    if composite_img.shape != source.shape:
        raise ValueError("composite and source shapes differ")
    return _content_from_features(extractor(_as_batch(composite_img)), extractor(_as_batch(source)),
                                  mask_full, extractor.content_weights)


def style_loss(composite_img, source, extractor: FeatureExtractor, normalization: str = "literal") -> torch.Tensor:
    """Gram-matrix mismatch weighted by ``b_p / (2 N_p^2)``.

    ``normalization="gatys"`` switches to the conventional ``b_p / (4 N_p^2 M_p^2)``.
    """
    if composite_img.shape != source.shape:
        raise ValueError("composite and source shapes differ")
    return _style_from_features(extractor(_as_batch(composite_img)), extractor(_as_batch(source)),
                                extractor.style_weights, normalization)


@dataclass
class BlendingLosses:
    grad: torch.Tensor
    content: torch.Tensor
    style: torch.Tensor


def blending_losses(source, generated: OrbitalPatch, composite_img, extractor, style_normalization="literal",
                    source_features=None):
    """All three terms with one extractor pass over the composite.

    ``source_features`` may carry precomputed (constant) source activations.
    """
    if source_features is None:
        with torch.no_grad():
            source_features = extractor(_as_batch(source))
    feats_hat = extractor(_as_batch(composite_img))
    mask_full = generated.mask.expanded().to(source)
    return BlendingLosses(
        grad=grad_loss(source, generated, composite_img),
        content=_content_from_features(feats_hat, source_features, mask_full, extractor.content_weights),
        style=_style_from_features(feats_hat, source_features, extractor.style_weights, style_normalization),
    )
