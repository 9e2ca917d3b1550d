"""Gradient attacks confined to the orbital mask: FGSM, PGD and MI-FGSM.

All three descend the mean impersonation loss over a list of victims and
only ever write pixels where the full-image mask is set.
"""

from __future__ import annotations

import torch
from pydantic import BaseModel, Field

from .geometry import OrbitalMask
from .victims import VictimModel, cosine, embed


class BaselineError(ValueError):
    pass


class GradientAttackConfig(BaseModel):
    epsilon: float = Field(8 / 255, ge=0)
    step_size: float = Field(2 / 255, gt=0)
    iterations: int = Field(10, ge=1)
    momentum: float = Field(1.0, ge=0)


def _support(mask: OrbitalMask, source: torch.Tensor) -> torch.Tensor:
    full = mask.expanded() > 0.5
    if not full.any():
        raise BaselineError("empty mask")
    if full.dim() >= 3 and full.dim() == source.dim() - 1:
        full = full.unsqueeze(-3)
    return full.expand_as(source)


def _loss_grad(x: torch.Tensor, target_emb: list, models: list[VictimModel]) -> torch.Tensor:
    x = x.detach().requires_grad_(True)
    loss = sum((1 - cosine(t, embed(x, m))).mean() for t, m in zip(target_emb, models)) / len(models)
    (g,) = torch.autograd.grad(loss, x)
    return g


def _targets(target, models):
    if not models:
        raise BaselineError("need at least one victim model")
    with torch.no_grad():
        return [embed(target, m) for m in models]


def masked_fgsm(source, target, models, mask: OrbitalMask, cfg: GradientAttackConfig = GradientAttackConfig()):
    """One signed step of size epsilon against the mean impersonation loss."""
    support = _support(mask, source)
    g = _loss_grad(source, _targets(target, models), models)
    adv = (source - cfg.epsilon * g.sign()).clamp(0, 1)
    return torch.where(support, adv, source).detach()


def masked_pgd(source, target, models, mask: OrbitalMask, cfg: GradientAttackConfig = GradientAttackConfig(),
               trajectory=None):
    """Iterated masked steps, projected onto the epsilon ball and the unit box.

    No random start, so one step with ``step_size == epsilon`` is FGSM.
    """
    return _iterate(source, target, models, mask, cfg, momentum=None, trajectory=trajectory)


def masked_mifgsm(source, target, models, mask: OrbitalMask, cfg: GradientAttackConfig = GradientAttackConfig(),
                  trajectory=None):
    """PGD driven by ``g <- mu * g + grad / ||grad||_1`` (per image)."""
    return _iterate(source, target, models, mask, cfg, momentum=cfg.momentum, trajectory=trajectory)


def _iterate(source, target, models, mask, cfg, momentum, trajectory):
    support = _support(mask, source)
    tgt = _targets(target, models)
    lo = (source - cfg.epsilon).clamp_min(0)
    hi = (source + cfg.epsilon).clamp_max(1)
    x = source.detach()
    acc = torch.zeros_like(source)
    for _ in range(cfg.iterations):
        g = _loss_grad(x, tgt, models)
        if momentum is not None:
            norm = g.abs().sum(dim=(-3, -2, -1), keepdim=True).clamp_min(1e-12)
            acc = momentum * acc + g / norm
            g = acc
        step = torch.minimum(torch.maximum(x - cfg.step_size * g.sign(), lo), hi)
        x = torch.where(support, step, source).detach()
        if trajectory is not None:
            trajectory.append(x)
    return x
