"""Attack success rate and threshold sweeps over pair similarities."""

from __future__ import annotations

import numpy as np
import torch

from ..victims import VictimModel, cosine, embed


class MetricError(ValueError):
    pass


def pair_similarities(pairs, model: VictimModel, batch_size: int = 256) -> np.ndarray:
    """Cosine between ``F(target)`` and ``F(adv)`` for ``(adv, target)`` pairs.

    ``pairs`` is either a sequence of image tuples or a tuple of two stacked
    ``(N, 3, H, W)`` tensors.
    """
    if isinstance(pairs, tuple) and len(pairs) == 2 and torch.is_tensor(pairs[0]):
        adv, tgt = pairs
    else:
        pairs = list(pairs)
        if not pairs:
            raise MetricError("empty pair list")
        adv = torch.stack([a for a, _ in pairs])
        tgt = torch.stack([t for _, t in pairs])
    if len(adv) == 0 or len(adv) != len(tgt):
        raise MetricError(f"bad pair tensors: {len(adv)} adversarial vs {len(tgt)} target images")
    out = []
    with torch.no_grad():
        for s in range(0, len(adv), batch_size):
            out.append(cosine(embed(tgt[s:s + batch_size], model), embed(adv[s:s + batch_size], model)))
    return torch.cat(out).double().numpy()


def asr_from_scores(scores, tau: float) -> float:
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise MetricError("empty pair list")
    return 100.0 * np.count_nonzero(s > tau) / s.size


def asr(pairs, model: VictimModel, tau: float) -> float:
    """Percentage of pairs whose similarity is strictly above ``tau``."""
    return asr_from_scores(pair_similarities(pairs, model), tau)


def sweep_from_scores(scores, tau_grid) -> np.ndarray:
    """``(len(grid), 2)`` array of ``(tau, ASR)`` rows."""
    grid = np.asarray(tau_grid, dtype=np.float64).ravel()
    if grid.size == 0:
        raise MetricError("empty tau grid")
    if np.any(np.diff(grid) < 0):
        raise MetricError("tau grid must be sorted ascending")
    s = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    if s.size == 0:
        raise MetricError("empty pair list")
    above = s.size - np.searchsorted(s, grid, side="right")
    return np.stack([grid, 100.0 * above / s.size], axis=1)


def threshold_sweep(pairs, model: VictimModel, tau_grid) -> np.ndarray:
    return sweep_from_scores(pair_similarities(pairs, model), tau_grid)
