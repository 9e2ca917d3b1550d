"""Face-embedding victims: registry, embedding, cosine scoring and FAR thresholds."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

# 0.01-FAR thresholds of the real recognizers; metadata only, never applied to toy models
REFERENCE_TAUS = {
    "IR152": 0.167,
    "IRSE50": 0.241,
    "MobileFace": 0.302,
    "FaceNet": 0.409,
}


class VictimError(RuntimeError):
    pass


class VictimTrainingError(VictimError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


@dataclass(frozen=True)
class VictimArch:
    """Descriptor of a toy embedder. ``kind`` is "plain" or "separable"."""

    name: str
    widths: tuple[int, ...] = (16, 32, 64)
    embed_dim: int = 64
    input_size: tuple[int, int] = (32, 32)
    kind: str = "plain"
    kernel: int = 3

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["input_size"] = tuple(d["input_size"])
        return cls(**d)


DEFAULT_ARCHS = (
    VictimArch("ir-toy", widths=(16, 32, 64), embed_dim=64, input_size=(32, 32)),
    VictimArch("irse-toy", widths=(12, 24, 48, 64), embed_dim=48, input_size=(40, 40)),
    VictimArch("mobile-toy", widths=(16, 32, 48), embed_dim=32, input_size=(40, 40), kind="separable"),
    VictimArch("facenet-toy", widths=(24, 48), embed_dim=40, input_size=(36, 36), kernel=5),
)


class ToyEmbedder(nn.Module):
    def __init__(self, arch: VictimArch):
        super().__init__()
        self.arch = arch
        layers = []
        cin = 3
        pad = arch.kernel // 2
        for wd in arch.widths:
            if arch.kind == "separable" and cin > 3:
                layers += [
                    nn.Conv2d(cin, cin, arch.kernel, padding=pad, groups=cin),
                    nn.Conv2d(cin, wd, 1),
                ]
            elif arch.kind in ("plain", "separable"):
                layers.append(nn.Conv2d(cin, wd, arch.kernel, padding=pad))
            else:
                raise ValueError(f"unknown victim kind {arch.kind!r}")
            layers += [nn.BatchNorm2d(wd), nn.PReLU(wd), nn.MaxPool2d(2)]
            cin = wd
        self.features = nn.Sequential(*layers)
        h, w = arch.input_size
        n = len(arch.widths)
        self.fc = nn.Linear(cin * (h >> n) * (w >> n), arch.embed_dim)

    def forward(self, x):
        return self.fc(self.features(x).flatten(1))


@dataclass
class VictimModel:
    """A frozen differentiable embedder with preprocessing and its threshold."""

    name: str
    net: nn.Module
    input_size: tuple[int, int]
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    tau: float | None = None
    reference_tau: float | None = None
    trainable: bool = False
    arch: VictimArch | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tau is not None and not -1.0 <= self.tau <= 1.0:
            raise VictimError(f"tau {self.tau} outside [-1, 1]")
        if not self.trainable:
            freeze(self.net)

    def __call__(self, img):
        return embed(img, self)


def freeze(net: nn.Module) -> nn.Module:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def cosine(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last dimension."""
    u = torch.as_tensor(u)
    v = torch.as_tensor(v)
    nu = torch.linalg.vector_norm(u, dim=-1)
    nv = torch.linalg.vector_norm(v, dim=-1)
    if (nu == 0).any() or (nv == 0).any():
        raise VictimError("cosine of a zero-norm vector")
    return (u * v).sum(-1) / (nu * nv)


def embed(img: torch.Tensor, model: VictimModel) -> torch.Tensor:
    """Resize (bilinear), normalize and embed ``(..., 3, H, W)`` images."""
    batched = img.dim() == 4
    x = img if batched else img.unsqueeze(0)
    if not torch.isfinite(x).all():
        raise VictimError("non-finite input image")
    p = next(model.net.parameters())
    x = x.to(p.dtype)
    if tuple(x.shape[-2:]) != tuple(model.input_size):
        x = F.interpolate(x, size=tuple(model.input_size), mode="bilinear", align_corners=False)
    mean = x.new_tensor(model.mean).view(1, 3, 1, 1)
    std = x.new_tensor(model.std).view(1, 3, 1, 1)
    out = model.net((x - mean) / std)
    return out if batched else out.squeeze(0)


def calibrate_threshold(impostor_scores, far: float = 0.01) -> float:
    """Smallest score ``t`` whose strict exceedance fraction is at most ``far``."""
    s = np.sort(np.asarray(impostor_scores, dtype=np.float64).ravel())
    if s.size == 0:
        raise VictimError("cannot calibrate on an empty score list")
    if not 0.0 < far < 1.0:
        raise VictimError(f"far must be in (0, 1), got {far}")
    n = s.size
    exceed = n - np.searchsorted(s, s, side="right")
    ok = exceed / n <= far
    # exceedance is non-increasing along the sorted scores, so the first hit is the smallest
    return float(s[np.argmax(ok)])


class Registry:
    """Name -> VictimModel lookup that fails loudly on unknown names."""

    def __init__(self, models=()):
        self._models: dict[str, VictimModel] = {}
        for m in models:
            self.register(m)

    def register(self, model: VictimModel):
        if model.reference_tau is None and model.name in REFERENCE_TAUS:
            model.reference_tau = REFERENCE_TAUS[model.name]
        self._models[model.name] = model

    def __getitem__(self, name) -> VictimModel:
        try:
            return self._models[name]
        except KeyError:
            raise VictimError(f"no victim named {name!r}; registered: {sorted(self._models)}") from None

    def __contains__(self, name):
        return name in self._models

    def __iter__(self):
        return iter(self._models.values())

    def __len__(self):
        return len(self._models)

    @property
    def names(self):
        return list(self._models)


# ---------------------------------------------------------------------------
# toy training


class CosFaceHead(nn.Module):
    def __init__(self, embed_dim, n_classes, margin=0.25, scale=16.0):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_classes, embed_dim))
        nn.init.xavier_uniform_(self.weight)
        self.margin = margin
        self.scale = scale

    def forward(self, emb, labels):
        cos = F.linear(F.normalize(emb, dim=1), F.normalize(self.weight, dim=1))
        onehot = F.one_hot(labels, cos.shape[1]).to(cos.dtype)
        return F.cross_entropy(self.scale * (cos - self.margin * onehot), labels)


def pair_scores(emb_a: torch.Tensor, emb_b: torch.Tensor) -> np.ndarray:
    return cosine(emb_a, emb_b).detach().cpu().numpy()


def separation(embeddings: torch.Tensor, labels: np.ndarray) -> tuple[float, float, float]:
    """Mean genuine cosine, mean impostor cosine and their gap over all pairs."""
    z = F.normalize(embeddings, dim=1)
    sims = (z @ z.T).detach().cpu().numpy()
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    genuine = sims[same & off].mean()
    impostor = sims[~same].mean()
    return float(genuine), float(impostor), float(genuine - impostor)


def split_holdout(labels: np.ndarray, per_identity: int):
    """Index split holding out the last ``per_identity`` images of each identity."""
    train, held = [], []
    for ident in np.unique(labels):
        idx = np.flatnonzero(labels == ident)
        train.extend(idx[:-per_identity])
        held.extend(idx[-per_identity:])
    return np.array(train), np.array(held)


def train_toy_victims(
    images: torch.Tensor,
    labels,
    architectures=DEFAULT_ARCHS,
    seed: int = 0,
    min_separation: float = 0.3,
    min_epochs: int = 25,
    max_epochs: int = 80,
    batch_size: int = 32,
    lr: float = 2e-3,
    held_per_identity: int = 2,
    augment_noise: float = 0.02,
) -> list[VictimModel]:
    """Train one small embedder per architecture with a CosFace margin loss.

    Training runs at least ``min_epochs`` and stops once the genuine/impostor
    cosine gap on the held-out images reaches ``min_separation`` (checked each
    epoch) or the epoch cap is hit, in which case ``VictimTrainingError`` carries a report.
    """
    labels = np.asarray(labels)
    idents, counts = np.unique(labels, return_counts=True)
    if len(idents) < 2 or counts.min() < 2:
        raise VictimError("need at least 2 identities with 2 images each")
    held_per_identity = min(held_per_identity, int(counts.min()) - 1)
    train_idx, held_idx = split_holdout(labels, held_per_identity) if held_per_identity > 0 else (np.arange(len(labels)),) * 2
    remap = {int(v): i for i, v in enumerate(idents)}
    y = torch.tensor([remap[int(v)] for v in labels])
    x = images.float()

    models, report = [], {}
    for k, arch in enumerate(architectures):
        torch.manual_seed(seed * 1000 + k)
        rng = np.random.default_rng(seed * 1000 + k)
        net = ToyEmbedder(arch)
        head = CosFaceHead(arch.embed_dim, len(idents))
        opt = torch.optim.Adam(list(net.parameters()) + list(head.parameters()), lr=lr)
        victim = VictimModel(arch.name, net, arch.input_size, trainable=True, arch=arch)
        history = []
        for epoch in range(max_epochs):
            net.train()
            order = rng.permutation(train_idx)
            for start in range(0, len(order), batch_size):
                idx = torch.from_numpy(order[start:start + batch_size])
                xb = x[idx]
                if augment_noise:
                    xb = (xb + augment_noise * torch.randn_like(xb)).clamp(0, 1)
                loss = head(embed(xb, victim), y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
            net.eval()
            with torch.no_grad():
                g, imp, sep = separation(embed(x[torch.from_numpy(held_idx)], victim), labels[held_idx])
            history.append(sep)
            if sep >= min_separation and epoch + 1 >= min_epochs:
                break
        report[arch.name] = {"separation": sep, "genuine": g, "impostor": imp, "epochs": epoch + 1}
        log.info("victim %s: separation %.3f after %d epochs", arch.name, sep, epoch + 1)
        if sep < min_separation:
            raise VictimTrainingError(
                f"victim {arch.name} reached separation {sep:.3f} < {min_separation} in {max_epochs} epochs",
                report,
            )
        freeze(net)
        victim.trainable = False
        victim.meta = dict(report[arch.name])
        models.append(victim)
    return models
