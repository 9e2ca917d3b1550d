"""Attack losses and the meta-learned training loop for the makeup generator.

Parameters of the generator are handled as ``{name: tensor}`` dicts so that
inner-updated copies can be evaluated with ``torch.func.functional_call``.

The meta machinery only talks to an *objective* through three methods:

``composite(params)``
    adversarial faces produced with generator parameters ``params``;
``model_loss(model, composite)``
    batch-mean attack loss of one victim on those faces;
``aux_losses(params, composite)``
    dict with the ``gen``, ``grad``, ``cont`` and ``style`` terms.

``MakeupObjective`` is the face implementation; tests plug in scalar ones.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, Field
from torch.func import functional_call

from . import blending
from .gan import PatchDiscriminator, UNetGenerator, dis_loss, discriminate, gen_loss, generate
from .geometry import BBox, OrbitalMask, OrbitalPatch, composite
from .victims import VictimModel, cosine, embed

log = logging.getLogger(__name__)

AUX_TERMS = ("gen", "grad", "cont", "style")


class AttackError(RuntimeError):
    pass


class NonFiniteError(AttackError):
    pass


class AttackConfig(BaseModel):
    alpha1: float = Field(1.0, ge=0, description="inner step size and attack-term weight")
    alpha2: float = Field(1.0, ge=0, description="generator GAN-loss weight")
    beta1: float = Field(0.1, ge=0, description="gradient-constraint weight")
    beta2: float = Field(0.1, ge=0, description="content-loss weight")
    beta3: float = Field(0.1, ge=0, description="style-loss weight")
    iterations: int = Field(2000, ge=1)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(0.001, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    lr_d: float = Field(0.001, gt=0)
    momentum_d: float = Field(0.9, ge=0, lt=1)
    optimizer: Literal["sgd", "adam"] = "sgd"
    seed: int = 0
    second_order: bool = False
    split_mode: Literal["random", "round_robin"] = "random"
    style_normalization: Literal["literal", "gatys"] = "literal"
    checkpoint_every: int = Field(0, ge=0)

    @property
    def weights(self) -> dict:
        return {"gen": self.alpha2, "grad": self.beta1, "cont": self.beta2, "style": self.beta3}


@dataclass
class MetaSplit:
    train_models: list
    test_model: object

    def __post_init__(self):
        if len(self.train_models) < 1:
            raise AttackError("meta split needs at least one meta-train model")
        if any(m is self.test_model for m in self.train_models):
            raise AttackError("meta-test model also listed as meta-train model")


def sample_split(victims: list, rng: np.random.Generator | None = None, iteration: int = 0,
                 mode: str = "random") -> MetaSplit:
    """Hold out one victim as meta-test, uniformly at random or round-robin."""
    if len(victims) < 2:
        raise AttackError(f"meta splitting needs >= 2 victims, got {len(victims)}")
    k = int(rng.integers(len(victims))) if mode == "random" else iteration % len(victims)
    return MetaSplit([v for i, v in enumerate(victims) if i != k], victims[k])


# ---------------------------------------------------------------------------
# losses


def attack_loss(model: VictimModel, target, adv, target_embedding=None, reduction="mean"):
    """Impersonation loss ``1 - cos(F(I_t), F(I_hat))`` in [0, 2]."""
    et = embed(target, model) if target_embedding is None else target_embedding
    loss = 1 - cosine(et, embed(adv, model))
    return loss.mean() if reduction == "mean" else loss


# ---------------------------------------------------------------------------
# meta steps


def _grad(loss, params: dict, create_graph=False, retain_graph=None) -> dict:
    names = list(params)
    grads = torch.autograd.grad(
        loss, [params[n] for n in names], create_graph=create_graph,
        retain_graph=retain_graph, allow_unused=True,
    )
    return {n: torch.zeros_like(params[n]) if g is None else g for n, g in zip(names, grads)}


def _leaf_params(params: dict) -> dict:
    return {k: v.detach().requires_grad_(True) for k, v in params.items()}


def meta_train_losses(params: dict, split: MetaSplit, objective, alpha1: float,
                      create_graph: bool = False, comp=None):
    """Per meta-train model: ``(T_tr_i, theta_i')`` with ``theta_i' = theta - alpha1 grad T_tr_i``.

    ``params`` must require grad. With ``create_graph`` the copies stay
    differentiable functions of ``params`` (second-order meta-gradients);
    otherwise they are detached leaves.
    """
    if comp is None:
        comp = objective.composite(params)
    out = []
    for model in split.train_models:
        loss = objective.model_loss(model, comp)
        g = _grad(loss, params, create_graph=create_graph, retain_graph=True)
        prime = {k: params[k] - alpha1 * g[k] for k in params}
        if not create_graph:
            prime = _leaf_params(prime)
        out.append((loss, prime, g))
    return out


def meta_test_losses(primes: list[dict], split: MetaSplit, objective) -> list:
    """Meta-test loss of the held-out model for each inner-updated copy."""
    if len(primes) != len(split.train_models):
        raise AttackError(f"{len(primes)} parameter copies for {len(split.train_models)} meta-train models")
    return [objective.model_loss(split.test_model, objective.composite(p)) for p in primes]


@dataclass
class MetaGradients:
    attack: dict                      # unweighted attack component
    aux: dict                         # term name -> gradient dict
    train_losses: list = field(default_factory=list)
    test_losses: list = field(default_factory=list)
    aux_values: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)   # aux term -> weight used by combined()

    def combined(self, alpha1: float) -> dict:
        total = {k: alpha1 * v for k, v in self.attack.items()}
        for term, g in self.aux.items():
            w = self.weights[term]
            if w:
                for k in total:
                    total[k] = total[k] + w * g[k]
        return total


def meta_gradients(params: dict, split: MetaSplit, objective, config: AttackConfig,
                   mode: str = "meta", aux_components: bool = False) -> MetaGradients:
    """Gradient pieces of one G update.

    ``mode="meta"``: attack component is ``sum_i grad(T_tr_i(theta) + T_te_i(theta_i'))``;
    first-order unless ``config.second_order``, in which case the meta-test
    term is differentiated through the inner step. ``mode="ensemble"``:
    ``sum_i grad T_tr_i(theta)`` over the meta-train models only.

    ``aux_components=False`` returns the weighted aux sum under the single key
    ``"weighted"`` (one backward pass instead of four).
    """
    params = _leaf_params(params)
    comp = objective.composite(params)
    second = bool(config.second_order) and mode == "meta"
    trains = meta_train_losses(params, split, objective, config.alpha1, create_graph=second, comp=comp)
    attack = {k: torch.zeros_like(v) for k, v in params.items()}
    test_values = []
    if mode == "meta":
        tests = meta_test_losses([p for _, p, _ in trains], split, objective)
        for (tr, prime, g_tr), te in zip(trains, tests):
            if second:
                g = _grad(tr + te, params, retain_graph=True)
            else:
                g_te = _grad(te, prime)
                g = {k: g_tr[k] + g_te[k] for k in params}
            for k in attack:
                attack[k] = attack[k] + g[k]
            test_values.append(float(te.detach()))
    elif mode == "ensemble":
        for _, _, g_tr in trains:
            for k in attack:
                attack[k] = attack[k] + g_tr[k].detach()
    else:
        raise AttackError(f"unknown mode {mode!r}")

    aux = objective.aux_losses(params, comp)
    weights = config.weights
    if aux_components:
        aux_grads = {t: _grad(aux[t], params, retain_graph=True) for t in AUX_TERMS}
    else:
        weighted = sum(weights[t] * aux[t] for t in AUX_TERMS if weights[t])
        if torch.is_tensor(weighted) and weighted.requires_grad:
            g = _grad(weighted, params)
        else:
            g = {k: torch.zeros_like(v) for k, v in params.items()}
        aux_grads = {"weighted": g}
        weights = dict(weights, weighted=1.0)
    mg = MetaGradients(
        attack={k: v.detach() for k, v in attack.items()},
        aux={t: {k: v.detach() for k, v in g.items()} for t, g in aux_grads.items()},
        train_losses=[float(tr.detach()) for tr, _, _ in trains],
        test_losses=test_values,
        aux_values={t: float(aux[t].detach()) for t in AUX_TERMS},
        weights=weights,
    )
    return mg


def meta_optimize_step(generator: torch.nn.Module, optimizer: torch.optim.Optimizer, split: MetaSplit,
                       objective, config: AttackConfig, mode: str = "meta") -> MetaGradients:
    """One outer update of the generator through ``optimizer`` (momentum SGD)."""
    params = dict(generator.named_parameters())
    mg = meta_gradients(params, split, objective, config, mode=mode)
    total = mg.combined(config.alpha1)
    for name, g in total.items():
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for generator parameter {name}")
    optimizer.zero_grad(set_to_none=True)
    for name, p in params.items():
        p.grad = total[name].clone()
    optimizer.step()
    return mg


# ---------------------------------------------------------------------------
# face objective


@dataclass
class AttackBatch:
    sources: torch.Tensor          # (B, 3, H, W)
    masks: OrbitalMask             # batched (B, h, w) masks sharing one bbox
    cond: torch.Tensor | None      # (B, 3, h, w) target orbital crops, or None
    target_ids: torch.Tensor       # (B,) row indices into the cached target embeddings
    makeup: torch.Tensor | None = None   # (B, 3, h, w) real makeup patches for D

    @property
    def bbox(self) -> BBox:
        return self.masks.bbox

    @property
    def source_patches(self):
        r, c = self.bbox.slices
        return self.sources[..., r, c]


class MakeupObjective:
    """Adversarial makeup objective over one batch.

    ``target_embeddings`` maps victim name to a ``(n_targets, d)`` tensor of
    target embeddings; ``batch.target_ids`` indexes its rows.
    """

    def __init__(self, generator: UNetGenerator, discriminator: PatchDiscriminator, extractor,
                 batch: AttackBatch, target_embeddings: dict, style_normalization="literal"):
        self.generator = generator
        self.discriminator = discriminator
        self.extractor = extractor
        self.batch = batch
        self.target_embeddings = target_embeddings
        self.style_normalization = style_normalization
        self._generated = []   # (params, patch) pairs of this batch, matched by identity
        with torch.no_grad():
            self.source_features = extractor(batch.sources)

    def generate(self, params):
        # finiteness is checked once per step on the gradients, not on every call
        return functional_call(self.generator, params, (self.batch.source_patches, self.batch.cond))

    def composite(self, params):
        patch = self.generate(params)
        self._generated.append((params, patch))
        return composite(self.batch.sources, OrbitalPatch(patch, self.batch.masks))

    def model_loss(self, model: VictimModel, comp):
        et = self.target_embeddings[model.name][self.batch.target_ids]
        return (1 - cosine(et, embed(comp, model))).mean()

    def aux_losses(self, params, comp):
        patch = next((pt for pr, pt in self._generated if pr is params), None)
        if patch is None:
            patch = self.generate(params)
        d_fake = discriminate(patch, self.discriminator)
        gp = OrbitalPatch(patch, self.batch.masks)
        bl = blending.blending_losses(self.batch.sources, gp, comp, self.extractor, self.style_normalization,
                                      source_features=self.source_features)
        return {"gen": gen_loss(d_fake), "grad": bl.grad, "cont": bl.content, "style": bl.style}


# ---------------------------------------------------------------------------
# training loop


@dataclass
class PatchData:
    """Aligned faces with their masks, cropped once for the training loop."""

    images: torch.Tensor
    masks: torch.Tensor            # (N, h, w) 0/1
    bbox: BBox
    labels: np.ndarray | None = None

    @property
    def patches(self):
        r, c = self.bbox.slices
        return self.images[..., r, c]

    def mask(self, idx) -> OrbitalMask:
        return OrbitalMask(self.masks[idx], self.bbox, tuple(self.images.shape[-2:]))


@dataclass
class TrainResult:
    generator: UNetGenerator
    discriminator: PatchDiscriminator
    history: list
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng_state: dict
    iteration: int


def target_embedding_table(victims, targets: torch.Tensor) -> dict:
    with torch.no_grad():
        return {v.name: embed(targets, v).detach() for v in victims}


def make_optimizers(generator, discriminator, config: AttackConfig):
    if config.optimizer == "adam":
        # momentum doubles as beta1
        return (torch.optim.Adam(generator.parameters(), lr=config.lr, betas=(config.momentum, 0.999)),
                torch.optim.Adam(discriminator.parameters(), lr=config.lr_d, betas=(config.momentum_d, 0.999)))
    return (torch.optim.SGD(generator.parameters(), lr=config.lr, momentum=config.momentum),
            torch.optim.SGD(discriminator.parameters(), lr=config.lr_d, momentum=config.momentum_d))


def _train_loop(sources: PatchData, makeup: PatchData, targets: PatchData, victims, config: AttackConfig,
                generator: UNetGenerator, discriminator: PatchDiscriminator, extractor, mode: str,
                checkpoint_fn=None, resume: dict | None = None) -> TrainResult:
    if len(victims) < 2:
        raise AttackError(f"training needs >= 2 victims for meta splitting, got {len(victims)}")
    for name, ds in (("source", sources), ("makeup", makeup), ("target", targets)):
        if len(ds.images) == 0:
            raise AttackError(f"empty {name} dataset")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt_g, opt_d = make_optimizers(generator, discriminator, config)
    start = 0
    history = []
    if resume is not None:
        opt_g.load_state_dict(resume["opt_g"])
        opt_d.load_state_dict(resume["opt_d"])
        rng.bit_generator.state = resume["rng_state"]
        start = resume["iteration"]
        history = list(resume.get("history", []))
    tgt_emb = target_embedding_table(victims, targets.images)
    cond_all = targets.patches if generator.arch.cond_channels else None
    b = config.batch_size

    def abort(done, message):
        # keep the last state for post-mortem, then stop
        if checkpoint_fn is not None:
            checkpoint_fn(TrainResult(generator, discriminator, history, opt_g, opt_d, rng.bit_generator.state, done))
        raise NonFiniteError(message)

    for it in range(start, config.iterations):
        si = rng.integers(len(sources.images), size=b)
        mi = rng.integers(len(makeup.images), size=b)
        ti = rng.integers(len(targets.images), size=b)
        batch = AttackBatch(
            sources=sources.images[si],
            masks=sources.mask(si),
            cond=None if cond_all is None else cond_all[ti],
            target_ids=torch.from_numpy(ti),
            makeup=makeup.patches[mi],
        )

        # discriminator step on real makeup vs current fakes
        with torch.no_grad():
            fake = generate(batch.source_patches, generator, None, batch.cond)
        l_dis = dis_loss(discriminator(batch.makeup), discriminator(fake))
        if not torch.isfinite(l_dis):
            abort(it, f"non-finite discriminator loss at iteration {it + 1}")
        opt_d.zero_grad(set_to_none=True)
        l_dis.backward()
        opt_d.step()

        split = sample_split(victims, rng, it, config.split_mode)
        for p in discriminator.parameters():
            p.requires_grad_(False)
        objective = MakeupObjective(generator, discriminator, extractor, batch, tgt_emb, config.style_normalization)
        try:
            mg = meta_optimize_step(generator, opt_g, split, objective, config, mode=mode)
        except NonFiniteError as e:
            abort(it, f"iteration {it + 1}: {e}")
        finally:
            for p in discriminator.parameters():
                p.requires_grad_(True)

        row = {
            "iteration": it + 1,
            "test_model": split.test_model.name,
            "dis": float(l_dis.detach()),
            **{t: mg.aux_values[t] for t in AUX_TERMS},
            "attack_train": float(np.mean(mg.train_losses)),
            "attack_test": float(np.mean(mg.test_losses)) if mg.test_losses else float("nan"),
        }
        history.append(row)
        losses = [row[t] for t in ("dis", *AUX_TERMS, "attack_train")]
        if mode == "meta":
            losses.append(row["attack_test"])
        if not all(math.isfinite(v) for v in losses):
            abort(it + 1, f"non-finite loss at iteration {it + 1}: {row}")
        if checkpoint_fn is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            checkpoint_fn(TrainResult(generator, discriminator, history, opt_g, opt_d,
                                      rng.bit_generator.state, it + 1))
        if (it + 1) % 200 == 0:
            log.info("%s it %d: train %.4f test %.4f dis %.3f", mode, it + 1, row["attack_train"],
                     row["attack_test"], row["dis"])
    return TrainResult(generator, discriminator, history, opt_g, opt_d, rng.bit_generator.state,
                       config.iterations)


def train(sources: PatchData, makeup: PatchData, targets: PatchData, victims, config: AttackConfig,
          generator: UNetGenerator, discriminator: PatchDiscriminator, extractor,
          checkpoint_fn=None, resume=None) -> TrainResult:
    """Meta-learned training: per iteration one D step, a random meta split, one meta G step."""
    return _train_loop(sources, makeup, targets, victims, config, generator, discriminator, extractor,
                       "meta", checkpoint_fn, resume)


def ensemble_train(sources: PatchData, makeup: PatchData, targets: PatchData, victims, config: AttackConfig,
                   generator: UNetGenerator, discriminator: PatchDiscriminator, extractor,
                   checkpoint_fn=None, resume=None) -> TrainResult:
    """Same loop with the plain summed attack loss over the sampled meta-train models."""
    return _train_loop(sources, makeup, targets, victims, config, generator, discriminator, extractor,
                       "ensemble", checkpoint_fn, resume)
