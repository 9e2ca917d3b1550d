"""Stages of the toy benchmark, each reading and writing one output directory.

Layout under ``out``::

    resolved_config.json
    data/faces, data/makeup              synth
    victims/registry.json + *.pt         train-victims (tau unset)
    calibration/registry.json            calibrate (tau per victim) + calibration.json
    attack/<mode>/<holdout>/             train-attack: checkpoint.pt, history.csv
    adv/<method>/<holdout>.pt            attack: uint8 images in pair order, pairs.csv, png/
    eval/<method>/                       eval: pair scores and ASR for one method
    report/                              report: comparison table and sweep plots
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import io
from .baselines import masked_fgsm, masked_mifgsm, masked_pgd
from .blending import random_pyramid
from .config import ExperimentConfig
from .evalkit.metrics import pair_similarities
from .evalkit.report import MethodScores, compare_report, load_report, write_report
from .evalkit.synth import FaceDataset, SyntheticFaceSpec, canonical_landmarks, synth_dataset
from .gan import DiscriminatorArch, GeneratorArch, PatchDiscriminator, UNetGenerator
from .geometry import OrbitalPatch, align_face, build_orbital_mask, centered_bbox, composite
from .meta_attack import PatchData, ensemble_train, train
from .victims import REFERENCE_TAUS, VictimArch, calibrate_threshold, cosine, embed, train_toy_victims

log = logging.getLogger(__name__)

METHODS = ("advmakeup", "fgsm", "pgd", "mifgsm", "none")
MODES = ("meta", "ensemble")
# the toy victims stand in for these recognizers; their published taus ride along as metadata
TOY_COUNTERPARTS = {"ir-toy": "IR152", "irse-toy": "IRSE50", "mobile-toy": "MobileFace", "facenet-toy": "FaceNet"}


class PipelineError(RuntimeError):
    pass


def method_label(method: str, mode: str = "meta") -> str:
    if method not in METHODS:
        raise PipelineError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if method == "advmakeup":
        if mode not in MODES:
            raise PipelineError(f"unknown mode {mode!r}")
        return mode
    return method


def write_resolved_config(cfg: ExperimentConfig, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    path.write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")
    return path


def _write_json(path, doc):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synth


def cmd_synth(cfg: ExperimentConfig, out) -> dict:
    out = Path(out)
    write_resolved_config(cfg, out)
    d = cfg.data
    faces = synth_dataset(SyntheticFaceSpec(d.n_identities, d.images_per_identity), seed=cfg.data_seed)
    makeup = synth_dataset(SyntheticFaceSpec(d.makeup_identities, d.makeup_images_per_identity),
                           seed=cfg.data_seed + 7919, makeup=True, id_prefix="mk")
    io.save_dataset(faces, out / "data" / "faces", {"seed": cfg.data_seed})
    io.save_dataset(makeup, out / "data" / "makeup", {"seed": cfg.data_seed + 7919, "makeup": True})
    log.info("synth: %d faces, %d makeup references", len(faces), len(makeup))
    return {"faces": len(faces), "makeup": len(makeup)}


def align_dataset(ds: FaceDataset) -> tuple[torch.Tensor, list]:
    tmpl = canonical_landmarks(size=tuple(ds.images.shape[-2:]))
    imgs, lms = [], []
    for img, lm in zip(ds.images, ds.landmarks):
        a, l = align_face(img, lm, tmpl)
        imgs.append(a)
        lms.append(l)
    # re-quantize so aligned images are exactly representable as PNG
    return (torch.stack(imgs) * 255).round() / 255, lms


# ---------------------------------------------------------------------------
# victims


def cmd_train_victims(cfg: ExperimentConfig, out) -> dict:
    out = Path(out)
    write_resolved_config(cfg, out)
    faces = io.load_dataset(out / "data" / "faces")
    x, _ = align_dataset(faces)
    v = cfg.victims
    archs = [VictimArch(**a.model_dump()) for a in v.architectures]
    models = train_toy_victims(x, faces.labels, archs, seed=cfg.victim_seed, min_separation=v.min_separation,
                               min_epochs=v.min_epochs, max_epochs=v.max_epochs, batch_size=v.batch_size,
                               lr=v.lr)
    for m in models:
        ref = TOY_COUNTERPARTS.get(m.name)
        m.reference_tau = REFERENCE_TAUS.get(ref)
        m.meta["counterpart"] = ref
    io.save_registry(models, out / "victims")
    return {m.name: m.meta for m in models}


def impostor_pairs(labels) -> np.ndarray:
    labels = np.asarray(labels)
    i, j = np.triu_indices(len(labels), k=1)
    keep = labels[i] != labels[j]
    return np.stack([i[keep], j[keep]], axis=1)


def cmd_calibrate(cfg: ExperimentConfig, out) -> dict:
    out = Path(out)
    write_resolved_config(cfg, out)
    reg = io.load_registry(out / "victims" / "registry.json")
    faces = io.load_dataset(out / "data" / "faces")
    x, _ = align_dataset(faces)
    pairs = impostor_pairs(faces.labels)
    pair_hash = hashlib.sha256(pairs.astype(np.int64).tobytes()).hexdigest()[:16]
    taus = {}
    entries = []
    for m in reg:
        with torch.no_grad():
            e = embed(x, m)
        scores = cosine(e[pairs[:, 0]], e[pairs[:, 1]]).double().numpy()
        taus[m.name] = calibrate_threshold(scores, cfg.victims.far)
        entries.append({"name": m.name, "archive_path": f"../victims/{m.name}.pt", "tau": taus[m.name],
                        "reference_tau": m.reference_tau})
    _write_json(out / "calibration" / "calibration.json",
                {"far": cfg.victims.far, "taus": taus, "n_impostor_pairs": int(len(pairs)), "pair_hash": pair_hash})
    (out / "calibration" / "registry.json").write_text(json.dumps(entries, indent=1) + "\n")
    log.info("calibrate: %s", taus)
    return taus


def load_victims(out) -> list:
    reg = io.load_registry(Path(out) / "calibration" / "registry.json")
    missing = [m.name for m in reg if m.tau is None]
    if missing:
        raise PipelineError(f"victims without tau: {missing}; run calibrate")
    return list(reg)


# ---------------------------------------------------------------------------
# protocol


@dataclass
class Protocol:
    sources: PatchData
    targets: PatchData
    makeup: PatchData
    source_ids: list
    target_ids: list

    @property
    def n_pairs(self):
        return len(self.sources.images) * len(self.targets.images)

    def pair_index(self):
        """Target-major pair order: ``(target j, source i)`` for j, then i."""
        nt, ns = len(self.targets.images), len(self.sources.images)
        return np.repeat(np.arange(nt), ns), np.tile(np.arange(ns), nt)


def build_protocol(cfg: ExperimentConfig, out) -> Protocol:
    out = Path(out)
    faces = io.load_dataset(out / "data" / "faces")
    makeup = io.load_dataset(out / "data" / "makeup")
    x, lms = align_dataset(faces)
    xm, lmm = align_dataset(makeup)
    shape = tuple(x.shape[-2:])
    bbox = centered_bbox(cfg.model.patch_center, cfg.model.patch_shape, shape)

    def pdata(imgs, marks, labels=None):
        masks = torch.stack([build_orbital_mask(l, shape, bbox=bbox).mask for l in marks]).float()
        return PatchData(imgs, masks, bbox, labels)

    labels = faces.labels
    nt = cfg.eval.n_targets
    lo, hi = cfg.eval.source_identities or (nt, int(labels.max()) + 1)
    tgt = [int(np.flatnonzero(labels == k)[0]) for k in range(nt)]
    src = [int(i) for i in np.flatnonzero((labels >= lo) & (labels < hi))]
    if set(labels[src]) & set(labels[tgt]):
        raise PipelineError("source and target identities overlap")
    if not src:
        raise PipelineError("no source images")
    return Protocol(
        sources=pdata(x[src], [lms[i] for i in src], labels[src]),
        targets=pdata(x[tgt], [lms[i] for i in tgt], labels[tgt]),
        makeup=pdata(xm, lmm),
        source_ids=[faces.ids[i] for i in src],
        target_ids=[faces.ids[i] for i in tgt],
    )


def holdout_names(cfg: ExperimentConfig, victims) -> list:
    return list(cfg.eval.holdouts) if cfg.eval.holdouts else [v.name for v in victims]


def split_victims(victims, holdout):
    white = [v for v in victims if v.name != holdout]
    black = [v for v in victims if v.name == holdout]
    if not black:
        raise PipelineError(f"no victim named {holdout!r}")
    return white, black[0]


# ---------------------------------------------------------------------------
# attack training


def new_networks(cfg: ExperimentConfig):
    m = cfg.model
    torch.manual_seed(cfg.attack.seed)
    g = UNetGenerator(GeneratorArch(m.patch_shape, m.generator_width, m.generator_depth,
                                    3 if m.condition_on_target else 0))
    d = PatchDiscriminator(DiscriminatorArch(m.patch_shape, m.discriminator_width, m.discriminator_layers))
    return g, d


def extractor_for(cfg: ExperimentConfig):
    return random_pyramid(cfg.model.extractor_seed, cfg.model.extractor_widths)


def attack_dir(out, mode, holdout) -> Path:
    return Path(out) / "attack" / mode / holdout


def train_holdout(cfg: ExperimentConfig, protocol: Protocol, victims, holdout: str, mode: str = "meta",
                  out=None):
    """Train one generator with ``holdout`` kept black-box; writes checkpoint + history under ``out``."""
    white, _ = split_victims(victims, holdout)
    g, d = new_networks(cfg)
    fn = train if mode == "meta" else ensemble_train
    ckpt = None if out is None else attack_dir(out, mode, holdout) / "checkpoint.pt"
    ext_desc = {"kind": "random_pyramid", "seed": cfg.model.extractor_seed, "widths": list(cfg.model.extractor_widths)}

    def checkpoint(res):
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        io.save_checkpoint(ckpt, res, cfg.resolved(), ext_desc)

    res = fn(protocol.sources, protocol.makeup, protocol.targets, white, cfg.attack, g, d, extractor_for(cfg),
             checkpoint_fn=None if out is None else checkpoint)
    if out is not None:
        checkpoint(res)
        io.write_history(res.history, ckpt.parent / "history.csv")
    return res


def cmd_train_attack(cfg: ExperimentConfig, out, mode: str = "meta") -> dict:
    out = Path(out)
    if mode not in MODES:
        raise PipelineError(f"unknown mode {mode!r}")
    write_resolved_config(cfg, out)
    victims = load_victims(out)
    protocol = build_protocol(cfg, out)
    done = {}
    for h in holdout_names(cfg, victims):
        res = train_holdout(cfg, protocol, victims, h, mode, out)
        done[h] = res.history[-1]
        log.info("train-attack %s holdout %s: %s", mode, h, res.history[-1])
    return done


# ---------------------------------------------------------------------------
# adversarial images


def generate_adversarial(generator, protocol: Protocol) -> torch.Tensor:
    """``composite(source, G(source patch | target patch))`` for every pair, in pair order."""
    s = protocol.sources
    mask = s.mask(slice(None))
    out = []
    with torch.no_grad():
        for j in range(len(protocol.targets.images)):
            cond = protocol.targets.patches[j:j + 1].expand(len(s.images), -1, -1, -1)
            patch = generator(s.patches, cond if generator.arch.cond_channels else None)
            out.append(composite(s.images, OrbitalPatch(patch, mask)))
    return torch.cat(out)


def gradient_adversarial(method: str, protocol: Protocol, white, cfg: ExperimentConfig,
                         chunk: int = 100) -> torch.Tensor:
    fn = {"fgsm": masked_fgsm, "pgd": masked_pgd, "mifgsm": masked_mifgsm}[method]
    ti, si = protocol.pair_index()
    out = []
    for start in range(0, len(ti), chunk):
        t = protocol.targets.images[ti[start:start + chunk]]
        s = protocol.sources.images[si[start:start + chunk]]
        mask = protocol.sources.mask(torch.from_numpy(si[start:start + chunk]))
        out.append(fn(s, t, white, mask, cfg.baseline))
    return torch.cat(out)


def cmd_attack(cfg: ExperimentConfig, out, method: str = "advmakeup", mode: str = "meta", checkpoint=None) -> dict:
    out = Path(out)
    label = method_label(method, mode)
    write_resolved_config(cfg, out)
    victims = load_victims(out)
    protocol = build_protocol(cfg, out)
    ti, si = protocol.pair_index()
    dest = out / "adv" / label
    (dest / "png").mkdir(parents=True, exist_ok=True)
    written = {}
    for h in holdout_names(cfg, victims):
        white, _ = split_victims(victims, h)
        if method == "advmakeup":
            path = Path(checkpoint) if checkpoint else attack_dir(out, mode, h) / "checkpoint.pt"
            g = io.load_checkpoint(io.require(path, f"{mode} checkpoint for holdout {h}"))["generator_module"]
            g.eval()
            adv = generate_adversarial(g, protocol)
        elif method == "none":
            adv = protocol.sources.images[si]
        else:
            adv = gradient_adversarial(method, protocol, white, cfg)
        q = (adv.clamp(0, 1) * 255).round().to(torch.uint8)
        torch.save({"images": q, "source_index": torch.from_numpy(si), "target_index": torch.from_numpy(ti)},
                   dest / f"{h}.pt")
        for k in range(min(cfg.eval.save_png_limit, len(q))):
            io.save_png(q[k].float() / 255, dest / "png" / f"{h}_{protocol.source_ids[si[k]]}_{protocol.target_ids[ti[k]]}.png")
        written[h] = len(q)
    with open(dest / "pairs.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["pair", "source_id", "target_id"])
        for k, (t, s) in enumerate(zip(ti, si)):
            w.writerow([k, protocol.source_ids[s], protocol.target_ids[t]])
    _write_json(dest / "attack.json", {"method": method, "label": label, "seed": cfg.attack.seed,
                                       "baseline": cfg.baseline.model_dump() if method in ("fgsm", "pgd", "mifgsm") else None,
                                       "holdouts": written})
    return written


# ---------------------------------------------------------------------------
# evaluation


def evaluate_method(label: str, adv_by_holdout: dict, protocol: Protocol, victims, seed: int) -> list:
    ti, si = protocol.pair_index()
    scores = []
    for h, adv in adv_by_holdout.items():
        _, black = split_victims(victims, h)
        before = pair_similarities((protocol.sources.images[si], protocol.targets.images[ti]), black)
        after = pair_similarities((adv, protocol.targets.images[ti]), black)
        scores.append(MethodScores(label, h, [protocol.source_ids[i] for i in si],
                                   [protocol.target_ids[i] for i in ti], before, after, seed))
    return scores


def cmd_eval(cfg: ExperimentConfig, out, labels=None) -> dict:
    out = Path(out)
    write_resolved_config(cfg, out)
    adv_root = out / "adv"
    if labels is None:
        labels = sorted(p.name for p in adv_root.iterdir() if p.is_dir()) if adv_root.exists() else []
    if not labels:
        raise io.ArtifactError(f"missing adversarial images under {adv_root}; run attack first")
    victims = load_victims(out)
    protocol = build_protocol(cfg, out)
    taus = {v.name: v.tau for v in victims}
    result = {}
    for label in labels:
        meta = json.loads(io.require(adv_root / label / "attack.json", f"attack output for {label}").read_text())
        adv = {}
        for h in holdout_names(cfg, victims):
            doc = torch.load(io.require(adv_root / label / f"{h}.pt", f"{label} images for holdout {h}"),
                             weights_only=True)
            adv[h] = doc["images"].float() / 255
        scores = evaluate_method(label, adv, protocol, victims, meta["seed"])
        report = compare_report(scores, taus, np.linspace(*cfg.eval.tau_grid[:2], int(cfg.eval.tau_grid[2])),
                                cfg.resolved())
        write_report(report, out / "eval" / label, plots=False)
        result[label] = report.table()[label]
    return result


def cmd_report(cfg: ExperimentConfig, out) -> dict:
    out = Path(out)
    write_resolved_config(cfg, out)
    eval_root = io.require(out / "eval", "evaluation results (run eval first)")
    scores, taus, seeds = [], {}, set()
    for d in sorted(p for p in eval_root.iterdir() if p.is_dir()):
        r = load_report(d)
        scores.extend(r.scores)
        taus.update(r.taus)
    if not scores:
        raise io.ArtifactError(f"no evaluation results under {eval_root}")
    calib = json.loads(io.require(out / "calibration" / "calibration.json", "calibration record").read_text())
    report = compare_report(scores, taus, np.linspace(*cfg.eval.tau_grid[:2], int(cfg.eval.tau_grid[2])),
                            cfg.resolved(), extra={"calibration": calib, "baseline": cfg.baseline.model_dump()})
    write_report(report, out / "report")
    return report.table()


STAGES = ("synth", "train-victims", "calibrate", "train-attack", "attack", "eval", "report")


def run_all(cfg: ExperimentConfig, out, mode="meta", methods=("advmakeup", "none")) -> dict:
    cmd_synth(cfg, out)
    cmd_train_victims(cfg, out)
    cmd_calibrate(cfg, out)
    cmd_train_attack(cfg, out, mode)
    for m in methods:
        cmd_attack(cfg, out, m, mode)
    cmd_eval(cfg, out)
    return cmd_report(cfg, out)
