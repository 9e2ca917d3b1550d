"""On-disk formats: PNG images, landmark JSON, datasets, victim archives, checkpoints."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .evalkit.synth import FaceDataset
from .gan import DiscriminatorArch, GeneratorArch, PatchDiscriminator, UNetGenerator
from .geometry import LandmarkSet
from .victims import Registry, ToyEmbedder, VictimArch, VictimModel

CHECKPOINT_FORMAT = "makeup-attack/checkpoint"
VICTIM_FORMAT = "makeup-attack/victim"
FORMAT_VERSION = 1


class ArtifactError(RuntimeError):
    """A required file is missing or not in the expected format."""


def require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ArtifactError(f"missing {what}: {p}")
    return p


# ---------------------------------------------------------------------------
# images and landmarks


def save_png(img: torch.Tensor, path) -> None:
    arr = (img.detach().clamp(0, 1).cpu().double().numpy() * 255).round().astype(np.uint8)
    Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0)), "RGB").save(path)


def load_png(path) -> torch.Tensor:
    with Image.open(require(path, "image")) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def save_landmarks(landmarks: dict, path) -> None:
    doc = {k: lm.to_json() for k, lm in landmarks.items()}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_landmarks(path) -> dict:
    doc = json.loads(require(path, "landmark file").read_text())
    return {k: LandmarkSet.from_json(v) for k, v in doc.items()}


def save_dataset(ds: FaceDataset, out_dir, extra: dict | None = None) -> Path:
    """``images/<id>.png``, ``landmarks.json`` and ``dataset.json`` (ids, labels)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for img, i in zip(ds.images, ds.ids):
        save_png(img, out / "images" / f"{i}.png")
    save_landmarks(dict(zip(ds.ids, ds.landmarks)), out / "landmarks.json")
    meta = {"ids": ds.ids, "labels": [int(v) for v in ds.labels], **(extra or {})}
    (out / "dataset.json").write_text(json.dumps(meta, indent=1) + "\n")
    return out


def load_dataset(path) -> FaceDataset:
    root = require(path, "dataset directory")
    meta = json.loads(require(root / "dataset.json", "dataset index").read_text())
    lms = load_landmarks(root / "landmarks.json")
    ids = meta["ids"]
    missing = [i for i in ids if i not in lms]
    if missing:
        raise ArtifactError(f"no landmarks for {len(missing)} images, e.g. {missing[0]}")
    images = torch.stack([load_png(root / "images" / f"{i}.png") for i in ids])
    return FaceDataset(images, [lms[i] for i in ids], np.asarray(meta["labels"]), list(ids))


# ---------------------------------------------------------------------------
# victims


def save_victim(model: VictimModel, path) -> None:
    if model.arch is None:
        raise ArtifactError(f"victim {model.name} has no architecture descriptor")
    torch.save({
        "format": VICTIM_FORMAT,
        "version": FORMAT_VERSION,
        "name": model.name,
        "arch": model.arch.to_dict(),
        "state": model.net.state_dict(),
        "mean": list(model.mean),
        "std": list(model.std),
        "tau": model.tau,
        "reference_tau": model.reference_tau,
        "meta": model.meta,
    }, path)


def _load_archive(path, fmt):
    doc = torch.load(require(path, "archive"), map_location="cpu", weights_only=True)
    if not isinstance(doc, dict) or doc.get("format") != fmt:
        raise ArtifactError(f"{path} is not a {fmt} archive")
    if doc.get("version") != FORMAT_VERSION:
        raise ArtifactError(f"{path}: unsupported version {doc.get('version')}")
    return doc


def load_victim(path) -> VictimModel:
    doc = _load_archive(path, VICTIM_FORMAT)
    arch = VictimArch.from_dict(doc["arch"])
    net = ToyEmbedder(arch)
    net.load_state_dict(doc["state"])
    return VictimModel(doc["name"], net, arch.input_size, tuple(doc["mean"]), tuple(doc["std"]),
                       tau=doc["tau"], reference_tau=doc["reference_tau"], arch=arch, meta=doc["meta"])


def save_registry(models, out_dir, manifest_name="registry.json") -> Path:
    """One archive per victim plus a JSON manifest of ``{name, archive_path, tau, reference_tau}``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for m in models:
        archive = f"{m.name}.pt"
        save_victim(m, out / archive)
        entries.append({"name": m.name, "archive_path": archive, "tau": m.tau, "reference_tau": m.reference_tau})
    path = out / manifest_name
    path.write_text(json.dumps(entries, indent=1) + "\n")
    return path


def load_registry(manifest) -> Registry:
    path = require(manifest, "victim manifest")
    entries = json.loads(path.read_text())
    reg = Registry()
    for e in entries:
        m = load_victim(path.parent / e["archive_path"])
        m.tau = e.get("tau")
        if e.get("reference_tau") is not None:
            m.reference_tau = e["reference_tau"]
        reg.register(m)
    return reg


# ---------------------------------------------------------------------------
# attack checkpoints


def save_checkpoint(path, result, config: dict | None = None, extractor: dict | None = None) -> None:
    """Everything needed to resume or reuse a generator: ``result`` is a TrainResult."""
    g, d = result.generator, result.discriminator
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": FORMAT_VERSION,
        "generator_arch": g.arch.to_dict(),
        "generator": g.state_dict(),
        "discriminator_arch": d.arch.to_dict(),
        "discriminator": d.state_dict(),
        "opt_g": result.opt_g.state_dict(),
        "opt_d": result.opt_d.state_dict(),
        "rng_state": result.rng_state,
        "iteration": result.iteration,
        "history": result.history,
        "extractor": extractor or {},
        "config": config or {},
    }, path)


def load_checkpoint(path) -> dict:
    """Checkpoint dict with rebuilt ``generator_module`` / ``discriminator_module``."""
    doc = _load_archive(path, CHECKPOINT_FORMAT)
    g = UNetGenerator(GeneratorArch.from_dict(doc["generator_arch"]))
    g.load_state_dict(doc["generator"])
    d = PatchDiscriminator(DiscriminatorArch.from_dict(doc["discriminator_arch"]))
    d.load_state_dict(doc["discriminator"])
    doc["generator_module"] = g
    doc["discriminator_module"] = d
    return doc


def write_history(history: list[dict], path) -> None:
    if not history:
        Path(path).write_text("")
        return
    cols = list(history[0])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (format(v, ".9g") if isinstance(v, float) else v) for k, v in row.items()})
