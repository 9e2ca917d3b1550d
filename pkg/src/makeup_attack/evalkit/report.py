"""Comparison tables over methods and held-out victims, with sweep plots.

Files written by :func:`write_report`:

``pairs.csv``
    ``method, seed, model, source_id, target_id, cosine_before, cosine_after``;
    one row per evaluated pair, cosines printed with 17 significant digits so
    they reload bit-exactly.
``table.csv``
    ``method`` then one ASR column per held-out model and ``mean``; values
    are means over seeds, 4 decimals.
``report.json``
    taus, per-seed ASR, mean and std, config hash, seeds, and reference ASRs
    from the real-model benchmark (metadata only).
``sweep_<model>.png``
    ASR against tau for every method on that held-out model.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import asr_from_scores, sweep_from_scores

PAIR_COLUMNS = ("method", "seed", "model", "source_id", "target_id", "cosine_before", "cosine_after")
METHOD_ORDER = ("none", "fgsm", "pgd", "mifgsm", "ensemble", "meta")

# black-box impersonation ASR (%) of the real recognizers, LFW / makeup data
REFERENCE_ASR = {
    "models": ["IR152", "IRSE50", "FaceNet", "MobileFace"],
    "toy_counterparts": {"IR152": "ir-toy", "IRSE50": "irse-toy", "FaceNet": "facenet-toy",
                         "MobileFace": "mobile-toy"},
    "lfw": {
        "fgsm": [2.51, 5.54, 1.75, 5.27],
        "pgd": [4.73, 16.2, 2.25, 14.62],
        "mifgsm": [4.75, 16.21, 2.12, 14.30],
        "ensemble": [5.23, 15.91, 5.06, 19.55],
        "meta": [7.59, 17.16, 5.98, 22.03],
    },
    "makeup": {
        "fgsm": [7.32, 2.13, 9.44, 32.1],
        "pgd": [13.41, 40.50, 9.87, 51.68],
        "mifgsm": [13.43, 40.92, 9.73, 52.36],
        "ensemble": [21.43, 56.17, 32.61, 61.62],
        "meta": [23.25, 59.06, 33.17, 63.74],
    },
}


class ReportError(ValueError):
    pass


@dataclass
class MethodScores:
    """Pair similarities of one method against one held-out victim."""

    method: str
    model: str
    source_ids: list
    target_ids: list
    cosine_before: np.ndarray
    cosine_after: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.cosine_before = np.asarray(self.cosine_before, dtype=np.float64)
        self.cosine_after = np.asarray(self.cosine_after, dtype=np.float64)
        n = len(self.source_ids)
        if not (n == len(self.target_ids) == len(self.cosine_before) == len(self.cosine_after)):
            raise ReportError(f"{self.method}/{self.model}: ragged pair columns")
        if n == 0:
            raise ReportError(f"{self.method}/{self.model}: no pairs")

    @property
    def pair_key(self):
        return tuple(zip(self.source_ids, self.target_ids))


@dataclass
class EvalReport:
    scores: list                                   # MethodScores
    taus: dict                                     # model -> tau
    tau_grid: np.ndarray
    config_hash: str = ""
    seeds: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def methods(self):
        found = {s.method for s in self.scores}
        return [m for m in METHOD_ORDER if m in found] + sorted(found - set(METHOD_ORDER))

    @property
    def models(self):
        return sorted({s.model for s in self.scores})

    def asr(self, method, model, seed=None) -> list:
        vals = [asr_from_scores(s.cosine_after, self.taus[s.model]) for s in self.scores
                if s.method == method and s.model == model and (seed is None or s.seed == seed)]
        return vals

    def table(self) -> dict:
        """method -> {model: mean ASR over seeds, ..., "mean": mean over models}."""
        out = {}
        for m in self.methods:
            row = {}
            for v in self.models:
                vals = self.asr(m, v)
                if vals:
                    row[v] = float(np.mean(vals))
            if row:
                row["mean"] = float(np.mean(list(row.values())))
            out[m] = row
        return out


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def compare_report(scores: list[MethodScores], taus: dict, tau_grid=None, config: dict | None = None,
                   extra: dict | None = None) -> EvalReport:
    """Assemble a report after checking every method saw the same pairs per held-out model."""
    if not scores:
        raise ReportError("no method results")
    by_model = {}
    for s in scores:
        if s.model not in taus:
            raise ReportError(f"no tau for model {s.model!r}")
        ref = by_model.setdefault(s.model, s)
        if s.pair_key != ref.pair_key:
            raise ReportError(f"pair set of {s.method} on {s.model} differs from {ref.method}")
        if not np.array_equal(s.cosine_before, ref.cosine_before):
            raise ReportError(f"clean similarities of {s.method} on {s.model} differ from {ref.method}")
    grid = np.linspace(-1, 1, 201) if tau_grid is None else np.asarray(tau_grid, dtype=np.float64)
    return EvalReport(list(scores), dict(taus), grid, config_hash(config or {}),
                      sorted({s.seed for s in scores}), dict(extra or {}))


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_report(report: EvalReport, out_dir, plots: bool = True) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pairs.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PAIR_COLUMNS)
        for s in sorted(report.scores, key=lambda s: (s.model, s.method, s.seed)):
            for sid, tid, cb, ca in zip(s.source_ids, s.target_ids, s.cosine_before, s.cosine_after):
                w.writerow([s.method, s.seed, s.model, sid, tid, _fmt(cb), _fmt(ca)])
    table = report.table()
    models = report.models
    with open(out / "table.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", *models, "mean"])
        for m, row in table.items():
            w.writerow([m, *(f"{row[v]:.4f}" if v in row else "" for v in models), f"{row.get('mean', float('nan')):.4f}"])
    per_seed = {
        m: {v: {str(sd): report.asr(m, v, sd)[0] for sd in report.seeds if report.asr(m, v, sd)} for v in models}
        for m in report.methods
    }
    summary = {
        m: {v: {"mean": float(np.mean(list(d.values()))), "std": float(np.std(list(d.values())))}
            for v, d in per_model.items() if d}
        for m, per_model in per_seed.items()
    }
    meta = {
        "version": 1,
        "config_hash": report.config_hash,
        "seeds": report.seeds,
        "taus": report.taus,
        "tau_grid": [float(t) for t in report.tau_grid],
        "asr_per_seed": per_seed,
        "asr_summary": summary,
        "pair_columns": list(PAIR_COLUMNS),
        "reference_asr": REFERENCE_ASR,
        **report.extra,
    }
    (out / "report.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    files = {"pairs": out / "pairs.csv", "table": out / "table.csv", "json": out / "report.json"}
    if plots:
        files.update(plot_sweeps(report, out))
    return files


def plot_sweeps(report: EvalReport, out_dir) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = {}
    for model in report.models:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for m in report.methods:
            runs = [s for s in report.scores if s.method == m and s.model == model]
            if not runs:
                continue
            curve = np.mean([sweep_from_scores(s.cosine_after, report.tau_grid)[:, 1] for s in runs], axis=0)
            ax.plot(report.tau_grid, curve, label=m)
        ax.axvline(report.taus[model], color="k", ls=":", lw=1)
        ax.set_xlabel("tau")
        ax.set_ylabel("ASR (%)")
        ax.set_title(f"black-box: {model}")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = Path(out_dir) / f"sweep_{model}.png"
        fig.savefig(path, dpi=80, metadata={"Software": None})
        plt.close(fig)
        files[f"sweep_{model}"] = path
    return files


def load_report(out_dir) -> EvalReport:
    """Reload ``pairs.csv`` + ``report.json`` and verify the stored ASRs against the rows."""
    out = Path(out_dir)
    for name in ("pairs.csv", "report.json"):
        if not (out / name).exists():
            raise ReportError(f"missing report file {out / name}")
    meta = json.loads((out / "report.json").read_text())
    groups = {}
    with open(out / "pairs.csv", newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != PAIR_COLUMNS:
            raise ReportError(f"unexpected pair columns {reader.fieldnames}")
        for r in reader:
            key = (r["method"], int(r["seed"]), r["model"])
            g = groups.setdefault(key, ([], [], [], []))
            g[0].append(r["source_id"])
            g[1].append(r["target_id"])
            g[2].append(float(r["cosine_before"]))
            g[3].append(float(r["cosine_after"]))
    scores = [MethodScores(m, v, *cols, seed=sd) for (m, sd, v), cols in groups.items()]
    report = EvalReport(scores, meta["taus"], np.asarray(meta["tau_grid"]), meta["config_hash"], meta["seeds"])
    for m, per_model in meta["asr_per_seed"].items():
        for v, per in per_model.items():
            for sd, stored in per.items():
                got = report.asr(m, v, int(sd))
                if got != [stored]:
                    raise ReportError(f"ASR mismatch for {m}/{v}/seed {sd}: stored {stored}, recomputed {got}")
    return report
