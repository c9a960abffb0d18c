"""Evaluation operations behind the experiment suite.

Everything here is a pure function of its inputs (plus explicit seeds), so
every reported number can be recomputed from the stored predictions.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .attack import AttackConfig, pgd_attack
from .corpus import CLASS_NAMES, LESION_CLASSES, Corpus, Sample
from .perturb import perturb
from .probe import Probe, probe_predict
from .segcore import SegModel, auc_pr, miou, predict, predict_labels, to_batch

NO_CONVERSION = "none"


def _images(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def _masks(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.mask for s in samples])


def per_image_miou(pred_labels: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return np.array([miou(p, g).value for p, g in zip(pred_labels, gt)])


# ---------------------------------------------------------------------------
# cross-dataset matrix


@dataclass
class EvalMatrix:
    rows: list[str]
    cols: list[str]
    cells: np.ndarray
    specialists: list[str]
    predictions: dict[tuple[str, str], np.ndarray] = field(repr=False, default_factory=dict)
    ground_truth: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def cell(self, row: str, col: str) -> float:
        return float(self.cells[self.rows.index(row), self.cols.index(col)])

    def recompute(self, row: str, col: str) -> float:
        return float(per_image_miou(self.predictions[row, col], self.ground_truth[col]).mean())

    def column_std(self) -> np.ndarray:
        """Population std of each column over the specialist rows."""
        idx = [self.rows.index(r) for r in self.specialists]
        return self.cells[idx].std(axis=0)

    def row_means(self) -> np.ndarray:
        return self.cells.mean(axis=1)

    def table(self) -> list[dict]:
        out = []
        for i, r in enumerate(self.rows):
            out.append({"model": r, **{c: float(self.cells[i, j]) for j, c in enumerate(self.cols)},
                        "mean": float(self.row_means()[i])})
        if self.specialists:
            out.append({"model": "std(specialists)",
                        **{c: float(v) for c, v in zip(self.cols, self.column_std())}, "mean": None})
        return out


def cross_matrix(models: Mapping[str, SegModel], test_corpora: Sequence[Corpus],
                 specialists: Sequence[str] | None = None, split: str = "test") -> EvalMatrix:
    """Per-image mIoU of every model on every corpus's ``split``."""
    rows, cols = list(models), [c.style.name for c in test_corpora]
    cells = np.zeros((len(rows), len(cols)))
    preds, gts = {}, {}
    for j, corpus in enumerate(test_corpora):
        samples = corpus.split(split)
        gts[cols[j]] = _masks(samples)
        images = _images(samples)
        for i, name in enumerate(rows):
            labels = predict_labels(models[name], images)
            preds[name, cols[j]] = labels
            cells[i, j] = per_image_miou(labels, gts[cols[j]]).mean()
    spec = list(specialists) if specialists is not None else [r for r in rows if r in cols]
    return EvalMatrix(rows, cols, cells, spec, preds, gts)


def style_adoption_check(generalist: SegModel, specialists: Mapping[str, SegModel],
                         test_corpora: Sequence[Corpus], tolerance: float = 0.03,
                         split: str = "test") -> list[dict]:
    """Generalist vs the matching specialist on each corpus (specialists keyed by style name)."""
    report = []
    for corpus in test_corpora:
        name = corpus.style.name
        samples = corpus.split(split)
        gt, images = _masks(samples), _images(samples)
        g = float(per_image_miou(predict_labels(generalist, images), gt).mean())
        s = float(per_image_miou(predict_labels(specialists[name], images), gt).mean())
        report.append({"corpus": name, "generalist": g, "specialist": s,
                       "holds": g >= s, "within_tolerance": g >= s - tolerance})
    return report


# ---------------------------------------------------------------------------
# robustness and attack success


def robustness_perturb(model: SegModel, probe: Probe, images: np.ndarray,
                       kinds: Sequence[str] = ("resample", "color_jitter", "jpeg"), seed: int = 0) -> list[dict]:
    """Probe-origin flip rate and segmentation argmax flip rate under benign perturbations."""
    base_origin = probe_predict(probe, model, images).argmax(-1)
    base_labels = predict_labels(model, images)
    rows = []
    for k, kind in enumerate(kinds):
        rng = np.random.default_rng([seed, k])
        pert = np.stack([perturb(x, kind, rng) for x in images])
        origin = probe_predict(probe, model, pert).argmax(-1)
        labels = predict_labels(model, pert)
        rows.append({"kind": kind, "probe_flip_rate": float((origin != base_origin).mean()),
                     "seg_flip_rate": float((labels != base_labels).mean())})
    return rows


def attack_success_table(model: SegModel, probe: Probe, images: np.ndarray,
                         settings: Sequence[tuple[float, int]], targets: Sequence[int],
                         radius: float = 5 / 255) -> tuple[list[dict], list[dict]]:
    """Success rate per (setting, target) plus a separate, non-reproducible timing table."""
    rows, timing = [], []
    for eps, n in settings:
        elapsed = 0.0
        for t in targets:
            start = time.perf_counter()
            res = pgd_attack(model, probe, images, AttackConfig(target=t, step=eps, steps=n, radius=radius))
            elapsed += time.perf_counter() - start
            rows.append({"eps": eps, "N": n, "target": t, "success_rate": float(np.mean(res.success)),
                         "n_images": len(images)})
        timing.append({"eps": eps, "N": n, "images_per_second": len(images) * len(targets) / max(elapsed, 1e-9)})
    return rows, timing


# ---------------------------------------------------------------------------
# conversion gain and per-lesion targets


def converted_images(model: SegModel, probe: Probe, images: np.ndarray, target: int,
                     cfg: AttackConfig | None = None) -> np.ndarray:
    cfg = AttackConfig(target=target) if cfg is None else AttackConfig(
        target=target, step=cfg.step, steps=cfg.steps, radius=cfg.radius, clamp=cfg.clamp)
    return pgd_attack(model, probe, images, cfg).converted


def conversion_gain(model: SegModel, probe: Probe, test_corpus: Corpus, target: int,
                    cfg: AttackConfig | None = None, split: str = "test") -> dict:
    """Mean per-image mIoU (and per-class IoU over the pooled set) before and after conversion."""
    samples = test_corpus.split(split)
    images, gt = _images(samples), _masks(samples)
    before = predict_labels(model, images)
    after = predict_labels(model, converted_images(model, probe, images, target, cfg))
    out = {"corpus": test_corpus.style.name, "target": target}
    for tag, labels in (("before", before), ("after", after)):
        out[tag] = float(per_image_miou(labels, gt).mean())
        pooled = miou(labels, gt)
        out[f"{tag}_per_class"] = {CLASS_NAMES[k]: v for k, v in pooled.per_class.items()}
    out["gain"] = out["after"] - out["before"]
    return out


def _class_auc(probs: np.ndarray, gt: np.ndarray, c: int) -> float:
    s = auc_pr(probs[..., c], gt, c)
    return s.value if s.defined else float("nan")


def lesion_auc_table(model: SegModel, probe: Probe, samples: Sequence[Sample], options: Sequence,
                     cfg: AttackConfig | None = None) -> dict:
    """AUC-PR per lesion class for each conversion option (``NO_CONVERSION`` or a target origin)."""
    images, gt = _images(samples), _masks(samples)
    table = {}
    for opt in options:
        conv = images if opt == NO_CONVERSION else converted_images(model, probe, images, opt, cfg)
        probs = predict(model, conv)
        table[opt] = {c: _class_auc(probs, gt, c) for c in LESION_CLASSES}
    return table


def select_lesion_targets(table: Mapping, classes: Sequence[int] = LESION_CLASSES) -> dict[int, object]:
    """Per class, the option with the highest AUC-PR; ties go to no conversion."""
    choice = {}
    for c in classes:
        best, best_v = NO_CONVERSION, table[NO_CONVERSION][c]
        for opt, row in table.items():
            v = row[c]
            if opt != NO_CONVERSION and np.isfinite(v) and (not np.isfinite(best_v) or v > best_v):
                best, best_v = opt, v
        choice[c] = best
    return choice


def mixed_lesion_eval(model: SegModel, probe: Probe, test_corpus: Corpus, per_class_targets: Mapping[int, object],
                      cfg: AttackConfig | None = None, split: str = "test") -> dict:
    """Evaluate each class channel from the prediction made under that class's assigned conversion."""
    for c, t in per_class_targets.items():
        if c not in LESION_CLASSES:
            raise ValueError(f"unknown lesion class {c}")
        if t != NO_CONVERSION and t not in probe.origins:
            raise ValueError(f"unknown style {t!r} for class {CLASS_NAMES[c]}")
    samples = test_corpus.split(split)
    options = sorted(set(per_class_targets.values()), key=str)
    table = lesion_auc_table(model, probe, samples, options, cfg)
    per_class = {CLASS_NAMES[c]: table[t][c] for c, t in per_class_targets.items()}
    vals = [v for v in per_class.values() if np.isfinite(v)]
    return {"corpus": test_corpus.style.name, "targets": {CLASS_NAMES[c]: t for c, t in per_class_targets.items()},
            "per_class": per_class, "mean": float(np.mean(vals)) if vals else float("nan")}


# ---------------------------------------------------------------------------
# semantic integrity


class Grader(nn.Module):
    """Small convolutional regressor for the synthetic severity score."""

    def __init__(self, width: int = 8):
        super().__init__()
        w = width
        self.body = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(4 * w, 4 * w, 3, stride=1, padding=1), nn.ReLU(),
        )
        self.head = nn.Linear(4 * w, 1)

    def forward(self, x):
        return self.head(self.body(x).mean(dim=(2, 3)))[:, 0]


def train_grader(corpora: Sequence[Corpus], steps: int = 600, batch_size: int = 16, lr: float = 3e-3,
                 seed: int = 0, width: int = 8) -> Grader:
    samples = [s for c in corpora for s in c.split("train") if s.severity is not None]
    if not samples:
        raise ValueError("no severity-labelled training samples")
    x_all, _ = to_batch(_images(samples))
    y_all = torch.tensor([s.severity for s in samples], dtype=torch.float32)
    rng = np.random.default_rng([seed, 5])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        grader = Grader(width)
        opt = torch.optim.AdamW(grader.parameters(), lr=lr, weight_decay=1e-4)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
        grader.train()
        for _ in range(steps):
            b = rng.integers(0, len(samples), size=batch_size)
            loss = ((grader(x_all[b]) - y_all[b]) ** 2).mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
    grader.eval()
    return grader


@torch.no_grad()
def grade(grader: Grader, images: np.ndarray) -> np.ndarray:
    x, single = to_batch(images)
    out = torch.cat([grader(x[i:i + 32]) for i in range(0, len(x), 32)]).numpy().astype(np.float64)
    return out[0] if single else out


def discrete_grade(score: np.ndarray, max_grade: int = 4) -> np.ndarray:
    return np.clip(np.floor(np.asarray(score) + 0.5), 0, max_grade).astype(int)


def log_residual(x: np.ndarray, converted: np.ndarray, floor: float = 1 / 255) -> np.ndarray:
    """``10 log10(converted^2 / x^2)``; NaN wherever either value is below ``floor``."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(converted, dtype=np.float64)
    ok = (x >= floor) & (c >= floor)
    out = np.full(x.shape, np.nan)
    out[ok] = 10 * np.log10(c[ok] ** 2 / x[ok] ** 2)
    return out


@dataclass
class IntegrityReport:
    before: np.ndarray
    after: np.ndarray
    mse: float
    flips: int
    flip_boundary_distance: list[float]
    log_residuals: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"mse": self.mse, "flips": self.flips, "n_images": int(len(self.before)),
                "flip_boundary_distance": self.flip_boundary_distance,
                "max_abs_change": float(np.abs(self.after - self.before).max()) if len(self.before) else 0.0,
                "before": self.before.tolist(), "after": self.after.tolist()}


def integrity_check(grader: Grader, images: np.ndarray, conversions: np.ndarray) -> IntegrityReport:
    """Grader scores before/after conversion, discrete flips and their distance to a grade boundary."""
    before, after = grade(grader, images), grade(grader, conversions)
    flipped = discrete_grade(before) != discrete_grade(after)
    dist = []
    for b, a in zip(before[flipped], after[flipped]):
        boundary = np.floor(min(a, b) + 0.5) + 0.5
        dist.append(float(abs(b - boundary)))
    return IntegrityReport(before=before, after=after, mse=float(np.mean((after - before) ** 2)),
                           flips=int(flipped.sum()), flip_boundary_distance=dist,
                           log_residuals=log_residual(images, conversions))
