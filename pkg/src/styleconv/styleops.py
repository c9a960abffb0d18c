"""Continuous style interpolation and perturbation-sampling uncertainty maps."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .attack import AttackConfig, ConversionResult, pgd_attack
from .corpus import CLASS_NAMES, N_CLASSES
from .probe import Probe, probe_predict
from .segcore import SegModel, predict

MODES = ("input_space", "loss_space")
PALETTE = np.array([[0, 0, 0], [255, 255, 255], [255, 220, 0], [230, 30, 30], [40, 200, 60]], dtype=np.uint8)


@dataclass(frozen=True)
class InterpolationSpec:
    alpha: float
    mode: str = "input_space"
    origin: int | None = None  # loss_space only: the "from" origin i
    target: int | None = None

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class UncertaintyMap:
    sigma: np.ndarray  # H x W x K population std over samples
    mean: np.ndarray  # H x W x K
    n_samples: int
    target: int
    seed: int
    alphas: np.ndarray

    @property
    def summary(self) -> np.ndarray:
        """Max over classes."""
        return self.sigma.max(axis=-1)


def _check_alpha(alpha: float):
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")


def interpolate_input(x: np.ndarray, x_to_j: np.ndarray, alpha: float) -> np.ndarray:
    """Convex combination ``(1 - alpha) * x + alpha * x_to_j``, kept inside the endpoints' hull."""
    _check_alpha(alpha)
    x, y = np.asarray(x), np.asarray(x_to_j)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    dt = np.result_type(x, y)
    mix = dt.type(1 - alpha) * x + dt.type(alpha) * y
    # rounding can overshoot an endpoint by one ulp
    return np.clip(mix, np.minimum(x, y), np.maximum(x, y)).astype(dt, copy=False)


def interpolate_loss_attack(model: SegModel, probe: Probe, x: np.ndarray, i: int, j: int, alpha: float,
                            cfg: AttackConfig | None = None) -> ConversionResult:
    """Projected-gradient attack on ``(1 - alpha) * CE(., i) + alpha * CE(., j)``."""
    _check_alpha(alpha)
    if i == j:
        raise ValueError("loss-space interpolation needs two distinct origins")
    cfg = cfg or AttackConfig(target=j)
    w = np.zeros(probe.n_origins)
    w[probe.index_of(i)] += 1 - alpha
    w[probe.index_of(j)] += alpha
    return pgd_attack(model, probe, x, cfg, weights=w)


def lesion_areas(labels: np.ndarray) -> np.ndarray:
    return np.bincount(np.asarray(labels).ravel(), minlength=N_CLASSES)[:N_CLASSES]


def interpolation_sweep(model: SegModel, probe: Probe, x: np.ndarray, j: int, alphas: Sequence[float],
                        converted: np.ndarray | None = None, cfg: AttackConfig | None = None) -> list[dict]:
    """Segment ``x`` along the input-space path toward its conversion to ``j``."""
    alphas = [float(a) for a in alphas]
    if any(b < a for a, b in zip(alphas, alphas[1:])):
        raise ValueError("alphas must be sorted")
    for a in alphas:
        _check_alpha(a)
    if converted is None:
        cfg = cfg or AttackConfig(target=j)
        converted = pgd_attack(model, probe, x, cfg).converted
    rows = []
    for a in alphas:
        xi = interpolate_input(x, converted, a)
        probs = predict(model, xi)
        labels = probs.argmax(-1).astype(np.uint8)
        rows.append({"alpha": a, "image": xi, "probs": probs, "labels": labels,
                     "area": lesion_areas(labels), "probe": probe_predict(probe, model, xi)})
    return rows


def write_sweep_strip(rows: Sequence[dict], out_dir: str | Path, stem: str = "interpolation") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    strip = np.concatenate([PALETTE[r["labels"]] for r in rows], axis=1)
    png = out_dir / f"{stem}.png"
    Image.fromarray(strip).save(png)
    path = out_dir / f"{stem}.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        k = len(rows[0]["probe"]) if rows else 0
        w.writerow(["alpha"] + [f"area_{n}" for n in CLASS_NAMES] + [f"probe_{i}" for i in range(k)])
        for r in rows:
            w.writerow([f"{r['alpha']:.6g}"] + [int(a) for a in r["area"]] + [f"{p:.6f}" for p in r["probe"]])
    return [png, path]


def uncertainty_map(model: SegModel | Callable[[np.ndarray], np.ndarray], probe: Probe | None, x: np.ndarray,
                    j: int, n_samples: int = 20, seed: int = 0, converted: np.ndarray | None = None,
                    cfg: AttackConfig | None = None) -> UncertaintyMap:
    """Population std of probability maps over ``x_alpha`` with ``alpha ~ U(0, 1)``.

    ``model`` may be a plain callable mapping an image batch to probability
    maps. Samples are sorted per pixel before reduction so the result does not
    depend on draw order.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    alphas = np.random.default_rng(seed).uniform(0.0, 1.0, size=n_samples)
    if converted is None:
        if probe is None:
            raise ValueError("a probe is required to compute the conversion")
        converted = pgd_attack(model, probe, x, cfg or AttackConfig(target=j)).converted
    batch = np.stack([interpolate_input(x, converted, a) for a in alphas])
    segment = (lambda b: predict(model, b)) if isinstance(model, SegModel) else model
    probs = np.sort(np.asarray(segment(batch), dtype=np.float64), axis=0)
    # shift by the first sample so identical samples give exactly zero
    d = probs - probs[:1]
    dm = d.mean(axis=0)
    sigma = np.sqrt(((d - dm) ** 2).mean(axis=0))
    return UncertaintyMap(sigma=sigma, mean=probs[0] + dm, n_samples=n_samples, target=j, seed=seed, alphas=alphas)


def write_uncertainty(um: UncertaintyMap, out_dir: str | Path, stem: str = "uncertainty") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    top = max(float(um.sigma.max()), 1e-12)
    for c in range(um.sigma.shape[-1]):
        raw = out_dir / f"{stem}_{CLASS_NAMES[c]}.f32"
        um.sigma[..., c].astype("<f4").tofile(raw)
        png = out_dir / f"{stem}_{CLASS_NAMES[c]}.png"
        Image.fromarray(np.round(um.sigma[..., c] / top * 255).astype(np.uint8), "L").save(png)
        paths += [raw, png]
    png = out_dir / f"{stem}_max.png"
    Image.fromarray(np.round(um.summary / top * 255).astype(np.uint8), "L").save(png)
    meta = out_dir / f"{stem}.json"
    meta.write_text(json.dumps({"N_A": um.n_samples, "j": um.target, "seed": um.seed,
                                "shape": list(um.sigma.shape[:2]), "dtype": "float32-le",
                                "scale_max": top, "alphas": um.alphas.tolist()}, indent=2))
    return paths + [png, meta]


def band_contrast(sigma: np.ndarray, mask: np.ndarray, width: int = 3, region: np.ndarray | None = None
                  ) -> tuple[float, float]:
    """Mean uncertainty within ``width`` pixels of a lesion boundary vs. over the remaining background.

    ``sigma`` is a per-pixel map (H, W); ``region`` (e.g. the field of view) restricts both means.
    """
    from scipy.ndimage import distance_transform_edt

    lesion = np.asarray(mask) > 0
    region = np.ones_like(lesion) if region is None else np.asarray(region, bool)
    if not lesion.any():
        raise ValueError("mask has no lesion pixels")
    d_out = distance_transform_edt(~lesion)
    d_in = distance_transform_edt(lesion)
    band = ((lesion & (d_in <= width)) | (~lesion & (d_out <= width))) & region
    background = ~lesion & (d_out > width) & region
    return float(sigma[band].mean()), float(sigma[background].mean())
