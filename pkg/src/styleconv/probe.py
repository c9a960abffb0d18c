"""Linear dataset-origin probes on spatially pooled tap features."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax

from .corpus import Corpus
from .segcore import SegModel, load_tensors, model_dtype, save_tensors, to_batch, weights_checksum


@dataclass(frozen=True)
class ProbeTap:
    name: str
    depth: int
    width: int

    @classmethod
    def of(cls, model: SegModel, name: str) -> "ProbeTap":
        return cls(name, model.tap_depth(name), model.tap_width(name))


@dataclass
class ProbeConfig:
    l2: float = 1e-3
    tol: float = 1e-6
    max_iter: int = 5000


@dataclass
class Probe:
    """Affine map from pooled features to origin logits: ``f @ weights + bias``."""

    tap: str
    weights: np.ndarray  # f x K
    bias: np.ndarray  # K
    origins: list[int]
    provenance: dict = field(default_factory=dict)

    @property
    def n_origins(self) -> int:
        return len(self.origins)

    def logits(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights + self.bias

    def torch_logits(self, features: torch.Tensor) -> torch.Tensor:
        w = torch.as_tensor(self.weights, dtype=features.dtype)
        b = torch.as_tensor(self.bias, dtype=features.dtype)
        return features @ w + b

    def index_of(self, origin: int) -> int:
        try:
            return self.origins.index(origin)
        except ValueError:
            raise ValueError(f"origin {origin} not among probe origins {self.origins}") from None


def pooled(model: SegModel, x: torch.Tensor, tap: str) -> torch.Tensor:
    """Channelwise spatial mean of the tap's feature map (differentiable)."""
    return model.features(x, [tap])[tap].mean(dim=(2, 3))


@torch.no_grad()
def extract_features(model: SegModel, images: np.ndarray, tap: str, batch_size: int = 16) -> np.ndarray:
    if tap not in model.taps:
        raise KeyError(f"unknown tap {tap!r}; available: {model.taps}")
    x, single = to_batch(images, model_dtype(model))
    model.eval()
    feats = torch.cat([pooled(model, x[i:i + batch_size], tap) for i in range(0, len(x), batch_size)])
    out = feats.cpu().numpy()
    return out[0] if single else out


def fit_logistic(features: np.ndarray, labels: np.ndarray, n_classes: int,
                 cfg: ProbeConfig | None = None) -> tuple[np.ndarray, np.ndarray, dict]:
    """L2-regularised multinomial logistic regression, full batch, L-BFGS.

    Features are standardised for conditioning and the scaling is folded back,
    so the returned (weights, bias) act on raw features.
    """
    cfg = cfg or ProbeConfig()
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, f = X.shape
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd < 1e-12] = 1.0
    Z = (X - mu) / sd
    Y = np.eye(n_classes)[y]

    def objective(theta):
        W = theta[: f * n_classes].reshape(f, n_classes)
        b = theta[f * n_classes:]
        logits = Z @ W + b
        lp = log_softmax(logits, axis=1)
        loss = -(Y * lp).sum() / n + 0.5 * cfg.l2 * (W * W).sum()
        R = (np.exp(lp) - Y) / n
        gW = Z.T @ R + cfg.l2 * W
        gb = R.sum(axis=0)
        return loss, np.r_[gW.ravel(), gb]

    res = minimize(objective, np.zeros(f * n_classes + n_classes), jac=True, method="L-BFGS-B",
                   options={"gtol": cfg.tol, "maxiter": cfg.max_iter, "maxcor": 20, "ftol": 0})
    W = res.x[: f * n_classes].reshape(f, n_classes)
    b = res.x[f * n_classes:]
    weights = W / sd[:, None]
    bias = b - mu @ weights
    info = {"iterations": int(res.nit), "grad_norm": float(np.abs(res.jac).max()),
            "loss": float(res.fun), "converged": bool(res.success)}
    return weights, bias, info


def _origin_set(corpora: Sequence[Corpus], split: str, model: SegModel, tap: str):
    feats, labels = [], []
    for k, c in enumerate(corpora):
        samples = c.split(split)
        if not samples:
            continue
        feats.append(extract_features(model, np.stack([s.image for s in samples]), tap))
        labels.extend([k] * len(samples))
    return np.concatenate(feats), np.array(labels)


def train_probe(model: SegModel, corpora: Sequence[Corpus], tap: str,
                cfg: ProbeConfig | None = None, split: str = "train") -> Probe:
    """Fit an origin probe on frozen-model features; the backbone is checked unchanged."""
    if len(corpora) < 2:
        raise ValueError("a probe needs at least two corpora (origins)")
    if tap not in model.taps:
        raise KeyError(f"unknown tap {tap!r}; available: {model.taps}")
    cfg = cfg or ProbeConfig()
    before = weights_checksum(model)
    X, y = _origin_set(corpora, split, model, tap)
    weights, bias, info = fit_logistic(X, y, len(corpora), cfg)
    after = weights_checksum(model)
    if before != after:
        raise RuntimeError("backbone weights changed during probe training")
    acc = float((np.argmax(X @ weights + bias, axis=1) == y).mean())
    provenance = {"config": asdict(cfg), "train_accuracy": acc, "n_train": int(len(y)),
                  "backbone_sha256": before, "origin_names": [c.style.name for c in corpora], **info}
    return Probe(tap, weights, bias, [c.style_id for c in corpora], provenance)


def probe_predict(probe: Probe, model: SegModel, images: np.ndarray) -> np.ndarray:
    """Origin distribution(s) over ``probe.origins``."""
    return softmax(probe.logits(extract_features(model, images, probe.tap)), axis=-1)


def _val_set(probe: Probe, model: SegModel, corpora: Sequence[Corpus], split: str):
    feats, labels = [], []
    for c in corpora:
        samples = c.split(split)
        if samples:
            feats.append(extract_features(model, np.stack([s.image for s in samples]), probe.tap))
            labels += [probe.index_of(c.style_id)] * len(samples)
    if not feats:
        return np.zeros((0, probe.weights.shape[0])), np.zeros(0, dtype=int)
    return np.concatenate(feats), np.array(labels)


def probe_accuracy(probe: Probe, model: SegModel, corpora: Sequence[Corpus], split: str = "val") -> tuple[int, int]:
    X, y = _val_set(probe, model, corpora, split)
    return int((probe.logits(X).argmax(-1) == y).sum()), len(y)


def probe_log_loss(probe: Probe, model: SegModel, corpora: Sequence[Corpus], split: str = "val") -> float:
    X, y = _val_set(probe, model, corpora, split)
    return float(-log_softmax(probe.logits(X), axis=-1)[np.arange(len(y)), y].mean()) if len(y) else float("nan")


def placement_sweep(model: SegModel, corpora: Sequence[Corpus], taps: Sequence[str],
                    cfg: ProbeConfig | None = None) -> tuple[list[dict], dict[str, Probe]]:
    """One probe per tap, trained on train splits and scored on val splits."""
    if len(taps) < 2:
        raise ValueError("a placement sweep needs at least two taps")
    rows, probes = [], {}
    for tap in taps:
        probe = train_probe(model, corpora, tap, cfg)
        X, y = _val_set(probe, model, corpora, "val")
        logits = probe.logits(X)
        t = ProbeTap.of(model, tap)
        rows.append({"tap": tap, "depth": t.depth, "f": t.width,
                     "accuracy": float((logits.argmax(-1) == y).mean()),
                     "correct": int((logits.argmax(-1) == y).sum()), "total": len(y),
                     "val_log_loss": float(-log_softmax(logits, axis=-1)[np.arange(len(y)), y].mean())})
        probes[tap] = probe
    return rows, probes


def best_tap(rows: Sequence[dict]) -> str:
    """Highest validation accuracy; ties go to the lower validation log-loss, then the earlier row."""
    best = rows[0]
    for r in rows[1:]:
        if (r["accuracy"], -r.get("val_log_loss", 0.0)) > (best["accuracy"], -best.get("val_log_loss", 0.0)):
            best = r
    return best["tap"]


def write_sweep(rows: Sequence[dict], out_dir: str | Path, name: str = "probe_sweep") -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{name}.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["tap", "depth", "f", "accuracy", "val_log_loss"], extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "accuracy": f"{r['accuracy']:.6f}", "val_log_loss": f"{r['val_log_loss']:.6g}"})
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot([r["tap"] for r in rows], [r["accuracy"] for r in rows], marker="o")
    ax.set_ylim(0, 1.02)
    ax.set_ylabel("probe val accuracy")
    ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    png = out_dir / f"{name}.png"
    fig.savefig(png, dpi=80, metadata={"Software": None})
    plt.close(fig)
    return [csv_path, png]


def save_probe(probe: Probe, path: str | Path) -> Path:
    return save_tensors(path, {"weights": torch.from_numpy(probe.weights), "bias": torch.from_numpy(probe.bias)},
                        {"kind": "probe", "tap": probe.tap, "origins": probe.origins, "provenance": probe.provenance})


def load_probe(path: str | Path) -> Probe:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "probe":
        raise ValueError(f"{path}: not a probe checkpoint")
    return Probe(meta["tap"], tensors["weights"].double().numpy(), tensors["bias"].double().numpy(),
                 list(meta["origins"]), meta.get("provenance", {}))
