"""Targeted FGSM / projected-gradient attacks on the probe-over-encoder composite."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .probe import Probe, pooled
from .segcore import SegModel, from_batch, predict, to_batch

DEFAULT_STEP = 5e-3
DEFAULT_STEPS = 5
DEFAULT_RADIUS = 5 / 255


class AttackError(RuntimeError):
    def __init__(self, step: int, message: str = "non-finite input gradient"):
        super().__init__(f"{message} at attack step {step}")
        self.step = step


@dataclass(frozen=True)
class AttackConfig:
    target: int
    step: float = DEFAULT_STEP
    steps: int = DEFAULT_STEPS
    radius: float = DEFAULT_RADIUS
    clamp: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be > 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0 < self.radius <= 1:
            raise ValueError("radius must be in (0, 1]")
        if self.clamp[0] >= self.clamp[1]:
            raise ValueError("clamp range must be increasing")


@dataclass
class ConversionResult:
    original: np.ndarray
    converted: np.ndarray
    delta: np.ndarray
    trace: np.ndarray  # (steps + 1, [batch,] K) probe distributions, initial state first
    success: np.ndarray | bool
    config: AttackConfig
    tap: str
    target_weights: np.ndarray

    def echo(self) -> dict:
        return {**asdict(self.config), "tap": self.tap, "target_weights": self.target_weights.tolist()}


def _dtype_for(model, images) -> torch.dtype:
    p = next(iter(model.parameters()), None) if hasattr(model, "parameters") else None
    if p is not None:
        return p.dtype
    return torch.float64 if np.asarray(images).dtype == np.float64 else torch.float32


def target_weights(probe: Probe, target) -> np.ndarray:
    """Origin id -> one-hot over probe outputs; a length-K vector passes through."""
    if np.ndim(target) == 0:
        w = np.zeros(probe.n_origins)
        w[probe.index_of(int(target))] = 1.0
        return w
    w = np.asarray(target, dtype=np.float64)
    if w.shape != (probe.n_origins,) or (w < 0).any() or abs(w.sum() - 1) > 1e-9:
        raise ValueError("target weights must be a probability vector over the probe's origins")
    return w


def _loss(model, probe: Probe, x: torch.Tensor, weights: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    logits = probe.torch_logits(pooled(model, x, probe.tap))
    logp = F.log_softmax(logits, dim=1)
    return -(logp * weights).sum(), logp.detach().exp()


def _grad(model, probe, x: torch.Tensor, weights: torch.Tensor):
    x = x.detach().requires_grad_(True)
    loss, dist = _loss(model, probe, x, weights)
    (g,) = torch.autograd.grad(loss, x)
    return g, dist


def input_gradient(model: SegModel, probe: Probe, images: np.ndarray, target) -> np.ndarray:
    """Gradient of cross-entropy(probe(pooled tap features), target) w.r.t. input pixels.

    Batched inputs give per-image gradients (the batch loss is a sum).
    """
    x, single = to_batch(images, _dtype_for(model, images))
    w = torch.as_tensor(target_weights(probe, target), dtype=x.dtype)
    if hasattr(model, "eval"):
        model.eval()
    g, _ = _grad(model, probe, x, w)
    return from_batch(g, single)


def fgsm_step(x, gradient, eps: float):
    """One signed step against the gradient; zero-gradient pixels stay put."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if isinstance(x, torch.Tensor):
        return x - eps * torch.sign(gradient)
    return np.asarray(x) - eps * np.sign(gradient)


def project_linf(x0, x, r: float, clamp_range=(0.0, 1.0)):
    """Clip into the L-inf ball of radius ``r`` around ``x0``, then into the pixel range."""
    if r <= 0:
        raise ValueError("radius must be > 0")
    lo, hi = clamp_range
    if isinstance(x, torch.Tensor):
        return torch.clamp(torch.clamp(x, x0 - r, x0 + r), lo, hi)
    return np.clip(np.clip(x, x0 - r, x0 + r), lo, hi)


def _pgd(model, probe: Probe, x0: torch.Tensor, weights: torch.Tensor, cfg: AttackConfig):
    x = x0.clone()
    trace = []
    for n in range(cfg.steps):
        g, dist = _grad(model, probe, x, weights)
        trace.append(dist)
        if not torch.isfinite(g).all():
            raise AttackError(n)
        x = project_linf(x0, fgsm_step(x, g, cfg.step), cfg.radius, cfg.clamp).detach()
    with torch.no_grad():
        trace.append(_loss(model, probe, x, weights)[1])
    return x, torch.stack(trace)


def pgd_attack(model: SegModel, probe: Probe, images: np.ndarray, cfg: AttackConfig,
               weights=None, batch_size: int = 16) -> ConversionResult:
    """Iterate FGSM + projection ``cfg.steps`` times starting from the clean image.

    ``weights`` optionally replaces the one-hot target with a distribution over
    the probe's origins (the cross-entropy is linear in it).
    """
    w_np = target_weights(probe, cfg.target if weights is None else weights)
    x0, single = to_batch(images, _dtype_for(model, images))
    w = torch.as_tensor(w_np, dtype=x0.dtype)
    if hasattr(model, "eval"):
        model.eval()
    outs, traces = [], []
    for i in range(0, len(x0), batch_size):
        try:
            xa, tr = _pgd(model, probe, x0[i:i + batch_size], w, cfg)
        except AttackError as exc:
            raise AttackError(exc.step, f"non-finite input gradient (batch offset {i})") from exc
        outs.append(xa)
        traces.append(tr)
    xa = torch.cat(outs)
    trace = torch.cat(traces, dim=1).cpu().numpy()
    success = trace[-1].argmax(-1) == probe.index_of(cfg.target) if weights is None else trace[-1].argmax(-1) == w_np.argmax()
    original = np.asarray(images)
    converted = from_batch(xa, single)
    delta = converted.astype(np.float64) - original.astype(np.float64)
    if single:
        trace, success = trace[:, 0], bool(success[0])
    return ConversionResult(original, converted, delta, trace, success, cfg, probe.tap, w_np)


def convert(model: SegModel, probe: Probe, images: np.ndarray, target: int,
            cfg: AttackConfig | None = None) -> tuple[np.ndarray, np.ndarray, ConversionResult]:
    """Attack toward ``target`` with default settings and segment the result."""
    cfg = replace(cfg, target=target) if cfg is not None else AttackConfig(target=target)
    result = pgd_attack(model, probe, images, cfg)
    return result.converted, predict(model, result.converted), result


def save_conversion(result: ConversionResult, out_dir: str | Path, stem: str) -> list[Path]:
    """Converted PNG (8-bit, lossy) plus exact float32 delta with a JSON sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    png, raw, meta = out_dir / f"{stem}.png", out_dir / f"{stem}_delta.f32", out_dir / f"{stem}.json"
    conv = np.asarray(result.converted)
    if conv.ndim == 3:
        Image.fromarray(np.round(conv * 255).astype(np.uint8), "RGB").save(png)
    else:
        Image.fromarray(np.round(np.concatenate(list(conv), axis=1) * 255).astype(np.uint8), "RGB").save(png)
    result.delta.astype("<f4").tofile(raw)
    meta.write_text(json.dumps({
        "shape": list(result.delta.shape), "dtype": "float32-le",
        "r": result.config.radius, "eps": result.config.step, "N": result.config.steps,
        "target": result.config.target, "tap": result.tap,
        "success": np.asarray(result.success).tolist(),
        "trace": np.round(result.trace, 8).tolist(),
    }, indent=2))
    return [png, raw, meta]


def load_delta(sidecar: str | Path) -> tuple[np.ndarray, dict]:
    sidecar = Path(sidecar)
    meta = json.loads(sidecar.read_text())
    raw = sidecar.with_name(sidecar.stem + "_delta.f32")
    return np.fromfile(raw, dtype="<f4").reshape(meta["shape"]), meta
