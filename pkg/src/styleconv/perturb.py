"""Benign image perturbations used to test how robust the origin marker is."""
from __future__ import annotations

import io

import numpy as np
from PIL import Image

KINDS = ("identity", "resample", "color_jitter", "jpeg")


def _to_pil(image: np.ndarray) -> Image.Image:
    return Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), "RGB")


def _from_pil(img: Image.Image) -> np.ndarray:
    return np.asarray(img, dtype=np.float32) / 255.0


def resample(image: np.ndarray, factor: float) -> np.ndarray:
    """Rescale by ``factor`` and back to the original size (bilinear)."""
    h, w = image.shape[:2]
    small = _to_pil(image).resize((max(1, round(w * factor)), max(1, round(h * factor))), Image.BILINEAR)
    return _from_pil(small.resize((w, h), Image.BILINEAR))


def color_jitter(image: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    x = image.astype(np.float64) * brightness
    mean = x.mean()
    x = (x - mean) * contrast + mean
    grey = x.mean(axis=-1, keepdims=True)
    x = (x - grey) * saturation + grey
    return np.clip(x, 0, 1).astype(np.float32)


def jpeg(image: np.ndarray, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    _to_pil(image).save(buf, format="JPEG", quality=int(quality), subsampling=0)
    buf.seek(0)
    return _from_pil(Image.open(buf).convert("RGB"))


def perturb(image: np.ndarray, kind: str, rng: np.random.Generator) -> np.ndarray:
    """Apply one randomly parameterised benign perturbation.

    resample: factor in [0.5, 1.5]; color_jitter: brightness, contrast and
    saturation factors in [0.8, 1.2]; jpeg: quality in [50, 100].
    """
    if kind == "identity":
        return image
    if kind == "resample":
        return resample(image, rng.uniform(0.5, 1.5))
    if kind == "color_jitter":
        return color_jitter(image, *rng.uniform(0.8, 1.2, size=3))
    if kind == "jpeg":
        return jpeg(image, rng.integers(50, 101))
    raise ValueError(f"unknown perturbation {kind!r}; expected one of {KINDS}")
