"""Synthetic multi-style fundus corpora, style rendering, structure statistics
and manifest-based ingestion.

A *scene* is one procedurally drawn fundus image together with its exact lesion
geometry. Every style renders the same scenes; styles differ in how the
geometry is turned into an annotation mask and, optionally, in a faint
acquisition marker added to the image.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage as ndi
from skimage import draw
from skimage.morphology import disk

CLASS_NAMES = ("BG", "CWS", "EX", "HEM", "MA")
N_CLASSES = len(CLASS_NAMES)
LESION_CLASSES = (1, 2, 3, 4)
SPLITS = ("train", "val", "test")
RENDERINGS = ("fine", "coarse", "dilated-merge")

# 8-connectivity for every component computation
EIGHT = np.ones((3, 3), dtype=bool)


class ManifestError(ValueError):
    """Raised when a manifest or the files it references cannot be ingested."""


@dataclass(frozen=True)
class Marker:
    """Faint oriented sinusoidal grating added inside the field of view.

    Stands in for the acquisition signature that betrays an image's origin.
    """

    amplitude: float = 0.02
    period: float = 6.0
    angle: float = 0.0  # degrees
    jitter: float = 0.0  # per-scene amplitude factor drawn from U(1 - jitter, 1 + jitter)

    def __post_init__(self):
        if self.amplitude < 0 or self.period <= 0:
            raise ValueError("marker amplitude must be >= 0 and period > 0")
        if not 0 <= self.jitter < 1:
            raise ValueError("marker jitter must be in [0, 1)")


@dataclass(frozen=True)
class StyleSpec:
    name: str
    rendering: str = "fine"
    dilation_radius: int = 0
    merge_distance: float = 0.0
    classes: tuple[bool, bool, bool, bool] = (True, True, True, True)
    marker: Marker | None = None

    def __post_init__(self):
        if self.rendering not in RENDERINGS:
            raise ValueError(f"unknown rendering {self.rendering!r}; expected one of {RENDERINGS}")
        if self.dilation_radius < 0 or self.merge_distance < 0:
            raise ValueError("dilation_radius and merge_distance must be >= 0")
        if self.rendering == "fine" and self.dilation_radius != 0:
            raise ValueError("fine rendering requires dilation_radius == 0")
        if len(self.classes) != len(LESION_CLASSES):
            raise ValueError("classes must hold one flag per lesion class (CWS, EX, HEM, MA)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StyleSpec":
        d = dict(d)
        marker = d.pop("marker", None)
        d["classes"] = tuple(d.get("classes", (True,) * 4))
        return cls(marker=Marker(**marker) if marker else None, **d)


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    mask: np.ndarray  # H x W uint8 class ids
    origin: int
    sample_id: str
    severity: float | None = None

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"{self.sample_id}: image must be H x W x 3")
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(f"{self.sample_id}: image and mask shapes differ")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValueError(f"{self.sample_id}: image values outside [0, 1]")
        if self.mask.size and self.mask.max() >= N_CLASSES:
            raise ValueError(f"{self.sample_id}: mask holds undeclared class ids")


@dataclass
class Corpus:
    style_id: int
    style: StyleSpec
    splits: dict[str, list[Sample]] = field(default_factory=dict)

    def __post_init__(self):
        seen: set[str] = set()
        for name, samples in self.splits.items():
            for s in samples:
                if s.sample_id in seen:
                    raise ValueError(f"sample {s.sample_id!r} appears in more than one split")
                if s.origin != self.style_id:
                    raise ValueError(f"sample {s.sample_id!r} has origin {s.origin}, corpus is {self.style_id}")
                seen.add(s.sample_id)

    def split(self, name: str) -> list[Sample]:
        return self.splits.get(name, [])

    def samples(self) -> list[Sample]:
        return [s for name in SPLITS for s in self.split(name)]

    def subset(self, split: str, ids: Sequence[str]) -> "Corpus":
        """Copy of this corpus keeping only ``ids`` in ``split`` (other splits untouched)."""
        keep = set(ids)
        splits = dict(self.splits)
        splits[split] = [s for s in self.split(split) if s.sample_id in keep]
        return Corpus(self.style_id, self.style, splits)


@dataclass(frozen=True)
class CorpusSpec:
    n_images: int
    image_size: int
    styles: tuple[StyleSpec, ...]
    seed: int
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    noise_std: float = 0.006

    def validate(self):
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if len(self.styles) < 2:
            raise ValueError("at least two styles are required")
        if len(set(self.styles)) != len(self.styles) or len({s.name for s in self.styles}) != len(self.styles):
            raise ValueError("style specs must be distinct")
        if abs(sum(self.split_fractions) - 1) > 1e-9 or min(self.split_fractions) < 0:
            raise ValueError("split fractions must be non-negative and sum to 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    def to_dict(self) -> dict:
        return {
            "n_images": self.n_images,
            "image_size": self.image_size,
            "styles": [s.to_dict() for s in self.styles],
            "seed": self.seed,
            "split_fractions": list(self.split_fractions),
            "noise_std": self.noise_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        return cls(
            n_images=int(d["n_images"]),
            image_size=int(d["image_size"]),
            styles=tuple(StyleSpec.from_dict(s) for s in d["styles"]),
            seed=int(d["seed"]),
            split_fractions=tuple(d.get("split_fractions", (0.7, 0.15, 0.15))),
            noise_std=float(d.get("noise_std", 0.006)),
        )


@dataclass
class Scene:
    """Unstyled scene: clean image, exact lesion geometry and severity label."""

    image: np.ndarray
    geometry: np.ndarray
    severity: float
    fov: np.ndarray


# ---------------------------------------------------------------------------
# style rendering


def _merge_close(mask: np.ndarray, distance: float) -> np.ndarray:
    """Bridge every pair of components whose nearest pixels are closer than ``distance``."""
    labels, n = ndi.label(mask, structure=EIGHT)
    if n < 2 or distance <= 0:
        return mask
    out = mask.copy()
    bridge = np.zeros_like(mask)
    for i in range(1, n):
        dist, (iy, ix) = ndi.distance_transform_edt(labels != i, return_indices=True)
        for j in range(i + 1, n + 1):
            sel = labels == j
            dj = np.where(sel, dist, np.inf)
            k = int(np.argmin(dj))
            if dj.flat[k] >= distance:
                continue
            y0, x0 = np.unravel_index(k, mask.shape)
            rr, cc = draw.line(int(y0), int(x0), int(iy[y0, x0]), int(ix[y0, x0]))
            bridge[rr, cc] = True
    if bridge.any():
        out |= ndi.binary_dilation(bridge, structure=disk(1).astype(bool))
    return out


def _hull_groups(mask: np.ndarray) -> np.ndarray:
    from skimage.morphology import convex_hull_image

    labels, n = ndi.label(mask, structure=EIGHT)
    out = mask.copy()
    for i in range(1, n + 1):
        out |= convex_hull_image(labels == i)
    return out


def render_style(geometry: np.ndarray, style: StyleSpec) -> np.ndarray:
    """Turn exact lesion geometry (a class-id map) into an annotation mask.

    Coarse renderings dilate each class with a disk, bridge components closer
    than ``merge_distance`` and, for ``dilated-merge``, fill each merged group's
    convex hull. Grown regions only claim background; the exact geometry is
    painted last so coarse masks always contain the fine ones.
    """
    geometry = np.asarray(geometry)
    enabled = np.zeros(N_CLASSES, dtype=bool)
    enabled[1:] = style.classes
    fine = np.where(enabled[geometry], geometry, 0).astype(np.uint8)
    if style.rendering == "fine":
        return fine
    out = np.zeros_like(fine)
    se = disk(style.dilation_radius).astype(bool) if style.dilation_radius > 0 else None
    for c in LESION_CLASSES:
        m = fine == c
        if not m.any():
            continue
        if se is not None:
            m = ndi.binary_dilation(m, structure=se)
        m = _merge_close(m, style.merge_distance)
        if style.rendering == "dilated-merge":
            m = _hull_groups(m)
        out[m & (out == 0)] = c
    out[fine > 0] = fine[fine > 0]
    return out


# ---------------------------------------------------------------------------
# scene synthesis

# (axis range in px at 128 px image size, colour)
_LESION_LOOK = {
    1: ((3.5, 6.5), (0.93, 0.90, 0.78)),  # CWS: pale fluffy patches
    2: ((1.2, 3.0), (0.98, 0.86, 0.30)),  # EX: bright yellow, clustered
    3: ((2.2, 4.5), (0.36, 0.06, 0.03)),  # HEM: dark red blots
    4: ((0.6, 1.3), (0.40, 0.07, 0.04)),  # MA: tiny dark dots
}


def _separation(styles: Sequence[StyleSpec]) -> float:
    dil = max((s.dilation_radius for s in styles), default=0)
    merge = max((s.merge_distance for s in styles), default=0.0)
    return 2 * dil + merge + 3


def _draw_scene(rng: np.random.Generator, size: int, sep: float) -> Scene:
    scale = size / 128.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    radius = 0.46 * size
    rad = np.hypot(yy - c, xx - c)
    fov = rad <= radius

    base = np.array([0.66, 0.30, 0.12]) * rng.uniform(0.9, 1.1)
    shade = 1.0 - 0.35 * (rad / radius) ** 2
    img = np.zeros((size, size, 3))
    img[fov] = (base[None, :] * shade[fov][:, None])

    # optic disc
    side = rng.choice([-1, 1])
    od_y, od_x = c + rng.uniform(-0.05, 0.05) * size, c + side * 0.27 * size
    od_r = 0.075 * size
    od = np.hypot(yy - od_y, xx - od_x) <= od_r
    img[od] = 0.5 * img[od] + 0.5 * np.array([0.96, 0.82, 0.55])

    # vessels: a few random walks out of the optic disc
    vessel = np.zeros((size, size), dtype=bool)
    for _ in range(4):
        y, x = od_y, od_x
        ang = rng.uniform(0, 2 * np.pi)
        for _ in range(int(40 * scale)):
            ang += rng.normal(0, 0.15)
            y2, x2 = y + 2 * scale * np.sin(ang), x + 2 * scale * np.cos(ang)
            rr, cc = draw.line(int(round(y)), int(round(x)), int(round(y2)), int(round(x2)))
            ok = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
            vessel[rr[ok], cc[ok]] = True
            y, x = y2, x2
    vessel &= fov & ~od
    img[vessel] = 0.55 * img[vessel] + 0.45 * np.array([0.42, 0.10, 0.05])

    # lesions
    level = rng.uniform(0, 1)
    counts = {
        4: rng.poisson(9 * level),
        3: rng.poisson(4 * level),
        2: rng.poisson(2.0 * level),  # clusters
        1: rng.poisson(1.2 * level),
    }
    geometry = np.zeros((size, size), dtype=np.uint8)
    placed: list[tuple[float, float, float, int]] = []

    def fits(y, x, r, cls):
        if np.hypot(y - c, x - c) > radius - r - 3 * scale:
            return False
        if np.hypot(y - od_y, x - od_x) < od_r + r + 2:
            return False
        for py, px, pr, pc in placed:
            if pc != cls and np.hypot(y - py, x - px) - r - pr < sep:
                return False
        return True

    def blob(y, x, cls):
        (lo, hi), _ = _LESION_LOOK[cls]
        a, b = rng.uniform(lo, hi, size=2) * scale
        rr, cc = draw.ellipse(y, x, a, b, shape=(size, size), rotation=rng.uniform(0, np.pi))
        rr, cc = rr[fov[rr, cc]], cc[fov[rr, cc]]
        geometry[rr, cc] = cls
        return max(a, b)

    for cls in (1, 3, 2, 4):
        (lo, hi), _ = _LESION_LOOK[cls]
        for _ in range(counts[cls]):
            extent = (12 if cls == 2 else hi) * scale
            for _attempt in range(30):
                y, x = rng.uniform(0, size, size=2)
                if fits(y, x, extent, cls):
                    break
            else:
                continue
            if cls == 2:
                for _ in range(rng.integers(2, 6)):
                    blob(y + rng.uniform(-7, 7) * scale, x + rng.uniform(-7, 7) * scale, 2)
            else:
                blob(y, x, cls)
            placed.append((y, x, extent, cls))

    for cls in LESION_CLASSES:
        m = geometry == cls
        if m.any():
            col = np.array(_LESION_LOOK[cls][1])
            alpha = 0.85 if cls != 1 else 0.7
            img[m] = (1 - alpha) * img[m] + alpha * col

    img = ndi.gaussian_filter(img, sigma=(0.6, 0.6, 0))
    area = float((geometry > 0).sum()) / (0.004 * size * size)
    n_ma = int(ndi.label(geometry == 4, structure=EIGHT)[1])
    severity = 4.0 * (1.0 - math.exp(-(area + n_ma / 4.0) / 8.0))
    return Scene(image=img, geometry=geometry, severity=severity, fov=fov)


def apply_marker(image: np.ndarray, fov: np.ndarray, marker: Marker | None, phase: float,
                 gain: float = 1.0) -> np.ndarray:
    if marker is None or marker.amplitude == 0:
        return image
    h, w = fov.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    th = np.deg2rad(marker.angle)
    wave = gain * marker.amplitude * np.sin(2 * np.pi * (xx * np.cos(th) + yy * np.sin(th)) / marker.period + phase)
    return image + (wave * fov)[..., None]


def _quantize(image: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(image, 0, 1) * 255) / 255).astype(np.float32)


def generate_scene(seed: int, index: int, size: int, separation: float = 3.0) -> Scene:
    return _draw_scene(np.random.default_rng([seed, index]), size, separation)


def generate_corpus(spec: CorpusSpec) -> list[Corpus]:
    """Render ``spec.n_images`` shared scenes under every style of ``spec``.

    Scene ``k`` is drawn from a generator seeded by ``(seed, k)``, so images,
    geometry and split assignment are fully determined by the spec.
    """
    spec.validate()
    sep = _separation(spec.styles)
    order = np.random.default_rng([spec.seed, 2**31 - 1]).permutation(spec.n_images)
    n_train = int(round(spec.split_fractions[0] * spec.n_images))
    n_val = int(round(spec.split_fractions[1] * spec.n_images))
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[int(idx)] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"

    corpora = [Corpus(k, style, {s: [] for s in SPLITS}) for k, style in enumerate(spec.styles)]
    jittered = any(s.marker is not None and s.marker.jitter > 0 for s in spec.styles)
    for idx in range(spec.n_images):
        rng = np.random.default_rng([spec.seed, idx])
        scene = _draw_scene(rng, spec.image_size, sep)
        noise = rng.normal(0, spec.noise_std, size=scene.image.shape) * scene.fov[..., None]
        phase = rng.uniform(0, 2 * np.pi)
        # only draw when needed so jitter-free specs keep their exact streams
        gains = rng.uniform(-1, 1, len(corpora)) if jittered else np.zeros(len(corpora))
        base = scene.image + noise
        for corpus, u in zip(corpora, gains):
            style = corpus.style
            gain = 1.0 + (style.marker.jitter * u if style.marker else 0.0)
            image = _quantize(apply_marker(base, scene.fov, style.marker, phase, gain))
            mask = render_style(scene.geometry, style)
            corpus.splits[split_of[idx]].append(
                Sample(image=image, mask=mask, origin=corpus.style_id,
                       sample_id=f"scene{idx:05d}", severity=round(scene.severity, 6))
            )
    return corpora


# ---------------------------------------------------------------------------
# structure statistics


@dataclass
class KDEGrid:
    xs: np.ndarray  # log S axis
    ys: np.ndarray  # log Q axis
    density: np.ndarray  # len(ys) x len(xs), integrates to 1
    bandwidth: float

    def mass(self) -> float:
        return float(self.density.sum() * _step(self.xs) * _step(self.ys))


@dataclass
class StyleStats:
    class_id: int
    pairs: list[tuple[float, int]]  # (S, Q) for images with Q > 0
    counts: list[int]  # Q for every image, zeros included
    centroid: tuple[float, float] | None
    density: KDEGrid | None

    @property
    def defined(self) -> bool:
        return self.centroid is not None

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "class_name": CLASS_NAMES[self.class_id],
            "pairs": [[s, q] for s, q in self.pairs],
            "counts": self.counts,
            "centroid": list(self.centroid) if self.centroid else None,
            "bandwidth": self.density.bandwidth if self.density else None,
        }


def structure_pair(mask: np.ndarray, class_id: int) -> tuple[float, int]:
    """(mean component area, component count) of ``class_id`` in one mask."""
    labels, q = ndi.label(mask == class_id, structure=EIGHT)
    if q == 0:
        return 0.0, 0
    areas = np.bincount(labels.ravel())[1:]
    return float(areas.mean()), int(q)


def _step(axis: np.ndarray) -> float:
    return float(axis[1] - axis[0]) if len(axis) > 1 else 1.0


def scott_bandwidth(points: np.ndarray) -> float:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(points)
    sigma = math.sqrt(points.var(axis=0).mean()) if n > 1 else 0.0
    if sigma == 0:
        sigma = 0.25
    return sigma * n ** (-1.0 / 6.0)


def kde_evaluate(points, bandwidth: float, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Isotropic Gaussian KDE evaluated on the mesh ``ys x xs`` (unnormalised)."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("at least one point is required")
    h2 = bandwidth * bandwidth
    gx = np.exp(-((xs[None, :] - pts[:, :1]) ** 2) / (2 * h2))  # n x nx
    gy = np.exp(-((ys[None, :] - pts[:, 1:]) ** 2) / (2 * h2))  # n x ny
    return (gy.T @ gx) / (len(pts) * 2 * np.pi * h2)


def kde_density(points, bandwidth: float | None = None, grid: tuple[np.ndarray, np.ndarray] | None = None,
                n_grid: int = 64) -> KDEGrid:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("at least one point is required")
    h = scott_bandwidth(pts) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ValueError("bandwidth must be > 0")
    if grid is None:
        lo, hi = pts.min(axis=0) - 4 * h, pts.max(axis=0) + 4 * h
        grid = (np.linspace(lo[0], hi[0], n_grid), np.linspace(lo[1], hi[1], n_grid))
    xs, ys = (np.asarray(a, dtype=np.float64) for a in grid)
    raw = kde_evaluate(pts, h, xs, ys)
    mass = raw.sum() * _step(xs) * _step(ys)
    return KDEGrid(xs=xs, ys=ys, density=raw / mass, bandwidth=h)


def style_stats(corpus: Corpus, class_id: int, split: str | None = None,
                bandwidth: float | None = None) -> StyleStats:
    samples = corpus.split(split) if split else corpus.samples()
    if not samples:
        raise ValueError("corpus is empty")
    pairs, counts = [], []
    for s in samples:
        size, q = structure_pair(s.mask, class_id)
        counts.append(q)
        if q > 0:
            pairs.append((size, q))
    if not pairs:
        return StyleStats(class_id, [], counts, None, None)
    arr = np.array(pairs, dtype=np.float64)
    centroid = (float(arr[:, 0].mean()), float(arr[:, 1].mean()))
    density = kde_density(np.log(arr), bandwidth)
    return StyleStats(class_id, pairs, counts, centroid, density)


def write_stats(stats: Sequence[StyleStats], out_dir: str | Path, prefix: str) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / f"{prefix}_stats.json"]
    paths[0].write_text(json.dumps([s.to_dict() for s in stats], indent=2))
    for s in stats:
        if s.density is None:
            continue
        p = out_dir / f"{prefix}_{CLASS_NAMES[s.class_id]}_kde.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["log_S", "log_Q", "density"])
            for iy, y in enumerate(s.density.ys):
                for ix, x in enumerate(s.density.xs):
                    w.writerow([f"{x:.6g}", f"{y:.6g}", f"{s.density.density[iy, ix]:.9g}"])
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# on-disk corpora


def write_corpus(corpus: Corpus, root: str | Path) -> Path:
    """Write ``<root>/<style>/<split>/{images,masks}/<id>.png`` plus a manifest.

    Returns the manifest path.
    """
    base = Path(root) / corpus.style.name
    manifest = {
        "style_id": corpus.style_id,
        "style": corpus.style.to_dict(),
        "palette": {str(k): k for k in range(N_CLASSES)},
        "splits": {},
    }
    for split in SPLITS:
        entries = []
        for s in corpus.split(split):
            img_rel = f"{split}/images/{s.sample_id}.png"
            msk_rel = f"{split}/masks/{s.sample_id}.png"
            (base / split / "images").mkdir(parents=True, exist_ok=True)
            (base / split / "masks").mkdir(parents=True, exist_ok=True)
            Image.fromarray(np.round(s.image * 255).astype(np.uint8), "RGB").save(base / img_rel)
            Image.fromarray(s.mask.astype(np.uint8), "L").save(base / msk_rel)
            entries.append({"sample_id": s.sample_id, "image": img_rel, "mask": msk_rel, "severity": s.severity})
        manifest["splits"][split] = entries
    path = base / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_manifest(path: str | Path) -> Corpus:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
        style_id = int(doc["style_id"])
        splits_doc = doc["splits"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: malformed manifest ({exc})") from exc
    style = StyleSpec.from_dict(doc["style"]) if "style" in doc else StyleSpec(name=path.parent.name)
    palette = {int(k): int(v) for k, v in doc.get("palette", {str(k): k for k in range(N_CLASSES)}).items()}
    lut = np.full(256, 255, dtype=np.uint8)
    for value, cls in palette.items():
        if not 0 <= cls < N_CLASSES:
            raise ManifestError(f"{path}: palette maps {value} to unknown class {cls}")
        lut[value] = cls

    splits: dict[str, list[Sample]] = {}
    for split, entries in splits_doc.items():
        if split not in SPLITS:
            raise ManifestError(f"{path}: unknown split {split!r}")
        samples = []
        for e in entries:
            img_path, msk_path = path.parent / e["image"], path.parent / e["mask"]
            for p in (img_path, msk_path):
                if not p.is_file():
                    raise ManifestError(f"missing file: {p}")
            image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
            raw = np.asarray(Image.open(msk_path))
            if raw.ndim != 2:
                raise ManifestError(f"{msk_path}: mask must be single-channel")
            if raw.shape != image.shape[:2]:
                raise ManifestError(f"{msk_path}: mask shape {raw.shape} differs from image {image.shape[:2]}")
            mask = lut[raw]
            if (mask == 255).any():
                bad = sorted(set(np.unique(raw[mask == 255]).tolist()))
                raise ManifestError(f"{msk_path}: mask values {bad} not in palette")
            sid = e.get("sample_id", Path(e["image"]).stem)
            samples.append(Sample(image=image, mask=mask, origin=style_id, sample_id=sid,
                                  severity=e.get("severity")))
        splits[split] = samples
    return Corpus(style_id, style, splits)
