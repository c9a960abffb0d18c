"""Table, figure and manifest emission shared by the CLI and the experiment runs."""
from __future__ import annotations

import csv
import hashlib
import json
import platform
import subprocess
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__

MANIFEST_NAME = "manifest.json"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        obj = float(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None  # JSON has no NaN
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(obj, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")
    return path


def write_table(rows: Sequence[dict], out_dir: str | Path, stem: str) -> list[Path]:
    """Same rows as CSV (flat columns, first-seen order) and JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [_plain(r) for r in rows]
    fields: list[str] = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    csv_path = out_dir / f"{stem}.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: json.dumps(v) if isinstance(v, (dict, list)) else v for k, v in r.items()})
    return [csv_path, write_json(rows, out_dir / f"{stem}.json")]


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=80, metadata={"Software": None})
    _pyplot().close(fig)
    return path


def plot_matrix(cells: np.ndarray, rows: Sequence[str], cols: Sequence[str], path: str | Path,
                title: str = "mIoU") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(1.6 + 1.2 * len(cols), 1.2 + 0.6 * len(rows)))
    ax.imshow(cells, vmin=0, vmax=1, cmap="viridis")
    ax.set_xticks(range(len(cols)), cols)
    ax.set_yticks(range(len(rows)), rows)
    for i in range(len(rows)):
        for j in range(len(cols)):
            ax.text(j, i, f"{cells[i, j]:.3f}", ha="center", va="center", color="w")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_bars(labels: Sequence[str], series: dict[str, Sequence[float]], path: str | Path, ylabel: str) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(1.5 + 0.9 * len(labels), 3))
    width = 0.8 / max(len(series), 1)
    for k, (name, vals) in enumerate(series.items()):
        ax.bar(np.arange(len(labels)) + k * width, np.nan_to_num(np.asarray(vals, float)), width, label=name)
    ax.set_xticks(np.arange(len(labels)) + width * (len(series) - 1) / 2, labels)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    return _save(fig, Path(path))


def save_map_png(values: np.ndarray, path: str | Path, vmin: float | None = None, vmax: float | None = None) -> Path:
    """Single-channel float map to an 8-bit colour PNG; NaN pixels are drawn grey."""
    from PIL import Image

    plt = _pyplot()
    v = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(v)
    lo = np.nanmin(v) if vmin is None and finite.any() else (vmin or 0.0)
    hi = np.nanmax(v) if vmax is None and finite.any() else (vmax if vmax is not None else 1.0)
    scaled = np.clip((v - lo) / max(hi - lo, 1e-12), 0, 1)
    rgb = (plt.get_cmap("coolwarm")(np.nan_to_num(scaled))[..., :3] * 255).round().astype(np.uint8)
    rgb[~finite] = 128
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, "RGB").save(path)
    return path


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def git_revision() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    if out.returncode != 0:
        return None
    return out.stdout.strip() or None


def provenance() -> dict:
    import scipy
    import torch

    return {"styleconv": __version__, "git": git_revision(), "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "torch": torch.__version__}


class RunRecorder:
    """Collects output paths and writes the run manifest (seed, config, artifact hashes).

    Files registered as ``unhashed`` (wall-clock timings) are listed but never hashed.
    """

    def __init__(self, out_dir: str | Path, command: str, seed: int, config: dict):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.command, self.seed, self.config = command, seed, config
        self.paths: list[Path] = []
        self.unhashed: list[Path] = []

    def add(self, paths: Path | Iterable[Path]) -> None:
        self.paths.extend([paths] if isinstance(paths, (str, Path)) else list(paths))

    def add_unhashed(self, path: Path) -> None:
        self.unhashed.append(Path(path))

    def rel(self, p: Path) -> str:
        p = Path(p).resolve()
        try:
            return p.relative_to(self.out_dir.resolve()).as_posix()
        except ValueError:
            return str(p)

    def manifest(self) -> dict:
        artifacts = {self.rel(p): sha256_file(p) for p in sorted(set(map(Path, self.paths)), key=str)}
        return {"command": self.command, "seed": self.seed, "config": self.config,
                "artifacts": dict(sorted(artifacts.items())),
                "unhashed": sorted(self.rel(p) for p in self.unhashed),
                "environment": provenance()}

    def write(self) -> Path:
        return write_json(self.manifest(), self.out_dir / MANIFEST_NAME)
