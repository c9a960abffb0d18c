"""Desk-scale experiment presets and the seeded runs built on them."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .corpus import Corpus, CorpusSpec, Marker, StyleSpec
from .segcore import (
    ArchConfig,
    TrainConfig,
    TrainedModel,
    build_model,
    load_checkpoint,
    save_checkpoint,
    train,
)

FINE, COARSE, EXTERNAL = "fine", "coarse", "external"


@dataclass(frozen=True)
class Preset:
    name: str
    n_scenes: int = 240
    image_size: int = 128
    noise_std: float = 0.01
    marker_amplitude: float = 0.015
    marker_period: float = 8.0
    marker_jitter: float = 0.0
    input_noise: float = 0.02  # +-5/255-sized sign noise: keeps the segmenter stable under attack-sized changes
    noise_kind: str = "sign"
    lr_schedule: str = "cosine"
    dilation_radius: int = 3
    merge_distance: float = 6.0
    stages: int = 4
    base_width: int = 8
    specialist_steps: int = 1000
    generalist_factor: int = 3  # generalist budget in specialist budgets
    crop_size: int = 64
    batch_size: int = 8
    checkpoint_every: int = 100
    n_heldout: int = 200
    distill_fraction: float = 0.05
    grader_steps: int = 600
    n_interp_images: int = 20
    n_alphas: int = 11
    n_uncertainty: int = 20
    attack_settings: tuple = ((1e-3, 1), (1e-3, 5), (5e-3, 1), (5e-3, 5))
    probe_taps: tuple = ()

    def styles(self) -> tuple[StyleSpec, StyleSpec, StyleSpec]:
        """Fine, coarse and an unseen-device fine style; each carries its own grating."""
        m = lambda angle: Marker(self.marker_amplitude, self.marker_period, angle, self.marker_jitter)  # noqa: E731
        return (StyleSpec(FINE, marker=m(0.0)),
                StyleSpec(COARSE, "coarse", self.dilation_radius, self.merge_distance, marker=m(90.0)),
                StyleSpec(EXTERNAL, marker=m(45.0)))

    def corpus_spec(self, seed: int) -> CorpusSpec:
        fine, coarse, _ = self.styles()
        return CorpusSpec(self.n_scenes, self.image_size, (fine, coarse), seed=seed, noise_std=self.noise_std)

    def heldout_spec(self, seed: int) -> CorpusSpec:
        """Fresh scenes (disjoint seed stream), everything in the test split."""
        return CorpusSpec(self.n_heldout, self.image_size, self.styles(), seed=seed + 7919,
                          split_fractions=(0.0, 0.0, 1.0), noise_std=self.noise_std)

    def grader_spec(self, seed: int) -> CorpusSpec:
        fine, coarse, _ = self.styles()
        return CorpusSpec(self.n_scenes, self.image_size, (fine, coarse), seed=seed + 104729,
                          split_fractions=(1.0, 0.0, 0.0), noise_std=self.noise_std)

    @property
    def arch(self) -> ArchConfig:
        return ArchConfig(stages=self.stages, base_width=self.base_width)

    def train_config(self, steps: int, seed: int) -> TrainConfig:
        return TrainConfig(max_steps=steps, checkpoint_every=self.checkpoint_every, crop_size=self.crop_size,
                           batch_size=self.batch_size, input_noise=self.input_noise, noise_kind=self.noise_kind,
                           lr_schedule=self.lr_schedule, seed=seed)

    def taps(self) -> list[str]:
        if self.probe_taps:
            return list(self.probe_taps)
        return [f"enc_{k}" for k in range(1, self.stages + 1)] + ["bottleneck"]

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "toy": Preset("toy", n_scenes=60, image_size=64, stages=3, specialist_steps=150, crop_size=32,
                  checkpoint_every=50, n_heldout=24, grader_steps=150, n_interp_images=4, n_alphas=5,
                  n_uncertainty=6, attack_settings=((5e-3, 1), (5e-3, 5))),
    "desk": Preset("desk"),
}


def get_preset(name: str, **overrides) -> Preset:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides) if overrides else PRESETS[name]


def config_key(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ModelStore:
    """Checkpoint cache keyed by a hash of everything that determines the weights."""

    root: Path | None = None
    memory: dict = field(default_factory=dict)

    def get(self, name: str, key: str, build: Callable[[], TrainedModel]) -> TrainedModel:
        tag = f"{name}-{key}"
        if tag in self.memory:
            return self.memory[tag]
        path = None if self.root is None else Path(self.root) / f"{tag}.safetensors"
        if path is not None and path.is_file():
            model, prov = load_checkpoint(path)
            tm = TrainedModel(model, prov)
        else:
            tm = build()
            if path is not None:
                save_checkpoint(tm.model, path, tm.provenance)
        self.memory[tag] = tm
        return tm


def train_on(preset: Preset, corpora: list[Corpus], steps: int, seed: int) -> TrainedModel:
    return train(build_model(preset.arch, seed=seed), corpora, preset.train_config(steps, seed))


def train_family(preset: Preset, seed: int, corpora: list[Corpus], store: ModelStore | None = None,
                 ) -> dict[str, TrainedModel]:
    """Both specialists plus the generalist, which trains ``generalist_factor`` specialist budgets."""
    store = store or ModelStore()
    out = {}
    base = (preset.to_dict(), seed)
    for c in corpora:
        out[c.style.name] = store.get(c.style.name, config_key(base, "specialist", c.style.name),
                                      lambda c=c: train_on(preset, [c], preset.specialist_steps, seed))
    out["generalist"] = store.get("generalist", config_key(base, "generalist"),
                                  lambda: train_on(preset, corpora, preset.specialist_steps * preset.generalist_factor, seed))
    return out


def distill_corpora(preset: Preset, corpora: list[Corpus], seed: int) -> list[Corpus]:
    """Split the training scenes: a small fine-labelled share, the rest coarse-labelled.

    Validation splits are halved the same way so no scene is seen under both styles.
    """
    fine, coarse = corpora
    out = [fine, coarse]
    rng = np.random.default_rng([seed, 31])
    for split, frac in (("train", preset.distill_fraction), ("val", 0.5)):
        ids = sorted(s.sample_id for s in fine.split(split))
        order = [ids[i] for i in rng.permutation(len(ids))]
        n_fine = max(1, int(round(frac * len(ids))))
        out = [out[0].subset(split, order[:n_fine]), out[1].subset(split, order[n_fine:])]
    return out


def train_distilled(preset: Preset, seed: int, corpora: list[Corpus], store: ModelStore | None = None
                    ) -> tuple[TrainedModel, list[Corpus]]:
    store = store or ModelStore()
    mix = distill_corpora(preset, corpora, seed)
    steps = preset.specialist_steps * 2
    tm = store.get("distilled", config_key(preset.to_dict(), seed, "distilled"),
                   lambda: train_on(preset, mix, steps, seed))
    return tm, mix
