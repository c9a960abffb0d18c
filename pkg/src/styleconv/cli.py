"""``styleconv`` command line.

Every subcommand resolves its parameters as defaults < JSON config file <
explicit flags, writes all outputs under one directory and finishes with a
manifest recording the seed, the resolved config and a hash of every artifact.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .artifacts import RunRecorder, plot_bars, plot_matrix, provenance, save_map_png, write_json, write_table
from .corpus import (
    CLASS_NAMES,
    LESION_CLASSES,
    Corpus,
    CorpusSpec,
    ManifestError,
    generate_corpus,
    load_manifest,
    style_stats,
    write_corpus,
    write_stats,
)

OUT_ENV = "STYLECONV_OUT"


class CommandError(Exception):
    """Failed precondition; reported as a diagnostic with exit status 1."""


# ---------------------------------------------------------------------------
# parameter plumbing


def _floats(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v.strip()]


def _settings(text) -> list[tuple[float, int]]:
    if isinstance(text, list):
        return [(float(e), int(n)) for e, n in text]
    out = []
    for item in str(text).split(","):
        eps, _, n = item.partition(":")
        out.append((float(eps), int(n)))
    return out


COMMON = {"seed": 0, "out": None}

DEFAULTS: dict[str, dict] = {
    "synth": {"preset": "desk", "n_scenes": None, "image_size": None, "noise_std": None,
              "styles": ["fine", "coarse"], "split_fractions": [0.7, 0.15, 0.15]},
    "characterize": {"corpus": [], "split": None, "classes": list(LESION_CLASSES)},
    "train": {"corpus": [], "name": "model", "stages": 4, "base_width": 8, "steps": 1000,
              "learning_rate": 3e-3, "weight_decay": 1e-5, "label_smoothing": 0.0, "crop_size": 64,
              "batch_size": 8, "checkpoint_every": 100, "augmentation": "medium", "input_noise": 0.02,
              "noise_kind": "sign", "lr_schedule": "cosine"},
    "train-probe": {"model": None, "corpus": [], "tap": "bottleneck", "l2": 1e-3},
    "probe-sweep": {"model": None, "corpus": [], "taps": None, "l2": 1e-3},
    "attack-table": {"model": None, "probe": None, "corpus": [], "split": "test",
                     "settings": "1e-3:1,1e-3:5,5e-3:1,5e-3:5", "radius": 5 / 255, "targets": None},
    "convert": {"model": None, "probe": None, "image": [], "target": None, "eps": 5e-3, "steps": 5,
                "radius": 5 / 255},
    "interpolate": {"model": None, "probe": None, "image": None, "target": None, "alphas": 11,
                    "mode": "input_space", "source": None, "eps": 5e-3, "steps": 5, "radius": 5 / 255},
    "uncertainty": {"model": None, "probe": None, "image": None, "target": None, "samples": 20,
                    "eps": 5e-3, "steps": 5, "radius": 5 / 255},
    "eval-matrix": {"model": [], "corpus": [], "split": "test", "tolerance": 0.03},
    "distill-gain": {"model": None, "probe": None, "corpus": None, "target": None, "split": "test",
                     "eps": 5e-3, "steps": 5, "radius": 5 / 255},
    "mixed-eval": {"model": None, "probe": None, "val_corpus": None, "corpus": None, "targets": None,
                   "eps": 5e-3, "steps": 5, "radius": 5 / 255},
    "integrity": {"model": None, "probe": None, "corpus": None, "grader_corpus": [], "target": None,
                  "split": "test", "grader_steps": 600, "eps": 5e-3, "steps": 5, "radius": 5 / 255},
    "robustness": {"model": None, "probe": None, "corpus": [], "split": "test",
                   "kinds": ["resample", "color_jitter", "jpeg"]},
    "pipeline": {"preset": "toy"},
}

HELP = {
    "synth": "generate synthetic multi-style corpora",
    "characterize": "per-class (S, Q) statistics and KDE grids",
    "train": "train a segmentation model on one or more corpora",
    "train-probe": "fit an origin probe at one tap of a frozen model",
    "probe-sweep": "probe accuracy at every tap; keeps the best probe",
    "attack-table": "attack success per (eps, N) setting and target",
    "convert": "convert images toward a target style",
    "interpolate": "segment along the path between an image and its conversion",
    "uncertainty": "per-pixel std over random interpolation points",
    "eval-matrix": "cross-corpus mIoU matrix and style-adoption report",
    "distill-gain": "mIoU before and after converting a test corpus",
    "mixed-eval": "per-lesion conversion targets chosen on validation, scored on test",
    "integrity": "proxy severity grader before/after conversion",
    "robustness": "probe and segmentation drift under benign perturbations",
    "pipeline": "end-to-end seeded run of a preset",
}


SCALAR_TYPES = {"n_scenes": int, "image_size": int, "noise_std": float}
LIST_KEYS = {"taps"}
TEXT_KEYS = {"alphas"}  # a count or an explicit comma list


def _add_flags(p: argparse.ArgumentParser, cmd: str):
    s = argparse.SUPPRESS
    p.add_argument("--config", default=s, help="JSON file with parameter values")
    p.add_argument("--out", default=s, help=f"output directory (default: ${OUT_ENV}/<command> or runs/<command>)")
    p.add_argument("--seed", type=int, default=s)
    for key, value in DEFAULTS[cmd].items():
        kw: dict = {"default": s, "dest": key}
        if isinstance(value, list) or key in LIST_KEYS:
            kw["nargs"] = "+"
            kw["type"] = type(value[0]) if value else str
        elif isinstance(value, (int, float)) and not isinstance(value, bool) and key not in TEXT_KEYS:
            kw["type"] = type(value)
        else:
            kw["type"] = SCALAR_TYPES.get(key, str)
        p.add_argument("--" + key.replace("_", "-"), **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="styleconv", description="Adversarial annotation-style conversion.")
    parser.add_argument("--version", action="store_true", help="print build provenance and exit")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for cmd in DEFAULTS:
        _add_flags(sub.add_parser(cmd, help=HELP[cmd], description=HELP[cmd]), cmd)
    return parser


def resolve(cmd: str, ns: argparse.Namespace) -> dict:
    """defaults < config file < flags."""
    cfg = {**COMMON, **DEFAULTS[cmd]}
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "version", "config")}
    path = getattr(ns, "config", None)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CommandError(f"cannot read config {path}: {exc}") from exc
        if isinstance(doc, dict) and "config" in doc and "command" in doc:
            doc = doc["config"]  # a run manifest replays its resolved config
        if not isinstance(doc, dict):
            raise CommandError(f"config {path} must hold a JSON object")
        doc = {k.replace("-", "_"): v for k, v in doc.items()}
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise CommandError(f"config {path}: unknown keys for {cmd}: {unknown}")
        cfg.update(doc)
    cfg.update(given)
    return cfg


def output_dir(cmd: str, cfg: dict) -> Path:
    if cfg.get("out"):
        return Path(cfg["out"])
    return Path(os.environ.get(OUT_ENV) or "runs") / cmd


# ---------------------------------------------------------------------------
# loaders


def _require(cfg: dict, key: str, what: str | None = None):
    v = cfg.get(key)
    if v is None or v == []:
        raise CommandError(f"{what or key} required (--{key.replace('_', '-')})")
    return v


def _corpora(paths) -> list[Corpus]:
    paths = [paths] if isinstance(paths, (str, Path)) else list(paths)
    out = []
    for p in paths:
        p = Path(p)
        out.append(load_manifest(p / "manifest.json" if p.is_dir() else p))
    return out


def _model(path):
    from .segcore import load_checkpoint

    if not Path(path).is_file():
        raise CommandError(f"model checkpoint not found: {path}")
    return load_checkpoint(path)[0]


def _probe(cfg: dict):
    from .probe import load_probe

    path = cfg.get("probe")
    if not path:
        raise CommandError("probe required: pass --probe <checkpoint> (see train-probe / probe-sweep)")
    if not Path(path).is_file():
        raise CommandError(f"probe required: checkpoint not found: {path}")
    return load_probe(path)


def _model_and_probe(cfg: dict):
    probe = _probe(cfg)
    model = _model(_require(cfg, "model", "model checkpoint"))
    if probe.tap not in model.taps:
        raise CommandError(f"probe tap {probe.tap!r} does not exist on the model")
    return model, probe


def _target(probe, value, key: str = "target") -> int:
    if value is None:
        raise CommandError(f"{key} required")
    names = probe.provenance.get("origin_names") or []
    if str(value) in names:
        return probe.origins[names.index(str(value))]
    try:
        t = int(value)
    except (TypeError, ValueError):
        t = None
    if t is None or t not in probe.origins:
        raise CommandError(f"unknown {key} {value!r}; the probe knows {names or probe.origins}")
    return t


def _origin_name(probe, origin) -> str:
    names = probe.provenance.get("origin_names") or []
    return names[probe.origins.index(origin)] if names else str(origin)


def _read_image(path) -> np.ndarray:
    from PIL import Image

    if not Path(path).is_file():
        raise CommandError(f"image not found: {path}")
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def _attack_cfg(cfg: dict, target: int):
    from .attack import AttackConfig

    return AttackConfig(target=target, step=float(cfg["eps"]), steps=int(cfg["steps"]), radius=float(cfg["radius"]))


def _images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples])


# ---------------------------------------------------------------------------
# subcommands; each returns nothing and registers its outputs on ``rec``


def cmd_synth(cfg: dict, out: Path, rec: RunRecorder):
    from .experiments import get_preset

    preset = get_preset(cfg["preset"])
    known = {s.name: s for s in preset.styles()}
    styles = []
    for name in cfg["styles"]:
        if name not in known:
            raise CommandError(f"unknown style {name!r}; choose from {sorted(known)}")
        styles.append(known[name])
    spec = CorpusSpec(n_images=int(cfg["n_scenes"] or preset.n_scenes),
                      image_size=int(cfg["image_size"] or preset.image_size), styles=tuple(styles),
                      seed=int(cfg["seed"]), split_fractions=tuple(cfg["split_fractions"]),
                      noise_std=float(preset.noise_std if cfg["noise_std"] is None else cfg["noise_std"]))
    try:
        spec.validate()
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    rec.add(write_json(spec.to_dict(), out / "corpus_spec.json"))
    for corpus in generate_corpus(spec):
        manifest = write_corpus(corpus, out)
        rec.add(manifest)
        rec.add(sorted(manifest.parent.rglob("*.png")))


def cmd_characterize(cfg: dict, out: Path, rec: RunRecorder):
    corpora = _corpora(_require(cfg, "corpus", "corpus manifest"))
    for c in corpora:
        stats = [style_stats(c, k, split=cfg["split"]) for k in cfg["classes"]]
        rec.add(write_stats(stats, out, c.style.name))


def cmd_train(cfg: dict, out: Path, rec: RunRecorder):
    from .segcore import ArchConfig, TrainConfig, build_model, save_checkpoint, train

    corpora = _corpora(_require(cfg, "corpus", "corpus manifest"))
    tc = TrainConfig(label_smoothing=float(cfg["label_smoothing"]), learning_rate=float(cfg["learning_rate"]),
                     weight_decay=float(cfg["weight_decay"]), crop_size=int(cfg["crop_size"]),
                     batch_size=int(cfg["batch_size"]), max_steps=int(cfg["steps"]),
                     checkpoint_every=int(cfg["checkpoint_every"]), augmentation=cfg["augmentation"],
                     input_noise=float(cfg["input_noise"]), noise_kind=cfg["noise_kind"],
                     lr_schedule=cfg["lr_schedule"], seed=int(cfg["seed"]))
    model = build_model(ArchConfig(stages=int(cfg["stages"]), base_width=int(cfg["base_width"])), seed=int(cfg["seed"]))
    tm = train(model, corpora, tc)
    rec.add(save_checkpoint(tm.model, out / f"{cfg['name']}.safetensors", tm.provenance))
    rec.add(write_table(tm.provenance["history"], out, f"{cfg['name']}_history"))


def cmd_train_probe(cfg: dict, out: Path, rec: RunRecorder):
    from .probe import ProbeConfig, probe_accuracy, save_probe, train_probe

    model = _model(_require(cfg, "model", "model checkpoint"))
    corpora = _corpora(_require(cfg, "corpus", "corpus manifests"))
    if len(corpora) < 2:
        raise CommandError("a probe needs at least two corpora")
    if cfg["tap"] not in model.taps:
        raise CommandError(f"unknown tap {cfg['tap']!r}; available: {model.taps}")
    probe = train_probe(model, corpora, cfg["tap"], ProbeConfig(l2=float(cfg["l2"])))
    correct, total = probe_accuracy(probe, model, corpora, "val")
    rec.add(save_probe(probe, out / "probe.safetensors"))
    rec.add(write_json({"tap": probe.tap, "origins": probe.origins,
                        "origin_names": probe.provenance["origin_names"],
                        "train_accuracy": probe.provenance["train_accuracy"],
                        "val_accuracy": correct / total if total else None}, out / "probe.json"))


def cmd_probe_sweep(cfg: dict, out: Path, rec: RunRecorder):
    from .probe import ProbeConfig, best_tap, placement_sweep, save_probe, write_sweep

    model = _model(_require(cfg, "model", "model checkpoint"))
    corpora = _corpora(_require(cfg, "corpus", "corpus manifests"))
    taps = cfg["taps"] or [t for t in model.taps if not t.startswith("dec_")]
    bad = [t for t in taps if t not in model.taps]
    if bad:
        raise CommandError(f"unknown taps {bad}; available: {model.taps}")
    rows, probes = placement_sweep(model, corpora, taps, ProbeConfig(l2=float(cfg["l2"])))
    best = best_tap(rows)
    rec.add(write_sweep(rows, out))
    rec.add(save_probe(probes[best], out / "probe.safetensors"))
    rec.add(write_json({"best_tap": best, "rows": rows}, out / "probe_sweep.json"))


def cmd_attack_table(cfg: dict, out: Path, rec: RunRecorder):
    from .harness import attack_success_table

    model, probe = _model_and_probe(cfg)
    corpora = _corpora(_require(cfg, "corpus", "corpus manifests"))
    given = cfg["targets"].split(",") if isinstance(cfg["targets"], str) else cfg["targets"] or probe.origins
    targets = [_target(probe, t) for t in given]
    rows, timing = [], []
    for t in targets:
        # attack only images that do not already come from the target
        images = _images([s for c in corpora if c.style_id != t for s in c.split(cfg["split"])])
        if not len(images):
            raise CommandError(f"no {cfg['split']} images outside target {t}")
        r, tm = attack_success_table(model, probe, images, _settings(cfg["settings"]), [t], float(cfg["radius"]))
        rows += [{**row, "target_name": _origin_name(probe, t)} for row in r]
        timing += [{**row, "target": t} for row in tm]
    rec.add(write_table(rows, out, "attack_table"))
    path = write_json(timing, out / "timing.json")
    rec.add_unhashed(path)


def cmd_convert(cfg: dict, out: Path, rec: RunRecorder):
    from PIL import Image

    from .attack import pgd_attack, save_conversion
    from .segcore import predict_labels
    from .styleops import PALETTE

    model, probe = _model_and_probe(cfg)
    paths = _require(cfg, "image", "input image")
    paths = [paths] if isinstance(paths, str) else paths
    target = _target(probe, cfg["target"])
    for p in paths:
        x = _read_image(p)
        result = pgd_attack(model, probe, x, _attack_cfg(cfg, target))
        stem = Path(p).stem + f"_to_{_origin_name(probe, target)}"
        rec.add(save_conversion(result, out, stem))
        seg = out / f"{stem}_seg.png"
        Image.fromarray(PALETTE[predict_labels(model, result.converted)]).save(seg)
        rec.add(seg)


def _alphas(spec) -> list[float]:
    if isinstance(spec, list):
        return [float(a) for a in spec]
    text = str(spec)
    if "," in text:
        return _floats(text)
    return np.linspace(0, 1, int(text)).tolist()


def cmd_interpolate(cfg: dict, out: Path, rec: RunRecorder):
    from .attack import pgd_attack
    from .segcore import predict_labels
    from .styleops import interpolate_loss_attack, interpolation_sweep, lesion_areas, write_sweep_strip

    model, probe = _model_and_probe(cfg)
    x = _read_image(_require(cfg, "image", "input image"))
    target = _target(probe, cfg["target"])
    alphas = _alphas(cfg["alphas"])
    if cfg["mode"] == "input_space":
        converted = pgd_attack(model, probe, x, _attack_cfg(cfg, target)).converted
        rows = interpolation_sweep(model, probe, x, target, alphas, converted=converted)
        rec.add(write_sweep_strip(rows, out))
    elif cfg["mode"] == "loss_space":
        source = _target(probe, cfg["source"], "source")
        rows = []
        for a in alphas:
            res = interpolate_loss_attack(model, probe, x, source, target, a, _attack_cfg(cfg, target))
            labels = predict_labels(model, res.converted)
            rows.append({"alpha": a, "labels": labels, "area": lesion_areas(labels), "probe": res.trace[-1]})
        rec.add(write_sweep_strip(rows, out))
    else:
        raise CommandError(f"unknown mode {cfg['mode']!r}")


def cmd_uncertainty(cfg: dict, out: Path, rec: RunRecorder):
    from .attack import pgd_attack
    from .styleops import uncertainty_map, write_uncertainty

    model, probe = _model_and_probe(cfg)
    x = _read_image(_require(cfg, "image", "input image"))
    target = _target(probe, cfg["target"])
    if int(cfg["samples"]) < 1:
        raise CommandError("samples must be >= 1")
    converted = pgd_attack(model, probe, x, _attack_cfg(cfg, target)).converted
    um = uncertainty_map(model, probe, x, target, n_samples=int(cfg["samples"]), seed=int(cfg["seed"]),
                         converted=converted)
    rec.add(write_uncertainty(um, out))


def cmd_eval_matrix(cfg: dict, out: Path, rec: RunRecorder):
    from .harness import cross_matrix

    specs = _require(cfg, "model", "model checkpoints (name=path)")
    models = {}
    for item in specs:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        models[name] = _model(path)
    corpora = _corpora(_require(cfg, "corpus", "corpus manifests"))
    m = cross_matrix(models, corpora, split=cfg["split"])
    rec.add(write_table(m.table(), out, "eval_matrix"))
    rec.add(plot_matrix(m.cells, m.rows, m.cols, out / "eval_matrix.png"))
    adoption = []
    for g in [r for r in m.rows if r not in m.cols]:
        for col in m.cols:
            if col in m.rows:
                gv, sv = m.cell(g, col), m.cell(col, col)
                adoption.append({"generalist": g, "corpus": col, "generalist_miou": gv, "specialist_miou": sv,
                                 "holds": gv >= sv, "within_tolerance": gv >= sv - float(cfg["tolerance"])})
    if adoption:
        rec.add(write_table(adoption, out, "style_adoption"))


def cmd_distill_gain(cfg: dict, out: Path, rec: RunRecorder):
    from .harness import conversion_gain

    model, probe = _model_and_probe(cfg)
    corpus = _corpora(_require(cfg, "corpus", "test corpus"))[0]
    target = _target(probe, cfg["target"])
    g = conversion_gain(model, probe, corpus, target, _attack_cfg(cfg, target), split=cfg["split"])
    g["target_name"] = _origin_name(probe, target)
    rec.add(write_json(g, out / "conversion_gain.json"))
    classes = list(g["before_per_class"])
    rows = [{"class": c, "before": g["before_per_class"][c], "after": g["after_per_class"].get(c)} for c in classes]
    rows.append({"class": "mean(per-image mIoU)", "before": g["before"], "after": g["after"]})
    rec.add(write_table(rows, out, "conversion_gain"))
    rec.add(plot_bars(classes, {"before": [g["before_per_class"][c] for c in classes],
                                "after": [g["after_per_class"].get(c, np.nan) for c in classes]},
                      out / "conversion_gain.png", "IoU"))


def cmd_mixed_eval(cfg: dict, out: Path, rec: RunRecorder):
    from .harness import NO_CONVERSION, lesion_auc_table, mixed_lesion_eval, select_lesion_targets

    model, probe = _model_and_probe(cfg)
    test = _corpora(_require(cfg, "corpus", "test corpus"))[0]
    acfg = _attack_cfg(cfg, probe.origins[0])
    if cfg["targets"]:
        given = json.loads(cfg["targets"]) if isinstance(cfg["targets"], str) else cfg["targets"]
        targets = {}
        for cname, t in dict(given).items():
            if cname not in CLASS_NAMES[1:]:
                raise CommandError(f"unknown lesion class {cname!r}")
            targets[CLASS_NAMES.index(cname)] = NO_CONVERSION if t == NO_CONVERSION else _target(probe, t)
        selection = []
    else:
        val = _corpora(_require(cfg, "val_corpus", "validation corpus (or explicit --targets)"))[0]
        options = [NO_CONVERSION] + list(probe.origins)
        table = lesion_auc_table(model, probe, val.split("val") or val.samples(), options, acfg)
        targets = select_lesion_targets(table)
        selection = [{"option": str(o), **{CLASS_NAMES[c]: v for c, v in row.items()}} for o, row in table.items()]
        rec.add(write_table(selection, out, "target_selection"))
    result = mixed_lesion_eval(model, probe, test, targets, acfg)
    plain = mixed_lesion_eval(model, probe, test, {c: NO_CONVERSION for c in LESION_CLASSES}, acfg)
    rows = [{"setting": "no conversion", **plain["per_class"], "mean": plain["mean"]},
            {"setting": "mixed", **result["per_class"], "mean": result["mean"]}]
    rec.add(write_table(rows, out, "mixed_eval"))
    rec.add(write_json({"targets": result["targets"], "mixed": result, "unconverted": plain}, out / "mixed_eval_detail.json"))


def cmd_integrity(cfg: dict, out: Path, rec: RunRecorder):
    from .harness import integrity_check, train_grader

    model, probe = _model_and_probe(cfg)
    corpus = _corpora(_require(cfg, "corpus", "test corpus"))[0]
    grader_corpora = _corpora(_require(cfg, "grader_corpus", "grader training corpora"))
    samples = corpus.split(cfg["split"]) or corpus.samples()
    seen = {s.image.tobytes() for s in samples}
    if any(s.image.tobytes() in seen for c in grader_corpora for s in c.split("train")):
        raise CommandError("grader corpora must be disjoint from the conversion test images")
    target = _target(probe, cfg["target"])
    grader = train_grader(grader_corpora, steps=int(cfg["grader_steps"]), seed=int(cfg["seed"]))
    images = _images(samples)
    from .attack import pgd_attack

    conv = pgd_attack(model, probe, images, _attack_cfg(cfg, target)).converted
    report = integrity_check(grader, images, conv)
    rec.add(write_json({**report.to_dict(), "target": target, "ids": [s.sample_id for s in samples]},
                       out / "integrity.json"))
    res = report.log_residuals[0]
    n = np.isfinite(res).sum(-1)
    mean = np.where(n > 0, np.nansum(res, -1) / np.maximum(n, 1), np.nan)  # channel mean; NaN where all masked
    rec.add(save_map_png(mean, out / "log_residual_0.png", -1.0, 1.0))


def cmd_robustness(cfg: dict, out: Path, rec: RunRecorder):
    from .harness import robustness_perturb

    model, probe = _model_and_probe(cfg)
    corpora = _corpora(_require(cfg, "corpus", "corpus manifests"))
    images = _images([s for c in corpora for s in c.split(cfg["split"])])
    rows = robustness_perturb(model, probe, images, cfg["kinds"], seed=int(cfg["seed"]))
    rec.add(write_table(rows, out, "robustness"))


def cmd_pipeline(cfg: dict, out: Path, rec: RunRecorder):
    from .pipeline import run_pipeline

    run_pipeline(cfg["preset"], int(cfg["seed"]), out, rec)


COMMANDS: dict[str, Callable[[dict, Path, RunRecorder], None]] = {
    "synth": cmd_synth, "characterize": cmd_characterize, "train": cmd_train, "train-probe": cmd_train_probe,
    "probe-sweep": cmd_probe_sweep, "attack-table": cmd_attack_table, "convert": cmd_convert,
    "interpolate": cmd_interpolate, "uncertainty": cmd_uncertainty, "eval-matrix": cmd_eval_matrix,
    "distill-gain": cmd_distill_gain, "mixed-eval": cmd_mixed_eval, "integrity": cmd_integrity,
    "robustness": cmd_robustness, "pipeline": cmd_pipeline,
}


def version_text() -> str:
    p = provenance()
    return (f"styleconv {__version__} (git {p['git'] or 'unknown'}; python {p['python']}, "
            f"torch {p['torch']}, numpy {p['numpy']}, scipy {p['scipy']})")


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    if ns.version:
        print(version_text())
        return 0
    if not ns.command:
        parser.print_usage(sys.stderr)
        print("styleconv: error: a command is required", file=sys.stderr)
        return 2
    import torch

    torch.set_num_threads(1)  # bitwise-reproducible reductions
    try:
        cfg = resolve(ns.command, ns)
        out = output_dir(ns.command, cfg)
        rec = RunRecorder(out, ns.command, int(cfg["seed"]), {k: v for k, v in cfg.items() if k != "out"})
        start = time.perf_counter()
        COMMANDS[ns.command](cfg, out, rec)
        path = rec.write()
    except (CommandError, ManifestError, FileNotFoundError) as exc:
        print(f"styleconv {ns.command}: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"styleconv {ns.command}: invalid input: {exc}", file=sys.stderr)
        return 1
    print(f"{ns.command}: {len(rec.paths)} artifacts in {out} ({time.perf_counter() - start:.1f}s); manifest {path}")
    return 0


def main() -> None:
    sys.exit(run())

