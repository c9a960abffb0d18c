"""End-to-end seeded run: synth -> train x3 -> probe sweep -> attacks -> conversion gain -> uncertainty."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .artifacts import RunRecorder, plot_matrix, write_json, write_table
from .attack import AttackConfig, pgd_attack, save_conversion
from .corpus import LESION_CLASSES, generate_corpus, style_stats, write_corpus, write_stats
from .experiments import COARSE, EXTERNAL, FINE, get_preset, train_family
from .harness import attack_success_table, conversion_gain, cross_matrix, robustness_perturb
from .probe import best_tap, placement_sweep, save_probe, write_sweep
from .segcore import save_checkpoint
from .styleops import interpolation_sweep, uncertainty_map, write_sweep_strip, write_uncertainty


def _write_corpora(corpora, root: Path, rec: RunRecorder):
    for c in corpora:
        manifest = write_corpus(c, root)
        rec.add(manifest)
        rec.add(sorted(manifest.parent.rglob("*.png")))


def run_pipeline(preset_name: str, seed: int, out: str | Path, rec: RunRecorder) -> dict:
    out = Path(out)
    preset = get_preset(preset_name)
    rec.add(write_json(preset.to_dict(), out / "preset.json"))

    # synth
    corpora = generate_corpus(preset.corpus_spec(seed))
    heldout = generate_corpus(preset.heldout_spec(seed))
    _write_corpora(corpora, out / "corpus", rec)
    _write_corpora(heldout, out / "heldout", rec)
    for c in corpora:
        rec.add(write_stats([style_stats(c, k) for k in LESION_CLASSES], out / "stats", c.style.name))
    by_name = {c.style.name: c for c in heldout}

    # train x3
    family = train_family(preset, seed, corpora)
    for name, tm in family.items():
        rec.add(save_checkpoint(tm.model, out / "models" / f"{name}.safetensors", tm.provenance))
        rec.add(write_table(tm.provenance["history"], out / "models", f"{name}_history"))
    models = {name: tm.model for name, tm in family.items()}
    gen = models["generalist"]

    matrix = cross_matrix(models, corpora, specialists=[FINE, COARSE])
    rec.add(write_table(matrix.table(), out / "tables", "eval_matrix"))
    rec.add(plot_matrix(matrix.cells, matrix.rows, matrix.cols, out / "tables" / "eval_matrix.png"))

    # probe + sweep
    rows, probes = placement_sweep(gen, corpora, preset.taps())
    tap = best_tap(rows)
    probe = probes[tap]
    rec.add(write_sweep(rows, out / "probe"))
    rec.add(save_probe(probe, out / "probe" / "probe.safetensors"))

    # attack table on held-out scenes, each target attacked from the other style
    table, timing = [], []
    for target, source in ((0, by_name[COARSE]), (1, by_name[FINE])):
        images = np.stack([s.image for s in source.samples()])
        r, t = attack_success_table(gen, probe, images, preset.attack_settings, [target])
        table += r
        timing += [{**row, "target": target} for row in t]
    rec.add(write_table(table, out / "tables", "attack_table"))
    rec.add_unhashed(write_json(timing, out / "timing.json"))
    both = np.stack([s.image for name in (FINE, COARSE) for s in by_name[name].samples()])
    rec.add(write_table(robustness_perturb(gen, probe, both, seed=seed), out / "tables", "robustness"))

    # conversion gain: unseen-device images with fine labels, converted toward fine; plus a no-op check
    gains = [conversion_gain(gen, probe, by_name[EXTERNAL], 0), conversion_gain(gen, probe, by_name[FINE], 0)]
    rec.add(write_table([{k: g[k] for k in ("corpus", "target", "before", "after", "gain")} for g in gains],
                        out / "tables", "conversion_gain"))

    # interpolation fine -> coarse and uncertainty
    fine_imgs = np.stack([s.image for s in by_name[FINE].samples()[:preset.n_interp_images]])
    converted = pgd_attack(gen, probe, fine_imgs, AttackConfig(target=1)).converted
    alphas = np.linspace(0, 1, preset.n_alphas)
    sweep = interpolation_sweep(gen, probe, fine_imgs, 1, alphas, converted=converted)
    lesion_area = [int(r["area"][1:].sum()) for r in sweep]
    rho = float(spearmanr(alphas, lesion_area)[0]) if len(set(lesion_area)) > 1 else float("nan")
    rec.add(write_table([{"alpha": float(a), "lesion_area": v} for a, v in zip(alphas, lesion_area)],
                        out / "tables", "interpolation"))
    single = interpolation_sweep(gen, probe, fine_imgs[0], 1, alphas, converted=converted[0])
    rec.add(write_sweep_strip(single, out / "interpolation"))
    um = uncertainty_map(gen, probe, fine_imgs[0], 1, n_samples=preset.n_uncertainty, seed=seed,
                         converted=converted[0])
    rec.add(write_uncertainty(um, out / "uncertainty"))
    res = pgd_attack(gen, probe, fine_imgs[:2], AttackConfig(target=1))
    rec.add(save_conversion(res, out / "conversions", "fine_to_coarse"))

    summary = {
        "preset": preset.name, "seed": seed, "attack_tap": tap,
        "eval_matrix": matrix.table(),
        "probe_sweep": [{k: r[k] for k in ("tap", "accuracy")} for r in rows],
        "attack_success": table, "conversion_gain": [{k: g[k] for k in ("corpus", "before", "after", "gain")}
                                                     for g in gains],
        "interpolation_spearman": rho,
    }
    rec.add(write_json(summary, out / "summary.json"))
    return summary
