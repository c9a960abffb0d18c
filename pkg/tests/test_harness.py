import numpy as np
import pytest
import torch

from styleconv.attack import AttackConfig
from styleconv.corpus import LESION_CLASSES
from styleconv.harness import (
    NO_CONVERSION,
    attack_success_table,
    conversion_gain,
    cross_matrix,
    discrete_grade,
    grade,
    integrity_check,
    lesion_auc_table,
    log_residual,
    mixed_lesion_eval,
    per_image_miou,
    robustness_perturb,
    select_lesion_targets,
    style_adoption_check,
    train_grader,
)
from styleconv.probe import train_probe
from styleconv.segcore import ArchConfig, auc_pr, build_model, predict


@pytest.fixture(scope="module")
def untrained(small_corpora):
    models = {"fine": build_model(ArchConfig(3, 4), seed=0), "coarse": build_model(ArchConfig(3, 4), seed=1),
              "generalist": build_model(ArchConfig(3, 4), seed=2)}
    probe = train_probe(models["generalist"], small_corpora, "bottleneck")
    return models, probe


def test_matrix_cells_recompute_and_column_std(untrained, small_corpora):
    models, _ = untrained
    m = cross_matrix(models, small_corpora, specialists=["fine", "coarse"])
    assert m.cells.shape == (3, 2)
    for r in m.rows:
        for c in m.cols:
            assert abs(m.recompute(r, c) - m.cell(r, c)) <= 1e-9
    np.testing.assert_allclose(m.column_std(), np.std(m.cells[:2], axis=0), atol=1e-12)
    np.testing.assert_allclose(m.row_means(), m.cells.mean(1), atol=1e-12)
    again = cross_matrix(models, small_corpora, specialists=["fine", "coarse"])
    assert again.cells.tobytes() == m.cells.tobytes()
    table = m.table()
    assert table[-1]["model"] == "std(specialists)" and len(table) == 4


def test_style_adoption_report(untrained, small_corpora):
    models, _ = untrained
    report = style_adoption_check(models["generalist"], {"fine": models["fine"], "coarse": models["coarse"]},
                                  small_corpora)
    assert [r["corpus"] for r in report] == ["fine", "coarse"]
    for r in report:
        assert r["holds"] == (r["generalist"] >= r["specialist"])
        assert r["within_tolerance"] == (r["generalist"] >= r["specialist"] - 0.03)


def test_identity_perturbation_has_zero_drift(untrained, small_corpora):
    models, probe = untrained
    images = np.stack([s.image for s in small_corpora[0].split("test")])
    rows = robustness_perturb(models["generalist"], probe, images, kinds=("identity", "jpeg"))
    assert rows[0] == {"kind": "identity", "probe_flip_rate": 0.0, "seg_flip_rate": 0.0}
    assert 0 <= rows[1]["probe_flip_rate"] <= 1


def test_zero_step_attack_success_is_base_rate(untrained, small_corpora):
    models, probe = untrained
    images = np.stack([s.image for s in small_corpora[1].samples()])
    rows, timing = attack_success_table(models["generalist"], probe, images, [(5e-3, 0), (5e-3, 2)], [0])
    from styleconv.probe import probe_predict

    base = float((probe_predict(probe, models["generalist"], images).argmax(-1) == 0).mean())
    assert rows[0]["success_rate"] == base
    assert [r["N"] for r in rows] == [0, 2] and all(t["images_per_second"] > 0 for t in timing)


def test_zero_step_conversion_has_zero_gain(untrained, small_corpora):
    models, probe = untrained
    g = conversion_gain(models["generalist"], probe, small_corpora[0], 1, AttackConfig(target=1, steps=0))
    assert g["gain"] == 0.0 and g["before"] == g["after"]


def test_mixed_eval_without_conversion_is_plain_evaluation(untrained, small_corpora):
    models, probe = untrained
    model, corpus = models["generalist"], small_corpora[0]
    res = mixed_lesion_eval(model, probe, corpus, {c: NO_CONVERSION for c in LESION_CLASSES})
    samples = corpus.split("test")
    probs = predict(model, np.stack([s.image for s in samples]))
    gt = np.stack([s.mask for s in samples])
    for c in LESION_CLASSES:
        s = auc_pr(probs[..., c], gt, c)
        name = ["BG", "CWS", "EX", "HEM", "MA"][c]
        if s.defined:
            assert res["per_class"][name] == s.value
        else:
            assert np.isnan(res["per_class"][name])
    with pytest.raises(ValueError, match="lesion class"):
        mixed_lesion_eval(model, probe, corpus, {0: NO_CONVERSION})
    with pytest.raises(ValueError, match="unknown style"):
        mixed_lesion_eval(model, probe, corpus, {1: 9})


def test_target_selection_prefers_no_conversion_on_ties():
    table = {NO_CONVERSION: {1: 0.5, 2: 0.4, 3: np.nan, 4: 0.2},
             0: {1: 0.5, 2: 0.6, 3: 0.1, 4: 0.1},
             1: {1: 0.3, 2: 0.6, 3: 0.2, 4: 0.2}}
    assert select_lesion_targets(table) == {1: NO_CONVERSION, 2: 0, 3: 1, 4: NO_CONVERSION}


def test_lesion_auc_table_rows(untrained, small_corpora):
    models, probe = untrained
    table = lesion_auc_table(models["generalist"], probe, small_corpora[0].split("val"), [NO_CONVERSION, 1],
                             AttackConfig(target=1, steps=1))
    assert set(table) == {NO_CONVERSION, 1} and set(table[1]) == set(LESION_CLASSES)


def test_log_residual_formula_and_guard():
    x = np.array([0.5, 0.0, 1 / 255, 0.2])
    c = np.array([0.5 * np.sqrt(10), 0.3, 1 / 255, 0.001])
    out = log_residual(x, c)
    assert out[0] == pytest.approx(10.0)
    assert np.isnan(out[1]) and np.isnan(out[3])
    assert out[2] == 0.0


def test_discrete_grade_and_boundary_distance():
    np.testing.assert_array_equal(discrete_grade([0.2, 0.5, 1.49, 3.9, 9.0]), [0, 1, 1, 4, 4])

    class Fixed(torch.nn.Module):
        def forward(self, x):
            return x.mean(dim=(1, 2, 3)) * 10

    images = np.full((2, 4, 4, 3), 0.149, np.float32)
    images[1] = 0.05
    converted = images.copy()
    converted[0] = 0.151
    report = integrity_check(Fixed(), images, converted)
    assert report.flips == 1
    assert report.flip_boundary_distance == [pytest.approx(0.01, abs=1e-5)]
    same = integrity_check(Fixed(), images, images)
    assert same.mse == 0 and same.flips == 0


def test_grader_trains_and_scores(small_corpora):
    grader = train_grader(small_corpora, steps=30, seed=0)
    scores = grade(grader, np.stack([s.image for s in small_corpora[0].split("test")]))
    assert scores.shape == (len(small_corpora[0].split("test")),) and np.isfinite(scores).all()
    a = train_grader(small_corpora, steps=5, seed=1)
    b = train_grader(small_corpora, steps=5, seed=1)
    x = small_corpora[0].split("test")[0].image
    assert grade(a, x) == grade(b, x)


def test_per_image_miou_shape(small_corpora):
    gt = np.stack([s.mask for s in small_corpora[0].split("test")])
    assert (per_image_miou(gt, gt) == 1).all()
