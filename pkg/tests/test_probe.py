import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog
from scipy.special import softmax

from oracles import naive_pool
from stubs import IdentityEncoder, linear_probe
from styleconv.corpus import Corpus, Sample, StyleSpec
from styleconv.probe import (
    ProbeConfig,
    ProbeTap,
    best_tap,
    extract_features,
    fit_logistic,
    load_probe,
    placement_sweep,
    probe_accuracy,
    probe_predict,
    save_probe,
    train_probe,
    write_sweep,
)
from styleconv.segcore import ArchConfig, build_model, to_batch, weights_checksum


def separable(X, y):
    """Feasibility LP: exists (w, b) with (2y - 1)(w . x + b) >= 1 for every row."""
    s = 2 * np.asarray(y) - 1
    A = -s[:, None] * np.c_[X, np.ones(len(X))]
    res = linprog(np.zeros(X.shape[1] + 1), A_ub=A, b_ub=-np.ones(len(X)), bounds=(None, None))
    return res.status == 0


def test_probe_tap_width_matches_model():
    model = build_model(ArchConfig(stages=3, base_width=4))
    for tap in model.taps:
        t = ProbeTap.of(model, tap)
        assert t.width == model.tap_width(tap)
        assert extract_features(model, np.zeros((16, 16, 3), np.float32), tap).shape == (t.width,)


def test_features_are_channel_means():
    model = build_model(ArchConfig(stages=3, base_width=4), seed=1)
    x = np.random.default_rng(0).random((16, 16, 3), dtype=np.float32)
    with torch.no_grad():
        fmap = model.features(to_batch(x)[0], ["enc_2"])["enc_2"][0].numpy()
    np.testing.assert_allclose(extract_features(model, x, "enc_2"), naive_pool(fmap), rtol=1e-5, atol=1e-6)
    np.testing.assert_array_equal(extract_features(model, x, "enc_2"), extract_features(model, x, "enc_2"))


def test_unknown_tap_rejected():
    model = build_model(ArchConfig(stages=2, base_width=4))
    with pytest.raises(KeyError, match="unknown tap"):
        extract_features(model, np.zeros((8, 8, 3), np.float32), "enc_9")


def test_softmax_example():
    probe = linear_probe(np.zeros((3, 2)), [2.0, 0.0])
    p = probe_predict(probe, IdentityEncoder(), np.zeros((4, 4, 3)))
    np.testing.assert_allclose(p, [np.e**2 / (np.e**2 + 1), 1 / (np.e**2 + 1)], rtol=1e-12)
    assert p[0] == pytest.approx(0.881, abs=5e-4)


def test_separable_styles_reach_full_train_accuracy(small_corpora):
    model = build_model(ArchConfig(stages=3, base_width=8), seed=0)
    before = weights_checksum(model)
    probe = train_probe(model, small_corpora, "bottleneck")
    assert weights_checksum(model) == before
    X = np.concatenate([extract_features(model, np.stack([s.image for s in c.split("train")]), "bottleneck")
                        for c in small_corpora])
    y = np.concatenate([[k] * len(c.split("train")) for k, c in enumerate(small_corpora)])
    assert separable(X, y)
    assert probe.provenance["train_accuracy"] == 1.0
    assert probe.provenance["origin_names"] == ["fine", "coarse"]


def test_probe_needs_two_corpora(small_corpora):
    model = build_model(ArchConfig(stages=2, base_width=4))
    with pytest.raises(ValueError, match="two"):
        train_probe(model, small_corpora[:1], "bottleneck")


def _noise_corpus(origin, n, seed):
    rng = np.random.default_rng(seed)
    samples = [Sample(rng.random((8, 8, 3)).astype(np.float32), np.zeros((8, 8), np.uint8), origin, f"{origin}-{i}")
               for i in range(n)]
    return Corpus(origin, StyleSpec(f"s{origin}"), {"train": samples[: n // 2], "val": samples[n // 2:]})


def test_shuffled_origins_give_chance_accuracy():
    """Origins carry no signal, so held-out accuracy is consistent with coin flips."""
    corpora = [_noise_corpus(0, 120, 1), _noise_corpus(1, 120, 2)]
    probe = train_probe(IdentityEncoder(), corpora, "id")
    correct, total = probe_accuracy(probe, IdentityEncoder(), corpora)
    assert abs(correct / total - 0.5) < 3 * np.sqrt(0.25 / total)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_logits_are_affine(seed, a):
    rng = np.random.default_rng(seed)
    probe = linear_probe(rng.normal(size=(6, 3)), rng.normal(size=3))
    f1, f2 = rng.normal(size=6), rng.normal(size=6)
    np.testing.assert_allclose(probe.logits(a * f1 + (1 - a) * f2),
                               a * probe.logits(f1) + (1 - a) * probe.logits(f2), atol=1e-9)


def test_fit_logistic_matches_gradient_condition():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(80, 4))
    y = (X[:, 0] + 0.5 * rng.normal(size=80) > 0).astype(int)
    cfg = ProbeConfig(l2=1e-2, tol=1e-10)
    W, b, info = fit_logistic(X, y, 2, cfg)
    assert info["converged"]
    # stationarity of the standardised objective, checked through the raw parameters
    sd = X.std(0)
    P = softmax(X @ W + b, axis=1)
    R = (P - np.eye(2)[y]) / len(y)
    Wz = W * sd[:, None]
    grad_w = ((X - X.mean(0)) / sd).T @ R + cfg.l2 * Wz
    assert np.abs(grad_w).max() < 1e-6
    assert np.abs(R.sum(0)).max() < 1e-6


def test_placement_sweep_and_outputs(small_corpora, tmp_path):
    model = build_model(ArchConfig(stages=3, base_width=8), seed=0)
    with pytest.raises(ValueError):
        placement_sweep(model, small_corpora, ["enc_1"])
    rows, probes = placement_sweep(model, small_corpora, ["enc_1", "enc_3", "dec_1"])
    assert [r["tap"] for r in rows] == ["enc_1", "enc_3", "dec_1"]
    assert all(r["f"] == model.tap_width(r["tap"]) and 0 <= r["accuracy"] <= 1 for r in rows)
    csv_path, png = write_sweep(rows, tmp_path)
    assert csv_path.read_text().splitlines()[0] == "tap,depth,f,accuracy,val_log_loss"
    assert png.stat().st_size > 0
    path = save_probe(probes["enc_3"], tmp_path / "p.safetensors")
    loaded = load_probe(path)
    np.testing.assert_array_equal(loaded.weights, probes["enc_3"].weights.astype(np.float32).astype(np.float64))
    assert loaded.tap == "enc_3" and loaded.origins == [0, 1]


def test_best_tap_prefers_accuracy_then_log_loss():
    rows = [{"tap": "a", "accuracy": 0.9, "val_log_loss": 0.01},
            {"tap": "b", "accuracy": 1.0, "val_log_loss": 0.2},
            {"tap": "c", "accuracy": 1.0, "val_log_loss": 0.1},
            {"tap": "d", "accuracy": 1.0, "val_log_loss": 0.1}]
    assert best_tap(rows) == "c"
