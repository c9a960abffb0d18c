import itertools

import numpy as np
import pytest
import torch

from oracles import brute_force_auc_pr, naive_miou
from styleconv.corpus import Corpus, Sample, StyleSpec
from styleconv.segcore import (
    PAPER_TRAIN_CONFIG,
    ArchConfig,
    TrainConfig,
    TrainingDiverged,
    auc_pr,
    batch_indices,
    build_model,
    dice_loss,
    load_checkpoint,
    mean_miou,
    miou,
    predict,
    save_checkpoint,
    train,
    weights_checksum,
)

TINY = ArchConfig(stages=2, base_width=1, norm=False)  # under 1k parameters


def test_paper_training_constants():
    assert PAPER_TRAIN_CONFIG.label_smoothing == 0.4
    assert PAPER_TRAIN_CONFIG.learning_rate == 3e-3
    assert PAPER_TRAIN_CONFIG.weight_decay == 1e-5
    assert PAPER_TRAIN_CONFIG.crop_size == 512


def test_tap_registry_and_shapes():
    model = build_model(ArchConfig(stages=4, base_width=16))
    assert model.taps == ["enc_1", "enc_2", "enc_3", "enc_4", "bottleneck", "dec_1", "dec_2", "dec_3", "dec_4"]
    x = torch.rand(1, 3, 64, 64)
    feats = model.features(x, model.taps)
    for tap, f in feats.items():
        assert f.shape[1] == model.tap_width(tap)
        assert f.shape[2] == 64 // model.tap_factor(tap)
    assert model.n_parameters() > 0


def test_forward_is_a_distribution():
    model = build_model(ArchConfig(stages=4, base_width=16))
    probs = predict(model, np.random.default_rng(0).random((64, 64, 3), dtype=np.float32))
    assert probs.shape == (64, 64, 5)
    assert (probs >= 0).all() and (probs <= 1).all()
    np.testing.assert_allclose(probs.sum(-1), 1, atol=1e-5)


def test_same_seed_same_weights():
    assert weights_checksum(build_model(seed=4)) == weights_checksum(build_model(seed=4))
    assert weights_checksum(build_model(seed=4)) != weights_checksum(build_model(seed=5))


def test_bad_configs_rejected():
    with pytest.raises(ValueError, match="stages"):
        build_model(ArchConfig(stages=1))
    with pytest.raises(ValueError):
        build_model(ArchConfig(base_width=0))


def test_predict_rejects_bad_size_and_is_deterministic():
    model = build_model(ArchConfig(stages=3, base_width=4))
    with pytest.raises(ValueError, match="multiple of 8"):
        predict(model, np.zeros((20, 24, 3), np.float32))
    x = np.random.default_rng(1).random((2, 32, 32, 3), dtype=np.float32)
    np.testing.assert_array_equal(predict(model, x), predict(model, x))


def test_untrained_models_are_near_uniform():
    x = np.random.default_rng(2).random((2, 64, 64, 3), dtype=np.float32)
    for seed in range(5):
        probs = predict(build_model(seed=seed), x)
        assert np.abs(probs - 0.2).mean() < 0.2


# ---------------------------------------------------------------------------
# metrics


def test_miou_examples():
    pred = np.array([[1, 1], [0, 0]])
    gt = np.array([[1, 0], [0, 0]])
    s = miou(pred, gt, classes=(0, 1))
    assert s.per_class == {0: pytest.approx(2 / 3), 1: pytest.approx(1 / 2)}
    assert s.value == pytest.approx(7 / 12)
    assert miou(gt, gt, (0, 1)).value == 1.0
    assert miou(np.zeros((3, 3)), np.ones((3, 3)), (0, 1)).value == 0.0


def test_miou_exhaustive_and_symmetric():
    masks = [np.array(bits).reshape(2, 2) for bits in itertools.product((0, 1), repeat=4)]
    for a, b in itertools.product(masks, masks):
        s = miou(a, b, (0, 1)).value
        assert s == naive_miou(a, b, (0, 1))
        assert s == miou(b, a, (0, 1)).value


def test_miou_skips_absent_classes_and_flags_empty():
    a = np.array([[0, 3]])
    assert set(miou(a, a).per_class) == {0, 3}
    assert not miou(a, a, classes=(4,)).defined


def test_auc_pr_examples():
    gt = np.array([1, 0, 1, 0])
    assert auc_pr(gt.astype(float), gt, 1).value == 1.0
    scores = np.array([0.9, 0.8, 0.3, 0.1])
    assert auc_pr(scores, gt, 1).value == pytest.approx(brute_force_auc_pr(scores, gt == 1), abs=1e-12)
    # constant scores: precision equals the positive rate everywhere
    assert auc_pr(np.full(10, 0.5), np.r_[np.ones(3), np.zeros(7)], 1).value == pytest.approx(0.3)


def test_auc_pr_reads_class_channel_and_flags_no_positives():
    gt = np.array([[2, 0], [2, 1]])
    probs = np.zeros((2, 2, 5))
    probs[..., 2] = [[0.9, 0.1], [0.7, 0.2]]
    assert auc_pr(probs, gt, 2).value == 1.0
    assert not auc_pr(probs, gt, 4).defined


@pytest.mark.parametrize("seed", range(10))
def test_auc_pr_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = rng.integers(2, 17)
    scores = np.round(rng.random(n), 1)  # rounding forces ties
    gt = rng.random(n) < 0.4
    gt[0] = True
    assert auc_pr(scores, gt.astype(int), 1).value == pytest.approx(brute_force_auc_pr(scores, gt), abs=1e-9)


# ---------------------------------------------------------------------------
# loss and training


def test_dice_loss_zero_only_for_perfect_prediction():
    target = torch.tensor([[[0, 1], [2, 2]]])
    perfect = torch.nn.functional.one_hot(target, 5).permute(0, 3, 1, 2).double()
    assert dice_loss(perfect, target).item() == 0.0
    imperfect = perfect.clone()
    imperfect[0, :, 0, 0] = torch.tensor([0.9, 0.1, 0, 0, 0])
    assert dice_loss(imperfect, target).item() > 0
    assert dice_loss(perfect, target, smoothing=0.4).item() > 0


def test_loss_input_gradient_matches_finite_differences():
    model = build_model(TINY, seed=0, dtype=torch.float64)
    assert model.n_parameters() <= 1000
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0), requires_grad=True)
    target = torch.randint(0, 5, (1, 8, 8), generator=torch.Generator().manual_seed(1))
    (g,) = torch.autograd.grad(dice_loss(model(x), target), x)
    rng = np.random.default_rng(0)
    h = 1e-5
    for _ in range(8):
        idx = tuple(int(rng.integers(0, s)) for s in x.shape)
        xp, xm = x.detach().clone(), x.detach().clone()
        xp[idx] += h
        xm[idx] -= h
        fd = (dice_loss(model(xp), target) - dice_loss(model(xm), target)).item() / (2 * h)
        assert abs(fd - g[idx].item()) <= 1e-4 * max(abs(fd), 1e-8)


def test_batch_composition_follows_corpus_sizes():
    idx = batch_indices([10, 30], batch_size=8, n_batches=2000, seed=0)
    n = idx.size
    frac = (idx < 10).mean()
    assert abs(frac - 0.25) <= 3 * np.sqrt(0.25 * 0.75 / n)


def _corpus(n_train, seed=0, size=32):
    rng = np.random.default_rng(seed)

    def sample(i):
        img = rng.random((size, size, 3)).astype(np.float32) * 0.2
        mask = np.zeros((size, size), np.uint8)
        y, x = rng.integers(4, size - 8, size=2)
        mask[y:y + 5, x:x + 5] = 3
        img[mask == 3] = [0.9, 0.1, 0.1]
        return Sample(img, mask, 0, f"s{i}")

    return Corpus(0, StyleSpec("toy"), {"train": [sample(i) for i in range(n_train)],
                                        "val": [sample(100 + i) for i in range(2)]})


def test_overfit_single_image():
    model = build_model(ArchConfig(stages=2, base_width=4), seed=0)
    cfg = TrainConfig(max_steps=200, checkpoint_every=50, crop_size=32, batch_size=2, augmentation="none")
    tm = train(model, [_corpus(1)], cfg)
    losses = [h["loss"] for h in tm.provenance["history"]]
    assert losses[-1] < tm.provenance["initial_loss"]


def test_checkpoint_selection_is_reproducible(tmp_path):
    model = build_model(ArchConfig(stages=2, base_width=4), seed=0)
    corpus = _corpus(4)
    cfg = TrainConfig(max_steps=60, checkpoint_every=20, crop_size=16, batch_size=2)
    tm = train(model, [corpus], cfg, checkpoint_dir=tmp_path)
    history = tm.provenance["history"]
    assert tm.val_score == max(h["val_miou"] for h in history)
    assert mean_miou(tm.model, corpus.split("val")) == tm.val_score
    assert len(list(tmp_path.glob("*.safetensors"))) == 3


def test_training_is_deterministic():
    cfg = TrainConfig(max_steps=20, checkpoint_every=10, crop_size=16, batch_size=2)
    a = train(build_model(ArchConfig(2, 4), seed=1), [_corpus(3)], cfg)
    b = train(build_model(ArchConfig(2, 4), seed=1), [_corpus(3)], cfg)
    assert weights_checksum(a.model) == weights_checksum(b.model)


@pytest.mark.parametrize("kind", ["gaussian", "sign"])
def test_noise_and_cosine_training_is_deterministic(kind):
    cfg = TrainConfig(max_steps=20, checkpoint_every=10, crop_size=16, batch_size=2, input_noise=0.02,
                      noise_kind=kind, lr_schedule="cosine")
    a = train(build_model(ArchConfig(2, 4), seed=1), [_corpus(3)], cfg)
    b = train(build_model(ArchConfig(2, 4), seed=1), [_corpus(3)], cfg)
    assert weights_checksum(a.model) == weights_checksum(b.model)
    plain = train(build_model(ArchConfig(2, 4), seed=1), [_corpus(3)], TrainConfig(
        max_steps=20, checkpoint_every=10, crop_size=16, batch_size=2))
    assert weights_checksum(a.model) != weights_checksum(plain.model)


@pytest.mark.parametrize("bad", [{"noise_kind": "uniform"}, {"lr_schedule": "step"}, {"input_noise": -0.1}])
def test_train_config_rejects_bad_options(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad).validate()


def test_training_rejects_empty_split_and_reports_divergence():
    corpus = _corpus(2)
    empty = Corpus(0, StyleSpec("e"), {"train": corpus.split("train"), "val": []})
    cfg = TrainConfig(max_steps=5, checkpoint_every=5, crop_size=16, batch_size=2)
    with pytest.raises(ValueError, match="empty"):
        train(build_model(ArchConfig(2, 4)), [empty], cfg)
    model = build_model(ArchConfig(2, 4))
    with torch.no_grad():
        model.head.bias.fill_(float("nan"))
    with pytest.raises(TrainingDiverged) as err:
        train(model, [corpus], cfg)
    assert err.value.step == 1


def test_checkpoint_round_trip(tmp_path):
    model = build_model(ArchConfig(3, 4), seed=2)
    path = save_checkpoint(model, tmp_path / "m.safetensors", provenance={"step": 7})
    loaded, prov = load_checkpoint(path)
    assert prov == {"step": 7}
    assert weights_checksum(loaded) == weights_checksum(model)
    raw = path.read_bytes()
    header_len = int.from_bytes(raw[:8], "little")
    assert b'"F32"' in raw[8:8 + header_len]
