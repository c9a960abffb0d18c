"""Qualitative conversion examples on the seeded desk-preset models shared with the acceptance run."""
import numpy as np
import pytest

from conftest import SEEDS
from styleconv.attack import AttackConfig, convert, pgd_attack
from styleconv.experiments import FINE
from styleconv.harness import NO_CONVERSION, conversion_gain, lesion_auc_table, mixed_lesion_eval, select_lesion_targets
from styleconv.segcore import predict_labels


@pytest.fixture(params=SEEDS)
def run(request, families, sweeps, heldout):
    seed = request.param
    model = families[seed]["family"]["generalist"].model
    probe = sweeps[seed]["probes"][sweeps[seed]["best"]]
    return model, probe, families[seed]["corpora"], heldout[seed]


def test_fine_to_coarse_increases_predicted_area(run):
    model, probe, _, heldout = run
    x = np.stack([s.image for s in heldout[FINE].samples()])
    before = (predict_labels(model, x) > 0).sum()
    after = (predict_labels(model, pgd_attack(model, probe, x, AttackConfig(target=1)).converted) > 0).sum()
    assert after > before


def test_conversion_toward_own_origin_changes_little(run):
    model, probe, corpora, _ = run
    for origin, corpus in enumerate(corpora):
        x = np.stack([s.image for s in corpus.split("test")])
        converted, _, res = convert(model, probe, x, origin)
        assert res.success.mean() == 1.0
        flips = (predict_labels(model, converted) != predict_labels(model, x)).mean()
        assert flips < 0.05


def test_noop_conversion_gain_is_small(run):
    model, probe, corpora, _ = run
    for origin, corpus in enumerate(corpora):
        assert abs(conversion_gain(model, probe, corpus, origin)["gain"]) <= 0.02


def test_mixed_eval_does_not_lose_to_no_conversion(run):
    model, probe, corpora, _ = run
    options = [NO_CONVERSION] + list(probe.origins)
    targets = select_lesion_targets(lesion_auc_table(model, probe, corpora[0].split("val"), options))
    mixed = mixed_lesion_eval(model, probe, corpora[0], targets)
    plain = mixed_lesion_eval(model, probe, corpora[0], {c: NO_CONVERSION for c in targets})
    assert mixed["mean"] >= plain["mean"]
