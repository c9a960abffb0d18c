import os
import sys
import time
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

from styleconv.corpus import CorpusSpec, Marker, StyleSpec, generate_corpus  # noqa: E402
from styleconv.experiments import ModelStore, get_preset, train_family  # noqa: E402
from styleconv.probe import best_tap, placement_sweep  # noqa: E402

FINE = StyleSpec("fine", marker=Marker(0.02, 8, 0))
COARSE = StyleSpec("coarse", "coarse", dilation_radius=3, merge_distance=6.0, marker=Marker(0.02, 8, 90))


@pytest.fixture(scope="session")
def small_corpora():
    return generate_corpus(CorpusSpec(12, 64, (FINE, COARSE), seed=3))


SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def desk():
    return get_preset("desk")


@pytest.fixture(scope="session")
def store(tmp_path_factory):
    # STYLECONV_TEST_CACHE keeps trained checkpoints between sessions; keys hash the full preset and seed
    root = os.environ.get("STYLECONV_TEST_CACHE")
    return ModelStore(Path(root) if root else tmp_path_factory.mktemp("models"))


@pytest.fixture(scope="session")
def families(desk, store):
    """Per seed (desk preset): training corpora, the trained family and the CPU time it took."""
    out = {}
    for seed in SEEDS:
        start = time.process_time()
        corpora = generate_corpus(desk.corpus_spec(seed))
        fam = train_family(desk, seed, corpora, store)
        out[seed] = {"corpora": corpora, "family": fam, "cpu_s": time.process_time() - start}
    return out


@pytest.fixture(scope="session")
def heldout(desk):
    return {seed: {c.style.name: c for c in generate_corpus(desk.heldout_spec(seed))} for seed in SEEDS}


@pytest.fixture(scope="session")
def sweeps(desk, families):
    out = {}
    for seed, f in families.items():
        rows, probes = placement_sweep(f["family"]["generalist"].model, f["corpora"], desk.taps())
        out[seed] = {"rows": rows, "probes": probes, "best": best_tap(rows)}
    return out


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
