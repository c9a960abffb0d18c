import json
from pathlib import Path

import pytest

from styleconv import __version__
from styleconv.cli import run

TRAIN = ["--stages", "2", "--base-width", "4", "--steps", "4", "--crop-size", "32", "--batch-size", "2",
         "--checkpoint-every", "2"]
ATTACK = ["--eps", "5e-3", "--steps", "2"]


def manifest(out: Path) -> dict:
    return json.loads((out / "manifest.json").read_text())


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    synth = ["synth", "--preset", "toy", "--n-scenes", "12", "--image-size", "32"]
    assert run(synth + ["--out", str(root / "data")]) == 0
    assert run(synth + ["--seed", "5", "--out", str(root / "grader")]) == 0
    corpora = [str(root / "data" / s / "manifest.json") for s in ("fine", "coarse")]
    assert run(["train", "--corpus", *corpora, *TRAIN, "--out", str(root / "model")]) == 0
    model = str(root / "model" / "model.safetensors")
    assert run(["train-probe", "--model", model, "--corpus", *corpora, "--tap", "enc_2",
                "--out", str(root / "probe")]) == 0
    image = sorted((root / "data" / "fine" / "test" / "images").glob("*.png"))[0]
    return {"root": root, "corpora": corpora, "model": model, "probe": str(root / "probe" / "probe.safetensors"),
            "image": str(image)}


def test_version_prints_provenance(capsys):
    assert run(["--version"]) == 0
    text = capsys.readouterr().out
    assert text.startswith(f"styleconv {__version__}") and "torch" in text


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["synth", "--no-such-flag"], ["train", "--steps", "x"]])
def test_usage_errors_exit_2(argv, capsys):
    assert run(argv) == 2


def test_missing_probe_is_a_failed_precondition(ws, tmp_path, capsys):
    code = run(["convert", "--model", ws["model"], "--image", ws["image"], "--target", "coarse",
                "--out", str(tmp_path)])
    assert code == 1
    assert "probe required" in capsys.readouterr().err
    code = run(["convert", "--model", ws["model"], "--probe", str(tmp_path / "nope.safetensors"),
                "--image", ws["image"], "--target", "coarse", "--out", str(tmp_path)])
    assert code == 1


def test_unknown_target_and_missing_corpus_exit_1(ws, tmp_path, capsys):
    base = ["convert", "--model", ws["model"], "--probe", ws["probe"], "--image", ws["image"], "--out", str(tmp_path)]
    assert run(base + ["--target", "external"]) == 1
    assert run(["characterize", "--corpus", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_synth_rerun_has_identical_hashes(tmp_path):
    argv = ["synth", "--preset", "toy", "--n-scenes", "6", "--image-size", "32"]
    assert run(argv + ["--out", str(tmp_path / "a")]) == 0
    assert run(argv + ["--out", str(tmp_path / "b")]) == 0
    a, b = manifest(tmp_path / "a"), manifest(tmp_path / "b")
    assert a["artifacts"] == b["artifacts"] and len(a["artifacts"]) > 10
    assert a["seed"] == 0 and a["command"] == "synth" and "torch" in a["environment"]


def test_config_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_scenes": 6, "image_size": 32, "seed": 3}))
    assert run(["synth", "--preset", "toy", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "o")]) == 0
    m = manifest(tmp_path / "o")
    assert m["config"]["n_scenes"] == 6 and m["seed"] == 4 and m["config"]["split_fractions"] == [0.7, 0.15, 0.15]
    # a manifest replays its own resolved config
    assert run(["synth", "--config", str(tmp_path / "o" / "manifest.json"), "--out", str(tmp_path / "r")]) == 0
    assert manifest(tmp_path / "r")["artifacts"] == m["artifacts"]
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(["synth", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 1


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("STYLECONV_OUT", str(tmp_path / "env"))
    assert run(["synth", "--preset", "toy", "--n-scenes", "6", "--image-size", "32"]) == 0
    assert (tmp_path / "env" / "synth" / "manifest.json").is_file()
    assert run(["synth", "--preset", "toy", "--n-scenes", "6", "--image-size", "32",
                "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "manifest.json").is_file()


def _digest(paths):
    from styleconv.artifacts import sha256_file

    return {str(p): sha256_file(p) for p in paths}


def test_every_command_runs_and_leaves_inputs_untouched(ws):
    root, corpora, mp = ws["root"], ws["corpora"], ["--model", ws["model"], "--probe", ws["probe"]]
    inputs = sorted((root / "data").rglob("*")) + [Path(ws["model"]), Path(ws["probe"])]
    inputs = [p for p in inputs if p.is_file()]
    before = _digest(inputs)
    fine, coarse = corpora
    out = lambda name: ["--out", str(root / name)]  # noqa: E731
    commands = [
        ["characterize", "--corpus", *corpora, *out("stats")],
        ["probe-sweep", "--model", ws["model"], "--corpus", *corpora, *out("sweep")],
        ["attack-table", *mp, "--corpus", *corpora, "--settings", "5e-3:1,5e-3:2", *out("attack")],
        ["convert", *mp, "--image", ws["image"], "--target", "coarse", *ATTACK, *out("convert")],
        ["interpolate", *mp, "--image", ws["image"], "--target", "coarse", "--alphas", "3", *ATTACK, *out("interp")],
        ["interpolate", *mp, "--image", ws["image"], "--target", "coarse", "--source", "fine", "--mode",
         "loss_space", "--alphas", "0,1", *ATTACK, *out("interp_loss")],
        ["uncertainty", *mp, "--image", ws["image"], "--target", "coarse", "--samples", "3", *ATTACK, *out("unc")],
        ["eval-matrix", "--model", f"gen={ws['model']}", "--corpus", *corpora, *out("matrix")],
        ["distill-gain", *mp, "--corpus", fine, "--target", "fine", *ATTACK, *out("gain")],
        ["mixed-eval", *mp, "--val-corpus", fine, "--corpus", coarse, *ATTACK, *out("mixed")],
        ["integrity", *mp, "--corpus", fine, "--grader-corpus", str(root / "grader" / "fine"),
         "--target", "coarse", "--grader-steps", "3", *ATTACK, *out("integrity")],
        ["robustness", *mp, "--corpus", *corpora, *out("robust")],
    ]
    for argv in commands:
        assert run(argv) == 0, argv
        m = manifest(Path(argv[-1]))
        assert m["artifacts"], argv
    assert "timing.json" in manifest(root / "attack")["unhashed"]
    assert "timing.json" not in manifest(root / "attack")["artifacts"]
    assert _digest(inputs) == before


def test_integrity_rejects_overlapping_grader_data(ws, tmp_path):
    fine = ws["corpora"][0]
    argv = ["integrity", "--model", ws["model"], "--probe", ws["probe"], "--corpus", fine, "--split", "train",
            "--grader-corpus", fine, "--target", "coarse", "--out", str(tmp_path)]
    assert run(argv) == 1


def test_train_is_reproducible(ws, tmp_path):
    argv = ["train", "--corpus", *ws["corpora"], *TRAIN, "--out", str(tmp_path)]
    assert run(argv) == 0
    assert manifest(tmp_path)["artifacts"] == manifest(ws["root"] / "model")["artifacts"]
