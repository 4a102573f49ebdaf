import json
import os

import numpy as np
import pytest

from vitdeit.cli import build_parser, run
from vitdeit.data import SUBCLASSES, load_manifest
from vitdeit.ensemble import read_probs

SUBCOMMANDS = ("synth", "balance", "split", "train", "eval", "ensemble", "report", "attention")


def cli(*argv):
    code = run([str(a) for a in argv])
    assert code == 0, f"{argv} exited {code}"


@pytest.mark.parametrize("name", SUBCOMMANDS)
def test_help_documents_every_flag(name, capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([name, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[name]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text


def test_usage_and_domain_exit_codes(tmp_path, capsys):
    assert run(["synth", "--out", str(tmp_path), "--bogus"]) == 2
    assert run(["nosuchcommand"]) == 2
    assert run(["balance", "--manifest", str(tmp_path / "missing.txt"), "--out", str(tmp_path / "b.txt")]) == 1
    assert "error[" in capsys.readouterr().err
    (tmp_path / "m.txt").write_text("a|x.ppm|A|40\n")
    assert run(["split", "--manifest", str(tmp_path / "m.txt"), "--out", str(tmp_path / "s.txt")]) == 1
    assert "error[parse]" in capsys.readouterr().err


def read_bytes(directory):
    out = {}
    for root, _, files in os.walk(directory):
        for name in files:
            path = os.path.join(root, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, directory)] = fh.read()
    return out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> balance -> split -> train x2 -> ensemble -> report, tiny settings."""
    d = tmp_path_factory.mktemp("pipeline")
    cli("synth", "--out", d / "data", "--per-class", 3, "--image-size", 8, "--seed", 7,
        "--magnifications", "40,100")
    cli("balance", "--manifest", d / "data/manifest.txt", "--scope", "dependent", "--out", d / "bal.txt")
    cli("split", "--manifest", d / "bal.txt", "--stratify", "subclass-magnification",
        "--out", d / "split.txt", "--seed", 7)
    (d / "cfg.txt").write_text("image_size = 8\nembed_dim = 8\nmlp_hidden_dim = 8\n"
                               "num_blocks = 1\nepochs = 2\nbatch_size = 8\n")
    cli("train", "--manifest", d / "bal.txt", "--split", d / "split.txt", "--config", d / "cfg.txt",
        "--out", d / "vit", "--seed", 7)
    cli("train", "--manifest", d / "bal.txt", "--split", d / "split.txt", "--config", d / "cfg.txt",
        "--arch", "deit", "--teacher", d / "vit/model.ckpt", "--out", d / "deit", "--seed", 7)
    cli("ensemble", "--checkpoints", d / "vit/model.ckpt", d / "deit/model.ckpt",
        "--manifest", d / "bal.txt", "--split", d / "split.txt", "--out", d / "ens")
    cli("report", "--probs", d / "ens/probs.csv", "--manifest", d / "bal.txt", "--out", d / "rep")
    return d


def test_pipeline_report_matches_probability_file(pipeline):
    manifest = load_manifest(pipeline / "bal.txt")
    table = read_probs(pipeline / "ens/probs.csv")
    assert set(table) == {"vit", "deit", "ensemble"}
    for model_id, per in table.items():
        report = json.loads((pipeline / f"rep/report_{model_id}.json").read_text())
        hits = [int(np.argmax(p) == SUBCLASSES.index(manifest[s].subclass)) for s, p in per.items()]
        assert report["accuracy"] == pytest.approx(np.mean(hits), abs=1e-12)
        assert report["num_samples"] == len(per) == 16
    for sid, probs in table["ensemble"].items():
        np.testing.assert_allclose(probs, (table["vit"][sid] + table["deit"][sid]) / 2, atol=1e-15)


def test_ensemble_from_agreeing_probability_file(tmp_path):
    rows = []
    rng = np.random.default_rng(0)
    for i in range(6):
        p = rng.dirichlet(np.ones(8))
        rows += [f"s{i},m1,{','.join(map(repr, p.tolist()))}", f"s{i},m2,{','.join(map(repr, p.tolist()))}"]
    (tmp_path / "p.csv").write_text("\n".join(rows) + "\n")
    cli("ensemble", "--probs", tmp_path / "p.csv", "--out", tmp_path / "out")
    table = read_probs(tmp_path / "p.csv")
    for line in (tmp_path / "out/predictions.csv").read_text().splitlines():
        sid, idx, label, tie = line.split(",")
        assert int(idx) == int(np.argmax(table["m1"][sid])) and label == SUBCLASSES[int(idx)]


def test_synth_twice_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        cli("synth", "--out", tmp_path / name, "--per-class", 2, "--image-size", 8, "--seed", 7)
    assert read_bytes(tmp_path / "a") == read_bytes(tmp_path / "b")


def test_stages_rerun_identically(pipeline, tmp_path):
    d = pipeline
    cli("train", "--manifest", d / "bal.txt", "--split", d / "split.txt", "--config", d / "cfg.txt",
        "--out", tmp_path / "vit", "--seed", 7)
    assert read_bytes(tmp_path / "vit") == read_bytes(d / "vit")
    cli("report", "--probs", d / "ens/probs.csv", "--manifest", d / "bal.txt", "--out", tmp_path / "rep")
    assert read_bytes(tmp_path / "rep") == read_bytes(d / "rep")
    cli("split", "--manifest", d / "bal.txt", "--stratify", "subclass-magnification",
        "--out", tmp_path / "split.txt", "--seed", 7)
    assert (tmp_path / "split.txt").read_bytes() == (d / "split.txt").read_bytes()


def test_eval_and_attention(pipeline, capsys):
    d = pipeline
    cli("eval", "--manifest", d / "bal.txt", "--split", d / "split.txt",
        "--checkpoint", d / "deit/model.ckpt", "--out", d / "ev")
    printed = capsys.readouterr().out.split()
    assert all(os.path.exists(p) for p in printed) and len(printed) == 4
    image = next(iter((d / "data/images").iterdir()))
    cli("attention", "--checkpoint", d / "vit/model.ckpt", "--image", image, "--method", "rollout",
        "--out", d / "att")
    grid = np.loadtxt(next(p for p in (d / "att").iterdir() if p.suffix == ".txt"))
    assert grid.shape == (2, 2) and grid.min() >= 0 and grid.max() <= 1


def test_fine_tune_via_cli(pipeline):
    d = pipeline
    cli("train", "--manifest", d / "bal.txt", "--split", d / "split.txt", "--config", d / "cfg.txt",
        "--init", d / "vit/model.ckpt", "--freeze-backbone", "--epochs", 1, "--out", d / "ft")
    assert (d / "ft/model.ckpt").exists()


def test_report_by_magnification_partitions_samples(pipeline, tmp_path):
    d = pipeline
    cli("report", "--probs", d / "ens/probs.csv", "--manifest", d / "bal.txt", "--model-id", "vit",
        "--by-magnification", "--out", tmp_path)
    parts = [json.loads((tmp_path / f"report_vit_{m}X.json").read_text()) for m in (40, 100)]
    whole = json.loads((tmp_path / "report_vit.json").read_text())
    assert sum(p["num_samples"] for p in parts) == whole["num_samples"]
    hits = sum(p["accuracy"] * p["num_samples"] for p in parts)
    assert hits == pytest.approx(whole["accuracy"] * whole["num_samples"], abs=1e-9)
