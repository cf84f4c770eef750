import csv
import json

import numpy as np
import pytest

from compseg import cli, synthslide
from compseg.config import ConfigError
from compseg.mnist_seg import ChecksumMismatch, TRAIN_LABELS

TINY = """
seed = 0
condition = "complementary"
q = "mnist-q1"

[dataset]
n = 16
supervised_fraction = 0.25
eval_fraction = 0.5
data_dir = "{data}"

[model]
depth = 2
base_width = 4

[loss]
alpha = 1.0

[train]
batch_size = 8
max_epochs = 1
dtype = "float64"

[ablation]
conditions = ["baseline", "q1", "q2", "full"]
seeds = [0, 1, 2, 3, 4]
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY.format(data=tmp_path / "nodata"))
    return path


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_ablation_seeds_one_gives_four_runs(tiny_config, tmp_path):
    out = tmp_path / "abl"
    assert cli.main(["ablation", "--config", str(tiny_config), "--out", str(out), "--seeds", "1"]) == 0
    rows = read_rows(out / "ablation.csv")
    assert [r["condition"] for r in rows] == ["baseline", "q1", "q2", "full"]
    assert (out / "ablation.svg").read_text().startswith("<svg")
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["seeds"] == [0]
    assert all((out / a).exists() for a in manifest["artifacts"])
    assert not (out / "ablation_partial.csv").exists()


def test_ablation_single_condition_three_seeds(tiny_config, tmp_path):
    out = tmp_path / "abl"
    code = cli.main(["ablation", "--config", str(tiny_config), "--out", str(out), "--condition", "q1",
                     "--seeds", "3"])
    assert code == 0
    rows = read_rows(out / "ablation.csv")
    assert [(r["condition"], r["seed"]) for r in rows] == [("q1", "0"), ("q1", "1"), ("q1", "2")]


def test_ablation_rerun_is_byte_identical(tiny_config, tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert cli.cmd_ablation(tiny_config, out, seeds="2", conditions=["baseline", "q2"]) == 0
    for name in ("ablation.csv", "ablation_summary.csv", "ablation.svg", "run_manifest.json",
                 "runs/q2-seed1/epochs.csv", "runs/q2-seed1/summary.json", "runs/q2-seed1/model.ckpt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_ablation_bad_config_reports_field(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\ndepht = 2\n")
    assert cli.main(["ablation", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    with pytest.raises(ConfigError, match=r"model\.depht"):
        cli.cmd_ablation(bad, tmp_path / "o")


def test_report_regenerates_summary(tiny_config, tmp_path):
    out = tmp_path / "abl"
    cli.cmd_ablation(tiny_config, out, seeds="2", conditions=["q1"])
    rep = tmp_path / "rep"
    assert cli.main(["report", str(out), "--out", str(rep)]) == 0
    assert (rep / "ablation_summary.csv").read_bytes() == (out / "ablation_summary.csv").read_bytes()
    assert (rep / "ablation.svg").read_bytes() == (out / "ablation.svg").read_bytes()


def test_parse_seeds():
    assert cli.parse_seeds(None, [0, 1, 2, 3, 4], None) == [0, 1, 2, 3, 4]
    assert cli.parse_seeds("1", [0, 1, 2, 3, 4], None) == [0]
    assert cli.parse_seeds("3", [5, 6, 7, 8], None) == [5, 6, 7]
    assert cli.parse_seeds("2", [0], 10) == [10, 11]
    assert cli.parse_seeds("4,9", [0], None) == [4, 9]


def test_fetch_data_offline(tmp_path, capsys):
    assert cli.main(["fetch-data", "--offline", "--out", str(tmp_path / "m")]) == 0
    first = json.loads(capsys.readouterr().out)
    assert first["source"] == "synthetic"
    assert cli.main(["fetch-data", "--offline", "--out", str(tmp_path / "m")]) == 0
    assert json.loads(capsys.readouterr().out) == first


def test_fetch_data_uses_env_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("COMPSEG_DATA_DIR", str(tmp_path))
    cli.cmd_fetch_data(offline=True)
    assert (tmp_path / "mnist" / "manifest.json").exists()


def test_fetch_data_corrupted(tmp_path, capsys):
    cli.main(["fetch-data", "--offline", "--out", str(tmp_path)])
    (tmp_path / TRAIN_LABELS).write_bytes(b"garbage")
    with pytest.raises(ChecksumMismatch):
        cli.cmd_fetch_data(tmp_path, offline=True)
    assert cli.main(["fetch-data", "--offline", "--out", str(tmp_path)]) == 2
    assert "expected" in capsys.readouterr().err


@pytest.fixture
def corpus8(tmp_path):
    cases = synthslide.build_corpus({"test": 8}, seed=4, slide_size=64, slides_per_case=2)
    return cases, synthslide.save_corpus(cases, tmp_path / "corpus")


def oracle(slide):
    return slide.gt_mask


def test_eval_cases_perfect_oracle(corpus8, tmp_path):
    _, manifest = corpus8
    out = tmp_path / "eval"
    assert cli.cmd_eval_cases(None, manifest, out, segmenter=oracle) == 0
    rows = read_rows(out / "cases.csv")
    assert len(rows) == 8
    assert all(float(r["complementary_area_share"]) == 0.0 for r in rows)
    assert all(int(r["predicted_class"]) == int(r["diagnosis"]) for r in rows)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["balanced_accuracy"] == 1.0
    assert (summary["ci_low"], summary["ci_high"]) == (1.0, 1.0)
    assert len(list((out / "overlays").glob("*.png"))) == 16
    assert (out / "confusion.svg").exists()
    assert read_rows(out / "confusion.csv")[0] == {"diagnosis": "tumor-a", "pred_tumor-a": "4",
                                                   "pred_tumor-b": "0", "pred_none": "0"}


def test_eval_cases_missing_slide_continues(corpus8, tmp_path):
    cases, manifest = corpus8
    (manifest.parent / "slides" / f"{cases[2].slides[1].slide_id}.png").unlink()
    out = tmp_path / "eval"
    assert cli.cmd_eval_cases(None, manifest, out, segmenter=oracle) == 0
    rows = {r["case_id"]: r for r in read_rows(out / "cases.csv")}
    assert len(rows) == 8
    assert rows[cases[2].case_id]["missing_slides"] == "1"
    assert rows[cases[2].case_id]["n_slides"] == "1"


def test_eval_cases_with_checkpoint_is_deterministic(corpus8, tmp_path, monkeypatch):
    from compseg.model import ModelConfig, build_model, save_checkpoint

    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    _, manifest = corpus8
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(build_model(ModelConfig(in_channels=3, depth=2, base_width=4)), ckpt,
                    {"patch_size": 16, "stride": 2})
    outs = [tmp_path / "e1", tmp_path / "e2"]
    for out in outs:
        assert cli.main(["eval-cases", str(ckpt), str(manifest), "--out", str(out), "--resamples", "200"]) == 0
    for name in ("cases.csv", "confusion.csv", "summary.json", "confusion.svg", "run_manifest.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    # stride 2 leaves uncovered pixels, which stay out of the area denominators
    rows = read_rows(outs[0] / "cases.csv")
    assert all(0.0 <= float(r["complementary_area_share"]) <= 1.0 for r in rows)


def test_unevaluated_pixels_excluded_from_area(tmp_path):
    from compseg.evaluation import evaluate_cases

    cases = synthslide.build_corpus({"test": 2}, seed=1, slide_size=32)

    def half_wrong(slide):
        seg = np.full(slide.gt_mask.shape, 3)
        seg[:, :16] = 1 - slide.diagnosis
        return seg

    res = evaluate_cases(cases, half_wrong, n_resamples=50)
    assert all(r.complementary_area_share == 1.0 for r in res.rows)
    assert res.balanced_accuracy == 0.0


def test_build_corpus_and_train(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    cfg_path = tmp_path / "slides.toml"
    cfg_path.write_text(
        'condition = "complementary"\nq = "estimate"\n[dataset]\nkind = "synthslide"\nslide_size = 64\n'
        "patch_size = 16\nstride = 2\nannotated_cases = 2\ncomplementary_cases = 2\nvalidation_cases = 2\n"
        "test_cases = 2\n[model]\nbase_width = 4\n[train]\nmax_epochs = 1\n")
    assert cli.main(["build-corpus", "--config", str(cfg_path), "--out", str(tmp_path / "c")]) == 0
    assert len(read_rows(tmp_path / "c" / "manifest.csv")) == 8
    assert cli.main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "t"), "--seed", "3"]) == 0
    summary = json.loads((tmp_path / "t" / "summary.json").read_text())
    assert summary["config"]["seed"] == 3
    assert cli.main(["eval-cases", str(tmp_path / "t" / "model.ckpt"), str(tmp_path / "c" / "manifest.csv"),
                     "--out", str(tmp_path / "e"), "--resamples", "100"]) == 0
    assert len(read_rows(tmp_path / "e" / "cases.csv")) == 2
