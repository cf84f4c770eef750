"""Acceptance checks 1-10.

Each test prints one ``[criterion N] PASS|FAIL ...`` line and then asserts.
Criteria 1 and 2 share one full ablation run (20 trainings); on a single
CPU core that takes roughly 26 minutes.
"""

import dataclasses
import time
from importlib.resources import files

import numpy as np
import pytest
import torch

from compseg import cli, synthslide
from compseg.config import DatasetConfig, ExperimentConfig, load_config
from compseg.evaluation import evaluate_cases, model_segmenter
from compseg.losses import (combined_loss, complementary_logit_grad, complementary_loss, focal_complementary_logit_grad,
                            focal_complementary_loss, masked_weighted_ce, masked_weighted_ce_logit_grad)
from compseg.mnist_seg import sample_complementary
from compseg.model import ModelConfig
from compseg.trainer import corpus_roles, run_ablation, synthslide_training_data, train
from compseg.types import LossConfig, TransitionMatrix, apply_transposed, preset

from oracles import fd_grad, random_instance, random_q, scalar_combined, softmax_np

# pinned tolerances
ORDER_MARGIN = 0.02
MIN_GAIN = 0.05
ABLATION_BUDGET_S = 45 * 60
FD_REL_TOL = 1e-4
FD_STEP = 1e-5
FD_INSTANCES = 24
ORACLE_TOL = 1e-10
SIMPLEX_TOL = 1e-9
FREQ_TOL = 0.01
FREQ_DRAWS = 100_000
LAB_TOL = 1e-4


def report(n: int, ok: bool, detail: str, capsys) -> None:
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


# 1 + 2: MNIST ablation ---------------------------------------------------------------

@pytest.fixture(scope="module")
def mnist_ablation(tmp_path_factory):
    cfg, abl = load_config(files("compseg") / "configs" / "ablation-mnist.toml")
    out = tmp_path_factory.mktemp("ablation")
    started = time.perf_counter()
    table = run_ablation(cfg, abl["conditions"], abl["seeds"], out_dir=out)
    return table, time.perf_counter() - started


@pytest.mark.slow
def test_criterion_1_ablation_ordering(mnist_ablation, capsys):
    table, seconds = mnist_ablation
    mean = {row["condition"]: row["mean_macro_f1"] for row in table.summary()}
    n_seeds = {row["condition"]: row["n"] for row in table.summary()}
    checks = {
        "baseline<q2": mean["baseline"] < mean["q2"],
        "q1<=full+0.02": mean["q1"] <= mean["full"] + ORDER_MARGIN,
        "q1-baseline>=0.05": mean["q1"] - mean["baseline"] >= MIN_GAIN,
        "q2<=q1+0.02": mean["q2"] <= mean["q1"] + ORDER_MARGIN,
        "5 seeds": all(v == 5 for v in n_seeds.values()),
        "runtime": seconds <= ABLATION_BUDGET_S,
    }
    detail = (", ".join(f"{c}={m:.4f}" for c, m in mean.items())
              + f"; {seconds / 60:.1f} min; failed: {[k for k, v in checks.items() if not v]}")
    report(1, all(checks.values()), detail, capsys)


@pytest.mark.slow
def test_criterion_2_variance_reduction(mnist_ablation, capsys):
    table, _ = mnist_ablation
    std = {row["condition"]: row["std_macro_f1"] for row in table.summary()}
    report(2, std["q1"] <= std["baseline"], f"std q1={std['q1']:.4f} baseline={std['baseline']:.4f}", capsys)


# 3: finite-difference gradient check ---------------------------------------------------

def _rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def test_criterion_3_gradient_oracle(capsys):
    started = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"ce": 0.0, "compl": 0.0, "focal": 0.0}
    for _ in range(FD_INSTANCES):
        n, size, k = int(rng.integers(1, 3)), int(rng.integers(2, 4)), int(rng.integers(2, 5))
        logits = rng.normal(size=(n, size, size, k)) * 1.5
        _, y, yb, q = random_instance(rng, n, size, k)
        w = tuple(rng.uniform(0.3, 2.0, k).tolist())

        def ce(z):
            return float(masked_weighted_ce(torch.from_numpy(softmax_np(z)), y, w))

        def compl(z):
            return float(complementary_loss(torch.from_numpy(softmax_np(z)), yb, q))

        def focal(z):
            return float(focal_complementary_loss(torch.from_numpy(softmax_np(z)), yb, q, 2.0))

        worst["ce"] = max(worst["ce"], _rel_err(masked_weighted_ce_logit_grad(logits, y, w),
                                                fd_grad(ce, logits, FD_STEP)))
        worst["compl"] = max(worst["compl"], _rel_err(complementary_logit_grad(logits, yb, q),
                                                      fd_grad(compl, logits, FD_STEP)))
        worst["focal"] = max(worst["focal"], _rel_err(focal_complementary_logit_grad(logits, yb, q, 2.0),
                                                      fd_grad(focal, logits, FD_STEP)))
    seconds = time.perf_counter() - started
    ok = all(v < FD_REL_TOL for v in worst.values()) and seconds < 60
    detail = f"{FD_INSTANCES} instances, worst rel err " + ", ".join(f"{k}={v:.2e}" for k, v in worst.items())
    report(3, ok, detail + f", {seconds:.1f}s", capsys)


# 4: scalar-loop oracle -------------------------------------------------------------------

def test_criterion_4_scalar_oracle(capsys):
    rng = np.random.default_rng(4)
    worst = 0.0
    count = 0
    for n in range(1, 5):
        for size in (1, 3, 8):
            for k in range(2, 6):
                p, y, yb, q = random_instance(rng, n, size, k)
                for use_focal in (False, True):
                    cfg = LossConfig(alpha=0.3, gamma=2.0, class_weights=tuple(rng.uniform(0.2, 3, k)),
                                     use_focal=use_focal)
                    got = float(combined_loss(torch.from_numpy(p), y, yb, q, cfg).total)
                    worst = max(worst, abs(got - scalar_combined(p, y, yb, q, cfg)))
                    count += 1
    report(4, worst <= ORACLE_TOL, f"{count} instances, max |diff| = {worst:.2e}", capsys)


# 5: exact binary reduction -------------------------------------------------------------

def test_criterion_5_swap_reduction(capsys):
    rng = np.random.default_rng(5)
    swap = TransitionMatrix.from_rows([[0, 1], [1, 0]])
    mismatches = 0
    for _ in range(100):
        n, size = int(rng.integers(1, 4)), int(rng.integers(1, 9))
        p = torch.from_numpy(softmax_np(rng.normal(size=(n, size, size, 2)) * 3))
        true = rng.integers(0, 2, (n, size, size))
        compl = 1 - true
        a = complementary_loss(p, compl, swap).value
        b = masked_weighted_ce(p, true).value
        mismatches += int(a.item() != b.item())
    report(5, mismatches == 0, f"{100 - mismatches}/100 bitwise equal", capsys)


# 6: simplex preservation ------------------------------------------------------------------

def test_criterion_6_normalisation(capsys):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 9))
        q = random_q(rng, k)
        y_hat = rng.dirichlet(np.full(k, 0.5))
        worst = max(worst, abs(apply_transposed(q, y_hat).sum() - 1.0))
    report(6, worst <= SIMPLEX_TOL, f"1000 pairs, max |sum-1| = {worst:.2e}", capsys)


# 7: sampler frequencies ----------------------------------------------------------------------

def test_criterion_7_sampler_distribution(capsys):
    worst = 0.0
    for name in ("mnist-q1", "mnist-q2", "liver"):
        q = preset(name)
        for row in range(q.k):
            drawn = sample_complementary(np.full(FREQ_DRAWS, row), q, 700 + row)
            freq = np.bincount(drawn, minlength=q.k) / FREQ_DRAWS
            worst = max(worst, float(np.max(np.abs(freq - q.q[row]))))
    report(7, worst <= FREQ_TOL, f"max |freq - Q| = {worst:.4f} over 3 presets", capsys)


# 8: synthetic case-level pipeline --------------------------------------------------------------

CASE_DATASET = DatasetConfig(kind="synthslide", difficulty="easy", slide_size=256, patch_size=32, stride=2,
                             annotated_cases=6, complementary_cases=14, validation_cases=4, test_cases=16,
                             annotation_coverage=0.5)
CASE_CONFIG = ExperimentConfig(seed=0, condition="complementary", q="estimate", dataset=CASE_DATASET,
                               model=ModelConfig(depth=2, base_width=16), alpha=1.0, batch_size=32,
                               learning_rate=1e-3, max_epochs=100, patience=30)


@pytest.mark.slow
def test_criterion_8_case_pipeline(capsys):
    corpus = synthslide.build_corpus(corpus_roles(CASE_CONFIG), CASE_DATASET.corpus_seed, "easy",
                                     CASE_DATASET.slide_size)
    assert len(corpus) == 40
    test_cases = [c for c in corpus if c.role == "test"]
    results = {}
    for condition in ("baseline", "complementary"):
        cfg = dataclasses.replace(CASE_CONFIG, condition=condition)
        model, _ = train(cfg, synthslide_training_data(cfg, corpus))
        segmenter = model_segmenter(model, CASE_DATASET.patch_size, 1)
        results[condition] = evaluate_cases(test_cases, segmenter, n_resamples=1000, seed=0)
    comp, base = results["complementary"], results["baseline"]
    checks = {
        "BA comp>=base": comp.balanced_accuracy >= base.balanced_accuracy,
        "CI excludes 0.5": not (comp.ci_low <= 0.5 <= comp.ci_high),
        "area comp<=base": comp.mean_area_share() <= base.mean_area_share(),
    }
    detail = (f"BA comp={comp.balanced_accuracy:.3f} CI=({comp.ci_low:.3f},{comp.ci_high:.3f}) "
              f"base={base.balanced_accuracy:.3f}; area comp={comp.mean_area_share():.4f} "
              f"base={base.mean_area_share():.4f}; failed: {[k for k, v in checks.items() if not v]}")
    report(8, all(checks.values()), detail, capsys)


# 9: Lab round trip ---------------------------------------------------------------------------------

def test_criterion_9_lab_round_trip(capsys):
    rng = np.random.default_rng(9)
    pixels = rng.uniform(0.02, 1.0, (1000, 3))
    rt = float(np.max(np.abs(synthslide.lab_to_rgb(synthslide.rgb_to_lab(pixels)) - pixels)))
    patch = synthslide.generate_slide(9, synthslide.CLASS_A, 64).image
    stats = synthslide.color_stats(patch)
    ident = float(np.max(np.abs(synthslide.transfer_color(patch, stats, stats.mean, stats.std) - patch)))
    ok = rt < LAB_TOL and ident < LAB_TOL
    report(9, ok, f"round-trip max err {rt:.2e}, identity augment max err {ident:.2e}", capsys)


# 10: determinism ----------------------------------------------------------------------------------------

DETERMINISM_CONFIG = """
seed = 0
condition = "complementary"
q = "mnist-q1"

[dataset]
n = 200
supervised_fraction = 0.1

[model]
base_width = 8

[loss]
alpha = 1.0

[train]
max_epochs = 2

[ablation]
conditions = ["baseline", "q1", "q2", "full"]
seeds = [0, 1]
"""


def test_criterion_10_determinism(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    cfg_path = tmp_path / "det.toml"
    cfg_path.write_text(DETERMINISM_CONFIG)
    outs = [tmp_path / "run1", tmp_path / "run2"]
    codes = [cli.cmd_ablation(cfg_path, out) for out in outs]
    csvs = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*.csv"))
    same = [(outs[0] / p).read_bytes() == (outs[1] / p).read_bytes() for p in csvs]
    ok = codes == [0, 0] and len(csvs) > 0 and all(same)
    report(10, ok, f"{sum(same)}/{len(csvs)} CSV files byte-identical", capsys)
