import dataclasses

import numpy as np
import pytest

from compseg import synthslide
from compseg.config import DatasetConfig, ExperimentConfig
from compseg.model import ModelConfig
from compseg.trainer import (AblationTable, NonFiniteLoss, mnist_training_data, prepare_data, resolve_q,
                             run_ablation, synthslide_training_data, train)
from compseg.types import preset

# Recorded once from the smoke configuration below (float64, offline synthetic digits).
GOLDEN_TRACE = [
    (0.0769056261385387, 1.0775853639380408, 0.4001812353199509),
    (0.0848974114272495, 1.0399593128376994, 0.39688520527855936),
    (0.124576704956217, 0.9622136854659511, 0.4132408105960024),
]


@pytest.fixture
def smoke(tmp_path):
    return ExperimentConfig(
        seed=0, condition="complementary", q="mnist-q1",
        dataset=DatasetConfig(n=64, supervised_fraction=0.25, eval_fraction=0.5, data_dir=str(tmp_path)),
        model=ModelConfig(depth=2, base_width=4), alpha=0.3, batch_size=16, max_epochs=3, dtype="float64")


def test_golden_loss_trace(smoke):
    _, report = train(smoke)
    assert report.data_source == "synthetic"
    assert report.loss_trace() == GOLDEN_TRACE


def test_training_is_reproducible(smoke):
    cfg = dataclasses.replace(smoke, max_epochs=2)
    a = train(cfg)[1]
    b = train(cfg)[1]
    assert a.loss_trace() == b.loss_trace()
    assert a.summary() == b.summary()


def test_baseline_has_zero_complementary_column(smoke):
    _, report = train(dataclasses.replace(smoke, condition="baseline", max_epochs=2))
    assert all(e.loss_compl == 0.0 for e in report.epochs)
    assert all(e.loss == e.loss_s for e in report.epochs)


def test_baseline_uses_only_supervised_samples(smoke):
    data = mnist_training_data(dataclasses.replace(smoke, condition="baseline"))
    assert len(data.images) == 16
    assert np.all(data.labels < 3)


def test_patience_one_stops_at_round_two(smoke):
    # zero learning rate: the metric never improves after the first round
    cfg = dataclasses.replace(smoke, learning_rate=0.0, weight_decay=0.0, patience=1, max_epochs=10)
    _, report = train(cfg)
    assert report.last_epoch == 2
    assert report.stop_reason == "early-stopping"
    assert report.best_epoch == 1


def test_alpha_zero_full_annotation_equals_fully_supervised(smoke):
    ds = dataclasses.replace(smoke.dataset, supervised_fraction=1.0)
    comp = dataclasses.replace(smoke, dataset=ds, alpha=0.0, max_epochs=2)
    full = dataclasses.replace(comp, condition="fully-supervised")
    a, b = train(comp)[1], train(full)[1]
    assert a.loss_trace() == b.loss_trace()
    assert a.best_metric == b.best_metric


def test_non_finite_input_aborts_with_diagnostics(smoke):
    data = prepare_data(smoke)
    data.images[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLoss) as err:
        train(dataclasses.replace(smoke, batch_size=64), data)
    assert err.value.epoch == 1
    assert "param_norms" in err.value.diagnostics


def test_report_csv_and_json(smoke, tmp_path):
    _, report = train(dataclasses.replace(smoke, max_epochs=1))
    report.write_csv(tmp_path / "e.csv")
    report.write_json(tmp_path / "s.json")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,loss_s,loss_compl,loss,val_macro_f1")
    assert len(lines) == 2
    assert "wall_clock" not in (tmp_path / "s.json").read_text()


def test_ablation_single_run_equals_train(smoke):
    cfg = dataclasses.replace(smoke, max_epochs=1)
    table = run_ablation(cfg, ["q2"], [4])
    _, report = train(dataclasses.replace(cfg, q="mnist-q2", seed=4))
    assert len(table.rows) == 1
    assert table.rows[0]["macro_f1"] == report.best_metric


def test_ablation_layout_and_summary(smoke, tmp_path):
    cfg = dataclasses.replace(smoke, dataset=dataclasses.replace(smoke.dataset, n=16), max_epochs=1)
    table = run_ablation(cfg, ["baseline", "q1", "q2", "full"], [0, 1, 2, 3, 4], out_dir=tmp_path)
    assert len(table.rows) == 20
    assert table.conditions() == ["baseline", "q1", "q2", "full"]
    for row in table.summary():
        vals = table.values(row["condition"])
        assert row["n"] == 5
        assert abs(row["mean_macro_f1"] - vals.mean()) <= 1e-12
    assert (tmp_path / "ablation_partial.csv").read_text().count("\n") == 21
    assert (tmp_path / "runs" / "q2-seed3" / "model.ckpt").exists()


def test_ablation_table_std_single_seed():
    t = AblationTable([{"condition": "a", "macro_f1": 0.5}])
    assert t.summary()[0]["std_macro_f1"] == 0.0


def test_resolve_q_estimate_from_complementary_masks():
    compl = np.stack([np.full((4, 4), 1)] * 3 + [np.full((4, 4), 0)])
    q = resolve_q("estimate", 3, compl=compl)
    np.testing.assert_allclose(q.q, [[0, 1, 0], [1, 0, 0], [.25, .75, 0]])
    assert resolve_q("liver", 3) == preset("liver")
    with pytest.raises(ValueError):
        resolve_q("mnist-q1", 2)


@pytest.fixture(scope="module")
def tiny_corpus():
    roles = {"annotated": 2, "complementary": 2, "validation": 2, "test": 0}
    return synthslide.build_corpus(roles, seed=0, slide_size=64)


def _slide_cfg(condition):
    ds = DatasetConfig(kind="synthslide", slide_size=64, patch_size=16, stride=1, annotated_cases=2,
                       complementary_cases=2, validation_cases=2, test_cases=0, annotation_coverage=0.5)
    return ExperimentConfig(condition=condition, q="estimate", dataset=ds, model=ModelConfig(depth=2, base_width=4))


def test_synthslide_complementary_data(tiny_corpus):
    data = synthslide_training_data(_slide_cfg("complementary"), tiny_corpus)
    assert len(data.images) == 4 * 16
    assert data.images.shape[-1] == 3
    # every training pixel carries the tumour class opposite to its case diagnosis
    train_cases = [c for c in tiny_corpus if c.role in ("annotated", "complementary")]
    for i, case in enumerate(train_cases):
        block = data.compl[i * 16:(i + 1) * 16]
        assert np.all(block == 1 - case.diagnosis)
    # complementary-only cases expose no ground truth
    assert np.all(data.labels[32:] == 3)
    assert 0 < np.mean((data.labels[:32] < 3).any(axis=(1, 2))) < 1
    np.testing.assert_allclose(data.q.q[:2], [[0, 1, 0], [1, 0, 0]])


def test_synthslide_baseline_keeps_annotated_patches(tiny_corpus):
    data = synthslide_training_data(_slide_cfg("baseline"), tiny_corpus)
    assert 0 < len(data.images) < 32
    assert np.all((data.labels < 3).any(axis=(1, 2)))


def test_synthslide_full_uses_ground_truth(tiny_corpus):
    data = synthslide_training_data(_slide_cfg("fully-supervised"), tiny_corpus)
    assert np.all(data.labels < 3)
    assert len(data.eval_images) == 2 * 16
