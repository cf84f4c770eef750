"""Seeded training loop for the combined supervised + complementary objective."""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import mnist_seg, synthslide
from .config import ExperimentConfig
from .losses import combined_loss, default_class_weights
from .metrics import confusion_matrix, scores_from_confusion
from .model import NonFiniteLogits, UNet, build_model, forward, softmax_map
from .types import CompsegError, LossConfig, TransitionMatrix, estimate_other_row, load_transition_matrix, unannotated

log = logging.getLogger(__name__)

IMPROVEMENT_EPS = 1e-6


class NonFiniteLoss(CompsegError):
    def __init__(self, epoch: int, diagnostics: dict):
        super().__init__(f"non-finite loss in epoch {epoch}: {json.dumps(diagnostics, default=str)}")
        self.epoch = epoch
        self.diagnostics = diagnostics


@dataclass
class TrainingData:
    """Arrays for one run. Label value ``k`` marks unlabelled pixels."""

    images: np.ndarray
    labels: np.ndarray
    compl: np.ndarray
    eval_images: np.ndarray
    eval_gt: np.ndarray
    k: int
    q: TransitionMatrix
    source: str = ""
    # optional per-sample colour statistics for Lab augmentation
    case_index: np.ndarray | None = None
    case_stats: list | None = None
    population: synthslide.ColorPopulation | None = None
    geometric: bool = False


# data preparation ----------------------------------------------------------------

def uniform_q(k: int) -> TransitionMatrix:
    rows = np.full((k, k), 1.0 / (k - 1))
    np.fill_diagonal(rows, 0.0)
    return TransitionMatrix.from_rows(rows)


_RAW_CACHE: dict[str, tuple[np.ndarray, np.ndarray, str]] = {}


def load_raw_mnist(cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray, str]:
    """Raw digits from the configured data dir, or the synthetic corpus as a fallback."""
    ds = cfg.dataset
    key = str(ds.mnist_dir())
    if key in _RAW_CACHE:
        return _RAW_CACHE[key]
    try:
        images, labels = mnist_seg.load_mnist(ds.mnist_dir())
        manifest = mnist_seg.verify_data_dir(ds.mnist_dir())
        source = manifest["source"] if manifest else "idx"
    except FileNotFoundError:
        if not ds.offline_fallback:
            raise
        log.warning("no MNIST files in %s; using synthetic digits", ds.mnist_dir())
        need = int(round(ds.n * (1 + ds.eval_fraction))) + 10
        raw, labels = mnist_seg.synthetic_digits(max(need, 2000), seed=0)
        images, labels, source = raw / 255.0, labels.astype(np.int64), "synthetic"
    _RAW_CACHE[key] = (images, labels, source)
    return images, labels, source


def mnist_training_data(cfg: ExperimentConfig, raw=None) -> TrainingData:
    ds = cfg.dataset
    images, labels, source = raw if raw is not None else load_raw_mnist(cfg)
    q = resolve_q(cfg.q, mnist_seg.K) if cfg.condition == "complementary" else uniform_q(mnist_seg.K)
    data_seed = cfg.seed if ds.data_seed is None else ds.data_seed
    samples = mnist_seg.build_dataset(images, labels, ds.n, ds.supervised_fraction, data_seed,
                                      q if cfg.condition == "complementary" else None, ds.sampling_mode)
    evals = mnist_seg.build_eval_split(images, labels, ds.n, data_seed, ds.eval_fraction)
    if cfg.condition == "baseline":
        samples = [s for s in samples if s.supervised]
    arr = mnist_seg.stack(samples)
    ev = mnist_seg.stack(evals)
    train_labels = arr["gt"] if cfg.condition != "complementary" else arr["train"]
    return TrainingData(arr["images"], train_labels, arr["compl"], ev["images"], ev["gt"],
                        mnist_seg.K, q, source)


def _case_patches(case: synthslide.SyntheticCase, patch_size: int, stride: int):
    for slide in case.slides:
        grid = synthslide.grid_patches(slide.image, patch_size, stride)
        masks = synthslide.grid_patches(slide.gt_mask, patch_size, stride).patches
        yield grid.patches, masks


def synthslide_training_data(cfg: ExperimentConfig, corpus=None) -> TrainingData:
    """Grid patches from the training cases of a synthetic corpus.

    Annotated cases keep their ground truth on a seeded ``annotation_coverage``
    share of patches. Every training pixel gets the opposite tumour class of its
    case diagnosis as complementary label.
    """
    ds = cfg.dataset
    k = synthslide.K
    sentinel = unannotated(k)
    if corpus is None:
        corpus = synthslide.build_corpus(corpus_roles(cfg), ds.corpus_seed, ds.difficulty, ds.slide_size)
    rng = np.random.default_rng(np.random.SeedSequence([ds.corpus_seed, 7]))
    images, labels, gts, compl, case_idx = [], [], [], [], []
    stats = []
    for case in corpus:
        if case.role not in ("annotated", "complementary"):
            continue
        ci = len(stats)
        stats.append(case.stats)
        other_tumor = synthslide.TUMOR_CLASSES[1 - case.diagnosis]
        for patches, masks in _case_patches(case, ds.patch_size, ds.stride):
            keep = np.zeros(len(patches), dtype=bool)
            if case.role == "annotated":
                keep = rng.random(len(patches)) < ds.annotation_coverage
            for p, m, kp in zip(patches, masks, keep):
                images.append(p)
                gts.append(m)
                labels.append(m if kp else np.full_like(m, sentinel))
                compl.append(np.full_like(m, other_tumor))
                case_idx.append(ci)
    images = np.stack(images).astype(np.float32)
    gts, labels, compl = np.stack(gts), np.stack(labels), np.stack(compl)
    case_idx = np.asarray(case_idx)
    annotated = (labels < k).any(axis=(1, 2))

    if cfg.condition == "complementary":
        q = resolve_q(cfg.q, k, compl=compl)
        sel = np.ones(len(images), dtype=bool)
    elif cfg.condition == "baseline":
        q = uniform_q(k)
        sel = annotated
    else:
        q = uniform_q(k)
        sel = np.ones(len(images), dtype=bool)
        labels = gts
    ev_images, ev_gt = [], []
    for case in corpus:
        if case.role == "validation":
            for patches, masks in _case_patches(case, ds.patch_size, ds.stride):
                ev_images.append(patches)
                ev_gt.append(masks)
    population = synthslide.fit_population([s for s in stats if s is not None]) if ds.color_augment else None
    return TrainingData(images[sel], labels[sel], compl[sel],
                        np.concatenate(ev_images).astype(np.float32), np.concatenate(ev_gt), k, q,
                        "synthslide", case_idx[sel], stats if ds.color_augment else None, population,
                        ds.geometric_augment)


def corpus_roles(cfg: ExperimentConfig) -> dict[str, int]:
    ds = cfg.dataset
    return {"annotated": ds.annotated_cases, "complementary": ds.complementary_cases,
            "validation": ds.validation_cases, "test": ds.test_cases}


def resolve_q(spec, k: int, compl: np.ndarray | None = None) -> TransitionMatrix:
    """Transition matrix from a preset name, JSON path, rows, or ``"estimate"``.

    ``"estimate"`` (synthetic slides) uses deterministic opposite-tumour rows
    and fills the last row from the patch counts per complementary label.
    """
    if isinstance(spec, TransitionMatrix):
        q = spec
    elif spec == "estimate":
        if compl is None:
            raise ValueError("estimating Q needs complementary masks")
        per_patch = compl.reshape(len(compl), -1)[:, 0]
        counts = np.bincount(per_patch[per_patch < k], minlength=k)[:k - 1]
        rows = np.zeros((k, k))
        rows[0, 1] = rows[1, 0] = 1.0
        rows[k - 1] = estimate_other_row(counts)
        q = TransitionMatrix.from_rows(rows)
    elif isinstance(spec, (list, tuple)):
        q = TransitionMatrix.from_rows(spec)
    else:
        q = load_transition_matrix(spec)
    if q.k != k:
        raise ValueError(f"transition matrix has k={q.k}, dataset has k={k}")
    return q


def prepare_data(cfg: ExperimentConfig) -> TrainingData:
    if cfg.dataset.kind == "mnist-seg":
        return mnist_training_data(cfg)
    return synthslide_training_data(cfg)


# reporting ----------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss_s: float
    loss_compl: float
    loss: float
    val_macro_f1: float = float("nan")
    val_f1: list = field(default_factory=list)


@dataclass
class TrainReport:
    epochs: list[EpochRecord]
    best_epoch: int
    best_metric: float
    stop_reason: str
    final_f1: list[float]
    config: dict
    data_source: str = ""
    wall_clock: float = 0.0

    @property
    def last_epoch(self) -> int:
        return self.epochs[-1].epoch if self.epochs else 0

    def loss_trace(self) -> list[tuple[float, float, float]]:
        return [(e.loss_s, e.loss_compl, e.loss) for e in self.epochs]

    def write_csv(self, path) -> None:
        k = len(self.final_f1)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "loss_s", "loss_compl", "loss", "val_macro_f1"] + [f"val_f1_{c}" for c in range(k)])
            for e in self.epochs:
                f1 = e.val_f1 or [float("nan")] * k
                w.writerow([e.epoch, repr(e.loss_s), repr(e.loss_compl), repr(e.loss), repr(e.val_macro_f1)]
                           + [repr(v) for v in f1])

    def summary(self) -> dict:
        """JSON-safe summary; wall-clock time is left out so reruns compare equal."""
        return {"best_epoch": self.best_epoch, "best_macro_f1": self.best_metric,
                "last_epoch": self.last_epoch, "stop_reason": self.stop_reason,
                "final_f1": self.final_f1, "data_source": self.data_source, "config": self.config}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


# training -------------------------------------------------------------------------

@torch.no_grad()
def evaluate(model: UNet, images: np.ndarray, gt: np.ndarray, k: int, batch_size: int = 256):
    model.eval()
    conf = np.zeros((k, k), dtype=np.int64)
    for start in range(0, len(images), batch_size):
        pred = forward(model, images[start:start + batch_size]).argmax(-1).numpy()
        conf += confusion_matrix(pred, gt[start:start + batch_size], k)
    return scores_from_confusion(conf)


def _augment_batch(data: TrainingData, idx: np.ndarray, rng: np.random.Generator):
    x = data.images[idx]
    y = data.labels[idx]
    yb = data.compl[idx]
    if data.case_stats is None and not data.geometric:
        return x, y, yb
    xs, ys, ybs = [], [], []
    for i, (img, lab, cl) in enumerate(zip(x, y, yb)):
        if data.case_stats is not None:
            stats = data.case_stats[data.case_index[idx[i]]]
            mean, std = synthslide.draw_color_target(data.population, rng)
            img = synthslide.transfer_color(img.astype(np.float64), stats, mean, std).astype(np.float32)
        if data.geometric:
            img, lab, cl = synthslide.geometric_augment(rng, img, lab, cl)
        xs.append(img)
        ys.append(lab)
        ybs.append(cl)
    return np.stack(xs), np.stack(ys), np.stack(ybs)


def _diagnostics(model: UNet, batch_start: int, **extra) -> dict:
    return {"batch_start": batch_start, **extra,
            "param_norms": {k: float(v.norm()) for k, v in model.state_dict().items()}}


def train(cfg: ExperimentConfig, data: TrainingData | None = None) -> tuple[UNet, TrainReport]:
    """Optimise the combined loss with AdamW and early stopping on validation macro F1.

    Returns the model restored to its best evaluation round and the report.
    """
    started = time.perf_counter()
    if data is None:
        data = prepare_data(cfg)
    dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
    mcfg = dataclasses.replace(cfg.model, in_channels=data.images.shape[-1], num_classes=data.k, seed=cfg.seed)
    model = build_model(mcfg, dtype)
    weights = None
    if cfg.class_weighting == "inverse-frequency":
        weights = tuple(default_class_weights([data.labels], data.k).tolist())
    alpha = cfg.alpha if cfg.condition == "complementary" else 0.0
    loss_cfg = LossConfig(alpha=alpha, gamma=cfg.gamma, class_weights=weights, use_focal=cfg.use_focal)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    aug_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
    n = len(data.images)
    records: list[EpochRecord] = []
    best_metric, best_epoch, best_state, best_f1 = -math.inf, 0, None, []
    stale = 0
    stop_reason = "max-epochs"
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        perm = order_rng.permutation(n)
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x, y, yb = _augment_batch(data, idx, aug_rng)
            try:
                probs = softmax_map(forward(model, x))
            except NonFiniteLogits as err:
                raise NonFiniteLoss(epoch, _diagnostics(model, start, reason=str(err))) from err
            parts = combined_loss(probs, torch.from_numpy(y), torch.from_numpy(yb), data.q, loss_cfg)
            if not torch.isfinite(parts.total.value):
                raise NonFiniteLoss(epoch, _diagnostics(model, start, loss_s=float(parts.supervised.value),
                                                        loss_compl=float(parts.complementary.value)))
            opt.zero_grad()
            parts.total.value.backward()
            opt.step()
            sums += [parts.supervised.value.item(), parts.complementary.value.item(), parts.total.value.item()]
            n_batches += 1
        means = sums / max(n_batches, 1)
        rec = EpochRecord(epoch, float(means[0]), float(means[1]), float(means[2]))
        if epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs:
            scores = evaluate(model, data.eval_images, data.eval_gt, data.k)
            rec.val_macro_f1 = scores.macro_f1
            rec.val_f1 = scores.per_class_f1.tolist()
            if scores.macro_f1 > best_metric + IMPROVEMENT_EPS:
                best_metric, best_epoch, best_f1 = scores.macro_f1, epoch, rec.val_f1
                best_state = copy.deepcopy(model.state_dict())
                stale = 0
            else:
                stale += 1
            log.info("epoch %d loss %.4f (s %.4f, c %.4f) val macro-F1 %.4f", epoch, rec.loss,
                     rec.loss_s, rec.loss_compl, scores.macro_f1)
        records.append(rec)
        if stale >= cfg.patience:
            stop_reason = "early-stopping"
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    report = TrainReport(records, best_epoch, float(best_metric), stop_reason, best_f1, cfg.to_dict(),
                         data.source, time.perf_counter() - started)
    return model, report


# ablation -------------------------------------------------------------------------

ABLATION_FIELDS = ["condition", "seed", "macro_f1", "f1_0", "f1_1", "f1_2", "best_epoch", "last_epoch",
                   "stop_reason"]


@dataclass
class AblationTable:
    rows: list[dict]

    def conditions(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r["condition"] not in seen:
                seen.append(r["condition"])
        return seen

    def values(self, condition: str) -> np.ndarray:
        return np.array([r["macro_f1"] for r in self.rows if r["condition"] == condition])

    def summary(self) -> list[dict]:
        """Per-condition mean and sample standard deviation (0 for a single seed)."""
        out = []
        for c in self.conditions():
            v = self.values(c)
            out.append({"condition": c, "n": len(v), "mean_macro_f1": float(v.mean()),
                        "std_macro_f1": float(v.std(ddof=1)) if len(v) > 1 else 0.0})
        return out

    def write_csv(self, path) -> None:
        _write_rows(path, self.rows)

    def write_summary_csv(self, path) -> None:
        _write_rows(path, self.summary())


def _write_rows(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _run_one(cfg: ExperimentConfig, condition: str, out_dir: str | None):
    model, report = train(cfg)
    f1 = report.final_f1 + [float("nan")] * (3 - len(report.final_f1))
    row = {"condition": condition, "seed": cfg.seed, "macro_f1": report.best_metric,
           "f1_0": f1[0], "f1_1": f1[1], "f1_2": f1[2], "best_epoch": report.best_epoch,
           "last_epoch": report.last_epoch, "stop_reason": report.stop_reason}
    if out_dir is not None:
        from .model import save_checkpoint

        run_dir = Path(out_dir) / "runs" / f"{condition}-seed{cfg.seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        report.write_csv(run_dir / "epochs.csv")
        report.write_json(run_dir / "summary.json")
        save_checkpoint(model, run_dir / "model.ckpt", {"condition": condition, "seed": cfg.seed})
    return row, report.wall_clock


def run_ablation(base_cfg: ExperimentConfig, conditions: list[str], seeds: list[int],
                 out_dir=None, jobs: int = 1) -> AblationTable:
    """Train every (condition, seed) pair and collect the best validation macro F1.

    With ``out_dir`` each run writes its report and checkpoint under
    ``runs/<condition>-seed<seed>/`` and ``ablation_partial.csv`` is rewritten
    after every finished run, so an aborted ablation keeps its results.
    """
    if not conditions or not seeds:
        raise ValueError("need at least one condition and one seed")
    jobs_list = [(dataclasses.replace(base_cfg.with_condition(c), seed=s), c) for c in conditions for s in seeds]
    rows: list[dict | None] = [None] * len(jobs_list)
    out = str(out_dir) if out_dir is not None else None

    def done(i, row):
        rows[i] = row
        if out is not None:
            _write_rows(Path(out) / "ablation_partial.csv", [r for r in rows if r is not None])

    if jobs <= 1:
        for i, (cfg, c) in enumerate(jobs_list):
            log.info("ablation run %d/%d: %s seed %d", i + 1, len(jobs_list), c, cfg.seed)
            done(i, _run_one(cfg, c, out)[0])
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_one, cfg, c, out) for cfg, c in jobs_list]
            for i, fut in enumerate(futures):
                done(i, fut.result()[0])
    return AblationTable(rows)
