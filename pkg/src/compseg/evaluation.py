"""Case-level evaluation of a segmentation model on synthetic slide corpora."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import plots, synthslide
from .metrics import (balanced_accuracy, bootstrap_ci, complementary_area_share,
                      prediction_from_counts)
from .model import UNet, predict_labels

Segmenter = Callable[[synthslide.SyntheticSlide], np.ndarray]

OVERLAY_COLORS = {synthslide.CLASS_A: (220, 40, 40), synthslide.CLASS_B: (40, 80, 220)}


def model_segmenter(model: UNet, patch_size: int, stride: int) -> Segmenter:
    """Segment a slide by predicting grid patches and stitching them.

    Pixels not covered by the grid get the value ``k`` (unevaluated).
    """
    k = model.config.num_classes

    def segment(slide: synthslide.SyntheticSlide) -> np.ndarray:
        grid = synthslide.grid_patches(slide.image.astype(np.float32), patch_size, stride)
        pred = predict_labels(model, grid.patches)
        return synthslide.stitch(slide.image.shape[:2], grid.coords, pred, fill=k)

    return segment


@dataclass
class CaseRow:
    case_id: str
    diagnosis: int
    predicted_class: int | None
    no_tumor_pixels: bool
    tie: bool
    shares: list[float]
    complementary_area_share: float
    n_slides: int
    missing_slides: int = 0


@dataclass
class CaseEvaluation:
    rows: list[CaseRow]
    balanced_accuracy: float
    ci_low: float
    ci_high: float
    n_resamples: int
    rejected_resamples: int
    seg_maps: dict = field(default_factory=dict, repr=False)

    def confusion(self) -> np.ndarray:
        """Rows: diagnosis A/B; columns: predicted A/B/none."""
        m = np.zeros((2, 3), dtype=np.int64)
        for r in self.rows:
            col = 2 if r.predicted_class is None else r.predicted_class
            m[r.diagnosis, col] += 1
        return m

    def mean_area_share(self) -> float:
        return float(np.mean([r.complementary_area_share for r in self.rows])) if self.rows else 0.0

    def summary(self) -> dict:
        per_dx = {}
        for dx, name in zip(synthslide.TUMOR_CLASSES, synthslide.CLASS_NAMES):
            vals = [r.complementary_area_share for r in self.rows if r.diagnosis == dx]
            per_dx[name] = float(np.mean(vals)) if vals else None
        return {
            "n_cases": len(self.rows),
            "balanced_accuracy": self.balanced_accuracy,
            "ci_low": self.ci_low, "ci_high": self.ci_high,
            "n_resamples": self.n_resamples, "rejected_resamples": self.rejected_resamples,
            "mean_complementary_area_share": self.mean_area_share(),
            "complementary_area_share_by_diagnosis": per_dx,
            "no_tumor_cases": sum(r.no_tumor_pixels for r in self.rows),
            "tied_cases": sum(r.tie for r in self.rows),
            "missing_slides": sum(r.missing_slides for r in self.rows),
        }


def evaluate_cases(cases: list[synthslide.SyntheticCase], segmenter: Segmenter, k: int = synthslide.K,
                   n_resamples: int = 1000, confidence: float = 0.95, seed: int = 0,
                   keep_maps: bool = False) -> CaseEvaluation:
    """Case predictions by tumour-pixel dominance, area shares and bootstrapped balanced accuracy.

    Cases predicted without any tumour pixels count as misclassified in the
    balanced accuracy.
    """
    rows, maps = [], {}
    for case in cases:
        counts = np.zeros(k, dtype=np.int64)
        compl_px = evaluated = 0
        complement = synthslide.TUMOR_CLASSES[1 - case.diagnosis]
        for slide in case.slides:
            seg = segmenter(slide)
            valid = seg[(seg >= 0) & (seg < k)]
            counts += np.bincount(valid.ravel(), minlength=k)[:k]
            evaluated += valid.size
            compl_px += int(round(complementary_area_share(seg, case.diagnosis, complement, k) * valid.size))
            if keep_maps:
                maps[slide.slide_id] = seg
        pred = prediction_from_counts(counts, synthslide.TUMOR_CLASSES, case.case_id)
        rows.append(CaseRow(case.case_id, case.diagnosis, pred.predicted_class, pred.no_tumor_pixels,
                            pred.tie, pred.class_pixel_shares.tolist(),
                            compl_px / evaluated if evaluated else 0.0, len(case.slides)))
    preds = np.array([-1 if r.predicted_class is None else r.predicted_class for r in rows])
    labels = np.array([r.diagnosis for r in rows])
    boot = bootstrap_ci(preds, labels, balanced_accuracy, n_resamples, confidence, seed)
    return CaseEvaluation(rows, balanced_accuracy(preds, labels), boot.low, boot.high, boot.n_resamples,
                          boot.rejected, maps)


def overlay(image: np.ndarray, seg: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """RGB uint8 overlay; "other" and unevaluated pixels stay transparent."""
    out = np.rint(np.asarray(image)[..., :3] * 255).astype(np.float64)
    for cls, color in OVERLAY_COLORS.items():
        m = seg == cls
        out[m] = (1 - alpha) * out[m] + alpha * np.asarray(color, dtype=np.float64)
    return np.rint(out).astype(np.uint8)


def write_outputs(result: CaseEvaluation, cases: list[synthslide.SyntheticCase], out_dir,
                  overlays: bool = True) -> list[Path]:
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    case_csv = out / "cases.csv"
    with open(case_csv, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["case_id", "diagnosis", "predicted_class", "flag", "share_0", "share_1", "share_2",
                    "complementary_area_share", "n_slides", "missing_slides"])
        for r in result.rows:
            flag = "no-tumor-pixels" if r.no_tumor_pixels else ("tie" if r.tie else "")
            pred = "" if r.predicted_class is None else r.predicted_class
            w.writerow([r.case_id, r.diagnosis, pred, flag, *[repr(float(s)) for s in r.shares],
                        repr(r.complementary_area_share), r.n_slides, r.missing_slides])
    paths.append(case_csv)

    conf = result.confusion()
    conf_csv = out / "confusion.csv"
    with open(conf_csv, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["diagnosis", "pred_tumor-a", "pred_tumor-b", "pred_none"])
        for name, row in zip(synthslide.CLASS_NAMES[:2], conf):
            w.writerow([name, *row.tolist()])
    paths.append(conf_csv)
    conf_svg = out / "confusion.svg"
    plots.write(conf_svg, plots.confusion_svg(conf, ["tumor-a", "tumor-b"], ["tumor-a", "tumor-b", "none"],
                                              "case-level confusion"))
    paths.append(conf_svg)

    summary = out / "summary.json"
    summary.write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    paths.append(summary)

    if overlays and result.seg_maps:
        odir = out / "overlays"
        odir.mkdir(exist_ok=True)
        for case in cases:
            for slide in case.slides:
                if slide.slide_id in result.seg_maps:
                    p = odir / f"{slide.slide_id}.png"
                    Image.fromarray(overlay(slide.image, result.seg_maps[slide.slide_id])).save(p)
                    paths.append(p)
    return paths
