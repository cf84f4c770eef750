"""``compseg`` command-line entry point.

Subcommands: ``fetch-data``, ``build-corpus``, ``train``, ``ablation``,
``eval-cases`` and ``report``. Each run writes ``run_manifest.json`` next to
its artifacts. Timestamps in the manifest honour ``SOURCE_DATE_EPOCH`` so
that reruns can be made fully byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from importlib.resources import files
from pathlib import Path

from . import __version__, evaluation, mnist_seg, plots, synthslide
from .config import ConfigError, ExperimentConfig, default_data_dir, load_config
from .model import load_checkpoint, save_checkpoint
from .types import CompsegError

log = logging.getLogger("compseg")

BUNDLED_CONFIGS = ("ablation-mnist.toml",)


def _now() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = dt.datetime.fromtimestamp(int(epoch), dt.timezone.utc) if epoch else dt.datetime.now(dt.timezone.utc)
    return t.isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """What a command produced; written as ``run_manifest.json``."""

    command: str
    config_hash: str = ""
    code_version: str = __version__
    seeds: list[int] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    started: str = field(default_factory=_now)
    finished: str = ""

    def add(self, *paths, root=None) -> None:
        for p in paths:
            p = Path(p)
            self.artifacts.append(str(p.relative_to(root)) if root is not None else str(p))

    def missing(self, root) -> list[str]:
        return [a for a in self.artifacts if not (Path(root) / a).exists()]

    def write(self, out_dir) -> Path:
        self.finished = _now()
        self.artifacts = sorted(set(self.artifacts))
        path = Path(out_dir) / "run_manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def resolve_config(path) -> tuple[ExperimentConfig, dict]:
    """Load a config file; bare names of bundled configs resolve to the packaged copy."""
    if path is None:
        return ExperimentConfig(), {}
    p = Path(path)
    if not p.exists() and p.name in BUNDLED_CONFIGS:
        p = files("compseg") / "configs" / p.name
    return load_config(p)


def parse_seeds(spec: str | None, config_seeds: list[int], base: int | None) -> list[int]:
    """``"3"`` means three seeds, ``"0,4,7"`` an explicit list.

    A count takes the leading seeds of the config list, or consecutive seeds
    from ``base`` when ``--seed`` is given or the list is too short.
    """
    if spec is None:
        seeds = list(config_seeds) or [0]
        return [base + i for i in range(len(seeds))] if base is not None else seeds
    if "," in spec:
        return [int(s) for s in spec.split(",") if s.strip()]
    n = int(spec)
    if n < 1:
        raise ConfigError("--seeds: need at least one seed")
    if base is None and len(config_seeds) >= n:
        return list(config_seeds[:n])
    start = base if base is not None else 0
    return list(range(start, start + n))


def _finish(manifest: RunManifest, out: Path) -> int:
    manifest.write(out)
    gone = manifest.missing(out)
    if gone:
        log.error("artifacts missing after run: %s", gone)
        return 1
    return 0


# commands ------------------------------------------------------------------------

def cmd_fetch_data(target_dir=None, offline: bool = False, seed: int = 0) -> dict:
    """Download and verify MNIST, or write the synthetic fallback with ``offline``."""
    target = Path(target_dir) if target_dir else default_data_dir() / "mnist"
    return mnist_seg.fetch_mnist(target, offline=offline, seed=seed)


def cmd_build_corpus(cfg: ExperimentConfig, out_dir, seed: int | None = None) -> int:
    from .trainer import corpus_roles

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.dataset
    corpus_seed = d.corpus_seed if seed is None else seed
    cases = synthslide.build_corpus(corpus_roles(cfg), corpus_seed, d.difficulty, d.slide_size)
    manifest_path = synthslide.save_corpus(cases, out)
    manifest = RunManifest("build-corpus", cfg.digest(), seeds=[corpus_seed])
    manifest.add(manifest_path, root=out)
    for case in cases:
        for s in case.slides:
            manifest.add(out / "slides" / f"{s.slide_id}.png", out / "slides" / f"{s.slide_id}_mask.png",
                         out / "slides" / f"{s.slide_id}.json", root=out)
    return _finish(manifest, out)


def cmd_train(cfg: ExperimentConfig, out_dir) -> int:
    from .trainer import train

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, report = train(cfg)
    report.write_csv(out / "epochs.csv")
    report.write_json(out / "summary.json")
    extra = {"condition": cfg.condition, "seed": cfg.seed, "dataset": cfg.dataset.kind,
             "patch_size": cfg.dataset.patch_size, "stride": cfg.dataset.stride}
    save_checkpoint(model, out / "model.ckpt", extra)
    manifest = RunManifest("train", cfg.digest(), seeds=[cfg.seed])
    manifest.add(out / "epochs.csv", out / "summary.json", out / "model.ckpt", root=out)
    return _finish(manifest, out)


def write_ablation_outputs(table, out: Path, title: str = "macro F1 by condition") -> list[Path]:
    table.write_csv(out / "ablation.csv")
    table.write_summary_csv(out / "ablation_summary.csv")
    groups = {c: table.values(c).tolist() for c in table.conditions()}
    plots.write(out / "ablation.svg", plots.box_strip_svg(groups, title))
    return [out / "ablation.csv", out / "ablation_summary.csv", out / "ablation.svg"]


def cmd_ablation(config_path, out_dir, seeds: str | None = None, conditions: list[str] | None = None,
                 jobs: int = 1, seed: int | None = None) -> int:
    """Train every (condition, seed) pair of an ablation config and write the table and figure."""
    from .trainer import run_ablation

    cfg, ablation = resolve_config(config_path)
    conds = list(conditions) if conditions else list(ablation.get("conditions", [cfg.condition]))
    seed_list = parse_seeds(seeds, list(ablation.get("seeds", [cfg.seed])), seed)
    for c in conds:
        cfg.with_condition(c)  # validate names before any training
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = run_ablation(cfg, conds, seed_list, out_dir=out, jobs=jobs)
    partial = out / "ablation_partial.csv"
    if partial.exists():
        partial.unlink()
    manifest = RunManifest("ablation", cfg.digest(), seeds=seed_list)
    manifest.add(*write_ablation_outputs(table, out), root=out)
    for c in conds:
        for s in seed_list:
            run = out / "runs" / f"{c}-seed{s}"
            manifest.add(run / "epochs.csv", run / "summary.json", run / "model.ckpt", root=out)
    return _finish(manifest, out)


def cmd_eval_cases(checkpoint, corpus_manifest, out_dir, patch_size: int | None = None,
                   stride: int | None = None, seed: int = 0, n_resamples: int = 1000,
                   roles: tuple[str, ...] | None = ("test",), segmenter=None) -> int:
    """Segment every slide of the selected cases and write case-level results.

    ``segmenter`` replaces the checkpoint model (used for test doubles).
    Missing slide files are logged per case and skipped.
    """
    missing: list = []
    cases = synthslide.load_corpus(corpus_manifest, missing=missing)
    if roles:
        selected = [c for c in cases if c.role in roles]
        cases = selected or cases
    if segmenter is None:
        model, extra = load_checkpoint(checkpoint)
        p = patch_size or extra.get("patch_size", 32)
        s = stride or extra.get("stride", 2)
        segmenter = evaluation.model_segmenter(model, p, s)
    result = evaluation.evaluate_cases(cases, segmenter, n_resamples=n_resamples, seed=seed, keep_maps=True)
    by_case: dict[str, int] = {}
    for case_id, side in missing:
        log.warning("case %s: missing slide %s", case_id, side)
        by_case[case_id] = by_case.get(case_id, 0) + 1
    for row in result.rows:
        row.missing_slides = by_case.get(row.case_id, 0)
    out = Path(out_dir)
    paths = evaluation.write_outputs(result, cases, out)
    manifest = RunManifest("eval-cases", seeds=[seed])
    manifest.add(*paths, root=out)
    return _finish(manifest, out)


def read_ablation_csv(path):
    from .trainer import AblationTable

    rows = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            r["seed"] = int(r["seed"])
            for key in ("macro_f1", "f1_0", "f1_1", "f1_2"):
                r[key] = float(r[key])
            for key in ("best_epoch", "last_epoch"):
                r[key] = int(r[key])
            rows.append(r)
    return AblationTable(rows)


def cmd_report(ablation_csv, out_dir) -> int:
    """Regenerate the summary table and box/strip figure from an ablation CSV."""
    src = Path(ablation_csv)
    if src.is_dir():
        src = src / "ablation.csv"
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = read_ablation_csv(src)
    table.write_summary_csv(out / "ablation_summary.csv")
    groups = {c: table.values(c).tolist() for c in table.conditions()}
    plots.write(out / "ablation.svg", plots.box_strip_svg(groups, "macro F1 by condition"))
    manifest = RunManifest("report")
    manifest.add(out / "ablation_summary.csv", out / "ablation.svg", root=out)
    return _finish(manifest, out)


# argument parsing ----------------------------------------------------------------

def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "condition", None):
        cfg = cfg.with_condition(args.condition[0])
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    ds = {}
    if getattr(args, "patch_size", None):
        ds["patch_size"] = args.patch_size
    if getattr(args, "stride", None):
        ds["stride"] = args.stride
    if getattr(args, "offline", False):
        ds["offline_fallback"] = True
    if ds:
        cfg = dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, **ds))
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compseg", description="Complementary-label segmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch-data", help="download MNIST or write the offline synthetic corpus")
    p.add_argument("--out", help="target directory (default $COMPSEG_DATA_DIR/mnist)")
    p.add_argument("--offline", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("build-corpus", help="generate a synthetic slide corpus")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--condition", action="append")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--offline", action="store_true")

    p = sub.add_parser("ablation", help="run every condition over several seeds")
    p.add_argument("--config", default="ablation-mnist.toml")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="first seed when --seeds is a count")
    p.add_argument("--seeds", help="number of seeds or comma-separated list")
    p.add_argument("--condition", action="append", help="restrict to these conditions (repeatable)")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("eval-cases", help="case-level evaluation of a checkpoint on a corpus")
    p.add_argument("checkpoint")
    p.add_argument("manifest", help="corpus manifest.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--resamples", type=int, default=1000)
    p.add_argument("--all-roles", action="store_true", help="evaluate every case, not only the test role")

    p = sub.add_parser("report", help="summary table and figure from an ablation CSV")
    p.add_argument("ablation_csv")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "fetch-data":
            manifest = cmd_fetch_data(args.out, args.offline, args.seed)
            print(json.dumps(manifest, indent=2, sort_keys=True))
            return 0
        if args.command == "build-corpus":
            cfg, _ = resolve_config(args.config)
            return cmd_build_corpus(cfg, args.out, args.seed)
        if args.command == "train":
            cfg, _ = resolve_config(args.config)
            return cmd_train(_apply_overrides(cfg, args), args.out)
        if args.command == "ablation":
            return cmd_ablation(args.config, args.out, args.seeds, args.condition, args.jobs, args.seed)
        if args.command == "eval-cases":
            return cmd_eval_cases(args.checkpoint, args.manifest, args.out, args.patch_size, args.stride,
                                  args.seed, args.resamples, None if args.all_roles else ("test",))
        if args.command == "report":
            return cmd_report(args.ablation_csv, args.out)
    except (CompsegError, FileNotFoundError) as err:
        print(f"compseg: error: {err}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
