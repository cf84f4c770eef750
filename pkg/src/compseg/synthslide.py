"""Synthetic multi-region "slides", grid patch extraction and Lab colour augmentation.

Classes: 0 = tumour type A, 1 = tumour type B, 2 = other tissue. A slide of a
case diagnosed with A never contains B pixels and vice versa. The two tumour
types share colour and differ only in stripe frequency and orientation; the
``separation`` parameter scales that difference.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .types import CompsegError

K = 3
CLASS_A, CLASS_B, OTHER = 0, 1, 2
CLASS_NAMES = ("tumor-a", "tumor-b", "other")
TUMOR_CLASSES = (CLASS_A, CLASS_B)
LOG_FLOOR = 1e-6

# RGB -> LMS of the colour-transfer literature; the inverse is computed, not rounded
RGB_TO_LMS = np.array([[0.3811, 0.5783, 0.0402],
                       [0.1967, 0.7244, 0.0782],
                       [0.0241, 0.1288, 0.8444]])
LMS_TO_RGB = np.linalg.inv(RGB_TO_LMS)
LOGLMS_TO_LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array(
    [[1, 1, 1], [1, 1, -2], [1, -1, 0]], dtype=np.float64)
LAB_TO_LOGLMS = np.linalg.inv(LOGLMS_TO_LAB)


class PatchLargerThanSlide(CompsegError):
    pass


class DegenerateStd(CompsegError):
    pass


def splitmix64(seed: int, index: int) -> int:
    """Seed for item ``index`` derived from ``seed`` with one SplitMix64 step.

    The state is ``seed + (index + 1) * 0x9E3779B97F4A7C15`` (mod 2**64),
    followed by the standard SplitMix64 finaliser.
    """
    mask = (1 << 64) - 1
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) & mask
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return z ^ (z >> 31)


# slides ------------------------------------------------------------------------

@dataclass(frozen=True)
class TextureParams:
    separation: float = 1.0
    tumor_share: tuple[float, float] = (0.2, 0.5)
    period: float = 4.0          # stripe period of tumour A, in pixels
    stripe_contrast: float = 0.45
    noise: float = 0.04
    color_cast: float = 0.06


DIFFICULTY = {
    "easy": TextureParams(separation=1.0),
    "medium": TextureParams(separation=0.5, noise=0.06),
    "hard": TextureParams(separation=0.2, noise=0.08),
}


def texture_params(difficulty) -> TextureParams:
    if isinstance(difficulty, TextureParams):
        return difficulty
    if isinstance(difficulty, (int, float)):
        return TextureParams(separation=float(difficulty))
    return DIFFICULTY[difficulty]


@dataclass
class SyntheticSlide:
    image: np.ndarray
    gt_mask: np.ndarray
    case_id: str
    diagnosis: int
    slide_id: str = ""


def _blob_mask(rng, size: int, share: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 14, mode="wrap")
    n_on = int(round(share * size * size))
    order = np.argsort(field_, axis=None)[::-1]
    mask = np.zeros(size * size, dtype=bool)
    mask[order[:n_on]] = True
    return mask.reshape(size, size)


def generate_slide(seed: int, diagnosis: int, size: int = 1024, texture: TextureParams | str = "easy",
                   case_id: str = "", slide_id: str = "") -> SyntheticSlide:
    """Render one slide: striped tumour blobs of the diagnosed class on "other" tissue.

    Pixel values are quantised to multiples of 1/255 so PNG storage is lossless.
    """
    if diagnosis not in TUMOR_CLASSES:
        raise ValueError(f"diagnosis must be one of {TUMOR_CLASSES}")
    tp = texture_params(texture)
    rng = np.random.default_rng(seed)
    lo, hi = tp.tumor_share
    share = rng.uniform(lo, hi)
    n_px = size * size
    share = min(max(round(share * n_px), int(np.ceil(lo * n_px))), int(np.floor(hi * n_px))) / n_px
    tumor = _blob_mask(rng, size, share)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # tumour A: horizontal-ish fine stripes; B rotates and coarsens with separation
    theta = rng.normal(0, 0.08) + (np.pi / 2 * tp.separation if diagnosis == CLASS_B else 0.0)
    period = tp.period * (1 + 1.5 * tp.separation if diagnosis == CLASS_B else 1.0)
    period *= rng.uniform(0.92, 1.08)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi / period * (xx * np.sin(theta) + yy * np.cos(theta)) + phase)

    grain = ndimage.gaussian_filter(rng.normal(size=(size, size)), 1.0)
    grain /= grain.std() + 1e-12
    smooth = ndimage.gaussian_filter(rng.normal(size=(size, size)), 6.0)
    smooth /= smooth.std() + 1e-12

    eosin = np.array([0.93, 0.78, 0.86])
    hematoxylin = np.array([0.50, 0.32, 0.62])
    other = eosin[None, None, :] * (1 - 0.05 * smooth[..., None])
    tumor_rgb = hematoxylin[None, None, :] * (1 - tp.stripe_contrast * stripes[..., None] + 0.2)
    image = np.where(tumor[..., None], tumor_rgb, other)
    image = image + tp.noise * grain[..., None]

    cast = rng.normal(1.0, tp.color_cast, size=3)
    offset = rng.normal(0.0, tp.color_cast / 2, size=3)
    image = np.clip(image * cast + offset, 0.0, 1.0)
    image = np.rint(image * 255) / 255

    gt = np.where(tumor, diagnosis, OTHER).astype(np.int64)
    return SyntheticSlide(image, gt, case_id, diagnosis, slide_id)


# patch grid --------------------------------------------------------------------

@dataclass
class PatchGrid:
    patches: np.ndarray
    coords: list[tuple[int, int]]
    patch_size: int


def grid_coords(height: int, width: int, patch_size: int, stride: int) -> list[tuple[int, int]]:
    """Top-left corners ``(i * stride * P, j * stride * P)`` of fully contained patches, row-major."""
    if patch_size > height or patch_size > width:
        raise PatchLargerThanSlide(f"patch size {patch_size} exceeds slide {height}x{width}")
    if stride < 1:
        raise ValueError("stride must be >= 1 patch length")
    step = stride * patch_size
    rows = range(0, height - patch_size + 1, step)
    cols = range(0, width - patch_size + 1, step)
    return [(r, c) for r in rows for c in cols]


def grid_patches(image: np.ndarray, patch_size: int, stride: int) -> PatchGrid:
    """Extract patches on a regular grid; ``stride`` is measured in patch lengths."""
    image = np.asarray(image)
    coords = grid_coords(image.shape[0], image.shape[1], patch_size, stride)
    patches = np.stack([image[r:r + patch_size, c:c + patch_size] for r, c in coords])
    return PatchGrid(patches, coords, patch_size)


def stitch(shape: tuple[int, int], coords, patch_maps, fill: int) -> np.ndarray:
    """Paste per-patch label maps into a slide-sized map; uncovered pixels get ``fill``."""
    out = np.full(shape, fill, dtype=np.int64)
    for (r, c), m in zip(coords, patch_maps):
        out[r:r + m.shape[0], c:c + m.shape[1]] = m
    return out


# Lab colour space --------------------------------------------------------------

def rgb_to_lab(image) -> np.ndarray:
    """RGB in [0, 1] to the decorrelated l-alpha-beta space (log10 LMS based)."""
    rgb = np.asarray(image, dtype=np.float64)
    lms = rgb @ RGB_TO_LMS.T
    return np.log10(np.maximum(lms, LOG_FLOOR)) @ LOGLMS_TO_LAB.T


def lab_to_rgb(lab) -> np.ndarray:
    loglms = np.asarray(lab, dtype=np.float64) @ LAB_TO_LOGLMS.T
    return (10.0 ** loglms) @ LMS_TO_RGB.T


@dataclass(frozen=True)
class ColorStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.std) <= 0):
            raise DegenerateStd("colour std must be positive on every axis")

    def to_dict(self) -> dict:
        return {"mean": np.asarray(self.mean).tolist(), "std": np.asarray(self.std).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ColorStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass(frozen=True)
class ColorPopulation:
    """Gaussians fitted over per-case Lab means and stds."""

    mean_loc: np.ndarray
    mean_scale: np.ndarray
    std_loc: np.ndarray
    std_scale: np.ndarray

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}


def color_stats(images) -> ColorStats:
    """Per-axis Lab mean and std over all pixels of one or more RGB images."""
    if isinstance(images, np.ndarray):
        images = [images]
    lab = np.concatenate([rgb_to_lab(im).reshape(-1, 3) for im in images])
    std = lab.std(0)
    if np.any(std < 1e-6):
        raise DegenerateStd(f"Lab std {std} below 1e-6")
    return ColorStats(lab.mean(0), std)


def fit_population(stats: list[ColorStats]) -> ColorPopulation:
    means = np.stack([s.mean for s in stats])
    stds = np.stack([s.std for s in stats])
    return ColorPopulation(means.mean(0), means.std(0), stds.mean(0), stds.std(0))


def reinhard_lab(lab: np.ndarray, source: ColorStats, target_mean, target_std) -> np.ndarray:
    """Standardise ``lab`` with ``source`` stats and rescale to the target stats."""
    if np.any(np.asarray(source.std) < 1e-6):
        raise DegenerateStd(f"case std {source.std} below 1e-6")
    return (lab - source.mean) / source.std * np.asarray(target_std) + np.asarray(target_mean)


def transfer_color(patch, source: ColorStats, target_mean, target_std) -> np.ndarray:
    lab = reinhard_lab(rgb_to_lab(patch), source, target_mean, target_std)
    return np.clip(lab_to_rgb(lab), 0.0, 1.0)


def draw_color_target(population: ColorPopulation, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw a target mean and std from the population Gaussians.

    Drawn stds are floored at 10% of the population's mean std.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    mean = rng.normal(population.mean_loc, population.mean_scale)
    std = rng.normal(population.std_loc, population.std_scale)
    std = np.maximum(std, 0.1 * np.asarray(population.std_loc))
    return mean, std


def lab_color_augment(patch, case_stats: ColorStats, population: ColorPopulation, seed) -> np.ndarray:
    mean, std = draw_color_target(population, seed)
    return transfer_color(patch, case_stats, mean, std)


def geometric_augment(rng, image: np.ndarray, *masks: np.ndarray):
    """Random right-angle rotation and horizontal flip applied jointly to image and masks."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    turns = int(rng.integers(4))
    flip = bool(rng.integers(2))

    def f(a):
        a = np.rot90(a, turns, axes=(0, 1))
        return np.ascontiguousarray(a[:, ::-1] if flip else a)

    return (f(image),) + tuple(f(m) for m in masks)


# corpus ------------------------------------------------------------------------

ROLES = ("annotated", "complementary", "validation", "test")


@dataclass
class SyntheticCase:
    case_id: str
    diagnosis: int
    role: str
    slides: list[SyntheticSlide] = field(default_factory=list)
    stats: ColorStats | None = None


def build_corpus(roles: dict[str, int], seed: int = 0, difficulty="easy", slide_size: int = 1024,
                 slides_per_case: int = 1) -> list[SyntheticCase]:
    """Generate cases for each role; diagnoses alternate A/B within a role.

    Case ``i`` (in role order) renders from seed ``splitmix64(seed, i)``.
    """
    unknown = set(roles) - set(ROLES)
    if unknown:
        raise ValueError(f"unknown roles {sorted(unknown)}")
    tp = texture_params(difficulty)
    cases = []
    i = 0
    for role in ROLES:
        for r in range(roles.get(role, 0)):
            case_seed = splitmix64(seed, i)
            diagnosis = TUMOR_CLASSES[r % 2]
            case_id = f"case{i:03d}"
            slides = [generate_slide(splitmix64(case_seed, s), diagnosis, slide_size, tp, case_id,
                                     f"{case_id}_s{s}") for s in range(slides_per_case)]
            cases.append(SyntheticCase(case_id, diagnosis, role, slides,
                                       color_stats([s.image for s in slides])))
            i += 1
    return cases


def save_corpus(cases: list[SyntheticCase], out_dir) -> Path:
    """Write PNG slides, PNG masks, a JSON sidecar per slide and ``manifest.csv``."""
    from PIL import Image

    out = Path(out_dir)
    (out / "slides").mkdir(parents=True, exist_ok=True)
    rows = []
    for case in cases:
        sidecars = []
        for slide in case.slides:
            img_name = f"slides/{slide.slide_id}.png"
            mask_name = f"slides/{slide.slide_id}_mask.png"
            Image.fromarray(np.rint(slide.image * 255).astype(np.uint8)).save(out / img_name)
            Image.fromarray(slide.gt_mask.astype(np.uint8)).save(out / mask_name)
            side = {"case_id": case.case_id, "slide_id": slide.slide_id, "diagnosis": case.diagnosis,
                    "image": img_name, "mask": mask_name,
                    "color_stats": case.stats.to_dict() if case.stats else None}
            side_name = f"slides/{slide.slide_id}.json"
            (out / side_name).write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
            sidecars.append(side_name)
        rows.append({"case_id": case.case_id, "diagnosis": case.diagnosis, "role": case.role,
                     "slides": ";".join(sidecars)})
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["case_id", "diagnosis", "role", "slides"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return manifest


def load_corpus(manifest, missing: list | None = None) -> list[SyntheticCase]:
    """Read a corpus written by :func:`save_corpus`.

    Slides whose files are missing are skipped and their paths appended to
    ``missing`` when a list is given; otherwise a ``FileNotFoundError`` is raised.
    """
    from PIL import Image

    manifest = Path(manifest)
    root = manifest.parent
    cases = []
    with open(manifest, newline="") as f:
        for row in csv.DictReader(f):
            slides = []
            stats = None
            for side_name in filter(None, row["slides"].split(";")):
                try:
                    side = json.loads((root / side_name).read_text())
                    image = np.asarray(Image.open(root / side["image"]), dtype=np.float64) / 255
                    mask = np.asarray(Image.open(root / side["mask"]), dtype=np.int64)
                except FileNotFoundError:
                    if missing is None:
                        raise
                    missing.append((row["case_id"], side_name))
                    continue
                if side.get("color_stats"):
                    stats = ColorStats.from_dict(side["color_stats"])
                slides.append(SyntheticSlide(image[..., :3], mask, row["case_id"], int(row["diagnosis"]),
                                             side["slide_id"]))
            cases.append(SyntheticCase(row["case_id"], int(row["diagnosis"]), row.get("role", "test"),
                                       slides, stats))
    return cases
