"""MNIST segmentation ablation data: 3-class masks, supervised split, complementary labels.

Classes: 0 = digit "3", 1 = digit "4", 2 = everything else (other digits and
background). A pixel belongs to the digit group of its image when its intensity
exceeds :data:`FOREGROUND_THRESHOLD`, otherwise it is class 2.
"""

from __future__ import annotations

import gzip
import hashlib
import io
import json
import logging
import struct
import tarfile
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .types import CompsegError, TransitionMatrix, unannotated

log = logging.getLogger(__name__)

K = 3
DIGIT_THREE, DIGIT_FOUR, OTHER = 0, 1, 2
CLASS_NAMES = ("digit-3", "digit-4", "other")
FOREGROUND_THRESHOLD = 0.5
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"

# gzip archives of the original distribution and their published MD5 sums
IDX_MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "http://yann.lecun.com/exdb/mnist/",
)
IDX_MD5 = {
    TRAIN_IMAGES + ".gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    TRAIN_LABELS + ".gz": "d53e105ee54ea40749a09fcbcd1e9432",
}
# npm "mnist" package: 10k original MNIST digits as JSON, used when the IDX mirrors are unreachable
NPM_TARBALL = "https://registry.npmjs.org/mnist/-/mnist-1.1.0.tgz"
NPM_SHA1 = "b83efc6af88d8db53b196665acdb50cf524bd2ba"
MANIFEST = "manifest.json"


class InsufficientData(CompsegError):
    pass


class ChecksumMismatch(CompsegError):
    def __init__(self, name: str, expected: str, actual: str):
        super().__init__(f"{name}: checksum mismatch (expected {expected}, got {actual})")
        self.name = name
        self.expected = expected
        self.actual = actual


class NetworkUnavailable(CompsegError):
    pass


class IdxFormatError(CompsegError):
    pass


# IDX files ---------------------------------------------------------------------

def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx_images(path) -> np.ndarray:
    """Read an IDX3 image file (optionally gzipped) into a uint8 ``N x R x C`` array."""
    with _open(Path(path)) as f:
        data = f.read()
    if len(data) < 16:
        raise IdxFormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, n, rows, cols = struct.unpack_from(">IIII", data, 0)
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(f"{path}: bad image magic {magic:#010x}")
    expected = 16 + n * rows * cols
    if len(data) != expected:
        raise IdxFormatError(f"{path}: expected {expected} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with _open(Path(path)) as f:
        data = f.read()
    if len(data) < 8:
        raise IdxFormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, n = struct.unpack_from(">II", data, 0)
    if magic != LABEL_MAGIC:
        raise IdxFormatError(f"{path}: bad label magic {magic:#010x}")
    if len(data) != 8 + n:
        raise IdxFormatError(f"{path}: expected {8 + n} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, offset=8).copy()


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes())


def load_mnist(data_dir) -> tuple[np.ndarray, np.ndarray]:
    """Training images scaled to [0, 1] and their digit labels."""
    data_dir = Path(data_dir)

    def find(stem):
        for name in (stem, stem + ".gz"):
            if (data_dir / name).exists():
                return data_dir / name
        raise FileNotFoundError(f"{stem} not found in {data_dir}; run `compseg fetch-data`")

    images = read_idx_images(find(TRAIN_IMAGES)).astype(np.float64) / 255.0
    labels = read_idx_labels(find(TRAIN_LABELS)).astype(np.int64)
    if len(images) != len(labels):
        raise IdxFormatError("image and label counts differ")
    return images, labels


# synthetic fallback digits -------------------------------------------------------

# stroke skeletons on a unit square, (x, y) with y pointing down
_STROKES = {
    0: [[(0.5, 0.1), (0.78, 0.25), (0.8, 0.75), (0.5, 0.9), (0.22, 0.75), (0.2, 0.25), (0.5, 0.1)]],
    1: [[(0.35, 0.25), (0.55, 0.1), (0.55, 0.9)]],
    2: [[(0.22, 0.28), (0.45, 0.1), (0.75, 0.22), (0.7, 0.45), (0.22, 0.9), (0.8, 0.9)]],
    3: [[(0.22, 0.15), (0.7, 0.12), (0.45, 0.45), (0.78, 0.65), (0.6, 0.9), (0.2, 0.85)]],
    4: [[(0.6, 0.9), (0.6, 0.1), (0.18, 0.62), (0.82, 0.62)]],
    5: [[(0.78, 0.1), (0.3, 0.1), (0.25, 0.45), (0.7, 0.48), (0.72, 0.82), (0.22, 0.88)]],
    6: [[(0.7, 0.1), (0.3, 0.45), (0.25, 0.8), (0.5, 0.92), (0.75, 0.75), (0.5, 0.55), (0.28, 0.68)]],
    7: [[(0.2, 0.12), (0.8, 0.12), (0.4, 0.9)]],
    8: [[(0.5, 0.5), (0.25, 0.3), (0.5, 0.1), (0.75, 0.3), (0.5, 0.5), (0.22, 0.72),
         (0.5, 0.92), (0.78, 0.72), (0.5, 0.5)]],
    9: [[(0.72, 0.45), (0.5, 0.55), (0.25, 0.35), (0.5, 0.1), (0.75, 0.3), (0.7, 0.9)]],
}


def synthetic_digits(n: int, seed: int = 0, size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """Render ``n`` jittered stroke digits as uint8 images; labels cycle 0..9 in shuffled order."""
    from PIL import Image, ImageDraw, ImageFilter

    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 10).astype(np.uint8)
    images = np.zeros((n, size, size), dtype=np.uint8)
    scale = 4  # supersample, then downscale for anti-aliasing
    big = size * scale
    for i, d in enumerate(labels):
        angle = rng.uniform(-0.25, 0.25)
        sx, sy = rng.uniform(0.55, 0.72, size=2)
        shear = rng.uniform(-0.2, 0.2)
        tx, ty = rng.uniform(-0.06, 0.06, size=2)
        c, s = np.cos(angle), np.sin(angle)
        canvas = Image.new("L", (big, big), 0)
        draw = ImageDraw.Draw(canvas)
        width = int(rng.integers(7, 12))
        for stroke in _STROKES[int(d)]:
            pts = np.asarray(stroke) - 0.5
            pts = pts + rng.normal(0, 0.02, size=pts.shape)
            x = pts[:, 0] * sx + shear * pts[:, 1] * sy
            y = pts[:, 1] * sy
            xr, yr = c * x - s * y + 0.5 + tx, s * x + c * y + 0.5 + ty
            draw.line([(float(a * big), float(b * big)) for a, b in zip(xr, yr)],
                      fill=255, width=width, joint="curve")
        canvas = canvas.filter(ImageFilter.GaussianBlur(scale * 0.6))
        images[i] = np.asarray(canvas.resize((size, size), Image.LANCZOS))
    return images, labels


# fetching ----------------------------------------------------------------------------

def _digest(path: Path, algo: str = "sha256") -> str:
    h = hashlib.new(algo)
    h.update(path.read_bytes())
    return h.hexdigest()


def _download(url: str, timeout: float) -> bytes:
    with urllib.request.urlopen(url, timeout=timeout) as resp:
        return resp.read()


def _write_manifest(target: Path, source: str) -> dict:
    files = {name: _digest(target / name) for name in (TRAIN_IMAGES, TRAIN_LABELS)}
    manifest = {"source": source, "sha256": files}
    (target / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def verify_data_dir(target) -> dict | None:
    """Check files against the manifest; ``None`` if there is nothing fetched yet."""
    target = Path(target)
    mpath = target / MANIFEST
    if not mpath.exists():
        return None
    manifest = json.loads(mpath.read_text())
    for name, expected in manifest["sha256"].items():
        path = target / name
        if not path.exists():
            return None
        actual = _digest(path)
        if actual != expected:
            raise ChecksumMismatch(name, expected, actual)
    return manifest


def _fetch_idx(target: Path, timeout: float) -> None:
    for name, md5 in IDX_MD5.items():
        last_err = None
        for mirror in IDX_MIRRORS:
            try:
                blob = _download(mirror + name, timeout)
                break
            except (urllib.error.URLError, OSError) as err:
                last_err = err
        else:
            raise NetworkUnavailable(f"could not download {name}: {last_err}")
        actual = hashlib.md5(blob).hexdigest()
        if actual != md5:
            raise ChecksumMismatch(name, md5, actual)
        (target / name[:-3]).write_bytes(gzip.decompress(blob))


def npm_digits_to_arrays(tarball: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Unpack the npm ``mnist`` package's per-digit JSON into uint8 images and labels."""
    images, labels = [], []
    with tarfile.open(fileobj=io.BytesIO(tarball), mode="r:gz") as tar:
        for digit in range(10):
            member = tar.getmember(f"package/src/digits/{digit}.json")
            flat = np.asarray(json.load(tar.extractfile(member))["data"], dtype=np.float64)
            imgs = np.rint(flat.reshape(-1, 28, 28) * 255).clip(0, 255).astype(np.uint8)
            images.append(imgs)
            labels.append(np.full(len(imgs), digit, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def _fetch_npm(target: Path, timeout: float) -> None:
    try:
        blob = _download(NPM_TARBALL, timeout)
    except (urllib.error.URLError, OSError) as err:
        raise NetworkUnavailable(f"could not download {NPM_TARBALL}: {err}") from err
    actual = hashlib.sha1(blob).hexdigest()
    if actual != NPM_SHA1:
        raise ChecksumMismatch(NPM_TARBALL, NPM_SHA1, actual)
    images, labels = npm_digits_to_arrays(blob)
    write_idx_images(target / TRAIN_IMAGES, images)
    write_idx_labels(target / TRAIN_LABELS, labels)


def fetch_mnist(target_dir, offline: bool = False, seed: int = 0, n_synthetic: int = 6000,
                timeout: float = 180.0) -> dict:
    """Populate ``target_dir`` with MNIST training IDX files and a checksum manifest.

    Re-running is a no-op when the manifest verifies. ``offline`` writes the
    synthetic stroke-digit corpus instead of downloading.
    """
    target = Path(target_dir)
    target.mkdir(parents=True, exist_ok=True)
    manifest = verify_data_dir(target)
    if manifest is not None and (manifest["source"] == "synthetic") == offline:
        log.info("data in %s already verified (%s)", target, manifest["source"])
        return manifest
    if offline:
        images, labels = synthetic_digits(n_synthetic, seed)
        write_idx_images(target / TRAIN_IMAGES, images)
        write_idx_labels(target / TRAIN_LABELS, labels)
        return _write_manifest(target, "synthetic")
    try:
        _fetch_idx(target, timeout)
        source = "idx"
    except NetworkUnavailable as err:
        log.warning("%s; trying npm mirror", err)
        try:
            _fetch_npm(target, timeout)
        except NetworkUnavailable as err2:
            raise NetworkUnavailable(f"{err2}; use --offline for the synthetic corpus") from err2
        source = "npm-mnist"
    return _write_manifest(target, source)


# segmentation dataset ----------------------------------------------------------------

def digit_group(digit: int) -> int:
    return {3: DIGIT_THREE, 4: DIGIT_FOUR}.get(int(digit), OTHER)


def ground_truth_mask(image: np.ndarray, digit: int) -> np.ndarray:
    mask = np.full(image.shape, OTHER, dtype=np.int64)
    mask[image > FOREGROUND_THRESHOLD] = digit_group(digit)
    return mask


def sample_complementary(gt_mask, q: TransitionMatrix, seed, mode: str = "per-pixel",
                         image_class: int | None = None) -> np.ndarray:
    """Draw complementary labels for ``gt_mask`` from the rows of ``q``.

    ``seed`` may be an int or a ``numpy.random.Generator``. In ``per-image``
    mode a single label is drawn from the row of ``image_class`` (default: the
    most frequent ground-truth class) and given to every pixel whose ground
    truth differs from it; the remaining pixels are left unannotated.
    """
    gt = np.asarray(gt_mask)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = q.k
    sentinel = unannotated(k)
    valid = gt < k
    cdf = np.cumsum(q.q, axis=1)
    cdf[:, -1] = 1.0
    if mode == "per-pixel":
        u = rng.random(gt.shape)
        rows = cdf[np.where(valid, gt, 0)]
        # count of cdf entries <= u skips zero-probability classes, incl. the diagonal
        drawn = (u[..., None] >= rows).sum(-1)
        return np.where(valid, drawn, sentinel).astype(np.int64)
    if mode == "per-image":
        if image_class is None:
            counts = np.bincount(gt[valid].ravel(), minlength=k)
            image_class = int(counts.argmax())
        label = int((rng.random() >= cdf[image_class]).sum())
        return np.where(valid & (gt != label), label, sentinel).astype(np.int64)
    raise ValueError(f"unknown sampling mode {mode!r}")


@dataclass(frozen=True)
class MnistSegSample:
    index: int
    digit: int
    image: np.ndarray
    gt_mask: np.ndarray
    compl_mask: np.ndarray
    supervised: bool

    @property
    def group(self) -> int:
        return digit_group(self.digit)

    @property
    def train_mask(self) -> np.ndarray:
        """Label mask the trainer sees: ground truth if supervised, else all unannotated."""
        if self.supervised:
            return self.gt_mask
        return np.full_like(self.gt_mask, unannotated(K))


def _stratified_pick(groups: np.ndarray, n_pick: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``n_pick`` items spread over groups proportionally (largest remainder)."""
    n = len(groups)
    uniq = np.unique(groups)
    sizes = np.array([(groups == g).sum() for g in uniq])
    quota = sizes * n_pick / n
    take = np.floor(quota).astype(int)
    rest = n_pick - take.sum()
    order = np.lexsort((uniq, -(quota - take)))
    take[order[:rest]] += 1
    picked = []
    for g, t in zip(uniq, take):
        members = np.flatnonzero(groups == g)
        picked.extend(rng.permutation(members)[:t].tolist())
    return np.sort(np.asarray(picked, dtype=np.int64))


def _subset_order(n_available: int, seed: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 0])).permutation(n_available)


def _make_samples(raw_images, raw_labels, idx, supervised, q, mode, rng) -> list[MnistSegSample]:
    out = []
    for i, sup in zip(idx, supervised):
        image = np.asarray(raw_images[i], dtype=np.float64)
        if image.max() > 1.0:
            image = image / 255.0
        digit = int(raw_labels[i])
        gt = ground_truth_mask(image, digit)
        if q is None:
            compl = np.full_like(gt, unannotated(K))
        else:
            compl = sample_complementary(gt, q, rng, mode, image_class=digit_group(digit))
        out.append(MnistSegSample(int(i), digit, image, gt, compl, bool(sup)))
    return out


def build_dataset(raw_images, raw_digit_labels, n: int, supervised_fraction: float, seed: int,
                  q: TransitionMatrix | None = None, mode: str = "per-pixel") -> list[MnistSegSample]:
    """Draw ``n`` samples, mark ``round(n * supervised_fraction)`` as supervised.

    The supervised subset is stratified by digit group. Complementary labels are
    sampled from ``q`` for every sample when it is given.
    """
    if not 0 < supervised_fraction <= 1:
        raise ValueError("supervised_fraction must lie in (0, 1]")
    if n > len(raw_images) or n < 1:
        raise InsufficientData(f"requested {n} samples, {len(raw_images)} available")
    idx = _subset_order(len(raw_images), seed)[:n]
    groups = np.array([digit_group(raw_digit_labels[i]) for i in idx])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    chosen = _stratified_pick(groups, int(round(n * supervised_fraction)), rng)
    supervised = np.zeros(n, dtype=bool)
    supervised[chosen] = True
    crng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    return _make_samples(raw_images, raw_digit_labels, idx, supervised, q, mode, crng)


def build_eval_split(raw_images, raw_digit_labels, n: int, seed: int,
                     eval_fraction: float = 0.2) -> list[MnistSegSample]:
    """Fully labelled evaluation samples, disjoint from ``build_dataset(..., n, ..., seed)``."""
    n_eval = int(round(n * eval_fraction))
    if n + n_eval > len(raw_images):
        raise InsufficientData(f"need {n + n_eval} images for train + eval, have {len(raw_images)}")
    idx = _subset_order(len(raw_images), seed)[n:n + n_eval]
    return _make_samples(raw_images, raw_digit_labels, idx, np.ones(len(idx), bool), None, None, None)


def stack(samples: list[MnistSegSample]) -> dict[str, np.ndarray]:
    """Arrays for training: images ``N x 28 x 28 x 1`` plus label masks."""
    return {
        "images": np.stack([s.image for s in samples])[..., None].astype(np.float32),
        "gt": np.stack([s.gt_mask for s in samples]),
        "train": np.stack([s.train_mask for s in samples]),
        "compl": np.stack([s.compl_mask for s in samples]),
        "supervised": np.array([s.supervised for s in samples]),
    }
