"""Dataset manifests, image/mask loading and a synthetic lesion generator.

Manifest format (UTF-8 text)::

    # comments start with '#'
    # target_size: 64x64
    # seed: 0
    <id>\t<image_path>\t<mask_path>[\t<fold>]

Relative paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import os
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, ManifestError, MissingFileError, SizeMismatchError
from .tensor import Tensor

DEFAULT_TARGET_SIZE = (64, 64)
_DIRECTIVE = re.compile(r"^#\s*(target_size|seed)\s*:\s*(.+?)\s*$")


@dataclass(frozen=True)
class Sample:
    id: str
    image_path: str
    mask_path: str
    split_fold: Optional[int] = None


@dataclass
class DatasetManifest:
    samples: list
    target_size: tuple = DEFAULT_TARGET_SIZE
    seed: int = 0
    base_dir: Optional[Path] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.target_size = tuple(int(v) for v in self.target_size)
        h, w = self.target_size
        if h < 16 or w < 16 or h % 16 or w % 16:
            raise ManifestError(f"target_size {h}x{w} must be a positive multiple of 16")
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise ManifestError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)

    def __len__(self):
        return len(self.samples)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        return p

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest([self.samples[i] for i in indices], self.target_size, self.seed, self.base_dir)


def write_manifest(manifest: DatasetManifest, path) -> None:
    h, w = manifest.target_size
    lines = ["# bagnet dataset manifest", f"# target_size: {h}x{w}", f"# seed: {manifest.seed}"]
    for s in manifest.samples:
        for value in (s.id, s.image_path, s.mask_path):
            if "\t" in value or "\n" in value:
                raise ManifestError(f"sample {s.id!r}: fields may not contain tabs or newlines")
        row = [s.id, s.image_path, s.mask_path]
        if s.split_fold is not None:
            row.append(str(s.split_fold))
        lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_manifest(path) -> DatasetManifest:
    path = Path(path)
    target_size, seed = DEFAULT_TARGET_SIZE, 0
    samples, seen = [], {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        if line.startswith("#"):
            m = _DIRECTIVE.match(line)
            if m and m.group(1) == "target_size":
                parts = re.split(r"[x, ]+", m.group(2))
                try:
                    target_size = (int(parts[0]), int(parts[1]))
                except (ValueError, IndexError):
                    raise ManifestError(f"{path}:{lineno}: bad target_size {m.group(2)!r}") from None
            elif m:
                try:
                    seed = int(m.group(2))
                except ValueError:
                    raise ManifestError(f"{path}:{lineno}: bad seed {m.group(2)!r}") from None
            continue
        fields_ = line.split("\t")
        if len(fields_) not in (3, 4) or not all(f.strip() for f in fields_[:3]):
            raise ManifestError(f"{path}:{lineno}: expected 3 or 4 tab-separated fields, got {len(fields_)}")
        fold = None
        if len(fields_) == 4 and fields_[3].strip():
            try:
                fold = int(fields_[3])
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: fold must be an integer, got {fields_[3]!r}") from None
        sid = fields_[0]
        if sid in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate sample id {sid!r} (first seen on line {seen[sid]})")
        seen[sid] = lineno
        samples.append(Sample(sid, fields_[1], fields_[2], fold))

    try:
        manifest = DatasetManifest(samples, target_size, seed, base_dir=path.parent)
    except ManifestError as e:
        raise ManifestError(f"{path}: {e}") from None
    for s in samples:
        for p in (s.image_path, s.mask_path):
            if not manifest.resolve(p).exists():
                warnings.warn(f"manifest {path}: sample {s.id!r} references missing file {p}", stacklevel=2)
    return manifest


def read_gray(path: Path, sample_id: str) -> np.ndarray:
    if not path.exists():
        raise MissingFileError(sample_id, f"file not found: {path}")
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode == "L":
                return np.asarray(img, dtype=np.float64)
            if img.mode == "1":
                return np.asarray(img, dtype=np.float64) * 255.0
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
            return rgb.mean(axis=2)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise DecodeError(sample_id, f"cannot decode {path}: {e}") from e


def load_sample(sample: Sample, target_size, base_dir=None):
    """Return ``(image, mask)`` tensors of shape (1, 1, h, w).

    The image is scaled to [0, 1] and resized bilinearly; the mask is
    binarised (nonzero is lesion) and resized with nearest neighbour.
    """
    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() or base_dir is None else Path(base_dir) / p

    image = read_gray(resolve(sample.image_path), sample.id)
    mask = read_gray(resolve(sample.mask_path), sample.id)
    if image.shape != mask.shape:
        raise SizeMismatchError(sample.id, f"image size {image.shape} differs from mask size {mask.shape}")

    h, w = (int(v) for v in target_size)
    img = Image.fromarray((image / 255.0).astype(np.float32)).resize((w, h), Image.Resampling.BILINEAR)
    img_arr = np.clip(np.asarray(img, dtype=np.float32), 0.0, 1.0)
    msk = Image.fromarray((mask != 0).astype(np.uint8)).resize((w, h), Image.Resampling.NEAREST)
    msk_arr = np.asarray(msk, dtype=np.float32)
    return Tensor(img_arr.reshape(1, 1, h, w)), Tensor(msk_arr.reshape(1, 1, h, w))


def load_manifest_arrays(manifest: DatasetManifest, target_size=None):
    """Stack every sample into ``(images, masks)`` arrays of shape (n, 1, h, w)."""
    size = target_size or manifest.target_size
    images, masks = [], []
    for s in manifest.samples:
        img, msk = load_sample(s, size, manifest.base_dir)
        images.append(img.data)
        masks.append(msk.data)
    if not images:
        h, w = size
        return np.zeros((0, 1, h, w), np.float32), np.zeros((0, 1, h, w), np.float32)
    return np.concatenate(images), np.concatenate(masks)


# --------------------------------------------------------------------------
# Synthetic lesions
# --------------------------------------------------------------------------

FOREGROUND_RANGE = (0.05, 0.40)


def _ellipse_mask(rng, h, w) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    lo, hi = FOREGROUND_RANGE
    while True:
        frac = rng.uniform(0.08, 0.30)
        aspect = rng.uniform(0.6, 1.6)
        area = frac * h * w / np.pi
        a, b = np.sqrt(area * aspect), np.sqrt(area / aspect)
        cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
        theta = rng.uniform(0.0, np.pi)
        dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        if lo <= mask.mean() <= hi:
            return mask


def synth_pair(rng, h: int, w: int):
    """One (image, mask) uint8 pair: a dark speckled ellipse on brighter tissue."""
    mask = _ellipse_mask(rng, h, w)
    background = rng.uniform(0.5, 0.65)
    lesion = background - rng.uniform(0.25, 0.35)
    base = np.where(mask, lesion, background)
    looks = 8.0
    speckle = rng.gamma(looks, 1.0 / looks, size=(h, w))
    noisy = base * speckle + rng.normal(0.0, 0.03, size=(h, w))
    image = np.clip(np.rint(noisy * 255.0), 0, 255).astype(np.uint8)
    return image, mask.astype(np.uint8) * 255


def synth_dataset(n: int, size=DEFAULT_TARGET_SIZE, seed: int = 0, out_dir=".") -> DatasetManifest:
    """Write ``n`` synthetic image/mask PNGs plus ``manifest.tsv`` into ``out_dir``."""
    h, w = (int(v) for v in size)
    if n < 1:
        raise ValueError("n must be >= 1")
    if h < 16 or w < 16 or h % 16 or w % 16:
        raise ValueError(f"size {h}x{w} must be a positive multiple of 16")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")

    samples = []
    width = max(3, len(str(n - 1)))
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        image, mask = synth_pair(rng, h, w)
        sid = f"synth_{i:0{width}d}"
        img_rel, msk_rel = f"images/{sid}.png", f"masks/{sid}.png"
        Image.fromarray(image).save(out / img_rel)
        Image.fromarray(mask).save(out / msk_rel)
        samples.append(Sample(sid, img_rel, msk_rel))
    manifest = DatasetManifest(samples, (h, w), seed, base_dir=out)
    write_manifest(manifest, out / "manifest.tsv")
    return manifest
