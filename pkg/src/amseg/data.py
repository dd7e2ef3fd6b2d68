"""Rasters, windowing, the on-disk corpus layout, and fold splitting.

A corpus is a directory holding 8-bit grayscale PNG images, binary mask
PNGs, optionally the raw attenuation grids they were rendered from, and one
tab-separated manifest binding each image/mask pair to a patient identifier.
Splitting happens at the patient level so no patient contributes to both
sides of a fold.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ValidationError

__all__ = [
    "WindowSpec", "window_hu",
    "save_hu_grid", "load_hu_grid", "HU_MAGIC",
    "SampleRecord", "Manifest", "MANIFEST_HEADER", "load_manifest", "save_manifest",
    "SyntheticSpec", "SyntheticSample", "generate_synthetic", "write_synthetic_dataset",
    "load_pair", "kfold_split",
]

HU_MAGIC = b"HU16"
MANIFEST_HEADER = "medseg-manifest v1"
HU_MIN, HU_MAX = -1024, 3071


# -- attenuation windowing ---------------------------------------------------------


@dataclass(frozen=True)
class WindowSpec:
    """Linear display window over attenuation values: ``level`` centres the
    window, ``width`` spans it."""

    level: float = 30.0
    width: float = 520.0

    def __post_init__(self):
        if self.width <= 0:
            raise ValidationError(f"window width must be positive, got {self.width}")


def window_hu(hu: np.ndarray, spec: WindowSpec = WindowSpec()) -> np.ndarray:
    """Map attenuation values to display bytes.

    Values are clamped to the window, scaled linearly to [0, 1], and
    quantised as ``floor(255*t + 0.5)`` (halves round up).  The lower edge
    maps to 0, the upper edge to 255.
    """
    lower = spec.level - spec.width / 2.0
    t = np.clip((np.asarray(hu, dtype=np.float64) - lower) / spec.width, 0.0, 1.0)
    return np.floor(255.0 * t + 0.5).astype(np.uint8)


# -- raw attenuation grids ----------------------------------------------------------


def save_hu_grid(path, grid: np.ndarray) -> None:
    """Write a 2-d int16 attenuation grid: magic, u32 width, u32 height
    (little endian), then row-major int16 samples."""
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.dtype != np.int16:
        raise ValidationError(f"attenuation grid must be 2-d int16, got "
                              f"{grid.dtype} with shape {grid.shape}")
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(HU_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(grid.astype("<i2").tobytes())


def load_hu_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != HU_MAGIC:
        raise ValidationError(f"{path}: not an attenuation grid (bad magic or header)")
    w, h = struct.unpack("<II", blob[4:12])
    expected = 12 + 2 * w * h
    if len(blob) != expected:
        raise ValidationError(f"{path}: expected {expected} bytes for {w}x{h}, "
                              f"found {len(blob)}")
    return np.frombuffer(blob, dtype="<i2", offset=12).reshape(h, w).astype(np.int16)


# -- manifest -----------------------------------------------------------------------


@dataclass(frozen=True)
class SampleRecord:
    patient_id: str
    image_path: Path
    mask_path: Path


@dataclass(frozen=True)
class Manifest:
    records: tuple

    def __len__(self) -> int:
        return len(self.records)

    def patients(self) -> list:
        return sorted({r.patient_id for r in self.records})


def save_manifest(path, manifest: Manifest) -> None:
    path = Path(path)
    lines = [MANIFEST_HEADER]
    for r in manifest.records:
        image = _relative_if_possible(r.image_path, path.parent)
        mask = _relative_if_possible(r.mask_path, path.parent)
        lines.append(f"{r.patient_id}\t{image}\t{mask}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _relative_if_possible(target: Path, base: Path) -> str:
    try:
        return Path(target).relative_to(base).as_posix()
    except ValueError:
        return Path(target).as_posix()


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError:
        raise
    lines = text.splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ValidationError(f"{path}: missing manifest header {MANIFEST_HEADER!r}")
    records = []
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ValidationError(f"{path}:{number}: expected 3 tab-separated fields, "
                                  f"got {len(fields)}")
        patient, image, mask = (f.strip() for f in fields)
        if not patient:
            raise ValidationError(f"{path}:{number}: empty patient id")
        records.append(SampleRecord(
            patient_id=patient,
            image_path=_resolve(image, path.parent),
            mask_path=_resolve(mask, path.parent)))
    if not records:
        raise ValidationError(f"{path}: manifest lists no samples")
    return Manifest(records=tuple(records))


def _resolve(entry: str, base: Path) -> Path:
    p = Path(entry)
    return p if p.is_absolute() else base / p


# -- synthetic corpus ----------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the generated corpus: wobbled elliptical foreground
    blobs over a textured background, rendered through the default window."""

    image_size: int = 64
    blob_count_range: tuple = (1, 3)
    foreground_hu: tuple = (20.0, 90.0)
    background_hu: tuple = (-120.0, -40.0)
    noise_sigma: float = 9.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ValidationError("image_size must be at least 8")
        lo, hi = self.blob_count_range
        if lo < 1 or hi < lo:
            raise ValidationError(f"bad blob_count_range {self.blob_count_range}")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be non-negative")


@dataclass(frozen=True)
class SyntheticSample:
    patient_id: str
    hu: np.ndarray       # int16 (S, S)
    image: np.ndarray    # uint8 (S, S)
    mask: np.ndarray     # uint8 (S, S), values {0, 1}


def _draw_mask(rng: np.random.Generator, size: int, blob_range: tuple) -> np.ndarray:
    """A union of wobbled ellipses covering a fraction of the frame in
    (0, 0.5); parameters are redrawn until that holds."""
    ys, xs = np.mgrid[0:size, 0:size]
    yy = (ys + 0.5) / size * 2.0 - 1.0
    xx = (xs + 0.5) / size * 2.0 - 1.0
    for _ in range(200):
        mask = np.zeros((size, size), dtype=bool)
        blobs = int(rng.integers(blob_range[0], blob_range[1] + 1))
        for _ in range(blobs):
            cx, cy = rng.uniform(-0.45, 0.45, size=2)
            a, b = rng.uniform(0.18, 0.42, size=2)
            theta = rng.uniform(0.0, np.pi)
            amp = rng.uniform(0.05, 0.22)
            lobes = int(rng.integers(2, 6))
            phase = rng.uniform(0.0, 2 * np.pi)
            u = np.cos(theta) * (xx - cx) + np.sin(theta) * (yy - cy)
            v = -np.sin(theta) * (xx - cx) + np.cos(theta) * (yy - cy)
            rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
            wobble = 1.0 + amp * np.sin(lobes * np.arctan2(v, u) + phase)
            mask |= rho <= wobble
        fraction = mask.mean()
        if 0.0 < fraction < 0.5:
            return mask
    raise ValidationError("could not draw a foreground fraction in (0, 0.5)")


def generate_synthetic(spec: SyntheticSpec, count: int) -> list:
    """Deterministic samples; consecutive pairs share a pseudo patient."""
    if count < 1:
        raise ValidationError("count must be positive")
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    ys, xs = np.mgrid[0:size, 0:size]
    yy = (ys + 0.5) / size * 2.0 - 1.0
    xx = (xs + 0.5) / size * 2.0 - 1.0
    samples = []
    for index in range(count):
        mask = _draw_mask(rng, size, spec.blob_count_range)
        background = rng.uniform(*spec.background_hu)
        foreground = rng.uniform(*spec.foreground_hu)
        texture = np.zeros((size, size))
        for _ in range(2):
            fx, fy = rng.uniform(1.0, 4.0, size=2) * np.pi
            texture += rng.uniform(3.0, 10.0) * np.cos(fx * xx + fy * yy
                                                       + rng.uniform(0, 2 * np.pi))
        noise = rng.normal(0.0, spec.noise_sigma, size=(size, size))
        hu = np.where(mask, foreground, background) + texture + noise
        hu = np.clip(np.floor(hu + 0.5), HU_MIN, HU_MAX).astype(np.int16)
        samples.append(SyntheticSample(
            patient_id=f"p{index // 2:03d}",
            hu=hu,
            image=window_hu(hu),
            mask=mask.astype(np.uint8)))
    return samples


def write_synthetic_dataset(out_dir, spec: SyntheticSpec, count: int) -> Path:
    """Render a corpus to disk and return the manifest path.

    Layout: ``images/sample_NNN.png``, ``masks/sample_NNN.png`` ({0, 255}),
    ``hu/sample_NNN.hu16``, and ``manifest.tsv``.  Output is a pure function
    of the spec and count, so rerunning overwrites identical bytes.
    """
    out_dir = Path(out_dir)
    for sub in ("images", "masks", "hu"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for i, sample in enumerate(generate_synthetic(spec, count)):
        stem = f"sample_{i:03d}"
        image_path = out_dir / "images" / f"{stem}.png"
        mask_path = out_dir / "masks" / f"{stem}.png"
        Image.fromarray(sample.image, mode="L").save(image_path)
        Image.fromarray(sample.mask * np.uint8(255), mode="L").save(mask_path)
        save_hu_grid(out_dir / "hu" / f"{stem}.hu16", sample.hu)
        records.append(SampleRecord(sample.patient_id, image_path, mask_path))
    manifest_path = out_dir / "manifest.tsv"
    save_manifest(manifest_path, Manifest(records=tuple(records)))
    return manifest_path


# -- loading -------------------------------------------------------------------------


def load_pair(record: SampleRecord, size: Optional[int] = None) -> tuple:
    """Load one sample as ``(image, mask)``: float32 (3, H, W) in [0, 1] and
    float32 (1, H, W) in {0, 1}.

    Grayscale image bytes are replicated across the three input channels.
    Mask bytes above 127 count as foreground.  When ``size`` differs from
    the stored extent the image resamples bilinearly and the mask by nearest
    neighbour.
    """
    image = Image.open(record.image_path).convert("L")
    mask = Image.open(record.mask_path).convert("L")
    if image.size != mask.size:
        raise ValidationError(f"{record.image_path}: image {image.size} and mask "
                              f"{mask.size} extents differ")
    if size is not None and image.size != (size, size):
        image = image.resize((size, size), Image.BILINEAR)
        mask = mask.resize((size, size), Image.NEAREST)
    pixels = np.asarray(image, dtype=np.float32) / 255.0
    binary = (np.asarray(mask) > 127).astype(np.float32)
    return np.repeat(pixels[None], 3, axis=0), binary[None]


def kfold_split(manifest: Manifest, k: int, seed: int = 0) -> list:
    """Patient-level folds: ``k`` disjoint validation groups of patients,
    shuffled deterministically, covering every sample exactly once.

    Returns ``[(train_indices, val_indices), ...]`` into
    ``manifest.records``.
    """
    if k < 2:
        raise ValidationError(f"k must be at least 2, got {k}")
    patients = manifest.patients()
    if len(patients) < k:
        raise ValidationError(f"{len(patients)} patients cannot fill {k} folds")
    order = list(patients)
    np.random.default_rng(seed).shuffle(order)
    groups = [list(g) for g in np.array_split(np.asarray(order, dtype=object), k)]
    folds = []
    for group in groups:
        val_patients = set(group)
        val = [i for i, r in enumerate(manifest.records) if r.patient_id in val_patients]
        train = [i for i, r in enumerate(manifest.records)
                 if r.patient_id not in val_patients]
        folds.append((train, val))
    return folds
