"""Volume ingestion, slice extraction, preprocessing, patient splitting,
few-shot subsetting, and synthetic phantom generation.

All randomized operations are pure functions of (inputs, seed): same seed,
same output, bit for bit. Arrays held by Volume/SliceSample are frozen
(read-only) after construction so parallel slice loading stays safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .nifti import read_nifti, write_nifti

VIT_INPUT_SIZE = 448
BASELINE_INPUT_SIZE = 320
CORPUS_PAD_DEFAULT = 640

# channel statistics of the backbone publisher's pretraining corpus
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

DEFAULT_IMAGE_GLOB = "*_image.nii.gz"
DEFAULT_LABEL_GLOB = "*_label.nii.gz"


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    """A patient's 3D intensity grid plus the paired binary label grid.

    voxels and labels are (height, width, slices); labels hold {0, 1}.
    """

    voxels: np.ndarray
    labels: np.ndarray
    patient_id: str
    spacing: tuple[float, float, float] | None = None

    def __post_init__(self):
        voxels = np.asarray(self.voxels, dtype=np.float32)
        labels = np.asarray(self.labels)
        if voxels.ndim != 3:
            raise ValueError(f"volume must be 3D, got ndim={voxels.ndim}")
        if voxels.shape != labels.shape:
            raise ValueError(
                f"image/label shape mismatch: {voxels.shape} vs {labels.shape}"
            )
        if min(voxels.shape) < 1:
            raise ValueError(f"degenerate volume shape {voxels.shape}")
        if not np.all(np.isfinite(voxels)):
            raise ValueError("volume intensities must be finite")
        labels = labels.astype(np.uint8)
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be binary {0, 1}")
        object.__setattr__(self, "voxels", _freeze(voxels))
        object.__setattr__(self, "labels", _freeze(labels))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[2]


@dataclass(frozen=True, eq=False)
class SliceSample:
    """One 2D image/mask pair tagged with its patient and slice index."""

    image: np.ndarray
    mask: np.ndarray
    patient_id: str
    slice_index: int

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float32)
        mask = np.asarray(self.mask)
        if image.ndim != 2:
            raise ValueError(f"slice image must be 2D, got ndim={image.ndim}")
        if image.shape != mask.shape:
            raise ValueError(
                f"image/mask shape mismatch: {image.shape} vs {mask.shape}"
            )
        mask = mask.astype(np.uint8)
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("mask must be binary {0, 1}")
        if self.slice_index < 0:
            raise ValueError("slice_index must be >= 0")
        object.__setattr__(self, "image", _freeze(image))
        object.__setattr__(self, "mask", _freeze(mask))


@dataclass
class DatasetSplit:
    """Patient-level 70/10/20 split; the three lists are disjoint and
    cover the input id set."""

    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    seed: int = -1  # -1 marks a split loaded from manifests

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, ids in (
            ("train", self.train_ids),
            ("val", self.val_ids),
            ("test", self.test_ids),
        ):
            (out_dir / f"{name}.txt").write_text(
                "".join(f"{pid}\n" for pid in ids)
            )

    @classmethod
    def load(cls, split_dir) -> "DatasetSplit":
        split_dir = Path(split_dir)
        parts = []
        for name in ("train", "val", "test"):
            path = split_dir / f"{name}.txt"
            if not path.exists():
                raise FileNotFoundError(f"missing split manifest {path}")
            parts.append([ln for ln in path.read_text().splitlines() if ln])
        return cls(*parts)


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of the synthetic low-contrast blood-pool phantom."""

    n_volumes: int
    height: int = 64
    width: int = 64
    n_slices: int = 8
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_volumes < 1:
            raise ValueError("n_volumes must be >= 1")
        if self.height < 16 or self.width < 16:
            raise ValueError("in-plane dimensions must be >= 16")
        if self.n_slices < 1:
            raise ValueError("n_slices must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def patient_id_from_path(path) -> str:
    """phantom_003_image.nii.gz -> phantom_003"""
    name = Path(path).name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            name = name[: -len(ext)]
            break
    for suffix in ("_image", "_label"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return name


def _glob_key(filename: str, pattern: str) -> str | None:
    """The part of filename matched by the single '*' in pattern."""
    if "*" not in pattern:
        return filename if filename == pattern else None
    prefix, _, suffix = pattern.partition("*")
    if filename.startswith(prefix) and filename.endswith(suffix):
        key = filename[len(prefix) : len(filename) - len(suffix)]
        return key or None
    return None


def discover_pairs(
    data_dir,
    image_glob: str = DEFAULT_IMAGE_GLOB,
    label_glob: str = DEFAULT_LABEL_GLOB,
) -> list[tuple[str, Path, Path]]:
    """Find paired image/label files under data_dir, matched on the part
    of the filename covered by the glob wildcard. Returns (patient_id,
    image_path, label_path) sorted by patient_id."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory not found: {data_dir}")
    images = {}
    for p in sorted(data_dir.glob(image_glob)):
        key = _glob_key(p.name, image_glob)
        if key:
            images[key] = p
    pairs = []
    for p in sorted(data_dir.glob(label_glob)):
        key = _glob_key(p.name, label_glob)
        if key and key in images:
            pairs.append((key, images[key], p))
    if not pairs:
        raise FileNotFoundError(
            f"no image/label pairs matching {image_glob!r}/{label_glob!r} in {data_dir}"
        )
    return sorted(pairs)


def load_volume(image_path, label_path, patient_id: str | None = None) -> Volume:
    """Load one paired NIfTI image/label volume from disk.

    Label values are coerced to {0, 1} by a > 0.5 test. Raises on missing
    or corrupt files, non-3D data, or image/label shape mismatch.
    """
    voxels, spacing = read_nifti(image_path)
    labels, _ = read_nifti(label_path)
    if voxels.ndim != 3:
        raise ValueError(f"{image_path}: expected 3D image, got ndim={voxels.ndim}")
    if labels.ndim != 3:
        raise ValueError(f"{label_path}: expected 3D label, got ndim={labels.ndim}")
    if voxels.shape != labels.shape:
        raise ValueError(
            f"image/label shape mismatch: {voxels.shape} vs {labels.shape} "
            f"({image_path} / {label_path})"
        )
    if patient_id is None:
        patient_id = patient_id_from_path(image_path)
    return Volume(
        voxels=voxels.astype(np.float32),
        labels=(labels > 0.5).astype(np.uint8),
        patient_id=patient_id,
        spacing=spacing,
    )


def save_volume(volume: Volume, image_path, label_path) -> None:
    spacing = volume.spacing or (1.0, 1.0, 1.0)
    write_nifti(image_path, volume.voxels.astype(np.float32), spacing)
    write_nifti(label_path, volume.labels.astype(np.uint8), spacing)


def load_corpus(
    data_dir,
    image_glob: str = DEFAULT_IMAGE_GLOB,
    label_glob: str = DEFAULT_LABEL_GLOB,
) -> list[Volume]:
    return [
        load_volume(img, lbl, patient_id=pid)
        for pid, img, lbl in discover_pairs(data_dir, image_glob, label_glob)
    ]


# ---------------------------------------------------------------------------
# slicing
# ---------------------------------------------------------------------------


def extract_slices(volume: Volume) -> list[SliceSample]:
    """All 2D slices of a volume, ordered by slice index. Slices whose
    masks are empty are retained."""
    return [
        SliceSample(
            image=volume.voxels[:, :, k],
            mask=volume.labels[:, :, k],
            patient_id=volume.patient_id,
            slice_index=k,
        )
        for k in range(volume.n_slices)
    ]


def stack_slices(samples: list[SliceSample], which: str = "image") -> np.ndarray:
    """Restack extracted slices into a 3D grid (inverse of extract_slices)."""
    if which not in ("image", "mask"):
        raise ValueError(f"unknown field {which!r}")
    return np.stack([getattr(s, which) for s in samples], axis=2)


def to_three_channel(image: np.ndarray) -> np.ndarray:
    """Replicate a 2D grayscale image into a (3, H, W) channel-first image."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected 2D image, got ndim={image.ndim}")
    return np.repeat(image[None, :, :], 3, axis=0)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def _resize_image(image: np.ndarray, size: int) -> np.ndarray:
    return cv2.resize(
        image.astype(np.float32), (size, size), interpolation=cv2.INTER_LINEAR
    )


def _resize_mask(mask: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    h, w = out_hw
    return cv2.resize(
        mask.astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST
    )


def _pad_to_square(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape
    top = (size - h) // 2
    left = (size - w) // 2
    return np.pad(arr, ((top, size - h - top), (left, size - w - left)))


def _center_crop(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape
    top = max(0, (h - size) // 2)
    left = max(0, (w - size) // 2)
    return arr[top : top + min(h, size), left : left + min(w, size)]


def _zscore(image: np.ndarray) -> np.ndarray:
    std = float(image.std())
    return (image - float(image.mean())) / (std if std > 0 else 1.0)


def preprocess_baseline(
    sample: SliceSample,
    target: int = BASELINE_INPUT_SIZE,
    pad_to: int = CORPUS_PAD_DEFAULT,
    crop_oversize: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """CNN-path preprocessing: symmetric zero-pad to the corpus-max square,
    bilinear resize to target, per-slice z-score. The mask is padded
    identically and nearest-neighbor resized, staying binary.

    Inputs larger than pad_to raise unless crop_oversize is set, in which
    case they are center-cropped to pad_to first.

    Returns (image (1, target, target) float32, mask (target, target) uint8).
    """
    image, mask = sample.image, sample.mask
    h, w = image.shape
    if h > pad_to or w > pad_to:
        if not crop_oversize:
            raise ValueError(
                f"slice {h}x{w} exceeds pad target {pad_to} "
                "(pass crop_oversize=True to center-crop)"
            )
        image = _center_crop(image, pad_to)
        mask = _center_crop(mask, pad_to)
    image = _pad_to_square(image, pad_to)
    mask = _pad_to_square(mask, pad_to)
    image = _zscore(_resize_image(image, target))
    mask = _resize_mask(mask, (target, target))
    return image[None].astype(np.float32), mask


def baseline_pred_to_native(
    pred: np.ndarray, native_hw: tuple[int, int], pad_to: int = CORPUS_PAD_DEFAULT
) -> np.ndarray:
    """Invert preprocess_baseline geometry for a predicted mask: nearest
    resize back to the padded square, then cut out the original region."""
    h, w = native_hw
    full = _resize_mask(pred, (pad_to, pad_to))
    top = (pad_to - h) // 2
    left = (pad_to - w) // 2
    return full[top : top + h, left : left + w]


def preprocess_vit(
    sample: SliceSample,
    size: int = VIT_INPUT_SIZE,
    normalize: str = "imagenet",
) -> tuple[np.ndarray, np.ndarray]:
    """ViT-path preprocessing: bilinear resize to size x size, 3-channel
    replication, then normalization only (no padding, no cropping).

    normalize="imagenet" rescales the slice to [0, 1] and applies the
    pretraining channel statistics; normalize="zscore" standardizes the
    slice in place (the phantom-corpus mode).

    Returns (image (3, size, size) float32, mask (size, size) uint8).
    """
    resized = _resize_image(sample.image, size)
    if normalize == "imagenet":
        lo, hi = float(resized.min()), float(resized.max())
        unit = (resized - lo) / (hi - lo) if hi > lo else np.zeros_like(resized)
        channels = [
            (unit - IMAGENET_MEAN[c]) / IMAGENET_STD[c] for c in range(3)
        ]
        image = np.stack(channels, axis=0)
    elif normalize == "zscore":
        image = to_three_channel(_zscore(resized))
    else:
        raise ValueError(f"unknown normalization {normalize!r}")
    mask = _resize_mask(sample.mask, (size, size))
    return image.astype(np.float32), mask


def vit_pred_to_native(pred: np.ndarray, native_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of a ViT-path predicted mask back to the
    native slice resolution."""
    return _resize_mask(pred, native_hw)


# ---------------------------------------------------------------------------
# splitting and few-shot subsetting
# ---------------------------------------------------------------------------


def split_patients(ids: list[str], seed: int) -> DatasetSplit:
    """Deterministic patient-level 70/10/20 split. Sizes are floored and
    the remainder goes to the test set; 130 ids give 91/13/26."""
    ids = list(ids)
    if len(ids) < 3:
        raise ValueError(f"need at least 3 patient ids, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate patient ids")
    ordered = sorted(ids)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    n = len(shuffled)
    n_train = n * 7 // 10
    n_val = n // 10
    return DatasetSplit(
        train_ids=shuffled[:n_train],
        val_ids=shuffled[n_train : n_train + n_val],
        test_ids=shuffled[n_train + n_val :],
        seed=seed,
    )


def subset_by_fraction(
    samples: list[SliceSample], fraction: float, seed: int
) -> list[SliceSample]:
    """Deterministic sample of ceil(fraction * N) slices, in original order.
    Subsets are nested: subset(f1) is contained in subset(f2) for f1 <= f2
    under the same seed."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = len(samples)
    # epsilon guards float fuzz: ceil(0.1 * 30) must be 3, not 4
    k = max(1, min(n, math.ceil(fraction * n - 1e-9)))
    perm = np.random.default_rng(seed).permutation(n)
    return [samples[i] for i in sorted(perm[:k])]


def subset_by_patients(
    samples: list[SliceSample], k: int, seed: int
) -> list[SliceSample]:
    """All slices of k deterministically chosen patients, in original order.
    Nested in k under a fixed seed."""
    patients = sorted({s.patient_id for s in samples})
    if not 1 <= k <= len(patients):
        raise ValueError(f"k must be in [1, {len(patients)}], got {k}")
    perm = np.random.default_rng(seed).permutation(len(patients))
    chosen = {patients[i] for i in perm[:k]}
    return [s for s in samples if s.patient_id in chosen]


# ---------------------------------------------------------------------------
# phantom generation
# ---------------------------------------------------------------------------


def _segment_distance(
    grids: tuple[np.ndarray, np.ndarray, np.ndarray],
    start: np.ndarray,
    end: np.ndarray,
) -> np.ndarray:
    """Per-voxel Euclidean distance to the line segment start->end."""
    gx, gy, gz = grids
    d = end - start
    len2 = float(d @ d)
    px, py, pz = gx - start[0], gy - start[1], gz - start[2]
    if len2 == 0:
        return np.sqrt(px * px + py * py + pz * pz)
    t = np.clip((px * d[0] + py * d[1] + pz * d[2]) / len2, 0.0, 1.0)
    return np.sqrt(
        (px - t * d[0]) ** 2 + (py - t * d[1]) ** 2 + (pz - t * d[2]) ** 2
    )


def _ellipsoid(grids, center, semi_axes) -> np.ndarray:
    gx, gy, gz = grids
    return (
        ((gx - center[0]) / semi_axes[0]) ** 2
        + ((gy - center[1]) / semi_axes[1]) ** 2
        + ((gz - center[2]) / semi_axes[2]) ** 2
    ) <= 1.0


def _generate_one_phantom(spec: PhantomSpec, index: int) -> Volume:
    rng = np.random.default_rng([spec.seed, index])
    h, w, s = spec.height, spec.width, spec.n_slices
    grids = np.meshgrid(
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        np.arange(s, dtype=np.float64),
        indexing="ij",
    )

    # blood pool: ellipsoid, sized so its voxel fraction stays in [1%, 50%]
    center = np.array(
        [
            rng.uniform(0.38, 0.62) * h,
            rng.uniform(0.38, 0.62) * w,
            rng.uniform(0.40, 0.60) * s,
        ]
    )
    semi = np.array(
        [
            rng.uniform(0.17, 0.27) * h,
            rng.uniform(0.17, 0.27) * w,
            max(0.8, rng.uniform(0.22, 0.36) * s),
        ]
    )
    pool = _ellipsoid(grids, center, semi)

    # 1-3 tubular protrusions (vein stand-ins) rooted at the pool center
    n_tubes = int(rng.integers(1, 4))
    for _ in range(n_tubes):
        phi = rng.uniform(0.0, 2.0 * np.pi)
        tilt = rng.uniform(-0.15, 0.15)
        direction = np.array([np.cos(phi), np.sin(phi), tilt])
        direction /= np.linalg.norm(direction)
        length = float(max(semi[0], semi[1])) * rng.uniform(1.2, 1.6)
        radius = max(1.0, 0.035 * min(h, w) * rng.uniform(0.7, 1.1))
        pool |= _segment_distance(grids, center, center + length * direction) <= radius

    # neighboring structure with an intensity near the pool's, unlabeled
    offset_dir = rng.uniform(0.0, 2.0 * np.pi)
    offset = (max(semi[0], semi[1]) * 1.9) * np.array(
        [np.cos(offset_dir), np.sin(offset_dir), 0.0]
    )
    neighbor_semi = semi * rng.uniform(0.5, 0.8)
    neighbor = _ellipsoid(grids, center + offset, neighbor_semi) & ~pool

    background = rng.uniform(0.15, 0.25)
    neighbor_level = rng.uniform(0.55, 0.70)
    pool_level = neighbor_level + rng.uniform(-0.08, 0.10)

    voxels = np.full((h, w, s), background, dtype=np.float64)
    voxels[neighbor] = neighbor_level
    voxels[pool] = pool_level
    if spec.noise_sigma > 0:
        voxels = voxels + rng.normal(0.0, spec.noise_sigma, size=voxels.shape)

    return Volume(
        voxels=voxels.astype(np.float32),
        labels=pool.astype(np.uint8),
        patient_id=f"phantom_{index:03d}",
        spacing=(1.0, 1.0, 1.0),
    )


def generate_phantom(spec: PhantomSpec, out_dir=None) -> list[Volume]:
    """Generate the synthetic phantom corpus; deterministic under seed.

    Each volume holds one ellipsoidal blood pool with tubular protrusions
    (labeled) next to a similar-intensity neighboring structure (not
    labeled), plus additive Gaussian noise. When out_dir is given, each
    volume is written as <pid>_image.nii.gz / <pid>_label.nii.gz.
    """
    volumes = [_generate_one_phantom(spec, i) for i in range(spec.n_volumes)]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for v in volumes:
            save_volume(
                v,
                out_dir / f"{v.patient_id}_image.nii.gz",
                out_dir / f"{v.patient_id}_label.nii.gz",
            )
    return volumes
