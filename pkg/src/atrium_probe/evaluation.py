"""Binarization, morphological post-processing, Dice/IoU metrics,
mean +/- SD aggregation and overlay rendering.

Everything here is pure numpy; model tensors are converted on entry.
Per-patient evaluation is volumetric: slice predictions are resized back
to the native resolution, stacked, and scored against the label volume.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .data import Volume

FULL_SQUARE_3x3 = np.ones((3, 3), dtype=np.uint8)


def _as_array(x) -> np.ndarray:
    if hasattr(x, "detach"):  # torch tensor
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def _check_binary(m: np.ndarray, name: str) -> np.ndarray:
    m = _as_array(m)
    if not np.isin(m, (0, 1)).all():
        raise ValueError(f"{name} must be binary {{0,1}}")
    return m.astype(np.uint8)


def binarize(values, threshold: float = 0.5, from_logits: bool = True) -> np.ndarray:
    """Threshold probabilities (or logits) into a {0,1} mask.

    The threshold applies on the probability scale and is inclusive, so a
    logit of exactly 0 maps to foreground at the default 0.5.
    """
    values = _as_array(values)
    if not np.all(np.isfinite(values)):
        raise ValueError("binarize input must be finite")
    if from_logits:
        # sigma(l) >= t  <=>  l >= log(t / (1 - t)); avoids computing sigma
        if threshold <= 0:
            return np.ones(values.shape, dtype=np.uint8)
        if threshold >= 1:
            return np.zeros(values.shape, dtype=np.uint8)
        cut = math.log(threshold / (1.0 - threshold))
        return (values >= cut).astype(np.uint8)
    return (values >= threshold).astype(np.uint8)


def dice(a, b) -> float:
    """2|a n b| / (|a| + |b|); 1.0 when both masks are empty."""
    a = _check_binary(a, "a")
    b = _check_binary(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    inter = int((a & b).sum())
    return 2.0 * inter / total


def iou(a, b) -> float:
    """|a n b| / |a u b| (Jaccard); 1.0 when both masks are empty.

    Computed from the Dice score through the identity iou = d / (2 - d),
    which therefore holds bitwise rather than to within rounding.
    """
    d = dice(a, b)
    return d / (2.0 - d)


def _erode(m: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # pixels outside the image count as background, so borders erode
    return cv2.erode(m, kernel, borderType=cv2.BORDER_CONSTANT, borderValue=0)


def _dilate(m: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return cv2.dilate(m, kernel, borderType=cv2.BORDER_CONSTANT, borderValue=0)


def _check_morph_input(m, kernel):
    m = _check_binary(m, "mask")
    if m.ndim != 2:
        raise ValueError(f"morphology expects a 2D mask, got ndim={m.ndim}")
    kernel = FULL_SQUARE_3x3 if kernel is None else np.asarray(kernel, np.uint8)
    return m, kernel


def morph_open(m, kernel=None) -> np.ndarray:
    """Erosion then dilation. Never adds foreground: open(m) is a subset
    of m."""
    m, kernel = _check_morph_input(m, kernel)
    return _dilate(_erode(m, kernel), kernel)


def morph_close(m, kernel=None) -> np.ndarray:
    """Dilation then erosion. Never removes foreground: m is a subset of
    close(m).

    Computed on a zero-padded halo one kernel radius wide, then cropped.
    Without the halo, foreground touching the border would be eaten by the
    erosion step (the dilated mass outside the image is invisible to it).
    """
    m, kernel = _check_morph_input(m, kernel)
    pad = max(kernel.shape) // 2
    padded = np.pad(m, pad)
    closed = _erode(_dilate(padded, kernel), kernel)
    return closed[pad : pad + m.shape[0], pad : pad + m.shape[1]]


def postprocess_baseline(m, kernel=None) -> np.ndarray:
    """Opening (artifact removal) followed by closing (hole filling).

    Applied to CNN-baseline predictions only; the ViT path routes around
    this entirely and its outputs are scored as produced.
    """
    return morph_close(morph_open(m, kernel), kernel)


# ---------------------------------------------------------------------------
# per-patient metrics and aggregation
# ---------------------------------------------------------------------------


def evaluate_patient(pred_slices, volume: Volume) -> tuple[float, float]:
    """Volumetric (dice, iou) for one patient.

    pred_slices: one binary mask per slice, in slice order, at any common
    resolution; each is nearest-neighbor resized back to the native slice
    shape before stacking.
    """
    h, w, n = volume.shape
    if len(pred_slices) != n:
        raise ValueError(f"expected {n} slice predictions, got {len(pred_slices)}")
    native = []
    for p in pred_slices:
        p = _check_binary(p, "prediction")
        if p.shape != (h, w):
            p = cv2.resize(p, (w, h), interpolation=cv2.INTER_NEAREST)
        native.append(p)
    stacked = np.stack(native, axis=2)
    return dice(stacked, volume.labels), iou(stacked, volume.labels)


@dataclass
class MetricReport:
    """Per-patient dice/iou rows for one method plus their mean and
    sample SD (n-1 denominator; 0 when n == 1)."""

    method: str
    per_patient: list[tuple[str, float, float]]  # (patient_id, dice, iou)
    dice_mean: float
    dice_sd: float
    iou_mean: float
    iou_sd: float


def _mean_sd(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    if arr.size == 1 or (arr == arr[0]).all():
        return mean, 0.0
    return mean, float(arr.std(ddof=1))


def aggregate(method: str, rows: list[tuple[str, float, float]]) -> MetricReport:
    """Fold per-patient rows into a MetricReport; rows are stored sorted
    by patient_id so parallel evaluation order cannot leak into output."""
    if not rows:
        raise ValueError("aggregate needs at least one per-patient row")
    rows = sorted(rows)
    dice_mean, dice_sd = _mean_sd([r[1] for r in rows])
    iou_mean, iou_sd = _mean_sd([r[2] for r in rows])
    return MetricReport(method, rows, dice_mean, dice_sd, iou_mean, iou_sd)


def write_report_csv(report: MetricReport, path) -> None:
    """CSV with header method,patient_id,dice,iou; one row per patient and
    a final `mean` summary row. Floats use repr so a re-read is exact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "patient_id", "dice", "iou"])
        for pid, d, j in report.per_patient:
            w.writerow([report.method, pid, repr(float(d)), repr(float(j))])
        w.writerow([report.method, "mean", repr(report.dice_mean), repr(report.iou_mean)])


def read_report_csv(path) -> MetricReport:
    """Inverse of write_report_csv; SDs are recomputed from the rows."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["method", "patient_id", "dice", "iou"]:
            raise ValueError(f"unexpected report header {header}")
        rows, method = [], None
        for method, pid, d, j in reader:
            if pid == "mean":
                continue
            rows.append((pid, float(d), float(j)))
    if not rows:
        raise ValueError(f"no per-patient rows in {path}")
    return aggregate(method, rows)


# ---------------------------------------------------------------------------
# overlays
# ---------------------------------------------------------------------------


def render_overlay(image, pred, gt, path=None) -> np.ndarray:
    """Grayscale slice with prediction-only pixels tinted green,
    ground-truth-only red, and agreement yellow.

    Tints are averaged into the base at exactly half weight using integer
    arithmetic, so tint categories stay countable from the output. Returns
    the (H, W, 3) uint8 image; writes a PNG when path is given.
    """
    image = _as_array(image).astype(np.float64)
    pred = _check_binary(pred, "pred")
    gt = _check_binary(gt, "gt")
    if not (image.shape == pred.shape == gt.shape):
        raise ValueError(
            f"shape mismatch: image {image.shape}, pred {pred.shape}, gt {gt.shape}"
        )
    lo, hi = image.min(), image.max()
    gray = np.zeros(image.shape, dtype=np.uint8) if hi <= lo else \
        np.round((image - lo) / (hi - lo) * 255.0).astype(np.uint8)

    color = np.zeros((*image.shape, 3), dtype=np.uint16)
    pred_only = (pred == 1) & (gt == 0)
    gt_only = (gt == 1) & (pred == 0)
    both = (pred == 1) & (gt == 1)
    color[pred_only, 1] = 255
    color[gt_only, 0] = 255
    color[both, 0] = 255
    color[both, 1] = 255

    out = np.repeat(gray[:, :, None].astype(np.uint16), 3, axis=2)
    tinted = pred_only | gt_only | both
    out[tinted] = (out[tinted] + color[tinted]) // 2
    out = out.astype(np.uint8)

    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(out, mode="RGB").save(path, format="PNG")
    return out


def overlay_tint_counts(overlay: np.ndarray) -> dict[str, int]:
    """Count green / red / yellow tinted pixels in a rendered overlay."""
    r = overlay[:, :, 0].astype(np.int32)
    g = overlay[:, :, 1].astype(np.int32)
    b = overlay[:, :, 2].astype(np.int32)
    return {
        "green": int(((g > r) & (r == b)).sum()),
        "red": int(((r > g) & (g == b)).sum()),
        "yellow": int(((r == g) & (r > b)).sum()),
    }
