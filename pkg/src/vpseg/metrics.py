"""Segmentation quality metrics and the split-level evaluation harness.

Overlap metrics (dice, iou) consume binarized maps; the structural, alignment,
and weighted F measures consume the continuous probability map, following
their source definitions.  All functions are pure and return floats in [0, 1].
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy import stats

_EPS = np.finfo(np.float64).eps


class ShapeMismatchError(Exception):
    """Prediction and ground truth have different spatial shapes."""


class LengthMismatchError(Exception):
    """Paired samples have different lengths."""


class TooFewSamplesError(Exception):
    """The paired t-test needs at least two pairs."""


class MissingPredictionError(Exception):
    """A ground-truth frame has no corresponding prediction file."""


def _check_shapes(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")


def _counts(pred_bin: np.ndarray, gt: np.ndarray) -> tuple[float, float, float]:
    p = pred_bin.astype(bool)
    g = gt.astype(bool)
    tp = float(np.count_nonzero(p & g))
    fp = float(np.count_nonzero(p & ~g))
    fn = float(np.count_nonzero(~p & g))
    return tp, fp, fn


def dice(pred_bin: np.ndarray, gt: np.ndarray) -> float:
    """2TP / (2TP + FP + FN); two empty masks score 1 by convention."""
    _check_shapes(pred_bin, gt)
    tp, fp, fn = _counts(pred_bin, gt)
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0
    return 2 * tp / denom


def iou(pred_bin: np.ndarray, gt: np.ndarray) -> float:
    """TP / (TP + FP + FN); two empty masks score 1 by convention."""
    _check_shapes(pred_bin, gt)
    tp, fp, fn = _counts(pred_bin, gt)
    denom = tp + fp + fn
    if denom == 0:
        return 1.0
    return tp / denom


def _object_similarity(values: np.ndarray) -> float:
    # 2x / (x^2 + 1 + sigma_x), the object-level similarity of the structure
    # measure, over the prediction values inside one region.
    if values.size == 0:
        return 0.0
    x = float(values.mean())
    sigma = float(values.std())
    return 2.0 * x / (x * x + 1.0 + sigma + _EPS)


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    fg = pred.copy()
    fg[~gt] = 0.0
    bg = 1.0 - pred
    bg[gt] = 0.0
    o_fg = _object_similarity(fg[gt])
    o_bg = _object_similarity(bg[~gt])
    u = float(gt.mean())
    return u * o_fg + (1.0 - u) * o_bg


def _gt_centroid(gt: np.ndarray) -> tuple[int, int]:
    rows, cols = gt.shape
    total = float(gt.sum())
    if total == 0:
        return int(round(cols / 2.0)), int(round(rows / 2.0))
    i = np.arange(1, cols + 1, dtype=np.float64)
    j = np.arange(1, rows + 1, dtype=np.float64)
    x = int(round(float((gt.sum(axis=0) * i).sum() / total)))
    y = int(round(float((gt.sum(axis=1) * j).sum() / total)))
    return x, y


def _region_ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.size == 0:
        return 0.0
    g = gt.astype(np.float64)
    n = pred.size
    x = float(pred.mean())
    y = float(g.mean())
    dx = pred - x
    dy = g - y
    total = n - 1 + _EPS
    sigma_x2 = float((dx * dx).sum()) / total
    sigma_y2 = float((dy * dy).sum()) / total
    sigma_xy = float((dx * dy).sum()) / total
    num = 4.0 * x * y * sigma_xy
    den = (x * x + y * y) * (sigma_x2 + sigma_y2)
    if num != 0.0:
        return num / (den + _EPS)
    return 1.0 if den == 0.0 else 0.0


def _s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    x, y = _gt_centroid(gt)
    h, w = gt.shape
    area = float(h * w)
    quads_g = [gt[:y, :x], gt[:y, x:], gt[y:, :x], gt[y:, x:]]
    quads_p = [pred[:y, :x], pred[:y, x:], pred[y:, :x], pred[y:, x:]]
    w1 = (x * y) / area
    w2 = ((w - x) * y) / area
    w3 = (x * (h - y)) / area
    w4 = 1.0 - w1 - w2 - w3
    weights = [w1, w2, w3, w4]
    return sum(wt * _region_ssim(p, g) for wt, p, g in zip(weights, quads_p, quads_g))


def s_measure(pred: np.ndarray, gt: np.ndarray, alpha: float = 0.5) -> float:
    """Structure measure: alpha * object similarity + (1-alpha) * region similarity.

    Degenerate ground truths follow the reference convention: all-background
    scores 1 - mean(pred), all-foreground scores mean(pred).
    """
    _check_shapes(pred, gt)
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt) > 0.5
    y = float(gt.mean())
    if y == 0.0:
        score = 1.0 - float(pred.mean())
    elif y == 1.0:
        score = float(pred.mean())
    else:
        score = alpha * _s_object(pred, gt) + (1.0 - alpha) * _s_region(pred, gt)
    return float(min(max(score, 0.0), 1.0))


def e_measure(pred: np.ndarray, gt: np.ndarray) -> float:
    """Enhanced alignment: quadratically enhanced correlation of the
    mean-centred prediction and ground truth, averaged over pixels."""
    _check_shapes(pred, gt)
    pred = np.asarray(pred, dtype=np.float64)
    gt = (np.asarray(gt) > 0.5).astype(np.float64)
    if gt.sum() == 0:
        enhanced = 1.0 - pred
    elif gt.mean() == 1.0:
        enhanced = pred
    else:
        dg = gt - gt.mean()
        dp = pred - pred.mean()
        align = 2.0 * dg * dp / (dg * dg + dp * dp + _EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(min(max(float(enhanced.mean()), 0.0), 1.0))


def _gaussian_kernel(shape: tuple[int, int] = (7, 7), sigma: float = 5.0) -> np.ndarray:
    m, n = [(s - 1.0) / 2.0 for s in shape]
    y, x = np.ogrid[-m:m + 1, -n:n + 1]
    k = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    k[k < np.finfo(k.dtype).eps * k.max()] = 0
    s = k.sum()
    if s != 0:
        k /= s
    return k


def _circle_offsets(d2: int) -> list[tuple[int, int]]:
    # lattice offsets at exact squared distance d2
    offsets = []
    r = math.isqrt(d2)
    for dy in range(-r, r + 1):
        rem = d2 - dy * dy
        dx = math.isqrt(rem)
        if dx * dx == rem:
            offsets.append((dy, dx))
            if dx:
                offsets.append((dy, -dx))
    return offsets


def _propagate_foreground_error(err: np.ndarray, gt: np.ndarray,
                                dst: np.ndarray) -> np.ndarray:
    """Replace each background error with the mean error over all nearest
    foreground pixels (averaging over distance ties keeps the measure exactly
    transpose-symmetric)."""
    h, w = gt.shape
    out = err.copy()
    bg = ~gt
    d2 = np.rint(dst * dst).astype(np.int64)
    acc = np.zeros_like(err)
    cnt = np.zeros_like(err)
    for value in np.unique(d2[bg]):
        ii, jj = np.nonzero(bg & (d2 == value))
        for dy, dx in _circle_offsets(int(value)):
            yy = ii + dy
            xx = jj + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            if not ok.any():
                continue
            hit = np.zeros_like(ok)
            hit[ok] = gt[yy[ok], xx[ok]]
            acc[ii[hit], jj[hit]] += err[yy[hit], xx[hit]]
            cnt[ii[hit], jj[hit]] += 1.0
    out[bg] = acc[bg] / cnt[bg]
    return out


def weighted_fmeasure(pred: np.ndarray, gt: np.ndarray, beta2: float = 0.3) -> float:
    """Weighted F-measure with distance-decayed errors.

    The absolute error map is propagated from the nearest foreground pixels
    into the background, smoothed with a 7x7 sigma-5 Gaussian, and weighted by
    a distance-decay map before computing weighted precision and recall.
    """
    _check_shapes(pred, gt)
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt) > 0.5
    if not gt.any():
        return 1.0 if pred.sum() == 0 else 0.0

    dst = ndimage.distance_transform_edt(~gt)
    err = np.abs(pred - gt.astype(np.float64))
    err_t = _propagate_foreground_error(err, gt, dst)
    smoothed = ndimage.correlate(err_t, _gaussian_kernel(), mode="constant")
    min_err = err.copy()
    take = gt & (smoothed < err)
    min_err[take] = smoothed[take]

    decay = np.ones_like(err)
    decay[~gt] = 2.0 - np.exp(math.log(0.5) / 5.0 * dst[~gt])
    weighted_err = min_err * decay

    tp_w = float(gt.sum()) - float(weighted_err[gt].sum())
    fp_w = float(weighted_err[~gt].sum())
    recall = 1.0 - float(weighted_err[gt].mean())
    precision = tp_w / (_EPS + tp_w + fp_w)
    value = (1 + beta2) * precision * recall / (_EPS + beta2 * precision + recall)
    return float(min(max(value, 0.0), 1.0))


@dataclass
class TTestResult:
    t: float
    p: float


def paired_ttest(a, b) -> TTestResult:
    """Two-sided paired t-test.

    Zero-variance cases use fixed conventions: identical samples give
    (t=0, p=1); a constant nonzero difference gives (t=+-inf, p=0).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatchError(f"paired samples differ: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise TooFewSamplesError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, p=1.0)
        return TTestResult(t=math.copysign(math.inf, mean), p=0.0)
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * float(stats.t.sf(abs(t), df=n - 1))
    return TTestResult(t=t, p=min(p, 1.0))


@dataclass
class FrameMetrics:
    frame_id: str
    dice: float
    iou: float
    smeasure: float
    emeasure: float
    wfm: float

    def as_row(self) -> list:
        return [self.frame_id, self.dice, self.iou, self.smeasure, self.emeasure, self.wfm]


CSV_HEADER = ["frame_id", "dice", "iou", "smeasure", "emeasure", "wfm"]
METRIC_NAMES = CSV_HEADER[1:]


@dataclass
class MetricReport:
    per_frame: list[FrameMetrics]
    aggregate: dict[str, float]
    counts: dict[str, int] = field(default_factory=dict)

    def write_csv(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for fm in self.per_frame:
                writer.writerow(fm.as_row())

    def write_json(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump({"aggregate": self.aggregate, "counts": self.counts}, fh, indent=2)


def frame_metrics(frame_id: str, prob: np.ndarray, gt: np.ndarray,
                  binarize_threshold: float = 0.5) -> FrameMetrics:
    pred_bin = prob >= binarize_threshold
    return FrameMetrics(
        frame_id=frame_id,
        dice=dice(pred_bin, gt),
        iou=iou(pred_bin, gt),
        smeasure=s_measure(prob, gt),
        emeasure=e_measure(prob, gt),
        wfm=weighted_fmeasure(prob, gt),
    )


def _collect_gt_frames(gt_dir: Path) -> list[tuple[str, Path]]:
    frames = []
    direct = sorted(gt_dir.glob("*.png"))
    if direct:
        frames.extend((p.stem, p) for p in direct)
    for case_dir in sorted(p for p in gt_dir.iterdir() if p.is_dir()):
        for p in sorted(case_dir.glob("*.png")):
            frames.append((f"{case_dir.name}/{p.stem}", p))
    return frames


def evaluate(pred_dir: Path | str, gt_dir: Path | str,
             binarize_threshold: float = 0.5) -> MetricReport:
    """Score every ground-truth frame against its prediction file.

    Predictions mirror the GT tree as 8-bit grayscale PNGs.  A GT frame
    without a prediction raises ``MissingPredictionError`` naming the frame.
    """
    from .dataio import read_mask, read_probability

    pred_dir = Path(pred_dir)
    gt_dir = Path(gt_dir)
    gt_frames = _collect_gt_frames(gt_dir)
    if not gt_frames:
        raise MissingPredictionError(f"no ground-truth frames under {gt_dir}")

    per_frame: list[FrameMetrics] = []
    cases = set()
    for frame_id, gt_path in gt_frames:
        pred_path = pred_dir / gt_path.relative_to(gt_dir)
        if not pred_path.is_file():
            raise MissingPredictionError(f"no prediction for frame {frame_id}")
        prob = read_probability(pred_path)
        gt = read_mask(gt_path)
        if prob.shape != gt.shape:
            raise ShapeMismatchError(
                f"frame {frame_id}: prediction {prob.shape} vs gt {gt.shape}")
        per_frame.append(frame_metrics(frame_id, prob, gt, binarize_threshold))
        cases.add(frame_id.rsplit("/", 1)[0] if "/" in frame_id else "")

    aggregate = {
        name: float(np.mean([getattr(fm, name) for fm in per_frame]))
        for name in METRIC_NAMES
    }
    return MetricReport(
        per_frame=per_frame,
        aggregate=aggregate,
        counts={"frames": len(per_frame), "cases": len(cases)},
    )
