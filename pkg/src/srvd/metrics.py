"""Full-reference image quality and detection quality metrics.

Image metrics take (C, H, W) float64 arrays in [0, 1] and reduce
multichannel inputs by averaging per-channel scores, except PSNR which
pools the squared error over all elements. Detection metrics consume
confidence-ranked matches produced by :func:`match_detections`.

All routines are plain numpy/scipy and run in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .boxes import iou
from .errors import ShapeError
from .imaging import validate_image

# canonical 5-scale contrast-structure exponents
MS_SSIM_EXPONENTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

UQI_WINDOW = 8
# a window whose pooled variance sits below this is constant at double
# precision and has a vanishing denominator
UQI_ZERO = 1e-12

VIF_SIGMA_NSQ = 2.0  # noise variance on the 8-bit (255) value range
VIF_EPS = 1e-10


def _check_pair(ref, test):
    validate_image(ref, "ref")
    validate_image(test, "test")
    if ref.shape != test.shape:
        raise ShapeError(f"shape mismatch: ref {ref.shape} vs test {test.shape}")


def psnr(ref: np.ndarray, test: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB.

    The default peak of 1 matches the internal image range; pass 255 to
    compare against numbers computed on 8-bit data. Identical inputs
    return +inf.
    """
    _check_pair(ref, test)
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(peak) - 10.0 * math.log10(mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g1 = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(g1, g1)
    return win / win.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # ndimage centers a k-tap kernel at k // 2, so that output index is
    # the first whose window lies fully inside
    k = win.shape[0]
    out = ndimage.correlate(img, win, mode="constant")
    lo = k // 2
    hi = (k - 1) // 2
    return out[lo : img.shape[0] - hi, lo : img.shape[1] - hi]


def _ssim_maps(x: np.ndarray, y: np.ndarray, win: np.ndarray):
    """Luminance and contrast-structure maps over valid window positions."""
    mu_x = _filter_valid(x, win)
    mu_y = _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mu_x * mu_x
    syy = _filter_valid(y * y, win) - mu_y * mu_y
    sxy = _filter_valid(x * y, win) - mu_x * mu_y
    lum = (2.0 * mu_x * mu_y + SSIM_C1) / (mu_x * mu_x + mu_y * mu_y + SSIM_C1)
    cs = (2.0 * sxy + SSIM_C2) / (sxx + syy + SSIM_C2)
    return lum, cs


def _halve(img: np.ndarray) -> np.ndarray:
    """2x2 mean pooling; an odd trailing row/column is dropped."""
    h, w = img.shape
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[0::2, 1::2] + img[1::2, 0::2] + img[1::2, 1::2])


def ms_ssim(ref: np.ndarray, test: np.ndarray) -> float:
    """Multi-scale structural similarity with the canonical exponents.

    Contrast-structure means are pooled at every scale and the
    luminance term enters only at the coarsest one; scales are produced
    by 2x2 mean pooling. When the input is too small for five scales,
    the scale count drops so the coarsest side stays >= 11 and the
    remaining exponents are renormalized to sum to one.
    """
    _check_pair(ref, test)
    side = min(ref.shape[1], ref.shape[2])
    levels = 0
    while levels < len(MS_SSIM_EXPONENTS) and side // (2**levels) >= SSIM_WINDOW:
        levels += 1
    if levels == 0:
        raise ShapeError(f"image side {side} too small for an {SSIM_WINDOW}-pixel window")
    weights = np.asarray(MS_SSIM_EXPONENTS[:levels], dtype=np.float64)
    weights = weights / weights.sum()
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)

    scores = []
    for c in range(ref.shape[0]):
        x = ref[c]
        y = test[c]
        score = 1.0
        for level in range(levels):
            lum, cs = _ssim_maps(x, y, win)
            if level < levels - 1:
                score *= max(float(cs.mean()), np.finfo(np.float64).tiny) ** weights[level]
                x = _halve(x)
                y = _halve(y)
            else:
                full = float((lum * cs).mean())
                score *= max(full, np.finfo(np.float64).tiny) ** weights[level]
        scores.append(score)
    return float(np.mean(scores))


def uqi(ref: np.ndarray, test: np.ndarray) -> float:
    """Universal quality index over 8x8 stride-1 windows, stabilizer-free.

    Per window Q = 4 * cov * mx * my / ((vx + vy) * (mx^2 + my^2)) with
    unbiased second moments; windows whose denominator vanishes at
    double precision are skipped. If every window is skipped the inputs
    are constant and the score is 1 for equal arrays, else 0.
    """
    _check_pair(ref, test)
    if min(ref.shape[1], ref.shape[2]) < UQI_WINDOW:
        raise ShapeError(f"image side smaller than the {UQI_WINDOW}-pixel window")
    n = UQI_WINDOW * UQI_WINDOW
    box = np.ones((UQI_WINDOW, UQI_WINDOW), dtype=np.float64)
    total = 0.0
    count = 0
    for c in range(ref.shape[0]):
        x = ref[c]
        y = test[c]
        sx = _filter_valid(x, box)
        sy = _filter_valid(y, box)
        sxx = _filter_valid(x * x, box)
        syy = _filter_valid(y * y, box)
        sxy = _filter_valid(x * y, box)
        mx = sx / n
        my = sy / n
        vx = (sxx - sx * mx) / (n - 1)
        vy = (syy - sy * my) / (n - 1)
        cov = (sxy - sx * my) / (n - 1)
        den1 = vx + vy
        den2 = mx * mx + my * my
        ok = (den1 > UQI_ZERO) & (den2 > UQI_ZERO)
        q = (4.0 * cov[ok] * mx[ok] * my[ok]) / (den1[ok] * den2[ok])
        total += float(q.sum())
        count += int(ok.sum())
    if count == 0:
        return 1.0 if np.array_equal(ref, test) else 0.0
    return total / count


def _vif_scale_stats(x, y, win):
    mu_x = _filter_valid(x, win)
    mu_y = _filter_valid(y, win)
    sxx = np.maximum(_filter_valid(x * x, win) - mu_x * mu_x, 0.0)
    syy = np.maximum(_filter_valid(y * y, win) - mu_y * mu_y, 0.0)
    sxy = _filter_valid(x * y, win) - mu_x * mu_y
    return sxx, syy, sxy


def vif(ref: np.ndarray, test: np.ndarray) -> float:
    """Pixel-domain visual information fidelity over four dyadic scales.

    Values are lifted to the 8-bit range so the channel noise variance
    of 2 carries its conventional meaning. Per scale, a local gain g
    maps the reference onto the test signal and the two mutual
    informations are accumulated from the variance ratios. A constant
    reference is degenerate: the score is 1 for equal arrays, else 0.
    """
    _check_pair(ref, test)
    num = 0.0
    den = 0.0
    for c in range(ref.shape[0]):
        x = ref[c] * 255.0
        y = test[c] * 255.0
        for scale in range(1, 5):
            size = 2 ** (4 - scale + 1) + 1
            win = _gaussian_window(size, size / 5.0)
            if scale > 1:
                x = _filter_valid(x, win)[::2, ::2]
                y = _filter_valid(y, win)[::2, ::2]
            if min(x.shape) < size:
                raise ShapeError(f"image too small at scale {scale} for a {size}-tap window")
            sxx, syy, sxy = _vif_scale_stats(x, y, win)
            g = sxy / (sxx + VIF_EPS)
            sv = syy - g * sxy
            g = np.where(sxx < VIF_EPS, 0.0, g)
            sv = np.where(sxx < VIF_EPS, syy, sv)
            sxx = np.where(sxx < VIF_EPS, 0.0, sxx)
            sv = np.where(syy < VIF_EPS, 0.0, sv)
            g = np.where(syy < VIF_EPS, 0.0, g)
            sv = np.where(g < 0.0, syy, sv)
            g = np.maximum(g, 0.0)
            sv = np.maximum(sv, VIF_EPS)
            num += float(np.sum(np.log10(1.0 + g * g * sxx / (sv + VIF_SIGMA_NSQ))))
            den += float(np.sum(np.log10(1.0 + sxx / VIF_SIGMA_NSQ)))
    if den == 0.0:
        return 1.0 if np.array_equal(ref, test) else 0.0
    return num / den


def match_detections(predictions, ground_truth, iou_threshold: float = 0.5):
    """Greedily match predictions to ground truth by descending confidence.

    Each prediction (ties broken by input order) claims the
    highest-IoU unclaimed ground-truth box if that IoU reaches the
    threshold; otherwise it is a false positive. Returns the
    confidence-ranked list of (confidence, is_tp) pairs and the number
    of unmatched ground-truth boxes.
    """
    for p in predictions:
        if p.confidence is None:
            raise ValueError("predictions must carry a confidence")
    order = sorted(range(len(predictions)), key=lambda i: (-predictions[i].confidence, i))
    claimed = [False] * len(ground_truth)
    ranked = []
    for i in order:
        best_j = -1
        best = iou_threshold
        for j, gt in enumerate(ground_truth):
            if claimed[j]:
                continue
            v = iou(predictions[i], gt)
            if v > best or (v == best and v >= iou_threshold and best_j < 0):
                best = v
                best_j = j
        if best_j >= 0:
            claimed[best_j] = True
            ranked.append((predictions[i].confidence, True))
        else:
            ranked.append((predictions[i].confidence, False))
    return ranked, claimed.count(False)


def average_precision(ranked, n_gt: int, method: str = "11point"):
    """Average precision over a confidence-ranked match list.

    ``ranked`` is the (confidence, is_tp) list from match_detections,
    pooled over however many images; ``n_gt`` is the total ground-truth
    count. The default method averages the interpolated max precision
    at the 11 recall thresholds 0.0, 0.1, ..., 1.0; "area" integrates
    the precision envelope over recall instead (kept for cross-checks).
    With no ground truth the score is 1.0 for an empty prediction list
    and 0.0 otherwise. Returns (ap, pr_points) where pr_points is the
    raw (recall, precision) curve, one point per prediction.
    """
    if method not in ("11point", "area"):
        raise ValueError(f"method must be '11point' or 'area', got {method!r}")
    if n_gt < 0:
        raise ValueError(f"n_gt must be non-negative, got {n_gt}")
    if n_gt == 0:
        return (1.0 if not ranked else 0.0), []
    ranked = sorted(ranked, key=lambda t: -t[0])
    points = []
    tp = 0
    fp = 0
    for conf, is_tp in ranked:
        tp += int(is_tp)
        fp += int(not is_tp)
        points.append((tp / n_gt, tp / (tp + fp)))
    if method == "area":
        total = 0.0
        prev_recall = 0.0
        for i, (recall, _) in enumerate(points):
            if recall > prev_recall:
                envelope = max(p for _, p in points[i:])
                total += (recall - prev_recall) * envelope
                prev_recall = recall
        return total, points
    total = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        best = 0.0
        for recall, precision in points:
            if recall >= r - 1e-12 and precision > best:
                best = precision
        total += best
    return total / 11.0, points


def f1_score(tp: int, fp: int, fn: int) -> float:
    """Harmonic precision/recall mean; 0 when there is nothing to score."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0
    return 2.0 * tp / denom


def roc_auc(ranked, n_negatives: int | None = None):
    """Trapezoidal area under the ROC curve of a scored match list.

    Positives are matched detections, negatives unmatched ones. Tied
    confidences move along the curve together, which makes the result
    equal the pairwise-comparison probability. Needs at least one
    positive and one negative. Returns (auc, roc_points); the points
    start at (0, 0) and end at (1, 1).
    """
    n_pos = sum(1 for _, is_tp in ranked if is_tp)
    n_neg_seen = len(ranked) - n_pos
    n_neg = n_neg_seen if n_negatives is None else n_negatives
    if n_pos == 0 or n_neg <= 0:
        raise ValueError("roc_auc needs at least one positive and one negative")
    if n_neg < n_neg_seen:
        raise ValueError(f"n_negatives {n_neg} below the {n_neg_seen} negatives present")
    ranked = sorted(ranked, key=lambda t: -t[0])
    points = [(0.0, 0.0)]
    tp = 0
    fp = 0
    i = 0
    while i < len(ranked):
        j = i
        while j < len(ranked) and ranked[j][0] == ranked[i][0]:
            tp += int(ranked[j][1])
            fp += int(not ranked[j][1])
            j += 1
        points.append((fp / n_neg, tp / n_pos))
        i = j
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    auc = 0.0
    for (x1, y1), (x2, y2) in zip(points, points[1:]):
        auc += (x2 - x1) * (y1 + y2) / 2.0
    return auc, points


@dataclass
class ImageQualityReport:
    """Per-pair scores for the four reference metrics."""

    psnr: float
    ms_ssim: float
    uqi: float
    vif: float


def image_quality(ref: np.ndarray, test: np.ndarray) -> ImageQualityReport:
    return ImageQualityReport(
        psnr=psnr(ref, test),
        ms_ssim=ms_ssim(ref, test),
        uqi=uqi(ref, test),
        vif=vif(ref, test),
    )


@dataclass
class DetectionReport:
    """Pooled detection quality over an evaluation set."""

    n_images: int
    n_gt: int
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    ap: float
    auc: float | None  # None when the match list is single-class degenerate
    pr_points: list = field(default_factory=list)
    roc_points: list = field(default_factory=list)


def evaluate_detections(preds_per_image, gts_per_image, iou_threshold: float = 0.5):
    """Match per image, pool the ranked lists, and score the whole set."""
    if len(preds_per_image) != len(gts_per_image):
        raise ValueError("prediction and ground-truth lists differ in length")
    ranked = []
    n_gt = 0
    fn = 0
    for preds, gts in zip(preds_per_image, gts_per_image):
        r, unmatched = match_detections(preds, gts, iou_threshold)
        ranked.extend(r)
        n_gt += len(gts)
        fn += unmatched
    tp = sum(1 for _, is_tp in ranked if is_tp)
    fp = len(ranked) - tp
    if n_gt == 0:
        raise ValueError("evaluation set has no ground-truth boxes")
    ap, pr_points = average_precision(ranked, n_gt)
    try:
        auc, roc_points = roc_auc(ranked)
    except ValueError:
        auc = None
        roc_points = []
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / n_gt
    return DetectionReport(
        n_images=len(preds_per_image),
        n_gt=n_gt,
        tp=tp,
        fp=fp,
        fn=fn,
        precision=precision,
        recall=recall,
        f1=f1_score(tp, fp, fn),
        ap=ap,
        auc=auc,
        pr_points=pr_points,
        roc_points=roc_points,
    )
