"""Independent reference implementations used as test oracles.

Everything here is written the slow, obvious way: explicit loops and
direct textbook definitions, sharing no code with the package. When a
test compares package output against one of these, the two routes must
stay independent; fix disagreements by deciding which side is wrong,
never by calling the package from here.
"""

import math

import numpy as np


# ---------------------------------------------------------------- imaging


def cubic_kernel_ref(t: float, a: float = -0.5) -> float:
    t = abs(t)
    if t <= 1.0:
        return (a + 2.0) * t**3 - (a + 3.0) * t**2 + 1.0
    if t < 2.0:
        return a * t**3 - 5.0 * a * t**2 + 8.0 * a * t - 4.0 * a
    return 0.0


def bicubic_reduce_ref(img: np.ndarray, factor: int) -> np.ndarray:
    """Direct per-pixel antialiased cubic reduction, one axis at a time.

    Output center i maps to input coordinate (i + 0.5) * factor - 0.5,
    taps cover (x - 2f, x + 2f), the stretched kernel k(d / f) is
    renormalized to unit sum, and out-of-range taps clamp to the edge.
    """

    def reduce_axis(arr, f):
        n_in = arr.shape[-1]
        n_out = n_in // f
        out = np.zeros(arr.shape[:-1] + (n_out,), dtype=np.float64)
        for i in range(n_out):
            x = (i + 0.5) * f - 0.5
            total = 0.0
            acc = np.zeros(arr.shape[:-1], dtype=np.float64)
            for j in range(int(math.ceil(x - 2 * f)), int(math.floor(x + 2 * f)) + 1):
                w = cubic_kernel_ref((x - j) / f)
                acc += w * arr[..., min(max(j, 0), n_in - 1)]
                total += w
            out[..., i] = acc / total
        return out

    out = reduce_axis(img, factor)  # width
    out = reduce_axis(out.swapaxes(-1, -2), factor).swapaxes(-1, -2)  # height
    return np.clip(out, 0.0, 1.0)


def pixel_shuffle_ref(x: np.ndarray, r: int) -> np.ndarray:
    """Index-by-index channel-to-space rearrangement."""
    c_in, h, w = x.shape
    c_out = c_in // (r * r)
    out = np.zeros((c_out, h * r, w * r), dtype=x.dtype)
    for c in range(c_out):
        for y in range(h * r):
            for xx in range(w * r):
                out[c, y, xx] = x[c * r * r + r * (y % r) + (xx % r), y // r, xx // r]
    return out


# ---------------------------------------------------------------- metrics


def gaussian_window_ref(size: int, sigma: float) -> np.ndarray:
    win = np.zeros((size, size))
    half = (size - 1) / 2.0
    for i in range(size):
        for j in range(size):
            win[i, j] = math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma**2))
    return win / win.sum()


def ssim_stats_ref(x: np.ndarray, y: np.ndarray, win: np.ndarray):
    """Weighted first/second moments per fully-inside window position."""
    k = win.shape[0]
    h = x.shape[0] - k + 1
    w = x.shape[1] - k + 1
    mu_x = np.zeros((h, w))
    mu_y = np.zeros((h, w))
    vx = np.zeros((h, w))
    vy = np.zeros((h, w))
    cov = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            px = x[i : i + k, j : j + k]
            py = y[i : i + k, j : j + k]
            mx = float((win * px).sum())
            my = float((win * py).sum())
            mu_x[i, j] = mx
            mu_y[i, j] = my
            vx[i, j] = float((win * px * px).sum()) - mx * mx
            vy[i, j] = float((win * py * py).sum()) - my * my
            cov[i, j] = float((win * px * py).sum()) - mx * my
    return mu_x, mu_y, vx, vy, cov


def ssim_maps_ref(x, y, win, c1=0.01**2, c2=0.03**2):
    mu_x, mu_y, vx, vy, cov = ssim_stats_ref(x, y, win)
    lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    cs = (2 * cov + c2) / (vx + vy + c2)
    return lum, cs


def halve_ref(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2, img.shape[1] // 2
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            out[i, j] = img[2 * i : 2 * i + 2, 2 * j : 2 * j + 2].mean()
    return out


def ms_ssim_ref(ref: np.ndarray, test: np.ndarray) -> float:
    """Per-channel multi-scale SSIM with canonical exponents."""
    exponents = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333]
    side = min(ref.shape[1], ref.shape[2])
    levels = 0
    while levels < 5 and side // (2**levels) >= 11:
        levels += 1
    weights = np.array(exponents[:levels])
    weights = weights / weights.sum()
    win = gaussian_window_ref(11, 1.5)
    tiny = np.finfo(np.float64).tiny
    scores = []
    for c in range(ref.shape[0]):
        x, y = ref[c], test[c]
        score = 1.0
        for level in range(levels):
            lum, cs = ssim_maps_ref(x, y, win)
            if level < levels - 1:
                score *= max(cs.mean(), tiny) ** weights[level]
                x, y = halve_ref(x), halve_ref(y)
            else:
                score *= max((lum * cs).mean(), tiny) ** weights[level]
        scores.append(score)
    return float(np.mean(scores))


def uqi_ref(ref: np.ndarray, test: np.ndarray) -> float:
    """Window-by-window universal quality index with unbiased moments."""
    k = 8
    vals = []
    for c in range(ref.shape[0]):
        x, y = ref[c], test[c]
        for i in range(x.shape[0] - k + 1):
            for j in range(x.shape[1] - k + 1):
                px = x[i : i + k, j : j + k].ravel()
                py = y[i : i + k, j : j + k].ravel()
                mx, my = px.mean(), py.mean()
                vx = px.var(ddof=1)
                vy = py.var(ddof=1)
                cov = float(np.cov(px, py, ddof=1)[0, 1])
                den1 = vx + vy
                den2 = mx * mx + my * my
                if den1 <= 1e-12 or den2 <= 1e-12:
                    continue
                vals.append(4 * cov * mx * my / (den1 * den2))
    if not vals:
        return 1.0 if np.array_equal(ref, test) else 0.0
    return float(np.mean(vals))


def vif_ref(ref: np.ndarray, test: np.ndarray) -> float:
    """Pixel-domain VIF: four dyadic scales, scalar gain model, sigma_n^2 = 2.

    Filtering is done window by window with explicit weight sums so this
    route shares nothing with the package's separable filtering.
    """

    def filt_valid(img, win):
        k = win.shape[0]
        h, w = img.shape[0] - k + 1, img.shape[1] - k + 1
        out = np.zeros((h, w))
        for i in range(h):
            for j in range(w):
                out[i, j] = float((win * img[i : i + k, j : j + k]).sum())
        return out

    num = 0.0
    den = 0.0
    eps = 1e-10
    for c in range(ref.shape[0]):
        x = ref[c] * 255.0
        y = test[c] * 255.0
        for scale in range(1, 5):
            size = 2 ** (4 - scale + 1) + 1
            win = gaussian_window_ref(size, size / 5.0)
            if scale > 1:
                x = filt_valid(x, win)[::2, ::2]
                y = filt_valid(y, win)[::2, ::2]
            mu_x = filt_valid(x, win)
            mu_y = filt_valid(y, win)
            sxx = np.maximum(filt_valid(x * x, win) - mu_x**2, 0.0)
            syy = np.maximum(filt_valid(y * y, win) - mu_y**2, 0.0)
            sxy = filt_valid(x * y, win) - mu_x * mu_y
            for i in range(sxx.shape[0]):
                for j in range(sxx.shape[1]):
                    s1, s2, s12 = sxx[i, j], syy[i, j], sxy[i, j]
                    g = s12 / (s1 + eps)
                    sv = s2 - g * s12
                    if s1 < eps:
                        g, sv, s1 = 0.0, s2, 0.0
                    if s2 < eps:
                        g, sv = 0.0, 0.0
                    if g < 0.0:
                        sv, g = s2, 0.0
                    sv = max(sv, eps)
                    num += math.log10(1.0 + g * g * s1 / (sv + 2.0))
                    den += math.log10(1.0 + s1 / 2.0)
    if den == 0.0:
        return 1.0 if np.array_equal(ref, test) else 0.0
    return num / den


def ap_11point_ref(ranked, n_gt: int) -> float:
    """Sweep every confidence cutoff and take max precision per recall level."""
    cutoffs = sorted({conf for conf, _ in ranked}, reverse=True)
    curve = []
    for cut in cutoffs:
        kept = [is_tp for conf, is_tp in ranked if conf >= cut]
        tp = sum(kept)
        fp = len(kept) - tp
        curve.append((tp / n_gt, tp / (tp + fp)))
    total = 0.0
    for r10 in range(11):
        r = r10 / 10.0
        best = 0.0
        for recall, precision in curve:
            if recall >= r - 1e-12:
                best = max(best, precision)
        total += best
    return total / 11.0


def auc_pairwise_ref(ranked) -> float:
    """Probability a positive outranks a negative, ties counted half."""
    pos = [conf for conf, is_tp in ranked if is_tp]
    neg = [conf for conf, is_tp in ranked if not is_tp]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def iou_ref(a, b) -> float:
    """Textbook overlap/union of two (cx, cy, w, h) boxes."""
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def nms_ref(boxes, thr: float):
    """Quadratic greedy suppression on (cx, cy, w, h, conf) tuples.

    Returns the kept input indices in selection order. The best
    remaining box wins each round (input order breaks confidence ties);
    strictly-greater overlap with it removes a box.
    """
    alive = list(range(len(boxes)))
    kept = []
    while alive:
        best = alive[0]
        for i in alive[1:]:
            if boxes[i][4] > boxes[best][4]:
                best = i
        kept.append(best)
        alive = [
            i
            for i in alive
            if i != best and not iou_ref(boxes[i][:4], boxes[best][:4]) > thr
        ]
    return kept


def match_detections_ref(preds, gts, thr: float):
    """Greedy confidence-ordered matching on raw tuples.

    ``preds`` are (cx, cy, w, h, conf); ``gts`` are (cx, cy, w, h).
    Returns (confidence, is_tp) pairs plus the unmatched truth count,
    matching each prediction to its best still-free truth box.
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][4], i))
    free = list(range(len(gts)))
    ranked = []
    for i in order:
        best_j = -1
        best_overlap = 0.0
        for j in free:
            o = iou_ref(preds[i][:4], gts[j])
            if o > best_overlap:
                best_overlap = o
                best_j = j
        if best_j >= 0 and best_overlap >= thr:
            ranked.append((preds[i][4], True))
            free.remove(best_j)
        else:
            ranked.append((preds[i][4], False))
    return ranked, len(free)


# ------------------------------------------------------------- detection loss


def sigmoid_ref(t: float) -> float:
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


def bce_ref(p: float, target: float, eps: float = 1e-7) -> float:
    return -(target * math.log(max(p, eps)) + (1.0 - target) * math.log(max(1.0 - p, eps)))


def detection_loss_ref(raw_per_scale, targets_per_scale, masks_per_scale, anchors_per_scale,
                       grids, lambda_coord=5.0, lambda_noobj=0.5):
    """Slot-by-slot detection loss from raw head outputs and targets.

    ``raw_per_scale``: list of (M, M, B*(5+C)) raw arrays.
    ``targets_per_scale``: decoded-space targets of the same shape.
    ``masks_per_scale``: (M, M, B) responsibility masks.
    Returns the component dict; the total is the lambda-weighted sum of
    center and size terms plus objectness, no-objectness, class terms.
    """
    comp = {"center": 0.0, "size": 0.0, "conf_obj": 0.0, "conf_noobj": 0.0, "cls": 0.0}
    for raw, tgt, mask, anchors, m in zip(
        raw_per_scale, targets_per_scale, masks_per_scale, anchors_per_scale, grids
    ):
        b_slots = mask.shape[2]
        depth = raw.shape[2] // b_slots
        n_classes = depth - 5
        for row in range(m):
            for col in range(m):
                for b in range(b_slots):
                    sl = raw[row, col, b * depth : (b + 1) * depth]
                    conf_pred = sigmoid_ref(sl[4])
                    if not mask[row, col, b]:
                        comp["conf_noobj"] += bce_ref(conf_pred, 0.0)
                        continue
                    tg = tgt[row, col, b * depth : (b + 1) * depth]
                    px = (col + sigmoid_ref(sl[0])) / m
                    py = (row + sigmoid_ref(sl[1])) / m
                    pw = anchors[b][0] * math.exp(sl[2])
                    ph = anchors[b][1] * math.exp(sl[3])
                    comp["center"] += (px - tg[0]) ** 2 + (py - tg[1]) ** 2
                    comp["size"] += (math.sqrt(max(pw, 1e-6)) - math.sqrt(tg[2])) ** 2
                    comp["size"] += (math.sqrt(max(ph, 1e-6)) - math.sqrt(tg[3])) ** 2
                    comp["conf_obj"] += bce_ref(conf_pred, 1.0)
                    for cc in range(n_classes):
                        comp["cls"] += bce_ref(sigmoid_ref(sl[5 + cc]), tg[5 + cc])
    total = (
        lambda_coord * (comp["center"] + comp["size"])
        + comp["conf_obj"]
        + lambda_noobj * comp["conf_noobj"]
        + comp["cls"]
    )
    return comp, total


# ---------------------------------------------------------------- optimizer


def adam_step_ref(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook update for one parameter array; returns new (param, m, v)."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


# ---------------------------------------------------------------- clustering


def planted_clusters(seed: int, centers, spread: float, per_cluster: int):
    """Tight (w, h) clusters around known centers, for k-means tests."""
    rng = np.random.default_rng(seed)
    pts = []
    for cw, ch in centers:
        for _ in range(per_cluster):
            pts.append(
                (
                    cw * (1.0 + rng.uniform(-spread, spread)),
                    ch * (1.0 + rng.uniform(-spread, spread)),
                )
            )
    return np.array(pts)
