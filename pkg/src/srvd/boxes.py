"""Axis-aligned boxes, detector grid encodings, and anchor design.

Boxes are stored in center-normalized form: ``(cx, cy, w, h)`` as
fractions of the image side, plus a class id and an optional
confidence. The detector emits three grid encodings; each ``M x M``
cell owns ``B = 3`` anchor slots of ``4 + 1 + C`` channels
(geometry offsets, objectness, class scores). Only ``C = 1`` is
exercised by the pipeline but the encoding is written for general C.

Grid value arrays are indexed ``values[row, col, channel]`` where
``row`` runs along y and ``col`` along x.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

logger = logging.getLogger(__name__)

N_SCALES = 3
ANCHORS_PER_SCALE = 3
N_ANCHORS = N_SCALES * ANCHORS_PER_SCALE


@dataclass(frozen=True)
class BoundingBox:
    """One detection or ground-truth box in normalized coordinates."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0
    confidence: float | None = None

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"box {name} is not finite: {v!r}")
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"box {name} outside [0, 1]: {v!r}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extent must be positive, got w={self.w} h={self.h}")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence outside [0, 1]: {self.confidence!r}")

    def corners(self) -> tuple[float, float, float, float]:
        """Corner form (x1, y1, x2, y2); may poke outside the unit square."""
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    def area(self) -> float:
        return self.w * self.h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    # areas from the same corner arithmetic so identical boxes give exactly 1
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    return inter / (area_a + area_b - inter)


def _wh_iou(w1, h1, w2, h2):
    """IoU of two extents aligned at a common center."""
    inter = min(w1, w2) * min(h1, h2)
    return inter / (w1 * h1 + w2 * h2 - inter)


@dataclass(frozen=True)
class AnchorSet:
    """The nine prior box shapes, area-sorted ascending.

    Scale 0 pairs with the coarsest grid and owns the three largest
    anchors; scale 2 pairs with the finest grid and owns the smallest.
    """

    anchors: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.anchors) != N_ANCHORS:
            raise ValueError(f"expected {N_ANCHORS} anchors, got {len(self.anchors)}")
        areas = []
        for w, h in self.anchors:
            if not (np.isfinite(w) and np.isfinite(h)) or w <= 0 or h <= 0:
                raise ValueError(f"anchor extents must be positive, got ({w}, {h})")
            areas.append(w * h)
        if any(a2 < a1 for a1, a2 in zip(areas, areas[1:])):
            raise ValueError("anchors must be sorted by area ascending")

    @classmethod
    def from_array(cls, arr) -> "AnchorSet":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (N_ANCHORS, 2):
            raise ValueError(f"expected shape ({N_ANCHORS}, 2), got {arr.shape}")
        return cls(tuple((float(w), float(h)) for w, h in arr))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.anchors, dtype=np.float64)

    def for_scale(self, scale_id: int) -> tuple[tuple[float, float], ...]:
        """The three anchors owned by one detector scale."""
        if not 0 <= scale_id < N_SCALES:
            raise ValueError(f"scale_id must be in [0, {N_SCALES}), got {scale_id}")
        lo = (N_SCALES - 1 - scale_id) * ANCHORS_PER_SCALE
        return self.anchors[lo : lo + ANCHORS_PER_SCALE]


@dataclass
class GridEncoding:
    """One detector scale: an M x M grid of B anchor slots.

    ``values`` is ``(M, M, B * (5 + C))`` and is either raw head output
    (``tx, ty, tw, th, to`` plus class logits per slot) or, for
    training targets, already-decoded geometry with 0/1 scores.
    """

    scale_id: int
    grid: int
    anchors: tuple[tuple[float, float], ...]
    values: np.ndarray

    def __post_init__(self):
        if self.grid < 1:
            raise ValueError(f"grid must be >= 1, got {self.grid}")
        if len(self.anchors) != ANCHORS_PER_SCALE:
            raise ValueError(f"expected {ANCHORS_PER_SCALE} anchors per scale")
        shape = tuple(self.values.shape)
        if len(shape) != 3 or shape[0] != self.grid or shape[1] != self.grid:
            raise ValueError(f"values shape {shape} does not match grid {self.grid}")
        if shape[2] % ANCHORS_PER_SCALE != 0:
            raise ValueError(f"channel count {shape[2]} not divisible by {ANCHORS_PER_SCALE}")
        if self.n_classes < 1:
            raise ValueError(f"channel count {shape[2]} leaves no class channels")

    @property
    def n_classes(self) -> int:
        return self.values.shape[2] // ANCHORS_PER_SCALE - 5


@dataclass
class ScaleTargets:
    """Target-form encoding plus the responsibility mask for one scale."""

    encoding: GridEncoding
    obj_mask: np.ndarray  # (M, M, B) bool

    @property
    def noobj_mask(self) -> np.ndarray:
        return ~self.obj_mask


def _cell_index(coord: float, grid: int) -> int:
    # coord 1.0 falls in the last cell
    return min(int(coord * grid), grid - 1)


def encode_targets(labels, anchors: AnchorSet, grids, n_classes: int = 1):
    """Assign ground-truth boxes to anchor slots across the three scales.

    Each box goes to the cell containing its center at the scale of its
    best-overlap anchor (shape IoU at a common center, over all nine).
    If that slot is taken, the next-best anchor is tried; a box with no
    free slot left is dropped with a warning. Ties in overlap resolve
    to the lower anchor index.

    Returns a list of three ScaleTargets ordered like ``grids``.
    """
    grids = tuple(int(g) for g in grids)
    if len(grids) != N_SCALES or any(b <= a for a, b in zip(grids, grids[1:])):
        raise ValueError(f"grids must be {N_SCALES} ascending values, got {grids}")
    if n_classes < 1:
        raise ValueError(f"n_classes must be >= 1, got {n_classes}")
    depth = 5 + n_classes
    values = [np.zeros((m, m, ANCHORS_PER_SCALE, depth), dtype=np.float64) for m in grids]
    masks = [np.zeros((m, m, ANCHORS_PER_SCALE), dtype=bool) for m in grids]

    flat = anchors.anchors  # area ascending; index k // 3 picks the scale
    for box in labels:
        if box.class_id >= n_classes:
            raise ValueError(f"class_id {box.class_id} out of range for C={n_classes}")
        overlaps = np.array([_wh_iou(box.w, box.h, aw, ah) for aw, ah in flat])
        for k in np.argsort(-overlaps, kind="stable"):
            scale_id = N_SCALES - 1 - int(k) // ANCHORS_PER_SCALE
            slot = int(k) % ANCHORS_PER_SCALE
            m = grids[scale_id]
            row = _cell_index(box.cy, m)
            col = _cell_index(box.cx, m)
            if masks[scale_id][row, col, slot]:
                continue
            values[scale_id][row, col, slot, :4] = (box.cx, box.cy, box.w, box.h)
            values[scale_id][row, col, slot, 4] = 1.0
            values[scale_id][row, col, slot, 5 + box.class_id] = 1.0
            masks[scale_id][row, col, slot] = True
            break
        else:
            logger.warning(
                "dropping box (%.4f, %.4f, %.4f, %.4f): all anchor slots taken",
                box.cx, box.cy, box.w, box.h,
            )

    out = []
    for scale_id, m in enumerate(grids):
        enc = GridEncoding(
            scale_id=scale_id,
            grid=m,
            anchors=anchors.for_scale(scale_id),
            values=values[scale_id].reshape(m, m, ANCHORS_PER_SCALE * depth),
        )
        out.append(ScaleTargets(encoding=enc, obj_mask=masks[scale_id]))
    return out


def _as_ndarray(values) -> np.ndarray:
    if hasattr(values, "detach"):  # torch tensor without importing torch here
        values = values.detach().cpu().numpy()
    return np.asarray(values, dtype=np.float64)


def decode_predictions(encoding: GridEncoding, conf_threshold: float):
    """Raw head output to boxes with confidence >= conf_threshold.

    Centers are ``(cell + sigmoid(t))/M``, extents are
    ``anchor * exp(t)``, confidence is ``sigmoid(to)`` times the best
    class probability. Boxes are clipped to the unit square and emitted
    in row-major cell order, anchor slot ascending.
    """
    vals = _as_ndarray(encoding.values)
    m = encoding.grid
    depth = vals.shape[2] // ANCHORS_PER_SCALE
    v = vals.reshape(m, m, ANCHORS_PER_SCALE, depth)
    anchor_arr = np.asarray(encoding.anchors, dtype=np.float64)

    sig_xy = expit(v[..., 0:2])
    cols = np.arange(m, dtype=np.float64)[None, :, None]
    rows = np.arange(m, dtype=np.float64)[:, None, None]
    cx = (cols + sig_xy[..., 0]) / m
    cy = (rows + sig_xy[..., 1]) / m
    w = anchor_arr[None, None, :, 0] * np.exp(v[..., 2])
    h = anchor_arr[None, None, :, 1] * np.exp(v[..., 3])
    cls_prob = expit(v[..., 5:])
    cls_id = np.argmax(cls_prob, axis=-1)
    conf = expit(v[..., 4]) * np.take_along_axis(cls_prob, cls_id[..., None], axis=-1)[..., 0]

    boxes = []
    for row in range(m):
        for col in range(m):
            for b in range(ANCHORS_PER_SCALE):
                c = conf[row, col, b]
                if c < conf_threshold:
                    continue
                x1 = max(0.0, cx[row, col, b] - w[row, col, b] / 2.0)
                y1 = max(0.0, cy[row, col, b] - h[row, col, b] / 2.0)
                x2 = min(1.0, cx[row, col, b] + w[row, col, b] / 2.0)
                y2 = min(1.0, cy[row, col, b] + h[row, col, b] / 2.0)
                boxes.append(
                    BoundingBox(
                        cx=(x1 + x2) / 2.0,
                        cy=(y1 + y2) / 2.0,
                        w=x2 - x1,
                        h=y2 - y1,
                        class_id=int(cls_id[row, col, b]),
                        confidence=float(min(c, 1.0)),
                    )
                )
    return boxes


def box_to_raw(box: BoundingBox, anchor: tuple[float, float], grid: int):
    """Invert the geometric decode map for one anchor slot.

    Returns ``(row, col, (tx, ty, tw, th))``. The box center must lie
    strictly inside a cell, not on a boundary, or the logit is infinite.
    """
    col = _cell_index(box.cx, grid)
    row = _cell_index(box.cy, grid)
    fx = box.cx * grid - col
    fy = box.cy * grid - row
    raw = np.array(
        [
            logit(fx),
            logit(fy),
            np.log(box.w / anchor[0]),
            np.log(box.h / anchor[1]),
        ],
        dtype=np.float64,
    )
    return row, col, raw


def nms(boxes, iou_threshold: float = 0.5):
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-confidence box (input order breaks
    ties) and discards every remaining box whose IoU with it exceeds
    the threshold. Returns survivors in selection order.
    """
    for b in boxes:
        if b.confidence is None:
            raise ValueError("nms requires boxes with confidence set")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].confidence, i))
    keep = []
    removed = [False] * len(boxes)
    for i in order:
        if removed[i]:
            continue
        keep.append(boxes[i])
        for j in order:
            if j != i and not removed[j] and iou(boxes[i], boxes[j]) > iou_threshold:
                removed[j] = True
        removed[i] = True
    return keep


def _pairwise_wh_iou(dims: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(N, K) center-aligned IoU between box extents and cluster centers."""
    inter = np.minimum(dims[:, None, 0], centers[None, :, 0]) * np.minimum(
        dims[:, None, 1], centers[None, :, 1]
    )
    area_d = dims[:, 0] * dims[:, 1]
    area_c = centers[:, 0] * centers[:, 1]
    return inter / (area_d[:, None] + area_c[None, :] - inter)


def _seed_centers(dims: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ style seeding under the 1 - IoU distance."""
    centers = [dims[rng.integers(len(dims))]]
    while len(centers) < k:
        d = 1.0 - _pairwise_wh_iou(dims, np.asarray(centers))
        d2 = np.min(d, axis=1) ** 2
        total = d2.sum()
        if total == 0.0:
            raise ValueError("not enough distinct box shapes to seed clusters")
        centers.append(dims[rng.choice(len(dims), p=d2 / total)])
    return np.asarray(centers, dtype=np.float64)


def _lloyd(dims: np.ndarray, centers: np.ndarray, max_iter: int = 300):
    """Lloyd iterations with mean updates, guarded to never raise distortion.

    Returns (centers, distortion_trace). The 1 - IoU distance is not a
    metric for which the mean is optimal, so any update that would
    increase mean distortion is rejected and iteration stops there.
    """
    assign = np.argmin(1.0 - _pairwise_wh_iou(dims, centers), axis=1)
    trace = [float(np.mean(1.0 - _pairwise_wh_iou(dims, centers)[np.arange(len(dims)), assign]))]
    for _ in range(max_iter):
        new_centers = centers.copy()
        for c in range(len(centers)):
            members = dims[assign == c]
            if len(members):
                new_centers[c] = members.mean(axis=0)
        new_assign = np.argmin(1.0 - _pairwise_wh_iou(dims, new_centers), axis=1)
        new_dist = float(
            np.mean(1.0 - _pairwise_wh_iou(dims, new_centers)[np.arange(len(dims)), new_assign])
        )
        if new_dist > trace[-1]:
            break
        moved = not np.array_equal(new_assign, assign)
        centers, assign = new_centers, new_assign
        trace.append(new_dist)
        if not moved:
            break
    return centers, trace


def kmeans_anchors(box_dims, k: int = N_ANCHORS, seed: int = 0) -> np.ndarray:
    """Cluster box extents into k anchors under the 1 - IoU distance.

    ``box_dims`` is an (N, 2) array-like of normalized (w, h) pairs;
    BoundingBox sequences are accepted too. Input order does not matter:
    extents are canonically sorted before seeding, so permutations give
    identical output. Returns a (k, 2) array sorted by area ascending;
    wrap a k = 9 result in AnchorSet.from_array for the detector.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(box_dims) and isinstance(box_dims[0], BoundingBox):
        box_dims = [(b.w, b.h) for b in box_dims]
    dims = np.asarray(box_dims, dtype=np.float64)
    if dims.size == 0:
        raise ValueError("no boxes to cluster")
    if dims.ndim != 2 or dims.shape[1] != 2:
        raise ValueError(f"expected (N, 2) extents, got shape {dims.shape}")
    if np.any(dims <= 0) or not np.all(np.isfinite(dims)):
        raise ValueError("box extents must be positive and finite")
    n_distinct = len(np.unique(dims, axis=0))
    if n_distinct < k:
        raise ValueError(f"k={k} exceeds {n_distinct} distinct box shapes")

    dims = dims[np.lexsort((dims[:, 1], dims[:, 0]))]
    rng = np.random.default_rng(seed)
    centers = _seed_centers(dims, k, rng)
    centers, _ = _lloyd(dims, centers)
    order = np.argsort(centers[:, 0] * centers[:, 1], kind="stable")
    return centers[order]
