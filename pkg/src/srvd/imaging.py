"""Image data model: synthesis, resampling, patching, augmentation, disk I/O.

Images are float64 arrays of shape (C, H, W) with C in {1, 3} and
values in [0, 1]. A LabeledScene pairs one image with its ground-truth
boxes; a PairedSample pins a high-resolution scene to its 4x-reduced
low-resolution counterpart for training the upsampler.

Datasets live on disk as ``root/images/<id>.png`` plus
``root/labels/<id>.txt`` with one ``class cx cy w h`` line per box,
all coordinates normalized.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .boxes import BoundingBox, iou
from .errors import ParseError, SceneGenerationError, ShapeError

logger = logging.getLogger(__name__)

SCALE_FACTOR = 4  # low-res to full-res side ratio
MAX_VEHICLES = 32
MIN_SCENE_SIDE = 64

# vehicle footprint drawn in low-res pixel units; both sides stay in
# [4, 16] for any aspect in [1.2, 2.5]
VEHICLE_SHORT_SIDE = (4.0, 6.4)
VEHICLE_ASPECT = (1.2, 2.5)
MAX_PLACEMENT_TRIES = 200
MAX_MUTUAL_IOU = 0.1

_SHARPEN_KERNEL = np.array(
    [[0.0, -1.0, 0.0], [-1.0, 5.0, -1.0], [0.0, -1.0, 0.0]], dtype=np.float64
)

AUGMENT_OPS = ("flip_h", "flip_v", "sharpen")


def validate_image(img, name: str = "image") -> np.ndarray:
    """Check the (C, H, W) float64 [0, 1] contract and return the array."""
    if not isinstance(img, np.ndarray):
        raise ShapeError(f"{name} must be an ndarray, got {type(img).__name__}")
    if img.dtype != np.float64:
        raise ShapeError(f"{name} must be float64, got {img.dtype}; cast with astype")
    if img.ndim != 3:
        raise ShapeError(f"{name} must be (C, H, W), got ndim={img.ndim}")
    if img.shape[0] not in (1, 3):
        raise ShapeError(f"{name} must have 1 or 3 channels, got {img.shape[0]}")
    if img.shape[1] < 1 or img.shape[2] < 1:
        raise ShapeError(f"{name} has empty spatial extent: {img.shape}")
    lo, hi = float(img.min()), float(img.max())
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError(f"{name} contains non-finite values")
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"{name} values outside [0, 1]: min={lo:.6g} max={hi:.6g}")
    return img


@dataclass
class LabeledScene:
    """One image with its ground-truth boxes and a provenance tag."""

    image: np.ndarray
    boxes: tuple[BoundingBox, ...]
    source_id: str

    def __post_init__(self):
        validate_image(self.image, "scene image")
        self.boxes = tuple(self.boxes)


@dataclass
class PairedSample:
    """A high-res scene with its 4x-reduced low-res input and labels."""

    hr: np.ndarray
    lr: np.ndarray
    labels: tuple[BoundingBox, ...]
    source_id: str

    def __post_init__(self):
        validate_image(self.hr, "hr")
        validate_image(self.lr, "lr")
        if self.hr.shape[0] != self.lr.shape[0]:
            raise ShapeError("hr and lr channel counts differ")
        if (
            self.hr.shape[1] != SCALE_FACTOR * self.lr.shape[1]
            or self.hr.shape[2] != SCALE_FACTOR * self.lr.shape[2]
        ):
            raise ShapeError(
                f"hr {self.hr.shape} is not exactly {SCALE_FACTOR}x lr {self.lr.shape}"
            )
        self.labels = tuple(self.labels)


def _cubic_kernel(t: np.ndarray) -> np.ndarray:
    """Catmull-Rom cubic (a = -0.5), support (-2, 2)."""
    at = np.abs(t)
    return np.where(
        at <= 1.0,
        1.5 * at**3 - 2.5 * at**2 + 1.0,
        np.where(at < 2.0, -0.5 * at**3 + 2.5 * at**2 - 4.0 * at + 2.0, 0.0),
    )


def _reduce_matrix(n_in: int, factor: int) -> np.ndarray:
    """Row-stochastic (n_in/factor, n_in) antialiased cubic weights.

    Output sample i sits at input coordinate (i + 0.5) * factor - 0.5
    (half-pixel alignment); the kernel is stretched by the factor and
    out-of-range taps are clamped to the edge (replicate boundary).
    """
    n_out = n_in // factor
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        x = (i + 0.5) * factor - 0.5
        lo = int(math.ceil(x - 2.0 * factor))
        hi = int(math.floor(x + 2.0 * factor))
        taps = np.arange(lo, hi + 1)
        weights = _cubic_kernel((x - taps) / factor)
        weights = weights / weights.sum()
        np.add.at(w[i], np.clip(taps, 0, n_in - 1), weights)
    return w


def bicubic_downscale(img: np.ndarray, factor: int) -> np.ndarray:
    """Reduce each spatial side by an integer factor with a cubic kernel.

    Separable antialiased Catmull-Rom filtering; factor 1 is the
    identity. Output is clipped back to [0, 1].
    """
    validate_image(img)
    if isinstance(factor, bool) or not isinstance(factor, (int, np.integer)):
        raise ValueError(f"factor must be an integer, got {factor!r}")
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    _, h, w = img.shape
    if h % factor or w % factor:
        raise ShapeError(f"image sides {h}x{w} not divisible by factor {factor}")
    if factor == 1:
        return img.copy()
    mh = _reduce_matrix(h, factor)
    mw = _reduce_matrix(w, factor)
    out = np.einsum("oh,chw->cow", mh, img)
    out = np.einsum("pw,cow->cop", mw, out)
    return np.clip(out, 0.0, 1.0)


def _paint_vehicle(img, rng, x0, y0, w_px, h_px, dark: bool):
    """Solid body, contrasting outline, a cab stripe, light texture."""
    if dark:
        body = rng.uniform(0.02, 0.14)
        edge = body + 0.30
        cab = body + 0.22
    else:
        body = rng.uniform(0.86, 0.98)
        edge = body - 0.30
        cab = body - 0.22
    tint = rng.uniform(-0.02, 0.02, size=img.shape[0])
    patch = img[:, y0 : y0 + h_px, x0 : x0 + w_px]
    patch[:] = np.clip(body + tint, 0.0, 1.0)[:, None, None]
    patch += rng.uniform(-0.015, 0.015, size=patch.shape)
    patch[:, 0, :] = edge
    patch[:, -1, :] = edge
    patch[:, :, 0] = edge
    patch[:, :, -1] = edge
    # cab stripe across one end of the long axis
    if w_px >= h_px:
        cut = max(1, int(round(w_px * 0.25)))
        if rng.random() < 0.5:
            patch[:, 1:-1, 1 : 1 + cut] = cab
        else:
            patch[:, 1:-1, w_px - 1 - cut : w_px - 1] = cab
    else:
        cut = max(1, int(round(h_px * 0.25)))
        if rng.random() < 0.5:
            patch[:, 1 : 1 + cut, 1:-1] = cab
        else:
            patch[:, h_px - 1 - cut : h_px - 1, 1:-1] = cab
    np.clip(patch, 0.0, 1.0, out=patch)


def synthesize_scene(seed: int, size: int = 512, n_vehicles: int = 8) -> LabeledScene:
    """Deterministically render an aerial-style scene with rectangular vehicles.

    A smooth mid-tone background receives ``n_vehicles`` axis-aligned
    high-contrast rectangles whose sides span 4 to 16 low-res pixel
    units with aspect ratio 1.2 to 2.5; mutual IoU stays at or below
    0.1. Same arguments, same scene, bit for bit.
    """
    if size < MIN_SCENE_SIDE:
        raise ValueError(f"size must be >= {MIN_SCENE_SIDE}, got {size}")
    if not 0 <= n_vehicles <= MAX_VEHICLES:
        raise ValueError(f"n_vehicles must be in [0, {MAX_VEHICLES}], got {n_vehicles}")
    rng = np.random.default_rng(seed)

    coarse = rng.uniform(0.30, 0.62, size=(3, 9, 9))
    img = ndimage.zoom(coarse, (1, size / 9.0, size / 9.0), order=3, mode="nearest", grid_mode=True)
    img = img[:, :size, :size]
    img += rng.uniform(-0.008, 0.008, size=img.shape)
    img = np.clip(img, 0.0, 1.0)

    boxes: list[BoundingBox] = []
    for i in range(n_vehicles):
        for _ in range(MAX_PLACEMENT_TRIES):
            short = rng.uniform(*VEHICLE_SHORT_SIDE)
            aspect = rng.uniform(*VEHICLE_ASPECT)
            long_side = short * aspect
            if rng.random() < 0.5:
                w_lr, h_lr = long_side, short
            else:
                w_lr, h_lr = short, long_side
            w_px = int(round(w_lr * SCALE_FACTOR))
            h_px = int(round(h_lr * SCALE_FACTOR))
            if w_px + 2 >= size or h_px + 2 >= size:
                continue
            x0 = int(rng.integers(1, size - w_px))
            y0 = int(rng.integers(1, size - h_px))
            cand = BoundingBox(
                cx=(x0 + w_px / 2.0) / size,
                cy=(y0 + h_px / 2.0) / size,
                w=w_px / size,
                h=h_px / size,
            )
            if all(iou(cand, b) <= MAX_MUTUAL_IOU for b in boxes):
                _paint_vehicle(img, rng, x0, y0, w_px, h_px, dark=bool(rng.random() < 0.5))
                boxes.append(cand)
                break
        else:
            raise SceneGenerationError(
                f"could not place vehicle {i + 1}/{n_vehicles} in a {size}x{size} scene "
                f"after {MAX_PLACEMENT_TRIES} tries"
            )
    return LabeledScene(image=img, boxes=tuple(boxes), source_id=f"synth-{seed}")


def make_pair(scene: LabeledScene) -> PairedSample:
    """Build the LR/HR training pair by bicubic reduction of a scene."""
    return PairedSample(
        hr=scene.image,
        lr=bicubic_downscale(scene.image, SCALE_FACTOR),
        labels=scene.boxes,
        source_id=scene.source_id,
    )


def extract_patches(scene: LabeledScene, patch_size: int, stride: int):
    """Slide a square window over the scene and relabel each crop.

    A box belongs to a patch iff its center lies inside it (half-open:
    the left/top edge is inside, the right/bottom edge is not); the box
    is then renormalized to patch coordinates and clipped to the unit
    square. Patch provenance is recorded in source_id.
    """
    _, h, w = scene.image.shape
    if patch_size < 1 or patch_size > min(h, w):
        raise ValueError(f"patch_size must be in [1, {min(h, w)}], got {patch_size}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    patches = []
    for y0 in range(0, h - patch_size + 1, stride):
        for x0 in range(0, w - patch_size + 1, stride):
            kept = []
            for b in scene.boxes:
                cx_px = b.cx * w
                cy_px = b.cy * h
                if not (x0 <= cx_px < x0 + patch_size and y0 <= cy_px < y0 + patch_size):
                    continue
                cx = (cx_px - x0) / patch_size
                cy = (cy_px - y0) / patch_size
                bw = b.w * w / patch_size
                bh = b.h * h / patch_size
                x1 = max(0.0, cx - bw / 2.0)
                y1 = max(0.0, cy - bh / 2.0)
                x2 = min(1.0, cx + bw / 2.0)
                y2 = min(1.0, cy + bh / 2.0)
                kept.append(
                    BoundingBox(
                        cx=(x1 + x2) / 2.0,
                        cy=(y1 + y2) / 2.0,
                        w=x2 - x1,
                        h=y2 - y1,
                        class_id=b.class_id,
                    )
                )
            patches.append(
                LabeledScene(
                    image=scene.image[:, y0 : y0 + patch_size, x0 : x0 + patch_size].copy(),
                    boxes=tuple(kept),
                    source_id=f"{scene.source_id}@y{y0}x{x0}",
                )
            )
    return patches


def _sharpen(img: np.ndarray) -> np.ndarray:
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        out[c] = ndimage.correlate(img[c], _SHARPEN_KERNEL, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def augment(sample: PairedSample, op: str) -> PairedSample:
    """Apply one augmentation to both resolutions and the labels.

    Flips mirror pixels and box centers and are involutions; sharpen
    convolves both images with the 3x3 unsharp kernel (replicate
    boundary, clipped back to [0, 1]) and leaves labels untouched.
    """
    if op == "flip_h":
        hr = sample.hr[:, :, ::-1].copy()
        lr = sample.lr[:, :, ::-1].copy()
        labels = tuple(
            BoundingBox(1.0 - b.cx, b.cy, b.w, b.h, b.class_id, b.confidence)
            for b in sample.labels
        )
    elif op == "flip_v":
        hr = sample.hr[:, ::-1, :].copy()
        lr = sample.lr[:, ::-1, :].copy()
        labels = tuple(
            BoundingBox(b.cx, 1.0 - b.cy, b.w, b.h, b.class_id, b.confidence)
            for b in sample.labels
        )
    elif op == "sharpen":
        hr = _sharpen(sample.hr)
        lr = _sharpen(sample.lr)
        labels = sample.labels
    else:
        raise ValueError(f"unknown augmentation {op!r}; expected one of {AUGMENT_OPS}")
    return PairedSample(hr=hr, lr=lr, labels=labels, source_id=sample.source_id)


def _image_to_png(img: np.ndarray, path: Path):
    arr = np.rint(img * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(np.moveaxis(arr, 0, 2), mode="RGB").save(path)


def _png_to_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode == "L":
            arr = np.asarray(im, dtype=np.uint8)[None, :, :]
        else:
            arr = np.moveaxis(np.asarray(im.convert("RGB"), dtype=np.uint8), 2, 0)
    return arr.astype(np.float64) / 255.0


def read_image(path) -> np.ndarray:
    """Load one PNG as a (C, H, W) float array in [0, 1]."""
    return _png_to_image(Path(path))


def write_image(img: np.ndarray, path) -> None:
    """Write a (C, H, W) float array in [0, 1] as an 8-bit PNG."""
    _image_to_png(validate_image(img), Path(path))


def write_dataset(scenes, root) -> None:
    """Write scenes as root/images/<id>.png + root/labels/<id>.txt."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        _image_to_png(scene.image, root / "images" / f"{scene.source_id}.png")
        lines = [
            f"{b.class_id} {b.cx:.8f} {b.cy:.8f} {b.w:.8f} {b.h:.8f}\n" for b in scene.boxes
        ]
        (root / "labels" / f"{scene.source_id}.txt").write_text("".join(lines))


def _parse_label_line(path: Path, lineno: int, line: str) -> BoundingBox:
    parts = line.split()
    if len(parts) != 5:
        raise ParseError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
    try:
        int(parts[0])
        cx, cy, w, h = (float(p) for p in parts[1:])
    except ValueError as exc:
        raise ParseError(f"{path}:{lineno}: non-numeric field ({exc})") from None
    for name, v in (("cx", cx), ("cy", cy), ("w", w), ("h", h)):
        if not math.isfinite(v) or not 0.0 <= v <= 1.0:
            raise ParseError(f"{path}:{lineno}: {name}={v!r} outside [0, 1]")
    if w <= 0 or h <= 0:
        raise ParseError(f"{path}:{lineno}: non-positive box extent {w}x{h}")
    # everything collapses onto the single vehicle class
    return BoundingBox(cx=cx, cy=cy, w=w, h=h, class_id=0)


def load_dataset(root):
    """Read back a dataset directory, sorted by image stem.

    A missing label file is an empty scene (with a warning); a
    malformed label line raises ParseError naming the file and line.
    """
    root = Path(root)
    images_dir = root / "images"
    if not images_dir.is_dir():
        raise ValueError(f"no images directory under {root}")
    scenes = []
    for png in sorted(images_dir.glob("*.png")):
        img = _png_to_image(png)
        label_path = root / "labels" / f"{png.stem}.txt"
        boxes = []
        if label_path.exists():
            for lineno, line in enumerate(label_path.read_text().splitlines(), start=1):
                if line.strip():
                    boxes.append(_parse_label_line(label_path, lineno, line))
        else:
            logger.warning("no label file for %s; treating as empty", png.name)
        scenes.append(LabeledScene(image=img, boxes=tuple(boxes), source_id=png.stem))
    return scenes
