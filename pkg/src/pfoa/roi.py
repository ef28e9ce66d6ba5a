"""Patellofemoral ROI extraction from a lateral view and patellar landmarks.

Steps: rotate the image so the principal axis of the landmark cloud is
vertical, place a square box of side ``h + 2*margin`` (``h`` = patellar
height) anchored at the anterior patellar edge and extending towards the
femur, crop with edge replication, mirror right knees, then clamp to the
5th/99th percentiles and standardise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .autodiff import _interp_matrix
from .errors import ConfigError, GeometryError, ValidationError


@dataclass
class PreprocessConfig:
    margin_px: float = 20.0
    p_low: float = 5.0
    p_high: float = 99.0
    resize_to: int = 256
    crop_to: int = 224

    def __post_init__(self):
        if not 0 <= self.p_low < self.p_high <= 100:
            raise ConfigError("need 0 <= p_low < p_high <= 100", "p_low")
        if self.crop_to > self.resize_to or self.crop_to < 1:
            raise ConfigError("crop_to must be in [1, resize_to]", "crop_to")
        if self.margin_px < 0:
            raise ConfigError("margin_px must be >= 0", "margin_px")

    @classmethod
    def desk(cls):
        return cls(resize_to=72, crop_to=64)


@dataclass(frozen=True)
class RoiBox:
    x0: float
    y0: float
    side: float

    @property
    def n_pixels(self):
        return int(round(self.side))

    def as_list(self):
        return [self.x0, self.y0, self.side]


@dataclass
class RoiImage:
    pixels: np.ndarray
    side: str
    box: RoiBox
    rotation_applied: float = 0.0
    lesion_boxes: list = field(default_factory=list)

    @property
    def flipped(self):
        return self.side == "right"


# ---------------------------------------------------------------------------
# landmark geometry


def as_landmarks(points, image_shape=None):
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise GeometryError(f"need at least 3 (x, y) landmarks, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise GeometryError("landmarks contain non-finite coordinates")
    if image_shape is not None:
        h, w = image_shape[:2]
        if pts[:, 0].min() < 0 or pts[:, 1].min() < 0 or pts[:, 0].max() > w - 1 or pts[:, 1].max() > h - 1:
            raise GeometryError("landmarks fall outside the image")
    return pts


def patellar_axis_angle(landmarks):
    """Signed angle (degrees, in (-90, 90]) from the image vertical to the landmark principal axis.

    Positive angles follow the rotation ``x' = x cos t - y sin t,
    y' = x sin t + y cos t`` in pixel coordinates (y down), so a vertical
    segment rotated by +10 degrees reports +10.
    """
    pts = as_landmarks(landmarks)
    cov = np.cov(pts.T, bias=True)
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] <= 1e-12 * max(1.0, np.abs(pts).max() ** 2):
        raise GeometryError("landmarks are degenerate (all points coincide)")
    if evals[0] > 0 and evals[1] / evals[0] <= 1.01:
        raise GeometryError("landmark cloud is isotropic; principal axis undefined")
    vx, vy = evecs[:, 1]
    angle = math.degrees(math.atan2(-vx, vy))
    while angle <= -90.0:
        angle += 180.0
    while angle > 90.0:
        angle -= 180.0
    return angle


def rotate_points(points, angle_deg, center):
    t = math.radians(angle_deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    return (np.asarray(points, float) - center) @ rot.T + center


def rotate_image(image, angle_deg, center):
    """Rotate image content by ``angle_deg`` about ``center`` (x, y); bilinear, edge-replicated."""
    if angle_deg == 0:
        return np.array(image, dtype=float, copy=True)
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    # output (y, x) -> input (y, x) is the inverse rotation
    m = np.array([[c, -s], [s, c]])
    cyx = np.array([center[1], center[0]], dtype=float)
    offset = cyx - m @ cyx
    return ndimage.affine_transform(np.asarray(image, float), m, offset=offset, order=1, mode="nearest")


def align_rotation(image, landmarks, extra_points=()):
    """Rotate so the patellar axis is vertical.

    Returns ``(image, landmarks, angle_removed, extra)``; ``extra_points`` is a
    sequence of point arrays (e.g. lesion box corners) moved by the same
    rigid motion.
    """
    pts = as_landmarks(landmarks)
    angle = patellar_axis_angle(pts)
    center = pts.mean(axis=0)
    img = rotate_image(image, -angle, center)
    out = rotate_points(pts, -angle, center) if angle else pts.copy()
    extra = [rotate_points(p, -angle, center) if angle else np.asarray(p, float).copy() for p in extra_points]
    return img, out, angle, extra


# ---------------------------------------------------------------------------
# ROI box and crop


def compute_roi_box(landmarks, cfg: PreprocessConfig, side="left"):
    """Square box of side ``h + 2*margin`` around an aligned patella.

    The box starts ``margin`` before the anterior patellar edge and extends
    towards the femur (to +x for left knees, -x for right knees).
    """
    pts = as_landmarks(landmarks)
    m = cfg.margin_px
    h = float(pts[:, 1].max() - pts[:, 1].min())
    size = h + 2.0 * m
    if size < 32:
        raise GeometryError(f"ROI side {size:.1f}px is below the 32px minimum")
    y0 = float(pts[:, 1].min()) - m
    if side == "left":
        x0 = float(pts[:, 0].min()) - m
    elif side == "right":
        x0 = float(pts[:, 0].max()) + m - size
    else:
        raise ValidationError(f"side must be 'left' or 'right', got {side!r}")
    return RoiBox(x0, y0, size)


def _sample(image, ys, xs):
    image = np.asarray(image, float)
    if np.all(ys == np.round(ys)) and np.all(xs == np.round(xs)):
        yi = np.clip(ys.astype(int), 0, image.shape[0] - 1)
        xi = np.clip(xs.astype(int), 0, image.shape[1] - 1)
        return image[np.ix_(yi, xi)]
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(image, [yy, xx], order=1, mode="nearest")


def extract_roi(image, box: RoiBox, side="left", rotation_applied=0.0, lesion_boxes=()):
    """Crop ``box`` (edge-replicated outside the image); mirror right knees.

    ``lesion_boxes`` entries (dicts with ``corners`` in image coordinates)
    are mapped into ROI pixel coordinates.
    """
    if side not in ("left", "right"):
        raise ValidationError(f"side must be 'left' or 'right', got {side!r}")
    n = box.n_pixels
    ys = box.y0 + np.arange(n, dtype=float)
    xs = box.x0 + np.arange(n, dtype=float)
    crop = _sample(image, ys, xs)
    mapped = []
    for lb in lesion_boxes:
        c = np.asarray(lb["corners"], float) - [box.x0, box.y0]
        if side == "right":
            c[:, 0] = n - 1 - c[:, 0]
        mapped.append({"kind": lb["kind"], "corners": c})
    if side == "right":
        crop = flip_horizontal(crop)
    return RoiImage(pixels=crop, side=side, box=box, rotation_applied=rotation_applied, lesion_boxes=mapped)


def flip_horizontal(pixels):
    return np.ascontiguousarray(np.asarray(pixels)[:, ::-1])


# ---------------------------------------------------------------------------
# intensity


def normalize_intensity(pixels, cfg: PreprocessConfig = None):
    """Clamp to the [p_low, p_high] percentiles, then standardise to mean 0, std 1.

    Percentiles interpolate linearly between order statistics.  A
    zero-variance result maps to all zeros.
    """
    cfg = cfg or PreprocessConfig()
    x = np.asarray(pixels, dtype=np.float64)
    if x.size == 0:
        raise ValidationError("normalize_intensity: empty input")
    lo, hi = np.percentile(x, [cfg.p_low, cfg.p_high], method="linear")
    x = np.clip(x, lo, hi)
    mu = x.mean()
    sd = x.std()
    if not sd > 0 or sd < 1e-12 * max(1.0, abs(mu)):
        return np.zeros_like(x)
    out = (x - mu) / sd
    # one refinement pass removes rounding residue in the moments
    out -= out.mean()
    out /= out.std()
    return out


# ---------------------------------------------------------------------------
# resize and crop


def resize_bilinear(pixels, size):
    """Half-pixel aligned bilinear resize of a 2-D array to ``size x size``."""
    x = np.asarray(pixels, dtype=np.float64)
    uh = _interp_matrix(size, x.shape[0], np.float64)
    uw = _interp_matrix(size, x.shape[1], np.float64)
    return uh @ x @ uw.T


def resize_points(points, src_size, dst_size):
    scale = dst_size / src_size
    return (np.asarray(points, float) + 0.5) * scale - 0.5


def crop_offset(cfg: PreprocessConfig, mode, seed=None):
    span = cfg.resize_to - cfg.crop_to
    if mode == "eval":
        return span // 2, span // 2
    if mode != "train":
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    r, c = rng.integers(0, span + 1, size=2)
    return int(r), int(c)


def resize_and_crop(roi, cfg: PreprocessConfig, mode="eval", seed=None):
    """Resize to ``resize_to`` and take a ``crop_to`` crop (random in train mode, centred in eval)."""
    pixels = roi.pixels if isinstance(roi, RoiImage) else roi
    big = resize_bilinear(pixels, cfg.resize_to)
    r, c = crop_offset(cfg, mode, seed)
    return big[r : r + cfg.crop_to, c : c + cfg.crop_to]


# ---------------------------------------------------------------------------
# whole pipeline


def preprocess_knee(image, landmarks, side, cfg: PreprocessConfig, lesion_boxes=()):
    """Align, box, crop, flip and normalise one knee."""
    pts = as_landmarks(landmarks, np.shape(image))
    corners = [np.asarray(b["corners"], float) for b in lesion_boxes]
    aligned, pts2, angle, corners2 = align_rotation(image, pts, corners)
    box = compute_roi_box(pts2, cfg, side)
    moved = [{"kind": b["kind"], "corners": c} for b, c in zip(lesion_boxes, corners2)]
    roi = extract_roi(aligned, box, side, rotation_applied=-angle, lesion_boxes=moved)
    roi.pixels = normalize_intensity(roi.pixels, cfg)
    return roi


def model_input(roi: RoiImage, cfg: PreprocessConfig):
    """ROI resized to ``resize_to`` (float32) with lesion corners rescaled to match."""
    n = roi.pixels.shape[0]
    big = resize_bilinear(roi.pixels, cfg.resize_to).astype(np.float32)
    boxes = [{"kind": b["kind"], "corners": resize_points(b["corners"], n, cfg.resize_to)} for b in roi.lesion_boxes]
    return big, boxes
