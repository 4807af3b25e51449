"""Training-time augmentation: random square crops with consistent label
transforms, photometric operations and Gaussian pixel noise.

Pixel coordinates put pixel centres on integers (column, row). Labels use
normalized image coordinates ``x = (2u + 1 - W) / max(W, H)`` (same for y
with ``H``), so the longer image side spans [-1, 1] and both axes share one
scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import kernels
from .data import SampleRecord
from .facemodel import LANDMARK_MIRROR
from .geometry import axis_angle, canonical, quat_mul

MIRROR_QUAT_SIGNS = np.array([1.0, -1.0, -1.0, 1.0])
NUM_INTENSITY_OPS = 6
# feasibility keeps this much headroom so other polygon codes agree on the bound
VISIBILITY_MARGIN = 1e-9


@dataclass(frozen=True)
class AugmentConfig:
    scale_mean: float = 1.1
    scale_sd: float = 0.1
    scale_min: float = 0.6
    scale_max: float = 1.6
    max_rotation_deg: float = 30.0
    offset_sd: float = 0.1  # per axis, as a fraction of the ROI side
    offset_clip: float = 2.5  # in standard deviations
    min_visible: float = 0.7
    mirror_prob: float = 0.5
    quarter_turn_prob: float = 0.01
    op_prob: float = 0.1
    ops_per_sample: int = 4
    noise_stages: tuple = ((0.5, 4.0), (0.1, 16.0))
    out_size: int = 129

    def __post_init__(self):
        probs = [self.mirror_prob, self.quarter_turn_prob, self.op_prob] + [p for p, _ in self.noise_stages]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        positive = [self.scale_mean, self.scale_min, self.scale_max, self.max_rotation_deg, self.out_size]
        if any(v <= 0 for v in positive) or self.scale_min > self.scale_max:
            raise ValueError("scales, limits and output size must be positive")
        if not 0.0 < self.min_visible <= 1.0:
            raise ValueError("min_visible must lie in (0, 1]")
        if not 0 <= self.ops_per_sample <= NUM_INTENSITY_OPS:
            raise ValueError(f"ops_per_sample must be between 0 and {NUM_INTENSITY_OPS}")


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for one sample of a seeded run."""
    return np.random.default_rng([int(seed), int(index)])


# ---------------------------------------------------------------------------
# affine maps


@dataclass(frozen=True)
class Affine2D:
    """``p -> A[:, :2] p + A[:, 2]`` on (x, y) points."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (2, 3):
            raise ValueError("affine matrix must be 2x3")
        if abs(np.linalg.det(m[:, :2])) <= 1e-9:
            raise ValueError("affine map is not invertible")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_parts(cls, linear, offset) -> Affine2D:
        return cls(np.column_stack([linear, offset]))

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def offset(self) -> np.ndarray:
        return self.matrix[:, 2]

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        return pts @ self.linear.T + self.offset

    def __matmul__(self, other: Affine2D) -> Affine2D:
        """``(self @ other)(p) == self(other(p))``."""
        return Affine2D.from_parts(self.linear @ other.linear, self.linear @ other.offset + self.offset)

    def inverse(self) -> Affine2D:
        inv = np.linalg.inv(self.linear)
        return Affine2D.from_parts(inv, -inv @ self.offset)

    def similarity_parts(self, tol=1e-9):
        """Decompose the linear part as ``k R(theta) D^mirror`` with ``D = diag(-1, 1)``."""
        lin = self.linear
        mirror = bool(np.linalg.det(lin) < 0)
        rot = lin @ np.diag([-1.0, 1.0]) if mirror else lin
        k = float(np.sqrt(abs(np.linalg.det(rot))))
        theta = float(np.arctan2(rot[1, 0], rot[0, 0]))
        if np.max(np.abs(rot - k * rotation2d(theta))) > tol * max(k, 1.0):
            raise ValueError("map is not a similarity transform")
        return k, theta, mirror


def rotation2d(theta) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def normalization(width: int, height: int) -> Affine2D:
    """Pixel to normalized coordinates for a ``width x height`` image."""
    k = 2.0 / max(width, height)
    return Affine2D.from_parts(k * np.eye(2), [(1.0 - width) / max(width, height), (1.0 - height) / max(width, height)])


def to_normalized(t: Affine2D, src_shape, out_shape) -> Affine2D:
    """Express a pixel-space map between two images in normalized coordinates."""
    n_src = normalization(src_shape[1], src_shape[0])
    n_out = normalization(out_shape[1], out_shape[0])
    return n_out @ t @ n_src.inverse()


# ---------------------------------------------------------------------------
# geometry sampling


def _polygon_area(poly) -> float:
    pts = np.asarray(poly, dtype=float).tolist()
    if len(pts) < 3:
        return 0.0
    return 0.5 * sum(x0 * y1 - x1 * y0 for (x0, y0), (x1, y1) in zip(pts, pts[1:] + pts[:1]))


def clip_convex(subject, clip) -> np.ndarray:
    """Sutherland-Hodgman clipping of a polygon by a convex polygon."""
    clip = np.asarray(clip, dtype=float)
    if _polygon_area(clip) < 0:
        clip = clip[::-1]
    # plain floats: these polygons have a handful of vertices, where numpy overhead dominates
    clip_pts = [tuple(p) for p in clip.tolist()]
    out = [tuple(p) for p in np.asarray(subject, dtype=float).tolist()]
    for (ax, ay), (bx, by) in zip(clip_pts, clip_pts[1:] + clip_pts[:1]):
        if not out:
            break
        ex, ey = bx - ax, by - ay
        pts, out = out, []
        prev = pts[-1]
        sp = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in pts:
            sc = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if sc >= 0:
                if sp < 0:
                    f = sp / (sp - sc)
                    out.append((prev[0] + (cur[0] - prev[0]) * f, prev[1] + (cur[1] - prev[1]) * f))
                out.append(cur)
            elif sp >= 0:
                f = sp / (sp - sc)
                out.append((prev[0] + (cur[0] - prev[0]) * f, prev[1] + (cur[1] - prev[1]) * f))
            prev, sp = cur, sc
    return np.array(out, dtype=float).reshape(-1, 2)


def box_polygon(box) -> np.ndarray:
    cx, cy, w, h = box
    return np.array([[cx - w / 2, cy - h / 2], [cx + w / 2, cy - h / 2], [cx + w / 2, cy + h / 2], [cx - w / 2, cy + h / 2]])


def roi_polygon(center, side, theta) -> np.ndarray:
    half = side / 2.0 * np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
    return half @ rotation2d(theta).T + np.asarray(center, dtype=float)


def visible_fraction(box, center, side, theta) -> float:
    """Fraction of the box area covered by the rotated square ROI."""
    inter = clip_convex(box_polygon(box), roi_polygon(center, side, theta))
    return abs(_polygon_area(inter)) / (box[2] * box[3])


@dataclass(frozen=True)
class CropGeometry:
    center: np.ndarray  # ROI centre, source pixels
    side: float  # ROI side, source pixels
    theta: float  # ROI rotation, radians
    mirror: bool
    quarter_turn: bool
    out_size: int

    @property
    def affine(self) -> Affine2D:
        """Source pixel -> crop pixel."""
        k = self.out_size / self.side
        lin = k * rotation2d(-self.theta)
        if self.mirror:
            lin = np.diag([-1.0, 1.0]) @ lin
        if self.quarter_turn:
            lin = rotation2d(np.pi / 2) @ lin
        c_out = np.full(2, (self.out_size - 1) / 2.0)
        return Affine2D.from_parts(lin, c_out - lin @ self.center)


def _bisect(feasible, lo, hi, iters=40):
    """Boundary between a feasible ``lo`` and an infeasible ``hi``; returns the feasible end."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def sample_geometric(rng, box, cfg: AugmentConfig = AugmentConfig()) -> CropGeometry:
    """Draw a square ROI around ``box = (cx, cy, w, h)`` (source pixels).

    The ROI side is the longer box side times a clipped normal scale,
    rotated uniformly within the configured limit and offset by a clipped
    normal shift. If the draw would leave less than ``cfg.min_visible`` of
    the box inside the ROI, the scale is raised (only if even a centred ROI
    is too small) and then the offset is pulled toward zero along its
    direction until the constraint holds.
    """
    box = np.asarray(box, dtype=float)
    if box[2] <= 0 or box[3] <= 0:
        raise ValueError("box must have positive area")
    base = max(box[2], box[3])
    center0 = box[:2]
    scale = float(np.clip(rng.normal(cfg.scale_mean, cfg.scale_sd), cfg.scale_min, cfg.scale_max))
    limit = np.deg2rad(cfg.max_rotation_deg)
    theta = float(rng.uniform(-limit, limit))
    offset = np.array([rng.normal(0.0, cfg.offset_sd), rng.normal(0.0, cfg.offset_sd)])
    offset = np.clip(offset, -cfg.offset_sd * cfg.offset_clip, cfg.offset_sd * cfg.offset_clip)
    mirror = bool(rng.random() < cfg.mirror_prob)
    quarter = bool(rng.random() < cfg.quarter_turn_prob)

    def ok_scale(s):
        return visible_fraction(box, center0, s * base, theta) >= cfg.min_visible + VISIBILITY_MARGIN

    if not ok_scale(scale):
        hi = max(cfg.scale_max, scale)
        while not ok_scale(hi):
            hi *= 1.5
        scale = _bisect(ok_scale, hi, scale)
    side = scale * base

    def ok_offset(t):
        return visible_fraction(box, center0 + t * offset * side, side, theta) >= cfg.min_visible + VISIBILITY_MARGIN

    t = 1.0 if ok_offset(1.0) else _bisect(ok_offset, 0.0, 1.0)
    return CropGeometry(center0 + t * offset * side, side, theta, mirror, quarter, cfg.out_size)


# ---------------------------------------------------------------------------
# resampling and labels


def warp_image(img, t: Affine2D, out_size: int = 129) -> np.ndarray:
    """Bilinear resampling of ``img`` into an ``out_size`` square through ``t``."""
    return kernels.warp_bilinear(img, t.inverse().matrix, out_size, out_size)


def mirror_record(record: SampleRecord) -> SampleRecord:
    """Reflect labels about the vertical image axis (x -> -x in normalized coordinates)."""
    return transform_labels(record, Affine2D.from_parts(np.diag([-1.0, 1.0]), [0.0, 0.0]))


def transform_labels(record: SampleRecord, t: Affine2D) -> SampleRecord:
    """Apply a similarity map given in normalized coordinates to every label.

    The map decomposes as ``k R(theta) D`` (optional reflection ``D``,
    in-plane rotation, isotropic scale ``k``) plus a shift. The head
    rotation is reflected and then composed with the rotation about the
    view axis, size and landmark depth are scaled by ``k``, 2D quantities
    go through ``t``, and reflections reorder the landmarks left/right.
    Shape coefficients are unchanged. Predicted covariance features are
    dropped because they do not survive the change of frame in raw form.
    """
    k, theta, mirror = t.similarity_parts()
    changes = {"rot_cov": None, "pos_cov": None}
    perm = LANDMARK_MIRROR if mirror else np.arange(len(LANDMARK_MIRROR))
    if record.quat is not None:
        q = record.quat * MIRROR_QUAT_SIGNS if mirror else record.quat
        changes["quat"] = canonical(quat_mul(axis_angle([0.0, 0.0, 1.0], theta), q))
    if record.pos is not None:
        changes["pos"] = t(record.pos)
        changes["size"] = k * record.size
    if record.landmarks is not None:
        lm = record.landmarks[perm]
        new = lm.copy()
        new[:, :2] = t(lm[:, :2])
        if lm.shape[1] == 3:
            new[:, 2] = k * lm[:, 2]
        changes["landmarks"] = new
    if record.landmark_confidence is not None:
        changes["landmark_confidence"] = record.landmark_confidence[perm]
    if record.bbox is not None:
        # axis-aligned hull of the mapped rectangle: centre maps through t,
        # extents through |A| (same as min/max of the mapped corners)
        centre = t(record.bbox[:2])
        changes["bbox"] = np.concatenate([centre, np.abs(t.linear) @ record.bbox[2:]])
    return record.replace(**changes)


# ---------------------------------------------------------------------------
# photometric operations


def _round_clip(x) -> np.ndarray:
    return np.clip(np.floor(np.asarray(x, dtype=float) + 0.5), 0, 255).astype(np.uint8)


def equalize(img) -> np.ndarray:
    """Global histogram equalization."""
    hist = np.bincount(img.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    cmin = cdf[np.flatnonzero(hist)[0]]
    if cdf[-1] == cmin:
        return img.copy()
    lut = _round_clip((cdf - cmin) / (cdf[-1] - cmin) * 255.0)
    return lut[img]


def posterize(img, bits: int) -> np.ndarray:
    mask = (0xFF << (8 - int(bits))) & 0xFF
    return img & np.uint8(mask)


def adjust_gamma(img, gamma: float) -> np.ndarray:
    return _round_clip(255.0 * (img / 255.0) ** gamma)


def adjust_contrast(img, factor: float) -> np.ndarray:
    mean = float(np.mean(img))
    return _round_clip((img - mean) * factor + mean)


def adjust_brightness(img, offset: float) -> np.ndarray:
    return _round_clip(img.astype(float) + offset)


def blur(img, sigma: float) -> np.ndarray:
    return _round_clip(ndimage.gaussian_filter(img.astype(float), sigma, mode="nearest"))


# name -> (draw parameter, apply)
INTENSITY_OPS = {
    "equalize": (lambda rng: None, lambda img, _: equalize(img)),
    "posterize": (lambda rng: int(rng.integers(4, 7)), posterize),
    "gamma": (lambda rng: float(rng.uniform(0.5, 2.0)), adjust_gamma),
    "contrast": (lambda rng: float(rng.uniform(0.7, 1.3)), adjust_contrast),
    "brightness": (lambda rng: float(rng.uniform(-30.0, 30.0)), adjust_brightness),
    "blur": (lambda rng: float(rng.uniform(0.5, 1.5)), blur),
}


def intensity_ops(img, rng, cfg: AugmentConfig = AugmentConfig()):
    """Pick ``cfg.ops_per_sample`` distinct ops; each fires with ``cfg.op_prob``.

    Returns the image and the list of ``(name, parameter)`` applied.
    """
    names = list(INTENSITY_OPS)
    chosen = rng.choice(len(names), size=cfg.ops_per_sample, replace=False)
    applied = []
    out = np.asarray(img, dtype=np.uint8)
    for i in chosen:
        name = names[i]
        if rng.random() < cfg.op_prob:
            draw, apply = INTENSITY_OPS[name]
            param = draw(rng)
            out = apply(out, param)
            applied.append((name, param))
    return out, applied


def add_noise(img, rng, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Additive Gaussian noise in independently firing stages, rounded and clamped each time."""
    out = np.asarray(img, dtype=np.uint8)
    for prob, sigma in cfg.noise_stages:
        if rng.random() < prob:
            out = _round_clip(out + rng.normal(0.0, sigma, size=out.shape))
    return out


# ---------------------------------------------------------------------------
# full pipeline


def augment_sample(img, record: SampleRecord, rng, cfg: AugmentConfig = AugmentConfig()):
    """Crop, warp and photometrically perturb one sample; returns ``(crop, labels, geometry)``.

    The source ROI is placed around ``record.bbox`` (normalized units).
    """
    if record.bbox is None:
        raise ValueError(f"sample {record.id!r} has no bounding box")
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    to_px = normalization(w, h).inverse()
    box_px = np.concatenate([to_px(record.bbox[:2]), record.bbox[2:] * max(w, h) / 2.0])
    geom = sample_geometric(rng, box_px, cfg)
    t = geom.affine
    crop = warp_image(img, t, cfg.out_size)
    labels = transform_labels(record, to_normalized(t, (h, w), (cfg.out_size, cfg.out_size)))
    crop, _ = intensity_ops(crop, rng, cfg)
    crop = add_noise(crop, rng, cfg)
    return crop, labels, geom
