"""Linear deformable face model with orthographic projection.

A model is a base mesh plus 50 deformation vectors. Projection scales,
rotates and translates the mesh; the z axis points into the image so no
further camera transform is needed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .geometry import IDENTITY, quat_to_matrix

NUM_COEFFS = 50
NUM_LANDMARKS = 68
MAGIC = b"DFM1"

# Left/right correspondence of the 68-point markup (0-based).
_MIRROR_PAIRS = (
    [(i, 16 - i) for i in range(8)]
    + [(17, 26), (18, 25), (19, 24), (20, 23), (21, 22)]
    + [(31, 35), (32, 34)]
    + [(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)]
    + [(48, 54), (49, 53), (50, 52), (55, 59), (56, 58)]
    + [(60, 64), (61, 63), (65, 67)]
)
LANDMARK_MIRROR = np.arange(NUM_LANDMARKS)
for _a, _b in _MIRROR_PAIRS:
    LANDMARK_MIRROR[_a], LANDMARK_MIRROR[_b] = _b, _a

# upper and lower eyelid points, 4 per eye
EYE_CENTER_LANDMARKS = np.array([37, 38, 40, 41, 43, 44, 46, 47])


@dataclass(frozen=True, eq=False)
class DeformableModel:
    base_vertices: np.ndarray  # (V, 3)
    basis: np.ndarray  # (K, V, 3)
    landmark_indices: np.ndarray  # (68,)
    face_section_ids: np.ndarray  # (F,)

    def __post_init__(self):
        v = self.base_vertices
        if v.ndim != 2 or v.shape[1] != 3 or len(v) < NUM_LANDMARKS:
            raise ValueError("base_vertices must be (V, 3) with V >= 68")
        if self.basis.shape != (NUM_COEFFS,) + v.shape:
            raise ValueError(f"basis must have shape ({NUM_COEFFS}, V, 3)")
        li = self.landmark_indices
        if li.shape != (NUM_LANDMARKS,) or li.min() < 0 or li.max() >= len(v):
            raise ValueError("landmark_indices must hold 68 valid vertex ids")
        fs = self.face_section_ids
        if len(fs) == 0 or fs.min() < 0 or fs.max() >= len(v):
            raise ValueError("face_section_ids must be non-empty valid vertex ids")
        for arr in (v, self.basis, li, fs):
            arr.setflags(write=False)

    @property
    def num_vertices(self) -> int:
        return len(self.base_vertices)

    @cached_property
    def landmark_base(self) -> np.ndarray:
        return self.base_vertices[self.landmark_indices]

    @cached_property
    def landmark_basis(self) -> np.ndarray:
        return np.ascontiguousarray(self.basis[:, self.landmark_indices])

    def same_as(self, other: DeformableModel) -> bool:
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("base_vertices", "basis", "landmark_indices", "face_section_ids")
        )


@dataclass(frozen=True)
class Pose:
    q: np.ndarray = IDENTITY
    tx: float = 0.0
    ty: float = 0.0
    s: float = 1.0

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("pose scale must be positive")


def reconstruct(model: DeformableModel, coeffs) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    return model.base_vertices + np.tensordot(coeffs, model.basis, axes=(0, 0))


def transform_project(vertices, pose: Pose) -> np.ndarray:
    """``s R v + (tx, ty, 0)``; the depth coordinate is kept."""
    rot = quat_to_matrix(pose.q)
    return pose.s * np.asarray(vertices, dtype=float) @ rot.T + np.array([pose.tx, pose.ty, 0.0])


def landmarks68(model: DeformableModel, coeffs, pose: Pose) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    verts = model.landmark_base + np.tensordot(coeffs, model.landmark_basis, axes=(0, 0))
    return transform_project(verts, pose)


def bbox_from_mesh(model: DeformableModel, coeffs, pose: Pose) -> np.ndarray:
    """Axis-aligned box ``(cx, cy, w, h)`` around the projected face section."""
    pts = transform_project(reconstruct(model, coeffs)[model.face_section_ids], pose)
    lo = pts[:, :2].min(axis=0)
    hi = pts[:, :2].max(axis=0)
    return np.concatenate([(lo + hi) / 2, hi - lo])


def landmark_normals(model: DeformableModel) -> np.ndarray:
    """Approximate outward unit normals at the landmark vertices.

    No topology is stored, so normals come from the gradient of the
    axis-aligned ellipsoid spanned by the base mesh extents.
    """
    v = model.base_vertices
    center = (v.max(axis=0) + v.min(axis=0)) / 2
    axes = (v.max(axis=0) - v.min(axis=0)) / 2
    n = (model.landmark_base - center) / axes**2
    return n / np.linalg.norm(n, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# synthetic stand-in model

_HEAD_AXES = np.array([0.85, 1.1, 0.95])


def _half_template():
    """Landmark (x, y) for the image-left half and the midline, in head units."""
    pts = {}
    for i in range(9):
        a = -np.pi / 2 + i * np.pi / 16
        pts[i] = (0.68 * np.sin(a), -0.05 + 0.88 * np.cos(a))
    for k, i in enumerate(range(17, 22)):
        pts[i] = (-0.6 + 0.125 * k, -0.45 - 0.08 * np.sin(np.pi * (k + 1) / 6))
    for k, i in enumerate(range(27, 31)):
        pts[i] = (0.0, -0.25 + 0.12 * k)
    pts.update({31: (-0.15, 0.2), 32: (-0.08, 0.23), 33: (0.0, 0.25)})
    pts.update(
        {
            36: (-0.5, -0.25), 37: (-0.42, -0.3), 38: (-0.28, -0.3),
            39: (-0.2, -0.25), 40: (-0.28, -0.2), 41: (-0.42, -0.2),
        }
    )
    pts.update(
        {
            48: (-0.3, 0.45), 49: (-0.2, 0.4), 50: (-0.08, 0.37), 51: (0.0, 0.38),
            59: (-0.2, 0.52), 58: (-0.08, 0.55), 57: (0.0, 0.56),
            60: (-0.22, 0.45), 61: (-0.08, 0.42), 62: (0.0, 0.42),
            67: (-0.08, 0.48), 66: (0.0, 0.48),
        }
    )
    return pts


def landmark_template() -> np.ndarray:
    """Symmetric 68-point frontal layout (x right, y down)."""
    half = _half_template()
    out = np.full((NUM_LANDMARKS, 2), np.nan)
    for i, (x, y) in half.items():
        out[i] = (x, y)
        out[LANDMARK_MIRROR[i]] = (-x, y)
    return out


def _surface(xy, rng_bump=0.15):
    """Front-surface depth for (x, y) on the head ellipsoid, with a nose ridge."""
    a, b, c = _HEAD_AXES
    x, y = xy[:, 0], xy[:, 1]
    z = -c * np.sqrt(np.clip(1.0 - (x / a) ** 2 - (y / b) ** 2, 0.0, None))
    z -= rng_bump * np.exp(-(x**2) / 0.01 - (y - 0.05) ** 2 / 0.06)
    return z


def _even_features(v):
    """Monomials in (x^2, y, z) up to degree 4, so fields are mirror-even."""
    X, y, z = v[:, 0] ** 2, v[:, 1], v[:, 2]
    one = np.ones_like(y)
    feats = [
        one, y, z, X,
        y * y, z * z, y * z, X * y, X * z,
        y**3, z**3, y * y * z, y * z * z,
        y**4, z**4, y**3 * z, y * y * z * z, y * z**3, X * y * y, X * z * z, X * y * z, X * X,
    ]
    return np.stack(feats, axis=1)


def synthetic_model(seed: int = 0, num_surface: int = 460) -> DeformableModel:
    """Deterministic procedurally generated head model.

    Mirror-symmetric about x = 0 (base, basis and landmark layout), so
    reflecting a projection equals projecting the reflected pose with the
    same coefficients and the landmark permutation ``LANDMARK_MIRROR``.
    Values are float32-representable so the binary container round-trips.
    """
    rng = np.random.default_rng(seed)
    a, b, c = _HEAD_AXES

    tmpl = landmark_template()
    lmk = np.column_stack([tmpl, _surface(tmpl)])

    # Fibonacci sphere, keep one side and mirror it
    k = np.arange(num_surface) + 0.5
    phi = np.arccos(1 - 2 * k / num_surface)
    theta = np.pi * (1 + 5**0.5) * k
    sph = np.column_stack([np.cos(theta) * np.sin(phi), np.cos(phi), np.sin(theta) * np.sin(phi)])
    sph = sph[sph[:, 0] > 0.02] * _HEAD_AXES
    front = sph[:, 2] < 0
    sph[front, 2] = _surface(sph[front, :2])
    side = np.concatenate([sph, sph * np.array([-1.0, 1.0, 1.0])])
    verts = np.concatenate([lmk, side])

    feats = _even_features(verts)
    basis = np.empty((NUM_COEFFS,) + verts.shape)
    for j in range(NUM_COEFFS):
        w = rng.normal(size=(feats.shape[1], 3))
        field = feats @ w
        field[:, 0] *= verts[:, 0]
        mag = np.linalg.norm(field, axis=1).max()
        basis[j] = field * (0.08 / (1.0 + j / 10.0) / mag)

    verts = verts.astype(np.float32).astype(float)
    basis = basis.astype(np.float32).astype(float)
    return DeformableModel(
        base_vertices=verts,
        basis=basis,
        landmark_indices=np.arange(NUM_LANDMARKS),
        face_section_ids=np.flatnonzero(verts[:, 2] < 0.0),
    )


# ---------------------------------------------------------------------------
# binary container

_HEADER = struct.Struct("<4sIIII")


def save_model(model: DeformableModel, path) -> None:
    """Write the little-endian ``DFM1`` container.

    Layout: magic, u32 V, u32 K, u32 L, u32 F, then f32 base (V*3),
    f32 basis (K*V*3), u32 landmark ids (L), u32 face-section ids (F).
    """
    v = model.num_vertices
    parts = [
        _HEADER.pack(MAGIC, v, NUM_COEFFS, NUM_LANDMARKS, len(model.face_section_ids)),
        model.base_vertices.astype("<f4").tobytes(),
        model.basis.astype("<f4").tobytes(),
        model.landmark_indices.astype("<u4").tobytes(),
        model.face_section_ids.astype("<u4").tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def load_model(path) -> DeformableModel:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated model header")
    magic, v, k, nl, nf = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if k != NUM_COEFFS or nl != NUM_LANDMARKS:
        raise ValueError(f"{path}: expected {NUM_COEFFS} basis vectors and {NUM_LANDMARKS} landmarks")
    sizes = [(v * 3, "<f4"), (k * v * 3, "<f4"), (nl, "<u4"), (nf, "<u4")]
    expected = _HEADER.size + sum(n * 4 for n, _ in sizes)
    if len(data) != expected:
        raise ValueError(f"{path}: size {len(data)} does not match header ({expected})")
    off = _HEADER.size
    arrays = []
    for n, dt in sizes:
        arrays.append(np.frombuffer(data, dtype=dt, count=n, offset=off))
        off += n * 4
    base, basis, lmk, face = arrays
    return DeformableModel(
        base_vertices=base.astype(float).reshape(v, 3),
        basis=basis.astype(float).reshape(k, v, 3),
        landmark_indices=lmk.astype(np.intp),
        face_section_ids=face.astype(np.intp),
    )
