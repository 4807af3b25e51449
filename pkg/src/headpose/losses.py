"""Regression losses, negative log-likelihoods and the weighted total.

Two layers:

* value functions (``rot_loss``, ``rot_nll``, ...) on natural quantities
  such as unit quaternions and covariance matrices;
* ``*_grad`` functions on unconstrained raw head features, batched over a
  leading axis, returning per-sample values and analytic gradients.

Scale and variance parameters of the input-independent NLLs are
``smoothclip(feature) + SCALE_FLOOR``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .facemodel import EYE_CENTER_LANDMARKS, NUM_COEFFS, NUM_LANDMARKS, DeformableModel
from .geometry import (
    TRIL_COLS,
    TRIL_ROWS,
    log_map,
    quat_conj,
    quat_from_features,
    quat_mul,
    raw_quat,
    right_mul_matrix,
    cross,
    rotate,
    smoothclip,
    smoothclip_grad,
    tril_from_features,
)

LOG_2PI = float(np.log(2.0 * np.pi))
SCALE_FLOOR = 1e-6
DEFAULT_EPS = 1e-4
_CONJ = np.array([-1.0, -1.0, -1.0, 1.0])


@dataclass
class LossWeights:
    alpha_rot: float = 1.0
    alpha_p: float = 1.0
    alpha_phi: float = 0.01
    alpha_xi: float = 1.0
    alpha_bb: float = 0.01
    alpha_norm: float = 1e-6
    beta_total: float = 0.01
    beta_rot: float = 1.0
    beta_p: float = 1.0
    beta_phi: float = 0.01
    beta_xi: float = 1.0
    beta_bb: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")


def default_landmark_weights() -> np.ndarray:
    """All ones except the eight upper/lower eyelid points, which are untrained."""
    w = np.ones(NUM_LANDMARKS)
    w[EYE_CENTER_LANDMARKS] = 0.0
    return w


@dataclass(frozen=True)
class LabelMask:
    rotation: bool = False
    pos_size: bool = False
    shape: bool = False
    landmarks3d: bool = False
    landmarks2d: bool = False
    bbox: bool = False

    def __post_init__(self):
        if not any(getattr(self, f.name) for f in fields(self)):
            raise ValueError("label mask must enable at least one group")

    @property
    def landmark_dims(self) -> int:
        if self.landmarks3d:
            return 3
        return 2 if self.landmarks2d else 0


# ---------------------------------------------------------------------------
# value functions


def rot_loss(qhat, q):
    """``1 - |qhat . q|^2``."""
    d = np.sum(np.asarray(qhat, float) * np.asarray(q, float), axis=-1)
    return 1.0 - d * d


def gaussian_nll(r, cov):
    """Multivariate normal NLL of residual ``r`` with zero mean, constants included."""
    r = np.asarray(r, dtype=float)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance is not positive definite") from exc
    y = np.linalg.solve(chol, r[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    return 0.5 * (np.sum(y * y, axis=-1) + logdet + r.shape[-1] * LOG_2PI)


def rot_nll(qhat, q, cov):
    """Normal NLL of the tangent residual ``log(qhat^-1 q)`` centred at zero."""
    return gaussian_nll(log_map(quat_mul(quat_conj(qhat), q)), cov)


def pos_size_loss(phat, p):
    d = np.asarray(p, float) - np.asarray(phat, float)
    return np.sum(d * d, axis=-1)


def pos_size_nll(phat, p, cov):
    return gaussian_nll(np.asarray(p, float) - np.asarray(phat, float), cov)


def shape_loss(phihat, phi):
    d = np.asarray(phi, float) - np.asarray(phihat, float)
    return np.sum(d * d, axis=-1)


def _diag_normal_nll(r, var):
    var = np.asarray(var, dtype=float)
    if np.any(var <= 0):
        raise ValueError("variances must be positive")
    return 0.5 * np.sum(r * r / var + np.log(var) + LOG_2PI, axis=-1)


def shape_nll(phihat, phi, sigma):
    """Independent normal NLL; ``sigma`` holds the diagonal of the covariance."""
    return _diag_normal_nll(np.asarray(phi, float) - np.asarray(phihat, float), sigma)


def _landmark_dims(mask):
    if mask is None:
        return 3
    if isinstance(mask, LabelMask):
        return mask.landmark_dims
    return int(mask)


def landmark_loss(xihat, xi, w=None, mask=None):
    """Weighted L1 over 68 x 3 coordinates, or x/y only for 2D labels."""
    dims = _landmark_dims(mask)
    w = default_landmark_weights() if w is None else np.asarray(w, float)
    d = np.abs(np.asarray(xi, float)[..., :dims] - np.asarray(xihat, float)[..., :dims])
    return np.sum(w[:, None] * d, axis=(-2, -1))


def landmark_nll(xihat, xi, b, w=None, mask=None):
    """Weighted Laplace NLL ``sum w (log 2b + |r| / b)``."""
    dims = _landmark_dims(mask)
    b = np.asarray(b, float)
    b = np.broadcast_to(b, np.broadcast_shapes(b.shape, (NUM_LANDMARKS, 3)))[..., :dims]
    if np.any(b <= 0):
        raise ValueError("Laplace scales must be positive")
    w = default_landmark_weights() if w is None else np.asarray(w, float)
    d = np.abs(np.asarray(xi, float)[..., :dims] - np.asarray(xihat, float)[..., :dims])
    return np.sum(w[:, None] * (np.log(2.0 * b) + d / b), axis=(-2, -1))


def bbox_corners(box):
    """``(cx, cy, w, h)`` to ``(x0, y0, x1, y1)``."""
    box = np.asarray(box, dtype=float)
    c, half = box[..., :2], box[..., 2:] / 2
    return np.concatenate([c - half, c + half], axis=-1)


def bbox_loss(bhat, b):
    d = bbox_corners(b) - bbox_corners(bhat)
    return np.sum(d * d, axis=-1)


def bbox_nll(bhat, b, sigma):
    return _diag_normal_nll(bbox_corners(b) - bbox_corners(bhat), sigma)


def quat_norm_penalty(qprime):
    """``(1 - |q'|)^2`` for the unnormalized quaternion."""
    n = np.linalg.norm(np.asarray(qprime, float), axis=-1)
    return (1.0 - n) ** 2


# ---------------------------------------------------------------------------
# feature-space gradients


def quat_features_vjp(zq, g_q):
    """Pull a gradient on the unit quaternion back to its four raw features."""
    qp = raw_quat(zq)
    n = np.linalg.norm(qp, axis=-1, keepdims=True)
    qh = qp / n
    g_qp = (g_q - qh * np.sum(qh * g_q, axis=-1, keepdims=True)) / n
    g_qp[..., 3] *= smoothclip_grad(zq[..., 3])
    return g_qp


def log_map_jacobian(u):
    """Rotation vector of ``u`` and its Jacobian (..., 3, 4) w.r.t. ``u``.

    ``u`` need not be exactly unit: the map ``2 atan2(|v|, w) v / |v|`` is
    scale-invariant.
    """
    u = np.asarray(u, dtype=float)
    sign = np.where(u[..., 3] < 0.0, -1.0, 1.0)
    u = u * sign[..., None]
    v = u[..., :3]
    w = u[..., 3]
    n2 = np.sum(v * v, axis=-1)
    n = np.sqrt(n2)
    ang = np.arctan2(n, w)
    small = 2.0 * ang < 1e-4
    n_s = np.where(small, 1.0, n)
    w_s = np.where(small, w, 1.0)
    t2 = n2 / (w_s * w_s)
    q2 = n2 + w * w
    g = np.where(small, (2.0 / w_s) * (1.0 - t2 / 3.0 + t2 * t2 / 5.0), 2.0 * ang / n_s)
    g_n_over_n = np.where(
        small,
        (2.0 / w_s**3) * (-2.0 / 3.0 + 0.8 * t2),
        2.0 * (w / (n_s * n_s * q2) - ang / n_s**3),
    )
    g_w = -2.0 / q2
    r = g[..., None] * v
    jac = np.zeros(u.shape[:-1] + (3, 4))
    jac[..., :3] = g[..., None, None] * np.eye(3) + g_n_over_n[..., None, None] * (
        v[..., :, None] * v[..., None, :]
    )
    jac[..., 3] = g_w[..., None] * v
    return r, jac * sign[..., None, None]


def _gaussian_nll_grad(r, m, eps):
    """NLL of residual under ``M M^T + eps I`` with gradients w.r.t. r and the six M features."""
    lower = tril_from_features(m)
    cov = lower @ np.swapaxes(lower, -1, -2) + eps * np.eye(3)
    inv = np.linalg.inv(cov)
    sol = np.einsum("...ij,...j->...i", inv, r)
    _, logdet = np.linalg.slogdet(cov)
    val = 0.5 * (np.sum(r * sol, axis=-1) + logdet + 3 * LOG_2PI)
    g_cov = 0.5 * (inv - sol[..., :, None] * sol[..., None, :])
    g_lower = 2.0 * g_cov @ lower
    return val, sol, g_lower[..., TRIL_ROWS, TRIL_COLS]


def rot_loss_grad(zq, q):
    qh = quat_from_features(zq)
    d = np.sum(qh * q, axis=-1)
    return 1.0 - d * d, quat_features_vjp(zq, -2.0 * d[..., None] * q)


def rot_nll_grad(zq, q, m, eps=DEFAULT_EPS):
    qh = quat_from_features(zq)
    u = quat_mul(quat_conj(qh), q)
    r, jac = log_map_jacobian(u)
    val, g_r, g_m = _gaussian_nll_grad(r, m, eps)
    g_u = np.einsum("...ij,...i->...j", jac, g_r)
    g_qh = _CONJ * np.einsum("...ij,...i->...j", right_mul_matrix(q), g_u)
    return val, quat_features_vjp(zq, g_qh), g_m


def pos_size_from_features(zp):
    zp = np.asarray(zp, dtype=float)
    return np.concatenate([zp[..., :2], smoothclip(zp[..., 2:3])], axis=-1)


def _pos_chain(zp, g_p):
    g = g_p.copy()
    g[..., 2] *= smoothclip_grad(zp[..., 2])
    return g


def pos_size_loss_grad(zp, p):
    d = pos_size_from_features(zp) - p
    return np.sum(d * d, axis=-1), _pos_chain(zp, 2.0 * d)


def pos_size_nll_grad(zp, p, m, eps=DEFAULT_EPS):
    r = p - pos_size_from_features(zp)
    val, g_r, g_m = _gaussian_nll_grad(r, m, eps)
    return val, _pos_chain(zp, -g_r), g_m


def shape_loss_grad(phihat, phi):
    d = phihat - phi
    return np.sum(d * d, axis=-1), 2.0 * d


def scale_from_features(z):
    return smoothclip(z) + SCALE_FLOOR


def _diag_nll_grad(r, zs):
    """Diagonal normal NLL with variances from raw features; grads w.r.t. r and zs."""
    var = scale_from_features(zs)
    val = 0.5 * np.sum(r * r / var + np.log(var) + LOG_2PI, axis=-1)
    g_var = 0.5 * (1.0 / var - r * r / var**2)
    return val, r / var, g_var * smoothclip_grad(zs)


def shape_nll_grad(phihat, phi, zs):
    val, g_r, g_zs = _diag_nll_grad(phi - phihat, zs)
    return val, -g_r, g_zs


def bbox_from_features(zb):
    zb = np.asarray(zb, dtype=float)
    return np.concatenate([zb[..., :2], smoothclip(zb[..., 2:])], axis=-1)


_CORNER_JAC = np.array(
    [
        [1.0, 0.0, -0.5, 0.0],
        [0.0, 1.0, 0.0, -0.5],
        [1.0, 0.0, 0.5, 0.0],
        [0.0, 1.0, 0.0, 0.5],
    ]
)


def _bbox_chain(zb, g_corners):
    g = g_corners @ _CORNER_JAC
    g[..., 2:] *= smoothclip_grad(zb[..., 2:])
    return g


def bbox_loss_grad(zb, box):
    d = bbox_corners(bbox_from_features(zb)) - bbox_corners(box)
    return np.sum(d * d, axis=-1), _bbox_chain(zb, 2.0 * d)


def bbox_nll_grad(zb, box, zs):
    r = bbox_corners(box) - bbox_corners(bbox_from_features(zb))
    val, g_r, g_zs = _diag_nll_grad(r, zs)
    return val, _bbox_chain(zb, -g_r), g_zs


def landmark_loss_grad(xihat, xi, w, coord_mask):
    """Weighted L1; ``coord_mask`` (..., 68, 3) selects the active coordinates."""
    d = xihat - xi
    wm = w[:, None] * coord_mask
    return np.sum(wm * np.abs(d), axis=(-2, -1)), wm * np.sign(d)


def landmark_nll_grad(xihat, xi, w, coord_mask, zb):
    b = scale_from_features(zb)
    d = xihat - xi
    wm = w[:, None] * coord_mask
    val = np.sum(wm * (np.log(2.0 * b) + np.abs(d) / b), axis=(-2, -1))
    g_b = wm * (1.0 / b - np.abs(d) / b**2)
    return val, wm * np.sign(d) / b, g_b * smoothclip_grad(zb)


def quat_norm_penalty_grad(zq):
    qp = raw_quat(zq)
    n = np.linalg.norm(qp, axis=-1, keepdims=True)
    g = -2.0 * (1.0 - n) * qp / n
    g[..., 3] *= smoothclip_grad(zq[..., 3])
    return (1.0 - n[..., 0]) ** 2, g


def predict_landmarks(model: DeformableModel, zq, zp, phi):
    """Landmarks of the posed model from raw quaternion/position features and shape coefficients."""
    qh = quat_from_features(zq)
    verts = model.landmark_base + np.einsum("...k,kld->...ld", phi, model.landmark_basis)
    rv = rotate(qh[..., None, :], verts)
    s = smoothclip(zp[..., 2])
    shift = np.concatenate([zp[..., :2], np.zeros(zp.shape[:-1] + (1,))], axis=-1)
    return s[..., None, None] * rv + shift[..., None, :]


def predict_landmarks_vjp(model: DeformableModel, zq, zp, phi, g):
    """Gradients w.r.t. (zq, zp, phi) given the gradient ``g`` on predicted landmarks."""
    qh = quat_from_features(zq)
    verts = model.landmark_base + np.einsum("...k,kld->...ld", phi, model.landmark_basis)
    rv = rotate(qh[..., None, :], verts)
    s = smoothclip(zp[..., 2])

    g_zp = np.empty_like(np.asarray(zp, dtype=float))
    g_zp[..., :2] = g[..., :2].sum(axis=-2)
    g_zp[..., 2] = np.sum(g * rv, axis=(-2, -1)) * smoothclip_grad(zp[..., 2])

    h = s[..., None, None] * g
    g_verts = rotate(quat_conj(qh)[..., None, :], h)
    g_phi = np.einsum("...ld,kld->...k", g_verts, model.landmark_basis)

    u = qh[..., None, :3]
    w = qh[..., None, 3:4]
    uv = cross(u, verts)
    g_w = 2.0 * np.sum(uv * h, axis=-1, keepdims=True)
    g_u = (
        2.0 * w * cross(verts, h)
        + 2.0 * h * np.sum(u * verts, axis=-1, keepdims=True)
        + 2.0 * verts * np.sum(u * h, axis=-1, keepdims=True)
        - 4.0 * u * np.sum(verts * h, axis=-1, keepdims=True)
    )
    g_q = np.concatenate([g_u, g_w], axis=-1).sum(axis=-2)
    return quat_features_vjp(zq, g_q), g_zp, g_phi


# ---------------------------------------------------------------------------
# batched total loss

HEAD_SIZES = {"quat": 4, "pos": 3, "shape": NUM_COEFFS, "bbox": 4, "rot_cov": 6, "pos_cov": 6}
HEAD_DIM = sum(HEAD_SIZES.values())


@dataclass
class HeadOutput:
    """Raw per-sample features of every prediction head, batch-first."""

    quat: np.ndarray
    pos: np.ndarray
    shape: np.ndarray
    bbox: np.ndarray
    rot_cov: np.ndarray
    pos_cov: np.ndarray

    @classmethod
    def from_matrix(cls, z):
        """Split a (B, HEAD_DIM) matrix into heads (views, in HEAD_SIZES order)."""
        parts, start = {}, 0
        for name, size in HEAD_SIZES.items():
            parts[name] = z[:, start : start + size]
            start += size
        return cls(**parts)

    def to_matrix(self):
        return np.concatenate([getattr(self, n) for n in HEAD_SIZES], axis=1)

    @property
    def batch_size(self) -> int:
        return len(self.quat)


@dataclass
class AuxParams:
    """Input-independent raw scale features of the shape, bbox and landmark NLLs."""

    shape_scale: np.ndarray = field(default_factory=lambda: np.zeros(NUM_COEFFS))
    bbox_scale: np.ndarray = field(default_factory=lambda: np.zeros(4))
    landmark_scale: np.ndarray = field(default_factory=lambda: np.zeros((NUM_LANDMARKS, 3)))

    def to_vector(self):
        return np.concatenate([self.shape_scale, self.bbox_scale, self.landmark_scale.ravel()])

    @classmethod
    def from_vector(cls, v):
        return cls(v[:NUM_COEFFS], v[NUM_COEFFS : NUM_COEFFS + 4], v[NUM_COEFFS + 4 :].reshape(NUM_LANDMARKS, 3))


@dataclass
class LabelBatch:
    """Ground truth for a batch; missing groups are zero-filled and masked out."""

    quat: np.ndarray  # (B, 4)
    pos: np.ndarray  # (B, 3) x, y, size
    shape: np.ndarray  # (B, 50)
    landmarks: np.ndarray  # (B, 68, 3)
    bbox: np.ndarray  # (B, 4) cx, cy, w, h
    has_rot: np.ndarray
    has_pos: np.ndarray
    has_shape: np.ndarray
    has_bbox: np.ndarray
    landmark_dims: np.ndarray  # (B,) 0, 2 or 3

    def __len__(self):
        return len(self.quat)

    def take(self, idx):
        return LabelBatch(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def coord_mask(self):
        return (np.arange(3)[None, None, :] < self.landmark_dims[:, None, None]) * np.ones(
            (1, NUM_LANDMARKS, 1)
        )


@dataclass
class LossResult:
    value: float
    terms: dict
    grad_out: HeadOutput
    grad_aux: AuxParams


def total_loss(
    out: HeadOutput,
    aux: AuxParams,
    labels: LabelBatch,
    weights: LossWeights | None = None,
    model: DeformableModel | None = None,
    landmark_weights=None,
    eps: float = DEFAULT_EPS,
) -> LossResult:
    """Weighted sum of all feasible losses divided by the batch size.

    ``terms`` maps each loss name to its weighted contribution, so the
    entries add up to ``value``. Terms with weight zero are skipped.
    """
    wts = weights or LossWeights()
    lw = default_landmark_weights() if landmark_weights is None else np.asarray(landmark_weights, float)
    bsz = out.batch_size
    if bsz == 0 or len(labels) != bsz:
        raise ValueError("batch must be non-empty and match the labels")
    g = HeadOutput(**{n: np.zeros_like(getattr(out, n), dtype=float) for n in HEAD_SIZES})
    ga = AuxParams(
        np.zeros_like(aux.shape_scale, dtype=float),
        np.zeros_like(aux.bbox_scale, dtype=float),
        np.zeros_like(aux.landmark_scale, dtype=float),
    )
    terms = {}

    def add(name, weight, mask, val):
        if weight == 0.0:
            return None
        c = weight * mask / bsz
        terms[name] = float(np.sum(c * val))
        return c

    b_tot = wts.beta_total
    m_rot = labels.has_rot.astype(float)
    m_pos = labels.has_pos.astype(float)
    m_shp = labels.has_shape.astype(float)
    m_bb = labels.has_bbox.astype(float)

    if wts.alpha_rot:
        val, dz = rot_loss_grad(out.quat, labels.quat)
        c = add("rot", wts.alpha_rot, m_rot, val)
        g.quat += c[:, None] * dz
    if b_tot * wts.beta_rot:
        val, dz, dm = rot_nll_grad(out.quat, labels.quat, out.rot_cov, eps)
        c = add("nll_rot", b_tot * wts.beta_rot, m_rot, val)
        g.quat += c[:, None] * dz
        g.rot_cov += c[:, None] * dm
    if wts.alpha_p:
        val, dz = pos_size_loss_grad(out.pos, labels.pos)
        c = add("pos", wts.alpha_p, m_pos, val)
        g.pos += c[:, None] * dz
    if b_tot * wts.beta_p:
        val, dz, dm = pos_size_nll_grad(out.pos, labels.pos, out.pos_cov, eps)
        c = add("nll_pos", b_tot * wts.beta_p, m_pos, val)
        g.pos += c[:, None] * dz
        g.pos_cov += c[:, None] * dm
    if wts.alpha_phi:
        val, dz = shape_loss_grad(out.shape, labels.shape)
        c = add("shape", wts.alpha_phi, m_shp, val)
        g.shape += c[:, None] * dz
    if b_tot * wts.beta_phi:
        val, dz, dzs = shape_nll_grad(out.shape, labels.shape, aux.shape_scale)
        c = add("nll_shape", b_tot * wts.beta_phi, m_shp, val)
        g.shape += c[:, None] * dz
        ga.shape_scale += np.sum(c[:, None] * dzs, axis=0)
    if wts.alpha_bb:
        val, dz = bbox_loss_grad(out.bbox, labels.bbox)
        c = add("bbox", wts.alpha_bb, m_bb, val)
        g.bbox += c[:, None] * dz
    if b_tot * wts.beta_bb:
        val, dz, dzs = bbox_nll_grad(out.bbox, labels.bbox, aux.bbox_scale)
        c = add("nll_bbox", b_tot * wts.beta_bb, m_bb, val)
        g.bbox += c[:, None] * dz
        ga.bbox_scale += np.sum(c[:, None] * dzs, axis=0)
    if wts.alpha_norm:
        val, dz = quat_norm_penalty_grad(out.quat)
        c = add("norm", wts.alpha_norm, np.ones(bsz), val)
        g.quat += c[:, None] * dz

    has_lmk = labels.landmark_dims > 0
    if np.any(has_lmk) and (wts.alpha_xi or b_tot * wts.beta_xi):
        if model is None:
            raise ValueError("landmark labels need a face model to predict landmarks")
        xihat = predict_landmarks(model, out.quat, out.pos, out.shape)
        cmask = labels.coord_mask()
        g_xi = np.zeros_like(xihat)
        ones = np.ones(bsz)
        if wts.alpha_xi:
            val, dxi = landmark_loss_grad(xihat, labels.landmarks, lw, cmask)
            c = add("landmarks", wts.alpha_xi, ones, val)
            g_xi += c[:, None, None] * dxi
        if b_tot * wts.beta_xi:
            val, dxi, dzb = landmark_nll_grad(xihat, labels.landmarks, lw, cmask, aux.landmark_scale)
            c = add("nll_landmarks", b_tot * wts.beta_xi, ones, val)
            g_xi += c[:, None, None] * dxi
            ga.landmark_scale += np.sum(c[:, None, None] * dzb, axis=0)
        dzq, dzp, dphi = predict_landmarks_vjp(model, out.quat, out.pos, out.shape, g_xi)
        g.quat += dzq
        g.pos += dzp
        g.shape += dphi

    value = float(sum(terms.values()))
    return LossResult(value, terms, g, ga)

