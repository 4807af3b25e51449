"""Central finite-difference checks of the analytic loss gradients.

Each entry of :data:`CASES` draws a random differentiable point and
returns ``(x0, fun)`` where ``fun(x) -> (value, grad)`` on a flat vector.
A case may add a third element, a vectorized value function mapping
``(N, P)`` points to ``(N,)`` values; finite differences then use it
instead of ``fun`` (it is built from the plain value functions, so it is
also an independent oracle for the composed gradient).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from .facemodel import NUM_COEFFS, NUM_LANDMARKS, synthetic_model
from .geometry import (
    covariance_from_features,
    quat_conj,
    quat_from_features,
    quat_mul,
    random_quaternions,
    raw_quat,
)

STEP = 1e-5
RTOL = 1e-4
ATOL = 1e-7


def numerical_gradient_batched(fbatch, x, step=STEP, chunk=64):
    """Central differences with all perturbed points evaluated in chunks."""
    x = np.asarray(x, dtype=float)
    n = x.size
    g = np.empty(n)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        pts = np.repeat(x[None], 2 * len(idx), axis=0)
        pts[np.arange(len(idx)), idx] += step
        pts[len(idx) + np.arange(len(idx)), idx] -= step
        vals = fbatch(pts)
        g[idx] = (vals[: len(idx)] - vals[len(idx) :]) / (2.0 * step)
    return g


def numerical_gradient(f, x, step=STEP):
    x = np.array(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + step
        fp = f(x)
        x[i] = old - step
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2.0 * step)
    return g


def relative_error(analytic, numeric, rtol=RTOL, atol=ATOL):
    """Componentwise ``|a - n| / max(|n|, atol / rtol)``; passes when below ``rtol``."""
    return np.abs(analytic - numeric) / np.maximum(np.abs(numeric), atol / rtol)


@dataclass
class CheckResult:
    name: str
    points: int
    max_rel_error: float
    passed: bool


def check_case(name, points=100, seed=0, step=STEP) -> CheckResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    make = CASES[name]
    worst = 0.0
    for _ in range(points):
        x0, fun, *batched = make(rng)
        _, grad = fun(x0)
        if batched:
            num = numerical_gradient_batched(batched[0], x0, step)
        else:
            num = numerical_gradient(lambda x: fun(x)[0], x0, step)
        worst = max(worst, float(np.max(relative_error(grad, num))))
    return CheckResult(name, points, worst, worst < RTOL)


def _split(x, sizes):
    out, start = [], 0
    for s in sizes:
        out.append(x[start : start + s])
        start += s
    return out


def _away_from_zero(rng, size, scale=1.0):
    """Residuals kept at least 1e-2 from the L1 kink."""
    return rng.choice([-1.0, 1.0], size=size) * (1e-2 + np.abs(rng.normal(scale=scale, size=size)))


def _rot_features(rng):
    # keep the relative rotation away from the log-map cut at pi
    while True:
        zq = rng.normal(size=4)
        q = random_quaternions(rng, 1)[0]
        rel = quat_mul(quat_conj(quat_from_features(zq)), q)
        if abs(rel[3]) > 1e-2:
            return zq, q


def _case_rot_loss(rng):
    zq, q = _rot_features(rng)

    def fun(x):
        v, g = L.rot_loss_grad(x[None], q[None])
        return v[0], g[0]

    return zq, fun


def _case_rot_nll(rng):
    zq, q = _rot_features(rng)
    m = rng.normal(scale=0.7, size=6)

    def fun(x):
        a, b = _split(x, [4, 6])
        v, gz, gm = L.rot_nll_grad(a[None], q[None], b[None])
        return v[0], np.concatenate([gz[0], gm[0]])

    return np.concatenate([zq, m]), fun


def _case_pos_size_loss(rng):
    p = np.array([*rng.uniform(-1, 1, 2), rng.uniform(0.2, 2)])

    def fun(x):
        v, g = L.pos_size_loss_grad(x[None], p[None])
        return v[0], g[0]

    return rng.normal(size=3), fun


def _case_pos_size_nll(rng):
    p = np.array([*rng.uniform(-1, 1, 2), rng.uniform(0.2, 2)])

    def fun(x):
        a, b = _split(x, [3, 6])
        v, gz, gm = L.pos_size_nll_grad(a[None], p[None], b[None])
        return v[0], np.concatenate([gz[0], gm[0]])

    return np.concatenate([rng.normal(size=3), rng.normal(scale=0.7, size=6)]), fun


def _case_shape_loss(rng):
    phi = rng.normal(size=NUM_COEFFS)

    def fun(x):
        v, g = L.shape_loss_grad(x[None], phi[None])
        return v[0], g[0]

    return rng.normal(size=NUM_COEFFS), fun


def _case_shape_nll(rng):
    phi = rng.normal(size=NUM_COEFFS)

    def fun(x):
        a, b = _split(x, [NUM_COEFFS, NUM_COEFFS])
        v, gz, gs = L.shape_nll_grad(a[None], phi[None], b)
        return v[0], np.concatenate([gz[0], gs[0]])

    return rng.normal(size=2 * NUM_COEFFS), fun


def _landmark_setup(rng):
    xihat = rng.normal(size=(NUM_LANDMARKS, 3))
    xi = xihat - _away_from_zero(rng, (NUM_LANDMARKS, 3))
    dims = rng.choice([2, 3])
    cmask = (np.arange(3) < dims) * np.ones((NUM_LANDMARKS, 1))
    return xihat, xi, cmask


def _case_landmark_loss(rng):
    xihat, xi, cmask = _landmark_setup(rng)
    w = L.default_landmark_weights()

    def fun(x):
        v, g = L.landmark_loss_grad(x.reshape(1, NUM_LANDMARKS, 3), xi[None], w, cmask[None])
        return v[0], g[0].ravel()

    return xihat.ravel(), fun


def _case_landmark_nll(rng):
    xihat, xi, cmask = _landmark_setup(rng)
    w = L.default_landmark_weights()
    n = NUM_LANDMARKS * 3

    def fun(x):
        a, b = _split(x, [n, n])
        v, g, gb = L.landmark_nll_grad(
            a.reshape(1, NUM_LANDMARKS, 3), xi[None], w, cmask[None], b.reshape(NUM_LANDMARKS, 3)
        )
        return v[0], np.concatenate([g[0].ravel(), gb[0].ravel()])

    return np.concatenate([xihat.ravel(), rng.normal(size=n)]), fun


def _case_bbox_loss(rng):
    box = np.array([*rng.uniform(-1, 1, 2), *rng.uniform(0.2, 2, 2)])

    def fun(x):
        v, g = L.bbox_loss_grad(x[None], box[None])
        return v[0], g[0]

    return rng.normal(size=4), fun


def _case_bbox_nll(rng):
    box = np.array([*rng.uniform(-1, 1, 2), *rng.uniform(0.2, 2, 2)])

    def fun(x):
        a, b = _split(x, [4, 4])
        v, g, gs = L.bbox_nll_grad(a[None], box[None], b)
        return v[0], np.concatenate([g[0], gs[0]])

    return rng.normal(size=8), fun


def _case_quat_norm(rng):
    def fun(x):
        v, g = L.quat_norm_penalty_grad(x[None])
        return v[0], g[0]

    return rng.normal(size=4), fun


_MODEL = None


def _model():
    global _MODEL
    if _MODEL is None:
        _MODEL = synthetic_model(0)
    return _MODEL


def _case_landmark_projection(rng):
    """Weighted sum of projected landmarks, checks the projection VJP on its own."""
    model = _model()
    weights = rng.normal(size=(NUM_LANDMARKS, 3))

    def fun(x):
        zq, zp, phi = _split(x, [4, 3, NUM_COEFFS])
        xi = L.predict_landmarks(model, zq[None], zp[None], phi[None])
        gq, gp, gphi = L.predict_landmarks_vjp(model, zq[None], zp[None], phi[None], weights[None])
        return float(np.sum(weights * xi[0])), np.concatenate([gq[0], gp[0], gphi[0]])

    x0 = np.concatenate([rng.normal(size=4), rng.normal(size=3), rng.normal(size=NUM_COEFFS)])
    return x0, fun


def _case_total(rng):
    model = _model()
    bsz = 2
    out0 = L.HeadOutput.from_matrix(rng.normal(scale=0.5, size=(bsz, L.HEAD_DIM)))
    aux0 = L.AuxParams(
        rng.normal(size=NUM_COEFFS), rng.normal(size=4), rng.normal(size=(NUM_LANDMARKS, 3))
    )
    quat = np.stack([_rot_features(rng)[1] for _ in range(bsz)])
    for i in range(bsz):
        while abs(quat_mul(quat_conj(quat_from_features(out0.quat[i])), quat[i])[3]) < 1e-2:
            quat[i] = random_quaternions(rng, 1)[0]
    xihat = L.predict_landmarks(model, out0.quat, out0.pos, out0.shape)
    labels = L.LabelBatch(
        quat=quat,
        pos=np.column_stack([rng.uniform(-1, 1, (bsz, 2)), rng.uniform(0.2, 2, bsz)]),
        shape=rng.normal(size=(bsz, NUM_COEFFS)),
        landmarks=xihat - _away_from_zero(rng, xihat.shape, 0.3),
        bbox=np.column_stack([rng.uniform(-1, 1, (bsz, 2)), rng.uniform(0.2, 2, (bsz, 2))]),
        has_rot=np.array([True, False]),
        has_pos=np.array([True, False]),
        has_shape=np.array([True, False]),
        has_bbox=np.array([True, False]),
        landmark_dims=np.array([3, 2]),
    )
    weights = L.LossWeights(beta_total=0.5, alpha_norm=0.1)
    nh = bsz * L.HEAD_DIM

    def fun(x):
        out = L.HeadOutput.from_matrix(x[:nh].reshape(bsz, L.HEAD_DIM))
        aux = L.AuxParams.from_vector(x[nh:])
        res = L.total_loss(out, aux, labels, weights, model=model)
        return res.value, np.concatenate([res.grad_out.to_matrix().ravel(), res.grad_aux.to_vector()])

    lw = L.default_landmark_weights()

    def values(xs):
        z = xs[:, :nh].reshape(len(xs), bsz, L.HEAD_DIM)
        o = L.HeadOutput(**{k: z[..., sl] for k, sl in _head_slices().items()})
        a = xs[:, nh:]
        zs_shape = a[:, None, :NUM_COEFFS]
        zs_bbox = a[:, None, NUM_COEFFS : NUM_COEFFS + 4]
        zs_lmk = a[:, NUM_COEFFS + 4 :].reshape(-1, NUM_LANDMARKS, 3)
        qh = quat_from_features(o.quat)
        ph = L.pos_size_from_features(o.pos)
        bh = L.bbox_from_features(o.bbox)
        b_tot = weights.beta_total
        per = (
            labels.has_rot
            * (
                weights.alpha_rot * L.rot_loss(qh, labels.quat)
                + b_tot * weights.beta_rot
                * L.rot_nll(qh, labels.quat, covariance_from_features(o.rot_cov))
            )
            + labels.has_pos
            * (
                weights.alpha_p * L.pos_size_loss(ph, labels.pos)
                + b_tot * weights.beta_p
                * L.pos_size_nll(ph, labels.pos, covariance_from_features(o.pos_cov))
            )
            + labels.has_shape
            * (
                weights.alpha_phi * L.shape_loss(o.shape, labels.shape)
                + b_tot * weights.beta_phi
                * L.shape_nll(o.shape, labels.shape, L.scale_from_features(zs_shape))
            )
            + labels.has_bbox
            * (
                weights.alpha_bb * L.bbox_loss(bh, labels.bbox)
                + b_tot * weights.beta_bb * L.bbox_nll(bh, labels.bbox, L.scale_from_features(zs_bbox))
            )
            + weights.alpha_norm * L.quat_norm_penalty(raw_quat(o.quat))
        )
        xihat = L.predict_landmarks(model, o.quat, o.pos, o.shape)
        b = L.scale_from_features(zs_lmk)
        for i, dims in enumerate(labels.landmark_dims):
            per[:, i] += weights.alpha_xi * L.landmark_loss(xihat[:, i], labels.landmarks[i], lw, int(dims))
            per[:, i] += b_tot * weights.beta_xi * L.landmark_nll(
                xihat[:, i], labels.landmarks[i], b, lw, int(dims)
            )
        return per.sum(axis=1) / bsz

    return np.concatenate([out0.to_matrix().ravel(), aux0.to_vector()]), fun, values


def _head_slices():
    out, start = {}, 0
    for name, size in L.HEAD_SIZES.items():
        out[name] = slice(start, start + size)
        start += size
    return out


CASES = {
    "rot_loss": _case_rot_loss,
    "rot_nll": _case_rot_nll,
    "pos_size_loss": _case_pos_size_loss,
    "pos_size_nll": _case_pos_size_nll,
    "shape_loss": _case_shape_loss,
    "shape_nll": _case_shape_nll,
    "landmark_loss": _case_landmark_loss,
    "landmark_nll": _case_landmark_nll,
    "bbox_loss": _case_bbox_loss,
    "bbox_nll": _case_bbox_nll,
    "quat_norm_penalty": _case_quat_norm,
    "landmark_projection": _case_landmark_projection,
    "total_loss": _case_total,
}
