"""Pseudo-label fitting: pose and shape coefficients from 2D landmarks under
pose and shape priors, plus EM for the diagonal Gaussian-mixture shape prior.

The fit works on the same unconstrained features the prediction heads use:
four quaternion features, ``(tx, ty, raw size)`` and the 50 coefficients,
so every gradient comes from the audited functions in :mod:`losses`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit, logsumexp

from . import losses as L
from .facemodel import NUM_COEFFS, NUM_LANDMARKS, DeformableModel, Pose, landmark_normals
from .geometry import canonical, quat_from_features, rotate, smoothclip

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
BARRIER_TEMPERATURE = 0.01
VISIBILITY_GAIN = 2.5
# landmark residuals are measured in units of this annotation noise level
# (normalized image coordinates), which sets their scale against the priors
LANDMARK_NOISE = 0.01


# ---------------------------------------------------------------------------
# shape prior


@dataclass(frozen=True)
class GaussianMixture:
    """Diagonal-covariance mixture over shape coefficients."""

    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    variances: np.ndarray  # (K, D)

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        mu = np.array(self.means, dtype=float)
        var = np.array(self.variances, dtype=float)
        if w.ndim != 1 or mu.shape != var.shape or mu.shape[0] != len(w) or len(w) == 0:
            raise ValueError("mixture needs K weights and (K, D) means and variances")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must lie on the simplex")
        if not np.all(var > 0) or not np.all(np.isfinite(mu)):
            raise ValueError("variances must be positive and means finite")
        for name, arr in (("weights", w), ("means", mu), ("variances", var)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_components(self) -> int:
        return len(self.weights)

    def _component_logpdf(self, x):
        x = np.asarray(x, dtype=float)
        d = x[..., None, :] - self.means
        return -0.5 * np.sum(d * d / self.variances + np.log(self.variances) + L.LOG_2PI, axis=-1)

    def log_density(self, x):
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logsumexp(self._component_logpdf(x) + logw, axis=-1)

    def nll(self, x):
        return -self.log_density(x)

    def nll_grad(self, x):
        """Negative log density and its gradient with respect to ``x``."""
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        lp = self._component_logpdf(x) + logw
        ld = logsumexp(lp, axis=-1)
        resp = np.exp(lp - ld[..., None])
        d = x[..., None, :] - self.means
        return -ld, np.sum(resp[..., None] * d / self.variances, axis=-2)

    def to_json(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "variances": self.variances.tolist()}

    @classmethod
    def from_json(cls, obj) -> GaussianMixture:
        return cls(obj["weights"], obj["means"], obj["variances"])

    @classmethod
    def standard(cls, dim: int = NUM_COEFFS) -> GaussianMixture:
        return cls([1.0], np.zeros((1, dim)), np.ones((1, dim)))


@dataclass
class GMMFit:
    mixture: GaussianMixture
    log_likelihood: list  # mean per-sample log-likelihood after each EM step
    converged: bool


def _kmeans_pp(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def gmm_fit(samples, k: int = 4, seed: int = 0, max_iter: int = 500, tol: float = 1e-10) -> GMMFit:
    """EM for a diagonal mixture, seeded with k-means++ centres.

    Variances are floored at ``VARIANCE_FLOOR``. Stops when the mean
    log-likelihood improves by less than ``tol`` (relative).
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2:
        raise ValueError("samples must be an (N, D) array")
    n, dim = x.shape
    if n < k or k < 1:
        raise ValueError(f"need at least K={k} samples, got {n}")
    if n < 10 * k:
        log.warning("only %d samples for %d components; the fit may be poor", n, k)
    rng = np.random.default_rng(seed)
    means = _kmeans_pp(x, k, rng)
    variances = np.tile(np.maximum(x.var(axis=0), VARIANCE_FLOOR), (k, 1))
    weights = np.full(k, 1.0 / k)
    history = []
    converged = False
    for _ in range(max_iter):
        d = x[:, None, :] - means
        lp = -0.5 * np.sum(d * d / variances + np.log(variances) + L.LOG_2PI, axis=-1) + np.log(weights)
        ld = logsumexp(lp, axis=1)
        resp = np.exp(lp - ld[:, None])
        nk = resp.sum(axis=0)
        keep = nk > 0
        weights = nk / n
        means = np.where(keep[:, None], resp.T @ x / np.where(keep, nk, 1.0)[:, None], means)
        d = x[:, None, :] - means
        var = np.einsum("nk,nkd->kd", resp, d * d) / np.where(keep, nk, 1.0)[:, None]
        variances = np.maximum(np.where(keep[:, None], var, variances), VARIANCE_FLOOR)
        history.append(float(np.mean(ld)))
        if len(history) > 1 and history[-1] - history[-2] <= tol * max(1.0, abs(history[-1])):
            converged = True
            break
    weights = weights / weights.sum()
    # likelihood of the final parameters
    final = GaussianMixture(weights, means, variances)
    history.append(float(np.mean(final.log_density(x))))
    return GMMFit(final, history, converged)


# ---------------------------------------------------------------------------
# fitting problem


def visibility_weights(prior_q, model: DeformableModel, gain: float = VISIBILITY_GAIN) -> np.ndarray:
    """Per-landmark weights in [0, 1] from how much each surface normal faces the camera.

    The camera looks along +z, so a front-facing normal has negative z after
    rotation. The cosine is scaled by ``gain`` before clamping so that
    landmarks on the jaw line of a frontal face keep full weight.
    """
    n = rotate(canonical(prior_q), landmark_normals(model))
    return np.clip(-gain * n[:, 2], 0.0, 1.0)


@dataclass
class FitProblem:
    landmarks2d: np.ndarray  # (68, 2)
    landmark_confidence: np.ndarray  # (68,)
    prior_pose: Pose
    prior_pose_weight: float
    shape_prior: GaussianMixture
    model: DeformableModel
    landmark_weight: float = 1.0
    shape_prior_weight: float = 0.01
    norm_weight: float = 1.0
    visibility_gain: float = VISIBILITY_GAIN
    landmark_noise: float = LANDMARK_NOISE

    def __post_init__(self):
        self.landmarks2d = np.asarray(self.landmarks2d, dtype=float)
        self.landmark_confidence = np.asarray(self.landmark_confidence, dtype=float)
        if self.landmarks2d.shape != (NUM_LANDMARKS, 2) or self.landmark_confidence.shape != (NUM_LANDMARKS,):
            raise ValueError("need 68 2D landmarks and 68 confidences")
        if np.any(self.landmark_confidence < 0) or not np.all(np.isfinite(self.landmarks2d)):
            raise ValueError("confidences must be non-negative and landmarks finite")
        if not self.landmark_noise > 0:
            raise ValueError("landmark_noise must be positive")
        if np.sum(self.landmark_confidence > 0) < 6:
            raise ValueError("at least 6 landmarks need positive confidence")
        for name in ("prior_pose_weight", "landmark_weight", "shape_prior_weight", "norm_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.shape_prior.means.shape[1] != NUM_COEFFS:
            raise ValueError(f"shape prior must be over {NUM_COEFFS} coefficients")
        self.weights = (
            self.landmark_weight
            / self.landmark_noise**2
            * self.landmark_confidence
            * visibility_weights(self.prior_pose.q, self.model, self.visibility_gain)
        )

    def target_bbox_diagonal(self) -> float:
        pts = self.landmarks2d[self.landmark_confidence > 0]
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def _quat_features(q):
    """Features ``z`` with ``quat_from_features(z) == q`` and unit raw norm (needs w > 0)."""
    q = canonical(np.asarray(q, dtype=float) / np.linalg.norm(q))
    w = max(q[3], 1e-12)
    return np.array([q[0], q[1], q[2], np.log(w) if w < 1.0 else 0.0])


def _size_feature(s):
    return s - 1.0 if s >= 1.0 else np.log(s)


def pack(pose: Pose, coeffs) -> np.ndarray:
    return np.concatenate([_quat_features(pose.q), [pose.tx, pose.ty, _size_feature(pose.s)], coeffs])


def unpack(x):
    x = np.asarray(x, dtype=float)
    q = quat_from_features(x[:4])
    return Pose(q, float(x[4]), float(x[5]), float(smoothclip(x[6]))), x[7:].copy()


def _softplus(x):
    return np.logaddexp(0.0, x)


def fit_objective(x, problem: FitProblem, terms: bool = False):
    """Objective value and gradient on the packed parameter vector.

    Sum of confidence- and visibility-weighted squared 2D landmark errors,
    the rotation prior, the mixture NLL of the coefficients, the quaternion
    norm penalty and a softplus barrier keeping the size positive.
    """
    x = np.asarray(x, dtype=float)
    zq, zp, phi = x[None, :4], x[None, 4:7], x[None, 7:]
    xi = L.predict_landmarks(problem.model, zq, zp, phi)[0]
    r = xi[:, :2] - problem.landmarks2d
    w = problem.weights
    e_lmk = float(np.sum(w[:, None] * r * r))
    g_xi = np.zeros((1, NUM_LANDMARKS, 3))
    g_xi[0, :, :2] = 2.0 * w[:, None] * r
    gq, gp, gphi = L.predict_landmarks_vjp(problem.model, zq, zp, phi, g_xi)
    grad = np.concatenate([gq[0], gp[0], gphi[0]])

    prior_q = canonical(problem.prior_pose.q)
    v_rot, g_rot = L.rot_loss_grad(zq, prior_q[None])
    e_rot = problem.prior_pose_weight * float(v_rot[0])
    grad[:4] += problem.prior_pose_weight * g_rot[0]

    v_gmm, g_gmm = problem.shape_prior.nll_grad(phi[0])
    e_gmm = problem.shape_prior_weight * float(v_gmm)
    grad[7:] += problem.shape_prior_weight * g_gmm

    v_norm, g_norm = L.quat_norm_penalty_grad(zq)
    e_norm = problem.norm_weight * float(v_norm[0])
    grad[:4] += problem.norm_weight * g_norm[0]

    tau = BARRIER_TEMPERATURE
    s = float(smoothclip(x[6]))
    e_bar = tau * float(_softplus(-s / tau))
    grad[6] += -float(expit(-s / tau)) * float(np.where(x[6] >= 0, 1.0, s))

    value = e_lmk + e_rot + e_gmm + e_norm + e_bar
    if terms:
        return value, grad, {"landmarks": e_lmk, "rotation": e_rot, "shape": e_gmm, "norm": e_norm, "size": e_bar}
    return value, grad


@dataclass(frozen=True)
class FitConfig:
    max_iter: int = 2000
    grad_tol: float = 1e-6
    step_tol: float = 1e-10
    armijo: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 60


@dataclass
class FitResult:
    pose: Pose
    coeffs: np.ndarray
    final_objective: float
    converged: bool
    iterations: int
    grad_norm: float
    landmark_rmse: float
    history: list

    def to_json(self) -> dict:
        return {
            "quat": self.pose.q.tolist(),
            "tx": self.pose.tx,
            "ty": self.pose.ty,
            "s": self.pose.s,
            "coeffs": self.coeffs.tolist(),
            "final_objective": self.final_objective,
            "converged": self.converged,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "landmark_rmse": self.landmark_rmse,
        }


def landmark_jacobian(x, problem: FitProblem) -> np.ndarray:
    """Jacobian (136, 57) of the projected 2D landmarks with respect to the packed parameters."""
    n = NUM_LANDMARKS * 2
    cot = np.zeros((n, NUM_LANDMARKS, 3))
    rows = np.arange(n)
    cot[rows, rows // 2, rows % 2] = 1.0
    rep = np.repeat(np.asarray(x, dtype=float)[None], n, axis=0)
    gq, gp, gphi = L.predict_landmarks_vjp(problem.model, rep[:, :4], rep[:, 4:7], rep[:, 7:], cot)
    return np.concatenate([gq, gp, gphi], axis=1)


def curvature(x, problem: FitProblem) -> np.ndarray:
    """Positive-definite Gauss-Newton approximation of the objective Hessian at ``x``."""
    jac = landmark_jacobian(x, problem)
    w = np.repeat(problem.weights, 2)
    h = 2.0 * jac.T @ (w[:, None] * jac)
    h[:4, :4] += (0.5 * problem.prior_pose_weight + 2.0 * problem.norm_weight) * np.eye(4)
    mix = problem.shape_prior
    h[7:, 7:] += problem.shape_prior_weight * np.diag(mix.weights @ (1.0 / mix.variances))
    h += (1e-9 * np.trace(h) / len(h) + 1e-12) * np.eye(len(h))
    return h


def fit(problem: FitProblem, init_pose: Pose, init_coeffs, config: FitConfig = FitConfig()) -> FitResult:
    """Variable-metric gradient descent with Armijo backtracking.

    The search direction is the negative gradient mapped through the
    inverse of a positive-definite Gauss-Newton curvature estimate at the
    current iterate (the landmark term alone spans about eight orders of
    magnitude of curvature, which stalls unpreconditioned descent).
    Backtracking enforces sufficient decrease, so accepted iterates never
    increase the objective.
    """
    x = pack(init_pose, np.asarray(init_coeffs, dtype=float))
    f, g = fit_objective(x, problem)
    history = [f]
    converged = False
    it = 0
    while it < config.max_iter:
        if np.linalg.norm(g) < config.grad_tol:
            converged = True
            break
        d = -cho_solve(cho_factor(curvature(x, problem)), g)
        slope = float(g @ d)
        it += 1
        step = 1.0
        accepted = False
        for _ in range(config.max_backtracks):
            x_new = x + step * d
            f_new, g_new = fit_objective(x_new, problem)
            if np.isfinite(f_new) and f_new <= f + config.armijo * step * slope:
                accepted = True
                break
            step *= config.shrink
        moved = step * float(np.linalg.norm(d))
        if accepted:
            x, f, g = x_new, f_new, g_new
            history.append(f)
        if moved < config.step_tol:
            converged = True
            break
        if not accepted:
            break
    pose, coeffs = unpack(x)
    xi = L.predict_landmarks(problem.model, x[None, :4], x[None, 4:7], x[None, 7:])[0, :, :2]
    mask = problem.landmark_confidence > 0
    rmse = float(np.sqrt(np.mean(np.sum((xi[mask] - problem.landmarks2d[mask]) ** 2, axis=1))))
    return FitResult(pose, coeffs, f, converged, it, float(np.linalg.norm(g)), rmse, history)


def is_failed_fit(result: FitResult, problem: FitProblem, rel_tol: float = 0.05) -> bool:
    """Flag fits that did not converge or leave a landmark RMSE above 5% of the target box diagonal."""
    return (not result.converged) or result.landmark_rmse > rel_tol * problem.target_bbox_diagonal()
