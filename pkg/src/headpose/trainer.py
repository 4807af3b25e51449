"""Toy-scale training of a linear prediction head on synthetic data.

The head maps feature vectors to the raw head outputs consumed by the
losses; training uses the same analytic gradients as everything else, an
adaptive-moment optimizer and the warmup / step-decay / iterate-averaging
schedule.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses as L
from .facemodel import NUM_COEFFS, NUM_LANDMARKS, DeformableModel, synthetic_model
from .geometry import exp_map, quat_from_features, quat_mul

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# model


@dataclass
class LinearHead:
    weight: np.ndarray  # (D, HEAD_DIM)
    bias: np.ndarray  # (HEAD_DIM,)
    aux: L.AuxParams = field(default_factory=L.AuxParams)

    @classmethod
    def init(cls, input_dim: int, rng, scale: float = 0.01, cov_diag: float = 0.1) -> LinearHead:
        """Small random weights; covariance heads start at ``cov_diag**2 * I``.

        ``M = 0`` is a stationary point of ``M M^T``, so the diagonal
        covariance features must not start at zero.
        """
        bias = np.zeros(L.HEAD_DIM)
        for name in ("rot_cov", "pos_cov"):
            start = _slices()[name].start
            bias[start + np.array([0, 2, 5])] = cov_diag
        return cls(rng.normal(scale=scale, size=(input_dim, L.HEAD_DIM)), bias)

    @property
    def input_dim(self) -> int:
        return self.weight.shape[0]

    def forward(self, x) -> L.HeadOutput:
        return L.HeadOutput.from_matrix(np.asarray(x, dtype=float) @ self.weight + self.bias)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.weight.ravel(), self.bias, self.aux.to_vector()])

    def from_vector(self, v) -> LinearHead:
        d = self.weight.size
        return LinearHead(
            v[:d].reshape(self.weight.shape).copy(),
            v[d : d + L.HEAD_DIM].copy(),
            L.AuxParams.from_vector(v[d + L.HEAD_DIM :].copy()),
        )

    def to_json(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": L.HEAD_DIM,
            "weight": self.weight.ravel().tolist(),
            "bias": self.bias.tolist(),
            "aux": self.aux.to_vector().tolist(),
        }

    @classmethod
    def from_json(cls, obj) -> LinearHead:
        d, k = int(obj["input_dim"]), int(obj["output_dim"])
        if k != L.HEAD_DIM:
            raise ValueError(f"head output dim must be {L.HEAD_DIM}")
        return cls(
            np.array(obj["weight"], dtype=float).reshape(d, k),
            np.array(obj["bias"], dtype=float),
            L.AuxParams.from_vector(np.array(obj["aux"], dtype=float)),
        )


def loss_and_grad(head: LinearHead, x, labels: L.LabelBatch, weights: L.LossWeights, model):
    """Total loss and its gradient with respect to ``head.to_vector()``."""
    res = L.total_loss(head.forward(x), head.aux, labels, weights, model=model)
    g_out = res.grad_out.to_matrix()
    grad = np.concatenate([(x.T @ g_out).ravel(), g_out.sum(axis=0), res.grad_aux.to_vector()])
    return res, grad


# ---------------------------------------------------------------------------
# synthetic task


@dataclass
class SyntheticTask:
    features: np.ndarray  # (n, D); column 0 is uniform in [0, 1] and sets the jitter
    labels: L.LabelBatch
    rot_jitter: np.ndarray  # (n,) per-axis tangent sd of the rotation noise, radians
    pos_noise: float
    true_head: LinearHead

    def __len__(self):
        return len(self.features)

    def take(self, idx) -> SyntheticTask:
        return SyntheticTask(self.features[idx], self.labels.take(idx), self.rot_jitter[idx], self.pos_noise, self.true_head)


def make_synthetic_task(
    seed: int,
    n: int,
    input_dim: int = 8,
    noise: bool = True,
    jitter_base: float = 0.02,
    jitter_slope: float = 0.15,
    pos_noise: float = 0.01,
    model: DeformableModel | None = None,
) -> SyntheticTask:
    """Labels from a hidden linear head, optionally with calibrated noise.

    The rotation label is the clean rotation perturbed by a tangent-space
    normal with per-axis sd ``jitter_base + jitter_slope * x0``; positions
    get isotropic normal noise of sd ``pos_noise``. Landmarks are projected
    from the (noisy) label pose, so all labels stay mutually consistent.
    Without noise every label is exactly realizable by a linear head.
    """
    if n < 1:
        raise ValueError("n must be positive")
    model = model or synthetic_model(0)
    rng = np.random.default_rng(seed)
    x = np.column_stack([rng.uniform(0.0, 1.0, n), rng.normal(size=(n, input_dim - 1))])
    w = rng.normal(scale=0.3 / np.sqrt(input_dim), size=(input_dim, L.HEAD_DIM))
    b = np.zeros(L.HEAD_DIM)
    sl = _slices()
    b[sl["pos"]] = [0.0, 0.0, -0.7]  # head size around smoothclip(-0.7) = 0.5
    b[sl["bbox"]] = [0.0, 0.0, -0.3, -0.3]
    true = LinearHead(w, b)
    out = true.forward(x)

    q = quat_from_features(out.quat)
    pos = L.pos_size_from_features(out.pos)
    tau = jitter_base + jitter_slope * x[:, 0]
    if noise:
        q = quat_mul(q, exp_map(tau[:, None] * rng.normal(size=(n, 3))))
        pos = pos + np.column_stack([pos_noise * rng.normal(size=(n, 2)), np.zeros(n)])
    else:
        tau = np.zeros(n)
    q = np.where(q[:, 3:4] < 0, -q, q)
    # landmarks of the label pose: features reproducing (q, pos) exactly
    zq = np.concatenate([q[:, :3], np.log(np.maximum(q[:, 3:4], 1e-12))], axis=1)
    zp = np.column_stack([pos[:, :2], out.pos[:, 2]])
    lmk = L.predict_landmarks(model, zq, zp, out.shape)
    labels = L.LabelBatch(
        quat=q,
        pos=pos,
        shape=out.shape.copy(),
        landmarks=lmk,
        bbox=L.bbox_from_features(out.bbox),
        has_rot=np.ones(n, bool),
        has_pos=np.ones(n, bool),
        has_shape=np.ones(n, bool),
        has_bbox=np.ones(n, bool),
        landmark_dims=np.full(n, 3),
    )
    return SyntheticTask(x, labels, tau, pos_noise if noise else 0.0, true)


def _slices():
    out, start = {}, 0
    for name, size in L.HEAD_SIZES.items():
        out[name] = slice(start, start + size)
        start += size
    return out


# ---------------------------------------------------------------------------
# optimization


@dataclass(frozen=True)
class TrainConfig:
    total_samples: int = 200_000
    batch_size: int = 64
    peak_lr: float = 1e-3
    warmup_fraction: float = 1 / 20
    decay_at: float = 0.5
    decay_factor: float = 0.1
    average_from: float = 2 / 3
    seed: int = 0
    nll: bool = True
    optimizer: str = "adam"  # or "momentum"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.total_samples < 1 or self.batch_size < 1 or self.peak_lr <= 0:
            raise ValueError("sample count, batch size and step size must be positive")
        for name in ("warmup_fraction", "decay_at", "average_from"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.optimizer not in ("adam", "momentum"):
            raise ValueError("optimizer must be 'adam' or 'momentum'")

    def lr_at(self, seen: int) -> float:
        """Linear warmup, then constant, then decayed, by number of samples seen."""
        n = self.total_samples
        warm = self.warmup_fraction * n
        if seen < warm:
            return self.peak_lr * (seen + self.batch_size) / (warm + self.batch_size)
        if seen >= self.decay_at * n:
            return self.peak_lr * self.decay_factor
        return self.peak_lr

    def loss_weights(self, base: L.LossWeights | None = None) -> L.LossWeights:
        w = base or L.LossWeights()
        return w if self.nll else L.LossWeights(**{**asdict(w), "beta_total": 0.0})


@dataclass
class TrainResult:
    head: LinearHead  # iterate average
    last: LinearHead  # final iterate
    trace: list  # total loss per step
    terms: list  # weighted loss terms per step
    steps: int

    def trace_csv(self) -> str:
        buf = io.StringIO()
        names = sorted({k for t in self.terms for k in t})
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "total"] + names)
        for i, (v, t) in enumerate(zip(self.trace, self.terms)):
            writer.writerow([i, repr(v)] + [repr(t.get(k, 0.0)) for k in names])
        return buf.getvalue()


def train(
    head: LinearHead,
    task: SyntheticTask,
    config: TrainConfig = TrainConfig(),
    weights: L.LossWeights | None = None,
    model: DeformableModel | None = None,
) -> TrainResult:
    model = model or synthetic_model(0)
    lw = config.loss_weights(weights)
    rng = np.random.default_rng(config.seed)
    theta = head.to_vector()
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    avg = np.zeros_like(theta)
    n_avg = 0
    trace, terms = [], []
    steps = max(1, config.total_samples // config.batch_size)
    for step in range(steps):
        seen = step * config.batch_size
        idx = rng.integers(0, len(task), size=config.batch_size)
        batch = task.take(idx)
        res, grad = loss_and_grad(head.from_vector(theta), batch.features, batch.labels, lw, model)
        if not np.isfinite(res.value) or res.value > DIVERGENCE_LIMIT:
            raise TrainingDiverged(
                f"loss {res.value:.6g} at step {step} (lr {config.lr_at(seen):.3g}); terms: {res.terms}"
            )
        trace.append(res.value)
        terms.append(res.terms)
        lr = config.lr_at(seen)
        if config.optimizer == "adam":
            m1 = config.beta1 * m1 + (1 - config.beta1) * grad
            m2 = config.beta2 * m2 + (1 - config.beta2) * grad * grad
            mhat = m1 / (1 - config.beta1 ** (step + 1))
            vhat = m2 / (1 - config.beta2 ** (step + 1))
            theta = theta - lr * mhat / (np.sqrt(vhat) + config.adam_eps)
        else:
            m1 = config.momentum * m1 + grad
            theta = theta - lr * m1
        if seen >= config.average_from * config.total_samples:
            n_avg += 1
            avg += (theta - avg) / n_avg
    final = head.from_vector(theta)
    averaged = head.from_vector(avg) if n_avg else final
    return TrainResult(averaged, final, trace, terms, steps)


def evaluate_loss(head: LinearHead, task: SyntheticTask, weights: L.LossWeights, model=None) -> float:
    model = model or synthetic_model(0)
    return L.total_loss(head.forward(task.features), head.aux, task.labels, weights, model=model).value


def predicted_rot_cov_norm(head: LinearHead, features) -> np.ndarray:
    """Frobenius norm of the predicted rotation covariance per sample."""
    from .geometry import covariance_from_features

    out = head.forward(features)
    return np.linalg.norm(covariance_from_features(out.rot_cov), axis=(-2, -1))
