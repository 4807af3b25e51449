"""Constructed datasets whose metrics are known by construction."""

from dataclasses import dataclass

import numpy as np

from headpose.data import SampleRecord
from headpose.facemodel import Pose, bbox_from_mesh, landmarks68
from headpose.fitting import FitProblem, GaussianMixture
from headpose.geometry import axis_angle, canonical, from_euler, quat_mul


@dataclass
class Constructed:
    preds: list
    gts: list
    expected: dict


def unit_vectors(rng, n, dim=3):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def euler_construction(rng, n=500, max_delta=5.0) -> Constructed:
    """Predictions off by known yaw/pitch/roll deltas (away from gimbal lock)."""
    gt_angles = np.column_stack([rng.uniform(-80, 80, n), rng.uniform(-60, 60, n), rng.uniform(-80, 80, n)])
    delta = rng.uniform(-max_delta, max_delta, size=(n, 3))
    gq, pq = from_euler(*gt_angles.T), from_euler(*(gt_angles + delta).T)
    gts = [SampleRecord(f"e{i}", quat=q) for i, q in enumerate(gq)]
    preds = [SampleRecord(f"e{i}", quat=q) for i, q in enumerate(pq)]
    yaw, pitch, roll = np.abs(delta).mean(axis=0)
    return Constructed(preds, gts, {"yaw": yaw, "pitch": pitch, "roll": roll, "mae": (yaw + pitch + roll) / 3})


def geodesic_construction(rng, n=500, max_deg=40.0) -> Constructed:
    """Predictions rotated away from ground truth by a known angle about a random axis."""
    gq = from_euler(*rng.uniform(-90, 90, size=(3, n)))
    angles = rng.uniform(0, max_deg, n)
    axes = unit_vectors(rng, n)
    pq = np.array([quat_mul(q, axis_angle(a, np.deg2rad(t))) for q, a, t in zip(gq, axes, angles)])
    gts = [SampleRecord(f"g{i}", quat=q) for i, q in enumerate(gq)]
    preds = [SampleRecord(f"g{i}", quat=q) for i, q in enumerate(pq)]
    return Constructed(preds, gts, {"geodesic": float(np.mean(angles))})


def nme_construction(rng, n=300) -> Constructed:
    """2D landmarks displaced by known distances, boxes of known area."""
    gt = rng.uniform(-1, 1, size=(n, 68, 2))
    dist = rng.uniform(0, 0.05, size=(n, 68))
    pred = gt + dist[..., None] * unit_vectors(rng, n * 68, 2).reshape(n, 68, 2)
    wh = rng.uniform(0.2, 1.5, size=(n, 2))
    boxes = np.column_stack([rng.uniform(-0.1, 0.1, (n, 2)), wh])
    gts = [SampleRecord(f"n{i}", landmarks=g, bbox=b) for i, (g, b) in enumerate(zip(gt, boxes))]
    preds = [SampleRecord(f"n{i}", landmarks=p) for i, p in enumerate(pred)]
    nme = 100 * np.mean(dist.mean(axis=1) / np.sqrt(wh[:, 0] * wh[:, 1]))
    return Constructed(preds, gts, {"nme": nme, "pred": pred, "gt": gt, "bbox": boxes})


def filter_construction(rng, n=2000, offenders=30):
    """Ground truth with ``offenders`` samples planted beyond 99 degrees on one angle."""
    angles = np.column_stack([rng.uniform(-98, 98, n), rng.uniform(-85, 85, n), rng.uniform(-98, 98, n)])
    bad = rng.choice(n, offenders, replace=False)
    for j, i in enumerate(bad):
        axis = (0, 2)[j % 2]  # yaw or roll, pitch is bounded by 90 anyway
        angles[i, axis] = rng.choice([-1, 1]) * rng.uniform(100, 175)
    edge = np.setdiff1d(np.arange(n), bad)[:10]
    angles[edge, 0] = 98.999  # just inside the limit
    gts = [SampleRecord(f"f{i}", quat=q) for i, q in enumerate(from_euler(*angles.T))]
    return gts, {f"f{i}" for i in bad}


def synthetic_record(model, rng, i=0):
    q = from_euler(*rng.uniform(-40, 40, 3))
    phi = rng.normal(size=50)
    pose = Pose(q, *rng.uniform(-0.2, 0.2, 2), rng.uniform(0.3, 0.6))
    return SampleRecord(
        f"s{i}",
        quat=q,
        pos=[pose.tx, pose.ty],
        size=pose.s,
        shape=phi,
        landmarks=landmarks68(model, phi, pose),
        bbox=bbox_from_mesh(model, phi, pose),
        landmark_confidence=rng.uniform(0, 1, 68),
    )


def project(model, rec):
    return landmarks68(model, rec.shape, Pose(rec.quat, rec.pos[0], rec.pos[1], rec.size))


@dataclass
class FitCase:
    problem: object
    init_pose: object
    init_coeffs: np.ndarray
    true_q: np.ndarray


def fit_case(model, i, masked=False) -> FitCase:
    """Generate-project-refit problem: near-frontal head, init rotated 10 degrees off.

    Unmasked problems use the perturbed init as the pose prior; masked ones
    zero the confidence of half the landmarks and use the true pose as prior.
    """
    r = np.random.default_rng([1, i])
    q = from_euler(*r.uniform(-20, 20, 3))
    phi = r.normal(size=50)
    truth = Pose(q, r.uniform(-0.1, 0.1), r.uniform(-0.1, 0.1), r.uniform(0.4, 0.6))
    target = landmarks68(model, phi, truth)[:, :2]
    axis = unit_vectors(r, 1)[0]
    q0 = canonical(quat_mul(axis_angle(axis, np.deg2rad(10.0)), q))
    init = Pose(q0, truth.tx, truth.ty, truth.s)
    conf = np.ones(68)
    if masked:
        conf[r.permutation(68)[:34]] = 0.0
    prior = truth if masked else init
    problem = FitProblem(target, conf, prior, 1.0, GaussianMixture.standard(), model)
    return FitCase(problem, init, phi + 0.3 * r.normal(size=50), q)
