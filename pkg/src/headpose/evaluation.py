"""Evaluation protocol: angle filter, Euler and geodesic errors, 2D landmark
NME, noise-resistance sweeps and uncertainty/error correlation.

All reductions run in input order so reports are byte-stable.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import kernels
from .geometry import covariance_from_features, mean_quaternion, to_euler

log = logging.getLogger(__name__)

ANGLE_LIMIT_DEG = 99.0
DEFAULT_SIGMAS = (0.0, 2.0, 4.0, 8.0, 16.0, 32.0)
DEFAULT_TRIALS = 16


def _quats(records, what="records"):
    missing = [r.id for r in records if r.quat is None]
    if missing:
        raise ValueError(f"{what} without a quaternion: {', '.join(missing[:10])}")
    return np.array([r.quat for r in records]).reshape(-1, 4)


def filter_protocol(records, limit: float = ANGLE_LIMIT_DEG):
    """Drop records whose ground-truth yaw, pitch or roll exceeds ``limit`` degrees in magnitude."""
    if not records:
        return []
    angles = to_euler(_quats(records, "ground-truth records"))
    keep = np.all(np.abs(angles) <= limit, axis=1)
    return [r for r, k in zip(records, keep) if k]


def align(preds, gts):
    """Pair predictions with ground truth by id, in ground-truth order."""
    by_id = {}
    for r in preds:
        if r.id in by_id:
            raise ValueError(f"duplicate prediction id {r.id!r}")
        by_id[r.id] = r
    gt_ids = [r.id for r in gts]
    if len(set(gt_ids)) != len(gt_ids):
        raise ValueError("duplicate ground-truth ids")
    missing = [i for i in gt_ids if i not in by_id]
    extra = sorted(set(by_id) - set(gt_ids))
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing predictions for ids: {', '.join(missing[:20])}")
        if extra:
            parts.append(f"predictions without ground truth: {', '.join(extra[:20])}")
        raise ValueError("; ".join(parts))
    return [by_id[i] for i in gt_ids], list(gts)


def wrap_degrees(d):
    """Shortest signed angular difference in [-180, 180)."""
    return (np.asarray(d, dtype=float) + 180.0) % 360.0 - 180.0


def euler_errors(pred_q, gt_q) -> np.ndarray:
    """Per-sample absolute yaw, pitch, roll differences (degrees), shape (N, 3)."""
    return np.abs(wrap_degrees(to_euler(pred_q) - to_euler(gt_q)))


def euler_metrics(preds, gts) -> dict:
    preds, gts = align(preds, gts)
    if not gts:
        raise ValueError("no samples to evaluate")
    err = euler_errors(_quats(preds, "predictions"), _quats(gts))
    yaw, pitch, roll = (float(v) for v in err.mean(axis=0))
    return {"yaw": yaw, "pitch": pitch, "roll": roll, "mae": (yaw + pitch + roll) / 3.0}


def geodesic_errors(pred_q, gt_q) -> np.ndarray:
    return np.rad2deg(kernels.geodesic_angles(pred_q, gt_q))


def geodesic_metric(preds, gts) -> float:
    """Mean rotation angle between prediction and ground truth, degrees."""
    preds, gts = align(preds, gts)
    if not gts:
        raise ValueError("no samples to evaluate")
    return float(np.mean(geodesic_errors(_quats(preds, "predictions"), _quats(gts))))


def nme2d(pred_lms, gt_lms, gt_bbox):
    """Mean 2D landmark distance over ``sqrt(w h)`` of the ground-truth box, in percent.

    Returns ``(nme, skipped)`` where samples with a degenerate box are skipped.
    """
    pred = np.asarray(pred_lms, dtype=float)[..., :2]
    gt = np.asarray(gt_lms, dtype=float)[..., :2]
    box = np.asarray(gt_bbox, dtype=float).reshape(-1, 4)
    area = box[:, 2] * box[:, 3]
    ok = np.isfinite(area) & (area > 0)
    skipped = int(np.sum(~ok))
    if skipped:
        log.warning("skipped %d samples with degenerate boxes", skipped)
    if not np.any(ok):
        raise ValueError("no sample with a valid box")
    dist = np.linalg.norm(pred[ok] - gt[ok], axis=-1).mean(axis=-1)
    return float(np.mean(dist / np.sqrt(area[ok])) * 100.0), skipped


def nme2d_records(preds, gts):
    preds, gts = align(preds, gts)
    bad = [g.id for p, g in zip(preds, gts) if p.landmarks is None or g.landmarks is None or g.bbox is None]
    if bad:
        raise ValueError(f"landmarks or boxes missing for ids: {', '.join(bad[:10])}")
    return nme2d([p.landmarks for p in preds], [g.landmarks for g in gts], [g.bbox for g in gts])


# ---------------------------------------------------------------------------
# noise resistance


@dataclass
class NoiseSweepPoint:
    sigma: float
    spread: float  # RMS geodesic distance of trials from their mean, degrees
    geo_error_of_mean: float  # geodesic distance of the mean from ground truth, degrees


def noise_sweep(trial_sets, gts):
    """Spread and error of the trial-averaged prediction per noise level.

    ``trial_sets`` maps sigma -> list of prediction sets (one per trial).
    Per sample the trial quaternions are averaged; the spread is the RMS
    geodesic distance of the trials from that mean, the error is the
    geodesic distance of the mean from ground truth. Both are averaged over
    samples.
    """
    gt_q = _quats(gts)
    out = []
    for sigma in sorted(trial_sets):
        trials = trial_sets[sigma]
        if len(trials) < 2:
            raise ValueError(f"sigma {sigma}: need at least 2 trials, got {len(trials)}")
        aligned = []
        for t, preds in enumerate(trials):
            try:
                aligned.append(_quats(align(preds, gts)[0], "predictions"))
            except ValueError as exc:
                raise ValueError(f"sigma {sigma}, trial {t}: {exc}") from None
        qs = np.stack(aligned, axis=1)  # (N, T, 4)
        means = np.array([mean_quaternion(q) for q in qs])
        n, t, _ = qs.shape
        dev = geodesic_errors(qs.reshape(-1, 4), np.repeat(means, t, axis=0)).reshape(n, t)
        spread = np.sqrt(np.mean(dev**2, axis=1))
        err = geodesic_errors(means, gt_q)
        out.append(NoiseSweepPoint(float(sigma), float(np.mean(spread)), float(np.mean(err))))
    return out


def _id_key(sample_id: str) -> int:
    return int.from_bytes(hashlib.sha256(sample_id.encode("utf-8")).digest()[:8], "little")


def noise_inject(images, sigma: float, trials: int, seed: int):
    """Noisy copies of ``images`` (id -> uint8 array), one dict per trial.

    Each (seed, trial, id) triple owns its generator, so results do not
    depend on iteration order or on which other images are present.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    out = []
    for t in range(trials):
        noisy = {}
        for sample_id, img in images.items():
            img = np.asarray(img, dtype=np.uint8)
            if sigma == 0:
                noisy[sample_id] = img.copy()
                continue
            rng = np.random.default_rng([int(seed), t, _id_key(sample_id)])
            val = np.floor(img + rng.normal(0.0, sigma, size=img.shape) + 0.5)
            noisy[sample_id] = np.clip(val, 0, 255).astype(np.uint8)
        out.append(noisy)
    return out


# ---------------------------------------------------------------------------
# uncertainty


@dataclass
class Correlation:
    pearson: float
    spearman: float
    points: list  # (Frobenius norm of the covariance, geodesic error in degrees)
    degenerate: bool = False  # a coordinate had zero variance; coefficients reported as 0


def uncertainty_correlation(preds, gts) -> Correlation:
    preds, gts = align(preds, gts)
    if len(gts) < 3:
        raise ValueError("need at least 3 samples for a correlation")
    missing = [p.id for p in preds if p.rot_cov is None]
    if missing:
        raise ValueError(f"predictions without rotation covariance: {', '.join(missing[:10])}")
    cov = covariance_from_features(np.array([p.rot_cov for p in preds]))
    x = np.linalg.norm(cov, axis=(-2, -1))
    y = geodesic_errors(_quats(preds, "predictions"), _quats(gts))
    return correlation(x, y)


def correlation(x, y) -> Correlation:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    points = [[float(a), float(b)] for a, b in zip(x, y)]
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return Correlation(0.0, 0.0, points, degenerate=True)
    return Correlation(float(stats.pearsonr(x, y)[0]), float(stats.spearmanr(x, y)[0]), points)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    yaw: float
    pitch: float
    roll: float
    mae: float
    geodesic: float
    count: int
    filtered: int = 0
    nme2d: float | None = None
    nme_skipped: int | None = None
    noise_sweep: list | None = None
    correlation: dict | None = None
    per_sample: list = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        out = asdict(self)
        out.pop("per_sample")
        return {k: v for k, v in out.items() if v is not None}


def evaluate(preds, gts, nme: bool = False, filter99: bool = False, correlate: bool = False) -> MetricsReport:
    """Full report over aligned prediction / ground-truth records."""
    n_in = len(gts)
    if filter99:
        gts = filter_protocol(gts)
        keep = {g.id for g in gts}
        preds = [p for p in preds if p.id in keep]
    preds, gts = align(preds, gts)
    if not gts:
        raise ValueError("no samples to evaluate")
    pq, gq = _quats(preds, "predictions"), _quats(gts)
    eul = euler_errors(pq, gq)
    geo = geodesic_errors(pq, gq)
    yaw, pitch, roll = (float(v) for v in eul.mean(axis=0))
    report = MetricsReport(
        yaw=yaw, pitch=pitch, roll=roll, mae=(yaw + pitch + roll) / 3.0,
        geodesic=float(np.mean(geo)), count=len(gts), filtered=n_in - len(gts),
    )
    report.per_sample = [
        {"id": g.id, "yaw": float(e[0]), "pitch": float(e[1]), "roll": float(e[2]), "geodesic": float(d)}
        for g, e, d in zip(gts, eul, geo)
    ]
    if nme:
        report.nme2d, report.nme_skipped = nme2d_records(preds, gts)
    if correlate:
        corr = uncertainty_correlation(preds, gts)
        report.correlation = asdict(corr)
    return report


def per_sample_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["id", "yaw", "pitch", "roll", "geodesic"], lineterminator="\n")
    writer.writeheader()
    for row in report.per_sample:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def sweep_csv(points) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sigma", "spread", "geo_error_of_mean"])
    for p in points:
        writer.writerow([repr(p.sigma), repr(p.spread), repr(p.geo_error_of_mean)])
    return buf.getvalue()
