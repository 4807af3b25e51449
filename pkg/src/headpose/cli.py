"""Command-line entry point: ``headpose <command> ...``.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
Every command is a pure function of its inputs, flags and ``--seed``;
outputs are written atomically.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import augment as A
from . import data as D
from . import evaluation as E
from . import fitting as F
from . import gradcheck as G
from . import trainer as T
from .facemodel import (
    NUM_LANDMARKS,
    Pose,
    bbox_from_mesh,
    landmarks68,
    load_model,
    save_model,
    synthetic_model,
)
from .geometry import from_euler

log = logging.getLogger("headpose")


class UsageError(Exception):
    """Invalid input; maps to exit code 1."""


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _config(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}


def _report(args, body: dict) -> dict:
    return {"version": __version__, "command": args.command, "config": _config(args), **body}


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None


def _floats(text: str):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _sigma_name(sigma: float) -> str:
    return f"sigma_{sigma:g}"


def _load_images(directory):
    paths = sorted(Path(directory).glob("*.pgm"))
    if not paths:
        raise UsageError(f"no .pgm images in {directory}")
    return {p.stem: D.read_pgm(p) for p in paths}


# ---------------------------------------------------------------------------
# commands


def cmd_evaluate(args):
    preds = D.read_samples(args.pred)
    gts = D.read_samples(args.gt)
    report = E.evaluate(preds, gts, nme=args.nme, filter99=args.filter99, correlate=args.correlation)
    D.atomic_write(args.out, _dumps(_report(args, report.to_json())))
    if args.csv:
        D.atomic_write(args.csv, E.per_sample_csv(report))
    print(f"MAE {report.mae:.4f} deg, geodesic {report.geodesic:.4f} deg over {report.count} samples")


def cmd_noise(args):
    images = _load_images(args.images)
    for sigma in args.sigmas:
        for t, noisy in enumerate(E.noise_inject(images, sigma, args.trials, args.seed)):
            for sample_id, img in noisy.items():
                D.write_pgm(Path(args.out) / _sigma_name(sigma) / f"trial_{t}" / f"{sample_id}.pgm", img)
    D.atomic_write(Path(args.out) / "noise.json", _dumps(_report(args, {"images": sorted(images)})))


def cmd_sweep(args):
    gts = D.read_samples(args.gt)
    root = Path(args.pred_dir)
    sets = {}
    for sigma_dir in sorted(root.glob("sigma_*")):
        try:
            sigma = float(sigma_dir.name[len("sigma_") :])
        except ValueError:
            raise UsageError(f"cannot parse sigma from {sigma_dir.name!r}") from None
        trials = sorted(sigma_dir.glob("trial_*.jsonl"), key=lambda p: int(p.stem.split("_")[1]))
        sets[sigma] = [D.read_samples(p) for p in trials]
    if not sets:
        raise UsageError(f"no sigma_<s>/trial_<t>.jsonl prediction sets under {root}")
    points = E.noise_sweep(sets, gts)
    body = {"noise_sweep": [vars(p) for p in points]}
    D.atomic_write(args.out, _dumps(_report(args, body)))
    if args.csv:
        D.atomic_write(args.csv, E.sweep_csv(points))
    for p in points:
        print(f"sigma {p.sigma:g}: spread {p.spread:.4f} deg, error of mean {p.geo_error_of_mean:.4f} deg")


def cmd_augment(args):
    records = D.read_samples(args.samples)
    if not records:
        raise UsageError(f"{args.samples}: no samples")
    cfg = A.AugmentConfig(**_read_json(args.config)) if args.config else A.AugmentConfig()
    out = Path(args.out)
    labels = []
    cache = {}
    for i in range(args.n):
        rec = records[i % len(records)]
        if rec.id not in cache:
            path = Path(args.images) / f"{rec.id}.pgm"
            if not path.exists():
                raise UsageError(f"missing image {path}")
            cache[rec.id] = D.read_pgm(path)
        crop, lab, _ = A.augment_sample(cache[rec.id], rec, A.sample_rng(args.seed, i), cfg)
        name = f"{i:06d}"
        D.write_pgm(out / f"{name}.pgm", crop)
        labels.append(lab.replace(id=name))
    D.write_samples(out / "labels.jsonl", labels)
    print(f"wrote {args.n} crops to {out}")


def _prior_pose(rec: D.SampleRecord) -> Pose:
    if rec.quat is None or rec.pos is None:
        raise UsageError(f"prior for {rec.id!r} needs quat, pos and size")
    return Pose(rec.quat, float(rec.pos[0]), float(rec.pos[1]), rec.size)


def cmd_fit(args):
    model = load_model(args.model)
    targets = D.read_samples(args.landmarks)
    priors = {r.id: r for r in D.read_samples(args.prior)}
    mixture = F.GaussianMixture.from_json(_read_json(args.gmm)) if args.gmm else F.GaussianMixture.standard()
    init_coeffs = mixture.means[int(np.argmax(mixture.weights))]
    lines, failed = [], 0
    for rec in targets:
        if rec.landmarks is None:
            raise UsageError(f"sample {rec.id!r} has no landmarks")
        if rec.id not in priors:
            raise UsageError(f"no prior for sample {rec.id!r}")
        prior = _prior_pose(priors[rec.id])
        conf = rec.landmark_confidence if rec.landmark_confidence is not None else np.ones(NUM_LANDMARKS)
        problem = F.FitProblem(
            rec.landmarks[:, :2], conf, prior, args.prior_weight, mixture, model,
            shape_prior_weight=args.shape_weight,
        )
        result = F.fit(problem, prior, init_coeffs, F.FitConfig(max_iter=args.max_iter))
        bad = F.is_failed_fit(result, problem)
        failed += bad
        lines.append(json.dumps({"id": rec.id, **result.to_json(), "failed": bad}, sort_keys=True, allow_nan=False))
    D.atomic_write(args.out, "".join(line + "\n" for line in lines))
    print(f"fitted {len(lines)} samples, {failed} flagged as failed")


def cmd_fit_gmm(args):
    records = D.read_samples(args.samples)
    shapes = np.array([r.shape for r in records if r.shape is not None])
    if len(shapes) == 0:
        raise UsageError(f"{args.samples}: no shape coefficients")
    res = F.gmm_fit(shapes, args.k, args.seed)
    D.atomic_write(args.out, _dumps(res.mixture.to_json()))
    print(f"mixture with {args.k} components, final mean log-likelihood {res.log_likelihood[-1]:.6f}")


def cmd_mix(args):
    obj = _read_json(args.mix)
    mix = D.DatasetMix.from_json(obj, base_dir=Path(args.mix).parent)
    seed = args.seed if args.seed is not None else obj.get("seed")
    if seed is None:
        raise UsageError("mix needs a seed (in the JSON or via --seed)")
    ds, idx = D.MixSampler(mix, int(seed)).draw(args.n)
    text = "dataset,index\n" + "".join(f"{d},{i}\n" for d, i in zip(ds.tolist(), idx.tolist()))
    D.atomic_write(args.out, text)
    counts = np.bincount(ds, minlength=len(mix.names))
    for name, c, p in zip(mix.names, counts, mix.probs):
        print(f"{name}: {c} draws ({c / args.n:.4f}, target {p:.4f})")


def cmd_train_demo(args):
    overrides = _read_json(args.config) if args.config else {}
    task_keys = {"samples", "input_dim", "noise"}
    cfg = T.TrainConfig(**{"seed": args.seed, **{k: v for k, v in overrides.items() if k not in task_keys}})
    task = T.make_synthetic_task(
        args.seed, int(overrides.get("samples", 4096)), int(overrides.get("input_dim", 8)),
        noise=bool(overrides.get("noise", True)),
    )
    head = T.LinearHead.init(task.features.shape[1], np.random.default_rng(args.seed))
    res = T.train(head, task, cfg)
    out = Path(args.out)
    D.atomic_write(out / "head.json", _dumps(res.head.to_json()))
    D.atomic_write(out / "trace.csv", res.trace_csv())
    body = {"steps": res.steps, "initial_loss": res.trace[0], "final_loss": res.trace[-1]}
    D.atomic_write(out / "report.json", _dumps(_report(args, body)))
    print(f"{res.steps} steps, loss {res.trace[0]:.4f} -> {res.trace[-1]:.4f}")


def cmd_gradcheck(args):
    names = list(G.CASES) if args.losses == "all" else [n.strip() for n in args.losses.split(",")]
    unknown = [n for n in names if n not in G.CASES]
    if unknown:
        raise UsageError(f"unknown losses: {', '.join(unknown)} (choose from {', '.join(G.CASES)})")
    results = [G.check_case(n, args.points, args.seed) for n in names]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: max relative error {r.max_rel_error:.3e} over {r.points} points")
    worst = max(r.max_rel_error for r in results)
    print(f"max relative error {worst:.3e}")
    if args.out:
        body = {"results": [vars(r) for r in results], "max_rel_error": worst}
        D.atomic_write(args.out, _dumps(_report(args, body)))
    return 0 if all(r.passed for r in results) else 2


def cmd_make_model(args):
    model = synthetic_model(args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(args.out).with_name(f".{Path(args.out).name}.tmp")
    save_model(model, tmp)
    tmp.replace(args.out)
    print(f"model with {model.num_vertices} vertices written to {args.out}")


def _render(lm, bbox, size):
    """Simple grey image: smooth background with landmark dots, for demos."""
    yy, xx = np.mgrid[0:size, 0:size]
    img = 60.0 + 80.0 * xx / size + 40.0 * yy / size
    to_px = A.normalization(size, size).inverse()
    c = to_px(bbox[:2])
    r = bbox[2:] * size / 4.0
    img += 50.0 * (((xx - c[0]) / r[0]) ** 2 + ((yy - c[1]) / r[1]) ** 2 < 1.0)
    for u, v in to_px(lm[:, :2]):
        iu, iv = int(round(u)), int(round(v))
        if 0 <= iu < size and 0 <= iv < size:
            img[max(iv - 1, 0) : iv + 2, max(iu - 1, 0) : iu + 2] = 250.0
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def cmd_synth(args):
    """Synthetic ground truth (and optionally images) from the stand-in face model."""
    model = load_model(args.model) if args.model else synthetic_model(0)
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    records = []
    for i in range(args.n):
        yaw, pitch, roll = rng.uniform(-args.max_angle, args.max_angle, 3)
        q = from_euler(yaw, pitch, roll)
        phi = rng.normal(size=model.basis.shape[0])
        pose = Pose(q, float(rng.uniform(-0.1, 0.1)), float(rng.uniform(-0.1, 0.1)), float(rng.uniform(0.4, 0.6)))
        lm = landmarks68(model, phi, pose)
        bbox = bbox_from_mesh(model, phi, pose)
        rec = D.SampleRecord(
            f"s{i:05d}", quat=q, pos=[pose.tx, pose.ty], size=pose.s, shape=phi, landmarks=lm, bbox=bbox
        )
        records.append(rec)
        if args.images:
            D.write_pgm(out / "images" / f"{rec.id}.pgm", _render(lm, bbox, args.image_size))
    D.write_samples(out / "gt.jsonl", records)
    print(f"wrote {args.n} samples to {out}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> ArgumentParser:
    p = ArgumentParser(prog="headpose", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"headpose {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    s = sub.add_parser("evaluate", help="Euler / geodesic / NME metrics of predictions against ground truth")
    s.add_argument("pred", type=Path, help="predictions (JSON lines)")
    s.add_argument("gt", type=Path, help="ground truth (JSON lines)")
    s.add_argument("--nme", action="store_true", help="also compute the 2D landmark NME")
    s.add_argument("--filter99", action="store_true", help="drop ground truth with any angle beyond 99 degrees")
    s.add_argument("--correlation", action="store_true", help="correlate predicted rotation covariance with error")
    s.add_argument("--out", type=Path, required=True, help="report JSON")
    s.add_argument("--csv", type=Path, help="per-sample CSV")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("noise", help="write noisy copies of PGM images for a noise sweep")
    s.add_argument("images", type=Path, help="directory of .pgm images")
    s.add_argument("--sigmas", type=_floats, default=list(E.DEFAULT_SIGMAS), help="comma-separated sigmas")
    s.add_argument("--trials", type=int, default=E.DEFAULT_TRIALS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True, help="output directory")
    s.set_defaults(func=cmd_noise)

    s = sub.add_parser("sweep", help="noise-resistance statistics from per-sigma, per-trial predictions")
    s.add_argument("pred_dir", type=Path, help="directory with sigma_<s>/trial_<t>.jsonl")
    s.add_argument("gt", type=Path)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--csv", type=Path)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("augment", help="random crops with transformed labels")
    s.add_argument("samples", type=Path, help="samples (JSON lines, with bbox)")
    s.add_argument("images", type=Path, help="directory with <id>.pgm")
    s.add_argument("--n", type=int, required=True, help="number of crops")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", type=Path, help="JSON overrides of the augmentation settings")
    s.add_argument("--out", type=Path, required=True, help="output directory")
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("fit", help="fit pose and shape to 2D landmarks")
    s.add_argument("landmarks", type=Path, help="samples with landmarks (JSON lines)")
    s.add_argument("prior", type=Path, help="prior poses by id (JSON lines)")
    s.add_argument("model", type=Path, help="face model container")
    s.add_argument("--gmm", type=Path, help="shape mixture JSON (default: standard normal)")
    s.add_argument("--prior-weight", type=float, default=1.0)
    s.add_argument("--shape-weight", type=float, default=0.01)
    s.add_argument("--max-iter", type=int, default=2000)
    s.add_argument("--out", type=Path, required=True, help="results (JSON lines)")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("fit-gmm", help="fit the shape mixture prior to shape coefficients")
    s.add_argument("samples", type=Path)
    s.add_argument("--k", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_fit_gmm)

    s = sub.add_parser("mix", help="draw (dataset, index) pairs from a dataset mix")
    s.add_argument("mix", type=Path, help="mix JSON {datasets, probs, seed}")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, help="overrides the seed in the mix file")
    s.add_argument("--out", type=Path, required=True, help="CSV stream")
    s.set_defaults(func=cmd_mix)

    s = sub.add_parser("train-demo", help="train a linear head on a synthetic task")
    s.add_argument("--config", type=Path, help="JSON overrides (training settings, samples, input_dim, noise)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True, help="output directory")
    s.set_defaults(func=cmd_train_demo)

    s = sub.add_parser("gradcheck", help="finite-difference audit of the loss gradients")
    s.add_argument("--losses", default="all", help="'all' or comma-separated names")
    s.add_argument("--points", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, help="report JSON")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("make-model", help="write the synthetic face model container")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_make_model)

    s = sub.add_parser("synth", help="synthetic ground truth from the face model")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--model", type=Path, help="face model container (default: built-in synthetic)")
    s.add_argument("--max-angle", type=float, default=30.0, help="Euler angle range in degrees")
    s.add_argument("--images", action="store_true", help="also render simple PGM images")
    s.add_argument("--image-size", type=int, default=160)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return int(args.func(args) or 0)
    except (UsageError, D.SampleFormatError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"headpose {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"headpose {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
