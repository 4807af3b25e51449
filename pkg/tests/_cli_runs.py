"""A small end-to-end workspace exercising every CLI command, plus rerun helpers."""

import json
import shutil
from pathlib import Path

import numpy as np

from headpose import data as D
from headpose.cli import main
from headpose.geometry import axis_angle, quat_mul


def _perturbed(records, rng, deg, with_cov=False):
    out = []
    for r in records:
        axis = rng.normal(size=3)
        q = quat_mul(r.quat, axis_angle(axis / np.linalg.norm(axis), np.deg2rad(deg * rng.normal())))
        changes = {"quat": q, "landmarks": r.landmarks + rng.normal(scale=0.005, size=r.landmarks.shape)}
        if with_cov:
            changes["rot_cov"] = np.abs(rng.normal(scale=0.05, size=6))
        out.append(r.replace(**changes))
    return out


def build_workspace(root: Path) -> dict:
    """Create inputs under ``root`` and return ``{command: (argv, outputs)}`` for every command.

    Outputs are paths (files or directories) relative to which a rerun is compared.
    """
    root = Path(root)
    assert main(["make-model", "--seed", "0", "--out", str(root / "model.dfm")]) == 0
    assert main(["synth", "--n", "12", "--seed", "3", "--images", "--image-size", "96",
                 "--model", str(root / "model.dfm"), "--out", str(root / "synth")]) == 0
    gt_path = root / "synth" / "gt.jsonl"
    gts = D.read_samples(gt_path)
    rng = np.random.default_rng(11)
    D.write_samples(root / "preds.jsonl", _perturbed(gts, rng, 3.0, with_cov=True))
    for s_i, sigma in enumerate((0.0, 4.0, 16.0)):
        for t in range(3):
            D.write_samples(root / "sweep" / f"sigma_{sigma:g}" / f"trial_{t}.jsonl", _perturbed(gts, rng, 0.3 * sigma))
    (root / "mix.json").write_text(json.dumps(
        {"datasets": [{"name": "a", "size": 5}, {"name": "b", "size": 3}, "synth/gt.jsonl"],
         "probs": [0.5, 0.25, 0.25], "seed": 4}))
    (root / "train.json").write_text(json.dumps({"total_samples": 1280, "batch_size": 32, "samples": 256}))

    r = str(root)
    return {
        "make-model": (["make-model", "--seed", "1", "--out", f"{r}/out/model.dfm"], ["out/model.dfm"]),
        "synth": (["synth", "--n", "4", "--seed", "5", "--images", "--image-size", "64", "--out", f"{r}/out/synth"],
                  ["out/synth"]),
        "evaluate": (["evaluate", f"{r}/preds.jsonl", str(gt_path), "--nme", "--filter99", "--correlation",
                      "--out", f"{r}/out/eval.json", "--csv", f"{r}/out/eval.csv"], ["out/eval.json", "out/eval.csv"]),
        "noise": (["noise", f"{r}/synth/images", "--sigmas", "0,4,16", "--trials", "2", "--seed", "1",
                   "--out", f"{r}/out/noise"], ["out/noise"]),
        "sweep": (["sweep", f"{r}/sweep", str(gt_path), "--out", f"{r}/out/sweep.json", "--csv", f"{r}/out/sweep.csv"],
                  ["out/sweep.json", "out/sweep.csv"]),
        "augment": (["augment", str(gt_path), f"{r}/synth/images", "--n", "6", "--seed", "2", "--out", f"{r}/out/aug"],
                    ["out/aug"]),
        "fit": (["fit", str(gt_path), str(gt_path), f"{r}/model.dfm", "--out", f"{r}/out/fit.jsonl"],
                ["out/fit.jsonl"]),
        "fit-gmm": (["fit-gmm", str(gt_path), "--k", "2", "--seed", "0", "--out", f"{r}/out/gmm.json"],
                    ["out/gmm.json"]),
        "mix": (["mix", f"{r}/mix.json", "--n", "500", "--out", f"{r}/out/mix.csv"], ["out/mix.csv"]),
        "train-demo": (["train-demo", "--config", f"{r}/train.json", "--seed", "0", "--out", f"{r}/out/train"],
                       ["out/train"]),
        "gradcheck": (["gradcheck", "--losses", "rot_loss,bbox_nll", "--points", "3", "--out", f"{r}/out/gc.json"],
                      ["out/gc.json"]),
    }


def snapshot(root: Path, outputs) -> dict:
    """Bytes of every output file, keyed by path relative to ``root``."""
    root = Path(root)
    files = {}
    for rel in outputs:
        p = root / rel
        paths = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in paths:
            files[str(q.relative_to(root))] = q.read_bytes()
    return files


def remove(root: Path, outputs) -> None:
    for rel in outputs:
        p = Path(root) / rel
        if p.is_dir():
            shutil.rmtree(p)
        elif p.exists():
            p.unlink()


def run_twice(root: Path, argv, outputs):
    """Run a command, clear its outputs, run it again; return both snapshots and exit codes."""
    codes = [main(list(argv))]
    first = snapshot(root, outputs)
    remove(root, outputs)
    codes.append(main(list(argv)))
    return codes, first, snapshot(root, outputs)
