"""Training-convergence experiment on the asymmetric-blobs phantom.

For each seed: render a fresh training set and a disjoint held-out set at
nside=2, train one GS-loss and one softmax-loss model on the same data, and
report tolerance accuracies.  A nested-shells model (first seed only)
provides the symmetry-ambiguity comparison of distribution spreads.

    python3 scripts/convergence.py --out runs/convergence [--seeds 0 1 2]

Writes ``results.json`` in the output directory and prints a summary.
"""
from __future__ import annotations

import argparse
import json
import logging
import tempfile
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from dvrview.datagen import GenerationConfig, SourceSpec, generate_dataset
from dvrview.evaluation import estimate_many, tolerance_accuracy
from dvrview.model import NetworkSpec, TrainConfig, predict, train_on_manifest
from dvrview.viewsphere import SpherePixelization

NSIDE = 2
TRAIN_IMAGES = 19200  # 400 per label
TEST_IMAGES = 960
SHELL_TRAIN_IMAGES = 2400
SHELL_TEST_IMAGES = 480
TEST_SEED_OFFSET = 1000

BLOBS = SourceSpec("blobs_context", phantom="asymmetric-blobs")
SHELLS = SourceSpec("shells", phantom="nested-shells")


def train_config(seed: int, loss: str, epochs: int = 14) -> TrainConfig:
    return TrainConfig(lr=0.01, epochs=epochs, loss=loss, dtype="float32", rot90=True, seed=seed)


def _dataset(src, n, split, seed, root):
    cfg = GenerationConfig(sources=(src,), nside=NSIDE, images_per_tf=n, split=split, seed=seed)
    return generate_dataset(cfg, Path(root) / f"{src.phantom}_{split}_{seed}")


def _evaluate(params, test, p):
    probs, _ = predict(params, test.load_images())
    labels, sigmas = estimate_many(probs, p)
    rep = tolerance_accuracy(labels, test.directions, p)
    return {"accuracy": rep.as_dict(), "median_sigma": float(np.median(sigmas))}


def run_seed(seed: int, root, p, epochs: int = 14) -> dict:
    t = time.time()
    train = _dataset(BLOBS, TRAIN_IMAGES, "train", seed, root)
    test = _dataset(BLOBS, TEST_IMAGES, "test", seed + TEST_SEED_OFFSET, root)
    out = {"seed": seed, "n_train": len(train), "n_test": len(test), "generate_s": time.time() - t}
    spec = NetworkSpec(n_outputs=p.n_pixels)
    for loss in ("gs", "softmax"):
        t = time.time()
        params, history = train_on_manifest(train, train_config(seed, loss, epochs), spec)
        out[loss] = _evaluate(params, test, p)
        out[loss]["train_s"] = time.time() - t
        out[loss]["final_train_accuracy"] = history[-1]["train_accuracy"]
    return out


def run_shells(seed: int, root, p, epochs: int = 14) -> dict:
    t = time.time()
    train = _dataset(SHELLS, SHELL_TRAIN_IMAGES, "train", seed, root)
    test = _dataset(SHELLS, SHELL_TEST_IMAGES, "test", seed + TEST_SEED_OFFSET, root)
    params, _ = train_on_manifest(train, train_config(seed, "gs", epochs), NetworkSpec(n_outputs=p.n_pixels))
    out = _evaluate(params, test, p)
    out["seconds"] = time.time() - t
    return out


def run(seeds=(0, 1, 2), work_dir=None, epochs: int = 14) -> dict:
    p = SpherePixelization(NSIDE)
    start = time.time()
    with tempfile.TemporaryDirectory(dir=work_dir) as root:
        runs = [run_seed(s, root, p, epochs) for s in seeds]
        shells = run_shells(seeds[0], root, p, epochs)
    blob_sigma = runs[0]["gs"]["median_sigma"]
    return {
        "network": asdict(NetworkSpec(n_outputs=p.n_pixels)),
        "train": asdict(train_config(seeds[0], "gs", epochs)),
        "runs": runs,
        "shells": shells,
        "sigma_ratio": shells["median_sigma"] / blob_sigma if blob_sigma > 0 else float("inf"),
        "seconds": time.time() - start,
    }


def summarize(res: dict) -> str:
    lines = []
    for r in res["runs"]:
        g, s = r["gs"]["accuracy"], r["softmax"]["accuracy"]
        lines.append(f"seed {r['seed']}: GS acc-15 {g['acc_15']:.4f} acc-2 {g['acc_2']:.4f} | "
                     f"softmax acc-15 {s['acc_15']:.4f} acc-2 {s['acc_2']:.4f}")
    lines.append(f"median sigma: shells {res['shells']['median_sigma']:.2f} deg, "
                 f"blobs {res['runs'][0]['gs']['median_sigma']:.2f} deg, ratio {res['sigma_ratio']:.2f}")
    lines.append(f"total {res['seconds']:.0f} s")
    return "\n".join(lines)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=14)
    ap.add_argument("--work-dir", default=None, help="where temporary datasets are rendered")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = run(tuple(args.seeds), args.work_dir, args.epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.json").write_text(json.dumps(res, indent=1, sort_keys=True) + "\n")
    print(summarize(res))


if __name__ == "__main__":
    main()
