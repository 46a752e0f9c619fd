"""End-to-end smoke pipeline through the command line on a 2-label toy.

gen-dataset (train and test) -> train -> eval -> viewing-map -> select,
with 32x32 images on two orthogonal labels (a top view and a side view) so the whole run takes
about a minute.

    python3 scripts/smoke.py --out runs/smoke [--seed 0]
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from dvrview.cli import main as cli
from dvrview.viewsphere import SpherePixelization


def toy_labels(nside: int = 2) -> list:
    p = SpherePixelization(nside)
    a = 0
    b = int(np.argmin(np.abs(p.center_vectors @ p.center_vectors[a])))
    return [a, b]


def _run(*argv) -> None:
    rc = cli([str(a) for a in argv])
    if rc != 0:
        raise RuntimeError(f"dvrview {argv[0]} failed with status {rc}")


def run(out, seed: int = 0) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    gen = {
        "sources": [{"tf": "blobs_context", "phantom": "asymmetric-blobs"}],
        "image_size": [32, 32],
        "labels": toy_labels(),
        "nside": 2,
    }
    (out / "gen.json").write_text(json.dumps(gen, indent=1, sort_keys=True) + "\n")
    _run("gen-dataset", "--config", out / "gen.json", "--out", out / "train", "--seed", seed,
         "--images-per-tf", 400)
    _run("gen-dataset", "--config", out / "gen.json", "--out", out / "test", "--seed", seed + 1000,
         "--images-per-tf", 40, "--split", "test")
    _run("train", "--manifest", out / "train", "--val", out / "test", "--out", out / "model",
         "--seed", seed, "--epochs", 60, "--lr", 0.02, "--set", "channels=[8,16]", "--set", "hidden=[32]")
    _run("eval", "--model", out / "model" / "model.ckpt", "--manifest", out / "test", "--out", out / "eval")
    _run("viewing-map", "--model", out / "model" / "model.ckpt", "--manifest", out / "test",
         "--out", out / "viewing_map")
    _run("select", "--model", out / "model" / "model.ckpt", "--manifest", out / "test", "--out", out / "select",
         "--phantom", "asymmetric-blobs", "--k", 4, "--seed", seed)
    rows = (out / "eval" / "report.csv").read_text().splitlines()[1:]
    acc = {float(r.split(",")[1]): float(r.split(",")[2]) for r in rows}
    return {"accuracy": acc, "optimal": json.loads((out / "select" / "voting.json").read_text())["optimal_label"]}


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    res = run(args.out, args.seed)
    print(json.dumps(res, indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
