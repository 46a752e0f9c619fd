"""Command-line entry point: ``dvrview <subcommand> [options]``.

Every subcommand reads an optional ``--config`` file (JSON object, or
``key = value`` lines whose values are parsed as JSON when possible) and
``--set key=value`` overrides; explicit flags win over both.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import DatasetManifest, GenerationConfig, SourceSpec, generate_dataset
from .evaluation import DEFAULT_TOLERANCES, error_map, estimate_many, tolerance_accuracy
from .files import read_image, write_heatmap, write_image
from .model import (NetworkSpec, TrainConfig, load_checkpoint, predict, save_checkpoint, train,
                    train_category_classifier, train_on_manifest, write_log)
from .render import BLACK, LIGHTING_MODES, PROJECTIONS, WHITE, Camera, LightingConfig, make_camera, render
from .selection import CollectedImageSet, select_viewpoint, viewing_map
from .transfer import OpacityTF, designed_tf, read_tf
from .viewsphere import SpherePixelization, SphericalDirection
from .volume import PHANTOMS, load_volume, synth_volume

__all__ = ["main", "build_parser", "load_config"]

log = logging.getLogger("dvrview")


class CliError(Exception):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path) -> dict:
    """JSON object, or ``key = value`` lines (``#`` comments allowed)."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return json.loads(text)
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = _parse_value(v.strip())
    return out


def _settings(args) -> dict:
    d = load_config(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        d[k.strip()] = _parse_value(v.strip())
    return d


def _flag(d: dict, key: str, value) -> None:
    if value is not None:
        d[key] = value


def _require_seed(d: dict) -> int:
    if d.get("seed") is None:
        raise CliError("a seed is required (--seed or 'seed' in the config)")
    return int(d["seed"])


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _volume_and_tf(d: dict):
    if d.get("volume"):
        vol = load_volume(d["volume"])
    else:
        kind = d.get("phantom", "asymmetric-blobs")
        if kind not in PHANTOMS:
            raise CliError(f"unknown phantom {kind!r}; choose from {sorted(PHANTOMS)}")
        vol = synth_volume(kind, tuple(d.get("dims", (64, 64, 64))), int(d.get("volume_seed", 0)))
    tf_name = d.get("tf", "blobs_context")
    tf = read_tf(tf_name) if str(tf_name).endswith(".tf") else designed_tf(tf_name)
    return vol, tf


# ---------------------------------------------------------------------------
# subcommands


def cmd_pixelize(args) -> None:
    d = _settings(args)
    _flag(d, "nside", args.nside)
    p = SpherePixelization(int(d.get("nside", 2)))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        p.to_csv(args.out)
    else:
        sys.stdout.write(p.to_csv())


def cmd_render(args) -> None:
    d = _settings(args)
    for k in ("phantom", "volume", "tf", "nside", "label", "azimuth", "elevation", "tilt", "projection",
              "scale", "size", "background", "lighting"):
        _flag(d, k, getattr(args, k))
    vol, tf = _volume_and_tf(d)
    otf = OpacityTF.zero() if args.zero_tf or d.get("zero_tf") else tf.opacity
    size = int(d.get("size", 64))
    bg = {"black": BLACK, "white": WHITE}.get(d.get("background", "black"))
    if bg is None:
        raise CliError("background must be 'black' or 'white'")
    scale = float(d.get("scale", 1.0))
    common = dict(tilt=float(d.get("tilt", 0.0)), projection=d.get("projection", "parallel"),
                  scale=scale, image_size=(size, size))
    if "azimuth" in d or "elevation" in d:
        direction = SphericalDirection(float(d.get("azimuth", 0.0)), float(d.get("elevation", 0.0)))
        cam = Camera(direction=direction, distance=vol.viewing_radius / scale, **common)
    else:
        p = SpherePixelization(int(d.get("nside", 2)))
        cam = make_camera(p, int(d.get("label", 0)), vol.viewing_radius, **common)
    mode = d.get("lighting", "env+headlight")
    if mode not in LIGHTING_MODES:
        raise CliError(f"lighting must be one of {LIGHTING_MODES}")
    light = LightingConfig(mode=mode, scene_intensity=0.4 if mode == LIGHTING_MODES[2] else 0.0,
                           scene_position=tuple(3.0 * vol.viewing_radius * np.array([1.0, 1.0, 1.0])))
    img = render(vol, otf, tf.colors, cam, light, bg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_image(args.out, img.pixels)


def cmd_gen_dataset(args) -> None:
    d = _settings(args)
    _flag(d, "seed", args.seed)
    _flag(d, "nside", args.nside)
    _flag(d, "images_per_tf", args.images_per_tf)
    _flag(d, "split", args.split)
    if args.source:
        d["sources"] = [_source_from_text(s) for s in args.source]
    _require_seed(d)
    cfg = GenerationConfig.from_dict(d)
    out = _out_dir(args)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    m = generate_dataset(cfg, out, threads=args.threads)
    print(f"{len(m)} images -> {out}")


def _source_from_text(text: str) -> dict:
    """``phantom:tf[:category]`` or ``path/to/volume.vol:tf[:category]``."""
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise CliError(f"--source expects volume:tf[:category], got {text!r}")
    src = {"tf": parts[1]}
    if parts[0] in PHANTOMS:
        src["phantom"] = parts[0]
    else:
        src.update(phantom=None, volume_path=parts[0])
    if len(parts) == 3:
        src["category"] = parts[2]
    return src


def _train_config(d: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(d) - known - set(SPEC_KEYS)
    if unknown:
        raise CliError(f"unknown training keys: {sorted(unknown)}")
    return TrainConfig(**{k: v for k, v in d.items() if k in known})


SPEC_KEYS = {"channels": "conv_channels", "hidden": "hidden", "input_pool": "input_pool",
             "invert_white": "invert_white", "quarter_turns": "quarter_turns"}


def _spec_kwargs(d: dict) -> dict:
    return {SPEC_KEYS[k]: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in SPEC_KEYS}


def _train_flags(d: dict, args) -> None:
    for k in ("seed", "epochs", "lr", "batch_size", "loss", "order", "dtype"):
        _flag(d, k, getattr(args, k))
    if args.rot90:
        d["rot90"] = True


def cmd_train(args) -> None:
    d = _settings(args)
    _train_flags(d, args)
    _require_seed(d)
    cfg = _train_config(d)
    m = DatasetManifest.read(args.manifest)
    val = DatasetManifest.read(args.val) if args.val else None
    images = m.load_images()
    spec = NetworkSpec(input_size=images.shape[1:], n_outputs=SpherePixelization(m.nside).n_pixels,
                       **_spec_kwargs(d))
    params, history = train_on_manifest(m, cfg, spec, val)
    out = _out_dir(args)
    save_checkpoint(out / "model.ckpt", params)
    write_log(out / "train_log.csv", history)
    print(f"final held-out accuracy {history[-1]['accuracy']:.4f} -> {out}")


def cmd_train_category(args) -> None:
    d = _settings(args)
    _train_flags(d, args)
    _require_seed(d)
    cfg = _train_config(d)
    datasets, val = {}, {}
    for path in args.manifest:
        m = DatasetManifest.read(path)
        imgs = m.load_images()
        for cat in sorted({s.category for s in m.samples}):
            idx = [i for i, s in enumerate(m.samples) if s.category == cat]
            datasets[cat] = np.concatenate([datasets[cat], imgs[idx]]) if cat in datasets else imgs[idx]
    for path in args.val or []:
        m = DatasetManifest.read(path)
        imgs = m.load_images()
        for cat in sorted({s.category for s in m.samples}):
            idx = [i for i, s in enumerate(m.samples) if s.category == cat]
            val[cat] = np.concatenate([val[cat], imgs[idx]]) if cat in val else imgs[idx]
    first = next(iter(datasets.values()))
    spec = NetworkSpec(input_size=first.shape[1:], n_outputs=len(datasets), **_spec_kwargs(d))
    params, history = train_category_classifier(datasets, cfg, spec, val or None)
    out = _out_dir(args)
    save_checkpoint(out / "category.ckpt", params)
    write_log(out / "train_log.csv", history)
    print(f"categories {params.meta['categories']}; final accuracy {history[-1]['accuracy']:.4f} -> {out}")


def cmd_eval(args) -> None:
    d = _settings(args)
    _flag(d, "reference", args.reference)
    _flag(d, "tolerance", args.tolerance)
    params = load_checkpoint(args.model)
    m = DatasetManifest.read(args.manifest)
    p = SpherePixelization(m.nside)
    if params.spec.n_outputs != p.n_pixels:
        raise CliError("model output width does not match the manifest's pixelization")
    probs, _ = predict(params, m.load_images())
    labels, sigmas = estimate_many(probs, p)
    gts = m.directions
    ref = d.get("reference", "center")
    tols = tuple(d.get("tolerances", DEFAULT_TOLERANCES))
    report = tolerance_accuracy(labels, gts, p, tols, ref)
    emap = error_map(labels, gts, p, float(d.get("tolerance", 5.0)), ref)
    out = _out_dir(args)
    report.to_csv(out / "report.csv")
    emap.to_csv(out / "error_map.csv")
    write_heatmap(out / "error_map.ppm", emap.counts, p)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "predicted", "v_sigma"])
        for s, lab, sig in zip(m.samples, labels, sigmas):
            w.writerow([s.index, s.label, int(lab), repr(float(sig))])
    for t, a in zip(report.tolerances, report.accuracies):
        print(f"Acc-{t:g}: {a:.4f}")


def _image_inputs(args) -> tuple[np.ndarray, tuple]:
    if args.manifest:
        m = DatasetManifest.read(args.manifest)
        return m.load_images(), tuple(Path(s.image).stem for s in m.samples)
    paths = sorted(p for p in Path(args.images).iterdir() if p.suffix.lower() in (".ppm", ".png"))
    if not paths:
        raise CliError(f"no .ppm/.png images in {args.images}")
    return np.stack([read_image(p) for p in paths]), tuple(p.stem for p in paths)


def cmd_viewing_map(args) -> None:
    params = load_checkpoint(args.model)
    images, _ = _image_inputs(args)
    nside = int(params.meta.get("nside", 0)) or args.nside
    p = SpherePixelization(nside)
    probs, _ = predict(params, images)
    vm = viewing_map(probs)
    out = _out_dir(args)
    vm.to_csv(out / "viewing_map.csv", p)
    write_heatmap(out / "viewing_map.ppm", vm.values, p)
    print(f"viewing map over {vm.n_images} images; peak label {int(np.argmax(vm.values))}")


def cmd_select(args) -> None:
    d = _settings(args)
    for k in ("phantom", "volume", "tf", "k", "seed"):
        _flag(d, k, getattr(args, k))
    _require_seed(d)
    params = load_checkpoint(args.model)
    extractor = load_checkpoint(args.extractor) if args.extractor else None
    p = SpherePixelization(int(params.meta.get("nside", 0)) or args.nside)
    images, names = _image_inputs(args)
    vol, tf = _volume_and_tf(d)
    res = select_viewpoint(vol, tf.opacity, tf.colors, CollectedImageSet(images, names), params, p,
                           extractor, int(d.get("k", 16)), int(d["seed"]))
    out = _out_dir(args)
    res.to_json(out / "voting.json")
    res.to_csv(out / "voting.csv")
    best = p.center_of(res.optimal)
    print(f"optimal label {res.optimal} (azimuth {best.azimuth:.2f}, elevation {best.elevation:.2f})")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dvrview", description="Viewpoint estimation for volume rendering.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--config", help="JSON or key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
        sp.add_argument("--threads", type=int, default=1)
        return sp

    sp = add("pixelize", cmd_pixelize, "write sphere label centers as CSV")
    sp.add_argument("--nside", type=int)
    sp.add_argument("--out", help="CSV path (stdout when omitted)")

    sp = add("render", cmd_render, "render one image")
    sp.add_argument("--out", required=True, help=".ppm or .png path")
    sp.add_argument("--phantom", choices=sorted(PHANTOMS))
    sp.add_argument("--volume", help="volume file written by save_volume")
    sp.add_argument("--tf", help="designed TF name or .tf path")
    sp.add_argument("--zero-tf", action="store_true", help="fully transparent opacity")
    sp.add_argument("--nside", type=int)
    sp.add_argument("--label", type=int)
    sp.add_argument("--azimuth", type=float)
    sp.add_argument("--elevation", type=float)
    sp.add_argument("--tilt", type=float)
    sp.add_argument("--projection", choices=PROJECTIONS)
    sp.add_argument("--scale", type=float)
    sp.add_argument("--size", type=int)
    sp.add_argument("--background", choices=("black", "white"))
    sp.add_argument("--lighting", choices=LIGHTING_MODES)

    sp = add("gen-dataset", cmd_gen_dataset, "render an annotated training or test set")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--nside", type=int)
    sp.add_argument("--images-per-tf", type=int)
    sp.add_argument("--split", choices=("train", "test"))
    sp.add_argument("--source", action="append", help="volume:tf[:category], repeatable")

    for name, func, help_ in (("train", cmd_train, "train a viewpoint classifier"),
                              ("train-category", cmd_train_category, "train a category classifier")):
        sp = add(name, func, help_)
        multi = name == "train-category"
        sp.add_argument("--manifest", required=True, action="append" if multi else "store")
        sp.add_argument("--val", action="append" if multi else "store", help="held-out manifest")
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--loss", choices=("gs", "softmax"))
        sp.add_argument("--order", type=int)
        sp.add_argument("--dtype", choices=("float64", "float32"))
        sp.add_argument("--rot90", action="store_true", default=None)

    sp = add("eval", cmd_eval, "tolerance accuracy report and error map")
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--reference", choices=("center", "direction"))
    sp.add_argument("--tolerance", type=float, help="error-map tolerance in degrees")

    for name, func, help_ in (("viewing-map", cmd_viewing_map, "accumulate predicted distributions"),
                              ("select", cmd_select, "similarity-weighted viewpoint vote")):
        sp = add(name, func, help_)
        sp.add_argument("--model", required=True, help="viewpoint checkpoint")
        src = sp.add_mutually_exclusive_group(required=True)
        src.add_argument("--manifest")
        src.add_argument("--images", help="directory of .ppm/.png images")
        sp.add_argument("--out", required=True)
        sp.add_argument("--nside", type=int, default=2)
    sp.add_argument("--extractor", help="category checkpoint whose features weight the votes")
    sp.add_argument("--phantom", choices=sorted(PHANTOMS))
    sp.add_argument("--volume")
    sp.add_argument("--tf")
    sp.add_argument("--k", type=int, help="renders per similarity weight")
    sp.add_argument("--seed", type=int)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, ValueError, OSError, KeyError, TypeError) as exc:
        print(f"dvrview {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
