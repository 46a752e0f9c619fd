"""Randomized training-image generation with viewpoint annotations.

For every (volume, designed TF) source, each sample draws a viewpoint label,
jitters the direction inside the label's region, and randomizes every
nuisance parameter: camera tilt, projection, background, scale, lighting
mode and Phong coefficients, opacity keypoints, and feature colors.

Each sample owns an RNG stream derived from ``(seed, source, sample)``, so
results do not depend on generation order or worker count.

Manifest format (JSONL): one header object ``{"type": "header", ...}``
followed by one ``{"type": "sample", ...}`` object per image; see
:class:`SampleAnnotation` for the fields.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .files import read_image, write_image
from .render import BLACK, LIGHTING_MODES, PROJECTIONS, WHITE, Camera, LightingConfig, render
from .transfer import (
    CONTRAST_THRESHOLD,
    DEFAULT_JITTER_SIGMA,
    OpacityTF,
    TransferFunction,
    designed_tf,
    jitter_opacity,
    random_colors,
    read_tf,
)
from .viewsphere import SpherePixelization, SphericalDirection
from .volume import VolumeGrid, load_volume, synth_volume

__all__ = [
    "SourceSpec",
    "GenerationConfig",
    "SampleAnnotation",
    "DatasetManifest",
    "generate_dataset",
    "split_manifest",
    "draw_sample",
]

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
SUMMARY_NAME = "summary.csv"


@dataclass(frozen=True)
class SourceSpec:
    """One volume paired with one designed transfer function."""

    tf: str  # shipped TF name or path to a .tf file
    phantom: str | None = "asymmetric-blobs"
    volume_path: str | None = None
    dims: tuple = (64, 64, 64)
    volume_seed: int = 0
    category: str | None = None

    def __post_init__(self) -> None:
        if self.phantom is None and self.volume_path is None:
            raise ValueError("source needs a phantom or a volume_path")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def volume_name(self) -> str:
        return Path(self.volume_path).stem if self.volume_path else self.phantom

    @property
    def category_name(self) -> str:
        return self.category or self.volume_name

    @property
    def tf_id(self) -> str:
        return f"{self.volume_name}/{Path(self.tf).stem}"

    def load_volume(self) -> VolumeGrid:
        if self.volume_path:
            return load_volume(self.volume_path)
        return synth_volume(self.phantom, self.dims, self.volume_seed)

    def load_tf(self) -> TransferFunction:
        if self.tf.endswith(".tf") or "/" in self.tf:
            return read_tf(self.tf)
        return designed_tf(self.tf)


@dataclass(frozen=True)
class GenerationConfig:
    sources: tuple = (SourceSpec("blobs_context"),)
    nside: int = 2
    images_per_tf: int = 240
    image_size: tuple = (64, 64)
    scale_range: tuple = (1.0, 1.8)
    headlight_range: tuple = (0.7, 1.0)
    dual_light_range: tuple = (0.35, 0.5)  # headlight and scene light in mode 3
    scene_radius_range: tuple = (3.0, 5.0)  # multiples of the viewing-sphere radius
    diffuse_range: tuple = (0.25, 0.75)
    specular_range: tuple = (0.5, 1.0)
    shininess_range: tuple = (20.0, 100.0)
    env_intensity: float = 0.4
    fov: float = 45.0
    jitter_sigma: float = DEFAULT_JITTER_SIGMA
    contrast: float = CONTRAST_THRESHOLD
    tf_variants: int | None = None  # None: every sample gets its own opacity jitter
    label_order: str = "round-robin"  # or "uniform"
    labels: tuple | None = None  # restrict samples to these labels; None -> every label
    split: str = "train"
    image_format: str = "ppm"
    seed: int = 0

    def __post_init__(self) -> None:
        srcs = tuple(s if isinstance(s, SourceSpec) else SourceSpec(**s) for s in self.sources)
        if not srcs:
            raise ValueError("need at least one source")
        object.__setattr__(self, "sources", srcs)
        if self.images_per_tf < 1:
            raise ValueError("images_per_tf must be >= 1")
        if self.nside < 1:
            raise ValueError("nside must be >= 1")
        for f in fields(self):
            if f.name.endswith("_range"):
                lo, hi = getattr(self, f.name)
                if not lo <= hi:
                    raise ValueError(f"{f.name}: empty range {lo, hi}")
                object.__setattr__(self, f.name, (float(lo), float(hi)))
        object.__setattr__(self, "image_size", tuple(int(x) for x in self.image_size))
        if self.label_order not in ("round-robin", "uniform"):
            raise ValueError("label_order must be 'round-robin' or 'uniform'")
        if self.image_format not in ("ppm", "png"):
            raise ValueError("image_format must be 'ppm' or 'png'")
        if self.labels is not None:
            labs = tuple(int(x) for x in self.labels)
            n = 12 * int(self.nside) ** 2
            if not labs or any(not 0 <= x < n for x in labs) or len(set(labs)) != len(labs):
                raise ValueError(f"labels must be distinct values in [0, {n})")
            object.__setattr__(self, "labels", labs)
        if self.tf_variants is not None and self.tf_variants < 1:
            raise ValueError("tf_variants must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sources"] = [asdict(s) for s in self.sources]
        return json.loads(json.dumps(d))  # tuples -> lists

    @classmethod
    def from_dict(cls, d: dict) -> GenerationConfig:
        d = dict(d)
        if "sources" in d:
            d["sources"] = tuple(SourceSpec(**s) for s in d["sources"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) and k != "sources" else v for k, v in d.items()})

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SampleAnnotation:
    index: int
    image: str
    label: int
    azimuth: float
    elevation: float
    source: int
    tf_id: str
    category: str
    tilt: float
    projection: str
    scale: float
    fov: float
    distance: float
    background: tuple
    lighting: dict
    palette: tuple
    opacity: tuple
    tf_jitter_seed: int
    rng_draw_index: int
    split: str = "train"

    @property
    def direction(self) -> SphericalDirection:
        return SphericalDirection(self.azimuth, self.elevation)

    def to_dict(self) -> dict:
        d = {"type": "sample"}
        d.update(asdict(self))
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> SampleAnnotation:
        d = {k: v for k, v in d.items() if k != "type"}
        d["background"] = tuple(d["background"])
        d["palette"] = tuple(tuple(c) for c in d["palette"])
        d["opacity"] = tuple(tuple(k) for k in d["opacity"])
        return cls(**d)


@dataclass(eq=False)
class DatasetManifest:
    config: dict
    config_hash: str
    samples: list
    root: Path | None = None  # directory image paths are relative to

    def __eq__(self, other) -> bool:
        return (isinstance(other, DatasetManifest) and self.config == other.config
                and self.config_hash == other.config_hash and self.samples == other.samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def directions(self) -> list:
        return [s.direction for s in self.samples]

    @property
    def nside(self) -> int:
        return int(self.config["nside"])

    def subset(self, indices, split: str | None = None) -> DatasetManifest:
        chosen = [self.samples[i] for i in indices]
        if split is not None:
            chosen = [replace(s, split=split) for s in chosen]
        return DatasetManifest(self.config, self.config_hash, chosen, self.root)

    def image_path(self, s: SampleAnnotation) -> Path:
        return (self.root or Path(".")) / s.image

    def load_images(self) -> np.ndarray:
        """All images as an (n, h, w, 3) uint8 array in sample order."""
        if not self.samples:
            raise ValueError("empty manifest")
        return np.stack([read_image(self.image_path(s)) for s in self.samples])

    def to_jsonl(self) -> str:
        head = {"type": "header", "config_hash": self.config_hash, "config": self.config}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps(s.to_dict(), sort_keys=True) for s in self.samples]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_jsonl())
        self.write_summary(path.with_name(path.stem + "_" + SUMMARY_NAME)
                           if path.name != MANIFEST_NAME else path.with_name(SUMMARY_NAME))

    def write_summary(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "image", "split", "label", "azimuth", "elevation", "tf_id",
                        "tilt", "projection", "scale", "background", "lighting_mode"])
            for s in self.samples:
                w.writerow([s.index, s.image, s.split, s.label, f"{s.azimuth:.6f}", f"{s.elevation:.6f}",
                            s.tf_id, f"{s.tilt:.4f}", s.projection, f"{s.scale:.4f}",
                            "white" if s.background[0] > 0.5 else "black", s.lighting["mode"]])

    @classmethod
    def parse(cls, text: str, root=None) -> DatasetManifest:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty manifest file")
        head = json.loads(lines[0])
        if head.get("type") != "header":
            raise ValueError("manifest must start with a header record")
        samples = [SampleAnnotation.from_dict(json.loads(ln)) for ln in lines[1:]]
        return cls(head["config"], head["config_hash"], samples, Path(root) if root else None)

    @classmethod
    def read(cls, path) -> DatasetManifest:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        return cls.parse(path.read_text(), root=path.parent)


# ---------------------------------------------------------------------------


def _sample_rng(seed: int, source: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, source, i]))


def _jitter_rng(seed: int, source: int, jitter_seed: int) -> np.random.Generator:
    # four-word key: never collides with the three-word sample streams
    return np.random.default_rng(np.random.SeedSequence([seed, source, jitter_seed, 7]))


def draw_sample(cfg: GenerationConfig, p: SpherePixelization, tf: TransferFunction, radius: float,
                source: int, i: int):
    """Draw every randomized parameter of one sample.

    Returns ``(label, camera, lighting, background, opacity TF, color TF, jitter seed)``.
    """
    rng = _sample_rng(cfg.seed, source, i)
    pool = cfg.labels if cfg.labels is not None else range(p.n_pixels)
    if cfg.label_order == "round-robin":
        label = int(pool[i % len(pool)])
    else:
        label = int(pool[int(rng.integers(len(pool)))])
    direction = p.random_direction_within(label, rng)
    tilt = float(rng.uniform(0.0, 360.0))
    projection = PROJECTIONS[int(rng.integers(2))]
    background = (BLACK, WHITE)[int(rng.integers(2))]
    scale = float(rng.uniform(*cfg.scale_range))
    mode = int(rng.integers(3))
    diffuse = float(rng.uniform(*cfg.diffuse_range))
    specular = float(rng.uniform(*cfg.specular_range))
    shininess = float(rng.uniform(*cfg.shininess_range))
    headlight, scene, scene_pos = 0.0, 0.0, (0.0, 0.0, 0.0)
    if mode == 1:
        headlight = float(rng.uniform(*cfg.headlight_range))
    elif mode == 2:
        headlight = float(rng.uniform(*cfg.dual_light_range))
        scene = float(rng.uniform(*cfg.dual_light_range))
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        scene_pos = tuple((v * radius * rng.uniform(*cfg.scene_radius_range)).tolist())
    lighting = LightingConfig(mode=LIGHTING_MODES[mode], headlight_intensity=headlight,
                              scene_intensity=scene, scene_position=scene_pos,
                              env_intensity=cfg.env_intensity, ambient=1.0, diffuse=diffuse,
                              specular=specular, shininess=shininess)
    jseed = i if cfg.tf_variants is None else int(rng.integers(cfg.tf_variants))
    otf = jitter_opacity(tf.opacity, cfg.jitter_sigma, _jitter_rng(cfg.seed, source, jseed))
    ctf = random_colors(tf.features, background, rng, cfg.contrast)
    cam = Camera(direction=direction, distance=radius / scale, tilt=tilt, projection=projection,
                 scale=scale, image_size=cfg.image_size, fov=cfg.fov)
    return label, cam, lighting, background, otf, ctf, jseed


def generate_dataset(cfg: GenerationConfig, out_dir, threads: int = 1) -> DatasetManifest:
    """Render all samples into ``out_dir/images`` and write the manifest files."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    p = SpherePixelization(cfg.nside)
    jobs = []
    for si, src in enumerate(cfg.sources):
        vol, tf = src.load_volume(), src.load_tf()
        for i in range(cfg.images_per_tf):
            jobs.append((si, src, vol, tf, i, len(jobs)))

    def run(job) -> SampleAnnotation:
        si, src, vol, tf, i, g = job
        label, cam, light, bg, otf, ctf, jseed = draw_sample(cfg, p, tf, vol.viewing_radius, si, i)
        img = render(vol, otf, ctf, cam, light, bg)
        rel = f"images/{g:06d}.{cfg.image_format}"
        write_image(out_dir / rel, img.pixels)
        return SampleAnnotation(
            index=g, image=rel, label=label, azimuth=cam.direction.azimuth,
            elevation=cam.direction.elevation, source=si, tf_id=src.tf_id,
            category=src.category_name, tilt=cam.tilt, projection=cam.projection,
            scale=cam.scale, fov=cam.fov, distance=cam.distance, background=tuple(bg),
            lighting=json.loads(json.dumps(asdict(light))),
            palette=tuple(tuple(float(c) for c in rgb) for rgb in ctf.colors),
            opacity=otf.keypoints, tf_jitter_seed=jseed, rng_draw_index=g, split=cfg.split)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            samples = list(pool.map(run, jobs))
    else:
        samples = [run(j) for j in jobs]
    log.info("rendered %d images into %s", len(samples), out_dir)
    m = DatasetManifest(cfg.to_dict(), cfg.hash(), samples, out_dir)
    m.write(out_dir / MANIFEST_NAME)
    return m


def split_manifest(m: DatasetManifest, test_fraction: float, seed: int,
                   by: str = "sample") -> tuple[DatasetManifest, DatasetManifest]:
    """Disjoint train/test split.

    ``by="sample"`` shuffles samples; ``by="tf"`` keeps each (source, opacity
    jitter seed) group on one side so test opacity TFs never occur in training.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    if not m.samples:
        raise ValueError("cannot split an empty manifest")
    rng = np.random.default_rng(seed)
    n = len(m)
    if by == "sample":
        order = rng.permutation(n)
        n_test = int(round(test_fraction * n))
        test_idx = sorted(order[:n_test].tolist())
    elif by == "tf":
        keys = sorted({(s.source, s.tf_jitter_seed) for s in m.samples})
        order = rng.permutation(len(keys))
        n_test = max(1, int(round(test_fraction * len(keys))))
        test_keys = {keys[k] for k in order[:n_test]}
        test_idx = [i for i, s in enumerate(m.samples) if (s.source, s.tf_jitter_seed) in test_keys]
    else:
        raise ValueError("by must be 'sample' or 'tf'")
    test_set = set(test_idx)
    train_idx = [i for i in range(n) if i not in test_set]
    return m.subset(train_idx, "train"), m.subset(test_idx, "test")
