"""Viewing maps and similarity-weighted viewpoint voting.

Each collected image votes with its predicted label distribution.  Its
weight comes from the best feature-cosine match between the image and a set
of renders of the query volume at the image's estimated viewpoint, passed
through ``exp((w - 0.5) * |C| / 10)``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .model import Parameters, predict
from .render import BLACK, WHITE, Camera, LightingConfig, make_camera, render
from .viewsphere import SpherePixelization, SphericalDirection
from .volume import CategoryTag, VolumeGrid

__all__ = [
    "ViewingMap",
    "CollectedImageSet",
    "VotingResult",
    "viewing_map",
    "determine_category",
    "cosine_similarity",
    "max_cosine",
    "render_set",
    "similarity_weight",
    "exponential_weight",
    "vote",
    "select_viewpoint",
]

DEFAULT_RENDER_COUNT = 16  # 8 evenly spaced tilts x 2 backgrounds


@dataclass(frozen=True, eq=False)
class ViewingMap:
    values: np.ndarray  # accumulated probability per label
    n_images: int

    def to_csv(self, path, p: SpherePixelization) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", "azimuth_deg", "elevation_deg", "mass"])
            for i, v in enumerate(self.values):
                w.writerow([i, f"{p.center_azimuths[i]:.6f}", f"{p.center_elevations[i]:.6f}", repr(float(v))])


@dataclass(frozen=True, eq=False)
class CollectedImageSet:
    images: np.ndarray  # (n, h, w, 3) uint8
    names: tuple = ()

    def __post_init__(self) -> None:
        imgs = np.asarray(self.images)
        if imgs.ndim != 4 or imgs.shape[-1] != 3:
            raise ValueError("collected images must be an (n, h, w, 3) array")
        object.__setattr__(self, "images", imgs)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"image{i}" for i in range(len(imgs))))

    def __len__(self) -> int:
        return len(self.images)


@dataclass(frozen=True, eq=False)
class VotingResult:
    optimal: int
    votes: np.ndarray  # summed weighted distributions
    similarity: np.ndarray  # w_i
    weights: np.ndarray  # w'_i
    labels: np.ndarray  # estimated label per voter
    names: tuple = field(default=())

    def to_dict(self) -> dict:
        return {
            "optimal_label": int(self.optimal),
            "votes": [float(v) for v in self.votes],
            "voters": [
                {"name": n, "label": int(lab), "similarity": float(s), "weight": float(w)}
                for n, lab, s, w in zip(self.names, self.labels, self.similarity, self.weights)
            ],
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["voter", "label", "similarity", "weight"])
            for n, lab, s, wt in zip(self.names, self.labels, self.similarity, self.weights):
                w.writerow([n, int(lab), repr(float(s)), repr(float(wt))])


def viewing_map(dists) -> ViewingMap:
    d = np.atleast_2d(np.asarray(dists, dtype=float))
    if d.size == 0 or len(d) == 0:
        raise ValueError("viewing map needs at least one distribution")
    return ViewingMap(d.sum(axis=0), len(d))


def _first_argmax(x: np.ndarray) -> int:
    return int(np.argmax(x))  # first maximum: ties go to the lowest index


def _random_view_images(volume, otf, ctf, n, rng, image_size, light) -> np.ndarray:
    out = []
    for _ in range(n):
        v = rng.normal(size=3)
        d = SphericalDirection.from_vector(v / np.linalg.norm(v))
        cam = Camera(direction=d, distance=volume.viewing_radius, tilt=float(rng.uniform(0, 360)),
                     image_size=image_size)
        bg = (BLACK, WHITE)[int(rng.integers(2))]
        out.append(render(volume, otf, ctf, cam, light, bg).pixels)
    return np.stack(out)


def determine_category(volume: VolumeGrid, otf, ctf, classifier: Parameters, m: int = 10,
                       rng: np.random.Generator | None = None, light: LightingConfig | None = None) -> CategoryTag:
    """Majority vote of the classifier over ``m`` random-viewpoint renders."""
    rng = rng if rng is not None else np.random.default_rng(0)
    names = classifier.meta.get("categories") or [str(i) for i in range(classifier.spec.n_outputs)]
    h, w, _ = classifier.spec.input_size
    imgs = _random_view_images(volume, otf, ctf, m, rng, (w, h), light or LightingConfig())
    probs, _ = predict(classifier, imgs)
    counts = np.bincount(probs.argmax(axis=1), minlength=len(names))
    k = _first_argmax(counts)
    return CategoryTag(names[k], k)


def cosine_similarity(a, b) -> float:
    """Cosine of two feature vectors; defined as 0 when either is all zero."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def max_cosine(f, renders) -> float:
    return max(cosine_similarity(f, r) for r in np.atleast_2d(renders))


def render_set(volume: VolumeGrid, otf, ctf, label: int, p: SpherePixelization, k: int = DEFAULT_RENDER_COUNT,
               rng: np.random.Generator | None = None, image_size=(64, 64),
               light: LightingConfig | None = None) -> np.ndarray:
    """k renders at the label center: evenly spaced tilts, alternating black/white backgrounds.

    The tilt grid starts at a random phase drawn from ``rng``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    n_tilts = (k + 1) // 2
    phase = float(rng.uniform(0.0, 360.0 / n_tilts))
    light = light or LightingConfig()
    out = []
    for j in range(k):
        tilt = (phase + (j // 2) * 360.0 / n_tilts) % 360.0
        cam = make_camera(p, label, volume.viewing_radius, tilt=tilt, image_size=tuple(image_size))
        out.append(render(volume, otf, ctf, cam, light, (BLACK, WHITE)[j % 2]).pixels)
    return np.stack(out)


def similarity_weight(volume: VolumeGrid, otf, ctf, image, label: int, extractor: Parameters,
                      p: SpherePixelization, k: int = DEFAULT_RENDER_COUNT,
                      rng: np.random.Generator | None = None, light: LightingConfig | None = None) -> float:
    """Best cosine between the image's features and those of k renders at ``label``."""
    h, w, _ = extractor.spec.input_size
    renders = render_set(volume, otf, ctf, label, p, k, rng, (w, h), light)
    _, fr = predict(extractor, renders)
    _, fi = predict(extractor, np.asarray(image)[None])
    return max_cosine(fi[0], fr)


def exponential_weight(w, set_size: int):
    if set_size < 1:
        raise ValueError("set size must be >= 1")
    out = np.exp((np.asarray(w, dtype=float) - 0.5) * set_size / 10.0)
    return float(out) if np.ndim(out) == 0 else out


def vote(dists, weights) -> tuple[int, np.ndarray]:
    """Weighted sum of distributions (index order) and its first argmax."""
    d = np.atleast_2d(np.asarray(dists, dtype=float))
    wts = np.asarray(weights, dtype=float).reshape(-1)
    if len(d) == 0:
        raise ValueError("no voters")
    if len(wts) != len(d):
        raise ValueError("one weight per voter required")
    total = np.zeros(d.shape[1])
    for wi, di in zip(wts, d):
        total += wi * di
    return _first_argmax(total), total


def select_viewpoint(volume: VolumeGrid, otf, ctf, collected: CollectedImageSet, viewpoint_net: Parameters,
                     p: SpherePixelization, extractor: Parameters | None = None, k: int = DEFAULT_RENDER_COUNT,
                     seed: int = 0, light: LightingConfig | None = None) -> VotingResult:
    """Similarity-weighted vote of the collected images for the query volume.

    ``extractor`` defaults to the viewpoint network's own features.  Render
    sets use one RNG stream per label derived from ``seed``.
    """
    if len(collected) == 0:
        raise ValueError("collected image set is empty")
    if viewpoint_net.spec.n_outputs != p.n_pixels:
        raise ValueError("viewpoint network does not match the pixelization")
    extractor = extractor or viewpoint_net
    dists, _ = predict(viewpoint_net, collected.images)
    labels = dists.argmax(axis=1)
    _, feats = predict(extractor, collected.images)
    h, w, _ = extractor.spec.input_size
    cache = {}
    sims = np.empty(len(collected))
    for i, lab in enumerate(labels):
        lab = int(lab)
        if lab not in cache:
            rng = np.random.default_rng([seed, lab])
            renders = render_set(volume, otf, ctf, lab, p, k, rng, (w, h), light)
            cache[lab] = predict(extractor, renders)[1]
        sims[i] = max_cosine(feats[i], cache[lab])
    weights = exponential_weight(sims, len(collected))
    weights = np.atleast_1d(weights)
    optimal, total = vote(dists, weights)
    return VotingResult(optimal, total, sims, weights, labels, collected.names)
