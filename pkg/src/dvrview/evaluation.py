"""Viewpoint estimates from label distributions, tolerance accuracy, error maps.

Geodesic errors are measured from the center of the estimated label to a
reference direction for the ground truth.  ``reference="center"`` (default)
uses the center of the ground-truth label; ``reference="direction"`` uses the
exact (jittered) direction the image was rendered from.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .viewsphere import SpherePixelization, SphericalDirection, angular_distance

__all__ = [
    "DEFAULT_TOLERANCES",
    "EstimatedViewpoint",
    "ToleranceAccuracyReport",
    "ErrorMap",
    "center_distances",
    "estimate_viewpoint",
    "estimate_many",
    "geodesic_errors",
    "tolerance_accuracy",
    "error_map",
    "topk_region_accuracy",
]

DEFAULT_TOLERANCES = (2.0, 5.0, 8.0, 11.0, 15.0)
REFERENCES = ("center", "direction")


@dataclass(frozen=True)
class EstimatedViewpoint:
    label: int  # argmax label, lowest index on ties
    sigma: float  # probability-weighted mean geodesic deviation from the argmax, degrees


@dataclass(frozen=True)
class ToleranceAccuracyReport:
    tolerances: tuple
    accuracies: tuple
    n: int
    reference: str = "center"
    name: str = "acc"

    def __post_init__(self) -> None:
        if any(not 0.0 <= a <= 1.0 for a in self.accuracies):
            raise ValueError("accuracies must lie in [0, 1]")

    def at(self, tolerance: float) -> float:
        return self.accuracies[self.tolerances.index(float(tolerance))]

    def as_dict(self) -> dict:
        return {f"{self.name}_{t:g}": a for t, a in zip(self.tolerances, self.accuracies)}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "tolerance_deg", "accuracy", "n", "reference"])
            for t, a in zip(self.tolerances, self.accuracies):
                w.writerow([self.name, f"{t:g}", repr(float(a)), self.n, self.reference])


@dataclass(frozen=True, eq=False)
class ErrorMap:
    counts: np.ndarray  # per ground-truth label
    azimuths: np.ndarray
    elevations: np.ndarray
    tolerance: float

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", "azimuth_deg", "elevation_deg", "errors"])
            for i, (a, e, c) in enumerate(zip(self.azimuths, self.elevations, self.counts)):
                w.writerow([i, f"{a:.6f}", f"{e:.6f}", int(c)])


@lru_cache(maxsize=8)
def _center_distances(nside: int) -> np.ndarray:
    p = SpherePixelization(nside)
    az, el = p.center_azimuths, p.center_elevations
    d = angular_distance(az[:, None], el[:, None], az[None, :], el[None, :])
    np.fill_diagonal(d, 0.0)
    d.flags.writeable = False
    return d


def center_distances(p: SpherePixelization) -> np.ndarray:
    """(N, N) geodesic distances between label centers, degrees."""
    return _center_distances(p.nside)


def _as_dists(dists, p: SpherePixelization) -> np.ndarray:
    d = np.atleast_2d(np.asarray(dists, dtype=float))
    if d.shape[1] != p.n_pixels:
        raise ValueError(f"distribution length {d.shape[1]} != {p.n_pixels} labels")
    return d


def estimate_many(dists, p: SpherePixelization) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`estimate_viewpoint`: ``(labels, sigmas)``."""
    d = _as_dists(dists, p)
    labels = d.argmax(axis=1)  # numpy returns the first maximum
    sigmas = np.einsum("ij,ij->i", d, center_distances(p)[labels])
    return labels, np.maximum(sigmas, 0.0)


def estimate_viewpoint(dist, p: SpherePixelization) -> EstimatedViewpoint:
    labels, sigmas = estimate_many(dist, p)
    return EstimatedViewpoint(int(labels[0]), float(sigmas[0]))


def _pred_labels(preds) -> np.ndarray:
    if len(preds) and isinstance(preds[0], EstimatedViewpoint):
        return np.array([e.label for e in preds], dtype=np.int64)
    return np.asarray(preds, dtype=np.int64).reshape(-1)


def _gt_angles(gts) -> tuple[np.ndarray, np.ndarray]:
    if len(gts) and isinstance(gts[0], SphericalDirection):
        return (np.array([g.azimuth for g in gts], dtype=float),
                np.array([g.elevation for g in gts], dtype=float))
    a = np.asarray(gts, dtype=float).reshape(-1, 2)
    return a[:, 0], a[:, 1]


def geodesic_errors(preds, gts, p: SpherePixelization, reference: str = "center") -> np.ndarray:
    """Degrees between each estimated label center and its ground-truth reference.

    ``gts`` holds SphericalDirection objects or (azimuth, elevation) rows.
    """
    if reference not in REFERENCES:
        raise ValueError(f"reference must be one of {REFERENCES}")
    labels = _pred_labels(preds)
    az, el = _gt_angles(gts)
    if len(labels) != len(az):
        raise ValueError(f"{len(labels)} predictions vs {len(az)} ground truths")
    if len(labels) == 0:
        raise ValueError("no samples")
    if reference == "center":
        gl = p.labels_of(az, el)
        return center_distances(p)[labels, gl]
    return angular_distance(p.center_azimuths[labels], p.center_elevations[labels], az, el)


def tolerance_accuracy(preds, gts, p: SpherePixelization, tolerances=DEFAULT_TOLERANCES,
                       reference: str = "center") -> ToleranceAccuracyReport:
    err = geodesic_errors(preds, gts, p, reference)
    tol = tuple(sorted(float(t) for t in tolerances))
    acc = tuple(float(np.mean(err <= t)) for t in tol)
    return ToleranceAccuracyReport(tol, acc, len(err), reference)


def error_map(preds, gts, p: SpherePixelization, tolerance: float = 5.0,
              reference: str = "center") -> ErrorMap:
    """Per ground-truth label count of samples whose error exceeds ``tolerance``."""
    err = geodesic_errors(preds, gts, p, reference)
    az, el = _gt_angles(gts)
    gl = p.labels_of(az, el)
    counts = np.bincount(gl[err > tolerance], minlength=p.n_pixels).astype(np.int64)
    return ErrorMap(counts, p.center_azimuths.copy(), p.center_elevations.copy(), float(tolerance))


def topk_labels(dists, k: int) -> np.ndarray:
    """Indices of the k most probable labels per row, ties to the lower index."""
    d = np.atleast_2d(np.asarray(dists, dtype=float))
    return np.argsort(-d, axis=1, kind="stable")[:, :k]


def topk_region_accuracy(dists, k: int, gts, p: SpherePixelization, tolerances=DEFAULT_TOLERANCES,
                         reference: str = "center") -> ToleranceAccuracyReport:
    """Mean fraction of the k top labels lying within each tolerance of the ground truth."""
    d = _as_dists(dists, p)
    if not 1 <= k <= p.n_pixels:
        raise ValueError(f"k must lie in [1, {p.n_pixels}]")
    top = topk_labels(d, k)
    n = len(d)
    errs = np.stack([geodesic_errors(top[:, j], gts, p, reference) for j in range(k)], axis=1)
    if len(errs) != n:
        raise ValueError("length mismatch")
    tol = tuple(sorted(float(t) for t in tolerances))
    acc = tuple(float(np.mean(errs <= t)) for t in tol)
    return ToleranceAccuracyReport(tol, acc, n, reference, name=f"top{k}")
