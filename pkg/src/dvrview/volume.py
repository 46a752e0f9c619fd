"""Scalar volumes: loading, procedural phantoms, trilinear sampling, gradients.

World frame: the volume is centered at the origin and spans
``dims * spacing`` world units.  Voxel ``i`` along an axis sits at
``(i + 0.5) * s - extent / 2``.  Samples outside the hull of voxel centers
are 0 (transparent), never clamped.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

__all__ = [
    "VolumeGrid",
    "CategoryTag",
    "PHANTOMS",
    "CATEGORY_OTHERS",
    "load_raw",
    "load_volume",
    "save_volume",
    "synth_volume",
    "sample_trilinear",
    "gradient_at",
]

GRADIENT_EPS = 1e-8
CATEGORY_OTHERS = "others"

_DTYPES = {
    "uint8": np.dtype("<u1"),
    "uint16": np.dtype("<u2"),
    "int16": np.dtype("<i2"),
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
}


@dataclass(frozen=True)
class CategoryTag:
    """A category name from a classifier's registry (possibly ``"others"``)."""

    name: str
    index: int = -1


@dataclass(frozen=True, eq=False)
class VolumeGrid:
    values: np.ndarray  # (nx, ny, nz), x-major indexing
    spacing: tuple = (1.0, 1.0, 1.0)
    name: str = ""

    def __post_init__(self) -> None:
        vals = np.array(self.values, dtype=np.float64, order="C")
        if vals.ndim != 3 or min(vals.shape) < 2:
            raise ValueError(f"volume needs >= 2 voxels per axis, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)) or vals.min() < 0.0 or vals.max() > 1.0:
            raise ValueError("volume values must lie in [0, 1]")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"bad spacing {self.spacing}")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.dims, dtype=float) * np.array(self.spacing)

    @property
    def half_diagonal(self) -> float:
        return float(np.linalg.norm(self.extent) / 2.0)

    @property
    def viewing_radius(self) -> float:
        return 1.5 * self.half_diagonal

    @property
    def min_spacing(self) -> float:
        return min(self.spacing)

    @property
    def origin(self) -> np.ndarray:
        """World position of voxel (0, 0, 0)."""
        return -self.extent / 2.0 + np.array(self.spacing) / 2.0

    def kernel_args(self) -> tuple:
        """Flat argument tuple consumed by the compiled sampling kernels."""
        o = self.origin
        s = self.spacing
        return (self.values, s[0], s[1], s[2], o[0], o[1], o[2])

    def voxel_positions(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        o, s = self.origin, self.spacing
        return tuple(o[a] + s[a] * np.arange(self.dims[a]) for a in range(3))


# ---------------------------------------------------------------------------
# compiled kernels


@njit(cache=True, nogil=True)
def _trilinear(vals, sx, sy, sz, ox, oy, oz, x, y, z):
    nx, ny, nz = vals.shape
    u = (x - ox) / sx
    v = (y - oy) / sy
    w = (z - oz) / sz
    if not (u >= 0.0 and v >= 0.0 and w >= 0.0):
        return 0.0
    if u > nx - 1 or v > ny - 1 or w > nz - 1:
        return 0.0
    i = min(int(u), nx - 2)
    j = min(int(v), ny - 2)
    k = min(int(w), nz - 2)
    fu = u - i
    fv = v - j
    fw = w - k
    c00 = vals[i, j, k] * (1.0 - fu) + vals[i + 1, j, k] * fu
    c10 = vals[i, j + 1, k] * (1.0 - fu) + vals[i + 1, j + 1, k] * fu
    c01 = vals[i, j, k + 1] * (1.0 - fu) + vals[i + 1, j, k + 1] * fu
    c11 = vals[i, j + 1, k + 1] * (1.0 - fu) + vals[i + 1, j + 1, k + 1] * fu
    c0 = c00 * (1.0 - fv) + c10 * fv
    c1 = c01 * (1.0 - fv) + c11 * fv
    return c0 * (1.0 - fw) + c1 * fw


@njit(cache=True, nogil=True)
def _gradient(vals, sx, sy, sz, ox, oy, oz, x, y, z, out):
    h = 0.5 * min(sx, min(sy, sz))
    gx = (_trilinear(vals, sx, sy, sz, ox, oy, oz, x + h, y, z)
          - _trilinear(vals, sx, sy, sz, ox, oy, oz, x - h, y, z)) / (2.0 * h)
    gy = (_trilinear(vals, sx, sy, sz, ox, oy, oz, x, y + h, z)
          - _trilinear(vals, sx, sy, sz, ox, oy, oz, x, y - h, z)) / (2.0 * h)
    gz = (_trilinear(vals, sx, sy, sz, ox, oy, oz, x, y, z + h)
          - _trilinear(vals, sx, sy, sz, ox, oy, oz, x, y, z - h)) / (2.0 * h)
    if math.sqrt(gx * gx + gy * gy + gz * gz) < 1e-8:
        gx = 0.0
        gy = 0.0
        gz = 0.0
    out[0] = gx
    out[1] = gy
    out[2] = gz


@njit(cache=True)
def _sample_many(vals, sx, sy, sz, ox, oy, oz, pts):
    out = np.empty(pts.shape[0])
    for n in range(pts.shape[0]):
        out[n] = _trilinear(vals, sx, sy, sz, ox, oy, oz, pts[n, 0], pts[n, 1], pts[n, 2])
    return out


@njit(cache=True)
def _gradient_many(vals, sx, sy, sz, ox, oy, oz, pts):
    out = np.empty((pts.shape[0], 3))
    for n in range(pts.shape[0]):
        _gradient(vals, sx, sy, sz, ox, oy, oz, pts[n, 0], pts[n, 1], pts[n, 2], out[n])
    return out


def _as_points(p) -> tuple[np.ndarray, tuple]:
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != 3:
        raise ValueError("world points need a trailing axis of length 3")
    return np.ascontiguousarray(p.reshape(-1, 3)), p.shape[:-1]


def sample_trilinear(v: VolumeGrid, points):
    """Trilinear interpolation at world point(s); 0 outside the grid."""
    pts, shape = _as_points(points)
    out = _sample_many(*v.kernel_args(), pts).reshape(shape)
    return float(out) if shape == () else out


def gradient_at(v: VolumeGrid, points) -> np.ndarray:
    """Central differences of the trilinear field, step = half the min spacing.

    Vectors shorter than 1e-8 are returned as exact zeros.
    """
    pts, shape = _as_points(points)
    return _gradient_many(*v.kernel_args(), pts).reshape(shape + (3,))


# ---------------------------------------------------------------------------
# I/O


def _normalize(raw: np.ndarray) -> np.ndarray:
    raw = raw.astype(np.float64)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        # constant input carries no structure: map it to all zeros
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def _read_payload(data: bytes, dims, dtype: np.dtype) -> np.ndarray:
    nx, ny, nz = (int(d) for d in dims)
    expected = nx * ny * nz * dtype.itemsize
    if len(data) != expected:
        raise ValueError(f"size mismatch: expected {expected} bytes for {dims} {dtype}, got {len(data)}")
    arr = np.frombuffer(data, dtype=dtype)
    # file layout: x varies fastest, then y, then z
    return arr.reshape(nz, ny, nx).transpose(2, 1, 0)


def load_raw(path, dims, dtype: str = "uint8", spacing=(1.0, 1.0, 1.0)) -> VolumeGrid:
    """Load a headerless raw volume and min-max normalize it to [0, 1]."""
    if dtype not in _DTYPES:
        raise ValueError(f"unknown element type {dtype!r}; known: {sorted(_DTYPES)}")
    data = Path(path).read_bytes()
    raw = _read_payload(data, dims, _DTYPES[dtype])
    return VolumeGrid(_normalize(raw), spacing, Path(path).stem)


def save_volume(path, v: VolumeGrid, dtype: str = "float64") -> None:
    """Write the self-describing format: ``nx ny nz sx sy sz type`` + payload."""
    nx, ny, nz = v.dims
    sx, sy, sz = v.spacing
    header = f"{nx} {ny} {nz} {sx!r} {sy!r} {sz!r} {dtype}\n".encode()
    dt = _DTYPES[dtype]
    vals = v.values
    if dt.kind in "ui":
        vals = np.round(vals * np.iinfo(dt).max)
    payload = np.ascontiguousarray(vals.transpose(2, 1, 0)).astype(dt).tobytes()
    Path(path).write_bytes(header + payload)


def load_volume(path) -> VolumeGrid:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing header line")
    fields = data[:nl].decode().split()
    if len(fields) != 7:
        raise ValueError(f"{path}: header must be 'nx ny nz sx sy sz type', got {fields}")
    dims = tuple(int(f) for f in fields[:3])
    spacing = tuple(float(f) for f in fields[3:6])
    if fields[6] not in _DTYPES:
        raise ValueError(f"{path}: unknown element type {fields[6]!r}")
    raw = _read_payload(data[nl + 1:], dims, _DTYPES[fields[6]])
    return VolumeGrid(_normalize(raw), spacing, Path(path).stem)


# ---------------------------------------------------------------------------
# procedural phantoms; coordinates normalized to [-1, 1] per axis


EDGE_VOXELS = 8  # width of the soft phantom boundaries


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _inside(sd, width):
    """Soft indicator of a signed distance field (negative inside)."""
    return _smoothstep(0.5 - sd / width)


def _ellipsoid(X, Y, Z, c, r):
    q = np.sqrt(((X - c[0]) / r[0]) ** 2 + ((Y - c[1]) / r[1]) ** 2 + ((Z - c[2]) / r[2]) ** 2)
    return (q - 1.0) * min(r)


def _box(X, Y, Z, lo, hi):
    c = [(a + b) / 2 for a, b in zip(lo, hi)]
    h = [(b - a) / 2 for a, b in zip(lo, hi)]
    d = [np.abs(P - ci) - hi_ for P, ci, hi_ in zip((X, Y, Z), c, h)]
    outside = np.sqrt(sum(np.maximum(di, 0.0) ** 2 for di in d))
    inside = np.minimum(np.maximum(np.maximum(d[0], d[1]), d[2]), 0.0)
    return outside + inside


def _blobs(X, Y, Z, w, rng):
    base = [
        ((0.0, 0.0, 0.0), (0.55, 0.35, 0.3), 0.35),
        ((0.35, 0.25, 0.2), (0.22, 0.22, 0.22), 0.6),
        ((-0.3, -0.1, 0.35), (0.15, 0.25, 0.15), 0.85),
        ((0.1, -0.45, -0.25), (0.16, 0.16, 0.16), 1.0),
    ]
    out = np.zeros_like(X)
    for c, r, level in base:
        c = np.array(c) + rng.uniform(-0.04, 0.04, 3)
        out = np.maximum(out, level * _inside(_ellipsoid(X, Y, Z, c, r), w))
    return out


def _shells(X, Y, Z, w, rng):
    r = np.sqrt(X ** 2 + Y ** 2 + Z ** 2)
    out = np.zeros_like(X)
    for radius, thick, level in ((0.25, 0.25, 1.0), (0.5, 0.14, 0.6), (0.75, 0.14, 0.3)):
        out = np.maximum(out, level * _inside(np.abs(r - radius) - thick / 2, w))
    return out


def _lblock(X, Y, Z, w, rng):
    arm_a = _box(X, Y, Z, (-0.6, -0.6, -0.3), (0.65, -0.2, 0.3))
    arm_b = _box(X, Y, Z, (-0.6, -0.6, -0.3), (-0.2, 0.7, 0.3))
    block = 0.5 * _inside(np.minimum(arm_a, arm_b), w)
    knob = 1.0 * _inside(_ellipsoid(X, Y, Z, (0.4, -0.4, 0.42), (0.14, 0.14, 0.14)), w)
    return np.maximum(block, knob)


def _cone(X, Y, Z, w, rng):
    # cone along +z: radius shrinks linearly from 0.45 at z=-0.6 to 0 at z=0.6
    t = np.clip((Z + 0.6) / 1.2, 0.0, 1.0)
    radial = np.sqrt(X ** 2 + Y ** 2) - 0.45 * (1.0 - t)
    caps = np.maximum(-0.6 - Z, Z - 0.6)
    cone = 0.5 * _inside(np.maximum(radial * 0.94, caps), w)
    # handle: torus in the xz-plane attached to the +x flank
    q = np.sqrt((X - 0.45) ** 2 + (Z + 0.1) ** 2) - 0.25
    torus = np.sqrt(q ** 2 + Y ** 2) - 0.07
    handle = 0.9 * _inside(torus, w)
    return np.maximum(cone, handle)


PHANTOMS = {
    "asymmetric-blobs": _blobs,
    "nested-shells": _shells,
    "l-block": _lblock,
    "cone-with-handle": _cone,
}


def synth_volume(kind: str, dims=(64, 64, 64), seed: int = 0, spacing=(1.0, 1.0, 1.0)) -> VolumeGrid:
    """Deterministic procedural phantom, normalized so min = 0 and max = 1.

    Every phantom except ``nested-shells`` lacks rotational symmetry;
    ``nested-shells`` is radially symmetric on purpose.
    """
    if kind not in PHANTOMS:
        raise ValueError(f"unknown phantom {kind!r}; known: {sorted(PHANTOMS)}")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 2:
        raise ValueError(f"bad dims {dims}")
    axes = [(np.arange(n) + 0.5) / n * 2.0 - 1.0 for n in dims]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    width = 2.0 * EDGE_VOXELS / min(dims)
    rng = np.random.default_rng(seed)
    vals = PHANTOMS[kind](X, Y, Z, width, rng)
    return VolumeGrid(_normalize(vals), spacing, kind)
