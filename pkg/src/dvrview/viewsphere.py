"""Equal-area isolatitude pixelization of the viewing sphere.

Implements the HEALPix construction in RING ordering for any positive
``nside`` (powers of two are not required, nested ordering is never used).
Directions are expressed as (azimuth, elevation) in degrees; azimuth is the
longitude measured from +x towards +y and elevation is the latitude above the
xy-plane.  Radians only appear inside the trigonometric kernels.
"""
from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "SphericalDirection",
    "NeighborSet",
    "SpherePixelization",
    "build_pixelization",
    "geodesic_distance",
    "angular_distance",
    "to_unit_vectors",
    "from_unit_vectors",
    "NEIGHBOR_WEIGHT",
]

HALFPI = 0.5 * math.pi
# first-order neighbor weight targeted by the default soft-label unit
NEIGHBOR_WEIGHT = 0.36

# face layout tables of the base 12-face tessellation
_JRLL = np.array([2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4])
_JPLL = np.array([1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7])

# Face-crossing tables for the neighbour walk.  Rows are indexed by the
# neighbour slot (0..8, 4 = same face), columns by the current face.
_FACEARRAY = np.array([
    [8, 9, 10, 11, -1, -1, -1, -1, 10, 11, 8, 9],   # S
    [5, 6, 7, 4, 8, 9, 10, 11, 9, 10, 11, 8],       # SE
    [-1, -1, -1, -1, 5, 6, 7, 4, -1, -1, -1, -1],   # E
    [4, 5, 6, 7, 11, 8, 9, 10, 11, 8, 9, 10],       # SW
    [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11],         # center
    [1, 2, 3, 0, 0, 1, 2, 3, 5, 6, 7, 4],           # NE
    [-1, -1, -1, -1, 7, 4, 5, 6, -1, -1, -1, -1],   # W
    [3, 0, 1, 2, 3, 0, 1, 2, 4, 5, 6, 7],           # NW
    [2, 3, 0, 1, -1, -1, -1, -1, 0, 1, 2, 3],       # N
])
# bit 1: flip x, bit 2: flip y, bit 4: swap x/y; columns: north/equator/south
_SWAPARRAY = np.array([
    [0, 0, 3], [0, 0, 6], [0, 0, 0],
    [0, 0, 5], [0, 0, 0], [5, 0, 0],
    [0, 0, 0], [6, 0, 0], [3, 0, 0],
])
# (dx, dy) steps to the four edge-sharing neighbours: SW, NW, NE, SE
_EDGE_STEPS = ((-1, 0), (0, 1), (1, 0), (0, -1))


@dataclass(frozen=True)
class SphericalDirection:
    """A viewpoint on the viewing sphere, angles in degrees."""

    azimuth: float
    elevation: float

    def __post_init__(self) -> None:
        az, el = float(self.azimuth), float(self.elevation)
        if not (math.isfinite(az) and math.isfinite(el)):
            raise ValueError(f"non-finite direction ({az}, {el})")
        if abs(el) > 90.0:
            raise ValueError(f"elevation {el} outside [-90, 90]")
        az = az % 360.0
        if az >= 360.0:  # -tiny % 360 rounds up to 360
            az = 0.0
        object.__setattr__(self, "azimuth", az)
        object.__setattr__(self, "elevation", el)

    def unit_vector(self) -> np.ndarray:
        return to_unit_vectors(self.azimuth, self.elevation)

    @classmethod
    def from_vector(cls, v) -> SphericalDirection:
        az, el = from_unit_vectors(np.asarray(v, dtype=float))
        return cls(float(az), float(el))


@dataclass(frozen=True)
class NeighborSet:
    center: int
    order: int
    members: frozenset

    def __contains__(self, label) -> bool:
        return label in self.members

    def __len__(self) -> int:
        return len(self.members)


def to_unit_vectors(azimuth, elevation) -> np.ndarray:
    """(..., 3) unit vectors for azimuth/elevation arrays in degrees."""
    az = np.radians(np.asarray(azimuth, dtype=float))
    el = np.radians(np.asarray(elevation, dtype=float))
    ce = np.cos(el)
    return np.stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)], axis=-1)


def from_unit_vectors(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(v, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    az = np.degrees(np.arctan2(y, x)) % 360.0
    az = np.where(az >= 360.0, 0.0, az)
    el = np.degrees(np.arctan2(z, np.hypot(x, y)))
    return az, el


def angular_distance(az1, el1, az2, el2) -> np.ndarray:
    """Great-circle angle in degrees, vectorized over broadcastable inputs.

    Uses atan2(|u x v|, u . v), which stays accurate for both tiny and
    near-antipodal separations.
    """
    u = to_unit_vectors(az1, el1)
    v = to_unit_vectors(az2, el2)
    cross = np.linalg.norm(np.cross(u, v), axis=-1)
    dot = np.sum(u * v, axis=-1)
    return np.degrees(np.arctan2(cross, dot))


def geodesic_distance(a: SphericalDirection, b: SphericalDirection) -> float:
    return float(angular_distance(a.azimuth, a.elevation, b.azimuth, b.elevation))


# ---------------------------------------------------------------------------
# RING-scheme kernels (vectorized, integer arithmetic where HEALPix uses it)


def _isqrt(v: np.ndarray) -> np.ndarray:
    r = np.floor(np.sqrt(v.astype(float))).astype(np.int64)
    # correct float rounding for large arguments
    r = np.where(r * r > v, r - 1, r)
    r = np.where((r + 1) * (r + 1) <= v, r + 1, r)
    return r


def pix2ang_ring(nside: int, pix) -> tuple[np.ndarray, np.ndarray]:
    """Pixel centers as (z = cos colatitude, phi radians)."""
    pix = np.asarray(pix, dtype=np.int64)
    n = nside
    npix = 12 * n * n
    ncap = 2 * n * (n - 1)
    z = np.empty(pix.shape, dtype=float)
    phi = np.empty(pix.shape, dtype=float)

    north = pix < ncap
    south = pix >= npix - ncap
    equ = ~(north | south)

    p = pix[north]
    iring = (1 + _isqrt(1 + 2 * p)) >> 1
    iphi = p + 1 - 2 * iring * (iring - 1)
    z[north] = 1.0 - iring * iring / (3.0 * n * n)
    phi[north] = (iphi - 0.5) * HALFPI / iring

    ip = pix[equ] - ncap
    iring = ip // (4 * n) + n
    iphi = ip % (4 * n) + 1
    fodd = np.where(((iring + n) & 1) == 1, 1.0, 0.5)
    z[equ] = (2 * n - iring) * 2.0 / (3.0 * n)
    phi[equ] = (iphi - fodd) * HALFPI / n

    ip = npix - pix[south]
    iring = (1 + _isqrt(2 * ip - 1)) >> 1
    iphi = 4 * iring + 1 - (ip - 2 * iring * (iring - 1))
    z[south] = -1.0 + iring * iring / (3.0 * n * n)
    phi[south] = (iphi - 0.5) * HALFPI / iring
    return z, phi


def ang2pix_ring(nside: int, z, phi) -> np.ndarray:
    """Pixel index containing (z, phi); total over the sphere."""
    z = np.asarray(z, dtype=float)
    phi = np.asarray(phi, dtype=float)
    n = nside
    npix = 12 * n * n
    ncap = 2 * n * (n - 1)
    za = np.abs(z)
    tt = np.mod(phi, 2.0 * math.pi) / HALFPI
    # exact poles: every azimuth maps to the same polar pixel
    tt = np.where((tt >= 4.0) | (za >= 1.0), 0.0, tt)
    out = np.empty(np.broadcast(z, phi).shape, dtype=np.int64)
    z, tt, za = np.broadcast_arrays(z, tt, za)

    equ = za <= 2.0 / 3.0
    t1 = n * (0.5 + tt[equ])
    t2 = n * z[equ] * 0.75
    jp = np.floor(t1 - t2).astype(np.int64)
    jm = np.floor(t1 + t2).astype(np.int64)
    ir = n + 1 + jp - jm
    kshift = 1 - (ir & 1)
    ip = (jp + jm - n + kshift + 1) // 2
    ip = np.mod(ip, 4 * n)
    out[equ] = ncap + (ir - 1) * 4 * n + ip

    pol = ~equ
    ttp = tt[pol]
    tp = ttp - np.floor(ttp)
    tmp = n * np.sqrt(3.0 * (1.0 - za[pol]))
    jp = np.floor(tp * tmp).astype(np.int64)
    jm = np.floor((1.0 - tp) * tmp).astype(np.int64)
    ir = jp + jm + 1
    ip = np.floor(ttp * ir).astype(np.int64)
    ip = np.mod(ip, 4 * ir)
    out[pol] = np.where(z[pol] > 0, 2 * ir * (ir - 1) + ip, npix - 2 * ir * (ir + 1) + ip)
    return out


def _ring_info(nside: int, ring: int) -> tuple[int, int, bool]:
    """(first pixel, pixels in ring, shifted) for a ring counted from north."""
    n = nside
    if ring < n:
        return 2 * ring * (ring - 1), 4 * ring, True
    if ring < 3 * n:
        return 2 * n * (n - 1) + (ring - n) * 4 * n, 4 * n, ((ring - n) & 1) == 0
    nr = 4 * n - ring
    return 12 * n * n - 2 * nr * (nr + 1), 4 * nr, True


def ring2xyf(nside: int, pix: int) -> tuple[int, int, int]:
    n = nside
    npix = 12 * n * n
    ncap = 2 * n * (n - 1)
    nl2 = 2 * n
    if pix < ncap:
        iring = (1 + math.isqrt(1 + 2 * pix)) >> 1
        iphi = pix + 1 - 2 * iring * (iring - 1)
        kshift = 0
        nr = iring
        face = (iphi - 1) // nr
    elif pix < npix - ncap:
        ip = pix - ncap
        tmp = ip // (4 * n)
        iring = tmp + n
        iphi = ip - tmp * 4 * n + 1
        kshift = (iring + n) & 1
        nr = n
        ire = tmp + 1
        irm = nl2 + 1 - tmp
        ifm = (iphi - (ire >> 1) + n - 1) // n
        ifp = (iphi - (irm >> 1) + n - 1) // n
        if ifp == ifm:
            face = ifp | 4
        elif ifp < ifm:
            face = ifp
        else:
            face = ifm + 8
    else:
        ip = npix - pix
        iring = (1 + math.isqrt(2 * ip - 1)) >> 1
        iphi = 4 * iring + 1 - (ip - 2 * iring * (iring - 1))
        kshift = 0
        nr = iring
        iring = 2 * nl2 - iring
        face = (iphi - 1) // nr + 8
    irt = iring - (2 + (face >> 2)) * n + 1
    ipt = 2 * iphi - int(_JPLL[face]) * nr - kshift - 1
    if ipt >= nl2:
        ipt -= 8 * n
    return (ipt - irt) >> 1, (-ipt - irt) >> 1, face


def xyf2ring(nside: int, ix: int, iy: int, face: int) -> int:
    n = nside
    jr = int(_JRLL[face]) * n - ix - iy - 1
    n_before, nr, shifted = _ring_info(n, jr)
    nr >>= 2
    kshift = 1 - int(shifted)
    jp = (int(_JPLL[face]) * nr + ix - iy + 1 + kshift) // 2
    if jp < 1:
        jp += 4 * n
    return n_before + jp - 1


def xyf2loc(x, y, face) -> tuple[np.ndarray, np.ndarray]:
    """Continuous face coordinates (x, y in [0, 1]) to (z, phi).

    The map is area-preserving: uniform (x, y) on a face is uniform in solid
    angle on the sphere.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    face = np.asarray(face)
    jr = _JRLL[face] - x - y
    z = np.empty(jr.shape)
    nr = np.ones(jr.shape)
    north = jr < 1
    south = jr > 3
    equ = ~(north | south)
    nr[north] = jr[north]
    z[north] = 1.0 - jr[north] ** 2 / 3.0
    nr[south] = 4.0 - jr[south]
    z[south] = nr[south] ** 2 / 3.0 - 1.0
    z[equ] = (2.0 - jr[equ]) * 2.0 / 3.0
    tmp = _JPLL[face] * nr + x - y
    tmp = np.where(tmp < 0, tmp + 8, tmp)
    tmp = np.where(tmp >= 8, tmp - 8, tmp)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(nr < 1e-15, 0.0, 0.5 * HALFPI * tmp / nr)
    return z, phi


def _edge_neighbors(nside: int, pix: int) -> list[int]:
    """The four edge-sharing neighbours (SW, NW, NE, SE) of a RING pixel."""
    n = nside
    ix, iy, face = ring2xyf(n, pix)
    out = []
    for dx, dy in _EDGE_STEPS:
        x, y = ix + dx, iy + dy
        slot = 4
        if x < 0:
            x += n
            slot -= 1
        elif x >= n:
            x -= n
            slot += 1
        if y < 0:
            y += n
            slot -= 3
        elif y >= n:
            y -= n
            slot += 3
        f = int(_FACEARRAY[slot, face])
        # edge steps never land on the corner-only slots (E, W)
        assert f >= 0
        bits = int(_SWAPARRAY[slot, face >> 2])
        if bits & 1:
            x = n - x - 1
        if bits & 2:
            y = n - y - 1
        if bits & 4:
            x, y = y, x
        out.append(xyf2ring(n, x, y, f))
    return out


def _zphi_to_dir(z, phi) -> tuple[np.ndarray, np.ndarray]:
    el = np.degrees(np.arcsin(np.clip(z, -1.0, 1.0)))
    az = np.degrees(phi) % 360.0
    az = np.where(az >= 360.0, 0.0, az)
    return az, el


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpherePixelization:
    """HEALPix RING pixelization with ``12 * nside**2`` equal-area labels."""

    nside: int

    def __post_init__(self) -> None:
        if int(self.nside) != self.nside or self.nside < 1:
            raise ValueError(f"nside must be a positive integer, got {self.nside!r}")
        object.__setattr__(self, "nside", int(self.nside))

    scheme = "ring"

    @property
    def n_pixels(self) -> int:
        return 12 * self.nside * self.nside

    def __len__(self) -> int:
        return self.n_pixels

    @property
    def pixel_solid_angle(self) -> float:
        return 4.0 * math.pi / self.n_pixels

    def _check(self, label) -> int:
        if isinstance(label, (bool, np.bool_)) or int(label) != label:
            raise ValueError(f"invalid label {label!r}")
        label = int(label)
        if not 0 <= label < self.n_pixels:
            raise ValueError(f"label {label} outside [0, {self.n_pixels})")
        return label

    # -- centers and lookup ------------------------------------------------

    @cached_property
    def _centers(self) -> tuple[np.ndarray, np.ndarray]:
        z, phi = pix2ang_ring(self.nside, np.arange(self.n_pixels))
        az, el = _zphi_to_dir(z, phi)
        az.flags.writeable = False
        el.flags.writeable = False
        return az, el

    @property
    def center_azimuths(self) -> np.ndarray:
        return self._centers[0]

    @property
    def center_elevations(self) -> np.ndarray:
        return self._centers[1]

    @cached_property
    def center_vectors(self) -> np.ndarray:
        v = to_unit_vectors(*self._centers)
        v.flags.writeable = False
        return v

    def center_of(self, label) -> SphericalDirection:
        label = self._check(label)
        az, el = self._centers
        return SphericalDirection(float(az[label]), float(el[label]))

    def labels_of(self, azimuth, elevation) -> np.ndarray:
        """Vectorized label lookup for arrays of angles in degrees."""
        el = np.asarray(elevation, dtype=float)
        if np.any(np.abs(el) > 90.0):
            raise ValueError("elevation outside [-90, 90]")
        z = np.sin(np.radians(el))
        phi = np.radians(np.asarray(azimuth, dtype=float))
        return ang2pix_ring(self.nside, z, phi)

    def label_of(self, d: SphericalDirection) -> int:
        return int(self.labels_of(d.azimuth, d.elevation))

    # -- geometry ------------------------------------------------------------

    @cached_property
    def _edge_table(self) -> np.ndarray:
        table = np.array([_edge_neighbors(self.nside, p) for p in range(self.n_pixels)],
                         dtype=np.int64)
        table.flags.writeable = False
        return table

    def edge_neighbors(self, label) -> tuple[int, ...]:
        return tuple(int(x) for x in self._edge_table[self._check(label)])

    def neighbors(self, label, order: int) -> NeighborSet:
        """Labels within ``order`` steps of the edge-sharing relation."""
        label = self._check(label)
        if order < 0:
            raise ValueError("neighbor order must be non-negative")
        table = self._edge_table
        seen = {label}
        frontier = deque([(label, 0)])
        while frontier:
            cur, depth = frontier.popleft()
            if depth == order:
                continue
            for nb in table[cur]:
                nb = int(nb)
                if nb not in seen:
                    seen.add(nb)
                    frontier.append((nb, depth + 1))
        return NeighborSet(label, int(order), frozenset(seen))

    @cached_property
    def mean_neighbor_distance(self) -> float:
        """Mean center-to-center angle (degrees) over all edge-neighbour pairs."""
        az, el = self._centers
        table = self._edge_table
        d = angular_distance(az[:, None], el[:, None], az[table], el[table])
        return float(d.mean())

    @property
    def default_unit(self) -> float:
        """Distance unit (degrees) giving first-order neighbours weight 0.36 on average."""
        return self.mean_neighbor_distance / math.log(1.0 / NEIGHBOR_WEIGHT)

    def soft_target(self, label, order: int, unit: float | None = None) -> np.ndarray:
        """Dense target ``exp(-d / unit)`` on the order-``order`` neighbourhood.

        ``d`` is the center-to-center geodesic angle in degrees.  The ground
        truth itself always gets weight exactly 1.
        """
        if unit is None:
            unit = self.default_unit
        if not unit > 0:
            raise ValueError(f"unit must be positive, got {unit}")
        label = self._check(label)
        members = np.fromiter(sorted(self.neighbors(label, order).members), dtype=np.int64)
        az, el = self._centers
        d = angular_distance(az[label], el[label], az[members], el[members])
        q = np.zeros(self.n_pixels)
        q[members] = np.exp(-d / unit)
        q[label] = 1.0
        return q

    def soft_targets(self, labels, order: int, unit: float | None = None) -> np.ndarray:
        """Stacked soft targets, one row per label."""
        cache: dict[int, np.ndarray] = {}
        rows = []
        for lab in np.asarray(labels).ravel():
            lab = int(lab)
            if lab not in cache:
                cache[lab] = self.soft_target(lab, order, unit)
            rows.append(cache[lab])
        return np.array(rows).reshape(-1, self.n_pixels)

    # -- sampling --------------------------------------------------------------

    def random_direction_within(self, label, rng: np.random.Generator) -> SphericalDirection:
        """Uniform-by-area random direction inside the region of ``label``."""
        label = self._check(label)
        n = self.nside
        ix, iy, face = ring2xyf(n, label)
        while True:
            u, v = rng.random(2)
            z, phi = xyf2loc((ix + u) / n, (iy + v) / n, face)
            az, el = _zphi_to_dir(z, phi)
            # float rounding can push draws on the boundary into a neighbour
            if int(ang2pix_ring(n, z, phi)) == label:
                return SphericalDirection(float(az), float(el))

    # -- export ----------------------------------------------------------------

    def to_csv(self, path: str | Path | None = None) -> str:
        """CSV of ``label,azimuth_deg,elevation_deg`` ordered by label."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "azimuth_deg", "elevation_deg"])
        az, el = self._centers
        for i in range(self.n_pixels):
            w.writerow([i, f"{az[i]:.12g}", f"{el[i]:.12g}"])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def build_pixelization(nside: int) -> SpherePixelization:
    return SpherePixelization(nside)
