"""Emission-absorption raycaster with Phong shading.

Every ray marches the volume bounding box at a fixed world step, classifies
samples through the opacity/color transfer functions, corrects opacity for
the step size (``a' = 1 - (1 - a) ** (step / step_ref)``), shades with Phong
using gradient normals, and composites front to back.  Output is linear RGB
(no gamma) quantized to 8 bits.

The image kernel is compiled with numba; :func:`ray_samples` is a slow numpy
path over the public sampling functions, kept as an independent reference.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .transfer import ColorTF, OpacityTF, eval_color, eval_opacity
from .viewsphere import SpherePixelization, SphericalDirection
from .volume import VolumeGrid, _gradient, _trilinear, gradient_at, sample_trilinear

__all__ = [
    "Camera",
    "LightingConfig",
    "RenderedImage",
    "LIGHTING_MODES",
    "BLACK",
    "WHITE",
    "make_camera",
    "camera_frame",
    "camera_rays",
    "render",
    "render_float",
    "ray_samples",
    "phong_shade",
    "opacity_correction",
]

PROJECTIONS = ("parallel", "perspective")
LIGHTING_MODES = ("env-only", "env+headlight", "env+headlight+scene")
TERMINATION = 0.999
BLACK = (0.0, 0.0, 0.0)
WHITE = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class Camera:
    """Camera on the viewing sphere looking at the volume center.

    ``distance`` is the eye distance from the center.  Both projections
    frame the same half-height at the center plane,
    ``distance * tan(fov / 2)``, so distance alone sets the zoom; ``scale``
    records the factor that produced it (see :func:`make_camera`).
    """

    direction: SphericalDirection
    distance: float
    tilt: float = 0.0
    projection: str = "parallel"
    scale: float = 1.0
    image_size: tuple = (64, 64)  # (width, height)
    fov: float = 45.0

    def __post_init__(self) -> None:
        if self.projection not in PROJECTIONS:
            raise ValueError(f"projection must be one of {PROJECTIONS}")
        if not self.scale > 0 or not self.distance > 0:
            raise ValueError("scale and distance must be positive")
        if not 10.0 < self.fov < 120.0:
            raise ValueError("fov must lie in (10, 120) degrees")
        w, h = (int(x) for x in self.image_size)
        if w < 1 or h < 1:
            raise ValueError(f"zero image dimension {self.image_size}")
        object.__setattr__(self, "image_size", (w, h))
        object.__setattr__(self, "tilt", float(self.tilt) % 360.0)

    @property
    def position(self) -> np.ndarray:
        return self.distance * self.direction.unit_vector()


@dataclass(frozen=True)
class LightingConfig:
    """Environment (ambient) light plus optional headlight and scene light."""

    mode: str = "env+headlight"
    headlight_intensity: float = 0.85
    scene_intensity: float = 0.0
    scene_position: tuple = (0.0, 0.0, 0.0)
    env_intensity: float = 0.4
    ambient: float = 1.0
    diffuse: float = 0.5
    specular: float = 0.75
    shininess: float = 60.0

    def __post_init__(self) -> None:
        if self.mode not in LIGHTING_MODES:
            raise ValueError(f"lighting mode must be one of {LIGHTING_MODES}")
        if min(self.headlight_intensity, self.scene_intensity, self.env_intensity) < 0:
            raise ValueError("light intensities must be non-negative")
        if not self.shininess > 0:
            raise ValueError("shininess must be positive")
        object.__setattr__(self, "scene_position", tuple(float(c) for c in self.scene_position))

    def lights(self, camera_position) -> np.ndarray:
        """(n, 4) rows of light position xyz + intensity, ambient excluded."""
        rows = []
        if self.mode != "env-only":
            rows.append([*np.asarray(camera_position, float), self.headlight_intensity])
        if self.mode == "env+headlight+scene":
            rows.append([*self.scene_position, self.scene_intensity])
        return np.array(rows, dtype=np.float64).reshape(-1, 4)


@dataclass(frozen=True, eq=False)
class RenderedImage:
    pixels: np.ndarray  # (height, width, 3) uint8, row-major

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8 or px.ndim != 3 or px.shape[2] != 3:
            raise ValueError("pixels must be an (h, w, 3) uint8 array")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, RenderedImage) and np.array_equal(self.pixels, other.pixels)

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()


def make_camera(p: SpherePixelization, label, radius: float, **overrides) -> Camera:
    """Camera at the center of a label's region, ``radius / scale`` from the origin."""
    direction = overrides.pop("direction", None) or p.center_of(label)
    scale = float(overrides.pop("scale", 1.0))
    return Camera(direction=direction, distance=radius / scale, scale=scale, **overrides)


def opacity_correction(alpha, step: float, step_ref: float):
    alpha = np.asarray(alpha)
    if step == step_ref:
        return alpha.copy()
    return 1.0 - (1.0 - alpha) ** (step / step_ref)


def camera_frame(cam: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(forward, right, up) unit vectors, tilt applied as a roll about forward.

    The untilted up vector points towards increasing elevation, which stays
    well defined at the poles.
    """
    az = math.radians(cam.direction.azimuth)
    el = math.radians(cam.direction.elevation)
    d = np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    fwd = -d
    up = np.array([-math.sin(el) * math.cos(az), -math.sin(el) * math.sin(az), math.cos(el)])
    right = np.cross(fwd, up)
    t = math.radians(cam.tilt)
    ct, st = math.cos(t), math.sin(t)
    return fwd, ct * right + st * up, -st * right + ct * up


def camera_rays(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ray origins and unit directions, each (h, w, 3)."""
    w, h = cam.image_size
    fwd, right, up = camera_frame(cam)
    tan_half = math.tan(math.radians(cam.fov) / 2.0)
    u = ((np.arange(w) + 0.5) / w * 2.0 - 1.0) * (w / h)
    v = 1.0 - (np.arange(h) + 0.5) / h * 2.0
    U, V = np.meshgrid(u, v)
    eye = cam.position
    if cam.projection == "parallel":
        half = cam.distance * tan_half
        origins = eye + half * (U[..., None] * right + V[..., None] * up)
        dirs = np.broadcast_to(fwd, origins.shape).copy()
    else:
        dirs = fwd + tan_half * (U[..., None] * right + V[..., None] * up)
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        origins = np.broadcast_to(eye, dirs.shape).copy()
    return origins, dirs


def _box_interval(origins, dirs, lo, hi, clamp_front: bool):
    """Ray parameter interval inside the axis-aligned box [lo, hi]."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    # axis-parallel rays: the slab test degenerates to an inside check
    flat = dirs == 0.0
    inside = (origins >= lo) & (origins <= hi)
    near = np.where(flat, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
    far = np.where(flat, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))
    t0 = near.max(axis=-1)
    t1 = far.min(axis=-1)
    if clamp_front:
        t0 = np.maximum(t0, 0.0)
    return t0, t1


BRICK = 4
_brick_cache: dict = {}


def _brick_ranges(v: VolumeGrid) -> tuple[np.ndarray, np.ndarray]:
    """Min and max scalar over the trilinear cells of each BRICK^3 block."""
    key = id(v.values)
    hit = _brick_cache.get(key)
    if hit is not None and hit[0] is v.values:
        return hit[1], hit[2]
    lo = hi = v.values
    for ax in range(3):
        a, b = np.delete(lo, -1, axis=ax), np.delete(lo, 0, axis=ax)
        lo = np.minimum(a, b)
        a, b = np.delete(hi, -1, axis=ax), np.delete(hi, 0, axis=ax)
        hi = np.maximum(a, b)
    nb = [-(-n // BRICK) for n in lo.shape]
    pad = [(0, m * BRICK - n) for m, n in zip(nb, lo.shape)]
    lo = np.pad(lo, pad, constant_values=np.inf).reshape(nb[0], BRICK, nb[1], BRICK, nb[2], BRICK)
    hi = np.pad(hi, pad, constant_values=-np.inf).reshape(nb[0], BRICK, nb[1], BRICK, nb[2], BRICK)
    out = lo.min(axis=(1, 3, 5)), hi.max(axis=(1, 3, 5))
    if len(_brick_cache) >= 8:
        _brick_cache.pop(next(iter(_brick_cache)))
    _brick_cache[key] = (v.values, *out)
    return out


def _active_box(v: VolumeGrid, otf: OpacityTF):
    """World box outside which every sample has zero opacity, or None if unknown.

    Samples outside the node range read 0, so a TF that is opaque at 0 disables it.
    """
    xs, ys = otf.scalars, otf.opacities
    if float(eval_opacity(otf, 0.0)) > 0.0:
        return None
    bmin, bmax = _brick_ranges(v)
    active = np.zeros(bmin.shape, dtype=bool)
    for k in range(len(xs) - 1):
        if max(ys[k], ys[k + 1]) > 0.0:
            active |= (bmin <= xs[k + 1]) & (bmax >= xs[k])
    if ys[0] > 0.0:
        active |= bmin <= xs[0]
    if ys[-1] > 0.0:
        active |= bmax >= xs[-1]
    if not active.any():
        return np.zeros(3), np.zeros(3) - 1.0
    idx = np.argwhere(active)
    first = idx.min(axis=0) * BRICK
    last = np.minimum((idx.max(axis=0) + 1) * BRICK, np.array(v.dims) - 1)
    sp = np.array(v.spacing)
    eps = 1e-6 * sp
    return v.origin + first * sp - eps, v.origin + last * sp + eps


# ---------------------------------------------------------------------------
# compiled kernel


@njit(cache=True, nogil=True)
def _opacity(xs, ys, s):
    if s <= xs[0]:
        return ys[0]
    n = xs.shape[0]
    if s >= xs[n - 1]:
        return ys[n - 1]
    k = 1
    while xs[k] < s:
        k += 1
    t = (s - xs[k - 1]) / (xs[k] - xs[k - 1])
    return ys[k - 1] + t * (ys[k] - ys[k - 1])


@njit(cache=True, nogil=True)
def _color_index(lo, hi, s):
    best = 0
    best_d = np.inf
    for k in range(lo.shape[0]):
        d = max(lo[k] - s, 0.0) + max(s - hi[k], 0.0)
        if d < best_d:
            best_d = d
            best = k
    return best


@njit(cache=True, nogil=True)
def _shade(base, px, py, pz, g, vx, vy, vz, lights, env, ka, kd, ks, shin, out):
    """Phong with two-sided normals; ``v`` points from the sample to the eye."""
    for c in range(3):
        out[c] = ka * env * base[c]
    gn = math.sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2])
    if gn == 0.0:
        for c in range(3):
            out[c] = min(max(out[c], 0.0), 1.0)
        return
    nx = -g[0] / gn
    ny = -g[1] / gn
    nz = -g[2] / gn
    for li in range(lights.shape[0]):
        lx = lights[li, 0] - px
        ly = lights[li, 1] - py
        lz = lights[li, 2] - pz
        ln = math.sqrt(lx * lx + ly * ly + lz * lz)
        if ln == 0.0:
            continue
        lx /= ln
        ly /= ln
        lz /= ln
        ndl = abs(nx * lx + ny * ly + nz * lz)
        hx = lx + vx
        hy = ly + vy
        hz = lz + vz
        hn = math.sqrt(hx * hx + hy * hy + hz * hz)
        spec = 0.0
        if hn > 0.0:
            ndh = abs(nx * hx + ny * hy + nz * hz) / hn
            spec = ks * ndh ** shin
        inten = lights[li, 3]
        for c in range(3):
            out[c] += inten * (kd * ndl * base[c] + spec)
    for c in range(3):
        out[c] = min(max(out[c], 0.0), 1.0)


@njit(cache=True, nogil=True)
def _render_kernel(vals, sx, sy, sz, ox, oy, oz, op_x, op_y, col_lo, col_hi, col_rgb,
                   origins, dirs, t0s, t1s, k0s, step, step_ref, lights, env, ka, kd, ks, shin,
                   bg, termination, out):
    h, w = t0s.shape
    g = np.empty(3)
    shaded = np.empty(3)
    expo = step / step_ref
    for r in range(h):
        for c in range(w):
            acc0 = 0.0
            acc1 = 0.0
            acc2 = 0.0
            trans = 1.0
            t0 = t0s[r, c]
            t1 = t1s[r, c]
            if t1 > t0:
                dx = dirs[r, c, 0]
                dy = dirs[r, c, 1]
                dz = dirs[r, c, 2]
                k = k0s[r, c]
                while True:
                    t = t0 + (k + 0.5) * step
                    if t > t1:
                        break
                    k += 1
                    px = origins[r, c, 0] + t * dx
                    py = origins[r, c, 1] + t * dy
                    pz = origins[r, c, 2] + t * dz
                    s = _trilinear(vals, sx, sy, sz, ox, oy, oz, px, py, pz)
                    a = _opacity(op_x, op_y, s)
                    if a <= 0.0:
                        continue
                    if expo != 1.0:
                        a = 1.0 - (1.0 - a) ** expo
                    _gradient(vals, sx, sy, sz, ox, oy, oz, px, py, pz, g)
                    ci = _color_index(col_lo, col_hi, s)
                    _shade(col_rgb[ci], px, py, pz, g, -dx, -dy, -dz, lights, env, ka, kd, ks,
                           shin, shaded)
                    wgt = trans * a
                    acc0 += wgt * shaded[0]
                    acc1 += wgt * shaded[1]
                    acc2 += wgt * shaded[2]
                    trans *= 1.0 - a
                    if 1.0 - trans >= termination:
                        break
            out[r, c, 0] = acc0 + trans * bg[0]
            out[r, c, 1] = acc1 + trans * bg[1]
            out[r, c, 2] = acc2 + trans * bg[2]


def render_float(v: VolumeGrid, otf: OpacityTF, ctf: ColorTF, cam: Camera, light: LightingConfig,
                 background=BLACK, step: float | None = None,
                 termination: float = TERMINATION) -> np.ndarray:
    """Linear RGB image as an (h, w, 3) float array, before quantization.

    ``termination`` > 1 disables early ray termination.
    """
    step_ref = v.min_spacing
    step = step_ref if step is None else float(step)
    if not step > 0:
        raise ValueError("step must be positive")
    origins, dirs = camera_rays(cam)
    persp = cam.projection == "perspective"
    t0, t1 = _box_interval(origins, dirs, -v.extent / 2.0, v.extent / 2.0, persp)
    # march only the part of the sample lattice that can see nonzero opacity;
    # samples keep their positions t0 + (k + 0.5) step, so the image is unchanged
    k0 = np.zeros(t0.shape, dtype=np.int64)
    box = _active_box(v, otf)
    if box is not None:
        a0, a1 = _box_interval(origins, dirs, box[0], box[1], persp)
        with np.errstate(invalid="ignore"):
            skip = np.floor((a0 - t0) / step - 0.5)
        k0 = np.where(np.isfinite(skip) & (skip > 0), skip, 0).astype(np.int64)
        t1 = np.where(a1 >= a0, np.minimum(t1, a1), -np.inf)
    w, h = cam.image_size
    out = np.empty((h, w, 3))
    _render_kernel(*v.kernel_args(), otf.scalars, otf.opacities, ctf.lows, ctf.highs, ctf.colors,
                   np.ascontiguousarray(origins), np.ascontiguousarray(dirs), t0, t1, k0, step, step_ref,
                   light.lights(cam.position), light.env_intensity, light.ambient, light.diffuse,
                   light.specular, light.shininess, np.asarray(background, dtype=float),
                   float(termination), out)
    return out


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def render(v: VolumeGrid, otf: OpacityTF, ctf: ColorTF, cam: Camera, light: LightingConfig,
           background=BLACK, step: float | None = None) -> RenderedImage:
    return RenderedImage(quantize(render_float(v, otf, ctf, cam, light, background, step)))


# ---------------------------------------------------------------------------
# numpy reference path


def phong_shade(base, normal_grad, pos, to_eye, light: LightingConfig, lights: np.ndarray) -> np.ndarray:
    """Vectorized Phong for (n, 3) inputs; same model as the compiled kernel."""
    base = np.asarray(base, float)
    out = light.ambient * light.env_intensity * base
    gn = np.linalg.norm(normal_grad, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        nrm = np.where(gn > 0, -normal_grad / gn, 0.0)
    for lx, ly, lz, inten in lights:
        L = np.array([lx, ly, lz]) - pos
        ln = np.linalg.norm(L, axis=-1, keepdims=True)
        L = np.where(ln > 0, L / np.where(ln > 0, ln, 1.0), 0.0)
        ndl = np.abs(np.sum(nrm * L, axis=-1, keepdims=True))
        H = L + to_eye
        hn = np.linalg.norm(H, axis=-1, keepdims=True)
        ndh = np.abs(np.sum(nrm * H, axis=-1, keepdims=True)) / np.where(hn > 0, hn, 1.0)
        spec = np.where(hn > 0, light.specular * ndh ** light.shininess, 0.0)
        lit = inten * (light.diffuse * ndl * base + spec)
        out = out + np.where(gn > 0, lit, 0.0)
    return np.clip(out, 0.0, 1.0)


def ray_samples(v: VolumeGrid, otf: OpacityTF, ctf: ColorTF, cam: Camera, light: LightingConfig,
                row: int, col: int, step: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Shaded colors and step-corrected opacities along one pixel's ray.

    Returns ``(rgb (n, 3), alpha (n,))`` for every sample in marching order,
    including fully transparent ones, with no early termination.
    """
    step_ref = v.min_spacing
    step = step_ref if step is None else float(step)
    origins, dirs = camera_rays(cam)
    o, d = origins[row, col], dirs[row, col]
    t0, t1 = _box_interval(o[None], d[None], -v.extent / 2.0, v.extent / 2.0, cam.projection == "perspective")
    t0, t1 = float(t0[0]), float(t1[0])
    if not t1 > t0:
        return np.zeros((0, 3)), np.zeros(0)
    n = int(math.floor((t1 - t0) / step - 0.5)) + 1
    t = t0 + (np.arange(n + 1) + 0.5) * step
    t = t[t <= t1]
    pos = o + t[:, None] * d
    s = sample_trilinear(v, pos)
    alpha = opacity_correction(eval_opacity(otf, s), step, step_ref)
    grads = gradient_at(v, pos)
    rgb = phong_shade(eval_color(ctf, s), grads, pos, -d, light, light.lights(cam.position))
    return rgb, np.asarray(alpha, float)
