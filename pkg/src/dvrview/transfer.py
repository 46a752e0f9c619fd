"""1D opacity and color transfer functions.

Text file format (``#`` starts a comment)::

    scalar opacity            # one line per opacity keypoint
    lo hi r g b [name]        # one line per feature color segment
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "OpacityTF",
    "ColorTF",
    "FeatureSpec",
    "TransferFunction",
    "eval_opacity",
    "eval_color",
    "jitter_opacity",
    "luminance",
    "random_colors",
    "read_tf",
    "write_tf",
    "designed_tf",
    "DESIGNED_TFS",
]

MIN_SEPARATION = 1e-4
CONTRAST_THRESHOLD = 0.3
DEFAULT_JITTER_SIGMA = 0.02

_DATA = Path(__file__).parent / "data" / "tfs"


@dataclass(frozen=True)
class OpacityTF:
    """Piecewise-linear opacity over [0, 1] defined by keypoints."""

    keypoints: tuple

    def __post_init__(self) -> None:
        kp = tuple((float(s), float(a)) for s, a in self.keypoints)
        if len(kp) < 2:
            raise ValueError("need at least the two endpoint keypoints")
        xs = [s for s, _ in kp]
        if xs[0] != 0.0 or xs[-1] != 1.0:
            raise ValueError("keypoints must start at scalar 0 and end at 1")
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("keypoint scalars must be strictly ascending")
        if any(not 0.0 <= a <= 1.0 for _, a in kp):
            raise ValueError("opacities must lie in [0, 1]")
        object.__setattr__(self, "keypoints", kp)

    @property
    def scalars(self) -> np.ndarray:
        return np.array([s for s, _ in self.keypoints])

    @property
    def opacities(self) -> np.ndarray:
        return np.array([a for _, a in self.keypoints])

    @classmethod
    def zero(cls) -> OpacityTF:
        return cls(((0.0, 0.0), (1.0, 0.0)))


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.lo < self.hi <= 1.0:
            raise ValueError(f"feature {self.name!r}: need 0 <= lo < hi <= 1")


@dataclass(frozen=True)
class ColorTF:
    """One RGB per non-overlapping scalar segment.

    Scalars outside every segment take the color of the nearest segment.
    """

    segments: tuple  # of (lo, hi, (r, g, b))

    def __post_init__(self) -> None:
        segs = tuple((float(lo), float(hi), tuple(float(c) for c in rgb)) for lo, hi, rgb in self.segments)
        if not segs:
            raise ValueError("color TF needs at least one segment")
        for lo, hi, rgb in segs:
            if not lo < hi:
                raise ValueError(f"empty segment [{lo}, {hi}]")
            if len(rgb) != 3 or any(not 0.0 <= c <= 1.0 for c in rgb):
                raise ValueError(f"bad color {rgb}")
        if any(b[0] < a[1] for a, b in zip(segs, segs[1:])):
            raise ValueError("segments must be ordered and non-overlapping")
        object.__setattr__(self, "segments", segs)

    @property
    def lows(self) -> np.ndarray:
        return np.array([s[0] for s in self.segments])

    @property
    def highs(self) -> np.ndarray:
        return np.array([s[1] for s in self.segments])

    @property
    def colors(self) -> np.ndarray:
        return np.array([s[2] for s in self.segments])

    @classmethod
    def from_features(cls, features, colors) -> ColorTF:
        return cls(tuple((f.lo, f.hi, tuple(c)) for f, c in zip(features, colors)))


@dataclass(frozen=True)
class TransferFunction:
    """A designed transfer function: opacity, feature ranges, default colors."""

    name: str
    opacity: OpacityTF
    features: tuple
    colors: ColorTF


def eval_opacity(tf: OpacityTF, s):
    out = np.interp(s, tf.scalars, tf.opacities)
    return float(out) if np.ndim(out) == 0 else out


def eval_color(ctf: ColorTF, s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    lo, hi = ctf.lows, ctf.highs
    dist = np.maximum(lo - s[..., None], 0.0) + np.maximum(s[..., None] - hi, 0.0)
    return ctf.colors[np.argmin(dist, axis=-1)]


def jitter_opacity(tf: OpacityTF, sigma: float, rng: np.random.Generator) -> OpacityTF:
    """Shift interior keypoints by independent N(0, sigma^2) draws.

    Endpoints stay at 0 and 1.  Shifted positions are sorted and pushed
    apart to at least 1e-4, while the opacity sequence keeps its order.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    xs, ys = tf.scalars, tf.opacities
    m = len(xs) - 2
    if m == 0:
        return tf
    inner = np.sort(xs[1:-1] + rng.normal(0.0, sigma, m))
    inner = np.clip(inner, MIN_SEPARATION, 1.0 - MIN_SEPARATION)
    pos = np.concatenate([[0.0], inner, [1.0]])
    for i in range(1, m + 1):
        pos[i] = max(pos[i], pos[i - 1] + MIN_SEPARATION)
    for i in range(m, 0, -1):
        pos[i] = min(pos[i], pos[i + 1] - MIN_SEPARATION)
    return OpacityTF(tuple(zip(pos.tolist(), ys.tolist())))


def luminance(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=float)
    return rgb[..., 0] * 0.2126 + rgb[..., 1] * 0.7152 + rgb[..., 2] * 0.0722


def random_colors(features, background, rng: np.random.Generator,
                  threshold: float = CONTRAST_THRESHOLD) -> ColorTF:
    """Per-feature random RGB with luminance contrast >= ``threshold`` to the background."""
    features = list(features)
    if not features:
        raise ValueError("need at least one feature")
    y_bg = float(luminance(background))
    colors = []
    for _ in features:
        while True:
            c = rng.random(3)
            if abs(float(luminance(c)) - y_bg) >= threshold:
                break
        colors.append(c)
    return ColorTF.from_features(features, colors)


# ---------------------------------------------------------------------------
# files


def read_tf(path) -> TransferFunction:
    keypoints, segments, features = [], [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) == 2:
            keypoints.append((float(tok[0]), float(tok[1])))
        elif len(tok) in (5, 6):
            lo, hi, r, g, b = (float(t) for t in tok[:5])
            name = tok[5] if len(tok) == 6 else f"feature{len(segments)}"
            segments.append((lo, hi, (r, g, b)))
            features.append(FeatureSpec(name, lo, hi))
        else:
            raise ValueError(f"{path}:{lineno}: expected 2 or 5 fields, got {len(tok)}")
    if not segments:
        raise ValueError(f"{path}: no color segments")
    return TransferFunction(Path(path).stem, OpacityTF(tuple(keypoints)), tuple(features),
                            ColorTF(tuple(segments)))


def write_tf(path, tf: TransferFunction) -> None:
    lines = [f"# {tf.name}"]
    lines += [f"{s!r} {a!r}" for s, a in tf.opacity.keypoints]
    for f, (lo, hi, rgb) in zip(tf.features, tf.colors.segments):
        lines.append(f"{lo!r} {hi!r} {rgb[0]!r} {rgb[1]!r} {rgb[2]!r} {f.name}")
    Path(path).write_text("\n".join(lines) + "\n")


DESIGNED_TFS = {
    "asymmetric-blobs": ("blobs_context", "blobs_inner"),
    "nested-shells": ("shells",),
    "l-block": ("lblock",),
    "cone-with-handle": ("cone",),
}


def designed_tf(name: str) -> TransferFunction:
    """Load one of the shipped designed TFs by name (see ``DESIGNED_TFS``)."""
    path = _DATA / f"{name}.tf"
    if not path.exists():
        known = sorted(p.stem for p in _DATA.glob("*.tf"))
        raise ValueError(f"unknown designed TF {name!r}; known: {known}")
    return read_tf(path)
