"""Image files: binary PPM (canonical), optional PNG, equirectangular heatmaps."""
from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["write_ppm", "read_ppm", "write_image", "read_image", "heatmap_rgb", "write_heatmap"]


def write_ppm(path, pixels: np.ndarray) -> None:
    px = np.asarray(pixels)
    if px.dtype != np.uint8 or px.ndim != 3 or px.shape[2] != 3:
        raise ValueError("PPM needs an (h, w, 3) uint8 array")
    h, w, _ = px.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(px).tobytes())


def _tokens(data: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        out.append(data[pos:end])
        pos = end
    return out, pos + 1  # one whitespace byte ends the header


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(data, 4, 0)
    if magic != b"P6" or int(maxval) != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(w), int(h)
    payload = data[pos:pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise ValueError(f"{path}: truncated PPM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def write_image(path, pixels: np.ndarray) -> None:
    """PPM by default; ``.png`` goes through Pillow when it is installed."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path)
    else:
        write_ppm(path, pixels)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8).copy()
    return read_ppm(path)


# dark blue -> cyan -> yellow -> red
_RAMP = np.array([[0.05, 0.05, 0.3], [0.0, 0.6, 0.9], [1.0, 0.9, 0.1], [0.85, 0.05, 0.05]])


def heatmap_rgb(per_label: np.ndarray, pixelization, width: int = 360, height: int = 180) -> np.ndarray:
    """Equirectangular azimuth-elevation rendering of a per-label quantity.

    Columns run azimuth 0 -> 360, rows elevation +90 (top) -> -90.
    """
    per_label = np.asarray(per_label, dtype=float)
    az = (np.arange(width) + 0.5) / width * 360.0
    el = 90.0 - (np.arange(height) + 0.5) / height * 180.0
    A, E = np.meshgrid(az, el)
    vals = per_label[pixelization.labels_of(A, E)]
    lo, hi = float(per_label.min()), float(per_label.max())
    t = np.zeros_like(vals) if hi == lo else (vals - lo) / (hi - lo)
    x = t * (len(_RAMP) - 1)
    i = np.minimum(x.astype(int), len(_RAMP) - 2)
    f = (x - i)[..., None]
    rgb = _RAMP[i] * (1.0 - f) + _RAMP[i + 1] * f
    return np.round(rgb * 255.0).astype(np.uint8)


def write_heatmap(path, per_label, pixelization, width: int = 360, height: int = 180) -> None:
    write_image(path, heatmap_rgb(per_label, pixelization, width, height))
