"""Small NHWC convolutional classifier in plain numpy.

Architecture: ``[conv3x3 -> ReLU -> maxpool2]`` per entry of
``conv_channels``, then ReLU fully-connected hidden layers, then a linear
output layer feeding softmax.  The last hidden activation is the feature
vector used for image similarity.

The loss is the soft-target cross-entropy ``-sum_v q(v) log P_v``, summed
over the batch.  A one-hot ``q`` (neighbour order 0) gives the plain softmax
loss through the same code path.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

__all__ = [
    "NetworkSpec",
    "Parameters",
    "TrainConfig",
    "TrainingDivergence",
    "init_params",
    "forward",
    "softmax",
    "loss",
    "loss_and_gradient",
    "gradient",
    "predict",
    "preprocess",
    "train",
    "train_on_manifest",
    "train_category_classifier",
    "save_checkpoint",
    "load_checkpoint",
    "write_log",
]

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
# keeps softmax and its backward pass clear of subnormal floats, which slow
# float32 arithmetic severalfold once a model becomes confident
LOGIT_FLOOR = -80.0
GRAD_FLUSH = 1e-20
MAX_WEIGHT = 1e6  # larger weights only come from a blown-up run
CHECKPOINT_MAGIC = b"DVRVCKPT"
CHECKPOINT_VERSION = 1


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    input_size: tuple = (64, 64, 3)  # image (H, W, C)
    conv_channels: tuple = (16, 32, 64)
    hidden: tuple = (512,)
    n_outputs: int = 48
    input_pool: int = 2  # average-pool factor applied to the image before the first convolution
    invert_white: bool = True  # flip images with a bright border so every input has a dark background
    quarter_turns: bool = True  # predict averages the four 90-degree rotations of each image

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_size", tuple(int(x) for x in self.input_size))
        object.__setattr__(self, "conv_channels", tuple(int(x) for x in self.conv_channels))
        object.__setattr__(self, "hidden", tuple(int(x) for x in self.hidden))
        h, w, _ = self.input_size
        if self.quarter_turns and h != w:
            raise ValueError("quarter-turn averaging needs square images")
        if self.input_pool < 1:
            raise ValueError("input_pool must be >= 1")
        k = 2 ** len(self.conv_channels) * self.input_pool
        if h % k or w % k:
            raise ValueError(f"input {h}x{w} must be divisible by {k}")
        if not self.hidden:
            raise ValueError("need at least one hidden fully-connected layer")
        if self.n_outputs < 1:
            raise ValueError("n_outputs must be >= 1")

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1]

    @property
    def network_input(self) -> tuple:
        """Shape of the tensor entering the first convolution."""
        h, w, c = self.input_size
        return (h // self.input_pool, w // self.input_pool, c)

    @property
    def flat_dim(self) -> int:
        h, w, c = self.network_input
        k = 2 ** len(self.conv_channels)
        last = self.conv_channels[-1] if self.conv_channels else c
        return (h // k) * (w // k) * last

    def shapes(self) -> dict:
        out = {}
        cin = self.input_size[2]
        for i, c in enumerate(self.conv_channels):
            out[f"conv{i}.w"] = (3, 3, cin, c)
            out[f"conv{i}.b"] = (c,)
            cin = c
        dims = (self.flat_dim,) + self.hidden + (self.n_outputs,)
        for i in range(len(dims) - 1):
            out[f"fc{i}.w"] = (dims[i], dims[i + 1])
            out[f"fc{i}.b"] = (dims[i + 1],)
        return out


@dataclass(eq=False)
class Parameters:
    spec: NetworkSpec
    tensors: dict  # name -> array, in spec.shapes() order
    velocity: dict | None = None
    meta: dict = field(default_factory=dict)

    def copy(self) -> Parameters:
        vel = None if self.velocity is None else {k: v.copy() for k, v in self.velocity.items()}
        return Parameters(self.spec, {k: v.copy() for k, v in self.tensors.items()}, vel, dict(self.meta))

    def astype(self, dtype) -> Parameters:
        out = self.copy()
        out.tensors = {k: v.astype(dtype) for k, v in out.tensors.items()}
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def equals(self, other: Parameters) -> bool:
        return (self.spec == other.spec and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors))


def init_params(spec: NetworkSpec, seed: int = 0, dtype=np.float64) -> Parameters:
    """Fan-in scaled uniform (He) weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in spec.shapes().items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            lim = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-lim, lim, size=shape).astype(dtype)
    return Parameters(spec, tensors)


def preprocess(pixels, dtype=np.float64, spec: NetworkSpec | None = None) -> np.ndarray:
    """uint8 RGB -> centered floats in [-0.5, 0.5].

    With a ``spec``, bright-border images are inverted and the result is
    average-pooled to the network input size as the network spec requests.
    """
    x = np.asarray(pixels)
    if x.ndim == 3:
        x = x[None]
    if spec is None:
        return x.astype(dtype) / 255.0 - 0.5
    if x.shape[1:] != spec.input_size:
        raise ValueError(f"image shape {x.shape[1:]} does not match network input {spec.input_size}")
    # pool raw pixel sums (exact for 8-bit values), then scale once
    k = spec.input_pool
    acc = x[:, ::k, ::k].astype(dtype)
    for i in range(k):
        for j in range(k):
            if i or j:
                acc += x[:, i::k, j::k]
    x = acc / (255.0 * k * k) - 0.5
    if spec.invert_white and len(x):
        raw = np.asarray(pixels).reshape((-1,) + spec.input_size)
        border = np.concatenate([raw[:, 0], raw[:, -1], raw[:, 1:-1, 0], raw[:, 1:-1, -1]], axis=1)
        flip = border.mean(axis=(1, 2)) > 127.5
        x[flip] = -x[flip]
    return x


# ---------------------------------------------------------------------------
# layers


@njit(cache=True)
def _im2col(x, cols):
    # cols[(a, i, j), (di, dj, c)] = x[a, i + di - 1, j + dj - 1, c], zero outside
    n, h, w, c = x.shape
    r = 0
    for a in range(n):
        for i in range(h):
            for j in range(w):
                q = 0
                for di in range(3):
                    ii = i + di - 1
                    for dj in range(3):
                        jj = j + dj - 1
                        if 0 <= ii < h and 0 <= jj < w:
                            for k in range(c):
                                cols[r, q + k] = x[a, ii, jj, k]
                        else:
                            for k in range(c):
                                cols[r, q + k] = 0.0
                        q += c
                r += 1


@njit(cache=True)
def _col2im(dcols, dx):
    n, h, w, c = dx.shape
    r = 0
    for a in range(n):
        for i in range(h):
            for j in range(w):
                q = 0
                for di in range(3):
                    ii = i + di - 1
                    for dj in range(3):
                        jj = j + dj - 1
                        if 0 <= ii < h and 0 <= jj < w:
                            for k in range(c):
                                dx[a, ii, jj, k] += dcols[r, q + k]
                        q += c
                r += 1


def _conv_forward(x, w, b):
    n, h, wd, c = x.shape
    cols = np.empty((n * h * wd, 9 * c), dtype=x.dtype)
    _im2col(np.ascontiguousarray(x), cols)
    out = cols @ w.reshape(9 * c, -1) + b
    return out.reshape(n, h, wd, -1), cols


def _conv_backward(dout, cols, x_shape, w, need_dx: bool = True):
    n, h, wd, c = x_shape
    d2 = dout.reshape(n * h * wd, -1)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:  # first layer: the input gradient is never used
        return None, dw, db
    dcols = d2 @ w.reshape(9 * c, -1).T
    dx = np.zeros(x_shape, dtype=dout.dtype)
    _col2im(dcols, dx)
    return dx, dw, db


@njit(cache=True)
def _pool_kernel(x, out, idx):
    n, h, w, c = x.shape
    for a in range(n):
        for i in range(h // 2):
            for j in range(w // 2):
                for k in range(c):
                    best = x[a, 2 * i, 2 * j, k]
                    arg = 0
                    for q in range(1, 4):  # row-major 2x2 order, first maximum wins
                        v = x[a, 2 * i + q // 2, 2 * j + q % 2, k]
                        if v > best:
                            best = v
                            arg = q
                    out[a, i, j, k] = best
                    idx[a, i, j, k] = arg


@njit(cache=True)
def _unpool_kernel(dout, idx, dx):
    n, h, w, c = dout.shape
    for a in range(n):
        for i in range(h):
            for j in range(w):
                for k in range(c):
                    q = idx[a, i, j, k]
                    dx[a, 2 * i + q // 2, 2 * j + q % 2, k] = dout[a, i, j, k]


def _pool_forward(x):
    n, h, w, c = x.shape
    out = np.empty((n, h // 2, w // 2, c), dtype=x.dtype)
    idx = np.empty((n, h // 2, w // 2, c), dtype=np.int8)
    _pool_kernel(x, out, idx)
    return out, idx


def _pool_backward(dout, idx, x_shape):
    dx = np.zeros(x_shape, dtype=dout.dtype)
    _unpool_kernel(np.ascontiguousarray(dout), idx, dx)
    return dx


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(np.maximum(z - z.max(axis=-1, keepdims=True), LOGIT_FLOOR))
    return e / e.sum(axis=-1, keepdims=True)


def _forward(params: Parameters, x: np.ndarray):
    spec, t = params.spec, params.tensors
    if x.shape[1:] != spec.network_input:
        raise ValueError(f"input shape {x.shape[1:]} does not match network input {spec.network_input}")
    cache = []
    a = x
    for i in range(len(spec.conv_channels)):
        z, cols = _conv_forward(a, t[f"conv{i}.w"], t[f"conv{i}.b"])
        r = np.maximum(z, 0.0)
        p, idx = _pool_forward(r)
        cache.append((a.shape, cols, z > 0, r.shape, idx))
        a = p
    n_fc = len(spec.hidden) + 1
    a = a.reshape(len(a), -1)
    fc_in = []
    for i in range(n_fc):
        fc_in.append(a)
        a = a @ t[f"fc{i}.w"] + t[f"fc{i}.b"]
        if i < n_fc - 1:
            a = np.maximum(a, 0.0)
    return a, fc_in, cache


def forward(params: Parameters, images):
    """Return ``(logits, probabilities, features)`` for one image or a batch.

    ``images`` are preprocessed floats of shape (H, W, C) or (n, H, W, C).
    """
    x = np.asarray(images)
    single = x.ndim == 3
    if single:
        x = x[None]
    logits, fc_in, _ = _forward(params, x)
    probs = softmax(logits)
    feats = fc_in[-1]
    if single:
        return logits[0], probs[0], feats[0]
    return logits, probs, feats


def loss(probs: np.ndarray, targets: np.ndarray) -> float:
    """``-sum q log max(P, 1e-12)`` summed over all rows."""
    probs, targets = np.asarray(probs), np.asarray(targets)
    if probs.shape != targets.shape:
        raise ValueError(f"shape mismatch: {probs.shape} vs {targets.shape}")
    return float(-np.sum(targets * np.log(np.maximum(probs, LOG_CLAMP))))


def loss_and_gradient(params: Parameters, x: np.ndarray, targets: np.ndarray, return_probs: bool = False):
    """Summed loss over the batch and its exact gradient for every tensor."""
    spec, t = params.spec, params.tensors
    logits, fc_in, cache = _forward(params, x)
    probs = softmax(logits)
    value = loss(probs, targets)
    # d/dz of -sum q log softmax(z) = (sum q) P - q
    d = targets.sum(axis=1, keepdims=True) * probs - targets
    d[np.abs(d) < GRAD_FLUSH] = 0.0
    grads = {}
    n_fc = len(spec.hidden) + 1
    for i in reversed(range(n_fc)):
        a = fc_in[i]
        grads[f"fc{i}.w"] = a.T @ d
        grads[f"fc{i}.b"] = d.sum(axis=0)
        d = d @ t[f"fc{i}.w"].T
        if i > 0:
            d = d * (a > 0)
    for i in reversed(range(len(spec.conv_channels))):
        x_shape, cols, mask, r_shape, idx = cache[i]
        if i == len(spec.conv_channels) - 1:
            d = d.reshape((len(x),) + idx.shape[1:])
        d = _pool_backward(d, idx, r_shape) * mask
        d, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = _conv_backward(d, cols, x_shape, t[f"conv{i}.w"], i > 0)
    grads = {k: grads[k] for k in t}
    return (value, grads, probs) if return_probs else (value, grads)


def gradient(params: Parameters, x: np.ndarray, targets: np.ndarray) -> dict:
    return loss_and_gradient(params, x, targets)[1]


def predict(params: Parameters, pixels, batch: int = 256):
    """Probabilities and features for uint8 images, processed in batches.

    With ``spec.quarter_turns`` both are averaged over the four 90-degree
    rotations of each image.
    """
    spec = params.spec
    dtype = next(iter(params.tensors.values())).dtype
    turns = 4 if spec.quarter_turns else 1
    probs, feats = [], []
    for s in range(0, len(pixels), batch):
        x = preprocess(pixels[s:s + batch], dtype, spec)
        p = f = 0.0
        for k in range(turns):
            _, pk, fk = forward(params, np.rot90(x, k, axes=(1, 2)) if k else x)
            p, f = p + pk, f + fk
        probs.append(p / turns)
        feats.append(f / turns)
    return np.concatenate(probs).astype(np.float64), np.concatenate(feats).astype(np.float64)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 14
    loss: str = "gs"  # "gs" or "softmax"
    order: int = 1  # neighbourhood order of the soft target
    unit: float | None = None  # distance unit in degrees; None -> pixelization default
    decay_at: float = 2.0 / 3.0  # lr x0.1 from this fraction of epochs on
    dtype: str = "float64"
    rot90: bool = True  # random quarter-turn per image; a pure tilt change for square images
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loss not in ("gs", "softmax"):
            raise ValueError("loss must be 'gs' or 'softmax'")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be 'float64' or 'float32'")

    @property
    def target_order(self) -> int:
        return self.order if self.loss == "gs" else 0


def _quarter_turns(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    for i in range(len(x)):
        out[i] = np.rot90(x[i], k[i], axes=(0, 1))
    return out


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * (0.1 if epoch >= int(round(cfg.decay_at * cfg.epochs)) and cfg.decay_at < 1 else 1.0)


def train(images: np.ndarray, targets: np.ndarray, spec: NetworkSpec, cfg: TrainConfig,
          val_images=None, val_labels=None, init: Parameters | None = None):
    """SGD with momentum on uint8 images and per-sample target rows.

    The update uses the batch-mean gradient.  Returns ``(params, log)``
    where ``log`` holds one dict per epoch.
    """
    n = len(images)
    if n == 0:
        raise ValueError("no training images")
    if targets.shape != (n, spec.n_outputs):
        raise ValueError(f"targets must have shape {(n, spec.n_outputs)}")
    dtype = np.dtype(cfg.dtype)
    params = init.astype(dtype) if init is not None else init_params(spec, cfg.seed, dtype)
    vel = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    shuffle = np.random.default_rng([cfg.seed, 1])
    targets = targets.astype(dtype)
    train_labels = targets.argmax(axis=1)
    history = []
    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        order = shuffle.permutation(n)
        total, correct = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            x = preprocess(images[idx], dtype, spec)
            if cfg.rot90:
                x = _quarter_turns(x, shuffle.integers(4, size=len(idx)))
            value, grads, probs = loss_and_gradient(params, x, targets[idx], return_probs=True)
            if not np.isfinite(value):
                raise TrainingDivergence(f"loss became {value} at epoch {epoch}, batch starting {s}")
            total += value
            correct += int(np.sum(probs.argmax(axis=1) == train_labels[idx]))
            scale = 1.0 / len(idx)
            for k, g in grads.items():
                vel[k] *= cfg.momentum
                vel[k] -= lr * scale * g
                params.tensors[k] += vel[k]
        if not (params.is_finite() and np.isfinite(total)):
            raise TrainingDivergence(f"non-finite parameters after epoch {epoch}")
        biggest = max(float(np.abs(v).max()) for v in params.tensors.values())
        if biggest > MAX_WEIGHT:
            raise TrainingDivergence(f"weights reached {biggest:.3g} after epoch {epoch}")
        # running accuracy over the epoch's batches, measured before each update
        row = {"epoch": epoch + 1, "lr": lr, "loss": total / n, "train_accuracy": correct / n}
        if val_images is not None and len(val_images):
            vp, _ = predict(params, val_images)
            row["accuracy"] = float(np.mean(vp.argmax(axis=1) == np.asarray(val_labels)))
        else:
            row["accuracy"] = row["train_accuracy"]
        history.append(row)
        log.info("epoch %d loss %.4f train %.3f%s", row["epoch"], row["loss"], row["train_accuracy"],
                 f" held-out {row['accuracy']:.3f}" if val_images is not None else "")
    params.velocity = vel
    params.meta.update({"train_config": asdict(cfg)})
    return params, history


def train_on_manifest(manifest, cfg: TrainConfig, spec: NetworkSpec | None = None, val_manifest=None):
    """Train a viewpoint classifier on a dataset manifest."""
    from .viewsphere import SpherePixelization

    if len(manifest) == 0:
        raise ValueError("empty manifest")
    p = SpherePixelization(manifest.nside)
    images = manifest.load_images()
    if spec is None:
        spec = NetworkSpec(input_size=images.shape[1:], n_outputs=p.n_pixels)
    if spec.n_outputs != p.n_pixels:
        raise ValueError(f"network has {spec.n_outputs} outputs, pixelization has {p.n_pixels} labels")
    targets = p.soft_targets(manifest.labels, cfg.target_order, cfg.unit)
    val = (None, None) if val_manifest is None else (val_manifest.load_images(), val_manifest.labels)
    params, history = train(images, targets, spec, cfg, *val)
    params.meta.update({"kind": "viewpoint", "nside": p.nside, "config_hash": manifest.config_hash})
    return params, history


def train_category_classifier(datasets: dict, cfg: TrainConfig, spec: NetworkSpec | None = None,
                              val: dict | None = None):
    """Classifier over category names; ``datasets`` maps name -> uint8 images.

    Category indices follow the sorted names, so the result does not depend
    on dict order.
    """
    names = sorted(datasets)
    if len(names) < 2:
        raise ValueError("need at least two categories")
    images = np.concatenate([datasets[k] for k in names])
    labels = np.concatenate([np.full(len(datasets[k]), i) for i, k in enumerate(names)])
    if spec is None:
        spec = NetworkSpec(input_size=images.shape[1:], n_outputs=len(names))
    if spec.n_outputs != len(names):
        raise ValueError(f"network has {spec.n_outputs} outputs for {len(names)} categories")
    targets = np.eye(len(names))[labels]
    vi = vl = None
    if val:
        vi = np.concatenate([val[k] for k in names if k in val])
        vl = np.concatenate([np.full(len(val[k]), names.index(k)) for k in names if k in val])
    params, history = train(images, targets, spec, cfg, vi, vl)
    params.meta.update({"kind": "category", "categories": names})
    return params, history


# ---------------------------------------------------------------------------
# files


def save_checkpoint(path, params: Parameters) -> None:
    """Versioned binary: magic, version, JSON header (spec, meta, tensor table), f64 tensors.

    Tensor groups: ``param`` (trainable) and ``velocity`` (optimizer momentum).
    """
    groups = [("param", params.tensors)]
    if params.velocity is not None:
        groups.append(("velocity", params.velocity))
    table, payload = [], io.BytesIO()
    for group, tensors in groups:
        for name, arr in tensors.items():
            table.append({"group": group, "name": name, "shape": list(arr.shape)})
            payload.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = json.dumps({"spec": asdict(params.spec), "meta": params.meta, "tensors": table},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload.getvalue())


def load_checkpoint(path) -> Parameters:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    head = json.loads(data[16:16 + hlen])
    pos = 16 + hlen
    groups = {"param": {}, "velocity": {}}
    for entry in head["tensors"]:
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(entry["shape"])
        groups[entry["group"]][entry["name"]] = arr.astype(np.float64)
        pos += 8 * count
    if pos != len(data):
        raise ValueError(f"{path}: checkpoint size does not match its header")
    spec = NetworkSpec(**head["spec"])
    return Parameters(spec, groups["param"], groups["velocity"] or None, head["meta"])


def write_log(path, history: list) -> None:
    keys = ["epoch", "lr", "loss", "train_accuracy", "accuracy"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in keys[1:]])
