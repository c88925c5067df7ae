"""Dataset loading, synthesis, splitting, caching and augmentation.

Feature values live in [0, 1] nominally (poisoned variants may leave the
range when clamping is off). Images are flattened row-major in
height x width x channel order; ``shape_hint`` records the geometry.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import FormatError, UsageError
from .numerics import Rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CACHE_MAGIC = b"UDPD"
CACHE_VERSION = 1
CIFAR_RECORD = 3073  # 1 label byte + 32*32*3 pixels, channel-planar


@dataclass
class Dataset:
    """A labeled feature matrix plus class count and optional image geometry."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    shape_hint: tuple[int, int, int] | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise UsageError("features must be (N, d)")
        if self.labels.shape != (self.features.shape[0],):
            raise UsageError("labels length must match feature rows")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise UsageError("labels must lie in [0, num_classes)")
        if self.shape_hint is not None:
            h, w, c = self.shape_hint
            if h * w * c != self.features.shape[1]:
                raise UsageError(
                    f"shape_hint {self.shape_hint} does not match d={self.features.shape[1]}")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        return replace(self, features=self.features[indices],
                       labels=self.labels[indices])

    def with_features(self, features: np.ndarray) -> "Dataset":
        return replace(self, features=features)


@dataclass(frozen=True)
class Split:
    """Deterministic train/validation index partition."""

    train_indices: np.ndarray
    val_indices: np.ndarray
    seed: int


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------


def _read_exact(f, n: int, what: str, offset: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes at offset "
                          f"{offset}, got {len(buf)}")
    return buf


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Load an IDX image/label file pair (big-endian headers, byte pixels)."""
    with open(images_path, "rb") as f:
        head = _read_exact(f, 16, "image header", 0)
        magic, n, rows, cols = struct.unpack(">IIII", head)
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(f"bad image magic 0x{magic:08x}, "
                              f"expected 0x{IDX_IMAGE_MAGIC:08x}")
        raw = _read_exact(f, n * rows * cols, "image data", 16)
        if f.read(1):
            raise FormatError("trailing bytes after image data")
    with open(labels_path, "rb") as f:
        head = _read_exact(f, 8, "label header", 0)
        magic, n_labels = struct.unpack(">II", head)
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(f"bad label magic 0x{magic:08x}, "
                              f"expected 0x{IDX_LABEL_MAGIC:08x}")
        label_raw = _read_exact(f, n_labels, "label data", 8)
    if n != n_labels:
        raise FormatError(f"image count {n} != label count {n_labels}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows * cols)
    labels = np.frombuffer(label_raw, dtype=np.uint8).astype(np.int64)
    num_classes = int(labels.max()) + 1 if n else 0
    return Dataset(pixels.astype(np.float64) / 255.0, labels, num_classes,
                   shape_hint=(rows, cols, 1))


def load_cifar_binary(batch_paths) -> Dataset:
    """Load CIFAR-style binary batches (3073-byte records, RGB planes)."""
    paths = list(batch_paths)
    if not paths:
        raise UsageError("no batch paths given")
    feats, labels = [], []
    for path in paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) % CIFAR_RECORD != 0:
            raise FormatError(f"{path}: size {len(raw)} is not a multiple of "
                              f"{CIFAR_RECORD}-byte records")
        n = len(raw) // CIFAR_RECORD
        if n != 10000:
            raise FormatError(f"{path}: expected 10000 records, found {n}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        # stored as channel planes, rearrange to row-major HWC
        chw = rec[:, 1:].reshape(n, 3, 32, 32)
        hwc = np.transpose(chw, (0, 2, 3, 1)).reshape(n, 32 * 32 * 3)
        feats.append(hwc.astype(np.float64) / 255.0)
    features = np.concatenate(feats)
    labels = np.concatenate(labels)
    return Dataset(features, labels, int(labels.max()) + 1,
                   shape_hint=(32, 32, 3))


def save_cache(path: str, ds: Dataset) -> None:
    """Write the flat little-endian dataset cache container."""
    if ds.num_classes > 0xFFFF:
        raise UsageError("cache stores labels as u16")
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<III", CACHE_VERSION, len(ds), ds.dim))
        f.write(ds.labels.astype("<u2").tobytes())
        f.write(ds.features.astype("<f4").tobytes())


def load_cache(path: str) -> Dataset:
    """Read a dataset cache container written by :func:`save_cache`."""
    with open(path, "rb") as f:
        head = _read_exact(f, 16, "cache header", 0)
        magic, version, n, d = struct.unpack("<4sIII", head)
        if magic != CACHE_MAGIC:
            raise FormatError(f"bad cache magic {magic!r}")
        if version != CACHE_VERSION:
            raise FormatError(f"unsupported cache version {version}")
        labels = np.frombuffer(_read_exact(f, 2 * n, "labels", 16), dtype="<u2")
        feats = np.frombuffer(_read_exact(f, 4 * n * d, "features", 16 + 2 * n),
                              dtype="<f4").reshape(n, d)
        if f.read(1):
            raise FormatError("trailing bytes after cache payload")
    labels = labels.astype(np.int64)
    num_classes = int(labels.max()) + 1 if n else 0
    hint = _guess_shape_hint(d)
    return Dataset(feats.astype(np.float64), labels, num_classes, shape_hint=hint)


def _guess_shape_hint(d: int) -> tuple[int, int, int] | None:
    # the cache header has no room for geometry; recover the common cases
    for h, w, c in ((32, 32, 3), (28, 28, 1)):
        if h * w * c == d:
            return (h, w, c)
    root = round(d ** 0.5)
    if root * root == d:
        return (root, root, 1)
    if d % 3 == 0:
        root = round((d // 3) ** 0.5)
        if root * root * 3 == d:
            return (root, root, 3)
    return None


# ---------------------------------------------------------------------------
# Synthetic sources
# ---------------------------------------------------------------------------


def synth_uniform(rng: Rng, n: int, d: int, c: int) -> Dataset:
    """I.i.d. uniform features on [0,1]^d with uniform random labels.

    Labels carry no information about features, so the result is the
    canonical non-separable substrate for separability experiments.
    """
    if min(n, d, c) < 1:
        raise UsageError("n, d and c must all be >= 1")
    g = rng.generator()
    features = g.random((n, d))
    labels = g.integers(0, c, size=n)
    return Dataset(features, labels, c)


def synth_patterns(rng: Rng, n: int, side: int, channels: int, c: int,
                   amplitude: float = 0.35, noise: float = 0.12) -> Dataset:
    """Learnable synthetic image task: smooth per-class templates plus noise.

    Each class gets a fixed low-frequency template (sum of a few random 2-D
    cosine modes) scaled to ``amplitude``; samples are template + pixel
    noise around mid-gray, clamped to [0,1]. The low-frequency structure
    survives crops and resizes, which matters for augmentation studies.
    """
    if min(n, side, channels, c) < 1:
        raise UsageError("n, side, channels and c must all be >= 1")
    d = side * side * channels
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    templates = np.zeros((c, side, side, channels))
    for k in range(c):
        g = rng.split("template", k).generator()
        img = np.zeros((side, side))
        for _ in range(3):
            fy, fx = g.uniform(0.5, 1.5, size=2)
            phase_y, phase_x = g.uniform(0, 2 * np.pi, size=2)
            img += np.cos(2 * np.pi * fy * yy / side + phase_y) \
                 * np.cos(2 * np.pi * fx * xx / side + phase_x)
        img = img / np.max(np.abs(img)) * amplitude
        scale = g.uniform(0.6, 1.0, size=channels)
        templates[k] = img[:, :, None] * scale[None, None, :]

    g = rng.split("samples").generator()
    labels = g.integers(0, c, size=n)
    base = 0.5 + templates[labels].reshape(n, d)
    base += g.normal(0.0, noise, size=(n, d))
    return Dataset(np.clip(base, 0.0, 1.0), labels, c,
                   shape_hint=(side, side, channels))


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def split(ds: Dataset, val_fraction: float, seed: int) -> Split:
    """Stratified train/validation split, deterministic in ``seed``."""
    if not (0.0 < val_fraction < 1.0):
        raise UsageError("val_fraction must be in (0, 1)")
    g = Rng(seed, ("split",)).generator()
    n = len(ds)
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    stratify = np.all(counts[counts > 0] >= 2)
    if not stratify:
        warnings.warn("a class has fewer than 2 samples; "
                      "falling back to an unstratified split")
        perm = g.permutation(n)
        n_val = int(round(val_fraction * n))
        return Split(np.sort(perm[n_val:]), np.sort(perm[:n_val]), seed)

    val_parts, train_parts = [], []
    # exact global validation size, spread across classes by largest remainder
    n_val_total = int(np.floor(val_fraction * n))
    quotas = np.floor(val_fraction * counts).astype(int)
    remainders = val_fraction * counts - quotas
    missing = n_val_total - quotas.sum()
    if missing > 0:
        for cls in np.argsort(-remainders)[:missing]:
            quotas[cls] += 1
    for cls in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == cls)
        if idx.size == 0:
            continue
        perm = idx[g.permutation(idx.size)]
        k = min(quotas[cls], idx.size - 1)
        val_parts.append(perm[:k])
        train_parts.append(perm[k:])
    return Split(np.sort(np.concatenate(train_parts)),
                 np.sort(np.concatenate(val_parts)), seed)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    """Ordered list of augmentation ops, each a (name, params) pair.

    Supported ops: random-crop(pad), horizontal-flip(p),
    random-resized-crop(scale), color-jitter(brightness, contrast,
    saturation), random-grayscale(p), cutout(size).
    """

    ops: tuple = ()
    strength: float = 0.0

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(ops=(), strength=0.0)

    @classmethod
    def basic(cls, pad: int = 4, flip_p: float = 0.5) -> "AugmentPolicy":
        """The ordinary recipe: padded random crop plus horizontal flip."""
        return cls(ops=(("random-crop", {"pad": pad}),
                        ("horizontal-flip", {"p": flip_p})), strength=0.0)

    @classmethod
    def contrastive(cls, strength: float = 1.0) -> "AugmentPolicy":
        """The strong recipe, interpolated by strength s in [0, 1].

        s=0 keeps only a mild random-resized-crop plus flip; s=1 is the
        full contrastive-learning set with color jitter and grayscale.
        Jitter magnitudes and the crop scale floor move linearly with s.
        """
        s = float(strength)
        if not (0.0 <= s <= 1.0):
            raise UsageError("strength must lie in [0, 1]")
        scale_lo = 0.2 + 0.6 * (1.0 - s)
        ops = [("random-resized-crop", {"scale": (scale_lo, 1.0)}),
               ("horizontal-flip", {"p": 0.5})]
        if s > 0.0:
            ops.append(("color-jitter", {"brightness": 0.4 * s,
                                         "contrast": 0.4 * s,
                                         "saturation": 0.4 * s}))
            ops.append(("random-grayscale", {"p": 0.2 * s}))
        return cls(ops=tuple(ops), strength=s)


_SPATIAL_OPS = {"random-crop", "random-resized-crop", "cutout",
                "horizontal-flip"}


def augment(features: np.ndarray, shape_hint, policy: AugmentPolicy,
            rng: Rng) -> np.ndarray:
    """Apply the policy independently per sample; output clamped to [0,1].

    Labels are untouched by construction (this transforms features only).
    Per-sample substreams keyed by row index make the result independent
    of batching.
    """
    x = np.asarray(features, dtype=np.float64)
    if not policy.ops:
        return x.copy()
    needs_shape = any(name in _SPATIAL_OPS for name, _ in policy.ops)
    if needs_shape and shape_hint is None:
        raise UsageError("spatial augmentation requires a shape_hint")
    n = x.shape[0]
    out = np.empty_like(x)
    for i in range(n):
        g = rng.split("sample", i).generator()
        img = x[i].reshape(shape_hint) if shape_hint is not None else x[i]
        for name, params in policy.ops:
            img = _APPLY[name](img, params, g)
        out[i] = img.reshape(-1)
    return np.clip(out, 0.0, 1.0)


def _op_random_crop(img, params, g):
    pad = int(params["pad"])
    if pad == 0:
        return img
    h, w, c = img.shape
    padded = np.zeros((h + 2 * pad, w + 2 * pad, c))
    padded[pad:pad + h, pad:pad + w] = img
    top = int(g.integers(0, 2 * pad + 1))
    left = int(g.integers(0, 2 * pad + 1))
    return padded[top:top + h, left:left + w]


def _op_horizontal_flip(img, params, g):
    if g.random() < params["p"]:
        return img[:, ::-1]
    return img


def _bilinear_resize(img, out_h, out_w):
    h, w, c = img.shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def _op_random_resized_crop(img, params, g):
    lo, hi = params["scale"]
    h, w, _ = img.shape
    if lo >= 1.0 and hi >= 1.0:
        return img
    area = g.uniform(lo, hi)
    side_frac = np.sqrt(area)
    ch = max(1, int(round(side_frac * h)))
    cw = max(1, int(round(side_frac * w)))
    top = int(g.integers(0, h - ch + 1))
    left = int(g.integers(0, w - cw + 1))
    crop = img[top:top + ch, left:left + cw]
    if (ch, cw) == (h, w):
        return crop
    return _bilinear_resize(crop, h, w)


def _op_color_jitter(img, params, g):
    out = img
    b = params.get("brightness", 0.0)
    if b > 0:
        out = out * g.uniform(1.0 - b, 1.0 + b)
    k = params.get("contrast", 0.0)
    if k > 0:
        mean = out.mean()
        out = mean + (out - mean) * g.uniform(1.0 - k, 1.0 + k)
    s = params.get("saturation", 0.0)
    if s > 0 and img.shape[2] > 1:
        luma = out.mean(axis=2, keepdims=True)
        out = luma + (out - luma) * g.uniform(1.0 - s, 1.0 + s)
    return out


def _op_random_grayscale(img, params, g):
    if img.shape[2] > 1 and g.random() < params["p"]:
        luma = img.mean(axis=2, keepdims=True)
        return np.repeat(luma, img.shape[2], axis=2)
    return img


def _op_cutout(img, params, g):
    size = int(params["size"])
    h, w, _ = img.shape
    if size <= 0:
        return img
    if size > min(h, w):
        raise UsageError(f"cutout size {size} exceeds image side")
    top = int(g.integers(0, h - size + 1))
    left = int(g.integers(0, w - size + 1))
    out = img.copy()
    out[top:top + size, left:left + size, :] = 0.0
    return out


_APPLY = {
    "random-crop": _op_random_crop,
    "horizontal-flip": _op_horizontal_flip,
    "random-resized-crop": _op_random_resized_crop,
    "color-jitter": _op_color_jitter,
    "random-grayscale": _op_random_grayscale,
    "cutout": _op_cutout,
}
