"""Dataset ingestion, augmentation pipelines, and augmentation-distance metrics.

Images are numpy arrays in [0,1], shape (N, H, W, C) for batches and (H, W, C)
for single images. All randomness flows through explicit numpy Generators so
every pipeline is reproducible from a seed. The simple ("base") pipeline is
zero-pad + random crop + horizontal flip; the complex pipeline applies one
randomly chosen two-op sub-policy before the base pipeline.
"""

import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy import ndimage

OP_VOCAB = (
    "shear-x", "shear-y", "rotate", "translate-x", "translate-y",
    "color", "posterize", "solarize", "brightness", "contrast",
    "sharpness", "autocontrast", "equalize", "invert",
)
# ops whose magnitude gets a random sign when applied
_SIGNED_OPS = {"shear-x", "shear-y", "rotate", "translate-x", "translate-y"}
_MAX_LEVEL = 10
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)
_SMOOTH_KERNEL = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0


class PolicyError(ValueError):
    """Malformed augmentation policy or unknown op name."""


class DataFormatError(ValueError):
    """Corrupt or mis-sized dataset file."""


@dataclass(frozen=True)
class ImageBatch:
    """Pixel batch (N, H, W, C) in [0,1] with integer class labels."""

    pixels: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise DataFormatError(f"pixels must be (N,H,W,C), got shape {self.pixels.shape}")
        if self.labels.shape != (self.pixels.shape[0],):
            raise DataFormatError("labels must align with the batch dimension")
        lo, hi = float(self.pixels.min(initial=0.0)), float(self.pixels.max(initial=0.0))
        if lo < 0.0 or hi > 1.0:
            raise DataFormatError(f"pixels outside [0,1]: range [{lo}, {hi}]")

    def __len__(self):
        return self.pixels.shape[0]

    def take(self, indices) -> "ImageBatch":
        return ImageBatch(self.pixels[indices], self.labels[indices])


@dataclass(frozen=True)
class TaggedViewBatch:
    """Augmented views of one source batch, each tagged base or complex."""

    views: tuple
    source_indices: np.ndarray

    def __post_init__(self):
        tags = [tag for _, tag in self.views]
        if tags.count("base") != 1 or tags[0] != "base":
            raise PolicyError("exactly one base view is required, first in the list")
        if any(tag not in ("base", "complex") for tag in tags):
            raise PolicyError(f"unknown view tag in {tags}")
        shapes = {batch.pixels.shape for batch, _ in self.views}
        if len(shapes) != 1:
            raise PolicyError(f"views disagree on shape: {shapes}")

    @property
    def num_complex(self) -> int:
        return len(self.views) - 1


@dataclass(frozen=True)
class AugmentPolicy:
    """25 sub-policies of two (op, probability, level) steps each."""

    sub_policies: tuple

    def __post_init__(self):
        for sub in self.sub_policies:
            if len(sub) != 2:
                raise PolicyError(f"each sub-policy needs exactly two ops, got {len(sub)}")
            for op, prob, level in sub:
                if op not in OP_VOCAB:
                    raise PolicyError(f"unknown op {op!r}")
                if not 0.0 <= prob <= 1.0:
                    raise PolicyError(f"probability out of range for {op}: {prob}")
                if not 0 <= level < _MAX_LEVEL:
                    raise PolicyError(f"level out of range for {op}: {level}")

    @classmethod
    def parse(cls, text: str) -> "AugmentPolicy":
        subs = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("|")
            if len(parts) != 2:
                raise PolicyError(f"sub-policy line needs two ops separated by '|': {line!r}")
            ops = []
            for part in parts:
                fields = part.split()
                if len(fields) != 3:
                    raise PolicyError(f"op entry needs 'name prob level': {part!r}")
                ops.append((fields[0], float(fields[1]), int(fields[2])))
            subs.append(tuple(ops))
        return cls(tuple(subs))

    @classmethod
    def from_file(cls, path) -> "AugmentPolicy":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def render(self) -> str:
        lines = []
        for sub in self.sub_policies:
            lines.append(" | ".join(f"{op} {prob} {level}" for op, prob, level in sub))
        return "\n".join(lines) + "\n"


def default_policy() -> AugmentPolicy:
    """The bundled 25-sub-policy table tuned for CIFAR-10."""
    text = resources.files("dajat").joinpath("policies/cifar10.txt").read_text("utf-8")
    return AugmentPolicy.parse(text)


# ---------------------------------------------------------------------------
# per-image ops


def _affine(image: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        out[:, :, c] = ndimage.affine_transform(
            image[:, :, c], matrix, offset=offset, order=1, mode="constant", cval=0.0)
    return out


def _shear(image, amount, axis):
    h, w, _ = image.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    matrix = np.eye(2)
    if axis == "x":  # columns shift proportionally to the row index
        matrix[1, 0] = -amount
    else:
        matrix[0, 1] = -amount
    offset = center - matrix @ center
    return _affine(image, matrix, offset)


def _rotate(image, degrees):
    h, w, _ = image.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    theta = math.radians(degrees)
    matrix = np.array([[math.cos(theta), math.sin(theta)],
                       [-math.sin(theta), math.cos(theta)]])
    offset = center - matrix @ center
    return _affine(image, matrix, offset)


def _translate(image, pixels, axis):
    offset = np.array([0.0, -pixels]) if axis == "x" else np.array([-pixels, 0.0])
    return _affine(image, np.eye(2), offset)


def _luma(image):
    if image.shape[2] == 3:
        return image.astype(np.float64) @ _LUMA
    return image.astype(np.float64).mean(axis=2)


def _blend(degenerate, image, factor):
    return (degenerate + factor * (image.astype(np.float64) - degenerate)).astype(image.dtype)


def _quantize(image):
    return np.clip(np.floor(image.astype(np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _op_color(image, factor):
    gray = _luma(image)[:, :, None]
    return _blend(gray, image, factor)


def _op_contrast(image, factor):
    mean = float(_luma(image).mean())
    return _blend(mean, image, factor)


def _op_brightness(image, factor):
    return _blend(0.0, image, factor)


def _op_sharpness(image, factor):
    smooth = np.empty_like(image, dtype=np.float64)
    for c in range(image.shape[2]):
        smooth[:, :, c] = ndimage.convolve(image[:, :, c].astype(np.float64),
                                           _SMOOTH_KERNEL, mode="nearest")
    return _blend(smooth, image, factor)


def _op_posterize(image, bits):
    q = _quantize(image)
    mask = 0xFF & (0xFF << (8 - bits))
    return ((q & mask) / 255.0).astype(image.dtype)


def _op_solarize(image, threshold):
    return np.where(image >= threshold, 1.0 - image, image).astype(image.dtype)


def _op_autocontrast(image):
    out = image.astype(np.float64).copy()
    for c in range(image.shape[2]):
        lo, hi = out[:, :, c].min(), out[:, :, c].max()
        if hi > lo:
            out[:, :, c] = (out[:, :, c] - lo) / (hi - lo)
    return out.astype(image.dtype)


def _op_equalize(image):
    q = _quantize(image)
    out = np.empty_like(q)
    for c in range(image.shape[2]):
        hist = np.bincount(q[:, :, c].ravel(), minlength=256)
        nonzero = hist[hist > 0]
        if nonzero.size <= 1:
            out[:, :, c] = q[:, :, c]
            continue
        step = (int(hist.sum()) - int(nonzero[-1])) // 255
        if step == 0:
            out[:, :, c] = q[:, :, c]
            continue
        n = step // 2 + np.concatenate(([0], np.cumsum(hist)[:-1]))
        lut = np.clip(n // step, 0, 255).astype(np.uint8)
        out[:, :, c] = lut[q[:, :, c]]
    return (out / 255.0).astype(image.dtype)


def apply_op(image: np.ndarray, op: str, level: int, rng: np.random.Generator) -> np.ndarray:
    """Apply one named op at the given level; signed ops draw their sign from rng."""
    if op not in OP_VOCAB:
        raise PolicyError(f"unknown op {op!r}")
    if not 0 <= level <= _MAX_LEVEL:
        raise PolicyError(f"level out of range for {op}: {level}")
    frac = level / _MAX_LEVEL
    sign = 1.0
    if op in _SIGNED_OPS:
        sign = 1.0 if rng.random() < 0.5 else -1.0
    if op == "shear-x":
        out = _shear(image, sign * frac * 0.3, "x")
    elif op == "shear-y":
        out = _shear(image, sign * frac * 0.3, "y")
    elif op == "rotate":
        out = _rotate(image, sign * frac * 30.0)
    elif op == "translate-x":
        out = _translate(image, sign * frac * (150.0 / 331.0) * image.shape[1], "x")
    elif op == "translate-y":
        out = _translate(image, sign * frac * (150.0 / 331.0) * image.shape[0], "y")
    elif op == "color":
        out = _op_color(image, 0.1 + 1.8 * frac)
    elif op == "contrast":
        out = _op_contrast(image, 0.1 + 1.8 * frac)
    elif op == "brightness":
        out = _op_brightness(image, 0.1 + 1.8 * frac)
    elif op == "sharpness":
        out = _op_sharpness(image, 0.1 + 1.8 * frac)
    elif op == "posterize":
        out = _op_posterize(image, 8 - int(round(frac * 4)))
    elif op == "solarize":
        # threshold slides from just above 1.0 (identity) down to 0 (full invert)
        out = _op_solarize(image, (1.0 - frac) * 256.0 / 255.0)
    elif op == "autocontrast":
        out = _op_autocontrast(image)
    elif op == "equalize":
        out = _op_equalize(image)
    else:  # invert
        out = 1.0 - image
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def apply_policy(image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """One uniformly chosen sub-policy; each op fires independently with its probability."""
    idx = int(rng.integers(len(policy.sub_policies)))
    out = image
    for op, prob, level in policy.sub_policies[idx]:
        if rng.random() < prob:
            out = apply_op(out, op, level, rng)
    return out


# ---------------------------------------------------------------------------
# batch pipelines


def hflip(pixels: np.ndarray) -> np.ndarray:
    """Horizontal flip along the width axis (works for HWC and NHWC)."""
    return np.flip(pixels, axis=-2).copy()


def base_augment(batch: ImageBatch, pad: int, rng: np.random.Generator,
                 flip_prob: float = 0.5) -> ImageBatch:
    """Zero-pad, random crop back to size, flip horizontally with flip_prob."""
    if pad < 0:
        raise PolicyError(f"pad must be >= 0, got {pad}")
    n, h, w, c = batch.pixels.shape
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < flip_prob
    if pad > 0:
        canvas = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=batch.pixels.dtype)
        canvas[:, pad:pad + h, pad:pad + w, :] = batch.pixels
        out = np.empty_like(batch.pixels)
        for i in range(n):
            r, col = offsets[i]
            out[i] = canvas[i, r:r + h, col:col + w, :]
    else:
        out = batch.pixels.copy()
    if flips.any():
        out[flips] = hflip(out[flips])
    return ImageBatch(out, batch.labels.copy())


def policy_augment(batch: ImageBatch, policy: AugmentPolicy, rng: np.random.Generator) -> ImageBatch:
    out = np.stack([apply_policy(batch.pixels[i], policy, rng) for i in range(len(batch))])
    return ImageBatch(out, batch.labels.copy())


def make_views(batch: ImageBatch, T: int, policy: AugmentPolicy | None, pad: int,
               rng: np.random.Generator) -> TaggedViewBatch:
    """View 0: base pipeline. Views 1..T: sub-policy augmentation, then base pipeline."""
    if T < 0:
        raise PolicyError(f"view count must be >= 0, got {T}")
    if T > 0 and policy is None:
        raise PolicyError("complex views need an augmentation policy")
    views = [(base_augment(batch, pad, rng), "base")]
    for _ in range(T):
        views.append((base_augment(policy_augment(batch, policy, rng), pad, rng), "complex"))
    return TaggedViewBatch(tuple(views), np.arange(len(batch)))


# ---------------------------------------------------------------------------
# augmentation distances


def _channel_histograms(image: np.ndarray) -> np.ndarray:
    img = image if image.ndim == 3 else image[:, :, None]
    bins = np.minimum((img.astype(np.float64) * 256.0).astype(np.int64), 255)
    return np.stack([np.bincount(bins[:, :, c].ravel(), minlength=256)
                     for c in range(img.shape[2])]).astype(np.float64)


def histogram_mse(x1: np.ndarray, x2: np.ndarray) -> float:
    """Mean squared difference of per-channel 256-bin count histograms."""
    h1, h2 = _channel_histograms(x1), _channel_histograms(x2)
    if h1.shape != h2.shape:
        raise DataFormatError("channel count mismatch between images")
    return float(np.mean((h1 - h2) ** 2))


def patch_mse(x1: np.ndarray, x2: np.ndarray, patch: int = 8) -> float:
    """For each patch of x1, min MSE over all patches of x2 and of hflip(x2), averaged.

    Asymmetric in its arguments by construction.
    """
    if x1.ndim != 3 or x2.ndim != 3:
        raise DataFormatError("patch distance expects single HWC images")
    if min(x1.shape[0], x1.shape[1], x2.shape[0], x2.shape[1]) < patch:
        raise DataFormatError(f"images must be at least {patch}x{patch}")

    def patches(img):
        win = np.lib.stride_tricks.sliding_window_view(img, (patch, patch), axis=(0, 1))
        return win.reshape(-1, img.shape[2] * patch * patch).astype(np.float64)

    a = patches(x1)
    b = np.concatenate([patches(x2), patches(hflip(x2))])
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    np.maximum(sq, 0.0, out=sq)
    return float((sq.min(axis=1) / a.shape[1]).mean())


# ---------------------------------------------------------------------------
# dataset io


RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
NUM_CLASSES = 10


def load_cifar10_binary(path) -> ImageBatch:
    """Read a binary batch file: per record, 1 label byte then channel-planar RGB."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % RECORD_BYTES != 0:
        raise DataFormatError(
            f"{path}: length {len(raw)} is not a positive multiple of {RECORD_BYTES}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) >= NUM_CLASSES:
        raise DataFormatError(f"{path}: label {labels.max()} out of range")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return ImageBatch((pixels / 255.0).astype(np.float32), labels)


def write_cifar10_binary(batch: ImageBatch, path) -> None:
    """Inverse of load_cifar10_binary; pixels are rounded to 8-bit."""
    n, h, w, c = batch.pixels.shape
    if (h, w, c) != (32, 32, 3):
        raise DataFormatError(f"binary format requires 32x32x3 images, got {(h, w, c)}")
    planar = np.clip(np.round(batch.pixels * 255.0), 0, 255).astype(np.uint8)
    planar = planar.transpose(0, 3, 1, 2).reshape(n, 3072)
    records = np.concatenate([batch.labels.astype(np.uint8)[:, None], planar], axis=1)
    with open(path, "wb") as fh:
        fh.write(records.tobytes())


def load_cifar10_dir(path) -> ImageBatch:
    """Concatenate every *.bin file under a directory, sorted by name."""
    import pathlib

    files = sorted(pathlib.Path(path).glob("*.bin"))
    if not files:
        raise DataFormatError(f"no .bin files under {path}")
    batches = [load_cifar10_binary(f) for f in files]
    return ImageBatch(np.concatenate([b.pixels for b in batches]),
                      np.concatenate([b.labels for b in batches]))


def synth_dataset(n: int, K: int, seed: int, noise: float = 0.08, size: int = 32) -> ImageBatch:
    """Class-coded colored disks on gray background, jittered, with pixel noise.

    Classes are balanced round-robin (within 1). Each class owns a color anchor
    and a disk radius, so labels survive both geometric and color augmentation.
    With noise=0 the images are exact class templates up to position, which a
    linear classifier separates.
    """
    if n < K:
        raise DataFormatError(f"need at least one sample per class, n={n} < K={K}")
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) % K).astype(np.int64)
    hues = np.arange(K) / K
    palette = 0.5 + 0.45 * np.stack([np.cos(2 * np.pi * hues),
                                     np.cos(2 * np.pi * hues + 2 * np.pi / 3),
                                     np.cos(2 * np.pi * hues + 4 * np.pi / 3)], axis=1)
    radii = 5.0 + (6.0 * np.arange(K) / max(K - 1, 1))
    yy, xx = np.mgrid[0:size, 0:size]
    pixels = np.empty((n, size, size, 3), dtype=np.float32)
    for i in range(n):
        k = labels[i]
        cy, cx = size / 2 + rng.integers(-4, 5, size=2)
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        weight = np.clip(radii[k] + 0.5 - dist, 0.0, 1.0)[:, :, None]
        img = 0.5 * (1.0 - weight) + palette[k] * weight
        if noise > 0:
            img = img + noise * rng.standard_normal(img.shape)
        pixels[i] = img
    return ImageBatch(np.clip(pixels, 0.0, 1.0), labels)
