"""Identity-image galleries: synthetic generation, ingest, preprocessing.

Images are float64 arrays of shape (H, W, C) with values in [0, 1]. A
dataset maps identity labels to image lists; train/test galleries produced
by :func:`split_disjoint` never share an identity.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import pngio

__all__ = [
    "SynthParams",
    "IdentityDataset",
    "IngestReport",
    "DatasetError",
    "generate_synthetic",
    "load_directory",
    "preprocess",
    "split_disjoint",
]

TARGET_SIZE = 112
_ROLES = ("train", "test", "full")


class DatasetError(ValueError):
    """Invalid dataset parameters, layout, or image content."""


def _check_image(arr: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3:
        raise DatasetError(f"{what}: expected (H, W, C) image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
        raise DatasetError(f"{what}: degenerate image shape {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DatasetError(f"{what}: pixel values outside [0, 1]")
    return arr


@dataclass
class IdentityDataset:
    """Immutable-by-convention gallery mapping identity label to images.

    ``role`` is "train" or "test" once split; "full" before splitting.
    All images share one (H, W, C) shape.
    """

    entries: dict
    role: str

    def __post_init__(self):
        if self.role not in _ROLES:
            raise DatasetError(f"role must be one of {_ROLES}, got {self.role!r}")
        if not self.entries:
            raise DatasetError("dataset has no identities")
        shape = None
        for label, images in self.entries.items():
            if not images:
                raise DatasetError(f"identity {label!r} has no images")
            for i, img in enumerate(images):
                img = _check_image(img, f"identity {label!r} image {i}")
                images[i] = img
                if shape is None:
                    shape = img.shape
                elif img.shape != shape:
                    raise DatasetError(
                        f"identity {label!r} image {i}: shape {img.shape} != dataset shape {shape}"
                    )

    @property
    def labels(self) -> list:
        return sorted(self.entries)

    @property
    def identity_count(self) -> int:
        return len(self.entries)

    @property
    def image_count(self) -> int:
        return sum(len(v) for v in self.entries.values())

    @property
    def image_shape(self) -> tuple:
        first = self.entries[self.labels[0]][0]
        return first.shape

    def as_arrays(self) -> tuple:
        """Stack to (X, y, label_names) in sorted-label order.

        X is (N, H, W, C); y holds integer indices into label_names.
        """
        names = self.labels
        xs, ys = [], []
        for idx, label in enumerate(names):
            for img in self.entries[label]:
                xs.append(img)
                ys.append(idx)
        return np.stack(xs), np.asarray(ys, dtype=np.int64), names


@dataclass
class SynthParams:
    """Knobs for the synthetic identity generator.

    Each identity is a latent prototype rendered as a sum of oriented
    Gaussian blobs; per-image nuisances model pose/illumination/sensor
    variation at toy scale.
    """

    identity_count: int
    images_per_identity: int
    prototype_dim: int = 40
    feature_scale: float = 0.5
    shift_px: int = 2
    brightness_delta: float = 0.06
    noise_sigma: float = 0.02
    rng_seed: int = 0
    image_size: int = TARGET_SIZE
    channels: int = 1

    def validate(self) -> None:
        if self.identity_count < 1:
            raise DatasetError("identity_count must be positive")
        if self.images_per_identity < 1:
            raise DatasetError("images_per_identity must be positive")
        if self.prototype_dim < 10:
            raise DatasetError("prototype_dim must be at least 10 (tone map + one blob)")
        if not 0.0 < self.feature_scale <= 1.0:
            raise DatasetError("feature_scale must be in (0, 1]")
        if self.shift_px < 0:
            raise DatasetError("shift_px must be >= 0")
        if self.brightness_delta < 0:
            raise DatasetError("brightness_delta must be >= 0")
        if self.noise_sigma < 0:
            raise DatasetError("noise_sigma must be >= 0")
        if self.image_size < 8:
            raise DatasetError("image_size must be at least 8")
        if self.channels not in (1, 3):
            raise DatasetError("channels must be 1 or 3")


@dataclass
class IngestReport:
    """What :func:`load_directory` found besides the images themselves."""

    identities_loaded: int = 0
    images_loaded: int = 0
    empty_dirs_skipped: int = 0
    subdirs_ignored: int = 0
    files_ignored: int = 0
    warnings: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

def _render_prototype(z: np.ndarray, size: int, channels: int, scale: float) -> np.ndarray:
    """Deterministic smooth rendering of a latent code as blob sums.

    The first four latents set a per-identity tone map (mean level and
    contrast), the rest parameterize oriented Gaussian blobs, six latents
    each: center x/y, log-scales, orientation, amplitude. `scale` sets the
    peak-to-peak amplitude of the identity signal around mid-gray.
    """
    tone, rest = z[:4], z[4:]
    blobs = rest[: (len(rest) // 6) * 6].reshape(-1, 6)
    ys, xs = np.mgrid[0:size, 0:size]
    u = (xs + 0.5) / size
    v = (ys + 0.5) / size

    def unit(t):
        # probit-like squash: maps a standard normal to near-uniform (0, 1),
        # so layouts spread evenly instead of piling at the tanh rails
        return 1.0 / (1.0 + np.exp(-1.702 * t))

    contrast = scale * (1.0 + 0.3 * (2.0 * unit(tone[1]) - 1.0))
    field = np.zeros((size, size, channels))
    for bi, (z0, z1, z2, z3, z4, z5) in enumerate(blobs):
        cx = 0.12 + 0.76 * unit(z0)
        cy = 0.12 + 0.76 * unit(z1)
        sx = 0.045 + 0.09 * unit(z2)
        sy = 0.045 + 0.09 * unit(z3)
        theta = np.pi * unit(z4)
        amp = 2.0 * unit(z5) - 1.0
        ct, st = np.cos(theta), np.sin(theta)
        du, dv = u - cx, v - cy
        a = (du * ct + dv * st) / sx
        b = (-du * st + dv * ct) / sy
        bump = np.exp(-0.5 * (a * a + b * b))
        for c in range(channels):
            # spare tone latents tint the extra channels per identity
            tint = 1.0 if c == 0 else 0.6 + 0.4 * np.tanh(tone[2 + (c - 1) % 2] + 0.3 * bi)
            field[:, :, c] += amp * tint * bump
    # equalize per-identity contrast energy: without this, identities whose
    # blobs happen to cancel render faint and embed near the cloud center,
    # which makes them match far too many other identities
    rms = float(np.sqrt(np.mean(field * field)))
    if rms > 1e-9:
        field = field / rms
    return 0.5 + contrast * field


def generate_synthetic(params: SynthParams) -> IdentityDataset:
    """Render a deterministic gallery of synthetic identities.

    Identity i's prototype comes from the i-th child of the seed sequence,
    so galleries are reproducible bit for bit. Per-image nuisances (integer
    shift, brightness offset, Gaussian noise) come from the same stream.
    """
    params.validate()
    root = np.random.SeedSequence(params.rng_seed)
    children = root.spawn(params.identity_count)
    width = max(4, len(str(params.identity_count - 1)))

    entries = {}
    for i, child in enumerate(children):
        rng = np.random.Generator(np.random.PCG64(child))
        z = rng.standard_normal(params.prototype_dim)
        base = _render_prototype(z, params.image_size, params.channels, params.feature_scale)
        images = []
        for _ in range(params.images_per_identity):
            img = base
            if params.shift_px > 0:
                dy = int(rng.integers(-params.shift_px, params.shift_px + 1))
                dx = int(rng.integers(-params.shift_px, params.shift_px + 1))
                img = np.roll(img, (dy, dx), axis=(0, 1))
            if params.brightness_delta > 0:
                img = img + rng.uniform(-params.brightness_delta, params.brightness_delta)
            if params.noise_sigma > 0:
                img = img + rng.normal(0.0, params.noise_sigma, size=img.shape)
            images.append(np.clip(img, 0.0, 1.0))
        entries[f"id{i:0{width}d}"] = images
    return IdentityDataset(entries=entries, role="full")


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-centered sampling."""
    h, w = img.shape[:2]
    if h == out_h and w == out_w:
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def preprocess(raw: np.ndarray) -> np.ndarray:
    """Center-crop to square, resize to 112x112, scale to [0, 1].

    Accepts (H, W) or (H, W, C) arrays: uint8 and uint16 are divided by
    their type maximum; float input must already lie in [0, 1]. Grayscale
    input comes out as (112, 112, 1).
    """
    arr = np.asarray(raw)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DatasetError(f"preprocess: expected 2-d or 3-d image, got shape {arr.shape}")
    h, w, c = arr.shape
    if h < 8 or w < 8:
        raise DatasetError(f"preprocess: image {h}x{w} is below the 8x8 minimum")
    if c not in (1, 3):
        raise DatasetError(f"preprocess: expected 1 or 3 channels, got {c}")

    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    elif arr.dtype == np.uint16:
        arr = arr.astype(np.float64) / 65535.0
    else:
        arr = arr.astype(np.float64)
        if arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9:
            raise DatasetError("preprocess: float image values must lie in [0, 1]")

    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    arr = arr[top : top + side, left : left + side, :]
    arr = _bilinear_resize(arr, TARGET_SIZE, TARGET_SIZE)
    return np.clip(arr, 0.0, 1.0)


# ---------------------------------------------------------------------------
# directory ingest
# ---------------------------------------------------------------------------

def _decode_image(path: str) -> np.ndarray:
    try:
        img = pngio.read_png(path)
        return img
    except pngio.PngError:
        pass
    # fall back to Pillow for PNG features the small codec skips
    try:
        from PIL import Image

        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if ("A" in im.mode or "P" in im.mode or len(im.mode) > 1) else "L")
            return np.asarray(im)
    except Exception as exc:
        raise DatasetError(f"cannot decode image file {path}: {exc}") from None


def load_directory(path: str) -> tuple:
    """Ingest a `<root>/<label>/*.png` tree; returns (dataset, report).

    Every image is preprocessed to 112x112. Empty identity directories are
    skipped (counted in the report); unexpected nested directories and
    non-PNG files are ignored and counted.
    """
    if not os.path.isdir(path):
        raise DatasetError(f"not a directory: {path}")
    report = IngestReport()
    entries = {}
    for name in sorted(os.listdir(path)):
        sub = os.path.join(path, name)
        if not os.path.isdir(sub):
            report.files_ignored += 1
            continue
        images = []
        for fname in sorted(os.listdir(sub)):
            fpath = os.path.join(sub, fname)
            if os.path.isdir(fpath):
                report.subdirs_ignored += 1
                report.warnings.append(f"ignored nested directory {fpath}")
                continue
            if not fname.lower().endswith(".png"):
                report.files_ignored += 1
                continue
            images.append(preprocess(_decode_image(fpath)))
        if not images:
            report.empty_dirs_skipped += 1
            report.warnings.append(f"skipped identity directory with no PNG images: {sub}")
            continue
        entries[name] = images
    if not entries:
        raise DatasetError(f"no identities with images found under {path}")
    # mixed gray/RGB trees cannot form one dataset; surface the clash early
    shapes = {imgs[0].shape for imgs in entries.values()}
    if len(shapes) > 1:
        raise DatasetError(f"mixed image shapes after preprocessing: {sorted(shapes)}")
    report.identities_loaded = len(entries)
    report.images_loaded = sum(len(v) for v in entries.values())
    return IdentityDataset(entries=entries, role="full"), report


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def split_disjoint(dataset: IdentityDataset, train_fraction: float, seed: int) -> tuple:
    """Partition identities (never images) into train and test galleries.

    The identity list is shuffled with the given seed and cut at
    round(n * train_fraction). Either side coming out empty is an error.
    """
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError(f"train_fraction must be in (0, 1), got {train_fraction}")
    labels = dataset.labels
    n = len(labels)
    if n < 2:
        raise DatasetError("need at least 2 identities to split")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(n)
    n_train = int(np.floor(n * train_fraction + 0.5))
    if n_train < 1 or n_train >= n:
        raise DatasetError(
            f"train_fraction {train_fraction} leaves an empty side ({n_train}/{n - n_train})"
        )
    train_labels = {labels[i] for i in order[:n_train]}
    train = {lab: dataset.entries[lab] for lab in labels if lab in train_labels}
    test = {lab: dataset.entries[lab] for lab in labels if lab not in train_labels}
    return (
        IdentityDataset(entries=train, role="train"),
        IdentityDataset(entries=test, role="test"),
    )
