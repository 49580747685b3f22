"""Datasets: the 2-D star-polygon toy task, synthetic shape images, CIFAR-10 binary files."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry import Polygon

from .errors import ConfigError, FormatError

# 5-point star, outer radius 3 and inner radius 1.35 before scaling
STAR_POINTS = 5
STAR_OUTER = 3.0
STAR_INNER = 1.35
CIFAR_RECORD = 3073
SHAPES = ("circle", "square", "triangle", "cross")


def star_polygon(scale: float = 0.5) -> Polygon:
    angles = np.pi / 2 + np.arange(2 * STAR_POINTS) * np.pi / STAR_POINTS
    radii = np.where(np.arange(2 * STAR_POINTS) % 2 == 0, STAR_OUTER, STAR_INNER) * scale
    return Polygon(np.c_[radii * np.cos(angles), radii * np.sin(angles)])


@dataclass(frozen=True)
class ToyDatasetSpec:
    n_samples: int = 500
    scale: float = 0.5
    noise_std: float = 0.2
    band: float = 0.1
    n_train: int = 250
    extent: float = 2.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.n_train < self.n_samples:
            raise ConfigError("n_train must lie strictly between 0 and n_samples")
        if self.noise_std < 0 or self.band < 0 or self.scale <= 0:
            raise ConfigError("scale must be positive; noise_std and band nonnegative")


@dataclass
class ToyDataset:
    X: np.ndarray
    y: np.ndarray
    in_band: np.ndarray
    n_train: int

    @property
    def train(self):
        return self.X[:self.n_train], self.y[:self.n_train]

    @property
    def test(self):
        return self.X[self.n_train:], self.y[self.n_train:]


def gen_toy_dataset(spec: ToyDatasetSpec = ToyDatasetSpec()) -> ToyDataset:
    """Half the nominal points inside the star (label 1), half outside it in the
    square [-extent, extent]^2 (label 0). Points within ``band`` of the boundary
    get a fair-coin label; then coordinates get Gaussian noise."""
    rng = np.random.default_rng(spec.seed)
    poly = star_polygon(spec.scale)
    n_in = spec.n_samples // 2
    pts, labels = [], []
    for want, inside in ((n_in, True), (spec.n_samples - n_in, False)):
        got = np.empty((0, 2))
        while len(got) < want:
            lim = spec.scale * STAR_OUTER if inside else spec.extent
            cand = rng.uniform(-lim, lim, size=(4 * want, 2))
            mask = shapely.contains_xy(poly, cand[:, 0], cand[:, 1])
            got = np.vstack([got, cand[mask == inside]])
        pts.append(got[:want])
        labels.append(np.full(want, 1 if inside else 0))
    X = np.vstack(pts)
    y = np.concatenate(labels)
    order = rng.permutation(spec.n_samples)
    X, y = X[order], y[order]
    dist = shapely.distance(poly.exterior, shapely.points(X))
    in_band = dist < spec.band
    y = np.where(in_band, rng.integers(0, 2, size=spec.n_samples), y)
    X = X + rng.normal(0.0, spec.noise_std, size=X.shape) if spec.noise_std > 0 else X
    return ToyDataset(X, y.astype(np.int64), in_band, spec.n_train)


# ---- synthetic shape images -----------------------------------------------------------
@dataclass(frozen=True)
class SyntheticImageSpec:
    per_class: int = 100
    size: int = 32
    position_jitter: float = 3.0  # max center offset in pixels
    scale_jitter: float = 0.2  # relative size in [1 - j, 1 + j]
    color_jitter: float = 0.3  # per-channel spread around the base colors
    seed: int = 0


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float, supersample: int = 4):
    """Anti-aliased coverage of the shape on a size x size grid."""
    s = supersample
    coords = (np.arange(size * s) + 0.5) / s
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        inside = dy ** 2 + dx ** 2 <= r ** 2
    elif kind == "square":
        inside = (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    elif kind == "triangle":
        # equilateral, apex at dy = -r, base at dy = 0.7 r
        inside = (dy <= 0.7 * r) & (np.abs(dx) <= (dy + r) / np.sqrt(3.0))
    elif kind == "cross":
        arm = 0.3 * r
        inside = ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    else:
        raise ConfigError(f"unknown shape {kind!r}")
    return inside.reshape(size, s, size, s).mean(axis=(1, 3))


def gen_synthetic_images(spec: SyntheticImageSpec = SyntheticImageSpec()):
    """Balanced (images, labels): one shape per image on a dark background, shuffled."""
    rng = np.random.default_rng(spec.seed)
    size = spec.size
    fg_base = np.array([0.85, 0.75, 0.55])
    bg_base = np.array([0.15, 0.2, 0.3])
    images, labels = [], []
    for label, kind in enumerate(SHAPES):
        for _ in range(spec.per_class):
            cy, cx = size / 2 + rng.uniform(-1, 1, size=2) * spec.position_jitter
            r = size * 0.3 * (1 + rng.uniform(-1, 1) * spec.scale_jitter)
            fg = np.clip(fg_base + rng.uniform(-1, 1, 3) * spec.color_jitter, 0, 1)
            bg = np.clip(bg_base + rng.uniform(-1, 1, 3) * spec.color_jitter / 2, 0, 1)
            m = _shape_mask(kind, size, cy, cx, r)[..., None]
            images.append(m * fg + (1 - m) * bg)
            labels.append(label)
    order = rng.permutation(len(labels))
    return np.stack(images)[order], np.array(labels, dtype=np.int64)[order]


# ---- CIFAR-10 binary ---------------------------------------------------------------------
def load_cifar10_binary(path):
    """Records of 1 label byte + 3072 bytes (R, G, B planes of 32x32, row-major)."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if np.any(labels > 9):
        raise FormatError(f"{path}: label {int(labels.max())} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return images, labels
