"""AugmentAndMix-style stochastic augmentation for float images in [0, 1].

Images are ``(H, W, C)`` float64 arrays with C in {1, 3}.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .mixing import sample_beta, sample_dirichlet

ALL_OPS = ("rotate", "translate_x", "translate_y", "shear_x", "shear_y",
           "autocontrast", "equalize", "posterize", "solarize")

MAX_ROTATE_DEG = 30.0
MAX_TRANSLATE_FRAC = 1.0 / 3.0
MAX_SHEAR = 0.3


@dataclass(frozen=True)
class AugPolicy:
    ops: tuple[str, ...] = ALL_OPS
    width: int = 3
    depth: int = 3
    alpha: float = 1.0
    severity: float = 0.3

    def __post_init__(self):
        if self.width < 1 or self.depth < 1:
            raise ConfigError("chain width and depth must be >= 1")
        if not self.ops:
            raise ConfigError("augmentation op set is empty")
        unknown = set(self.ops) - set(ALL_OPS)
        if unknown:
            raise ConfigError(f"unknown augmentation ops {sorted(unknown)}")
        if not 0.0 <= self.severity <= 1.0:
            raise ConfigError("severity must lie in [0, 1]")


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise DimensionError(f"expected (H, W, 1|3) image, got {img.shape}")
    return img


# ---- geometry ---------------------------------------------------------------
def _bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``img`` at fractional coordinates with zero padding."""
    h, w, _ = img.shape
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    fr = (rows - r0)[..., None]
    fc = (cols - c0)[..., None]
    out = np.zeros(rows.shape + (img.shape[2],))
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = np.zeros_like(out)
            vals[ok] = img[rr[ok], cc[ok]]
            out += wr * wc * vals
    return out


def affine(img: np.ndarray, matrix: np.ndarray, offset=(0.0, 0.0)) -> np.ndarray:
    """Output pixel p samples input at ``matrix @ (p - center) + center + offset``."""
    h, w, _ = img.shape
    rr, cc = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy, dx = rr - cy, cc - cx
    src_r = matrix[0, 0] * dy + matrix[0, 1] * dx + cy + offset[0]
    src_c = matrix[1, 0] * dy + matrix[1, 1] * dx + cx + offset[1]
    return _bilinear(img, src_r, src_c)


def rotate(img, degrees: float):
    t = np.deg2rad(degrees)
    m = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    return affine(img, m)


def translate(img, dy: float, dx: float):
    return affine(img, np.eye(2), (-dy, -dx))


def shear(img, sy: float, sx: float):
    return affine(img, np.array([[1.0, sy], [sx, 1.0]]))


# ---- tone ops ---------------------------------------------------------------
def autocontrast(img):
    lo = img.min(axis=(0, 1), keepdims=True)
    hi = img.max(axis=(0, 1), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (img - lo) / safe, img)


def equalize(img):
    out = np.empty_like(img)
    q = np.clip(np.round(img * 255.0), 0, 255).astype(int)
    for c in range(img.shape[2]):
        hist = np.bincount(q[..., c].ravel(), minlength=256)
        cdf = np.cumsum(hist)
        nonzero = cdf[hist > 0]
        first = nonzero[0]
        total = cdf[-1]
        if total == first:
            out[..., c] = img[..., c]
            continue
        lut = (cdf - first) / (total - first)
        out[..., c] = np.clip(lut[q[..., c]], 0.0, 1.0)
    return out


def posterize(img, bits: int):
    if bits >= 8:
        return img.copy()
    q = np.clip(np.floor(img * 255.0), 0, 255).astype(np.uint8)
    mask = np.uint8((0xFF << (8 - bits)) & 0xFF)
    return (q & mask).astype(np.float64) / 255.0


def solarize(img, threshold: float):
    return np.where(img > threshold, 1.0 - img, img)


def op_parameter(op: str, severity: float) -> float:
    """Severity in [0, 1] mapped linearly to the op's native parameter."""
    table = {
        "rotate": MAX_ROTATE_DEG * severity,
        "translate_x": MAX_TRANSLATE_FRAC * severity,
        "translate_y": MAX_TRANSLATE_FRAC * severity,
        "shear_x": MAX_SHEAR * severity,
        "shear_y": MAX_SHEAR * severity,
        "posterize": float(int(round(8 - 4 * severity))),
        "solarize": 1.0 - 0.7 * severity,
        "autocontrast": 0.0,
        "equalize": 0.0,
    }
    return table[op]


def apply_op(img: np.ndarray, op: str, severity: float, sign: float = 1.0) -> np.ndarray:
    """Apply one op; ``sign`` flips the direction of geometric ops."""
    if op not in ALL_OPS:
        raise ConfigError(f"unknown augmentation op {op!r}")
    if not 0.0 <= severity <= 1.0:
        raise ConfigError(f"severity {severity} outside [0, 1]")
    img = check_image(img)
    v = op_parameter(op, severity)
    h, w, _ = img.shape
    if op == "rotate":
        out = rotate(img, sign * v)
    elif op == "translate_x":
        out = translate(img, 0.0, sign * v * w)
    elif op == "translate_y":
        out = translate(img, sign * v * h, 0.0)
    elif op == "shear_x":
        out = shear(img, 0.0, sign * v)
    elif op == "shear_y":
        out = shear(img, sign * v, 0.0)
    elif op == "autocontrast":
        out = autocontrast(img)
    elif op == "equalize":
        out = equalize(img)
    elif op == "posterize":
        out = posterize(img, int(v))
    else:
        out = solarize(img, v)
    return np.clip(out, 0.0, 1.0)


@dataclass
class AugDraw:
    """The random choices behind one augment_and_mix call."""

    m: float
    weights: np.ndarray
    chains: list = field(default_factory=list)  # per chain: list of (op, severity, sign)


def sample_aug_draw(policy: AugPolicy, rng: np.random.Generator) -> AugDraw:
    weights = (sample_dirichlet(policy.alpha, policy.width, rng) if policy.width >= 2
               else np.ones(1))
    m = float(sample_beta(policy.alpha, policy.alpha, rng))
    chains = []
    for _ in range(policy.width):
        depth = int(rng.integers(1, policy.depth + 1))
        chain = []
        for _ in range(depth):
            op = policy.ops[int(rng.integers(len(policy.ops)))]
            sev = float(rng.uniform(0.0, policy.severity))
            sign = 1.0 if rng.random() < 0.5 else -1.0
            chain.append((op, sev, sign))
        chains.append(chain)
    return AugDraw(m, weights, chains)


def run_chain(img: np.ndarray, chain: Sequence) -> np.ndarray:
    out = img
    for op, sev, sign in chain:
        out = apply_op(out, op, sev, sign)
    return out


def decompose(img: np.ndarray, draw: AugDraw) -> tuple[np.ndarray, np.ndarray]:
    """(A(x), dx) for a fixed draw, with A(x) == x + dx exactly."""
    img = check_image(img)
    chained = np.zeros_like(img)
    for w, chain in zip(draw.weights, draw.chains):
        if w != 0.0:
            chained = chained + w * run_chain(img, chain)
    chained = np.clip(chained, 0.0, 1.0)
    dx = (1.0 - draw.m) * (chained - img)
    out = img + dx
    if out.min() < 0.0 or out.max() > 1.0:
        out = np.clip(out, 0.0, 1.0)
        dx = out - img
        out = img + dx
    return out, dx


def augment_and_mix(img: np.ndarray, policy: AugPolicy, rng: np.random.Generator,
                    m: Optional[float] = None, weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """m x + (1 - m) sum_i w_i C_i(x); ``m``/``weights`` override the random draws."""
    return perturbation_decomposition(img, policy, rng, m=m, weights=weights)[0]


def perturbation_decomposition(img, policy: AugPolicy, rng: np.random.Generator,
                               m: Optional[float] = None, weights=None):
    draw = sample_aug_draw(policy, rng)
    if m is not None:
        draw.m = float(m)
    if weights is not None:
        draw.weights = np.asarray(weights, dtype=float)
    return decompose(img, draw)


def augment_batch(images: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment_and_mix(im, policy, rng) for im in images])
