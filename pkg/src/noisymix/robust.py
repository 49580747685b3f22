"""Corruptions, perturbation sequences and robustness/calibration metrics.

Corruption parameters per severity (images are float in [0, 1]):

=============== ============================= =====================================
kind            parameter                     severities 1..5
=============== ============================= =====================================
white_noise     Gaussian std                  0.04, 0.06, 0.08, 0.09, 0.10
shot_noise      photons per unit intensity    500, 250, 100, 75, 50
impulse_noise   salt-and-pepper fraction      0.01, 0.02, 0.03, 0.05, 0.07
gaussian_blur   kernel std (pixels)           0.4, 0.6, 0.7, 0.8, 1.0
brightness      additive shift                0.1, 0.2, 0.3, 0.4, 0.5
contrast        factor about channel mean     0.4, 0.3, 0.2, 0.1, 0.05
pixelate        block side (pixels)           2, 3, 4, 6, 8
=============== ============================= =====================================

Severity 0 is accepted and means "no corruption".
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .augment import check_image, rotate, translate
from .autodiff import no_grad
from .errors import ContractError, ParameterError
from .mixing import stream
from .nn import MlpModel, forward

KINDS = ("white_noise", "shot_noise", "impulse_noise", "gaussian_blur",
         "brightness", "contrast", "pixelate")
NOISE_KINDS = ("white_noise", "shot_noise", "impulse_noise")
SEQUENCE_KINDS = NOISE_KINDS + ("gaussian_blur", "brightness", "rotate", "translate")

SEVERITY_TABLE = {
    "white_noise": (0.04, 0.06, 0.08, 0.09, 0.10),
    "shot_noise": (500.0, 250.0, 100.0, 75.0, 50.0),
    "impulse_noise": (0.01, 0.02, 0.03, 0.05, 0.07),
    "gaussian_blur": (0.4, 0.6, 0.7, 0.8, 1.0),
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),
    "contrast": (0.4, 0.3, 0.2, 0.1, 0.05),
    "pixelate": (2, 3, 4, 6, 8),
}

# per-frame step of each sequence kind at amplitude 1
SEQUENCE_STEP = {
    "white_noise": 0.04, "shot_noise": 500.0, "impulse_noise": 0.01,
    "gaussian_blur": 0.3, "brightness": 0.01, "rotate": 1.0, "translate": 0.5,
}

CSV_COLUMNS = ("kind", "severity", "accuracy")


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown corruption kind {self.kind!r}")
        if not isinstance(self.severity, (int, np.integer)) or not 0 <= self.severity <= 5:
            raise ParameterError(f"severity must be an integer in 0..5, got {self.severity!r}")

    @property
    def parameter(self):
        return None if self.severity == 0 else SEVERITY_TABLE[self.kind][self.severity - 1]


def all_specs(kinds: Sequence[str] = KINDS, severities=range(1, 6)) -> list[CorruptionSpec]:
    return [CorruptionSpec(k, int(s)) for k in kinds for s in severities]


# ---- corruption primitives ---------------------------------------------------------
def white_noise(img, std, rng):
    return img + rng.normal(0.0, std, size=img.shape)


def shot_noise(img, photons, rng):
    return rng.poisson(np.clip(img, 0.0, 1.0) * photons) / photons


def impulse_noise(img, amount, rng):
    out = img.copy()
    u = rng.random(img.shape)
    out[u < amount / 2] = 0.0
    out[(u >= amount / 2) & (u < amount)] = 1.0
    return out


def gaussian_blur(img, std):
    return ndimage.gaussian_filter(img, sigma=(std, std, 0), mode="reflect")


def brightness(img, delta):
    return img + delta


def contrast(img, factor):
    mean = img.mean(axis=(0, 1), keepdims=True)
    return (img - mean) * factor + mean


def pixelate(img, block: int):
    """Replace each block x block tile by its mean; constant tiles are left as is."""
    out = img.copy()
    h, w, _ = img.shape
    for r in range(0, h, block):
        for c in range(0, w, block):
            tile = img[r:r + block, c:c + block]
            lo = tile.min(axis=(0, 1))
            hi = tile.max(axis=(0, 1))
            out[r:r + block, c:c + block] = np.where(lo == hi, lo, tile.mean(axis=(0, 1)))
    return out


def _apply(img, kind, param, rng):
    if kind == "white_noise":
        return white_noise(img, param, rng)
    if kind == "shot_noise":
        return shot_noise(img, param, rng)
    if kind == "impulse_noise":
        return impulse_noise(img, param, rng)
    if kind == "gaussian_blur":
        return gaussian_blur(img, param)
    if kind == "brightness":
        return brightness(img, param)
    if kind == "contrast":
        return contrast(img, param)
    return pixelate(img, int(param))


def corrupt(img, spec: CorruptionSpec, rng: np.random.Generator) -> np.ndarray:
    img = check_image(img)
    if spec.severity == 0:
        return img.copy()
    return np.clip(_apply(img, spec.kind, spec.parameter, rng), 0.0, 1.0)


def corrupt_batch(images, spec: CorruptionSpec, seed: int) -> np.ndarray:
    """Image k uses its own stream (seed, k), so results do not depend on scheduling."""
    return np.stack([corrupt(im, spec, stream(seed, k)) for k, im in enumerate(images)])


# ---- perturbation sequences --------------------------------------------------------
@dataclass
class PerturbSequence:
    frames: list
    kind: str
    temporal: bool

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ContractError("a sequence needs at least 2 frames")
        if len({f.shape for f in self.frames}) != 1:
            raise ContractError("all frames must share a shape")
        if not self.temporal and self.kind not in NOISE_KINDS:
            raise ContractError("only noise kinds compare every frame to the first")


def make_perturb_sequence(img, kind: str, n: int = 31, rng: Optional[np.random.Generator] = None,
                          amplitude: float = 1.0) -> PerturbSequence:
    """Noise kinds draw fresh noise on frame 1; other kinds perturb the previous frame.

    ``amplitude`` scales the per-frame step in ``SEQUENCE_STEP``; 0 gives a static sequence.
    """
    if kind not in SEQUENCE_KINDS:
        raise ParameterError(f"unknown sequence kind {kind!r}")
    if n < 2:
        raise ContractError("n must be >= 2")
    rng = rng or np.random.default_rng(0)
    base = check_image(img)
    temporal = kind not in NOISE_KINDS
    step = amplitude * SEQUENCE_STEP[kind]
    frames = [base.copy()]
    for j in range(1, n):
        if amplitude == 0:
            frames.append(base.copy())
        elif kind == "shot_noise":
            frames.append(np.clip(shot_noise(base, SEQUENCE_STEP[kind] / amplitude, rng), 0, 1))
        elif kind in NOISE_KINDS:
            frames.append(np.clip(_apply(base, kind, step, rng), 0.0, 1.0))
        elif kind == "brightness":
            # frame j = frame j-1 + step, written in closed form to avoid drift
            frames.append(np.clip(base + step * j, 0.0, 1.0))
        elif kind == "gaussian_blur":
            frames.append(gaussian_blur(frames[-1], step))
        elif kind == "rotate":
            frames.append(np.clip(rotate(frames[-1], step), 0.0, 1.0))
        else:
            frames.append(np.clip(translate(frames[-1], 0.0, step), 0.0, 1.0))
    return PerturbSequence(frames, kind, temporal)


# ---- metrics ------------------------------------------------------------------------
def flip_probability(predictions, temporal: bool = True) -> float:
    """Fraction of frames 2..n whose prediction differs from the previous frame
    (temporal) or from frame 1 (non-temporal). A 2-D input holds one sequence
    per row and the rows are averaged."""
    p = np.asarray(predictions)
    if p.ndim == 1:
        p = p[None, :]
    if p.ndim != 2 or p.shape[1] < 2:
        raise ContractError("each sequence needs at least 2 predictions")
    ref = p[:, :-1] if temporal else p[:, :1]
    return float(np.mean(p[:, 1:] != ref))


def mean_flip_rate(flip_probs: dict, reference_probs: dict) -> float:
    if set(flip_probs) != set(reference_probs):
        raise ContractError("flip-probability tables cover different kinds")
    if not flip_probs:
        raise ContractError("empty flip-probability table")
    ratios = []
    for kind in sorted(flip_probs):
        ref = reference_probs[kind]
        if ref <= 0:
            raise ContractError(f"reference flip probability for {kind!r} is zero")
        ratios.append(flip_probs[kind] / ref)
    return float(np.mean(ratios))


def _check_conf(confidences, correctness):
    c = np.asarray(confidences, dtype=float).ravel()
    k = np.asarray(correctness, dtype=float).ravel()
    if c.size == 0:
        raise ContractError("no predictions given")
    if c.shape != k.shape:
        raise ContractError("confidences and correctness differ in length")
    if np.any(c < 0) or np.any(c > 1):
        raise ContractError("confidences must lie in [0, 1]")
    return c, k


def rms_calibration_error(confidences, correctness, n_bins: int = 15) -> float:
    """sqrt(sum_b w_b (mean conf_b - mean acc_b)^2) over equal-mass confidence bins."""
    c, k = _check_conf(confidences, correctness)
    if n_bins < 1:
        raise ContractError("n_bins must be >= 1")
    order = np.argsort(c, kind="stable")
    total = 0.0
    for idx in np.array_split(order, min(n_bins, c.size)):
        gap = c[idx].mean() - k[idx].mean()
        total += idx.size / c.size * gap ** 2
    return float(np.sqrt(total))


def aurra(confidences, correctness) -> float:
    """Area under accuracy vs response rate, most confident first.

    Trapezoid rule over r = k/N, k = 1..N, plus the rectangle [0, 1/N] at the
    top-1 accuracy.
    """
    c, k = _check_conf(confidences, correctness)
    order = np.argsort(-c, kind="stable")
    n = c.size
    acc = np.cumsum(k[order]) / np.arange(1, n + 1)
    area = acc[0] / n
    if n > 1:
        area += float(np.sum((acc[1:] + acc[:-1]) / 2.0) / n)
    return float(area)


# ---- model evaluation -------------------------------------------------------------------
def model_probs(model: MlpModel, images) -> np.ndarray:
    x = np.asarray(images, dtype=float).reshape(len(images), -1)
    with no_grad():
        z = forward(model, x).data
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def as_predictor(model) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(model, MlpModel):
        return lambda imgs: np.argmax(model_probs(model, imgs), axis=1)
    return model


@dataclass
class EvalReport:
    clean_accuracy: float
    table: list = field(default_factory=list)  # (kind, severity, accuracy)
    flip_probability: dict = field(default_factory=dict)
    mean_flip_rate: Optional[float] = None
    rms_calibration_error: Optional[float] = None
    aurra: Optional[float] = None

    @property
    def robust_accuracy(self) -> float:
        accs = [a for _, _, a in self.table]
        if not accs:
            return self.clean_accuracy
        if min(accs) == max(accs):
            return float(accs[0])  # a constant table averages to itself exactly
        return math.fsum(accs) / len(accs)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for kind, sev, acc in self.table:
            w.writerow([kind, sev, repr(float(acc))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "clean_accuracy": self.clean_accuracy,
            "robust_accuracy": self.robust_accuracy,
            "per_corruption": [{"kind": k, "severity": s, "accuracy": a} for k, s, a in self.table],
            "flip_probability": dict(self.flip_probability),
            "mean_flip_rate": self.mean_flip_rate,
            "rms_calibration_error": self.rms_calibration_error,
            "aurra": self.aurra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def robust_accuracy(model, images, labels, specs: Sequence[CorruptionSpec], seed: int = 0,
                    workers: int = 1) -> EvalReport:
    """Clean accuracy plus accuracy under each spec; spec k corrupts with seed stream (seed, k)."""
    images = np.asarray(images, dtype=float)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ContractError("empty dataset")
    predict = as_predictor(model)
    clean = float(np.mean(predict(images) == labels))

    def one(k):
        spec = specs[k]
        batch = corrupt_batch(images, spec, int(stream(seed, k).integers(2 ** 31)))
        return spec.kind, int(spec.severity), float(np.mean(predict(batch) == labels))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            table = list(pool.map(one, range(len(specs))))
    else:
        table = [one(k) for k in range(len(specs))]
    return EvalReport(clean, table)


def evaluate(model: MlpModel, images, labels, specs: Sequence[CorruptionSpec], seed: int = 0,
             sequence_kinds: Sequence[str] = SEQUENCE_KINDS, n_sequences: int = 8,
             n_frames: int = 31, reference_flip: Optional[dict] = None, n_bins: int = 15,
             workers: int = 1) -> EvalReport:
    """Full report: corruption table, flip probabilities, calibration metrics."""
    report = robust_accuracy(model, images, labels, specs, seed, workers)
    probs = model_probs(model, images)
    conf = probs.max(axis=1)
    correct = np.argmax(probs, axis=1) == np.asarray(labels)
    report.rms_calibration_error = rms_calibration_error(conf, correct, n_bins)
    report.aurra = aurra(conf, correct)
    predict = as_predictor(model)
    for kind_id, kind in enumerate(sequence_kinds):
        preds = []
        for k in range(min(n_sequences, len(images))):
            seq = make_perturb_sequence(images[k], kind, n_frames, stream(seed, 10_000 + 100 * kind_id + k))
            preds.append(predict(np.stack(seq.frames)))
        report.flip_probability[kind] = flip_probability(np.array(preds), kind not in NOISE_KINDS)
    if reference_flip is not None:
        report.mean_flip_rate = mean_flip_rate(report.flip_probability, reference_flip)
    return report
