"""Loss functions: soft-label cross-entropy, Jensen-Shannon divergences, NFM and NoisyMix."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .augment import AugPolicy, augment_and_mix
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .mixing import MixDraw, NoiseConfig, mix, sample_beta, sample_dirichlet, sample_draw
from .nn import MlpModel, forward_from, forward_to

PROB_FLOOR = 1e-12
SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 12.0
    jsd_branches: int = 3
    use_augment: bool = True
    use_feature_mix: bool = True
    use_noise: bool = True
    use_jsd: bool = True
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    policy: AugPolicy = field(default_factory=AugPolicy)
    # inputs are flattened images of this shape; None means plain vectors
    image_shape: Optional[tuple] = None
    # std of the per-chain jitter used as the augmentation on plain vectors
    vector_jitter: float = 0.1

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be nonnegative")
        if self.jsd_branches not in (2, 3):
            raise ConfigError("jsd_branches must be 2 or 3")

    @property
    def pi(self) -> np.ndarray:
        return np.full(self.jsd_branches, 1.0 / self.jsd_branches)

    def with_(self, **kw) -> "LossConfig":
        return replace(self, **kw)

    def effective_noise(self) -> NoiseConfig:
        if self.use_noise:
            return self.noise
        return self.noise.with_(sigma_add=0.0, sigma_mult=0.0)


# ---- validation -------------------------------------------------------------
def check_simplex(p, name="distribution", tol=SIMPLEX_TOL) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if np.any(p < -tol) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ContractError(f"{name} is not in the probability simplex")
    return p


# ---- entropy and JSD on plain arrays ------------------------------------------
def entropy(p) -> float:
    p = np.asarray(p, dtype=float)
    return -math.fsum(p * np.log(np.maximum(p, PROB_FLOOR)))


def kl(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return math.fsum(p * (np.log(np.maximum(p, PROB_FLOOR)) - np.log(np.maximum(q, PROB_FLOOR))))


def jsd(p1, p2, pi=(0.5, 0.5)) -> float:
    """H(pi1 p1 + pi2 p2) - pi1 H(p1) - pi2 H(p2)."""
    return jsd_k([p1, p2], pi)


def jsd_k(dists: Sequence, pi=None) -> float:
    """Generalized JSD of any number of distributions, entropy form."""
    if len(dists) == 0:
        raise ContractError("jsd_k needs at least one distribution")
    ps = [check_simplex(p) for p in dists]
    pi = np.full(len(ps), 1.0 / len(ps)) if pi is None else check_simplex(pi, "weights")
    if len(pi) != len(ps):
        raise ContractError("one weight per distribution is required")
    if all(np.array_equal(p, ps[0]) for p in ps[1:]):
        return 0.0  # the mixture would only reproduce p up to rounding
    mixture = sum(w * p for w, p in zip(pi, ps))
    # fsum is exactly rounded, hence independent of branch order; near-identical
    # branches can cancel to a few ulps below the true (nonnegative) value
    return max(0.0, entropy(mixture) - math.fsum(w * entropy(p) for w, p in zip(pi, ps)))


def jsd_k_kl(dists: Sequence, pi=None) -> float:
    """Same quantity through sum_k pi_k KL(p_k || mixture)."""
    ps = [check_simplex(p) for p in dists]
    pi = np.full(len(ps), 1.0 / len(ps)) if pi is None else check_simplex(pi, "weights")
    mixture = sum(w * p for w, p in zip(pi, ps))
    return math.fsum(w * kl(p, mixture) for w, p in zip(pi, ps))


# ---- differentiable versions (rows of a batch) --------------------------------
def _plogp(p: Tensor) -> Tensor:
    return p * ad.log(ad.clip_min(p, PROB_FLOOR))


def entropy_t(p: Tensor) -> Tensor:
    """Row-wise Shannon entropy, shape (B,)."""
    return -ad.sum_(_plogp(p), axis=-1)


def jsd_t(probs: Sequence[Tensor], pi: Sequence[float]) -> Tensor:
    """Row-wise generalized JSD, shape (B,)."""
    mixture = probs[0] * float(pi[0])
    for w, p in zip(pi[1:], probs[1:]):
        mixture = mixture + p * float(w)
    branch = entropy_t(probs[0]) * float(pi[0])
    for w, p in zip(pi[1:], probs[1:]):
        branch = branch + entropy_t(p) * float(w)
    # rows with identical branches sit at the minimum (value and gradient 0); pin them exactly
    same = np.all([np.all(p.data == probs[0].data, axis=-1) for p in probs[1:]], axis=0)
    return (entropy_t(mixture) - branch) * (~same).astype(float)


def cross_entropy(logits, soft_labels) -> Tensor:
    """Batch mean of -sum_k y_k log softmax(logits)_k; labels may be soft."""
    logits = ad.ensure(logits)
    y = check_simplex(soft_labels, "label")
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1, -1))
        y = y.reshape(1, -1)
    if logits.shape != y.shape:
        raise ContractError(f"logits {logits.shape} vs labels {y.shape}")
    return -ad.sum_(ad.log_softmax(logits) * y) * (1.0 / logits.shape[0])


def binary_probs(f: Tensor) -> Tensor:
    """Scalar logits (B, 1) -> (sigmoid(f), 1 - sigmoid(f)) rows."""
    return ad.softmax(ad.concat([f, Tensor(np.zeros(f.shape))], axis=-1))


# ---- mixing through a model ----------------------------------------------------
def mixed_logits(model: MlpModel, x, draw: MixDraw, noise: NoiseConfig, params=None,
                 partner=None) -> Tensor:
    """Logits of the noisy mix of each row with its partner row at ``draw.layer``.

    The partner of row i is row ``draw.permutation[i]`` of ``partner`` (default ``x``).
    """
    if draw.layer not in model.mixable:
        raise ConfigError(f"layer {draw.layer} is not mixable (mixable: {model.mixable})")
    h = forward_to(model, x, draw.layer, params)
    if partner is None:
        hp = h
    else:
        hp = forward_to(model, partner, draw.layer, params)
    if draw.permutation is not None:
        hp = ad.getitem(hp, draw.permutation)
    return forward_from(model, mix(h, hp, draw, noise), draw.layer, params)


def mixed_labels(labels, draw: MixDraw, noise: NoiseConfig) -> np.ndarray:
    y = np.asarray(labels, dtype=float)
    s = 1.0 if noise.epsilon_scale is None else noise.epsilon_scale
    lam = 1.0 - s * (1.0 - draw.lam)
    partner = y if draw.permutation is None else y[draw.permutation]
    return lam * y + (1.0 - lam) * partner


def nfm_loss(model: MlpModel, batch, labels, draw: MixDraw, noise: NoiseConfig, params=None) -> Tensor:
    """Cross-entropy of the noisy-mixed inputs against the lambda-mixed labels."""
    logits = mixed_logits(model, batch, draw, noise, params)
    return cross_entropy(logits, mixed_labels(labels, draw, noise))


# ---- augmentation plumbing --------------------------------------------------------
def augment_vectors(batch: np.ndarray, cfg: LossConfig, rng: np.random.Generator) -> np.ndarray:
    """Vector analogue of AugmentAndMix: m x + (1 - m) sum_i w_i (x + jitter_i)."""
    policy = cfg.policy
    out = np.empty_like(batch)
    for i, x in enumerate(batch):
        m = float(sample_beta(policy.alpha, policy.alpha, rng))
        w = sample_dirichlet(policy.alpha, policy.width, rng) if policy.width > 1 else np.ones(1)
        jitter = rng.standard_normal((policy.width,) + x.shape) * cfg.vector_jitter
        out[i] = x + (1.0 - m) * np.tensordot(w, jitter, axes=1)
    return out


def augment(batch: np.ndarray, cfg: LossConfig, rng: np.random.Generator) -> np.ndarray:
    batch = np.asarray(batch, dtype=float)
    if cfg.image_shape is None:
        return augment_vectors(batch, cfg, rng)
    shape = tuple(cfg.image_shape)
    return np.stack([augment_and_mix(row.reshape(shape), cfg.policy, rng).ravel() for row in batch])


def augmented_branches(batch, cfg: LossConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """The augmented copies the stability term needs (identity when augmentation is off)."""
    n = cfg.jsd_branches - 1
    if not cfg.use_augment:
        return [np.asarray(batch, dtype=float)] * n
    return [augment(batch, cfg, rng) for _ in range(n)]


def jsd_stability_loss(model: MlpModel, batch, draw: MixDraw, cfg: LossConfig,
                       rng: Optional[np.random.Generator] = None, params=None,
                       augmented: Optional[Sequence[np.ndarray]] = None,
                       clean_logits: Optional[Tensor] = None) -> Tensor:
    """Batch-mean JSD between predictions on the mixed clean pair and the mixed augmented pair(s).

    The same (lambda, xi, pairing) is used for every branch, and no labels enter.
    ``clean_logits`` may carry the already computed clean-branch logits.
    """
    if augmented is None:
        if rng is None:
            raise ContractError("either rng or precomputed augmented batches are required")
        augmented = augmented_branches(batch, cfg, rng)
    if len(augmented) != cfg.jsd_branches - 1:
        raise ContractError(f"expected {cfg.jsd_branches - 1} augmented batches")
    noise = cfg.effective_noise()
    if clean_logits is None:
        clean_logits = mixed_logits(model, batch, draw, noise, params)
    probs = [ad.softmax(clean_logits)]
    for aug in augmented:
        probs.append(ad.softmax(mixed_logits(model, aug, draw, noise, params)))
    return jsd_t(probs, cfg.pi).mean()


def sample_training_draw(model: MlpModel, batch_size: int, cfg: LossConfig,
                         rng: np.random.Generator) -> MixDraw:
    """Draw (lambda, xi, layer, pairing) honoring the feature-mix toggle."""
    noise = cfg.effective_noise()
    if cfg.use_feature_mix:
        layer = int(model.mixable[int(rng.integers(len(model.mixable)))])
        lam = None
    else:
        layer, lam = 0, 1.0
    width = model.widths[layer]
    return sample_draw(noise, rng, (batch_size, width), layer=layer, lam=lam)


def noisymix_loss(model: MlpModel, batch, labels, cfg: LossConfig, rng: np.random.Generator,
                  params=None, augmented=None, draw: Optional[MixDraw] = None):
    """(total, nfm_part, jsd_part) with total = nfm_part + gamma * jsd_part."""
    batch = np.asarray(batch, dtype=float)
    if draw is None:
        draw = sample_training_draw(model, batch.shape[0], cfg, rng)
    noise = cfg.effective_noise()
    if cfg.use_jsd:
        if augmented is None:
            augmented = augmented_branches(batch, cfg, rng)
        logits = mixed_logits(model, batch, draw, noise, params)
        nfm = cross_entropy(logits, mixed_labels(labels, draw, noise))
        jsd_part = jsd_stability_loss(model, batch, draw, cfg, params=params, augmented=augmented,
                                      clean_logits=logits)
    else:
        inputs = batch
        if cfg.use_augment:
            inputs = augmented[0] if augmented is not None else augment(batch, cfg, rng)
        nfm = nfm_loss(model, inputs, labels, draw, noise, params)
        jsd_part = Tensor(0.0)
    total = nfm + jsd_part * cfg.gamma
    return total, nfm, jsd_part
