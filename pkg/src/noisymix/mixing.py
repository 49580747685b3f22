"""Samplers for the mixing coefficient and noise, and the noisy mixing transform."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, ParameterError

SQRT3 = np.sqrt(3.0)


@dataclass(frozen=True)
class NoiseConfig:
    alpha: float = 1.0
    beta: float = 1.0
    sigma_add: float = 0.1
    sigma_mult: float = 0.1
    family: str = "gaussian"
    # when set, (1 - lambda) and both sigmas are multiplied by this factor
    epsilon_scale: Optional[float] = None

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ParameterError("Beta shape parameters must be positive")
        if self.sigma_add < 0 or self.sigma_mult < 0:
            raise ParameterError("noise levels must be nonnegative")
        if self.epsilon_scale is not None and self.epsilon_scale < 0:
            raise ParameterError("epsilon_scale must be nonnegative")
        if self.family not in ("gaussian", "uniform"):
            raise ParameterError(f"unknown noise family {self.family!r}")

    def with_(self, **kw) -> "NoiseConfig":
        return replace(self, **kw)


@dataclass
class MixDraw:
    lam: float
    xi_add: np.ndarray
    xi_mult: np.ndarray
    layer: int = 0
    permutation: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"lambda={self.lam} outside [0, 1]")
        if np.shape(self.xi_add) != np.shape(self.xi_mult):
            raise DimensionError("xi_add and xi_mult must share a shape")


def stream(master_seed: int, worker: int = 0) -> np.random.Generator:
    """Independent RNG stream for (master seed, worker id)."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(worker)]))


def sample_beta(alpha: float, beta: float, rng: np.random.Generator, size=None):
    if alpha <= 0 or beta <= 0:
        raise ParameterError(f"Beta({alpha}, {beta}) needs positive shapes")
    return rng.beta(alpha, beta, size=size)


def sample_dirichlet(alpha: float, k: int, rng: np.random.Generator, size=None) -> np.ndarray:
    if alpha <= 0:
        raise ParameterError("Dirichlet concentration must be positive")
    if k < 2:
        raise ParameterError("Dirichlet needs k >= 2")
    return rng.dirichlet([alpha] * k, size=size)


def sample_lambda_tilde(alpha: float, beta: float, rng: np.random.Generator, size=None):
    """Draw from (a/(a+b)) Beta(a+1, b) + (b/(a+b)) Beta(b+1, a)."""
    if alpha <= 0 or beta <= 0:
        raise ParameterError(f"Beta({alpha}, {beta}) needs positive shapes")
    first = rng.random(size) < alpha / (alpha + beta)
    a = rng.beta(alpha + 1.0, beta, size=size)
    b = rng.beta(beta + 1.0, alpha, size=size)
    return np.where(first, a, b)


def lambda_tilde_moments(alpha: float, beta: float) -> tuple[float, float]:
    """(E[1 - lam], E[(1 - lam)^2]) under the mixture sampled by ``sample_lambda_tilde``."""
    w1 = alpha / (alpha + beta)
    w2 = 1.0 - w1

    def beta_one_minus(a, b):
        # 1 - Beta(a, b) ~ Beta(b, a)
        m1 = b / (a + b)
        m2 = b * (b + 1) / ((a + b) * (a + b + 1))
        return m1, m2

    m1a, m2a = beta_one_minus(alpha + 1.0, beta)
    m1b, m2b = beta_one_minus(beta + 1.0, alpha)
    return w1 * m1a + w2 * m1b, w1 * m2a + w2 * m2b


def sample_noise(cfg: NoiseConfig, rng: np.random.Generator, shape) -> np.ndarray:
    """Zero-mean, unit-variance noise of the configured family."""
    if cfg.family == "gaussian":
        return rng.standard_normal(shape)
    return rng.uniform(-SQRT3, SQRT3, size=shape)


def sample_draw(cfg: NoiseConfig, rng: np.random.Generator, shape, layer: int = 0,
                permute: bool = True, lam: Optional[float] = None) -> MixDraw:
    """One joint (lambda, xi_add, xi_mult, permutation) sample for a batch of ``shape``."""
    if lam is None:
        lam = float(sample_beta(cfg.alpha, cfg.beta, rng))
    xi_add = sample_noise(cfg, rng, shape)
    xi_mult = sample_noise(cfg, rng, shape)
    perm = rng.permutation(shape[0]) if permute else None
    return MixDraw(lam, xi_add, xi_mult, layer, perm)


def _effective(draw: MixDraw, cfg: NoiseConfig) -> tuple[float, float, float]:
    s = 1.0 if cfg.epsilon_scale is None else cfg.epsilon_scale
    one_minus = s * (1.0 - draw.lam)
    return 1.0 - one_minus, s * cfg.sigma_mult, s * cfg.sigma_add


def mix(x, x_prime, draw: MixDraw, cfg: NoiseConfig):
    """(1 + s_mult xi_mult) * (lam x + (1 - lam) x') + s_add xi_add.

    Works on ndarrays and on ``Tensor`` values (differentiable in x, x').
    """
    if np.shape(x) != np.shape(x_prime):
        raise DimensionError(f"cannot mix shapes {np.shape(x)} and {np.shape(x_prime)}")
    if np.shape(draw.xi_add) != np.shape(x):
        raise DimensionError(f"noise shape {np.shape(draw.xi_add)} does not match {np.shape(x)}")
    lam, s_mult, s_add = _effective(draw, cfg)
    if isinstance(x, ad.Tensor) or isinstance(x_prime, ad.Tensor):
        mixed = ad.ensure(x) * lam + ad.ensure(x_prime) * (1.0 - lam)
    else:
        mixed = lam * np.asarray(x, dtype=float) + (1.0 - lam) * np.asarray(x_prime, dtype=float)
    if s_mult != 0.0:
        mixed = mixed * (1.0 + s_mult * draw.xi_mult)
    if s_add != 0.0:
        mixed = mixed + s_add * draw.xi_add
    return mixed


def reformulated_perturbation(x_i, x_r, draw: MixDraw, cfg: NoiseConfig):
    """x_i + eps * e with e = (1 + eps s_m xi_m)(1 - lam)(x_r - x_i) + s_m xi_m x_i + s_a xi_a.

    ``draw.lam`` is expected to come from ``sample_lambda_tilde``; ``eps`` is
    ``cfg.epsilon_scale`` (1 when unset).
    """
    x_i = np.asarray(x_i, dtype=float)
    x_r = np.asarray(x_r, dtype=float)
    if x_i.shape != x_r.shape or np.shape(draw.xi_add) != x_i.shape:
        raise DimensionError("x_i, x_r and noise must share a shape")
    eps = 1.0 if cfg.epsilon_scale is None else cfg.epsilon_scale
    e_mix = (1.0 - draw.lam) * (x_r - x_i)
    e_noise = cfg.sigma_mult * draw.xi_mult * x_i + cfg.sigma_add * draw.xi_add
    e = (1.0 + eps * cfg.sigma_mult * draw.xi_mult) * e_mix + e_noise
    return x_i + eps * e
