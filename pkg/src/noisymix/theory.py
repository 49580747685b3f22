"""Numerical checks of the small-epsilon expansions of the NFM and JSD losses
and of the adversarial lower bound for linear models.

Binary setting throughout: a model with one output ``f`` (the logit), loss
``l(f, y) = h(f) - y f`` with ``h(z) = log(1 + e^z)``, labels in {0, 1}, and
class probabilities ``(sigmoid(f), 1 - sigmoid(f))`` for the JSD terms.

Exact losses are estimated by Monte Carlo. Each estimator also carries a
control variate (the per-draw second-order Taylor polynomial of the composite
loss, whose mean is computed from exact moments), which keeps the standard
error well below the O(eps^3) residuals being measured.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import ContractError, SamplingError
from .mixing import NoiseConfig, lambda_tilde_moments, sample_beta, sample_lambda_tilde, sample_noise
from .nn import MlpModel, forward
from .objectives import PROB_FLOOR, binary_probs

NOISE_COV_SCALE = 1.0  # both noise families are unit variance per coordinate


# ---- scalar helpers ---------------------------------------------------------------
def h(z):
    return np.logaddexp(0.0, z)


def h1(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def h2(z):
    s = h1(z)
    return s * (1.0 - s)


def bce(f, y):
    return h(f) - y * f


def _entropy_rows(p):
    return -np.sum(p * np.log(np.maximum(p, PROB_FLOOR)), axis=-1)


def binary_jsd_rows(f0, f1):
    """JSD with weights (1/2, 1/2) between (s(f0), 1-s(f0)) and (s(f1), 1-s(f1))."""
    p0 = np.stack([h1(f0), h1(-f0)], axis=-1)
    p1 = np.stack([h1(f1), h1(-f1)], axis=-1)
    mixture = 0.5 * p0 + 0.5 * p1
    return _entropy_rows(mixture) - (0.5 * _entropy_rows(p0) + 0.5 * _entropy_rows(p1))


def _require_scalar_smooth(model: MlpModel):
    if not model.is_smooth:
        raise ContractError(f"activation {model.activation!r} is not twice differentiable")
    if model.widths[-1] != 1:
        raise ContractError("theory checks need a single-output (binary) model")


def logits(model: MlpModel, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return forward(model, np.atleast_2d(x)).data[:, 0]


def _point_fn(model: MlpModel):
    def fn(t: Tensor) -> Tensor:
        return ad.sum_(forward(model, ad.reshape(t, (1, -1))))
    return fn


def point_derivatives(model: MlpModel, x: np.ndarray):
    """(f(x), grad f(x), Hessian f(x)) by autodiff."""
    fn = _point_fn(model)
    val, (g,) = ad.value_and_grad(fn, x)
    return val, g, ad.hessian(fn, x)


def prob_derivatives(model: MlpModel, x: np.ndarray):
    """Per class k: p^k(x), grad p^k(x), Hessian p^k(x) for the binary probabilities."""
    out = []
    for k in range(2):
        def fn(t, k=k):
            f = forward(model, ad.reshape(t, (1, -1)))
            return ad.sum_(ad.getitem(binary_probs(f), (0, k)))
        val, (g,) = ad.value_and_grad(fn, x)
        out.append((val, g, ad.hessian(fn, x)))
    return out


# ---- reports ------------------------------------------------------------------------
@dataclass
class ExpansionPoint:
    eps: float
    mc: float
    mc_se: float
    mc_cv: float
    mc_cv_se: float
    prediction: float
    residual: float
    resolved: bool


@dataclass
class ExpansionReport:
    name: str
    points: list = field(default_factory=list)
    slope: Optional[float] = None
    flagged: list = field(default_factory=list)
    terms: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "points": [asdict(p) for p in self.points], "slope": self.slope,
                "flagged": list(self.flagged), "terms": dict(self.terms)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def point(self, eps: float) -> ExpansionPoint:
        for p in self.points:
            if p.eps == eps:
                return p
        raise KeyError(eps)


def fit_slope(points: Sequence[ExpansionPoint]) -> tuple[Optional[float], list[float]]:
    """Least-squares slope of log residual vs log eps over resolved points with eps > 0."""
    xs, ys, flagged = [], [], []
    for p in points:
        if p.eps <= 0:
            continue
        if not p.resolved:
            flagged.append(p.eps)
            continue
        xs.append(np.log(p.eps))
        ys.append(np.log(p.residual))
    if len(xs) < 2:
        return None, flagged
    return float(np.polyfit(xs, ys, 1)[0]), flagged


def _finish(report: ExpansionReport) -> ExpansionReport:
    report.slope, report.flagged = fit_slope(report.points)
    return report


def _mc_point(eps, values, cv, cv_mean, prediction, n_strata: int = 1) -> ExpansionPoint:
    mc, se = mean_se(values, n_strata)
    diff_mean, se_cv = mean_se(values - cv, n_strata)
    mc_cv = diff_mean + float(cv_mean)
    residual = abs(mc_cv - prediction)
    return ExpansionPoint(float(eps), mc, se, mc_cv, se_cv, float(prediction), residual,
                          bool(residual > se_cv))


# ---- Monte Carlo sampling of the reformulated perturbations --------------------------
@dataclass
class PerturbationSample:
    i: np.ndarray
    r: np.ndarray
    one_minus: np.ndarray  # 1 - lambda, lambda from the tilted mixture
    xi_add: np.ndarray
    xi_mult: np.ndarray


def sample_perturbations(n: int, d: int, noise: NoiseConfig, n_mc: int,
                         rng: np.random.Generator) -> PerturbationSample:
    """Stratified over the anchor index i; partner r, lambda and noise random.

    Draws come in antithetic pairs: draw k + half repeats draw k with the
    noise negated (the noise law is symmetric, so the estimator stays unbiased).
    """
    half = -(-max(n_mc, 2 * n) // (2 * n)) * n  # a whole number of sweeps over the anchors
    i = np.arange(half) % n
    r = rng.integers(0, n, size=half)
    lam = sample_lambda_tilde(noise.alpha, noise.beta, rng, size=half)
    xi_a = sample_noise(noise, rng, (half, d))
    xi_m = sample_noise(noise, rng, (half, d))
    return PerturbationSample(np.tile(i, 2), np.tile(r, 2), np.tile(1.0 - lam, 2),
                              np.concatenate([xi_a, -xi_a]), np.concatenate([xi_m, -xi_m]))


def pair_means(values: np.ndarray) -> np.ndarray:
    """Average each draw with its antithetic partner; these are i.i.d."""
    half = values.size // 2
    return 0.5 * (values[:half] + values[half:])


def mean_se(values: np.ndarray, n_strata: int = 1) -> tuple[float, float]:
    """Mean and its standard error. Pair means are grouped into sweeps of
    ``n_strata`` consecutive anchors; sweeps are i.i.d., so their spread gives
    the error of the stratified estimator."""
    pm = pair_means(values)
    if pm.size % n_strata:
        raise ContractError("sample size is not a whole number of sweeps")
    sweeps = pm.reshape(-1, n_strata).mean(axis=1)
    se = float(np.std(sweeps, ddof=1) / np.sqrt(sweeps.size)) if sweeps.size > 1 else 0.0
    return float(np.mean(values)), se


def perturbation_parts(X: np.ndarray, s: PerturbationSample, noise: NoiseConfig):
    """First- and second-order displacement (a, b): z(eps) = x_i + eps a + eps^2 b."""
    xi, xr = X[s.i], X[s.r]
    mixup = s.one_minus[:, None] * (xr - xi)
    a = mixup + noise.sigma_mult * s.xi_mult * xi + noise.sigma_add * s.xi_add
    b = noise.sigma_mult * s.xi_mult * mixup
    return a, b


def displacement_moments(X: np.ndarray, noise: NoiseConfig, Y: Optional[np.ndarray] = None):
    """Per anchor i: E[a] and E[a a^T] (or E[a_X a_Y^T] when Y is given)."""
    m1, m2 = lambda_tilde_moments(noise.alpha, noise.beta)
    Y = X if Y is None else Y
    n, d = X.shape
    mean_a = m1 * (X.mean(axis=0) - X)
    second = np.empty((n, d, d))
    for i in range(n):
        dx = X - X[i]
        dy = Y - Y[i]
        second[i] = m2 * dx.T @ dy / n
        second[i] += noise.sigma_add ** 2 * NOISE_COV_SCALE * np.eye(d)
        second[i] += noise.sigma_mult ** 2 * NOISE_COV_SCALE * np.diag(X[i] * Y[i])
    return mean_a, second


# ---- double-sum vs single-sum NFM loss ----------------------------------------------------
@dataclass
class EquivalenceReport:
    double_sum: float
    double_sum_se: float
    reformulated: float
    reformulated_se: float

    @property
    def difference(self) -> float:
        return self.double_sum - self.reformulated

    @property
    def pooled_se(self) -> float:
        return float(np.hypot(self.double_sum_se, self.reformulated_se))

    @property
    def resolved(self) -> bool:
        return self.pooled_se < 1.0

    def within(self, k: float = 3.0) -> bool:
        return abs(self.difference) <= k * self.pooled_se


def double_sum_losses(model, X, y, noise: NoiseConfig, n_mc: int, rng) -> np.ndarray:
    """Per-sample losses of the mixed-input, mixed-label objective (random permutation pairing)."""
    n, d = X.shape
    n_perm = max(1, n_mc // n)
    i = np.tile(np.arange(n), n_perm)
    j = np.concatenate([rng.permutation(n) for _ in range(n_perm)])
    lam = sample_beta(noise.alpha, noise.beta, rng, size=i.size)
    xi_a = sample_noise(noise, rng, (i.size, d))
    xi_m = sample_noise(noise, rng, (i.size, d))
    mixed = lam[:, None] * X[i] + (1 - lam)[:, None] * X[j]
    z = (1 + noise.sigma_mult * xi_m) * mixed + noise.sigma_add * xi_a
    f = logits(model, z)
    y_mix = lam * y[i] + (1 - lam) * y[j]
    return bce(f, y_mix)


def reformulated_losses(model, X, y, noise: NoiseConfig, n_mc: int, rng, eps: float = 1.0):
    n, d = X.shape
    s = sample_perturbations(n, d, noise, n_mc, rng)
    a, b = perturbation_parts(X, s, noise)
    z = X[s.i] + eps * a + eps ** 2 * b
    return bce(logits(model, z), y[s.i])


def verify_lemma1(model: MlpModel, X, y, noise: NoiseConfig, n_mc: int, rng) -> EquivalenceReport:
    """Double-sum NFM loss vs the single-sum form with tilted lambda (both at unit scale)."""
    noise = noise.with_(epsilon_scale=None)
    ds = double_sum_losses(model, X, y, noise, n_mc, rng)
    rf = reformulated_losses(model, X, y, noise, n_mc, rng)
    rf_mean, rf_se = mean_se(rf, X.shape[0])
    # each permutation round visits every anchor once; rounds are i.i.d.
    rounds = ds.reshape(-1, X.shape[0]).mean(axis=1)
    ds_se = float(rounds.std(ddof=1) / np.sqrt(rounds.size)) if rounds.size > 1 else float("inf")
    return EquivalenceReport(float(ds.mean()), ds_se, rf_mean, rf_se)


# ---- NFM loss expansion -------------------------------------------------------------------
def nfm_terms(model: MlpModel, X, y, noise: NoiseConfig) -> dict:
    """L_std and the first/second-order coefficients of the NFM expansion."""
    _require_scalar_smooth(model)
    n, d = X.shape
    m1, m2 = lambda_tilde_moments(noise.alpha, noise.beta)
    cov = NOISE_COV_SCALE * np.eye(d)
    xbar = X.mean(axis=0)
    t = dict.fromkeys(["L_std", "R1", "R2", "R3", "R2_add", "R2_mult", "R3_add", "R3_mult"], 0.0)
    for i in range(n):
        p, g, H = point_derivatives(model, X[i])
        dev = X - X[i]
        t["L_std"] += bce(p, y[i]) / n
        t["R1"] += m1 / n * (h1(p) - y[i]) * g @ (xbar - X[i])
        t["R2"] += m2 / (2 * n) * h2(p) * np.mean((dev @ g) ** 2)
        t["R3"] += m2 / (2 * n) * (h1(p) - y[i]) * np.mean(np.einsum("rj,jk,rk->r", dev, H, dev))
        t["R2_add"] += h2(p) * g @ cov @ g / (2 * n)
        t["R2_mult"] += h2(p) * g @ (cov * np.outer(X[i], X[i])) @ g / (2 * n)
        t["R3_add"] += (h1(p) - y[i]) * np.trace(H @ cov) / (2 * n)
        t["R3_mult"] += (h1(p) - y[i]) * np.trace(H @ (cov * np.outer(X[i], X[i]))) / (2 * n)
    sa2, sm2 = noise.sigma_add ** 2, noise.sigma_mult ** 2
    t["R2_tilde"] = t["R2"] + sa2 * t["R2_add"] + sm2 * t["R2_mult"]
    t["R3_tilde"] = t["R3"] + sa2 * t["R3_add"] + sm2 * t["R3_mult"]
    return {k: float(v) for k, v in t.items()}


def nfm_prediction(terms: dict, eps: float) -> float:
    return terms["L_std"] + eps * terms["R1"] + eps ** 2 * (terms["R2_tilde"] + terms["R3_tilde"])


def _loss_taylor(model, X, y):
    """Per anchor: loss value, input gradient and input Hessian of x -> l(f(x), y_i)."""
    n, d = X.shape
    vals, grads, hess = np.empty(n), np.empty((n, d)), np.empty((n, d, d))
    fn = _point_fn(model)
    for i in range(n):
        def loss(t, yi=y[i]):
            f = fn(t)
            return ad.softplus(f) - f * float(yi)
        v, (g,) = ad.value_and_grad(loss, X[i])
        vals[i], grads[i], hess[i] = v, g, ad.hessian(loss, X[i])
    return vals, grads, hess


def nfm_mc(model, X, y, noise: NoiseConfig, eps: float, s: PerturbationSample, taylor, moments):
    """Per-draw exact losses, control variate values, and the control variate's mean."""
    vals, grads, hess = taylor
    mean_a, second = moments
    a, b = perturbation_parts(X, s, noise)
    z = X[s.i] + eps * a + eps ** 2 * b
    values = bce(logits(model, z), y[s.i])
    gi, Hi = grads[s.i], hess[s.i]
    cv = (vals[s.i] + eps * np.einsum("nd,nd->n", gi, a)
          + eps ** 2 * (0.5 * np.einsum("nd,nde,ne->n", a, Hi, a) + np.einsum("nd,nd->n", gi, b)))
    cv_mean = np.mean(vals + eps * np.einsum("nd,nd->n", grads, mean_a)
                      + 0.5 * eps ** 2 * np.einsum("nde,nde->n", hess, second))
    return values, cv, cv_mean


def expand_theorem1(model: MlpModel, X, y, noise: NoiseConfig, eps_grid: Sequence[float],
                    n_mc: int = 200_000, rng: Optional[np.random.Generator] = None) -> ExpansionReport:
    _require_scalar_smooth(model)
    rng = rng or np.random.default_rng(0)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    noise = noise.with_(epsilon_scale=None)
    terms = nfm_terms(model, X, y, noise)
    taylor = _loss_taylor(model, X, y)
    moments = displacement_moments(X, noise)
    report = ExpansionReport("theorem1", terms=terms)
    for eps in eps_grid:
        s = sample_perturbations(*X.shape, noise, n_mc, rng)
        values, cv, cv_mean = nfm_mc(model, X, y, noise, eps, s, taylor, moments)
        report.points.append(_mc_point(eps, values, cv, cv_mean, nfm_prediction(terms, eps), X.shape[0]))
    return _finish(report)


# ---- stability (JSD) loss expansion --------------------------------------------------------
def _q(Hx, gx, px, py):
    return Hx * np.log(2 * px / (px + py)) + np.outer(gx, gx) * py / (px * (px + py))


def jsd_terms(model: MlpModel, X, AX, noise: NoiseConfig) -> dict:
    """Clean-vs-augmented JSD baseline and the S-coefficients of its expansion."""
    _require_scalar_smooth(model)
    n, d = X.shape
    m1, m2 = lambda_tilde_moments(noise.alpha, noise.beta)
    cov = NOISE_COV_SCALE * np.eye(d)
    xbar, abar = X.mean(axis=0), AX.mean(axis=0)
    t = dict.fromkeys(["L_std_tilde", "S1", "S2", "S2_add", "S2_mult"], 0.0)
    t["L_std_tilde"] = float(np.mean(binary_jsd_rows(logits(model, X), logits(model, AX))))
    for i in range(n):
        px_all = prob_derivatives(model, X[i])
        pa_all = prob_derivatives(model, AX[i])
        dx, da = X - X[i], AX - AX[i]
        for (px, gx, Hx), (pa, ga, Ha) in zip(px_all, pa_all):
            qx = _q(Hx, gx, px, pa)
            qa = _q(Ha, ga, pa, px)
            denom = px + pa
            t["S1"] += m1 / (2 * n) * (gx @ (xbar - X[i]) * np.log(2 * px / denom)
                                       + ga @ (abar - AX[i]) * np.log(2 * pa / denom))
            cross = dx.T @ da / n
            t["S2"] += m2 / (4 * n) * (np.mean(np.einsum("rj,jk,rk->r", dx, qx, dx))
                                       + np.mean(np.einsum("rj,jk,rk->r", da, qa, da))
                                       - 2 * gx @ cross @ ga / denom)
            t["S2_add"] += 1 / (4 * n) * (np.trace(qx @ cov) + np.trace(qa @ cov)
                                          - 2 * gx @ cov @ ga / denom)
            xx = cov * np.outer(X[i], X[i])
            aa = cov * np.outer(AX[i], AX[i])
            xa = cov * np.outer(X[i], AX[i])
            t["S2_mult"] += 1 / (4 * n) * (np.trace(qx @ xx) + np.trace(qa @ aa)
                                           - 2 * gx @ xa @ ga / denom)
    t["S2_tilde"] = t["S2"] + noise.sigma_add ** 2 * t["S2_add"] + noise.sigma_mult ** 2 * t["S2_mult"]
    return {k: float(v) for k, v in t.items()}


def jsd_prediction(terms: dict, eps: float) -> float:
    return terms["L_std_tilde"] + eps * terms["S1"] + eps ** 2 * terms["S2_tilde"]


def _pair_fn(model: MlpModel, d: int):
    def fn(t: Tensor) -> Tensor:
        f0 = forward(model, ad.reshape(ad.getitem(t, slice(0, d)), (1, -1)))
        f1 = forward(model, ad.reshape(ad.getitem(t, slice(d, 2 * d)), (1, -1)))
        p0, p1 = binary_probs(f0), binary_probs(f1)
        from .objectives import jsd_t
        return ad.sum_(jsd_t([p0, p1], [0.5, 0.5]))
    return fn


def _jsd_taylor(model, X, AX):
    n, d = X.shape
    fn = _pair_fn(model, d)
    vals, grads, hess = np.empty(n), np.empty((n, 2 * d)), np.empty((n, 2 * d, 2 * d))
    for i in range(n):
        z = np.concatenate([X[i], AX[i]])
        v, (g,) = ad.value_and_grad(fn, z)
        vals[i], grads[i], hess[i] = v, g, ad.hessian(fn, z)
    return vals, grads, hess


def _joint_moments(X, AX, noise):
    mean_x, sxx = displacement_moments(X, noise)
    mean_a, saa = displacement_moments(AX, noise)
    _, sxa = displacement_moments(X, noise, AX)
    n, d = X.shape
    second = np.empty((n, 2 * d, 2 * d))
    second[:, :d, :d] = sxx
    second[:, d:, d:] = saa
    second[:, :d, d:] = sxa
    second[:, d:, :d] = np.transpose(sxa, (0, 2, 1))
    return np.concatenate([mean_x, mean_a], axis=1), second


def jsd_mc(model, X, AX, noise, eps, s: PerturbationSample, taylor, moments):
    vals, grads, hess = taylor
    mean_a, second = moments
    ax, bx = perturbation_parts(X, s, noise)
    aa, ba = perturbation_parts(AX, s, noise)
    z0 = X[s.i] + eps * ax + eps ** 2 * bx
    z1 = AX[s.i] + eps * aa + eps ** 2 * ba
    values = binary_jsd_rows(logits(model, z0), logits(model, z1))
    a = np.concatenate([ax, aa], axis=1)
    b = np.concatenate([bx, ba], axis=1)
    gi, Hi = grads[s.i], hess[s.i]
    cv = (vals[s.i] + eps * np.einsum("nd,nd->n", gi, a)
          + eps ** 2 * (0.5 * np.einsum("nd,nde,ne->n", a, Hi, a) + np.einsum("nd,nd->n", gi, b)))
    cv_mean = np.mean(vals + eps * np.einsum("nd,nd->n", grads, mean_a)
                      + 0.5 * eps ** 2 * np.einsum("nde,nde->n", hess, second))
    return values, cv, cv_mean


def expand_theorem2(model: MlpModel, X, AX, noise: NoiseConfig, eps_grid: Sequence[float],
                    n_mc: int = 200_000, rng: Optional[np.random.Generator] = None) -> ExpansionReport:
    """``AX`` holds one frozen augmentation A(x_i) per training point."""
    _require_scalar_smooth(model)
    rng = rng or np.random.default_rng(0)
    X = np.asarray(X, dtype=float)
    AX = np.asarray(AX, dtype=float)
    noise = noise.with_(epsilon_scale=None)
    terms = jsd_terms(model, X, AX, noise)
    taylor = _jsd_taylor(model, X, AX)
    moments = _joint_moments(X, AX, noise)
    report = ExpansionReport("theorem2", terms=terms)
    for eps in eps_grid:
        s = sample_perturbations(*X.shape, noise, n_mc, rng)
        values, cv, cv_mean = jsd_mc(model, X, AX, noise, eps, s, taylor, moments)
        report.points.append(_mc_point(eps, values, cv, cv_mean, jsd_prediction(terms, eps), X.shape[0]))
    return _finish(report)


# ---- Taylor expansion of the generalized JSD ----------------------------------------------
def _prob_jacobians(p_fn: Callable[[Tensor], Tensor], z: np.ndarray, dz: np.ndarray):
    """p(z), Jacobian rows grad p^k(z), and dz^T Hess p^k(z) dz for each class k."""
    with no_grad():
        p = p_fn(Tensor(z)).data.ravel()
    K = p.size
    grads, quad = np.empty((K, z.size)), np.empty(K)
    for k in range(K):
        fn = lambda t, k=k: ad.sum_(ad.getitem(ad.reshape(p_fn(t), (-1,)), k))
        _, (g,) = ad.value_and_grad(fn, z)
        grads[k] = g
        quad[k] = dz @ ad.hvp(fn, z, dz)
    return p, grads, quad


def jsd_taylor_prediction(p_fn, base_points, directions, second_directions, pi):
    """(zeroth, first, second)-order coefficients of JS_pi(p(z_l + R_l(eps)))."""
    from .objectives import jsd_k
    pi = np.asarray(pi, dtype=float)
    data = [_prob_jacobians(p_fn, np.asarray(z, float), np.asarray(dz, float))
            for z, dz in zip(base_points, directions)]
    P = np.array([d[0] for d in data])                      # (M+1, K)
    mixture = pi @ P
    logratio = np.log(P / mixture)
    first_dir = np.array([d[1] @ dz for d, dz in zip(data, directions)])   # grad p_l^k . dz_l
    second_dir = np.array([d[1] @ d2 for d, d2 in zip(data, second_directions)])
    quad = np.array([d[2] for d in data])
    c0 = jsd_k(list(P), pi)
    c1 = float(np.sum(pi[:, None] * first_dir * logratio))
    c2 = 0.5 * float(np.sum(pi[:, None] * ((quad + second_dir) * logratio + first_dir ** 2 / P)))
    c2 -= 0.5 * float(np.sum((pi @ first_dir) ** 2 / mixture))
    return c0, c1, c2


def taylor_jsd_check(p_fn, base_points, directions, second_directions, pi,
                     eps_grid: Sequence[float]) -> ExpansionReport:
    """Compare the second-order expansion with direct evaluation along the paths."""
    from .objectives import jsd_k
    c0, c1, c2 = jsd_taylor_prediction(p_fn, base_points, directions, second_directions, pi)
    report = ExpansionReport("proposition1", terms={"order0": c0, "order1": c1, "order2": c2})
    for eps in eps_grid:
        probs = []
        with no_grad():
            for z, dz, d2z in zip(base_points, directions, second_directions):
                zz = np.asarray(z, float) + eps * np.asarray(dz, float) + 0.5 * eps ** 2 * np.asarray(d2z, float)
                probs.append(p_fn(Tensor(zz)).data.ravel())
        exact = jsd_k(probs, pi)
        pred = c0 + eps * c1 + eps ** 2 * c2
        residual = abs(exact - pred)
        report.points.append(ExpansionPoint(float(eps), exact, 0.0, exact, 0.0, pred, residual,
                                            bool(residual > 1e-14)))
    return _finish(report)


# ---- adversarial lower bound for linear models ---------------------------------------------
@dataclass
class LinearInstance:
    theta: np.ndarray
    X: np.ndarray
    AX: np.ndarray
    y: np.ndarray

    @property
    def model(self) -> MlpModel:
        d = self.theta.size
        return MlpModel([d, 1], "linear", {"W0": self.theta.reshape(d, 1).copy()}, [0], bias=False)

    @property
    def c_x(self) -> float:
        return float(np.min(np.linalg.norm(self.X, axis=1)) / np.sqrt(self.X.shape[1]))


def in_theta_set(theta, X, y) -> bool:
    """y_i p(x_i) + (y_i - 1) p(x_i) >= 0 for all i, i.e. sign-consistent logits."""
    p = X @ theta
    return bool(np.all(y * p + (y - 1) * p >= 0))


def sample_linear_instance(n: int, d: int, rng: np.random.Generator, aug_scale: float = 0.3,
                           max_attempts: int = 1000) -> LinearInstance:
    """Centered data, centered frozen augmentation, and theta drawn inside the feasible set."""
    X = rng.standard_normal((n, d)) * rng.uniform(0.5, 2.0, size=(n, 1))
    X -= X.mean(axis=0)
    teacher = rng.standard_normal(d)
    y = (X @ teacher >= 0).astype(float)
    AX = X + aug_scale * rng.standard_normal((n, d))
    AX -= AX.mean(axis=0)
    for _ in range(max_attempts):
        theta = teacher + 0.3 * np.linalg.norm(teacher) / np.sqrt(d) * rng.standard_normal(d)
        if in_theta_set(theta, X, y):
            return LinearInstance(theta, X, AX, y)
    raise SamplingError(f"no feasible theta after {max_attempts} attempts")


def adversarial_loss_closed_form(theta, x, y, radius) -> float:
    """max over ||delta|| <= radius of l(theta^T (x + delta), y); h is monotone."""
    shift = radius * np.linalg.norm(theta)
    f = x @ theta - shift if y == 1 else x @ theta + shift
    return float(bce(f, y))


def adversarial_loss_pga(theta, x, y, radius, steps: int = 50) -> float:
    """Projected normalized-gradient ascent on the l2 ball, step radius / 10."""
    delta = np.zeros_like(x)
    step = radius / 10.0
    th = Tensor(theta)
    for _ in range(steps):
        leaf = Tensor(delta, requires_grad=True)
        f = ad.sum_((Tensor(x) + leaf) * th)
        loss = ad.softplus(f) - f * float(y)
        (g,) = ad.grad(loss, [leaf])
        gn = np.linalg.norm(g.data)
        if gn == 0:
            break
        delta = delta + step * g.data / gn
        norm = np.linalg.norm(delta)
        if norm > radius:
            delta *= radius / norm
    return float(bce((x + delta) @ theta, y))


@dataclass
class BoundTrial:
    trial: int
    eps: float
    gamma: float
    lhs: float
    lhs_se: float
    adversarial: float
    stability: float
    regularizer: float
    rhs: float
    slack: float
    lhs_second_order: float
    radii_min: float
    pga_gap: float


@dataclass
class BoundReport:
    trials: list = field(default_factory=list)
    c3: float = 0.0

    def to_dict(self) -> dict:
        return {"c3": self.c3, "trials": [asdict(t) for t in self.trials]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def tolerance(self, t: BoundTrial, k: float = 3.0) -> float:
        return k * t.lhs_se + self.c3 * t.eps ** 3

    def passed(self, t: BoundTrial, k: float = 3.0) -> bool:
        return t.slack >= -self.tolerance(t, k)


def bound_terms(inst: LinearInstance, noise: NoiseConfig, eps: float, s2_tilde: float):
    """Right-hand side pieces for gamma = 1 scaling: adversarial loss, stability term,
    the two regularizer parts (margin part, S2 part), the radii, and the max gap
    between the closed-form inner max and projected gradient ascent."""
    theta, X, AX, y = inst.theta, inst.X, inst.AX, inst.y
    n, d = X.shape
    m1, _ = lambda_tilde_moments(noise.alpha, noise.beta)
    p = X @ theta
    tnorm = np.linalg.norm(theta)
    cos = p / (tnorm * np.linalg.norm(X, axis=1))
    radii = eps * m1 * inst.c_x * np.sqrt(d) * np.abs(cos)
    adv = np.array([adversarial_loss_closed_form(theta, X[i], y[i], radii[i]) for i in range(n)])
    pga = np.array([adversarial_loss_pga(theta, X[i], y[i], radii[i]) for i in range(n)])
    stab = (1 - eps * m1) * float(np.mean(binary_jsd_rows(p, AX @ theta)))
    # ||v||^2 cos(theta, v)^2 = (theta . v)^2 / ||theta||^2, noise moments taken exactly
    eps_reg2 = (m1 ** 2 * np.mean(p ** 2)
                + noise.sigma_add ** 2 * NOISE_COV_SCALE * tnorm ** 2
                + noise.sigma_mult ** 2 * NOISE_COV_SCALE * (X ** 2) @ (theta ** 2))
    margin_reg = float(np.mean(np.abs(h2(p)) * eps_reg2) / 2)
    return float(adv.mean()), stab, margin_reg, s2_tilde, radii, float(np.max(np.abs(adv - pga)))


def verify_theorem3(n_trials: int, eps_grid: Sequence[float], gammas: Sequence[float],
                    noise: NoiseConfig, n: int = 16, d: int = 5, n_mc: int = 200_000,
                    rng: Optional[np.random.Generator] = None) -> BoundReport:
    """LHS (Monte Carlo NoisyMix loss) vs the adversarial + stability + regularizer bound."""
    rng = rng or np.random.default_rng(0)
    noise = noise.with_(epsilon_scale=None)
    report = BoundReport()
    fits = []
    for trial in range(n_trials):
        inst = sample_linear_instance(n, d, rng)
        model = inst.model
        nfm_t = nfm_terms(model, inst.X, inst.y, noise)
        jsd_tm = jsd_terms(model, inst.X, inst.AX, noise)
        taylor_n = _loss_taylor(model, inst.X, inst.y)
        mom_n = displacement_moments(inst.X, noise)
        taylor_j = _jsd_taylor(model, inst.X, inst.AX)
        mom_j = _joint_moments(inst.X, inst.AX, noise)
        for eps in eps_grid:
            s = sample_perturbations(n, d, noise, n_mc, rng)
            v_n, cv_n, cm_n = nfm_mc(model, inst.X, inst.y, noise, eps, s, taylor_n, mom_n)
            v_j, cv_j, cm_j = jsd_mc(model, inst.X, inst.AX, noise, eps, s, taylor_j, mom_j)
            adv, stab, margin_reg, s2_tilde, radii, gap = bound_terms(
                inst, noise, eps, jsd_tm["S2_tilde"])
            for gamma in gammas:
                diff = (v_n - cv_n) + gamma * (v_j - cv_j)
                diff_mean, lhs_se = mean_se(diff, n)
                lhs = diff_mean + float(cm_n + gamma * cm_j)
                second = nfm_prediction(nfm_t, eps) + gamma * jsd_prediction(jsd_tm, eps)
                reg = margin_reg + gamma * s2_tilde
                rhs = adv + gamma * stab + eps ** 2 * reg
                report.trials.append(BoundTrial(trial, float(eps), float(gamma), lhs, lhs_se, adv,
                                                stab, reg, rhs, lhs - rhs, second,
                                                float(radii.min()), gap))
                if eps > 0:
                    fits.append((eps ** 3, abs(lhs - second)))
    if fits:
        e3, r = np.array(fits).T
        report.c3 = float(e3 @ r / (e3 @ e3))
    return report
