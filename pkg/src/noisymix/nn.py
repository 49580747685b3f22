"""Small fully connected networks and first-order optimizers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, NumericalError

ACTIVATIONS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "softplus": ad.softplus,
    "linear": lambda t: t,
}
SMOOTH = {"tanh", "softplus", "linear"}


@dataclass
class MlpModel:
    """Feed-forward net. ``params`` holds W0, b0, W1, b1, ... as float64 arrays.

    Layer index k (0 = input) names the representation entering weight matrix k,
    which is where mixing can happen.
    """

    widths: list[int]
    activation: str = "softplus"
    params: dict[str, np.ndarray] = field(default_factory=dict)
    mixable: list[int] = field(default_factory=lambda: [0])
    bias: bool = True

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        n_layers = len(self.widths) - 1
        for k in self.mixable:
            if not 0 <= k < n_layers:
                raise ConfigError(f"mixable layer {k} outside 0..{n_layers - 1}")

    @classmethod
    def init(cls, widths, rng: np.random.Generator, activation="softplus", mixable=(0,), bias=True):
        params = {}
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params[f"W{k}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            if bias:
                params[f"b{k}"] = np.zeros(fan_out)
        return cls(list(widths), activation, params, list(mixable), bias)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def is_smooth(self) -> bool:
        return self.activation in SMOOTH

    def param_names(self) -> list[str]:
        return list(self.params)

    def copy(self) -> "MlpModel":
        return MlpModel(list(self.widths), self.activation,
                        {k: v.copy() for k, v in self.params.items()}, list(self.mixable), self.bias)

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}


def _layer(h: Tensor, k: int, model: MlpModel, p: dict) -> Tensor:
    out = h @ p[f"W{k}"]
    if model.bias:
        out = out + p[f"b{k}"]
    if k < model.n_layers - 1:
        out = ACTIVATIONS[model.activation](out)
    return out


def _params(model: MlpModel, params):
    if params is None:
        return {k: Tensor(v) for k, v in model.params.items()}
    return params


def _check_batch(model: MlpModel, batch: Tensor):
    if batch.ndim != 2 or batch.shape[1] != model.widths[0]:
        raise DimensionError(f"batch shape {batch.shape} does not match input width {model.widths[0]}")


def forward_to(model: MlpModel, batch, layer: int, params=None) -> Tensor:
    """Representation entering weight matrix ``layer``."""
    p = _params(model, params)
    h = ad.ensure(batch)
    _check_batch(model, h)
    for k in range(layer):
        h = _layer(h, k, model, p)
    return h


def forward_from(model: MlpModel, h: Tensor, layer: int, params=None) -> Tensor:
    p = _params(model, params)
    for k in range(layer, model.n_layers):
        h = _layer(h, k, model, p)
    return h


def forward(model: MlpModel, batch, params=None) -> Tensor:
    """Logits of shape (B, d_out)."""
    return forward_from(model, forward_to(model, batch, 0, params), 0, params)


def forward_mixed(model: MlpModel, batch_a, batch_b, draw, cfg, params=None) -> Tensor:
    """Run both batches to ``draw.layer``, mix there with noise, continue once."""
    from .mixing import mix

    if draw.layer not in model.mixable:
        raise ConfigError(f"layer {draw.layer} is not mixable (mixable: {model.mixable})")
    a = ad.ensure(batch_a)
    b = ad.ensure(batch_b)
    if a.shape != b.shape:
        raise DimensionError(f"batch shapes differ: {a.shape} vs {b.shape}")
    ha = forward_to(model, a, draw.layer, params)
    hb = forward_to(model, b, draw.layer, params)
    return forward_from(model, mix(ha, hb, draw, cfg), draw.layer, params)


def forward_reference(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    """Plain-loop evaluation of the same arithmetic, used as a test oracle."""
    acts = {
        "relu": lambda z: z if z > 0 else 0.0,
        "tanh": np.tanh,
        "softplus": lambda z: float(np.logaddexp(0.0, z)),
        "linear": lambda z: z,
    }[model.activation]
    out = []
    for row in np.asarray(batch, dtype=float):
        h = list(row)
        for k in range(model.n_layers):
            W = model.params[f"W{k}"]
            nxt = []
            for j in range(W.shape[1]):
                z = sum(h[i] * W[i, j] for i in range(W.shape[0]))
                if model.bias:
                    z += model.params[f"b{k}"][j]
                nxt.append(acts(z) if k < model.n_layers - 1 else z)
            h = nxt
        out.append(h)
    return np.array(out)


@dataclass
class Optimizer:
    kind: str = "adam"
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")


def step(opt: Optimizer, model: MlpModel, grads: dict[str, np.ndarray]) -> MlpModel:
    """Apply one update in place and return the model."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
        if g.shape != model.params[name].shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}")
    if opt.kind == "sgd":
        for name, g in grads.items():
            model.params[name] = model.params[name] - opt.lr * g
        return model
    opt.t += 1
    c1 = 1.0 - opt.beta1 ** opt.t
    c2 = 1.0 - opt.beta2 ** opt.t
    for name, g in grads.items():
        m = opt.m.get(name, np.zeros_like(g))
        v = opt.v.get(name, np.zeros_like(g))
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
        opt.m[name], opt.v[name] = m, v
        model.params[name] = model.params[name] - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return model
