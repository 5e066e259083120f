"""Diagonal-covariance Gaussian conditionals.

These densities play two roles in the training objective: they are the
variational conditionals q(t|x) consumed by the contrastive upper-bound
estimators, and they are the per-modality distributions whose symmetric KL
divergence acts as the cross-modal alignment penalty.  Everything here is a
pure function of Tensors, so gradients flow into means and log-variances.

Log-variances are soft-clamped into [-10, 10] at construction: a collapsed
variance sends conditional log-densities to +/-inf and with it every
contrastive term, so the clamp is a stability guarantee rather than a
modelling choice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
LOG_2PI = math.log(2.0 * math.pi)


def clamp_log_var(log_var: Tensor) -> Tensor:
    """Pin log-variances into [-10, 10] with unit gradient on the interior."""
    over = T.relu(T.sub(log_var, Tensor(LOG_VAR_MAX)))
    under = T.relu(T.sub(Tensor(LOG_VAR_MIN), log_var))
    return T.add(T.sub(log_var, over), under)


@dataclass
class DiagGaussian:
    """A diagonal Gaussian N(mu, diag(exp(log_var))).

    ``mu`` may carry leading batch axes; ``log_var`` is either a matching
    array or a single (d,) vector shared across the batch.
    """

    mu: Tensor
    log_var: Tensor = field(repr=False)

    def __post_init__(self):
        self.mu = self.mu if isinstance(self.mu, Tensor) else Tensor(self.mu)
        lv = self.log_var if isinstance(self.log_var, Tensor) else Tensor(self.log_var)
        if lv.ndim == 0 or lv.shape[-1] != self.mu.shape[-1]:
            raise ShapeError(f"DiagGaussian: log_var shape {lv.shape} does not match mu {self.mu.shape}")
        self.log_var = clamp_log_var(lv)

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


def log_prob(g: DiagGaussian, t) -> Tensor:
    """Log-density of ``t`` in nats, summed over the final axis.

    For a single d-vector this is a scalar; batched inputs return one value
    per leading index.
    """
    t = t if isinstance(t, Tensor) else Tensor(t)
    if t.shape[-1:] != (g.dim,):
        raise ShapeError(f"log_prob: point shape {t.shape} does not match dimension {g.dim}")
    diff = T.sub(t, g.mu)
    inv_var = T.exp(T.scalar_mul(g.log_var, -1.0))
    quad = T.elementwise_mul(T.elementwise_mul(diff, diff), inv_var)
    per_dim = T.scalar_mul(T.add(T.add(quad, g.log_var), Tensor(LOG_2PI)), -0.5)
    return T.sum(per_dim, axis=per_dim.ndim - 1) if per_dim.ndim > 0 else per_dim


def sample(g: DiagGaussian, noise) -> Tensor:
    """Reparameterized draw mu + exp(log_var / 2) * noise.

    ``noise`` is a fixed standard-normal array, so the output stays a
    deterministic, differentiable function of mu and log_var.
    """
    noise = noise if isinstance(noise, Tensor) else Tensor(noise)
    if noise.shape != g.mu.shape:
        raise ShapeError(f"sample: noise shape {noise.shape} does not match mu {g.mu.shape}")
    std = T.exp(T.scalar_mul(g.log_var, 0.5))
    return T.add(g.mu, T.elementwise_mul(std, noise))


def kl_divergence(g1: DiagGaussian, g2: DiagGaussian) -> Tensor:
    """KL(g1 || g2) in nats; closed form, always >= 0.

    Per dimension: log s2 - log s1 + (s1^2 + (m1-m2)^2) / (2 s2^2) - 1/2.
    """
    if g1.dim != g2.dim:
        raise ShapeError(f"kl_divergence: dimensions differ ({g1.dim} vs {g2.dim})")
    var1 = T.exp(g1.log_var)
    inv_var2 = T.exp(T.scalar_mul(g2.log_var, -1.0))
    diff = T.sub(g1.mu, g2.mu)
    ratio = T.scalar_mul(
        T.elementwise_mul(T.add(var1, T.elementwise_mul(diff, diff)), inv_var2), 0.5
    )
    log_term = T.scalar_mul(T.sub(g2.log_var, g1.log_var), 0.5)
    per_dim = T.sub(T.add(log_term, ratio), Tensor(0.5))
    return T.sum(per_dim, axis=per_dim.ndim - 1) if per_dim.ndim > 0 else per_dim


def symmetric_kl(g1: DiagGaussian, g2: DiagGaussian) -> Tensor:
    """Average of the two directed KL divergences; symmetric, zero iff equal."""
    return T.scalar_mul(T.add(kl_divergence(g1, g2), kl_divergence(g2, g1)), 0.5)


def pool_sequence(gaussians: Sequence[DiagGaussian]) -> DiagGaussian:
    """Moment-matched pooling of token conditionals into one Gaussian.

    Treats the inputs as an equal-weight mixture: the pooled mean is the mean
    of means, and the pooled variance is mean(variance + mu^2) - pooled_mu^2,
    floored at exp(-10) so the log-variance stays inside the clamp range.
    """
    gs = list(gaussians)
    if not gs:
        raise ValueError("pool_sequence: empty sequence")
    d = gs[0].dim
    for g in gs:
        if g.dim != d:
            raise ShapeError(f"pool_sequence: mixed dimensions ({g.dim} vs {d})")
    rows_mu = [T.reshape(g.mu, (1, d)) for g in gs]
    rows_second = [
        T.reshape(T.add(T.exp(g.log_var), T.elementwise_mul(g.mu, g.mu)), (1, d)) for g in gs
    ]
    mu = T.mean(T.concat(rows_mu, axis=0), axis=0)
    second = T.mean(T.concat(rows_second, axis=0), axis=0)
    raw_var = T.sub(second, T.elementwise_mul(mu, mu))
    floor = math.exp(LOG_VAR_MIN)
    floored = T.add(raw_var, T.relu(T.sub(Tensor(np.full(d, floor)), raw_var)))
    return DiagGaussian(mu=mu, log_var=T.log(floored))


class AffineGaussianConditional:
    """Learned conditional x -> N(W x + b, diag(exp(log_var))).

    One affine layer for the mean plus a learned input-independent
    per-dimension log-variance.  Exposes both a Tensor path (for gradients)
    and a raw numpy path (for large evaluation batches).
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 name: str = "cond", init_log_var: float = 0.0):
        scale = 1.0 / math.sqrt(in_dim)
        self.params: dict[str, Tensor] = {
            f"{name}.w": Tensor(rng.normal(scale=scale, size=(in_dim, out_dim)), requires_grad=True),
            f"{name}.b": Tensor(np.zeros(out_dim), requires_grad=True),
            f"{name}.log_var": Tensor(np.full(out_dim, float(init_log_var)), requires_grad=True),
        }
        self._name = name
        self.in_dim = in_dim
        self.out_dim = out_dim

    @property
    def w(self) -> Tensor:
        return self.params[f"{self._name}.w"]

    @property
    def b(self) -> Tensor:
        return self.params[f"{self._name}.b"]

    @property
    def log_var(self) -> Tensor:
        return self.params[f"{self._name}.log_var"]

    def gaussian(self, x) -> DiagGaussian:
        x = x if isinstance(x, Tensor) else Tensor(x)
        mu = T.add(T.matmul(x, self.w), self.b)
        return DiagGaussian(mu=mu, log_var=self.log_var)

    def mu_np(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w.data + self.b.data

    def log_var_np(self) -> np.ndarray:
        return np.clip(self.log_var.data, LOG_VAR_MIN, LOG_VAR_MAX)


class FixedGaussianConditional:
    """A frozen conditional t|x ~ N(A x, diag(exp(log_var))).

    Used to hand the exact conditional of a synthetic joint distribution to
    the upper-bound estimators when validating them against analytic oracles.
    """

    def __init__(self, a: np.ndarray, log_var: np.ndarray):
        self.a = np.asarray(a, dtype=np.float64)
        self._log_var = np.asarray(log_var, dtype=np.float64)
        self.in_dim = self.a.shape[0]
        self.out_dim = self.a.shape[1]
        self.params: dict[str, Tensor] = {}

    def gaussian(self, x) -> DiagGaussian:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return DiagGaussian(mu=T.matmul(x, Tensor(self.a)), log_var=Tensor(self._log_var))

    def mu_np(self, x: np.ndarray) -> np.ndarray:
        return x @ self.a

    def log_var_np(self) -> np.ndarray:
        return np.clip(self._log_var, LOG_VAR_MIN, LOG_VAR_MAX)


@dataclass
class TokenConditionals:
    """A batch of per-token conditionals for one modality.

    ``mu`` and ``samples`` are (n_examples * tokens_per_example, d); the
    shared log-variance is (d,).  ``samples`` are reparameterized draws in
    training mode and equal to ``mu`` in evaluation mode.
    """

    mu: Tensor
    log_var: Tensor
    samples: Tensor
    n_examples: int
    tokens_per_example: int

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @property
    def n_tokens(self) -> int:
        return self.mu.shape[0]
