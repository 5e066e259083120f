"""Sample-based mutual-information estimators and exact analytic oracles.

Two upper-bound estimators (CLUB and its leave-one-out variant) score a
batch against a known or variational conditional density; three lower-bound
estimators (NWJ, InfoNCE, MINE) score it with a learned positive critic.
Exact oracles for jointly Gaussian and discrete systems provide ground truth
for validating both directions.

Every estimator has a differentiable Tensor path (used inside training
losses, returned on ``MIEstimate.node``) and a plain numpy path that scales
to large sample counts by streaming over blocks.  The two paths compute the
same formula and are cross-checked in the test suite.

All values are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .density import LOG_2PI
from .tensor import Tensor

_NEG_MASK = -1e30
_SCORE_EPS = 1e-12


class Estimator(Enum):
    CLUB = "CLUB"
    L1OUT = "L1OUT"
    NWJ = "NWJ"
    INFONCE = "INFONCE"
    MINE = "MINE"
    GAUSSIAN_EXACT = "GAUSSIAN_EXACT"
    DISCRETE_EXACT = "DISCRETE_EXACT"


class Bound(Enum):
    UPPER = "UPPER"
    LOWER = "LOWER"
    EXACT = "EXACT"


BOUND_OF = {
    Estimator.CLUB: Bound.UPPER,
    Estimator.L1OUT: Bound.UPPER,
    Estimator.NWJ: Bound.LOWER,
    Estimator.INFONCE: Bound.LOWER,
    Estimator.MINE: Bound.LOWER,
    Estimator.GAUSSIAN_EXACT: Bound.EXACT,
    Estimator.DISCRETE_EXACT: Bound.EXACT,
}

UPPER_ESTIMATORS = (Estimator.CLUB, Estimator.L1OUT)
LOWER_ESTIMATORS = (Estimator.NWJ, Estimator.INFONCE, Estimator.MINE)


class CriticError(ValueError):
    """Raised when a critic violates its positive-output contract."""


@dataclass
class MIEstimate:
    """One MI value with its provenance: estimator, sample count, direction."""

    value: float
    estimator: Estimator
    n_samples: int
    bound: Bound
    node: Tensor | None = None

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.bound is not BOUND_OF[self.estimator]:
            raise ValueError(
                f"bound {self.bound} inconsistent with estimator {self.estimator}")

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "estimator": self.estimator.value,
            "n_samples": self.n_samples,
            "bound": self.bound.value,
        }


def _finish(value_node: Tensor, estimator: Estimator, n: int) -> MIEstimate:
    return MIEstimate(value=value_node.item(), estimator=estimator, n_samples=n,
                      bound=BOUND_OF[estimator], node=value_node)


# ---------------------------------------------------------------------------
# Critic
# ---------------------------------------------------------------------------

class FCCritic:
    """Two-layer fully connected scorer on a concatenated pair, softplus output.

    softplus keeps the score strictly positive as the lower-bound estimators
    require; a 1e-12 floor guards the subsequent logarithm against underflow.
    """

    def __init__(self, dim_u: int, dim_v: int, hidden: int,
                 rng: np.random.Generator, name: str = "critic"):
        d_in = dim_u + dim_v
        scale = 1.0 / math.sqrt(d_in)
        self.params: dict[str, Tensor] = {
            f"{name}.w1": Tensor(rng.normal(scale=scale, size=(d_in, hidden)), requires_grad=True),
            f"{name}.b1": Tensor(np.zeros(hidden), requires_grad=True),
            f"{name}.w2": Tensor(rng.normal(scale=1.0 / math.sqrt(hidden), size=(hidden, 1)),
                                 requires_grad=True),
            f"{name}.b2": Tensor(np.zeros(1), requires_grad=True),
        }
        self._name = name
        self.dim_u = dim_u
        self.dim_v = dim_v
        self.hidden = hidden

    def _p(self, key: str) -> Tensor:
        return self.params[f"{self._name}.{key}"]

    def score_pairs(self, u: Tensor, v: Tensor) -> Tensor:
        """Positive scores f(u_i, v_i) for paired rows; shape (N,)."""
        x = T.concat([u, v], axis=1)
        h = T.tanh(T.add(T.matmul(x, self._p("w1")), self._p("b1")))
        z = T.add(T.matmul(h, self._p("w2")), self._p("b2"))
        return T.add(_softplus(T.reshape(z, (z.shape[0],))), Tensor(_SCORE_EPS))

    def pairwise_log_scores(self, u: Tensor, v: Tensor) -> Tensor:
        """log f(u_i, v_j) for all pairs; shape (N, N)."""
        n = u.shape[0]
        w1 = self._p("w1")
        w1_u = T.slice_(w1, 0, 0, self.dim_u)
        w1_v = T.slice_(w1, 0, self.dim_u, self.dim_u + self.dim_v)
        a_u = T.add(T.matmul(u, w1_u), self._p("b1"))
        a_v = T.matmul(v, w1_v)
        h = T.tanh(T.add(T.reshape(a_u, (n, 1, self.hidden)),
                         T.reshape(a_v, (1, n, self.hidden))))
        w2 = T.reshape(self._p("w2"), (1, 1, self.hidden))
        z = T.add(T.sum(T.elementwise_mul(h, w2), axis=2), self._p("b2"))
        f = T.add(_softplus(z), Tensor(_SCORE_EPS))
        return T.log(f)

    # Raw numpy scoring for large evaluation batches (no graph).
    def scores_np(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        x = np.concatenate([u, v], axis=1)
        h = np.tanh(x @ self._p("w1").data + self._p("b1").data)
        z = (h @ self._p("w2").data + self._p("b2").data)[:, 0]
        return _softplus_np(z) + _SCORE_EPS

    def pairwise_log_scores_np(self, u_block: np.ndarray, v_block: np.ndarray) -> np.ndarray:
        w1 = self._p("w1").data
        a_u = u_block @ w1[: self.dim_u] + self._p("b1").data
        a_v = v_block @ w1[self.dim_u:]
        h = a_u[:, None, :] + a_v[None, :, :]
        np.tanh(h, out=h)
        z = h @ self._p("w2").data[:, 0] + self._p("b2").data[0]
        return np.log(_softplus_np(z) + _SCORE_EPS)


def _softplus(z: Tensor) -> Tensor:
    """log(1 + exp(z)) via a stacked logsumexp; stable in both tails."""
    stacked = T.concat([
        T.reshape(z, (1,) + z.shape),
        Tensor(np.zeros((1,) + z.shape)),
    ], axis=0)
    return T.logsumexp(stacked, axis=0)


def _softplus_np(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(z, 0.0)


def cyclic_shift(v: np.ndarray, by: int = 1) -> np.ndarray:
    """Shift rows to break pairings; a cheap derangement for N >= 2."""
    return np.roll(v, by, axis=0)


def _shift_rows_t(v: Tensor, by: int = 1) -> Tensor:
    n = v.shape[0]
    perm = np.zeros((n, n))
    perm[np.arange(n), (np.arange(n) - by) % n] = 1.0
    return T.matmul(Tensor(perm), v)


# ---------------------------------------------------------------------------
# Upper bounds: CLUB and leave-one-out
# ---------------------------------------------------------------------------

def pairwise_log_prob_matrix(mu: Tensor, log_var: Tensor, t: Tensor) -> Tensor:
    """M[i, j] = log N(t_j; mu_i, diag(exp(log_var))) for all (i, j)."""
    n, d = mu.shape
    inv_v = T.exp(T.scalar_mul(log_var, -1.0))
    inv_col = T.reshape(inv_v, (d, 1))
    tsq = T.matmul(T.elementwise_mul(t, t), inv_col)          # (n, 1), indexed by j
    musq = T.matmul(T.elementwise_mul(mu, mu), inv_col)       # (n, 1), indexed by i
    cross = T.matmul(T.elementwise_mul(mu, inv_v), T.transpose(t))  # (n, n)
    quad = T.add(T.sub(T.transpose(tsq), T.scalar_mul(cross, 2.0)), musq)
    const = T.add(T.sum(log_var), Tensor(d * LOG_2PI))
    return T.scalar_mul(T.add(quad, const), -0.5)


def _conditional_parts(samples, cond):
    """Evaluate a conditional model on the paired inputs; Tensor path."""
    x, t = samples
    x_t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))
    t_t = t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=float))
    g = cond.gaussian(x_t)
    return g.mu, g.log_var, t_t


def club_upper(samples, cond) -> MIEstimate:
    """Contrastive log-ratio upper bound on I(X; T) from paired samples.

    value = (1/N^2) sum_i sum_j [log p(t_i|x_i) - log p(t_j|x_i)], which is
    the mean of the diagonal of the pairwise log-density matrix minus the
    mean of the whole matrix.  Differentiable through the conditional.
    """
    mu, log_var, t = _conditional_parts(samples, cond)
    n = mu.shape[0]
    if n < 2:
        raise ValueError(f"club_upper needs at least 2 samples, got {n}")
    return _finish(club_node(mu, log_var, t), Estimator.CLUB, n)


def club_node(mu: Tensor, log_var: Tensor, t: Tensor) -> Tensor:
    return club_from_matrix(pairwise_log_prob_matrix(mu, log_var, t))


def club_from_matrix(m: Tensor) -> Tensor:
    """Assemble the contrastive bound from M[i, j] = log p(t_j | x_i):
    mean of the diagonal minus mean of the full matrix."""
    n = m.shape[0]
    diag_mean = T.scalar_mul(T.sum(T.elementwise_mul(m, Tensor(np.eye(n)))), 1.0 / n)
    return T.sub(diag_mean, T.mean(m))


def l1out_upper(samples, cond) -> MIEstimate:
    """Leave-one-out variant of the contrastive upper bound.

    value = (1/N) sum_i [log p(t_i|x_i) - log((1/(N-1)) sum_{j != i} p(t_i|x_j))]
    with the inner sum done by a masked logsumexp for stability.
    """
    mu, log_var, t = _conditional_parts(samples, cond)
    n = mu.shape[0]
    if n < 2:
        raise ValueError(f"l1out_upper needs at least 2 samples, got {n}")
    return _finish(l1out_node(mu, log_var, t), Estimator.L1OUT, n)


def l1out_node(mu: Tensor, log_var: Tensor, t: Tensor) -> Tensor:
    return l1out_from_matrix(pairwise_log_prob_matrix(mu, log_var, t))


def l1out_from_matrix(m: Tensor) -> Tensor:
    """Assemble the leave-one-out bound from M[i, j] = log p(t_j | x_i)."""
    n = m.shape[0]
    diag = T.sum(T.elementwise_mul(m, Tensor(np.eye(n))), axis=1)
    masked = T.add(m, Tensor(_NEG_MASK * np.eye(n)))
    # Column i of ``masked`` holds log p(t_i | x_j) over j != i.
    loo = T.sub(T.logsumexp(masked, axis=0), Tensor(math.log(n - 1)))
    return T.mean(T.sub(diag, loo))


def club_value(mu: np.ndarray, log_var: np.ndarray, t: np.ndarray) -> float:
    """Numpy CLUB; the all-pairs mean reduces to per-column moments, so this
    is exact in O(N d) without materializing the pairwise matrix."""
    n, d = mu.shape
    inv_v = np.exp(-log_var)
    diag_quad = ((t - mu) ** 2 * inv_v).sum(axis=1)
    term1 = -0.5 * (d * LOG_2PI + log_var.sum()) - 0.5 * diag_quad.mean()
    mean_t = t.mean(axis=0)
    mean_t2 = (t ** 2).mean(axis=0)
    mean_mu = mu.mean(axis=0)
    mean_mu2 = (mu ** 2).mean(axis=0)
    all_quad = ((mean_t2 - 2.0 * mean_mu * mean_t + mean_mu2) * inv_v).sum()
    term2 = -0.5 * (d * LOG_2PI + log_var.sum()) - 0.5 * all_quad
    return float(term1 - term2)


def l1out_value(mu: np.ndarray, log_var: np.ndarray, t: np.ndarray,
                block: int = 512) -> float:
    """Numpy leave-one-out bound, streaming over column blocks of the
    pairwise matrix so memory stays O(N * block).  The inner loop reuses one
    buffer; at large N the cost is memory bandwidth, not flops."""
    n, d = mu.shape
    inv_v = np.exp(-log_var)
    const = -0.5 * (d * LOG_2PI + log_var.sum())
    diag = const - 0.5 * (((t - mu) ** 2) * inv_v).sum(axis=1)
    tsq = ((t ** 2) * inv_v).sum(axis=1)
    musq = ((mu ** 2) * inv_v).sum(axis=1)
    scaled_mu = mu * inv_v
    total = 0.0
    for start in range(0, n, block):
        stop = min(start + block, n)
        # m[j, i] = const - 0.5 * (tsq_i - 2 cross_ji + musq_j), built in place.
        m = scaled_mu @ t[start:stop].T                          # (n, b)
        m += (const - 0.5 * tsq[start:stop])[None, :]
        m -= 0.5 * musq[:, None]
        cols = np.arange(start, stop)
        m[cols, cols - start] = -np.inf
        mx = m.max(axis=0)
        m -= mx[None, :]
        np.exp(m, out=m)
        loo = mx + np.log(m.sum(axis=0)) - math.log(n - 1)
        total += float(np.sum(diag[start:stop] - loo))
    return total / n


def _logsumexp_cols(m: np.ndarray) -> np.ndarray:
    mx = m.max(axis=0)
    with np.errstate(over="ignore"):
        return mx + np.log(np.exp(m - mx).sum(axis=0))


# ---------------------------------------------------------------------------
# Lower bounds: NWJ, InfoNCE, MINE
# ---------------------------------------------------------------------------

def _check_positive(scores: np.ndarray) -> None:
    if np.any(scores <= 0.0):
        raise CriticError(f"critic produced non-positive scores (min={scores.min()!r})")


def nwj_lower(joint, marginal, critic) -> MIEstimate:
    """Variational lower bound: E_joint[log f] - (1/e) E_marginal[f].

    ``joint`` is the paired batch (u_i, v_i); ``marginal`` the same u rows
    against a shuffled v breaking the pairing.  A constant critic f = e sits
    exactly at the zero point.
    """
    u, v = _rows(joint)
    u_m, v_m = _rows(marginal)
    n = u.shape[0]
    if n < 2:
        raise ValueError(f"nwj_lower needs at least 2 samples, got {n}")
    f_joint = critic.score_pairs(u, v)
    f_marg = critic.score_pairs(u_m, v_m)
    _check_positive(f_joint.data)
    _check_positive(f_marg.data)
    node = T.sub(T.mean(T.log(f_joint)), T.scalar_mul(T.mean(f_marg), 1.0 / math.e))
    return _finish(node, Estimator.NWJ, n)


def infonce_lower(batch, critic) -> MIEstimate:
    """Contrastive lower bound over in-batch negatives.

    value = (1/N) sum_i [log f(u_i, v_i) - log((1/N) sum_j f(u_i, v_j))];
    each summand is at most log N, so the estimate never exceeds log N.
    """
    u, v = _rows(batch)
    n = u.shape[0]
    if n < 2:
        raise ValueError(f"infonce_lower needs at least 2 samples, got {n}")
    log_f = critic.pairwise_log_scores(u, v)
    diag = T.sum(T.elementwise_mul(log_f, Tensor(np.eye(n))), axis=1)
    denom = T.sub(T.logsumexp(log_f, axis=1), Tensor(math.log(n)))
    node = T.mean(T.sub(diag, denom))
    return _finish(node, Estimator.INFONCE, n)


def mine_lower(batch, marginal, critic, ema: float | None,
               ema_rate: float = 0.01) -> tuple[MIEstimate, float]:
    """Donsker-Varadhan style bound with an EMA-corrected partition gradient.

    The reported value is mean log f(joint) - log(mean f(marginal)) on the
    current batch.  The gradient of the second term divides by the updated
    exponential moving average of the partition estimate instead of the batch
    value, the usual fix for its biased mini-batch gradient.  On the first
    call (``ema is None``) the EMA is initialized to the batch partition
    mean, which makes value and gradient agree exactly.
    """
    if not (0.0 < ema_rate <= 1.0):
        raise ValueError(f"ema_rate must be in (0, 1], got {ema_rate}")
    u, v = _rows(batch)
    u_m, v_m = _rows(marginal)
    n = u.shape[0]
    if n < 2:
        raise ValueError(f"mine_lower needs at least 2 samples, got {n}")
    f_joint = critic.score_pairs(u, v)
    f_marg = critic.score_pairs(u_m, v_m)
    _check_positive(f_joint.data)
    _check_positive(f_marg.data)
    mean_marg = T.mean(f_marg)
    marg_val = mean_marg.item()
    new_ema = marg_val if ema is None else (1.0 - ema_rate) * ema + ema_rate * marg_val
    # Surrogate whose forward value is -log(marg_val) but whose gradient is
    # -grad(mean f)/ema; the constant shift carries no gradient.
    shift = Tensor(marg_val / new_ema - math.log(marg_val))
    node = T.add(T.sub(T.mean(T.log(f_joint)), T.scalar_mul(mean_marg, 1.0 / new_ema)), shift)
    return _finish(node, Estimator.MINE, n), new_ema


def _rows(pair) -> tuple[Tensor, Tensor]:
    u, v = pair
    u = u if isinstance(u, Tensor) else Tensor(np.asarray(u, dtype=float))
    v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=float))
    if u.ndim != 2 or v.ndim != 2 or u.shape[0] != v.shape[0]:
        raise T.ShapeError(f"paired batch shapes {u.shape} and {v.shape} do not align")
    return u, v


def nwj_value(u: np.ndarray, v: np.ndarray, critic) -> float:
    f_joint = critic.scores_np(u, v)
    f_marg = critic.scores_np(u, cyclic_shift(v))
    _check_positive(f_joint)
    _check_positive(f_marg)
    return float(np.mean(np.log(f_joint)) - np.mean(f_marg) / math.e)


def infonce_value(u: np.ndarray, v: np.ndarray, critic,
                  batch_size: int = 512, row_block: int = 128,
                  col_block: int = 512) -> float:
    """Numpy InfoNCE.

    The bound is defined per batch (its ceiling is log of the batch size),
    so large sample sets are scored as the mean over consecutive
    ``batch_size`` batches - the standard evaluation convention, and each
    batch's value is itself a valid lower bound.  Within a batch the
    pairwise scores stream in (row, column) tiles.
    """
    n = u.shape[0]
    if n <= batch_size:
        return _infonce_single_batch(u, v, critic, row_block, col_block)
    values = []
    for b0 in range(0, n, batch_size):
        b1 = min(b0 + batch_size, n)
        if b1 - b0 < 2:
            break
        values.append(_infonce_single_batch(u[b0:b1], v[b0:b1], critic,
                                             row_block, col_block))
    return float(np.mean(values))


def _infonce_single_batch(u: np.ndarray, v: np.ndarray, critic,
                          row_block: int, col_block: int) -> float:
    n = u.shape[0]
    diag = np.log(critic.scores_np(u, v))
    total = 0.0
    for r0 in range(0, n, row_block):
        r1 = min(r0 + row_block, n)
        running = np.full(r1 - r0, -np.inf)
        for c0 in range(0, n, col_block):
            c1 = min(c0 + col_block, n)
            tile = critic.pairwise_log_scores_np(u[r0:r1], v[c0:c1])
            running = np.logaddexp(running, _logsumexp_cols(tile.T))
        total += float(np.sum(diag[r0:r1] - (running - math.log(n))))
    return total / n


def mine_value(u: np.ndarray, v: np.ndarray, critic) -> float:
    f_joint = critic.scores_np(u, v)
    f_marg = critic.scores_np(u, cyclic_shift(v))
    _check_positive(f_joint)
    _check_positive(f_marg)
    return float(np.mean(np.log(f_joint)) - math.log(np.mean(f_marg)))


# ---------------------------------------------------------------------------
# Exact oracles
# ---------------------------------------------------------------------------

def gaussian_mi_oracle(rho: float, d: int) -> MIEstimate:
    """I(X; T) for d independent unit-variance pairs with correlation rho:
    -(d/2) ln(1 - rho^2)."""
    if not abs(rho) < 1.0:
        raise ValueError(f"|rho| must be < 1, got {rho}")
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    value = -0.5 * d * math.log(1.0 - rho * rho)
    return MIEstimate(value=value, estimator=Estimator.GAUSSIAN_EXACT,
                      n_samples=1, bound=Bound.EXACT)


def discrete_mi_oracle(joint: np.ndarray) -> MIEstimate:
    """Brute-force MI of a discrete joint probability table, 0 ln 0 := 0."""
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"joint table must be 2-D, got shape {p.shape}")
    if np.any(p < 0.0):
        raise ValueError("joint table has negative entries")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"joint table sums to {p.sum()!r}, not 1")
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    mask = p > 0.0
    value = float(np.sum(p[mask] * np.log(p[mask] / (pa @ pb)[mask])))
    return MIEstimate(value=value, estimator=Estimator.DISCRETE_EXACT,
                      n_samples=1, bound=Bound.EXACT)


def gaussian_joint_mi_oracle(cov: np.ndarray, dim_a: int) -> MIEstimate:
    """I(A; B) of a jointly Gaussian vector split after ``dim_a`` coordinates:
    (1/2) ln(det S_A det S_B / det S)."""
    s = np.asarray(cov, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"covariance must be square, got shape {s.shape}")
    if not (0 < dim_a < s.shape[0]):
        raise ValueError(f"dim_a={dim_a} must split {s.shape[0]} coordinates")
    if not np.allclose(s, s.T, atol=1e-10):
        raise ValueError("covariance is not symmetric")
    try:
        np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        raise ValueError("covariance is not positive definite") from None
    sign_a, ld_a = np.linalg.slogdet(s[:dim_a, :dim_a])
    sign_b, ld_b = np.linalg.slogdet(s[dim_a:, dim_a:])
    sign_all, ld_all = np.linalg.slogdet(s)
    if min(sign_a, sign_b, sign_all) <= 0:
        raise ValueError("covariance block determinants are not positive")
    value = 0.5 * (ld_a + ld_b - ld_all)
    return MIEstimate(value=value, estimator=Estimator.GAUSSIAN_EXACT,
                      n_samples=1, bound=Bound.EXACT)


# ---------------------------------------------------------------------------
# Benchmark helpers: correlated Gaussian pairs and critic training
# ---------------------------------------------------------------------------

def correlated_gaussian_pairs(rho: float, d: int, n: int,
                              rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw n pairs with t = rho x + sqrt(1 - rho^2) eps, per dimension."""
    x = rng.standard_normal((n, d))
    t = rho * x + math.sqrt(1.0 - rho * rho) * rng.standard_normal((n, d))
    return x, t


def true_gaussian_conditional(rho: float, d: int):
    """The exact conditional t | x ~ N(rho x, (1 - rho^2) I) as a frozen model."""
    from .density import FixedGaussianConditional

    return FixedGaussianConditional(
        a=rho * np.eye(d), log_var=np.full(d, math.log(1.0 - rho * rho)))


def train_critic(estimator: Estimator, rho: float, d: int, seed: int,
                 steps: int = 1200, batch: int = 256, hidden: int = 64,
                 lr: float = 0.05, momentum: float = 0.9) -> FCCritic:
    """Fit a critic by ascending the chosen lower bound on fresh batches.

    The sampler draws new correlated pairs each step, so the critic never
    sees the evaluation batch.
    """
    if estimator not in LOWER_ESTIMATORS:
        raise ValueError(f"{estimator} is not a lower-bound estimator")
    from .optim import MomentumSGD

    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(17,)))
    critic = FCCritic(d, d, hidden, rng)
    opt = MomentumSGD(critic.params, lr=lr, momentum=momentum)
    ema: float | None = None
    if estimator is Estimator.INFONCE:
        # The pairwise score matrix makes each step O(batch^2); a smaller
        # batch converges in far less wall-clock time at equal quality.
        batch = min(batch, 64)
        steps = min(steps, 500)
    for _ in range(steps):
        u, v = correlated_gaussian_pairs(rho, d, batch, rng)
        if estimator is Estimator.NWJ:
            est = nwj_lower((u, v), (u, cyclic_shift(v)), critic)
        elif estimator is Estimator.INFONCE:
            est = infonce_lower((u, v), critic)
        else:
            est, ema = mine_lower((u, v), (u, cyclic_shift(v)), critic, ema)
        loss = T.scalar_mul(est.node, -1.0)
        opt.step(T.backward(loss))
    return critic


def bound_direction_cell(rho: float, d: int, n: int = 10_000,
                         seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
                         train_steps: int = 400, hidden: int = 32) -> dict:
    """Evaluate every estimator on one (rho, d) cell of the benchmark grid.

    Returns oracle value plus, per estimator, the per-seed estimates.  Upper
    bounds score the exact conditional; lower bounds train a fresh critic
    per seed (a lighter recipe than the default - direction, not tightness,
    is what the benchmark asserts) and evaluate on a held-out draw.
    """
    oracle = gaussian_mi_oracle(rho, d).value
    values: dict[str, list[float]] = {}
    for est in (*UPPER_ESTIMATORS, *LOWER_ESTIMATORS):
        per_seed = []
        for seed in seeds:
            critic = None
            if est in LOWER_ESTIMATORS:
                critic = train_critic(est, rho, d, seed, steps=train_steps,
                                      hidden=hidden)
            per_seed.append(
                evaluate_estimator(est, rho, d, n, seed, critic=critic).value)
        values[est.value] = per_seed
    return {"rho": rho, "d": d, "n": n, "oracle": oracle, "values": values}


def evaluate_estimator(estimator: Estimator, rho: float, d: int, n: int, seed: int,
                       critic: FCCritic | None = None,
                       train_steps: int = 1200) -> MIEstimate:
    """Draw a fresh batch of n pairs and evaluate one estimator on it.

    Upper bounds are scored against the exact conditional of the sampler;
    lower bounds use the supplied critic or train one first.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(23,)))
    x, t = correlated_gaussian_pairs(rho, d, n, rng)
    if estimator in UPPER_ESTIMATORS:
        cond = true_gaussian_conditional(rho, d)
        mu = cond.mu_np(x)
        lv = cond.log_var_np()
        value = club_value(mu, lv, t) if estimator is Estimator.CLUB else l1out_value(mu, lv, t)
        return MIEstimate(value=value, estimator=estimator, n_samples=n,
                          bound=Bound.UPPER)
    if estimator in LOWER_ESTIMATORS:
        if critic is None:
            critic = train_critic(estimator, rho, d, seed, steps=train_steps)
        if estimator is Estimator.NWJ:
            value = nwj_value(x, t, critic)
        elif estimator is Estimator.INFONCE:
            value = infonce_value(x, t, critic)
        else:
            value = mine_value(x, t, critic)
        return MIEstimate(value=value, estimator=estimator, n_samples=n,
                          bound=Bound.LOWER)
    raise ValueError(f"{estimator} is an oracle, not a sample-based estimator")
