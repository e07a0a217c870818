"""Particle core: mixture propagation, interaction matrices, weight and score updates.

One step of the method, written in matrix form:

    A[i, j] = r(x'_j | y, x_i) / sum_k r(x'_j | y, x_k)       (column-stochastic)
    B[:, j] = sum_k grad r(x'_j | y, x_k) / sum_k r(x'_j | y, x_k)
    C[i]    = q(y | x_i) / sum_k q(y | x_k)  -  1/N           (sums to zero)
    D       = sum_k grad q(y | x_k) / sum_k q(y | x_k)

with r(x'|y, x) = p(x'|x) q(y|x).  The derivative weights evolve as
W' = W A + B and the per-step score estimate is H = W C + D.  New particle
positions are drawn from the observation-weighted mixture of transition
kernels: ancestor j with probability proportional to q(y | x_j), then
x' ~ p(.|x_j).

All N x N interactions are computed as dense blocks in the log domain with a
per-column log-sum-exp pivot.  numpy's pairwise reductions keep the results
bit-stable for a fixed input; no scheduling-dependent reduction order is used
anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .models import ModelSpec

__all__ = [
    "DegeneracyError",
    "ParticleSystem",
    "InteractionMatrices",
    "StepWorkspace",
    "draw_ancestors",
    "obs_log_terms",
    "propagate",
    "build_interaction",
    "build_observation_terms",
    "update_weights",
    "gradient_estimate",
    "reduced_weight_update",
    "centered_weight_norm",
]

# A column whose unnormalized log-mass falls below this is treated as numerical
# collapse rather than silently flushed to zero.
LOG_MASS_FLOOR = -700.0


class DegeneracyError(RuntimeError):
    """All particle weights collapsed; carries the offending step index."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message + (f" (step {step})" if step is not None else ""))
        self.step = step


@dataclass
class ParticleSystem:
    """N particle positions plus the d x N filter-derivative weight matrix."""

    positions: np.ndarray  # (N,)
    weights: np.ndarray    # (d, N)
    n: int = 0

    def __post_init__(self):
        self.positions = np.atleast_1d(np.asarray(self.positions, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.ndim != 2 or self.weights.shape[1] != self.positions.shape[0]:
            raise ValueError("weights must have shape (d, N) matching positions")
        if self.positions.shape[0] < 1:
            raise ValueError("need at least one particle")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weight entries must be finite")

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.weights.shape[0]


@dataclass
class InteractionMatrices:
    """Interaction blocks of one step; built in two halves.

    ``a`` (N x N, column-stochastic) and ``b`` (d x N) drive the weight
    update; ``c`` (N, zero-sum) and ``d`` (d,) drive the score estimate.
    """

    a: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None
    d: Optional[np.ndarray] = None


def _logsumexp(v):
    m = np.max(v)
    if m == -np.inf:
        return -np.inf
    return m + np.log(np.sum(np.exp(v - m)))


def obs_log_terms(model: ModelSpec, theta, positions, y):
    """(log q, grad log q) at the given positions, via the fused hook if present."""
    t = model.theta_of(theta)
    x = np.atleast_1d(np.asarray(positions, dtype=float))
    if model.obs_log_terms is not None:
        lq, glq = model.obs_log_terms(t, x, y)
        return np.asarray(lq, dtype=float), np.asarray(glq, dtype=float)
    return (np.asarray(model.log_q(t, x, y), dtype=float),
            np.asarray(model.grad_log_q(t, x, y), dtype=float))


def draw_ancestors(log_obs_weights: np.ndarray, size: int, gen: np.random.Generator,
                   step: Optional[int] = None) -> np.ndarray:
    """Multinomial ancestor indices with probabilities softmax(log weights)."""
    lw = np.asarray(log_obs_weights, dtype=float)
    total = _logsumexp(lw)
    if total < LOG_MASS_FLOOR:
        raise DegeneracyError("observation weights underflowed in ancestor draw", step)
    p = np.exp(lw - np.max(lw))
    p /= p.sum()
    return gen.choice(lw.shape[0], size=size, p=p)


def propagate(model: ModelSpec, theta, system: ParticleSystem, y: float,
              gen: np.random.Generator, log_obs_weights=None) -> np.ndarray:
    """Draw N fresh positions from the observation-weighted mixture of kernels.

    Each new particle independently picks ancestor j with probability
    proportional to q(y | x_j) and then samples the truncated transition
    kernel p(.|x_j).  ``log_obs_weights`` may carry precomputed
    log q(y | x_j) values for exactly these positions and observation.
    """
    t = model.theta_of(theta)
    lo, hi = model.y_box
    if not (lo <= y <= hi):
        raise ValueError(f"observation {y} outside the observation box {model.y_box}")
    lq = (np.asarray(model.log_q(t, system.positions, y), dtype=float)
          if log_obs_weights is None else log_obs_weights)
    idx = draw_ancestors(lq, system.n_particles, gen, step=system.n)
    return np.asarray(model.sample_p(t, system.positions[idx], gen), dtype=float)


def build_interaction(model: ModelSpec, theta, old_positions, new_positions, y,
                      step: Optional[int] = None, obs_terms=None) -> InteractionMatrices:
    """Dense A (N x N) and B (d x N) blocks at the given transition.

    Exact log-domain evaluation with a per-column pivot; cost Theta(d N^2).
    """
    t = model.theta_of(theta)
    xo = np.atleast_1d(np.asarray(old_positions, dtype=float))
    xn = np.atleast_1d(np.asarray(new_positions, dtype=float))
    if obs_terms is None:
        obs_terms = obs_log_terms(model, t, xo, y)
    lq, glq = obs_terms
    lp = np.asarray(model.log_p(t, xo[:, None], xn[None, :]), dtype=float)
    glp = np.asarray(model.grad_log_p(t, xo[:, None], xn[None, :]), dtype=float)

    lr = lp + lq[:, None]
    m = np.max(lr, axis=0)
    e = np.exp(lr - m[None, :])
    s = np.sum(e, axis=0)
    log_mass = m + np.log(s)
    if np.any(~np.isfinite(log_mass)) or np.any(log_mass < LOG_MASS_FLOOR):
        raise DegeneracyError("interaction column mass underflowed", step)
    a = e / s[None, :]
    glr = glp + glq[:, :, None]
    b = np.einsum("ij,kij->kj", a, glr)
    return InteractionMatrices(a=a, b=b)


def build_observation_terms(model: ModelSpec, theta, positions, y,
                            step: Optional[int] = None, obs_terms=None) -> InteractionMatrices:
    """Centered observation weights C (N,) and score offset D (d,)."""
    t = model.theta_of(theta)
    x = np.atleast_1d(np.asarray(positions, dtype=float))
    if obs_terms is None:
        obs_terms = obs_log_terms(model, t, x, y)
    lq, glq = obs_terms
    total = _logsumexp(lq)
    if total < LOG_MASS_FLOOR:
        raise DegeneracyError("observation mass underflowed", step)
    w = np.exp(lq - np.max(lq))
    w /= w.sum()
    n = x.shape[0]
    c = w - 1.0 / n
    d = glq @ w
    return InteractionMatrices(c=c, d=d)


def update_weights(weights: np.ndarray, m: InteractionMatrices) -> np.ndarray:
    """W' = W A + B, exactly."""
    if m.a is None or m.b is None:
        raise ValueError("interaction matrices lack the A/B blocks")
    return weights @ m.a + m.b


def gradient_estimate(weights: np.ndarray, m: InteractionMatrices) -> np.ndarray:
    """H = W C + D, the per-step score estimate."""
    if m.c is None or m.d is None:
        raise ValueError("interaction matrices lack the C/D blocks")
    return weights @ m.c + m.d


def centered_weight_norm(weights: np.ndarray) -> float:
    """Frobenius norm of W (I - e e^T / N): the drift-free part of the weights."""
    centered = weights - weights.mean(axis=1, keepdims=True)
    return float(np.linalg.norm(centered))


class StepWorkspace:
    """Reusable buffers for the fused weight update at fixed (N, d, dtype)."""

    def __init__(self, n: int, d: int, dtype=np.float64):
        self.n = n
        self.d = d
        self.dtype = np.dtype(dtype)
        self.left = np.empty((n, 3), dtype=dtype)
        self.powers = np.empty((3, n), dtype=dtype)
        self.lr = np.empty((n, n), dtype=dtype)
        self.red = np.empty((1 + 4 * d, n), dtype=dtype)
        self.out = np.empty((1 + 4 * d, n), dtype=dtype)


def reduced_weight_update(model: ModelSpec, theta, old_positions, new_positions, y,
                          weights: np.ndarray, dtype=np.float64,
                          step: Optional[int] = None, obs_terms=None,
                          workspace: Optional[StepWorkspace] = None):
    """One fused weight update: returns (W A + B, column log-masses).

    Identical in exact arithmetic to ``update_weights(build_interaction(...))``
    but never materializes A when the model carries the quadratic transition
    representation: the whole N x N block reduces to two matrix products.
    ``dtype`` selects the working precision of the dense block (float32 is
    useful for very long runs; identities and oracles always use float64).
    """
    t = model.theta_of(theta)
    if model.trans_quadratic is None:
        m = build_interaction(model, t, old_positions, new_positions, y, step=step,
                              obs_terms=obs_terms)
        return update_weights(weights, m), None

    xo = np.atleast_1d(np.asarray(old_positions, dtype=float))
    xn = np.atleast_1d(np.asarray(new_positions, dtype=float))
    d = model.d
    tc, gtc = model.trans_quadratic(t, xo)
    if obs_terms is None:
        obs_terms = obs_log_terms(model, t, xo, y)
    lq, glq = obs_terms

    ws = workspace
    if ws is None or ws.n != xo.shape[0] or ws.d != d or ws.dtype != np.dtype(dtype):
        ws = StepWorkspace(xo.shape[0], d, dtype)

    # log r (i, j) = row0_i + tc1_i x'_j + tc2_i x'_j^2
    ws.left[:, 0] = tc[0] + lq
    ws.left[:, 1] = tc[1]
    ws.left[:, 2] = tc[2]
    ws.powers[0] = 1.0
    ws.powers[1] = xn
    ws.powers[2] = np.square(xn)
    lr = np.matmul(ws.left, ws.powers, out=ws.lr)

    m = lr.max(axis=0)
    lr -= m[None, :]
    np.exp(lr, out=lr)
    # Stack every column reduction into one product against exp(lr):
    # row 0: ones -> column masses; rows 1..d: W -> W E; then the three
    # quadratic coefficient rows of each gradient component -> B.
    ws.red[0] = 1.0
    ws.red[1:1 + d] = weights
    ws.red[1 + d:1 + 2 * d] = gtc[:, 0, :] + glq
    ws.red[1 + 2 * d:1 + 3 * d] = gtc[:, 1, :]
    ws.red[1 + 3 * d:] = gtc[:, 2, :]
    out = np.matmul(ws.red, lr, out=ws.out)

    s = out[0].astype(np.float64)
    log_mass = m.astype(np.float64) + np.log(s)
    if np.any(~np.isfinite(log_mass)) or np.any(log_mass < LOG_MASS_FLOOR):
        raise DegeneracyError("interaction column mass underflowed", step)
    xn64 = xn.astype(np.float64)
    wa = out[1:1 + d].astype(np.float64)
    b = (
        out[1 + d:1 + 2 * d].astype(np.float64)
        + out[1 + 2 * d:1 + 3 * d].astype(np.float64) * xn64[None, :]
        + out[1 + 3 * d:].astype(np.float64) * np.square(xn64)[None, :]
    )
    return (wa + b) / s[None, :], log_mass
