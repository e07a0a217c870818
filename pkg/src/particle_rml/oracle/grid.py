"""Exact filter, filter derivative and score on a finite state grid.

With M grid atoms and a counting-style reference measure (uniform atom
weight), probability measures become length-M vectors of atom masses and the
d-dimensional derivative measure becomes a d x M matrix of signed masses;
every operator of the filtering recursion is then dense M x M linear algebra,
exact up to floating point.

Two one-step updates are provided:

* the filter form (condition the propagated mass on the new observation),
* the predictor form (condition on the current observation, then propagate),

together with the per-step score

    H(xi, zeta; y) = [ <q(y), zeta> + <grad q(y), xi> ] / <q(y), xi>

evaluated at the predictor pair.  Accumulating H along the predictor chain
reproduces the gradient of the exact log-likelihood of the observation
sequence (Fisher identity), which is what the particle method estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..core import RngStream
from ..models import ModelSpec, _log_gauss_mass, _std_norm_logpdf

__all__ = [
    "GridModel",
    "GridFilterState",
    "grid_ar1_model",
    "grid_filter_update",
    "grid_predict",
    "grid_condition",
    "grid_predictor_update",
    "grid_gradient",
    "grid_score_sequence",
    "simulate_grid",
]


@dataclass
class GridModel:
    """Finite-grid state-space model with analytic parameter gradients.

    ``log_p_table(theta)`` returns the (M, M) log transition density with
    respect to the atom measure, so that sum_j exp(log_p[i, j]) * atom == 1
    for every row i.  ``log_q(theta, y)`` returns the (M,) log observation
    density at the atoms and ``grad_log_q`` its (d, M) theta-gradient.
    """

    points: np.ndarray          # (M,)
    atom: float                 # uniform atom weight of the reference measure
    d: int
    log_p_table: Callable       # theta -> (M, M)
    grad_log_p_table: Callable  # theta -> (d, M, M)
    log_q: Callable             # theta, y -> (M,)
    grad_log_q: Callable        # theta, y -> (d, M)
    y_box: tuple = (-np.inf, np.inf)
    sample_obs: Optional[Callable] = None  # theta, x_value, gen -> y
    name: str = "grid"
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 1 or self.points.shape[0] < 2:
            raise ValueError("grid needs at least two points")
        if not np.all(np.diff(self.points) > 0):
            raise ValueError("grid points must be strictly increasing")

    @property
    def m(self) -> int:
        return self.points.shape[0]

    def index_of(self, values) -> np.ndarray:
        """Atom indices of states that sit exactly on grid points."""
        idx = np.searchsorted(self.points, np.asarray(values, dtype=float))
        idx = np.clip(idx, 0, self.m - 1)
        return idx

    def tables(self, theta):
        """(P, glogP) with P the linear-domain transition density table."""
        lp = np.asarray(self.log_p_table(theta), dtype=float)
        gl = np.asarray(self.grad_log_p_table(theta), dtype=float)
        return np.exp(lp), gl

    def obs_tables(self, theta, y):
        lq = np.asarray(self.log_q(theta, y), dtype=float)
        gq = np.asarray(self.grad_log_q(theta, y), dtype=float)
        return np.exp(lq), gq

    def to_model_spec(self) -> ModelSpec:
        """Adapter so the generic particle machinery runs on the grid model.

        Particle positions are grid-point values; the samplers only ever
        return exact atom values, so index lookup is lossless.
        """
        gm = self

        def log_p(theta, x, xp):
            table = np.asarray(gm.log_p_table(theta), dtype=float)
            return table[gm.index_of(x), gm.index_of(xp)]

        def grad_log_p(theta, x, xp):
            table = np.asarray(gm.grad_log_p_table(theta), dtype=float)
            return table[:, gm.index_of(x), gm.index_of(xp)]

        def log_q(theta, x, y):
            return np.asarray(gm.log_q(theta, y), dtype=float)[gm.index_of(x)]

        def grad_log_q(theta, x, y):
            return np.asarray(gm.grad_log_q(theta, y), dtype=float)[:, gm.index_of(x)]

        def sample_p(theta, x, gen, cap=None):
            p = np.exp(np.asarray(gm.log_p_table(theta), dtype=float)) * gm.atom
            rows = gm.index_of(np.atleast_1d(x))
            u = gen.random(rows.shape[0])
            cum = np.cumsum(p[rows], axis=1)
            j = (u[:, None] > cum).sum(axis=1)
            out = gm.points[np.minimum(j, gm.m - 1)]
            return out if np.ndim(x) else float(out[0])

        def sample_q(theta, x, gen, cap=None):
            if gm.sample_obs is None:
                raise NotImplementedError("grid model lacks an observation sampler")
            return gm.sample_obs(theta, x, gen)

        return ModelSpec(
            d_x=1,
            d_y=1,
            d=gm.d,
            x_box=(float(gm.points[0]), float(gm.points[-1])),
            y_box=gm.y_box,
            log_p=log_p,
            grad_log_p=grad_log_p,
            log_q=log_q,
            grad_log_q=grad_log_q,
            sample_p=sample_p,
            sample_q=sample_q,
            name=gm.name + "-particles",
            constants=dict(gm.constants),
        )


@dataclass
class GridFilterState:
    """Atom masses of the filter (xi) and its derivative (zeta)."""

    xi: np.ndarray    # (M,)
    zeta: np.ndarray  # (d, M)

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        self.zeta = np.asarray(self.zeta, dtype=float)
        if self.zeta.ndim != 2 or self.zeta.shape[1] != self.xi.shape[0]:
            raise ValueError("zeta must have shape (d, M) matching xi")

    @classmethod
    def uniform(cls, gm: GridModel) -> "GridFilterState":
        return cls(np.full(gm.m, 1.0 / gm.m), np.zeros((gm.d, gm.m)))

    @classmethod
    def point_mass(cls, gm: GridModel, index: int) -> "GridFilterState":
        xi = np.zeros(gm.m)
        xi[index] = 1.0
        return cls(xi, np.zeros((gm.d, gm.m)))


def grid_filter_update(gm: GridModel, theta, y, s: GridFilterState) -> GridFilterState:
    """One step of the exact filter and its derivative.

    Propagates the masses through the transition table, tilts by the new
    observation density and renormalizes; the derivative follows the quotient
    rule, so the output derivative has total mass zero whenever it starts as
    the gradient of a probability (in particular from zeta = 0).
    """
    p, glp = gm.tables(theta)
    q, gq = gm.obs_tables(theta, y)

    u = s.xi @ p                     # predicted density at target atoms
    num_f = q * u
    denom = float(np.sum(num_f) * gm.atom)
    if denom <= 0.0:
        raise ZeroDivisionError("filter normalizer vanished; densities must be positive")
    f = num_f / denom

    # d/dtheta of q(y|x_j) * sum_i p(j|i) xi_i, split into its three terms.
    zp = s.zeta @ p                                  # (d, M)
    xp = np.einsum("i,kij->kj", s.xi, glp * p[None, :, :])
    h = q[None, :] * (zp + xp) + (gq * num_f[None, :])
    h /= denom
    big_h = h.sum(axis=1) * gm.atom                  # (d,)
    g = h - f[None, :] * big_h[:, None]
    return GridFilterState(num_f * gm.atom / denom, g * gm.atom)


def grid_predict(gm: GridModel, theta, s: GridFilterState) -> GridFilterState:
    """Pure propagation of (xi, zeta) through the transition kernel."""
    p, glp = gm.tables(theta)
    xi = (s.xi @ p) * gm.atom
    zeta = (s.zeta @ p + np.einsum("i,kij->kj", s.xi, glp * p[None, :, :])) * gm.atom
    return GridFilterState(xi, zeta)


def grid_condition(gm: GridModel, theta, y, s: GridFilterState):
    """Bayes update of (xi, zeta) by one observation; also returns the score term.

    The returned vector equals grad log of the predictive density of y under
    xi, i.e. the exact counterpart of the particle estimate H = W C + D.
    """
    q, gq = gm.obs_tables(theta, y)
    dq = gq * q[None, :]  # gradient of the density itself
    denom = float(q @ s.xi)
    if denom <= 0.0:
        raise ZeroDivisionError("conditioning normalizer vanished")
    score = (s.zeta @ q + dq @ s.xi) / denom
    xi = q * s.xi / denom
    zeta = (q[None, :] * s.zeta + dq * s.xi[None, :]) / denom - xi[None, :] * score[:, None]
    return GridFilterState(xi, zeta), score


def grid_predictor_update(gm: GridModel, theta, y, s: GridFilterState) -> GridFilterState:
    """One step of the exact one-step predictor and its derivative.

    Literal evaluation with the kernel r(x'|y, x) = p(x'|x) q(y|x): condition
    on the current observation, then propagate.
    """
    p, glp = gm.tables(theta)
    q, gq = gm.obs_tables(theta, y)

    wq = q * s.xi
    denom = float(np.sum(wq))
    if denom <= 0.0:
        raise ZeroDivisionError("predictor normalizer vanished")
    u = wq @ p
    f_mass = u * gm.atom / denom

    zq = q[None, :] * s.zeta
    h = (
        zq @ p
        + np.einsum("i,kij->kj", wq, glp * p[None, :, :])
        + (gq * wq[None, :]) @ p
    ) / denom
    big_h = h.sum(axis=1) * gm.atom
    g_mass = (h - (u / denom)[None, :] * big_h[:, None]) * gm.atom
    return GridFilterState(f_mass, g_mass)


def grid_gradient(gm: GridModel, theta, y, s: GridFilterState) -> np.ndarray:
    """Exact per-step score at a predictor pair (xi, zeta), given observation y."""
    q, gq = gm.obs_tables(theta, y)
    denom = float(q @ s.xi)
    if denom <= 0.0:
        raise ZeroDivisionError("score normalizer vanished")
    return (s.zeta @ q + (gq * q[None, :]) @ s.xi) / denom


def grid_score_sequence(gm: GridModel, theta, ys, init: Optional[GridFilterState] = None):
    """Exact log-likelihood and per-step scores along an observation sequence.

    Starts from the initial law (default uniform on the grid) with zero
    derivative, propagates once, and then alternates score / condition /
    propagate.  Returns ``(log_likelihood, H, state)`` where ``H`` stacks the
    per-step scores (n, d); their cumulative sum is the gradient of the exact
    log-likelihood of ``ys``.
    """
    ys = np.atleast_1d(np.asarray(ys, dtype=float))
    s = init if init is not None else GridFilterState.uniform(gm)
    s = grid_predict(gm, theta, s)
    loglik = 0.0
    scores = np.empty((ys.shape[0], gm.d))
    for k, y in enumerate(ys):
        q, _ = gm.obs_tables(theta, y)
        scores[k] = grid_gradient(gm, theta, y, s)
        loglik += float(np.log(q @ s.xi))
        s, _ = grid_condition(gm, theta, y, s)
        s = grid_predict(gm, theta, s)
    return loglik, scores, s


def simulate_grid(gm: GridModel, theta, n_steps: int, rng: RngStream):
    """Simulate the grid chain and observations; X_0 uniform over atoms."""
    if gm.sample_obs is None:
        raise NotImplementedError("grid model lacks an observation sampler")
    gen = rng.generator()
    p = np.exp(np.asarray(gm.log_p_table(theta), dtype=float)) * gm.atom
    states = np.empty(n_steps + 1, dtype=int)
    obs = np.empty(n_steps)
    states[0] = gen.integers(gm.m)
    for k in range(n_steps):
        states[k + 1] = gen.choice(gm.m, p=p[states[k]])
        obs[k] = gm.sample_obs(theta, gm.points[states[k + 1]], gen)
    return gm.points[states], obs


def grid_ar1_model(m_points=5, x_lo=-2.5, x_hi=2.5, sigma=0.6, sigma_y=0.4,
                   y_box=(-4.1, 4.1), atom=1.0) -> GridModel:
    """Discretized mean-reverting chain: softmax-normalized Gaussian moves.

    Transition density on the grid is proportional to a Gaussian kernel
    centered at theta[0] * g_i and normalized over the atoms, so rows sum to
    one exactly.  Observations are truncated Gaussians centered at the atom
    (parameter-free), which keeps the observation side of the score zero and
    the transition side fully exercised.
    """
    points = np.linspace(float(x_lo), float(x_hi), int(m_points))
    y_box = (float(y_box[0]), float(y_box[1]))
    sigma = float(sigma)
    sigma_y = float(sigma_y)
    atom = float(atom)

    def _kernel(theta):
        centers = theta[0] * points
        g = -0.5 * np.square((points[None, :] - centers[:, None]) / sigma)
        dg = (points[None, :] - centers[:, None]) * points[:, None] / sigma**2
        return g, dg

    def log_p_table(theta):
        g, _ = _kernel(theta)
        m = g.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.sum(np.exp(g - m), axis=1) * atom)
        return g - lse[:, None]

    def grad_log_p_table(theta):
        g, dg = _kernel(theta)
        w = np.exp(g - g.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        return (dg - np.sum(w * dg, axis=1, keepdims=True))[None, :, :]

    def log_q(theta, y):
        u = (y - points) / sigma_y
        lz = _log_gauss_mass((y_box[0] - points) / sigma_y, (y_box[1] - points) / sigma_y)
        if not (y_box[0] <= y <= y_box[1]):
            return np.full(points.shape, -np.inf)
        return _std_norm_logpdf(u) - np.log(sigma_y) - lz

    def grad_log_q(theta, y):
        return np.zeros((1, points.shape[0]))

    def sample_obs(theta, x_value, gen):
        for _ in range(100_000):
            y = x_value + sigma_y * gen.standard_normal()
            if y_box[0] <= y <= y_box[1]:
                return float(y)
        raise RuntimeError("observation rejection sampler failed")

    return GridModel(
        points=points,
        atom=atom,
        d=1,
        log_p_table=log_p_table,
        grad_log_p_table=grad_log_p_table,
        log_q=log_q,
        grad_log_q=grad_log_q,
        y_box=y_box,
        sample_obs=sample_obs,
        name="grid_ar1",
        constants={"sigma": sigma, "sigma_y": sigma_y},
    )
