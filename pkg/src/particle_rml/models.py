"""Truncated additive-noise state-space families and their exact score functions.

A model is a pair of conditional densities on compact boxes,

    p(x'|x) : state transition density on the state box X,
    q(y|x)  : observation density on the observation box Y,

obtained by truncating Gaussian additive-noise kernels

    X' = A(theta, X) + B(theta, X) * eps,     Y = C(theta, X) + D(theta, X) * eta

to the boxes and renormalizing.  The truncated normalizers are Gaussian
interval masses, so both the log-densities and their theta-gradients are
available in closed form.  All evaluators are vectorized over broadcastable
state/observation arrays and work in the log domain throughout.

Shipped instances are scalar-state / scalar-observation (d_x = d_y = 1); the
parameter vector theta may have any dimension d.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import log_ndtr

from .core import ParameterPoint, RngStream

__all__ = [
    "ModelEvaluationError",
    "SimulationError",
    "ModelSpec",
    "TruncatedGaussFamily",
    "ar1_family",
    "sv_family",
    "trans_density",
    "obs_density",
    "simulate",
]

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_MIN_SCALE = 1e-300


class ModelEvaluationError(RuntimeError):
    """A density evaluation received unusable inputs (non-finite, degenerate scale)."""


class SimulationError(RuntimeError):
    """Trajectory simulation failed (e.g. truncation rejection never accepts)."""


def _log_gauss_mass(a, b):
    """log( Phi(b) - Phi(a) ) for a < b, stable in both tails.

    Mirrors the usual three-case split: both endpoints left of zero, both
    right (use symmetry), or straddling (1 - both tails).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    out = np.empty(a.shape, dtype=float)

    case_left = b <= 0
    case_right = a > 0
    case_central = ~(case_left | case_right)

    if np.any(case_left):
        la = log_ndtr(a[case_left])
        lb = log_ndtr(b[case_left])
        out[case_left] = lb + np.log1p(-np.exp(la - lb))
    if np.any(case_right):
        la = log_ndtr(-b[case_right])
        lb = log_ndtr(-a[case_right])
        out[case_right] = lb + np.log1p(-np.exp(la - lb))
    if np.any(case_central):
        ta = log_ndtr(a[case_central])
        tb = log_ndtr(-b[case_central])
        out[case_central] = np.log1p(-np.exp(ta) - np.exp(tb))
    return out


def _std_norm_logpdf(u):
    return -0.5 * np.square(u) - _LOG_SQRT_2PI


def _trunc_mass_terms(mean, scale, lo, hi):
    """Log interval mass of N(mean, scale^2) on [lo, hi] and its (mean, scale) derivatives.

    Returns (log_z, dlz_dmean, dlz_dscale), all broadcast to the shape of
    mean/scale.
    """
    u_lo = (lo - mean) / scale
    u_hi = (hi - mean) / scale
    log_z = _log_gauss_mass(u_lo, u_hi)
    # phi(u)/Z ratios, computed in log space so far tails flush to zero.
    r_lo = np.exp(_std_norm_logpdf(u_lo) - log_z)
    r_hi = np.exp(_std_norm_logpdf(u_hi) - log_z)
    dlz_dmean = (r_lo - r_hi) / scale
    dlz_dscale = (u_lo * r_lo - u_hi * r_hi) / scale
    return log_z, dlz_dmean, dlz_dscale


@dataclass
class ModelSpec:
    """Evaluator bundle for one parameterized state-space model.

    ``log_p(theta, x, x')`` and ``log_q(theta, x, y)`` return log-densities
    (``-inf`` outside the boxes); ``grad_log_p`` / ``grad_log_q`` return the
    theta-gradient stacked on a leading axis of length ``d``.  ``sample_p`` /
    ``sample_q`` draw from the truncated kernels by rejection.  All callables
    accept broadcastable arrays for the state/observation arguments.
    """

    d_x: int
    d_y: int
    d: int
    x_box: tuple
    y_box: tuple
    log_p: Callable
    grad_log_p: Callable
    log_q: Callable
    grad_log_q: Callable
    sample_p: Callable
    sample_q: Callable
    # Optional fused representation: log p(theta, x_i, x'_j) and each gradient
    # component as quadratic polynomials in x'_j with coefficients depending
    # on x_i.  Enables the O(N^2) interaction step to run as two BLAS calls.
    trans_quadratic: Optional[Callable] = None
    # Optional combined (log q, grad log q) evaluator sharing the truncation
    # normalizer between value and gradient; falls back to separate calls.
    obs_log_terms: Optional[Callable] = None
    density_floor_hint: Optional[float] = None
    name: str = "custom"
    constants: dict = field(default_factory=dict)

    def theta_of(self, theta):
        t = theta.theta if isinstance(theta, ParameterPoint) else np.asarray(theta, float)
        if t.shape != (self.d,):
            raise ModelEvaluationError(f"theta must have shape ({self.d},), got {t.shape}")
        return t


@dataclass
class TruncatedGaussFamily:
    """Scalar additive-noise family with user-supplied drift/scale maps.

    ``a_mean(theta, x)`` and ``b_scale(theta, x)`` give the transition mean
    and (positive) scale; ``c_mean`` / ``d_scale`` the observation ones.  The
    ``d*_dtheta`` companions return the theta-Jacobian stacked on a leading
    axis of length ``d``.  Noise densities are standard normal; densities are
    truncated to ``x_box`` / ``y_box`` and renormalized with exact Gaussian
    interval masses.
    """

    d: int
    x_box: tuple
    y_box: tuple
    a_mean: Callable
    da_dtheta: Callable
    b_scale: Callable
    db_dtheta: Callable
    c_mean: Callable
    dc_dtheta: Callable
    d_scale: Callable
    dd_dtheta: Callable
    name: str = "trunc_gauss"
    constants: dict = field(default_factory=dict)
    rejection_cap: int = 100_000

    # -- internal pieces -------------------------------------------------

    def _check_scale(self, s):
        if np.any(~np.isfinite(s)) or np.any(np.abs(s) < _MIN_SCALE):
            raise ModelEvaluationError("degenerate or non-finite scale in model evaluation")
        return s

    def _log_kernel(self, mean, scale, value, box):
        lo, hi = box
        u = (value - mean) / scale
        log_z, _, _ = _trunc_mass_terms(mean, scale, lo, hi)
        lp = _std_norm_logpdf(u) - np.log(scale) - log_z
        inside = (value >= lo) & (value <= hi)
        return np.where(inside, lp, -np.inf)

    def _grad_log_kernel(self, mean, dmean, scale, dscale, value, box):
        lo, hi = box
        u = (value - mean) / scale
        _, dlz_dm, dlz_ds = _trunc_mass_terms(mean, scale, lo, hi)
        dl_dmean = u / scale - dlz_dm
        dl_dscale = (np.square(u) - 1.0) / scale - dlz_ds
        # dmean/dscale have a leading axis of length d.
        return dmean * dl_dmean[None, ...] + dscale * dl_dscale[None, ...]

    def _log_kernel_with_grad(self, mean, dmean, scale, dscale, value, box):
        """(log-density, theta-gradient) sharing one truncation-mass evaluation."""
        lo, hi = box
        u = (value - mean) / scale
        log_z, dlz_dm, dlz_ds = _trunc_mass_terms(mean, scale, lo, hi)
        lp = _std_norm_logpdf(u) - np.log(scale) - log_z
        inside = (value >= lo) & (value <= hi)
        lp = np.where(inside, lp, -np.inf)
        dl_dmean = u / scale - dlz_dm
        dl_dscale = (np.square(u) - 1.0) / scale - dlz_ds
        return lp, dmean * dl_dmean[None, ...] + dscale * dl_dscale[None, ...]

    def _sample_trunc(self, mean, scale, box, gen, cap):
        lo, hi = box
        mean, scale = np.broadcast_arrays(np.asarray(mean, float), np.asarray(scale, float))
        out = np.empty(mean.shape, dtype=float)
        pending = np.ones(mean.shape, dtype=bool)
        for _ in range(cap):
            k = int(pending.sum())
            if k == 0:
                return out
            cand = mean[pending] + scale[pending] * gen.standard_normal(k)
            ok = (cand >= lo) & (cand <= hi)
            idx = np.flatnonzero(pending)
            accepted = idx[ok]
            out.flat[accepted] = cand[ok]
            pending.flat[accepted] = False
        raise SimulationError(
            f"truncation rejection exceeded {cap} attempts; "
            "the box is likely mis-specified for this parameter"
        )

    # -- ModelSpec construction ------------------------------------------

    def to_model_spec(self) -> ModelSpec:
        fam = self

        def log_p(theta, x, xp):
            a = fam.a_mean(theta, x)
            b = fam._check_scale(fam.b_scale(theta, x))
            return fam._log_kernel(a, b, xp, fam.x_box)

        def grad_log_p(theta, x, xp):
            a = fam.a_mean(theta, x)
            b = fam._check_scale(fam.b_scale(theta, x))
            da = fam.da_dtheta(theta, x)
            db = fam.db_dtheta(theta, x)
            return fam._grad_log_kernel(a, da, b, db, xp, fam.x_box)

        def log_q(theta, x, y):
            c = fam.c_mean(theta, x)
            dsc = fam._check_scale(fam.d_scale(theta, x))
            return fam._log_kernel(c, dsc, y, fam.y_box)

        def grad_log_q(theta, x, y):
            c = fam.c_mean(theta, x)
            dsc = fam._check_scale(fam.d_scale(theta, x))
            dc = fam.dc_dtheta(theta, x)
            dd = fam.dd_dtheta(theta, x)
            return fam._grad_log_kernel(c, dc, dsc, dd, y, fam.y_box)

        def obs_log_terms(theta, x, y):
            c = fam.c_mean(theta, x)
            dsc = fam._check_scale(fam.d_scale(theta, x))
            dc = fam.dc_dtheta(theta, x)
            dd = fam.dd_dtheta(theta, x)
            return fam._log_kernel_with_grad(c, dc, dsc, dd, y, fam.y_box)

        def sample_p(theta, x, gen, cap=None):
            a = fam.a_mean(theta, x)
            b = fam._check_scale(fam.b_scale(theta, x))
            return fam._sample_trunc(a, b, fam.x_box, gen, cap or fam.rejection_cap)

        def sample_q(theta, x, gen, cap=None):
            c = fam.c_mean(theta, x)
            dsc = fam._check_scale(fam.d_scale(theta, x))
            return fam._sample_trunc(c, dsc, fam.y_box, gen, cap or fam.rejection_cap)

        def trans_quadratic(theta, x):
            """Coefficients of log p and grad log p as quadratics in x'.

            Returns (tc, gtc) with tc of shape (3, N) and gtc of shape
            (d, 3, N):  log p(theta, x_i, t) = tc[0,i] + tc[1,i] t + tc[2,i] t^2
            for t inside the state box, and likewise for each gradient
            component.
            """
            x = np.asarray(x, dtype=float)
            a = fam.a_mean(theta, x)
            b = fam._check_scale(fam.b_scale(theta, x))
            da = fam.da_dtheta(theta, x)
            db = fam.db_dtheta(theta, x)
            da = np.broadcast_to(np.asarray(da, float), (fam.d,) + x.shape)
            db = np.broadcast_to(np.asarray(db, float), (fam.d,) + x.shape)
            lo, hi = fam.x_box
            log_z, dlz_dm, dlz_ds = _trunc_mass_terms(a, b, lo, hi)
            inv_b2 = 1.0 / np.square(b)
            tc = np.stack([
                -0.5 * np.square(a) * inv_b2 - np.log(b) - _LOG_SQRT_2PI - log_z,
                a * inv_b2,
                -0.5 * inv_b2,
            ])
            # d log p = da * (u/b) + db * ((u^2-1)/b) - d log Z, expanded in x'.
            u_over_b = np.stack([-a * inv_b2, inv_b2, np.zeros_like(a)])
            u2m1_over_b = np.stack([
                np.square(a) * inv_b2 / b - 1.0 / b,
                -2.0 * a * inv_b2 / b,
                inv_b2 / b,
            ])
            gtc = (
                da[:, None, :] * u_over_b[None, :, :]
                + db[:, None, :] * u2m1_over_b[None, :, :]
            )
            gtc[:, 0, :] -= da * dlz_dm + db * dlz_ds
            return tc, gtc

        return ModelSpec(
            d_x=1,
            d_y=1,
            d=fam.d,
            x_box=fam.x_box,
            y_box=fam.y_box,
            log_p=log_p,
            grad_log_p=grad_log_p,
            log_q=log_q,
            grad_log_q=grad_log_q,
            sample_p=sample_p,
            sample_q=sample_q,
            trans_quadratic=trans_quadratic,
            obs_log_terms=obs_log_terms,
            name=fam.name,
            constants=dict(fam.constants),
        )


def ar1_family(sigma_x=1.0, sigma_y=1.0, x_box=(-20.0, 20.0), y_box=(-22.0, 22.0)) -> ModelSpec:
    """Truncated-Gaussian AR(1):  X' = theta[0] X + sigma_x eps,  Y = X + sigma_y eta.

    One free parameter (the drift coefficient); noise scales are fixed
    constants.
    """
    zero = lambda theta, x: np.zeros((1,) + np.shape(x))
    fam = TruncatedGaussFamily(
        d=1,
        x_box=tuple(map(float, x_box)),
        y_box=tuple(map(float, y_box)),
        a_mean=lambda theta, x: theta[0] * np.asarray(x, float),
        da_dtheta=lambda theta, x: np.asarray(x, float)[None, ...],
        b_scale=lambda theta, x: np.full(np.shape(x), float(sigma_x)),
        db_dtheta=zero,
        c_mean=lambda theta, x: np.asarray(x, float),
        dc_dtheta=zero,
        d_scale=lambda theta, x: np.full(np.shape(x), float(sigma_y)),
        dd_dtheta=zero,
        name="ar1",
        constants={"sigma_x": float(sigma_x), "sigma_y": float(sigma_y)},
    )
    return fam.to_model_spec()


def sv_family(obs_scale=1.0, x_box=(-6.0, 6.0), y_box=(-40.0, 40.0)) -> ModelSpec:
    """Stochastic-volatility-style model:  X' = theta[0] X + theta[1] eps,
    Y = obs_scale * exp(X/2) eta, truncated to the boxes.

    Two free parameters: the log-volatility persistence and its innovation
    scale.
    """
    x_arr = lambda x: np.asarray(x, float)
    fam = TruncatedGaussFamily(
        d=2,
        x_box=tuple(map(float, x_box)),
        y_box=tuple(map(float, y_box)),
        a_mean=lambda theta, x: theta[0] * x_arr(x),
        da_dtheta=lambda theta, x: np.stack([x_arr(x), np.zeros(np.shape(x))]),
        b_scale=lambda theta, x: np.full(np.shape(x), float(theta[1])),
        db_dtheta=lambda theta, x: np.stack([np.zeros(np.shape(x)), np.ones(np.shape(x))]),
        c_mean=lambda theta, x: np.zeros(np.shape(x)),
        dc_dtheta=lambda theta, x: np.zeros((2,) + np.shape(x)),
        d_scale=lambda theta, x: float(obs_scale) * np.exp(0.5 * x_arr(x)),
        dd_dtheta=lambda theta, x: np.zeros((2,) + np.shape(x)),
        name="sv",
        constants={"obs_scale": float(obs_scale)},
    )
    return fam.to_model_spec()


# ---------------------------------------------------------------------------
# Validated point operations


def _check_point(value, what):
    v = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ModelEvaluationError(f"non-finite {what}")
    return v


def trans_density(model: ModelSpec, theta, x, xp):
    """Validated pointwise transition density: (log p, grad log p).

    Returns ``-inf`` (and a zero gradient) when x' lies outside the state
    box.  Non-finite inputs are rejected.
    """
    t = model.theta_of(theta)
    x = _check_point(x, "state x")
    xp = _check_point(xp, "state x'")
    lp = np.asarray(model.log_p(t, x, xp), dtype=float)
    g = np.asarray(model.grad_log_p(t, x, xp), dtype=float)
    g = np.where(np.isfinite(lp)[None, ...], g, 0.0)
    if lp.ndim == 0:
        return float(lp), g.reshape(model.d)
    return lp, g


def obs_density(model: ModelSpec, theta, x, y):
    """Validated pointwise observation density: (log q, grad log q)."""
    t = model.theta_of(theta)
    x = _check_point(x, "state x")
    y = _check_point(y, "observation y")
    lq = np.asarray(model.log_q(t, x, y), dtype=float)
    g = np.asarray(model.grad_log_q(t, x, y), dtype=float)
    g = np.where(np.isfinite(lq)[None, ...], g, 0.0)
    if lq.ndim == 0:
        return float(lq), g.reshape(model.d)
    return lq, g


def simulate(model: ModelSpec, theta, n_steps: int, rng: RngStream, x0=None):
    """Simulate the truncated model for ``n_steps`` transitions.

    Returns ``(states, observations)`` with ``n_steps + 1`` states
    X_0..X_T and ``n_steps`` observations Y_1..Y_T (one per post-initial
    state).  Fully reproducible from the stream.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    t = model.theta_of(theta)
    lo, hi = model.x_box
    x = 0.5 * (lo + hi) if x0 is None else float(x0)
    if not (lo <= x <= hi):
        raise SimulationError("initial state outside the state box")
    gen = rng.generator()
    states = np.empty(n_steps + 1)
    obs = np.empty(n_steps)
    states[0] = x
    for k in range(n_steps):
        x = float(model.sample_p(t, x, gen))
        states[k + 1] = x
        obs[k] = float(model.sample_q(t, x, gen))
    return states, obs
