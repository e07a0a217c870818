"""Shared test utilities: literal fraction-form references and small model builders.

The fraction forms below translate the per-particle update and score formulas
term by term (sums of density products, one fraction per particle), with no
log-domain tricks and no matrix algebra, so they are an independent check of
the production implementations.
"""

import numpy as np

from particle_rml.models import ModelSpec, TruncatedGaussFamily


def fraction_weight_update(model, theta, x_old, x_new, y, weights):
    """Literal per-particle weight update (index j in both denominators)."""
    n = len(x_old)
    p = np.exp(model.log_p(theta, x_old[:, None], x_new[None, :]))
    q = np.exp(model.log_q(theta, x_old, y))
    gp = model.grad_log_p(theta, x_old[:, None], x_new[None, :]) * p[None, :, :]
    gq = model.grad_log_q(theta, x_old, y) * q[None, :]
    out = np.empty_like(weights)
    for i in range(n):
        den = float((p[:, i] * q).sum())
        num_grad = (p[:, i][None, :] * gq + gp[:, :, i] * q[None, :]).sum(axis=1)
        num_w = (p[:, i] * q * weights).sum(axis=1)
        out[:, i] = num_grad / den + num_w / den
    return out


def fraction_score(model, theta, x_new, y_next, weights):
    """Literal score fraction: centered weights plus observation gradient."""
    q = np.exp(model.log_q(theta, x_new, y_next))
    gq = model.grad_log_q(theta, x_new, y_next) * q[None, :]
    w_bar = weights.mean(axis=1, keepdims=True)
    num = (q[None, :] * (weights - w_bar) + gq).sum(axis=1)
    return num / q.sum()


def flat_obs_model(x_box=(-3.0, 3.0), y_box=(-4.0, 4.0)) -> ModelSpec:
    """AR(1)-style model whose observation density does not depend on the state."""
    zero = lambda theta, x: np.zeros((1,) + np.shape(x))
    fam = TruncatedGaussFamily(
        d=1,
        x_box=x_box,
        y_box=y_box,
        a_mean=lambda theta, x: theta[0] * np.asarray(x, float),
        da_dtheta=lambda theta, x: np.asarray(x, float)[None, ...],
        b_scale=lambda theta, x: np.full(np.shape(x), 1.0),
        db_dtheta=zero,
        c_mean=lambda theta, x: np.zeros(np.shape(x)),
        dc_dtheta=zero,
        d_scale=lambda theta, x: np.full(np.shape(x), 1.5),
        dd_dtheta=zero,
        name="flat-obs",
    )
    return fam.to_model_spec()


def three_param_model(x_box=(-3.0, 3.0), y_box=(-4.0, 4.0)) -> ModelSpec:
    """AR(1) with free drift, process scale and observation scale (d = 3)."""
    x_arr = lambda x: np.asarray(x, float)
    zeros3 = lambda shape: np.zeros((3,) + shape)

    def stack(shape, idx, value):
        out = zeros3(shape)
        out[idx] = value
        return out

    fam = TruncatedGaussFamily(
        d=3,
        x_box=x_box,
        y_box=y_box,
        a_mean=lambda theta, x: theta[0] * x_arr(x),
        da_dtheta=lambda theta, x: stack(np.shape(x), 0, x_arr(x)),
        b_scale=lambda theta, x: np.full(np.shape(x), float(theta[1])),
        db_dtheta=lambda theta, x: stack(np.shape(x), 1, 1.0),
        c_mean=lambda theta, x: x_arr(x),
        dc_dtheta=lambda theta, x: zeros3(np.shape(x)),
        d_scale=lambda theta, x: np.full(np.shape(x), float(theta[2])),
        dd_dtheta=lambda theta, x: stack(np.shape(x), 2, 1.0),
        name="ar1-3param",
    )
    return fam.to_model_spec()


def theta_free_model(x_box=(-3.0, 3.0), y_box=(-4.0, 4.0)) -> ModelSpec:
    """Model whose densities do not depend on the parameter at all."""
    zero = lambda theta, x: np.zeros((1,) + np.shape(x))
    fam = TruncatedGaussFamily(
        d=1,
        x_box=x_box,
        y_box=y_box,
        a_mean=lambda theta, x: 0.5 * np.asarray(x, float),
        da_dtheta=zero,
        b_scale=lambda theta, x: np.full(np.shape(x), 1.0),
        db_dtheta=zero,
        c_mean=lambda theta, x: np.asarray(x, float),
        dc_dtheta=zero,
        d_scale=lambda theta, x: np.full(np.shape(x), 1.0),
        dd_dtheta=zero,
        name="theta-free",
    )
    return fam.to_model_spec()


def fit_loglinear(values):
    """(per-step ratio, R^2) of a geometric fit to a positive sequence."""
    values = np.asarray(values, dtype=float)
    n = np.arange(1, len(values) + 1)
    logs = np.log(values)
    slope, intercept = np.polyfit(n, logs, 1)
    pred = slope * n + intercept
    ss_res = float(np.sum((logs - pred) ** 2))
    ss_tot = float(np.sum((logs - logs.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(np.exp(slope)), r2
