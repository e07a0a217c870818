"""Tangent Kalman filter: exact log-likelihood gradient for the scalar linear-Gaussian model.

Model:  X_t = phi X_{t-1} + sigma_v eps_t,   Y_t = X_t + sigma_w eta_t,
with X_0 ~ N(m0, P0).  Differentiating the Kalman recursion in
theta = (phi, sigma_v, sigma_w) propagates the sensitivities of the predicted
mean/variance alongside the filter, yielding the exact gradient of the
log-likelihood.  Usable as a reference for the truncated AR(1) family when the
truncation boxes are wide enough for the discarded mass to be negligible.

The batch variant evaluates many parameter points against one observation
record in a single pass, which is how tail-of-run diagnostics score a whole
trace.
"""

from __future__ import annotations

import numpy as np

__all__ = ["kalman_tangent_gradient", "kalman_tangent_gradient_batch"]


def kalman_tangent_gradient(phi, sigma_v, sigma_w, observations, m0=0.0, p0=None,
                            return_increments=False):
    """Average log-likelihood of the record and its exact (phi, sigma_v, sigma_w) gradient.

    ``p0=None`` selects the stationary prior variance sigma_v^2 / (1 - phi^2)
    (with its analytic parameter derivative); passing a number fixes the prior
    variance as a constant with zero derivative.  Raises ``ValueError`` if an
    innovation variance fails to be positive.

    With ``return_increments`` the per-step gradient increments are returned
    as a third element (T, 3); at the true parameter these are martingale
    differences, so their plain standard error is a valid uncertainty for the
    average gradient.
    """
    out = kalman_tangent_gradient_batch(
        np.atleast_1d(phi), sigma_v, sigma_w, observations, m0=m0, p0=p0,
        return_increments=return_increments)
    if return_increments:
        ll, grad, inc = out
        return float(ll[0]), grad[0], inc[:, 0, :]
    ll, grad = out
    return float(ll[0]), grad[0]


def kalman_tangent_gradient_batch(phis, sigma_v, sigma_w, observations, m0=0.0, p0=None,
                                  sigma_vs=None, sigma_ws=None, return_increments=False):
    """Vectorized tangent Kalman filter over K parameter points.

    Returns ``(avg_loglik (K,), grad (K, 3))`` where the gradient columns are
    the sensitivities with respect to (phi, sigma_v, sigma_w).
    """
    ys = np.asarray(observations, dtype=float)
    if ys.ndim != 1 or ys.shape[0] < 1:
        raise ValueError("observations must be a non-empty 1-d array")
    phis = np.atleast_1d(np.asarray(phis, dtype=float))
    k = phis.shape[0]
    sv = np.broadcast_to(np.asarray(sigma_vs if sigma_vs is not None else sigma_v, float), (k,)).copy()
    sw = np.broadcast_to(np.asarray(sigma_ws if sigma_ws is not None else sigma_w, float), (k,)).copy()
    if np.any(sv <= 0) or np.any(sw <= 0):
        raise ValueError("noise scales must be positive")

    m = np.full(k, float(m0))
    dm = np.zeros((3, k))
    if p0 is None:
        if np.any(np.abs(phis) >= 1):
            raise ValueError("stationary prior requires |phi| < 1")
        denom = 1.0 - phis**2
        p = sv**2 / denom
        dp = np.stack([
            2.0 * sv**2 * phis / denom**2,
            2.0 * sv / denom,
            np.zeros(k),
        ])
    else:
        p = np.full(k, float(p0))
        dp = np.zeros((3, k))

    r = sw**2
    dr_dsw = 2.0 * sw
    ll = np.zeros(k)
    dll = np.zeros((3, k))
    log2pi = np.log(2.0 * np.pi)
    increments = np.empty((ys.shape[0], k, 3)) if return_increments else None

    for t, y in enumerate(ys):
        # predict
        mp = phis * m
        dmp = phis[None, :] * dm
        dmp[0] += m
        pp = phis**2 * p + sv**2
        dpp = phis[None, :] ** 2 * dp
        dpp[0] += 2.0 * phis * p
        dpp[1] += 2.0 * sv
        # innovate
        s = pp + r
        if np.any(s <= 0):
            raise ValueError("non-positive innovation variance; invalid model parameters")
        ds = dpp.copy()
        ds[2] += dr_dsw
        e = y - mp
        step_ll = -0.5 * (log2pi + np.log(s) + e**2 / s)
        step_dll = -0.5 * ds / s[None, :] + 0.5 * (e**2 / s**2)[None, :] * ds \
            + (e / s)[None, :] * dmp
        ll += step_ll
        dll += step_dll
        if increments is not None:
            increments[t] = step_dll.T
        # update
        gain = pp / s
        dgain = dpp / s[None, :] - (pp / s**2)[None, :] * ds
        m = mp + gain * e
        dm = dmp + dgain * e[None, :] - gain[None, :] * dmp
        p = pp * (1.0 - gain)
        dp = dpp * (1.0 - gain)[None, :] - pp[None, :] * dgain

    n = float(ys.shape[0])
    if increments is not None:
        return ll / n, dll.T / n, increments
    return ll / n, dll.T / n
