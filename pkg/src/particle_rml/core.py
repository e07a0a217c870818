"""Shared numeric primitives: parameter boxes, step-size schedules, seeded streams.

Everything here is a plain value type.  All operations are pure, so they can be
called from any number of concurrent contexts.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "ParameterPoint",
    "StepSchedule",
    "RngStream",
    "project_to_box",
    "step_size",
]

_U64 = 2**64


@dataclass(frozen=True)
class ParameterPoint:
    """A d-dimensional parameter vector together with the compact box it is kept in.

    The box is a per-coordinate interval [lower[i], upper[i]] with
    lower[i] < upper[i].  Iterates produced by the online estimator are clamped
    back into the box after every update (see :func:`project_to_box`).
    """

    theta: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if theta.ndim != 1 or theta.shape != lower.shape or theta.shape != upper.shape:
            raise ValueError("theta, lower and upper must be 1-d arrays of equal length")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ValueError("box bounds must be finite")
        if not np.all(lower < upper):
            raise ValueError("box must satisfy lower[i] < upper[i] for all i")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.theta.shape[0]

    def contains(self, theta=None) -> bool:
        t = self.theta if theta is None else np.asarray(theta, dtype=float)
        return bool(np.all(t >= self.lower) and np.all(t <= self.upper))

    def with_theta(self, theta) -> "ParameterPoint":
        return replace(self, theta=np.asarray(theta, dtype=float))


def project_to_box(p: ParameterPoint) -> ParameterPoint:
    """Clamp each coordinate of ``p.theta`` to its box interval.

    Idempotent: projecting an already-projected point is a no-op.
    """
    clipped = np.clip(p.theta, p.lower, p.upper)
    return p.with_theta(clipped)


@dataclass(frozen=True)
class StepSchedule:
    """Polynomially decaying gains  alpha_n = a0 / (n + n0 + 1)**a.

    With exponent ``a`` in (1/2, 1] the partial sums of alpha_n diverge while
    the partial sums of alpha_n**2 stay bounded, which is the regime the
    stochastic gradient iteration needs.  ``a0 = 0`` is accepted as a
    degenerate schedule that freezes the parameter (useful for fixed-parameter
    diagnostics runs).
    """

    a0: float
    a: float
    n0: int = 0

    def __post_init__(self):
        if not np.isfinite(self.a0) or self.a0 < 0:
            raise ValueError("scale a0 must be a non-negative finite real")
        if not (0.5 < self.a <= 1.0):
            raise ValueError("exponent a must lie in (1/2, 1]")
        if int(self.n0) != self.n0 or self.n0 < 0:
            raise ValueError("offset n0 must be a non-negative integer")
        object.__setattr__(self, "n0", int(self.n0))


def step_size(schedule: StepSchedule, n: int) -> float:
    """Gain at iteration ``n >= 0``; strictly decreasing in n (unless a0 == 0)."""
    if n < 0:
        raise ValueError("iteration index must be non-negative")
    return schedule.a0 * float(n + schedule.n0 + 1) ** (-schedule.a)


def _mix64(*words: int) -> int:
    """Combine integers into one 64-bit word (splitmix64 finalizer chain)."""
    h = 0x9E3779B97F4A7C15
    for w in words:
        h = (h ^ (w % _U64)) * 0xBF58476D1CE4E5B9 % _U64
        h ^= h >> 27
        h = h * 0x94D049BB133111EB % _U64
        h ^= h >> 31
    return h


class RngStream:
    """Counter-based random stream keyed by (seed, stream id).

    Built on Philox, so the variate at a given (seed, stream id, draw index)
    is fixed regardless of what any other stream has drawn -- reproducibility
    does not depend on execution order or on how work is scheduled.  Derive
    one stream per logical consumer (per step, per study seed, ...) with
    :meth:`substream`.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) % _U64
        self.stream = int(stream) % _U64

    def substream(self, *tags: int) -> "RngStream":
        return RngStream(self.seed, _mix64(self.stream, *tags))

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):  # pragma: no cover
        return f"RngStream(seed={self.seed}, stream={self.stream})"
