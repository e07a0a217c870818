"""Online estimation driver: propagate, update weights, estimate score, step the parameter.

Each driver step consumes an observation pair (the buffered current one and
the incoming next one):

    1. fresh positions from the mixture at (theta_n, Y_n),
    2. weight update W_{n+1} = W_n A + B at (theta_n, Y_n),
    3. score estimate H = W_{n+1} C + D at (theta_n, Y_{n+1}, new positions),
    4. theta_{n+1} = project(theta_n + alpha_n H),
    5. advance the buffer and append a trace record.

The score source is a replaceable seam: passing ``gradient_fn`` runs the same
stochastic-approximation loop (gains, projection, trace) with an externally
supplied gradient, which lets the exact oracles certify the driver in
isolation from Monte Carlo error.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .core import ParameterPoint, RngStream, StepSchedule, project_to_box, step_size
from .models import ModelSpec
from .smc import (
    ParticleSystem,
    StepWorkspace,
    build_observation_terms,
    centered_weight_norm,
    gradient_estimate,
    obs_log_terms,
    propagate,
    reduced_weight_update,
)

__all__ = ["TraceRecord", "RunTrace", "RmlState", "init_state", "rml_step", "run",
           "write_trace", "read_trace", "replay_max_deviation"]

_INIT_TAG = 0x1A17
_STEP_TAG = 0x57E9


def _fmt(x: float) -> str:
    return format(float(x), ".17e")


def _fmt_vec(v) -> str:
    return "[" + ",".join(_fmt(x) for x in np.atleast_1d(v)) + "]"


@dataclass
class TraceRecord:
    """One completed driver step."""

    n: int
    theta: np.ndarray        # theta_n (before the update)
    h: np.ndarray            # score estimate used for the update
    alpha: float
    theta_next: np.ndarray   # theta_{n+1} (after projection)
    projected: bool
    wnorm: Optional[float]   # ||W_{n+1} Lambda||_F, None in oracle-driven runs
    log_colmass_min: Optional[float]  # degeneracy margin diagnostic
    wall: float = 0.0        # in-memory only; not serialized (determinism)

    def to_line(self) -> str:
        wnorm = "null" if self.wnorm is None else _fmt(self.wnorm)
        colmass = "null" if self.log_colmass_min is None else _fmt(self.log_colmass_min)
        return (
            "{"
            f"\"n\":{self.n},"
            f"\"theta\":{_fmt_vec(self.theta)},"
            f"\"h\":{_fmt_vec(self.h)},"
            f"\"alpha\":{_fmt(self.alpha)},"
            f"\"theta_next\":{_fmt_vec(self.theta_next)},"
            f"\"projected\":{'true' if self.projected else 'false'},"
            f"\"wnorm\":{wnorm},"
            f"\"log_colmass_min\":{colmass}"
            "}"
        )

    @classmethod
    def from_line(cls, line: str) -> "TraceRecord":
        obj = json.loads(line)
        return cls(
            n=int(obj["n"]),
            theta=np.asarray(obj["theta"], dtype=float),
            h=np.asarray(obj["h"], dtype=float),
            alpha=float(obj["alpha"]),
            theta_next=np.asarray(obj["theta_next"], dtype=float),
            projected=bool(obj["projected"]),
            wnorm=None if obj["wnorm"] is None else float(obj["wnorm"]),
            log_colmass_min=(None if obj["log_colmass_min"] is None
                             else float(obj["log_colmass_min"])),
        )


@dataclass
class RunTrace:
    """Per-step records of one run plus run-level metadata."""

    records: List[TraceRecord] = field(default_factory=list)
    seed: Optional[int] = None
    n_particles: Optional[int] = None
    projection_hits: int = 0
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.records)

    def thetas(self) -> np.ndarray:
        """theta_0 .. theta_n as an (n+1, d) array."""
        if not self.records:
            raise ValueError("empty trace")
        rows = [self.records[0].theta] + [r.theta_next for r in self.records]
        return np.asarray(rows)

    def save(self, path) -> None:
        write_trace(self.records, path)


def write_trace(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_line() + "\n")


def read_trace(path) -> RunTrace:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(TraceRecord.from_line(line))
    tr = RunTrace(records=records)
    tr.projection_hits = sum(r.projected for r in records)
    return tr


def replay_max_deviation(trace: RunTrace, lower=None, upper=None) -> float:
    """Max deviation of the recorded iterates from replaying the update rule.

    Checks theta_{n+1} = clip(theta_n + alpha_n H_n) record by record, using
    the trace's own box when available.
    """
    lo = trace.lower if lower is None else np.asarray(lower, float)
    hi = trace.upper if upper is None else np.asarray(upper, float)
    worst = 0.0
    for r in trace.records:
        stepped = r.theta + r.alpha * r.h
        replayed = stepped if lo is None else np.clip(stepped, lo, hi)
        worst = max(worst, float(np.max(np.abs(replayed - r.theta_next))))
    return worst


@dataclass
class RmlState:
    """Driver state between steps."""

    parameter: ParameterPoint
    particles: Optional[ParticleSystem]
    schedule: StepSchedule
    n: int
    y_prev: float
    projection_hits: int = 0

    def __post_init__(self):
        if not self.parameter.contains():
            raise ValueError("parameter outside its box")
        if self.particles is not None and self.particles.n != self.n:
            raise ValueError("particle step index out of sync with driver step")


def init_state(model: ModelSpec, theta0: ParameterPoint, schedule: StepSchedule,
               n_particles: int, y0: float, rng: RngStream) -> RmlState:
    """Uniform initial particles on the state box, zero derivative weights."""
    if n_particles < 1:
        raise ValueError("need at least one particle")
    gen = rng.substream(_INIT_TAG).generator()
    lo, hi = model.x_box
    positions = gen.uniform(lo, hi, size=n_particles)
    weights = np.zeros((model.d, n_particles))
    return RmlState(
        parameter=theta0,
        particles=ParticleSystem(positions, weights, n=0),
        schedule=schedule,
        n=0,
        y_prev=float(y0),
    )


def rml_step(model: ModelSpec, state: RmlState, y_next: float, rng: RngStream,
             dtype=np.float64,
             gradient_fn: Optional[Callable] = None,
             workspace: Optional[StepWorkspace] = None):
    """Advance the driver by one observation; returns (new state, trace record)."""
    t_start = time.perf_counter()
    theta_n = state.parameter.theta
    lo, hi = model.y_box
    if not (lo <= y_next <= hi):
        raise ValueError(f"observation {y_next} outside the observation box {model.y_box}")

    particles = state.particles
    wnorm = None
    colmass_min = None
    if gradient_fn is not None:
        h = np.asarray(gradient_fn(theta_n, state.n), dtype=float)
    else:
        gen = rng.substream(_STEP_TAG, state.n).generator()
        # log q / grad log q of (current positions, buffered observation) feed
        # the ancestor draw and the interaction block alike: evaluate once.
        terms_prev = obs_log_terms(model, theta_n, particles.positions, state.y_prev)
        new_positions = propagate(model, theta_n, particles, state.y_prev, gen,
                                  log_obs_weights=terms_prev[0])
        new_weights, log_colmass = reduced_weight_update(
            model, theta_n, particles.positions, new_positions, state.y_prev,
            particles.weights, dtype=dtype, step=state.n, obs_terms=terms_prev,
            workspace=workspace)
        obs = build_observation_terms(model, theta_n, new_positions, y_next,
                                      step=state.n)
        h = gradient_estimate(new_weights, obs)
        particles = ParticleSystem(new_positions, new_weights, n=state.n + 1)
        wnorm = centered_weight_norm(new_weights)
        if log_colmass is not None:
            colmass_min = float(np.min(log_colmass))

    alpha = step_size(state.schedule, state.n)
    stepped = theta_n + alpha * h
    new_param = project_to_box(state.parameter.with_theta(stepped))
    projected = bool(np.any(new_param.theta != stepped))

    record = TraceRecord(
        n=state.n,
        theta=theta_n.copy(),
        h=np.atleast_1d(h).astype(float),
        alpha=float(alpha),
        theta_next=new_param.theta.copy(),
        projected=projected,
        wnorm=wnorm,
        log_colmass_min=colmass_min,
        wall=time.perf_counter() - t_start,
    )
    new_state = RmlState(
        parameter=new_param,
        particles=particles,
        schedule=state.schedule,
        n=state.n + 1,
        y_prev=float(y_next),
        projection_hits=state.projection_hits + int(projected),
    )
    return new_state, record


def run(model: ModelSpec, theta0: ParameterPoint, schedule: StepSchedule,
        observations, n_particles: int, seed: int,
        dtype=np.float64, gradient_fn: Optional[Callable] = None,
        trace_path=None) -> RunTrace:
    """Run the online estimator over an observation stream.

    The stream must hold at least two observations; the first one fills the
    buffer (no parameter update), every following one triggers one driver
    step, so a stream of length T yields T - 1 trace records.  Deterministic
    given (inputs, seed).
    """
    ys = np.asarray(observations, dtype=float).reshape(-1)
    if ys.shape[0] < 2:
        raise ValueError("need at least two observations")
    lo, hi = model.y_box
    if np.any(ys < lo) or np.any(ys > hi):
        bad = int(np.argmax((ys < lo) | (ys > hi)))
        raise ValueError(f"observation {ys[bad]} at row {bad} outside the observation box")

    base = RngStream(seed)
    if gradient_fn is None:
        state = init_state(model, theta0, schedule, n_particles, ys[0], base)
    else:
        # externally supplied gradient: the loop carries no particle system
        state = RmlState(parameter=theta0, particles=None, schedule=schedule,
                         n=0, y_prev=float(ys[0]))
    trace = RunTrace(seed=seed, n_particles=n_particles,
                     lower=theta0.lower.copy(), upper=theta0.upper.copy())
    workspace = (StepWorkspace(n_particles, model.d, dtype)
                 if gradient_fn is None and model.trans_quadratic is not None else None)
    sink = open(trace_path, "w") if trace_path is not None else None
    try:
        for y_next in ys[1:]:
            state, record = rml_step(model, state, float(y_next), base,
                                     dtype=dtype, gradient_fn=gradient_fn,
                                     workspace=workspace)
            trace.records.append(record)
            if sink is not None:
                sink.write(record.to_line() + "\n")
    finally:
        if sink is not None:
            sink.close()
    trace.projection_hits = state.projection_hits
    return trace
