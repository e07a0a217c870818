"""Desk-scale studies of the estimator's asymptotics: bias vs N, tail behavior vs N.

The bias study runs the particle method at a frozen parameter against the
exact grid score and reports the norm of the mean error per particle count
together with its Monte Carlo uncertainty and the fitted log-log slope
(theory predicts the bias to shrink like 1/N).

The tail study evaluates an exact oracle gradient along the tail of a run
trace: the tail-averaged oracle gradient norm and the oscillation of the
oracle average log-likelihood are the finite-sample stand-ins for the
asymptotic limits the theory bounds by powers of 1/N.

For fixed-parameter runs on a grid model the particle recursion collapses
exactly onto per-atom aggregates (all particles sitting on one atom carry the
same derivative weight after the first step), so the study loop costs
O(M^2) per step instead of O(N^2); equivalence with the generic per-particle
path is unit-tested.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .core import RngStream
from .oracle.grid import GridFilterState, GridModel, grid_condition, grid_gradient, grid_predict
from .rml import RunTrace

__all__ = [
    "BiasStudyRow",
    "BiasStudyResult",
    "TailStudyResult",
    "GridStepTables",
    "grid_particle_scores",
    "bias_vs_particles",
    "tail_gradient_stats",
    "write_bias_study",
    "write_tail_study",
]


# ---------------------------------------------------------------------------
# Fast fixed-parameter particle runs on a grid model


@dataclass
class GridStepTables:
    """Per-step interaction tables of a grid model at a frozen parameter."""

    q: np.ndarray        # (M,) observation density at the propagation observation
    p_atom: np.ndarray   # (M, M) transition atom probabilities p * atom
    r: np.ndarray        # (M, M) r(x'_j | y, x_i) = p(x'_j|x_i) q(y|x_i)
    gr: np.ndarray       # (d, M, M) r * grad log r
    q_next: np.ndarray   # (M,) observation density at the scoring observation
    gq_next: np.ndarray  # (d, M) its grad-log


def _step_tables(gm: GridModel, theta, ys) -> List[GridStepTables]:
    """Precompute every per-step table for a frozen (theta, observation stream)."""
    p, glp = gm.tables(theta)
    p_atom = p * gm.atom
    tables = []
    for k in range(len(ys) - 1):
        q, gq = gm.obs_tables(theta, ys[k])
        r = p * q[:, None]
        gr = r[None, :, :] * (glp + gq[:, :, None])
        q_next, gq_next = gm.obs_tables(theta, ys[k + 1])
        tables.append(GridStepTables(q=q, p_atom=p_atom, r=r, gr=gr,
                                     q_next=q_next, gq_next=gq_next))
    return tables


def _counts_weight_update(tab: GridStepTables, counts, w_state):
    """Per-atom aggregate of W' = W A + B given old counts and shared weights."""
    col_mass = counts @ tab.r
    wa = (w_state * counts[None, :]) @ tab.r
    b = np.einsum("i,dij->dj", counts, tab.gr)
    return (wa + b) / col_mass[None, :]


def _counts_score(tab: GridStepTables, counts, w_state, n_particles):
    """Per-atom aggregate of H = W C + D at the scoring observation."""
    denom = float(tab.q_next @ counts)
    w_mean = (w_state @ counts) / n_particles
    wc = (w_state - w_mean[:, None]) @ (tab.q_next * counts) / denom
    dvec = (tab.gq_next * tab.q_next[None, :]) @ counts / denom
    return wc + dvec


def grid_particle_scores(gm: GridModel, theta, ys, n_particles: int, seeds: Sequence[int],
                         rng: RngStream) -> np.ndarray:
    """Particle score samples H at the final step of a frozen-parameter run.

    Runs the particle method (uniform initial atoms, zero initial weights)
    through observations ys[:-1] and scores against ys[-1]; one sample per
    seed, returned as an (S, d) array.  Exact per-atom aggregation of the
    generic recursion.
    """
    ys = np.asarray(ys, dtype=float)
    if ys.shape[0] < 2:
        raise ValueError("need at least two observations (propagation + scoring)")
    tables = _step_tables(gm, theta, ys)
    m = gm.m
    d = gm.d
    out = np.empty((len(seeds), d))
    uniform = np.full(m, 1.0 / m)
    for si, seed_tag in enumerate(seeds):
        gen = rng.substream(0xB1A5, int(seed_tag)).generator()
        counts = gen.multinomial(n_particles, uniform).astype(float)
        w_state = np.zeros((d, m))
        for tab in tables:
            mixture = (tab.q * counts) @ tab.p_atom
            mixture /= mixture.sum()
            new_counts = gen.multinomial(n_particles, mixture).astype(float)
            w_state = _counts_weight_update(tab, counts, w_state)
            counts = new_counts
        out[si] = _counts_score(tables[-1], counts, w_state, n_particles)
    return out


def _exact_grid_score(gm: GridModel, theta, ys) -> np.ndarray:
    """Exact score at the final step of the same frozen-parameter chain."""
    s = GridFilterState.uniform(gm)
    for y in np.asarray(ys, dtype=float)[:-1]:
        s, _ = grid_condition(gm, theta, y, s)
        s = grid_predict(gm, theta, s)
    return grid_gradient(gm, theta, float(ys[-1]), s)


# ---------------------------------------------------------------------------
# Bias study


@dataclass
class BiasStudyRow:
    n_particles: int
    bias_norm: float
    stderr: float
    mean_score: np.ndarray
    exact_score: np.ndarray
    n_seeds: int
    bias_norm_half_steps: float  # burn-in sensitivity companion


@dataclass
class BiasStudyResult:
    rows: List[BiasStudyRow]
    slope: float
    intercept: float
    steps: int
    theta: np.ndarray
    seed: int


def bias_vs_particles(gm: GridModel, theta, n_list: Sequence[int], steps: int,
                      n_seeds: int, seed: int, ys=None,
                      inject_oracle: bool = False,
                      sensitivity: bool = True) -> BiasStudyResult:
    """Mean particle score vs exact score per particle count, with log-log slope.

    Uses one frozen observation stream (simulated from the grid model at
    ``theta`` unless supplied), ``steps`` propagation steps and ``n_seeds``
    independent particle runs per N.  ``inject_oracle`` replaces the particle
    samples by the exact score, a pipeline sanity mode that must report
    exactly zero bias.  ``sensitivity`` additionally reports the bias at half
    the horizon as a burn-in check; disable it to halve the runtime.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    n_list = [int(n) for n in n_list]
    if not n_list:
        raise ValueError("n_list must be non-empty")
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be strictly increasing")
    if n_seeds < 10:
        raise ValueError("need at least 10 seeds for a bias study")
    if steps < 1:
        raise ValueError("steps must be >= 1")

    base = RngStream(seed)
    if ys is None:
        from .oracle.grid import simulate_grid
        _, ys = simulate_grid(gm, theta, steps + 1, base.substream(0xDA7A))
    ys = np.asarray(ys, dtype=float)
    if ys.shape[0] < steps + 1:
        raise ValueError("observation stream shorter than steps + 1")
    ys_full = ys[: steps + 1]
    ys_half = ys[: max(steps // 2, 1) + 1]

    exact_full = _exact_grid_score(gm, theta, ys_full)
    exact_half = _exact_grid_score(gm, theta, ys_half)

    rows = []
    seed_tags = list(range(n_seeds))
    for n in n_list:
        if inject_oracle:
            samples = np.tile(exact_full, (n_seeds, 1))
            bias_half = 0.0
        else:
            samples = grid_particle_scores(gm, theta, ys_full, n, seed_tags,
                                           base.substream(0x5EED, n))
            bias_half = float("nan")
            if sensitivity:
                samples_half = grid_particle_scores(gm, theta, ys_half, n, seed_tags,
                                                    base.substream(0x5EED, n, 1))
                bias_half = float(np.linalg.norm(samples_half.mean(axis=0) - exact_half))
        mean = samples.mean(axis=0)
        var = samples.var(axis=0, ddof=1) if n_seeds > 1 else np.zeros(gm.d)
        stderr = float(np.sqrt(var.sum() / n_seeds))
        rows.append(BiasStudyRow(
            n_particles=n,
            bias_norm=float(np.linalg.norm(mean - exact_full)),
            stderr=stderr,
            mean_score=mean,
            exact_score=exact_full.copy(),
            n_seeds=n_seeds,
            bias_norm_half_steps=bias_half,
        ))

    if len(rows) >= 2 and not inject_oracle:
        logs_n = np.log([r.n_particles for r in rows])
        logs_b = np.log([max(r.bias_norm, 1e-300) for r in rows])
        slope, intercept = np.polyfit(logs_n, logs_b, 1)
    else:
        slope, intercept = float("nan"), float("nan")
    return BiasStudyResult(rows=rows, slope=float(slope), intercept=float(intercept),
                           steps=steps, theta=theta, seed=seed)


# ---------------------------------------------------------------------------
# Tail study


@dataclass
class TailStudyResult:
    n_particles: Optional[int]
    tail_start: int
    tail_len: int
    n_evaluated: int
    grad_norm_mean: float
    grad_norm_stderr: float
    loglik_oscillation: float
    projection_hits_tail: int
    grad_norms: Optional[np.ndarray] = field(repr=False, default=None)
    logliks: Optional[np.ndarray] = field(repr=False, default=None)


def tail_gradient_stats(trace: RunTrace, oracle: Callable, tail_fraction: float = 0.1,
                        subsample: int = 200, n_batches: int = 16) -> TailStudyResult:
    """Oracle gradient/likelihood statistics over the tail of a run.

    ``oracle(thetas)`` must map a (K, d) array of parameter points to a pair
    ``(avg_logliks (K,), grads (K, d))`` evaluated on one fixed held-out
    stream.  The tail window is the final ``tail_fraction`` of the iterate
    sequence; at most ``subsample`` evenly spaced iterates are scored.  The
    standard error of the tail mean uses batch means to absorb the serial
    correlation of the iterates.
    """
    if not (0.0 < tail_fraction <= 1.0):
        raise ValueError("tail_fraction must lie in (0, 1]")
    thetas = trace.thetas()
    n_total = thetas.shape[0]
    tail_start = int(np.floor(n_total * (1.0 - tail_fraction)))
    tail = thetas[tail_start:]
    if tail.shape[0] < 1:
        raise ValueError("tail window is empty")
    take = min(subsample, tail.shape[0])
    idx = np.unique(np.linspace(0, tail.shape[0] - 1, take).astype(int))
    logliks, grads = oracle(tail[idx])
    grads = np.atleast_2d(np.asarray(grads, dtype=float))
    norms = np.linalg.norm(grads, axis=1)

    k = norms.shape[0]
    nb = max(min(n_batches, k), 1)
    batches = np.array_split(norms, nb)
    batch_means = np.array([b.mean() for b in batches])
    stderr = float(batch_means.std(ddof=1) / np.sqrt(nb)) if nb > 1 else float("nan")

    hits = sum(r.projected for r in trace.records[max(tail_start - 1, 0):])
    return TailStudyResult(
        n_particles=trace.n_particles,
        tail_start=tail_start,
        tail_len=tail.shape[0],
        n_evaluated=int(idx.shape[0]),
        grad_norm_mean=float(norms.mean()),
        grad_norm_stderr=stderr,
        loglik_oscillation=float(np.max(logliks) - np.min(logliks)),
        projection_hits_tail=int(hits),
        grad_norms=norms,
        logliks=np.asarray(logliks, dtype=float),
    )


# ---------------------------------------------------------------------------
# Output writers: line-delimited records plus a flat comma-separated table


def _fmt(x) -> str:
    return format(float(x), ".17e")


def write_bias_study(result: BiasStudyResult, csv_path, jsonl_path=None) -> None:
    with open(csv_path, "w") as fh:
        fh.write("n_particles,bias_norm,stderr,n_seeds,bias_norm_half_steps\n")
        for r in result.rows:
            fh.write(f"{r.n_particles},{_fmt(r.bias_norm)},{_fmt(r.stderr)},"
                     f"{r.n_seeds},{_fmt(r.bias_norm_half_steps)}\n")
    if jsonl_path is not None:
        import json
        with open(jsonl_path, "w") as fh:
            for r in result.rows:
                fh.write(json.dumps({
                    "n_particles": r.n_particles,
                    "bias_norm": r.bias_norm,
                    "stderr": r.stderr,
                    "n_seeds": r.n_seeds,
                    "mean_score": list(map(float, r.mean_score)),
                    "exact_score": list(map(float, r.exact_score)),
                    "bias_norm_half_steps": r.bias_norm_half_steps,
                }) + "\n")
            fh.write(json.dumps({"slope": result.slope, "intercept": result.intercept,
                                 "steps": result.steps}) + "\n")


def write_tail_study(results: Sequence[TailStudyResult], csv_path, jsonl_path=None) -> None:
    with open(csv_path, "w") as fh:
        fh.write("n_particles,grad_norm_mean,grad_norm_stderr,loglik_oscillation,"
                 "tail_start,tail_len,n_evaluated,projection_hits_tail\n")
        for r in results:
            fh.write(f"{r.n_particles},{_fmt(r.grad_norm_mean)},{_fmt(r.grad_norm_stderr)},"
                     f"{_fmt(r.loglik_oscillation)},{r.tail_start},{r.tail_len},"
                     f"{r.n_evaluated},{r.projection_hits_tail}\n")
    if jsonl_path is not None:
        import json
        with open(jsonl_path, "w") as fh:
            for r in results:
                fh.write(json.dumps({
                    "n_particles": r.n_particles,
                    "grad_norm_mean": r.grad_norm_mean,
                    "grad_norm_stderr": r.grad_norm_stderr,
                    "loglik_oscillation": r.loglik_oscillation,
                    "tail_start": r.tail_start,
                    "tail_len": r.tail_len,
                    "n_evaluated": r.n_evaluated,
                    "projection_hits_tail": r.projection_hits_tail,
                }) + "\n")
