"""Command-line entry point: simulate data, fit online, run bias/tail studies.

Commands
--------
    particle-rml simulate --config CFG --steps T [--seed S] [--out PATH]
    particle-rml fit      --config CFG [--particles N] [--seed S] [--out PATH]
    particle-rml study    --config CFG --study {bias,tail} [--out PATH]

The configuration file is INI-style with sections [model], [smc], [schedule],
[io] and optionally [study].  Unknown keys are rejected; every validation
error names the offending ``section.key``.  Observation files are headerless
comma-separated numeric rows, one time step per line; traces are the
line-delimited records documented in :mod:`particle_rml.rml`.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import ParameterPoint, RngStream, StepSchedule
from .models import ModelSpec, ar1_family, simulate, sv_family
from .oracle.grid import GridModel, grid_ar1_model, grid_score_sequence, simulate_grid
from .oracle.kalman import kalman_tangent_gradient_batch
from .rml import RunTrace, read_trace, run
from .diagnostics import bias_vs_particles, tail_gradient_stats, write_bias_study, write_tail_study
from .smc import DegeneracyError

__all__ = ["ConfigError", "RunConfig", "main"]


class ConfigError(ValueError):
    """Configuration problem; the message names the offending section.key."""


_FAMILY_PARAMS = {
    "ar1": ["phi"],
    "sv": ["phi", "sigma_v"],
    "grid_ar1": ["phi"],
}

_FAMILY_CONSTANTS = {
    "ar1": {"sigma_x": 1.0, "sigma_y": 1.0},
    "sv": {"obs_scale": 1.0},
    "grid_ar1": {"m_points": 5, "sigma": 0.8, "sigma_y": 0.6},
}

_MODEL_KEYS = {"family", "x_box", "y_box", "theta0", "theta_sim", "q_lower", "q_upper"}
_SMC_KEYS = {"particles", "seed"}
_SCHEDULE_KEYS = {"a0", "a", "n0"}
_IO_KEYS = {"observations", "trace", "states"}
_STUDY_KEYS = {"n_list", "seeds", "steps", "tail_fraction", "trace_paths",
               "eval_steps", "eval_seed", "subsample", "out"}


def _parse_floats(raw: str, key: str):
    try:
        return [float(tok) for tok in raw.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {raw!r}") from None


def _parse_float(raw: str, key: str) -> float:
    vals = _parse_floats(raw, key)
    if len(vals) != 1:
        raise ConfigError(f"{key}: expected one number")
    return vals[0]


def _parse_int(raw: str, key: str) -> int:
    v = _parse_float(raw, key)
    if int(v) != v:
        raise ConfigError(f"{key}: expected an integer")
    return int(v)


@dataclass
class RunConfig:
    """Validated configuration of one run/study."""

    family: str
    x_box: tuple
    y_box: tuple
    theta0: np.ndarray
    theta_sim: np.ndarray
    q_lower: np.ndarray
    q_upper: np.ndarray
    constants: dict
    particles: int
    seed: int
    a0: float
    a: float
    n0: int
    observations: Optional[str] = None
    trace: Optional[str] = None
    states: Optional[str] = None
    study: dict = field(default_factory=dict)

    # -- parsing ----------------------------------------------------------

    @classmethod
    def parse(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found or unreadable: {path}")
        known_sections = {"model", "smc", "schedule", "io", "study"}
        for section in parser.sections():
            if section not in known_sections:
                raise ConfigError(f"unknown section [{section}]")
        if not parser.has_section("model"):
            raise ConfigError("model: missing section")

        model = dict(parser.items("model"))
        family = model.pop("family", None)
        if family is None:
            raise ConfigError("model.family: missing required key")
        if family not in _FAMILY_PARAMS:
            raise ConfigError(f"model.family: unknown family {family!r}; "
                              f"choose from {sorted(_FAMILY_PARAMS)}")
        const_schema = _FAMILY_CONSTANTS[family]
        allowed = _MODEL_KEYS | set(const_schema)
        for key in model:
            if key not in allowed:
                raise ConfigError(f"unknown key model.{key}")
        for key in ("x_box", "y_box", "theta0", "q_lower", "q_upper"):
            if key not in model:
                raise ConfigError(f"model.{key}: missing required key")

        x_box = _parse_floats(model["x_box"], "model.x_box")
        y_box = _parse_floats(model["y_box"], "model.y_box")
        if len(x_box) != 2 or not x_box[0] < x_box[1]:
            raise ConfigError("model.x_box: expected 'lo, hi' with lo < hi")
        if len(y_box) != 2 or not y_box[0] < y_box[1]:
            raise ConfigError("model.y_box: expected 'lo, hi' with lo < hi")

        d = len(_FAMILY_PARAMS[family])
        theta0 = np.asarray(_parse_floats(model["theta0"], "model.theta0"))
        q_lower = np.asarray(_parse_floats(model["q_lower"], "model.q_lower"))
        q_upper = np.asarray(_parse_floats(model["q_upper"], "model.q_upper"))
        for key, vec in (("theta0", theta0), ("q_lower", q_lower), ("q_upper", q_upper)):
            if vec.shape != (d,):
                raise ConfigError(f"model.{key}: family {family!r} has {d} free "
                                  f"parameter(s) ({', '.join(_FAMILY_PARAMS[family])})")
        if not np.all(q_lower < q_upper):
            raise ConfigError("model.q_lower/model.q_upper: need q_lower < q_upper")
        if np.any(theta0 < q_lower) or np.any(theta0 > q_upper):
            raise ConfigError("model.theta0: initial parameter outside the projection box")
        theta_sim = theta0
        if "theta_sim" in model:
            theta_sim = np.asarray(_parse_floats(model["theta_sim"], "model.theta_sim"))
            if theta_sim.shape != (d,):
                raise ConfigError(f"model.theta_sim: expected {d} value(s)")

        constants = {}
        for key, default in const_schema.items():
            if key in model:
                if isinstance(default, int):
                    constants[key] = _parse_int(model[key], f"model.{key}")
                else:
                    constants[key] = _parse_float(model[key], f"model.{key}")
            else:
                constants[key] = default

        def section_items(name, allowed_keys):
            if not parser.has_section(name):
                return {}
            items = dict(parser.items(name))
            for key in items:
                if key not in allowed_keys:
                    raise ConfigError(f"unknown key {name}.{key}")
            return items

        smc = section_items("smc", _SMC_KEYS)
        particles = _parse_int(smc["particles"], "smc.particles") if "particles" in smc else 100
        seed = _parse_int(smc["seed"], "smc.seed") if "seed" in smc else 0
        if particles < 1:
            raise ConfigError("smc.particles: must be >= 1")

        sched = section_items("schedule", _SCHEDULE_KEYS)
        a0 = _parse_float(sched["a0"], "schedule.a0") if "a0" in sched else 0.5
        a = _parse_float(sched["a"], "schedule.a") if "a" in sched else 0.7
        n0 = _parse_int(sched["n0"], "schedule.n0") if "n0" in sched else 0
        try:
            StepSchedule(a0, a, n0)
        except ValueError as exc:
            raise ConfigError(f"schedule: {exc}") from None

        io = section_items("io", _IO_KEYS)
        study_raw = section_items("study", _STUDY_KEYS)
        study = {}
        if "n_list" in study_raw:
            vals = _parse_floats(study_raw["n_list"], "study.n_list")
            study["n_list"] = [int(v) for v in vals]
        if "seeds" in study_raw:
            study["seeds"] = _parse_int(study_raw["seeds"], "study.seeds")
        if "steps" in study_raw:
            study["steps"] = _parse_int(study_raw["steps"], "study.steps")
        if "tail_fraction" in study_raw:
            study["tail_fraction"] = _parse_float(study_raw["tail_fraction"],
                                                  "study.tail_fraction")
        if "trace_paths" in study_raw:
            study["trace_paths"] = [p.strip() for p in study_raw["trace_paths"].split(",")
                                    if p.strip()]
        if "eval_steps" in study_raw:
            study["eval_steps"] = _parse_int(study_raw["eval_steps"], "study.eval_steps")
        if "eval_seed" in study_raw:
            study["eval_seed"] = _parse_int(study_raw["eval_seed"], "study.eval_seed")
        if "subsample" in study_raw:
            study["subsample"] = _parse_int(study_raw["subsample"], "study.subsample")
        if "out" in study_raw:
            study["out"] = study_raw["out"]

        return cls(
            family=family,
            x_box=(x_box[0], x_box[1]),
            y_box=(y_box[0], y_box[1]),
            theta0=theta0,
            theta_sim=theta_sim,
            q_lower=q_lower,
            q_upper=q_upper,
            constants=constants,
            particles=particles,
            seed=seed,
            a0=a0,
            a=a,
            n0=n0,
            observations=io.get("observations"),
            trace=io.get("trace"),
            states=io.get("states"),
            study=study,
        )

    # -- echo --------------------------------------------------------------

    def to_ini(self) -> str:
        def vec(v):
            return ", ".join(repr(float(x)) for x in np.atleast_1d(v))

        lines = ["[model]", f"family = {self.family}",
                 f"x_box = {vec(self.x_box)}", f"y_box = {vec(self.y_box)}",
                 f"theta0 = {vec(self.theta0)}", f"theta_sim = {vec(self.theta_sim)}",
                 f"q_lower = {vec(self.q_lower)}", f"q_upper = {vec(self.q_upper)}"]
        for key, val in self.constants.items():
            lines.append(f"{key} = {val!r}")
        lines += ["", "[smc]", f"particles = {self.particles}", f"seed = {self.seed}",
                  "", "[schedule]", f"a0 = {self.a0!r}", f"a = {self.a!r}",
                  f"n0 = {self.n0}"]
        io_lines = [(k, getattr(self, k)) for k in ("observations", "trace", "states")]
        io_lines = [(k, v) for k, v in io_lines if v is not None]
        if io_lines:
            lines += ["", "[io]"] + [f"{k} = {v}" for k, v in io_lines]
        if self.study:
            lines += ["", "[study]"]
            for key, val in self.study.items():
                if isinstance(val, list):
                    lines.append(f"{key} = {', '.join(str(v) for v in val)}")
                else:
                    lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"

    # -- builders -----------------------------------------------------------

    def parameter_point(self) -> ParameterPoint:
        return ParameterPoint(self.theta0, self.q_lower, self.q_upper)

    def schedule(self) -> StepSchedule:
        return StepSchedule(self.a0, self.a, self.n0)

    def build_model(self) -> ModelSpec:
        if self.family == "ar1":
            return ar1_family(sigma_x=self.constants["sigma_x"],
                              sigma_y=self.constants["sigma_y"],
                              x_box=self.x_box, y_box=self.y_box)
        if self.family == "sv":
            return sv_family(obs_scale=self.constants["obs_scale"],
                             x_box=self.x_box, y_box=self.y_box)
        if self.family == "grid_ar1":
            return self.build_grid_model().to_model_spec()
        raise ConfigError(f"model.family: unknown family {self.family!r}")

    def build_grid_model(self) -> GridModel:
        if self.family != "grid_ar1":
            raise ConfigError(f"model.family: family {self.family!r} has no grid form")
        return grid_ar1_model(m_points=self.constants["m_points"],
                              x_lo=self.x_box[0], x_hi=self.x_box[1],
                              sigma=self.constants["sigma"],
                              sigma_y=self.constants["sigma_y"],
                              y_box=self.y_box)


# ---------------------------------------------------------------------------
# Observation file helpers


def write_rows(path, array) -> None:
    arr = np.atleast_2d(np.asarray(array, dtype=float))
    if arr.shape[0] == 1 and arr.shape[1] > 1:
        arr = arr.T
    with open(path, "w") as fh:
        for row in arr:
            fh.write(",".join(format(v, ".17e") for v in row) + "\n")


def read_rows(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(tok) for tok in line.split(",")])
    if not rows:
        raise ValueError(f"observation file {path} is empty")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"observation file {path} has ragged rows")
    return np.asarray(rows, dtype=float)


def _states_path(obs_path: str) -> str:
    if "." in obs_path.rsplit("/", maxsplit=1)[-1]:
        stem, ext = obs_path.rsplit(".", 1)
        return f"{stem}_states.{ext}"
    return obs_path + "_states"


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(config_path, steps, seed=None, out=None) -> int:
    cfg = RunConfig.parse(config_path)
    if steps is None or steps < 1:
        raise ConfigError("simulate needs --steps >= 1")
    seed = cfg.seed if seed is None else int(seed)
    out = out or cfg.observations
    if out is None:
        raise ConfigError("io.observations: missing output path (or pass --out)")
    rng = RngStream(seed, 0xD47A)
    if cfg.family == "grid_ar1":
        states, obs = simulate_grid(cfg.build_grid_model(), cfg.theta_sim, steps, rng)
    else:
        states, obs = simulate(cfg.build_model(), cfg.theta_sim, steps, rng)
    write_rows(out, obs)
    write_rows(cfg.states or _states_path(out), states)
    print(f"wrote {steps} observations to {out}")
    return 0


def cmd_fit(config_path, particles=None, seed=None, out=None) -> int:
    cfg = RunConfig.parse(config_path)
    if cfg.observations is None:
        raise ConfigError("io.observations: missing required key for fit")
    data = read_rows(cfg.observations)
    model = cfg.build_model()
    if data.shape[1] != model.d_y:
        raise ValueError(f"observation file has {data.shape[1]} columns, "
                         f"model expects d_y = {model.d_y}")
    if data.shape[0] < 2:
        raise ValueError("need at least two observation rows")
    trace_path = out or cfg.trace
    trace = run(model, cfg.parameter_point(), cfg.schedule(), data[:, 0],
                n_particles=particles or cfg.particles,
                seed=cfg.seed if seed is None else int(seed),
                trace_path=trace_path)
    final = trace.records[-1].theta_next
    print("final theta: " + ", ".join(format(v, ".12g") for v in final))
    print(f"projection hits: {trace.projection_hits}")
    if trace_path:
        print(f"trace ({len(trace)} records) written to {trace_path}")
    return 0


def _tail_oracle(cfg: RunConfig):
    """Exact-gradient oracle over a held-out stream for the configured family."""
    eval_steps = cfg.study.get("eval_steps", 100_000)
    eval_seed = cfg.study.get("eval_seed", cfg.seed + 1)
    rng = RngStream(eval_seed, 0xE7A1)
    if cfg.family == "ar1":
        model = cfg.build_model()
        _, eval_ys = simulate(model, cfg.theta_sim, eval_steps, rng)
        sx = cfg.constants["sigma_x"]
        sy = cfg.constants["sigma_y"]

        def oracle(thetas):
            lls, grads = kalman_tangent_gradient_batch(thetas[:, 0], sx, sy, eval_ys)
            return lls, grads[:, :1]

        return oracle
    if cfg.family == "grid_ar1":
        gm = cfg.build_grid_model()
        _, eval_ys = simulate_grid(gm, cfg.theta_sim, eval_steps, rng)

        def oracle(thetas):
            lls = np.empty(thetas.shape[0])
            grads = np.empty((thetas.shape[0], gm.d))
            for i, th in enumerate(thetas):
                ll, scores, _ = grid_score_sequence(gm, th, eval_ys)
                lls[i] = ll / eval_ys.shape[0]
                grads[i] = scores.sum(axis=0) / eval_ys.shape[0]
            return lls, grads

        return oracle
    raise ConfigError(f"study: no exact oracle available for family {cfg.family!r}")


def cmd_study(config_path, kind, out=None) -> int:
    cfg = RunConfig.parse(config_path)
    if kind not in ("bias", "tail"):
        raise ConfigError("study kind must be 'bias' or 'tail'")
    if kind == "bias" and cfg.family != "grid_ar1":
        raise ConfigError(f"study: bias study needs the exact grid oracle; "
                          f"family {cfg.family!r} is unsupported")
    if kind == "tail" and cfg.family not in ("ar1", "grid_ar1"):
        raise ConfigError(f"study: no exact oracle available for family {cfg.family!r}; "
                          "tail study is unsupported")
    out = out or cfg.study.get("out")
    if out is None:
        raise ConfigError("study.out: missing output path (or pass --out)")

    if kind == "bias":
        for key in ("n_list", "seeds", "steps"):
            if key not in cfg.study:
                raise ConfigError(f"study.{key}: missing required key for a bias study")
        if cfg.study["seeds"] < 10:
            raise ConfigError("study.seeds: need at least 10 seeds")
        result = bias_vs_particles(cfg.build_grid_model(), cfg.theta0,
                                   cfg.study["n_list"], cfg.study["steps"],
                                   cfg.study["seeds"], cfg.seed)
        write_bias_study(result, out, jsonl_path=out + ".jsonl")
        print(f"bias study written to {out}")
        print(f"fitted log-log slope: {result.slope:.4f}")
        return 0

    # tail study
    traces = []
    if cfg.study.get("trace_paths"):
        for path in cfg.study["trace_paths"]:
            traces.append(read_trace(path))
    elif "n_list" in cfg.study and "steps" in cfg.study:
        if cfg.observations is None:
            raise ConfigError("io.observations: missing required key for tail study fits")
        data = read_rows(cfg.observations)
        model = cfg.build_model()
        n_rows = min(cfg.study["steps"] + 1, data.shape[0])
        for n in cfg.study["n_list"]:
            traces.append(run(model, cfg.parameter_point(), cfg.schedule(),
                              data[:n_rows, 0], n_particles=n, seed=cfg.seed))
    else:
        raise ConfigError("study.trace_paths or study.n_list+study.steps: "
                          "a tail study needs prior fit traces or run parameters")
    oracle = _tail_oracle(cfg)
    results = [tail_gradient_stats(tr, oracle,
                                   tail_fraction=cfg.study.get("tail_fraction", 0.1),
                                   subsample=cfg.study.get("subsample", 200))
               for tr in traces]
    write_tail_study(results, out, jsonl_path=out + ".jsonl")
    print(f"tail study written to {out}")
    for r in results:
        print(f"N={r.n_particles}: tail grad norm {r.grad_norm_mean:.6f} "
              f"+/- {r.grad_norm_stderr:.6f}, loglik oscillation {r.loglik_oscillation:.6f}")
    return 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="particle-rml",
                                     description="Online parameter estimation in "
                                                 "state-space models by particle "
                                                 "gradient approximation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="simulate observations from the configured model")
    p_fit = sub.add_parser("fit", help="run the online estimator over an observation file")
    p_study = sub.add_parser("study", help="run a bias or tail study")

    for p in (p_sim, p_fit, p_study):
        p.add_argument("--config", required=True, help="path to the INI configuration")
        p.add_argument("--out", default=None, help="output path override")
        p.add_argument("--seed", type=int, default=None, help="seed override")
    p_sim.add_argument("--steps", type=int, default=None, help="number of time steps")
    p_fit.add_argument("--particles", type=int, default=None, help="particle count override")
    p_study.add_argument("--study", choices=("bias", "tail"), required=True,
                         dest="study_kind", help="study kind")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args.config, args.steps, seed=args.seed, out=args.out)
        if args.command == "fit":
            return cmd_fit(args.config, particles=args.particles, seed=args.seed,
                           out=args.out)
        return cmd_study(args.config, args.study_kind, out=args.out)
    except DegeneracyError as exc:
        print(f"error: particle degeneracy: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
