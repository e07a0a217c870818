"""Online maximum likelihood estimation in non-linear state-space models.

The estimator follows the gradient of the average log-likelihood with a
decreasing gain, approximating the intractable filter derivative by an
interacting particle system.  Exact small-scale references (a finite-grid
filter recursion and a tangent Kalman filter) quantify the particle bias and
the quality of the iterates.
"""

from .core import ParameterPoint, RngStream, StepSchedule, project_to_box, step_size
from .models import (
    ModelEvaluationError,
    ModelSpec,
    SimulationError,
    TruncatedGaussFamily,
    ar1_family,
    obs_density,
    simulate,
    sv_family,
    trans_density,
)
from .smc import (
    DegeneracyError,
    InteractionMatrices,
    ParticleSystem,
    build_interaction,
    build_observation_terms,
    draw_ancestors,
    gradient_estimate,
    propagate,
    update_weights,
)
from .rml import RmlState, RunTrace, TraceRecord, read_trace, replay_max_deviation, rml_step, run
from .oracle import (
    GridFilterState,
    GridModel,
    grid_ar1_model,
    grid_condition,
    grid_filter_update,
    grid_gradient,
    grid_predict,
    grid_predictor_update,
    grid_score_sequence,
    kalman_tangent_gradient,
    kalman_tangent_gradient_batch,
    simulate_grid,
)
from .stochmat import centering_matrix, dobrushin_tau, lambda_product_norm, random_floored_stochastic
from .diagnostics import BiasStudyResult, TailStudyResult, bias_vs_particles, tail_gradient_stats

__version__ = "0.1.0"
