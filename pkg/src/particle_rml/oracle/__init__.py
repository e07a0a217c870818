"""Exact references: finite-grid filter/score recursions and the tangent Kalman filter."""

from .grid import (
    GridModel,
    GridFilterState,
    grid_ar1_model,
    grid_filter_update,
    grid_predict,
    grid_condition,
    grid_predictor_update,
    grid_gradient,
    grid_score_sequence,
    simulate_grid,
)
from .kalman import kalman_tangent_gradient, kalman_tangent_gradient_batch

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
    "kalman_tangent_gradient",
    "kalman_tangent_gradient_batch",
]
