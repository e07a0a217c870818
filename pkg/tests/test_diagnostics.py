import numpy as np
import pytest
from scipy.optimize import brentq

from particle_rml.core import ParameterPoint, RngStream, StepSchedule
from particle_rml.diagnostics import (
    _counts_score,
    _counts_weight_update,
    _exact_grid_score,
    _step_tables,
    bias_vs_particles,
    grid_particle_scores,
    tail_gradient_stats,
    write_bias_study,
    write_tail_study,
)
from particle_rml.oracle.grid import GridModel, grid_ar1_model, grid_score_sequence, simulate_grid
from particle_rml.rml import run
from particle_rml.smc import build_interaction, build_observation_terms, gradient_estimate, update_weights


@pytest.fixture
def gm():
    return grid_ar1_model()


class TestCountsAggregation:
    def test_counts_path_equals_generic_path(self, gm, gen):
        # expand the per-atom aggregates into explicit particles and compare
        # one weight update plus one score against the generic machinery
        theta = np.array([0.7])
        model = gm.to_model_spec()
        y, y_next = 0.5, -0.3
        tables = _step_tables(gm, theta, np.array([y, y_next]))
        tab = tables[0]

        counts = np.array([3.0, 0.0, 2.0, 4.0, 1.0])
        new_counts = np.array([1.0, 2.0, 3.0, 2.0, 2.0])
        n = int(counts.sum())
        w_state = gen.standard_normal((1, gm.m))

        w_new_state = _counts_weight_update(tab, counts, w_state)
        h_counts = _counts_score(tab, new_counts, w_new_state, n)

        # generic path on expanded positions
        old_pos = np.repeat(gm.points, counts.astype(int))
        new_pos = np.repeat(gm.points, new_counts.astype(int))
        w_particles = np.repeat(w_state, counts.astype(int), axis=1)
        im = build_interaction(model, theta, old_pos, new_pos, y)
        w_new_particles = update_weights(w_particles, im)
        # every particle landing on one atom carries the same weight column
        idx = gm.index_of(new_pos)
        for atom in range(gm.m):
            cols = w_new_particles[:, idx == atom]
            if cols.size:
                assert np.max(np.abs(cols - w_new_state[:, atom:atom + 1])) < 1e-12
        ot = build_observation_terms(model, theta, new_pos, y_next)
        h_generic = gradient_estimate(w_new_particles, ot)
        assert np.max(np.abs(h_counts - h_generic)) < 1e-12

    def test_exact_score_matches_score_sequence(self, gm):
        theta = np.array([0.7])
        _, ys = simulate_grid(gm, theta, 21, RngStream(5))
        # the study's exact reference equals the scoring chain of the oracle
        h_study = _exact_grid_score(gm, theta, ys)
        _, scores, _ = grid_score_sequence(gm, theta, ys)
        assert np.allclose(h_study, scores[-1], atol=1e-13)

    @pytest.mark.parametrize("steps", [1, 5, 20])
    def test_particle_scores_agree_with_grid_oracle(self, gm, steps):
        # mean particle score within 3 Monte Carlo SE of the exact score at
        # several horizons: the quantity whose bias shrinks like 1/N
        theta = np.array([0.7])
        _, ys = simulate_grid(gm, theta, steps + 1, RngStream(900 + steps))
        samples = grid_particle_scores(gm, theta, ys, 400, range(400), RngStream(901))
        exact = _exact_grid_score(gm, theta, ys)
        err = np.abs(samples.mean(axis=0) - exact)
        se = np.sqrt(samples.var(axis=0, ddof=1) / samples.shape[0])
        assert np.all(err <= 3 * se + 1e-3)


class TestBiasStudy:
    def test_parameter_free_model_has_zero_bias(self):
        base = grid_ar1_model(m_points=4, x_lo=-1.5, x_hi=1.5)
        frozen = np.array([0.5])
        zero_grad = GridModel(
            points=base.points, atom=base.atom, d=1,
            log_p_table=lambda th: base.log_p_table(frozen),
            grad_log_p_table=lambda th: np.zeros((1, 4, 4)),
            log_q=lambda th, y: base.log_q(frozen, y),
            grad_log_q=lambda th, y: np.zeros((1, 4)),
            y_box=base.y_box, sample_obs=base.sample_obs,
        )
        res = bias_vs_particles(zero_grad, [0.3], [20, 40], steps=10, n_seeds=12, seed=3)
        for row in res.rows:
            assert row.bias_norm == 0.0

    def test_oracle_injection_returns_exact_zero(self, gm):
        res = bias_vs_particles(gm, [0.7], [20, 40], steps=8, n_seeds=15, seed=3,
                                inject_oracle=True)
        for row in res.rows:
            assert row.bias_norm == 0.0 and row.stderr == 0.0

    def test_reproducible_bit_for_bit(self, gm):
        a = bias_vs_particles(gm, [0.7], [25, 50], steps=8, n_seeds=30, seed=12)
        b = bias_vs_particles(gm, [0.7], [25, 50], steps=8, n_seeds=30, seed=12)
        for ra, rb in zip(a.rows, b.rows):
            assert ra.bias_norm == rb.bias_norm
            assert np.array_equal(ra.mean_score, rb.mean_score)
        assert a.slope == b.slope

    def test_disjoint_seed_sets_agree_statistically(self, gm):
        theta = np.array([0.7])
        _, ys = simulate_grid(gm, theta, 13, RngStream(9))
        s1 = grid_particle_scores(gm, theta, ys, 50, range(300), RngStream(1))
        s2 = grid_particle_scores(gm, theta, ys, 50, range(300), RngStream(2))
        m1, m2 = s1.mean(axis=0), s2.mean(axis=0)
        se = np.sqrt(s1.var(ddof=1) / 300 + s2.var(ddof=1) / 300)
        assert np.all(np.abs(m1 - m2) <= 3 * se)

    def test_validations(self, gm):
        with pytest.raises(ValueError):
            bias_vs_particles(gm, [0.7], [50, 25], steps=5, n_seeds=20, seed=1)
        with pytest.raises(ValueError):
            bias_vs_particles(gm, [0.7], [25, 50], steps=5, n_seeds=9, seed=1)
        with pytest.raises(ValueError):
            bias_vs_particles(gm, [0.7], [], steps=5, n_seeds=20, seed=1)

    def test_writers(self, gm, tmp_path):
        res = bias_vs_particles(gm, [0.7], [20, 40], steps=6, n_seeds=15, seed=2)
        csv = tmp_path / "bias.csv"
        jsonl = tmp_path / "bias.jsonl"
        write_bias_study(res, csv, jsonl)
        lines = csv.read_text().splitlines()
        assert lines[0].startswith("n_particles,bias_norm,stderr")
        assert len(lines) == 3
        assert len(jsonl.read_text().splitlines()) == 3


class TestTailStudy:
    def _grid_oracle(self, gm, eval_ys):
        def oracle(thetas):
            lls = np.empty(thetas.shape[0])
            grads = np.empty((thetas.shape[0], 1))
            for i, th in enumerate(thetas):
                ll, scores, _ = grid_score_sequence(gm, th, eval_ys)
                lls[i] = ll / len(eval_ys)
                grads[i] = scores.sum(axis=0) / len(eval_ys)
            return lls, grads
        return oracle

    def test_frozen_run_at_stationary_point_has_tiny_gradient(self, gm):
        theta_truth = np.array([0.7])
        _, eval_ys = simulate_grid(gm, theta_truth, 2000, RngStream(71))
        oracle = self._grid_oracle(gm, eval_ys)

        def dll(phi):
            return float(oracle(np.array([[phi]]))[1][0, 0])

        root = brentq(dll, 0.3, 0.95, xtol=1e-13)
        model = gm.to_model_spec()
        _, fit_ys = simulate_grid(gm, theta_truth, 60, RngStream(72))
        trace = run(model, ParameterPoint([root], [-0.99], [0.99]),
                    StepSchedule(0.0, 0.7), fit_ys, n_particles=25, seed=4)
        res = tail_gradient_stats(trace, oracle, tail_fraction=0.2, subsample=5)
        assert res.grad_norm_mean <= 1e-6
        assert res.loglik_oscillation <= 1e-12

    def test_tail_statistics_shape(self, gm):
        theta = np.array([0.7])
        model = gm.to_model_spec()
        _, fit_ys = simulate_grid(gm, theta, 120, RngStream(81))
        _, eval_ys = simulate_grid(gm, theta, 400, RngStream(82))
        trace = run(model, ParameterPoint([0.4], [-0.99], [0.99]),
                    StepSchedule(0.4, 0.7), fit_ys, n_particles=30, seed=6)
        res = tail_gradient_stats(trace, self._grid_oracle(gm, eval_ys),
                                  tail_fraction=0.5, subsample=12)
        assert res.tail_len >= 12 and res.n_evaluated == 12
        assert np.isfinite(res.grad_norm_mean)
        assert np.isfinite(res.grad_norm_stderr)
        assert res.loglik_oscillation >= 0.0

    def test_empty_tail_rejected(self, gm):
        theta = np.array([0.7])
        model = gm.to_model_spec()
        _, fit_ys = simulate_grid(gm, theta, 10, RngStream(83))
        trace = run(model, ParameterPoint([0.4], [-0.99], [0.99]),
                    StepSchedule(0.4, 0.7), fit_ys, n_particles=10, seed=6)
        with pytest.raises(ValueError):
            tail_gradient_stats(trace, self._grid_oracle(gm, fit_ys), tail_fraction=0.0)

    def test_tail_trend_over_particle_counts(self, ar1_wide):
        # repeated-seed experiment: quadrupling N leaves the tail gradient
        # norm non-increasing within noise and shrinks the oracle likelihood
        # oscillation over the tail
        import threadpoolctl
        from particle_rml.models import simulate
        from particle_rml.oracle.kalman import kalman_tangent_gradient_batch

        theta_star = np.array([0.7])
        _, ys = simulate(ar1_wide, theta_star, 6000, RngStream(3001))
        _, eval_ys = simulate(ar1_wide, theta_star, 30_000, RngStream(3002))

        def oracle(thetas):
            lls, grads = kalman_tangent_gradient_batch(thetas[:, 0], 1.0, 1.0, eval_ys)
            return lls, grads[:, :1]

        p0 = ParameterPoint([0.3], [-0.95], [0.95])
        sch = StepSchedule(0.5, 0.7)
        stats = {}
        with threadpoolctl.threadpool_limits(1):
            for n in (25, 100):
                oscs, grads = [], []
                for seed in range(5):
                    tr = run(ar1_wide, p0, sch, ys, n_particles=n, seed=100 + seed,
                             dtype=np.float32)
                    res = tail_gradient_stats(tr, oracle, tail_fraction=0.1,
                                              subsample=64)
                    oscs.append(res.loglik_oscillation)
                    grads.append(res.grad_norm_mean)
                stats[n] = (np.mean(oscs), np.std(oscs, ddof=1) / np.sqrt(5),
                            np.mean(grads), np.std(grads, ddof=1) / np.sqrt(5))
        se_osc = np.hypot(stats[25][1], stats[100][1])
        se_grad = np.hypot(stats[25][3], stats[100][3])
        assert stats[100][0] <= stats[25][0] + 2 * se_osc
        assert stats[100][2] <= stats[25][2] + 2 * se_grad

    def test_writer(self, gm, tmp_path):
        theta = np.array([0.7])
        model = gm.to_model_spec()
        _, fit_ys = simulate_grid(gm, theta, 60, RngStream(85))
        _, eval_ys = simulate_grid(gm, theta, 200, RngStream(86))
        trace = run(model, ParameterPoint([0.4], [-0.99], [0.99]),
                    StepSchedule(0.4, 0.7), fit_ys, n_particles=20, seed=6)
        res = tail_gradient_stats(trace, self._grid_oracle(gm, eval_ys),
                                  tail_fraction=0.3, subsample=8)
        csv = tmp_path / "tail.csv"
        write_tail_study([res], csv, jsonl_path=tmp_path / "tail.jsonl")
        lines = csv.read_text().splitlines()
        assert lines[0].startswith("n_particles,grad_norm_mean")
        assert len(lines) == 2
