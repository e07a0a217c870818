import numpy as np
import pytest

from particle_rml.core import RngStream
from particle_rml.models import (
    ModelEvaluationError,
    SimulationError,
    TruncatedGaussFamily,
    _log_gauss_mass,
    ar1_family,
    obs_density,
    simulate,
    trans_density,
)

from helpers import theta_free_model


def trapezoid(f, lo, hi, n=2001):
    xs = np.linspace(lo, hi, n)
    return np.trapezoid(f(xs), xs)


class TestDensities:
    def test_trans_normalization(self, ar1_tight):
        th = np.array([0.6])
        for x in (-2.0, 0.0, 1.5):
            total = trapezoid(lambda xp: np.exp(ar1_tight.log_p(th, x, xp)), *ar1_tight.x_box)
            assert total == pytest.approx(1.0, abs=1e-6)

    def test_obs_normalization(self, ar1_tight):
        th = np.array([0.6])
        for x in (-2.0, 0.3):
            total = trapezoid(lambda y: np.exp(ar1_tight.log_q(th, x, y)), *ar1_tight.y_box)
            assert total == pytest.approx(1.0, abs=1e-6)

    def test_sv_normalization(self, sv_model):
        th = np.array([0.9, 0.5])
        total_p = trapezoid(lambda xp: np.exp(sv_model.log_p(th, 0.4, xp)), *sv_model.x_box)
        total_q = trapezoid(lambda y: np.exp(sv_model.log_q(th, 0.4, y)), *sv_model.y_box)
        assert total_p == pytest.approx(1.0, abs=1e-6)
        assert total_q == pytest.approx(1.0, abs=1e-6)

    def test_normalization_at_random_pairs(self, ar1_tight, sv_model, gen):
        # every shipped instance, 100 random (theta, x) pairs, both kernels
        for model, d in ((ar1_tight, 1), (sv_model, 2)):
            for _ in range(100):
                theta = (np.array([gen.uniform(0.2, 0.9)]) if d == 1
                         else np.array([gen.uniform(0.2, 0.9), gen.uniform(0.4, 1.2)]))
                x = gen.uniform(*model.x_box)
                total_p = trapezoid(lambda xp: np.exp(model.log_p(theta, x, xp)),
                                    *model.x_box, n=4001)
                total_q = trapezoid(lambda y: np.exp(model.log_q(theta, x, y)),
                                    *model.y_box, n=4001)
                assert abs(total_p - 1.0) <= 1e-6
                assert abs(total_q - 1.0) <= 1e-6

    def test_even_noise_symmetry(self, ar1_tight):
        # zero-mean kernel at x = 0: equal mass at +-u
        th = np.array([0.8])
        lp_plus, _ = trans_density(ar1_tight, th, 0.0, 0.7)
        lp_minus, _ = trans_density(ar1_tight, th, 0.0, -0.7)
        assert lp_plus == lp_minus

    def test_outside_box_is_neg_inf(self, ar1_tight):
        th = np.array([0.6])
        lp, g = trans_density(ar1_tight, th, 0.0, 3.5)
        assert lp == -np.inf and np.all(g == 0.0)
        lq, gq = obs_density(ar1_tight, th, 0.0, 4.5)
        assert lq == -np.inf and np.all(gq == 0.0)

    def test_density_positive_on_box(self, ar1_tight):
        th = np.array([0.6])
        xs = np.linspace(*ar1_tight.x_box, 41)
        lp = ar1_tight.log_p(th, xs[:, None], xs[None, :])
        assert np.all(np.isfinite(lp))
        ys = np.linspace(*ar1_tight.y_box, 41)
        lq = ar1_tight.log_q(th, xs[:, None], ys[None, :])
        assert np.all(np.isfinite(lq))

    def test_truncation_mass_in_unit_interval(self):
        # interval mass of a proper density is positive and at most one
        for mean, scale, lo, hi in [(0.0, 1.0, -3, 3), (2.0, 0.5, -1, 1), (0.0, 4.0, -2, 2)]:
            lz = _log_gauss_mass((lo - mean) / scale, (hi - mean) / scale)
            assert np.isfinite(lz) and lz <= 0.0

    def test_log_gauss_mass_far_tails(self):
        assert np.isfinite(_log_gauss_mass(10.0, 12.0))
        assert np.isfinite(_log_gauss_mass(-12.0, -10.0))
        left = _log_gauss_mass(-12.0, -10.0)
        right = _log_gauss_mass(10.0, 12.0)
        assert left == pytest.approx(right, rel=1e-12)


class TestGradients:
    @pytest.mark.parametrize("which", ["p", "q"])
    def test_gradients_match_central_differences(self, ar1_tight, sv_model, gen, which):
        h = 1e-5
        for model, dim in ((ar1_tight, 1), (sv_model, 2)):
            for _ in range(50):
                theta = np.array([gen.uniform(0.2, 0.9)]) if dim == 1 else \
                    np.array([gen.uniform(0.2, 0.9), gen.uniform(0.4, 1.2)])
                x = gen.uniform(*model.x_box)
                if which == "p":
                    target = gen.uniform(*model.x_box)
                    func = lambda t: model.log_p(t, x, target)
                    _, grad = trans_density(model, theta, x, target)
                else:
                    target = gen.uniform(model.y_box[0] / 2, model.y_box[1] / 2)
                    func = lambda t: model.log_q(t, x, target)
                    _, grad = obs_density(model, theta, x, target)
                for k in range(dim):
                    tp, tm = theta.copy(), theta.copy()
                    tp[k] += h
                    tm[k] -= h
                    fd = (func(tp) - func(tm)) / (2 * h)
                    assert grad[k] == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_spec_point_gradient(self, ar1_wide):
        h = 1e-5
        th = np.array([0.5])
        _, grad = trans_density(ar1_wide, th, 0.3, 0.1)
        fd = (ar1_wide.log_p(np.array([0.5 + h]), 0.3, 0.1)
              - ar1_wide.log_p(np.array([0.5 - h]), 0.3, 0.1)) / (2 * h)
        assert grad[0] == pytest.approx(fd, rel=1e-5)


class TestValidation:
    def test_non_finite_inputs_rejected(self, ar1_tight):
        with pytest.raises(ModelEvaluationError):
            trans_density(ar1_tight, np.array([0.5]), np.nan, 0.1)
        with pytest.raises(ModelEvaluationError):
            obs_density(ar1_tight, np.array([0.5]), 0.1, np.inf)

    def test_wrong_theta_shape_rejected(self, ar1_tight):
        with pytest.raises(ModelEvaluationError):
            trans_density(ar1_tight, np.array([0.5, 0.1]), 0.0, 0.1)

    def test_degenerate_scale_reported(self):
        zero = lambda theta, x: np.zeros((1,) + np.shape(x))
        fam = TruncatedGaussFamily(
            d=1, x_box=(-1.0, 1.0), y_box=(-1.0, 1.0),
            a_mean=lambda t, x: 0.0 * np.asarray(x), da_dtheta=zero,
            b_scale=lambda t, x: np.zeros(np.shape(x)), db_dtheta=zero,
            c_mean=lambda t, x: np.asarray(x, float), dc_dtheta=zero,
            d_scale=lambda t, x: np.ones(np.shape(x)), dd_dtheta=zero,
        )
        model = fam.to_model_spec()
        with pytest.raises(ModelEvaluationError):
            model.log_p(np.array([0.5]), 0.0, 0.1)


class TestSimulation:
    def test_degenerate_noise_limit(self):
        zero = lambda theta, x: np.zeros((1,) + np.shape(x))
        fam = TruncatedGaussFamily(
            d=1, x_box=(-1.0, 1.0), y_box=(-1.0, 1.0),
            a_mean=lambda t, x: 0.0 * np.asarray(x), da_dtheta=zero,
            b_scale=lambda t, x: np.full(np.shape(x), 1e-12), db_dtheta=zero,
            c_mean=lambda t, x: np.asarray(x, float), dc_dtheta=zero,
            d_scale=lambda t, x: np.full(np.shape(x), 1e-12), dd_dtheta=zero,
        )
        model = fam.to_model_spec()
        states, obs = simulate(model, np.array([0.0]), 1, RngStream(1))
        assert abs(states[1]) < 1e-10 and abs(obs[0]) < 1e-10

    def test_ar1_stationary_variance(self, ar1_wide):
        # wide box: truncation negligible, stationary variance 1/(1-phi^2)
        th = np.array([0.7])
        n_chains = 400
        gen = RngStream(77).generator()
        x = np.zeros(n_chains)
        for _ in range(1000):
            x = ar1_wide.sample_p(th, x, gen)
        target = 1.0 / (1.0 - 0.49)
        sample_var = x.var(ddof=1)
        se = target * np.sqrt(2.0 / (n_chains - 1))
        assert abs(sample_var - target) <= 3 * se

    def test_identical_seeds_identical_trajectories(self, ar1_tight):
        th = np.array([0.6])
        s1, o1 = simulate(ar1_tight, th, 50, RngStream(11))
        s2, o2 = simulate(ar1_tight, th, 50, RngStream(11))
        assert np.array_equal(s1, s2) and np.array_equal(o1, o2)
        s3, _ = simulate(ar1_tight, th, 50, RngStream(12))
        assert not np.array_equal(s1, s3)

    def test_shapes(self, ar1_tight):
        states, obs = simulate(ar1_tight, np.array([0.5]), 17, RngStream(2))
        assert states.shape == (18,) and obs.shape == (17,)
        assert np.all(states >= ar1_tight.x_box[0]) and np.all(states <= ar1_tight.x_box[1])
        assert np.all(obs >= ar1_tight.y_box[0]) and np.all(obs <= ar1_tight.y_box[1])

    def test_rejection_cap_signals_bad_box(self):
        zero = lambda theta, x: np.zeros((1,) + np.shape(x))
        fam = TruncatedGaussFamily(
            d=1, x_box=(10.0, 10.001), y_box=(-1.0, 1.0),
            a_mean=lambda t, x: 0.0 * np.asarray(x), da_dtheta=zero,
            b_scale=lambda t, x: np.full(np.shape(x), 1e-4), db_dtheta=zero,
            c_mean=lambda t, x: 0.0 * np.asarray(x), dc_dtheta=zero,
            d_scale=lambda t, x: np.ones(np.shape(x)), dd_dtheta=zero,
            rejection_cap=50,
        )
        model = fam.to_model_spec()
        with pytest.raises(SimulationError):
            model.sample_p(np.array([0.0]), np.array([10.0005]), RngStream(0).generator())

    def test_theta_free_model_has_zero_gradients(self, gen):
        model = theta_free_model()
        th = np.array([0.3])
        x = gen.uniform(-2, 2, size=8)
        assert np.all(model.grad_log_p(th, x[:, None], x[None, :]) == 0.0)
        assert np.all(model.grad_log_q(th, x, 0.5) == 0.0)
