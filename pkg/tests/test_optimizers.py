"""The update-rule family: per-method formulas, equivalences, invariances."""

import numpy as np
import pytest

from gradissect.core import RngStream, sign1
from gradissect.estimators import EmaState, ema_update, ma_variance_estimate, rho
from gradissect.optimizers import (
    Method,
    OptimizerConfig,
    OptimizerInstance,
    PiecewiseSchedule,
    adam_direction,
    run,
)
from gradissect.sqp import SpectrumSpec, build_problem


def make_opt(method, theta0, alpha=0.1, **kw):
    return OptimizerInstance(OptimizerConfig(method=method, alpha=alpha, **kw), theta0)


THETA0 = np.array([0.5, -1.0, 2.0, 0.0])
GRAD = np.array([1.0, -2.0, 0.0, 3.0])


class TestSingleSteps:
    def test_sgd(self):
        opt = make_opt(Method.SGD, THETA0)
        np.testing.assert_array_equal(opt.step(GRAD), THETA0 - 0.1 * GRAD)

    def test_ssd_uses_sign_with_zero_convention(self):
        opt = make_opt(Method.SSD, THETA0)
        expected = THETA0 - 0.1 * np.array([1.0, -1.0, 1.0, 1.0])
        np.testing.assert_array_equal(opt.step(GRAD), expected)

    def test_m_sgd_first_step_is_gradient_step(self):
        opt = make_opt(Method.M_SGD, THETA0, beta=0.9)
        np.testing.assert_array_equal(opt.step(GRAD), THETA0 - 0.1 * GRAD)

    def test_m_ssd_signs_raw_average(self):
        opt = make_opt(Method.M_SSD, THETA0, beta=0.9)
        theta = opt.step(GRAD)
        np.testing.assert_array_equal(theta, THETA0 - 0.1 * sign1(GRAD))

    def test_adam_matches_hand_computation(self):
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        opt = make_opt(Method.ADAM, THETA0, beta1=beta1, beta2=beta2, epsilon=eps)
        g1 = np.array([1.0, -1.0, 0.5, 2.0])
        g2 = np.array([0.5, 0.5, -0.5, 1.0])
        opt.step(g1)
        theta = opt.step(g2)
        m_t = beta1 * (1 - beta1) * g1 + (1 - beta1) * g2
        v_t = beta2 * (1 - beta2) * g1**2 + (1 - beta2) * g2**2
        m = m_t / (1 - beta1**2)
        v = v_t / (1 - beta2**2)
        theta1 = THETA0 - 0.1 * g1 / (np.abs(g1) + eps)  # first step, m/sqrt(v)=sign-ish
        expected = theta1 - 0.1 * m / (np.sqrt(v) + eps)
        np.testing.assert_allclose(theta, expected, rtol=0, atol=1e-15)

    def test_svag_update_scales_gradient(self):
        opt = make_opt(Method.SVAG, THETA0, beta=0.9)
        opt.step(GRAD)
        g2 = np.array([2.0, -1.0, 1.0, 3.0])
        theta_before = opt.theta.copy()
        theta = opt.step(g2)
        m, v = np.array(opt.ema.m_tilde), np.array(opt.ema.v_tilde)
        corr = 1 - 0.9**2
        m, v = m / corr, v / corr
        s = ma_variance_estimate(m, v, 0.9, 1)
        gamma = m**2 / (m**2 + s)
        np.testing.assert_allclose(
            theta, theta_before - 0.1 * gamma * g2, rtol=0, atol=1e-15
        )

    def test_m_svag_update_scales_average(self):
        opt = make_opt(Method.M_SVAG, THETA0, beta=0.9)
        opt.step(GRAD)
        g2 = np.array([2.0, -1.0, 1.0, 3.0])
        theta_before = opt.theta.copy()
        theta = opt.step(g2)
        corr = 1 - 0.9**2
        m = np.array(opt.ema.m_tilde) / corr
        v = np.array(opt.ema.v_tilde) / corr
        s = ma_variance_estimate(m, v, 0.9, 1)
        gamma = m**2 / (m**2 + rho(0.9, 1) * s)
        np.testing.assert_allclose(
            theta, theta_before - 0.1 * gamma * m, rtol=0, atol=1e-15
        )

    def test_adam_star_scales_sign_of_average(self):
        opt = make_opt(Method.ADAM_STAR, THETA0, beta=0.9)
        theta = opt.step(GRAD)
        # first step: variance estimate is zero, so the factor is one; the
        # zero-gradient coordinate is flagged and performs no update
        expected = THETA0 - 0.1 * sign1(GRAD)
        expected[2] = THETA0[2]
        np.testing.assert_array_equal(theta, expected)

    def test_mb_variant_requires_batch(self):
        opt = make_opt(Method.M_SVAG_MB, THETA0)
        with pytest.raises(ValueError, match="per_example_grads"):
            opt.step(GRAD)

    def test_idealized_requires_oracle(self):
        opt = make_opt(Method.IDEALIZED_SVAG, THETA0)
        with pytest.raises(ValueError, match="oracle"):
            opt.step(GRAD)

    def test_idealized_exact_factors(self):
        opt = make_opt(Method.IDEALIZED_SVAG, THETA0, alpha=0.5)
        true_grad = np.array([1.0, 2.0, 0.0, -1.0])
        true_var = np.array([1.0, 0.0, 0.0, 3.0])
        g = np.array([1.5, 2.0, 7.0, -1.0])
        theta = opt.step(g, oracle=(true_grad, true_var))
        gamma = np.array([0.5, 1.0, 0.0, 0.25])
        expected = THETA0 - 0.5 * gamma * g
        # the zero-gradient zero-variance coordinate performs no update
        expected[2] = THETA0[2]
        np.testing.assert_allclose(theta, expected, rtol=0, atol=1e-15)

    def test_dim_mismatch(self):
        opt = make_opt(Method.SGD, THETA0)
        with pytest.raises(ValueError):
            opt.step(np.zeros(3))


class TestFirstStepCoincidence:
    def test_variance_adapted_first_steps_equal_gradient_step(self):
        rng = RngStream(3)
        theta0 = rng.standard_normal(6)
        g = rng.standard_normal(6)
        expected = theta0 - 0.25 * g
        for method in (Method.SGD, Method.M_SGD, Method.SVAG, Method.M_SVAG):
            opt = make_opt(method, theta0, alpha=0.25, beta=0.9)
            assert opt.step(g).tobytes() == expected.tobytes(), method

    def test_mb_first_step_equal_gradient_step(self):
        rng = RngStream(4)
        theta0 = rng.standard_normal(4)
        grads = rng.standard_normal((8, 4))
        g = grads.mean(axis=0)
        opt = make_opt(Method.M_SVAG_MB, theta0, alpha=0.25, beta=0.9)
        theta = opt.step(g, per_example_grads=grads)
        # first step discounts the batch variance by the full weight sum,
        # which shrinks gamma below one, but with zero momentum variance
        # history the estimate is the raw batch estimate
        assert opt.ema.t == 0


class TestAdamDirection:
    def test_identity_with_sign_magnitude_decomposition(self):
        rng = np.random.default_rng(8)
        m = rng.uniform(0.05, 2.0, 2000) * np.where(rng.random(2000) < 0.5, -1, 1)
        v = m * m + rng.uniform(0.0, 4.0, 2000)
        lhs = adam_direction(m, v, 0.0)
        rhs = np.sqrt(1.0 / (1.0 + (v - m * m) / (m * m))) * sign1(m)
        assert np.abs(lhs - rhs).max() < 1e-12

    def test_zero_denominator_maps_to_zero(self):
        out = adam_direction([0.0], [0.0], 0.0)
        assert out[0] == 0.0


class TestSchedules:
    def test_constant_by_default(self):
        cfg = OptimizerConfig(method=Method.SGD, alpha=0.3)
        assert cfg.alpha_at(0) == cfg.alpha_at(1000) == 0.3

    def test_piecewise_milestones(self):
        sched = PiecewiseSchedule(milestones=(10, 20), factor=0.5)
        cfg = OptimizerConfig(method=Method.SGD, alpha=1.0, schedule=sched)
        assert cfg.alpha_at(9) == 1.0
        assert cfg.alpha_at(10) == 0.5
        assert cfg.alpha_at(20) == 0.25
        assert cfg.alpha_at(10_000) == 0.25

    def test_schedule_drives_update(self):
        sched = PiecewiseSchedule(milestones=(1,), factor=0.1)
        opt = OptimizerInstance(
            OptimizerConfig(method=Method.SGD, alpha=1.0, schedule=sched),
            np.zeros(1),
        )
        opt.step(np.array([1.0]))
        theta = opt.step(np.array([1.0]))
        assert theta[0] == -1.0 - 0.1


class TestConfigValidation:
    def test_alpha_positive(self):
        with pytest.raises(ValueError):
            OptimizerConfig(method=Method.SGD, alpha=0.0)

    def test_beta_range(self):
        with pytest.raises(ValueError):
            OptimizerConfig(method=Method.SGD, alpha=0.1, beta=1.0)

    def test_method_names_round_trip(self):
        for m in Method:
            assert Method.from_name(m.value) is m
        assert Method.from_name("M_SVAG") is Method.M_SVAG
        with pytest.raises(ValueError):
            Method.from_name("adamw")


class TestScaleInvariances:
    def gradient_sequence(self, seed=9, n=40, d=5):
        rng = RngStream(seed)
        return [rng.standard_normal(d) for _ in range(n)]

    def test_sign_methods_invariant_to_positive_scaling(self):
        grads = self.gradient_sequence()
        theta0 = np.ones(5)
        for method in (Method.SSD, Method.M_SSD):
            a = make_opt(method, theta0, beta=0.9)
            b = make_opt(method, theta0, beta=0.9)
            for g in grads:
                ta = a.step(g)
                tb = b.step(2.75 * g)
                assert ta.tobytes() == tb.tobytes()

    def test_adam_invariant_up_to_epsilon(self):
        grads = self.gradient_sequence()
        theta0 = np.ones(5)
        a = make_opt(Method.ADAM, theta0, epsilon=0.0)
        b = make_opt(Method.ADAM, theta0, epsilon=0.0)
        for g in grads:
            ta = a.step(g)
            tb = b.step(31.4 * g)
        np.testing.assert_allclose(ta, tb, rtol=1e-12)

    def test_variance_adapted_updates_scale_linearly(self):
        grads = self.gradient_sequence()
        for method in (Method.SVAG, Method.M_SVAG):
            c = 5.5
            a = make_opt(method, np.zeros(5), beta=0.9)
            b = make_opt(method, np.zeros(5), beta=0.9)
            for g in grads:
                ta = a.step(g)
                tb = b.step(c * g)
            np.testing.assert_allclose(c * ta, tb, rtol=1e-12)


class TestMsSdSignEquivalence:
    def test_sign_of_raw_average_equals_sign_of_debiased(self):
        # the debias factor is positive, so both signs agree at every step
        rng = RngStream(10)
        state = EmaState(6, 0.9)
        for _ in range(30):
            m, _ = ema_update(state, rng.standard_normal(6))
            np.testing.assert_array_equal(sign1(state.m_tilde), sign1(m))


class TestEquivalences:
    def test_quadrant_collapse_at_beta_zero(self):
        grads = [RngStream(12).standard_normal(4) for _ in range(100)]
        theta0 = np.ones(4)
        for averaged, base in ((Method.M_SGD, Method.SGD), (Method.M_SSD, Method.SSD)):
            a = make_opt(averaged, theta0, beta=0.0)
            b = make_opt(base, theta0)
            for g in grads:
                assert a.step(g).tobytes() == b.step(g).tobytes()

    def test_forced_zero_variance_collapses_msvag_to_msgd(self):
        rng = RngStream(13)
        grads = [rng.standard_normal(4) for _ in range(100)]
        a = make_opt(Method.M_SVAG, np.ones(4), beta=0.9, force_zero_variance=True)
        b = make_opt(Method.M_SGD, np.ones(4), beta=0.9)
        for g in grads:
            assert a.step(g).tobytes() == b.step(g).tobytes()

    def test_forced_zero_variance_collapses_adam_star_to_mssd(self):
        rng = RngStream(14)
        grads = [rng.standard_normal(4) for _ in range(100)]
        a = make_opt(Method.ADAM_STAR, np.ones(4), beta=0.9, force_zero_variance=True)
        b = make_opt(Method.M_SSD, np.ones(4), beta=0.9)
        for g in grads:
            assert a.step(g).tobytes() == b.step(g).tobytes()

    def test_identical_batch_rows_collapse_mb_to_forced_zero_msvag(self):
        rng = RngStream(15)
        a = make_opt(Method.M_SVAG_MB, np.ones(4), beta=0.9)
        b = make_opt(Method.M_SVAG, np.ones(4), beta=0.9, force_zero_variance=True)
        for _ in range(100):
            g = rng.standard_normal(4)
            grads = np.tile(g, (6, 1))
            assert a.step(g, per_example_grads=grads).tobytes() == b.step(g).tobytes()


class TestRun:
    def problem(self, nu=0.1, d=4):
        spec = SpectrumSpec.uniform(d, 0.5, 1.5)
        return build_problem(spec, "axis_aligned", nu, RngStream(100))

    def test_single_step_run(self):
        p = self.problem()
        opt = make_opt(Method.SGD, np.ones(4))
        rec = run(opt, p, 1, RngStream(1), experiment="t", seed=0)
        assert rec.steps == [0, 1]
        assert opt.t == 1

    def test_same_seed_byte_identical(self):
        p = self.problem()
        recs = []
        for _ in range(2):
            opt = make_opt(Method.M_SVAG, np.ones(4), beta=0.9)
            recs.append(run(opt, p, 50, RngStream(7, 3), experiment="t", seed=7))
        a, b = recs
        assert np.array(a.losses).tobytes() == np.array(b.losses).tobytes()
        assert a.steps == b.steps

    def test_newton_step_on_noise_free_quadratic(self):
        # exact line-search step size 1/lambda lands on the optimum at once
        spec = SpectrumSpec.uniform(1, 2.0, 2.0 + 1e-9)
        p = build_problem(spec, "axis_aligned", 0.0, RngStream(2))
        opt = make_opt(Method.SGD, np.array([3.0]), alpha=1.0 / p.lam[0])
        rec = run(opt, p, 1, RngStream(3), experiment="t", seed=0)
        assert rec.losses[-1] == 0.0

    def test_eval_every_subsamples(self):
        p = self.problem()
        opt = make_opt(Method.SGD, np.ones(4), alpha=0.05)
        rec = run(opt, p, 10, RngStream(4), eval_every=4, experiment="t", seed=0)
        assert rec.steps == [0, 4, 8, 10]

    def test_divergence_raises(self):
        p = self.problem()
        opt = make_opt(Method.SGD, np.ones(4), alpha=1e6)
        with pytest.raises(ValueError, match="non-finite"):
            run(opt, p, 200, RngStream(5), experiment="t", seed=0)

    def test_mb_and_oracle_methods_run(self):
        p = self.problem()
        opt = make_opt(Method.M_SVAG_MB, np.ones(4), beta=0.9, batch_size=4)
        rec = run(opt, p, 20, RngStream(6), experiment="t", seed=0)
        assert len(rec.losses) == 21
        opt = make_opt(Method.IDEALIZED_SVAG, np.ones(4))
        rec = run(opt, p, 20, RngStream(7), experiment="t", seed=0)
        assert len(rec.losses) == 21

    def test_idealized_with_zero_noise_is_gradient_descent(self):
        p = self.problem(nu=0.0)
        a = make_opt(Method.IDEALIZED_SVAG, np.ones(4), alpha=0.3)
        b = make_opt(Method.SGD, np.ones(4), alpha=0.3)
        ra = run(a, p, 30, RngStream(8), experiment="t", seed=0)
        rb = run(b, p, 30, RngStream(9), experiment="t", seed=0)
        np.testing.assert_allclose(ra.losses, rb.losses, rtol=1e-12)
