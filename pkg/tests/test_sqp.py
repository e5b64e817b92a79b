"""Quadratic test problems: samplers, closed forms, and the benchmark."""

import numpy as np
import pytest

from gradissect.core import RngStream, sign1
from gradissect.sqp import (
    Figure2Config,
    QuadraticProblem,
    SpectrumSpec,
    build_problem,
    figure2_experiment,
    haar_rotation,
    improvement_sgd,
    improvement_ssd_bound,
    optimal_step,
    p_diag,
    sign_success_probability,
    success_probabilities,
)


def small_problem(d=4, nu=0.5, orientation="random_rotation", seed=0):
    spec = SpectrumSpec.uniform(d, 0.5, 2.0)
    return build_problem(spec, orientation, nu, RngStream(seed))


class TestSpectrumSpec:
    def test_uniform_bounds(self):
        spec = SpectrumSpec.uniform(100, 0.1, 1.1)
        lam = spec.sample(RngStream(1))
        assert np.all(lam >= 0.1) and np.all(lam <= 1.1)

    def test_structured_counts_are_deterministic(self):
        spec = SpectrumSpec.structured(100, 1e-6, 1.0, 0.9, 30.0, 60.0)
        lam = spec.sample(RngStream(2))
        assert np.sum(lam >= 30.0) == 10
        assert np.sum(lam <= 1.0) == 90

    def test_invalid_bounds_rejected(self):
        with pytest.raises(ValueError):
            SpectrumSpec.uniform(10, 0.0, 1.0)
        with pytest.raises(ValueError):
            SpectrumSpec.structured(10, 0.1, 1.0, 1.5, 2.0, 3.0)


class TestBuildProblem:
    def test_axis_aligned_is_diagonal(self):
        p = small_problem(orientation="axis_aligned")
        assert p_diag(p.Q) == 1.0
        np.testing.assert_array_equal(np.diag(np.diag(p.Q)), p.Q)

    def test_eigenvalues_match_sampled_spectrum(self):
        p = small_problem(d=30)
        recomputed = np.linalg.eigvalsh(p.Q)
        np.testing.assert_allclose(recomputed, np.sort(p.lam), atol=1e-8)

    def test_rotated_is_symmetric_orthonormal(self):
        p = small_problem(d=20)
        assert np.abs(p.Q - p.Q.T).max() <= 1e-10
        assert np.abs(p.V.T @ p.V - np.eye(20)).max() <= 1e-10

    def test_unknown_orientation(self):
        with pytest.raises(ValueError):
            build_problem(SpectrumSpec.uniform(3, 0.5, 1.0), "diag", 0.0, RngStream(1))


class TestHaarRotation:
    def test_one_dimensional_rotation_is_identity(self):
        np.testing.assert_array_equal(haar_rotation(1, RngStream(3)), [[1.0]])

    def test_orthonormal_and_proper(self):
        r = haar_rotation(100, RngStream(4))
        assert np.abs(r.T @ r - np.eye(100)).max() <= 1e-10
        assert abs(np.linalg.det(r) - 1.0) < 1e-8

    def test_every_draw_is_proper(self):
        rng = RngStream(5)
        for _ in range(20):
            r = haar_rotation(7, rng)
            assert np.linalg.det(r) > 0.0


class TestLossAndGradient:
    def test_minimum_value_zero_without_noise(self):
        p = small_problem(nu=0.0)
        assert p.loss(p.x_star) == 0.0

    def test_noise_floor(self):
        p = small_problem(nu=0.5)
        assert abs(p.loss(p.x_star) - 0.5**2 / 2 * p.lam.sum()) < 1e-12

    def test_one_dimensional_hand_value(self):
        p = QuadraticProblem(
            Q=np.array([[2.0]]),
            x_star=np.zeros(1),
            nu=0.0,
            lam=np.array([2.0]),
            V=np.eye(1),
        )
        assert p.loss(np.array([3.0])) == 9.0

    def test_loss_nonnegative_above_floor(self):
        p = small_problem(nu=0.3)
        rng = RngStream(6)
        floor = p.loss(p.x_star)
        for _ in range(50):
            assert p.loss(rng.standard_normal(4)) >= floor

    def test_noise_free_gradient_exact(self):
        p = small_problem(nu=0.0)
        theta = np.array([1.0, -1.0, 0.5, 2.0])
        g = p.sample_gradient(theta, RngStream(7))
        np.testing.assert_array_equal(g, p.grad(theta))

    def test_gradient_mean_and_variance(self):
        p = small_problem(nu=0.7, d=4)
        theta = np.array([1.0, -1.0, 0.5, 2.0])
        g = p.sample_gradients(theta, RngStream(8), 100_000)
        grad = p.grad(theta)
        sd = p.grad_noise_stddev
        # mean within 3 standard errors per coordinate
        assert np.all(np.abs(g.mean(axis=0) - grad) <= 3 * sd / np.sqrt(1e5))
        # per-coordinate variance within 5%
        np.testing.assert_allclose(g.var(axis=0), sd**2, rtol=0.05)

    def test_gradient_covariance_structure(self):
        p = small_problem(nu=0.4, d=6)
        theta = RngStream(9).standard_normal(6)
        g = p.sample_gradients(theta, RngStream(10), 100_000)
        emp = np.cov(g.T)
        target = p.nu**2 * (p.Q @ p.Q)
        rel = np.linalg.norm(emp - target) / np.linalg.norm(target)
        assert rel < 0.05


class TestSuccessProbabilities:
    def test_pure_noise_limit(self):
        assert sign_success_probability(1e-300, 1e300) == pytest.approx(0.5, abs=1e-12)
        assert sign_success_probability(0.0, 1.0) == 0.5

    def test_unit_signal_to_noise(self):
        # Phi(1), the standard normal CDF at one
        assert abs(sign_success_probability(1.0, 1.0) - 0.8413447460685429) < 1e-12

    def test_degenerate_noise(self):
        assert sign_success_probability(-2.0, 0.0) == 1.0
        with pytest.raises(ValueError):
            sign_success_probability(0.0, 0.0)

    def test_range_and_monotonicity(self):
        ratios = np.linspace(0.0, 5.0, 101)
        probs = [sign_success_probability(r, 1.0) for r in ratios]
        assert all(0.5 <= p <= 1.0 for p in probs)
        assert all(a <= b for a, b in zip(probs, probs[1:]))

    def test_problem_level_values(self):
        p = small_problem(nu=0.6)
        theta = np.array([2.0, -1.0, 0.5, 1.0])
        rho_vec = success_probabilities(p, theta)
        grad = p.grad(theta)
        sd = p.grad_noise_stddev
        assert np.all(rho_vec >= 0.5) and np.all(rho_vec <= 1.0)
        # empirical sign agreement within 3 Bernoulli standard errors
        g = p.sample_gradients(theta, RngStream(11), 100_000)
        agree = (sign1(g) == sign1(grad)).mean(axis=0)
        se = np.sqrt(rho_vec * (1 - rho_vec) / 1e5)
        assert np.all(np.abs(agree - rho_vec) <= 3 * se + 1e-12)

    def test_undefined_coordinate_raises(self):
        p = small_problem(nu=0.0, orientation="axis_aligned")
        with pytest.raises(ValueError):
            success_probabilities(p, p.x_star)


class TestImprovements:
    def test_sgd_hand_value(self):
        p = QuadraticProblem(
            Q=np.eye(2), x_star=np.zeros(2), nu=0.0, lam=np.ones(2), V=np.eye(2)
        )
        assert abs(improvement_sgd(p, np.array([1.0, 0.0])) - 0.5) < 1e-15

    def test_sgd_noise_free_reduces_to_rayleigh_form(self):
        p = small_problem(nu=0.0)
        theta = np.array([1.0, 2.0, -0.5, 0.3])
        grad = p.grad(theta)
        expected = 0.5 * (grad @ grad) ** 2 / (grad @ (p.Q @ grad))
        assert abs(improvement_sgd(p, theta) - expected) < 1e-12

    def test_zero_gradient_rejected(self):
        p = small_problem(nu=0.5)
        with pytest.raises(ValueError):
            improvement_sgd(p, p.x_star)
        with pytest.raises(ValueError):
            improvement_ssd_bound(p, p.x_star)

    def test_ssd_bound_diagonal_noise_free(self):
        p = small_problem(nu=0.0, orientation="axis_aligned")
        theta = np.array([1.0, -2.0, 0.5, 1.5])
        grad = p.grad(theta)
        expected = 0.5 * np.abs(grad).sum() ** 2 / p.lam.sum()
        assert abs(improvement_ssd_bound(p, theta) - expected) < 1e-12

    def test_ssd_bound_invariant_under_joint_permutation(self):
        p = small_problem(nu=0.4, d=5)
        theta = RngStream(12).standard_normal(5)
        perm = np.array([3, 0, 4, 1, 2])
        pp = QuadraticProblem(
            Q=p.Q[np.ix_(perm, perm)],
            x_star=p.x_star[perm],
            nu=p.nu,
            lam=p.lam,
            V=p.V[perm][:, perm],
        )
        a = improvement_ssd_bound(p, theta)
        b = improvement_ssd_bound(pp, theta[perm])
        assert abs(a - b) < 1e-12

    def test_sgd_formula_matches_simulation(self):
        p = small_problem(nu=0.5, d=5, seed=21)
        theta = RngStream(22).standard_normal(5) * 2
        alpha = optimal_step(p, theta, "sgd")
        g = p.sample_gradients(theta, RngStream(23), 200_000)
        thetas = theta[None, :] - alpha * g
        diff = thetas - p.x_star[None, :]
        losses = 0.5 * np.einsum("ij,ij->i", diff @ p.Q, diff)
        losses += 0.5 * p.nu**2 * p.lam.sum()
        mc = p.loss(theta) - losses.mean()
        assert abs(mc - improvement_sgd(p, theta)) / improvement_sgd(p, theta) < 0.02


class TestPdiag:
    def test_identity(self):
        assert p_diag(np.eye(5)) == 1.0

    def test_hand_value(self):
        assert abs(p_diag(np.array([[2.0, 1.0], [1.0, 2.0]])) - 4.0 / 6.0) < 1e-15

    def test_lower_bound_on_random_pd(self):
        rng = RngStream(13)
        d = 20
        for _ in range(100):
            a = rng.standard_normal((d, d))
            q = a @ a.T + 1e-9 * np.eye(d)
            assert p_diag(q) >= 1.0 / d

    def test_signed_permutation_invariance(self):
        rng = RngStream(14)
        q = rng.standard_normal((6, 6))
        q = q @ q.T
        perm = np.array([2, 0, 5, 1, 4, 3])
        signs = np.array([1.0, -1.0, 1.0, -1.0, -1.0, 1.0])
        s = np.zeros((6, 6))
        s[np.arange(6), perm] = signs
        assert abs(p_diag(s @ q @ s.T) - p_diag(q)) < 1e-14

    def test_zero_matrix_rejected(self):
        with pytest.raises(ValueError):
            p_diag(np.zeros((3, 3)))


class TestOptimalStep:
    def test_sgd_noise_free_is_exact_line_search(self):
        p = small_problem(nu=0.0)
        theta = np.array([1.0, -1.0, 2.0, 0.5])
        grad = p.grad(theta)
        expected = (grad @ grad) / (grad @ (p.Q @ grad))
        assert abs(optimal_step(p, theta, "sgd") - expected) < 1e-14

    def test_ssd_diagonal_noise_free(self):
        p = small_problem(nu=0.0, orientation="axis_aligned")
        theta = np.array([1.0, -1.0, 2.0, 0.5])
        grad = p.grad(theta)
        expected = np.abs(grad).sum() / p.lam.sum()
        got = optimal_step(p, theta, "ssd", mc_samples=10, rng=RngStream(15))
        assert abs(got - expected) < 1e-14

    def test_bound_denominator_never_larger_step(self):
        p = small_problem(nu=0.5, d=6, seed=30)
        theta = RngStream(16).standard_normal(6)
        a_mc = optimal_step(p, theta, "ssd", mc_samples=4000, rng=RngStream(17))
        a_bound = optimal_step(p, theta, "ssd", denominator="bound")
        assert a_bound <= a_mc * 1.05

    def test_local_optimality_by_simulation(self):
        p = small_problem(nu=0.5, d=4, seed=31)
        theta = RngStream(18).standard_normal(4) * 1.5
        for direction in ("sgd", "ssd"):
            alpha = optimal_step(
                p, theta, direction, mc_samples=20_000, rng=RngStream(19)
            )
            g = p.sample_gradients(theta, RngStream(20), 200_000)
            z = -g if direction == "sgd" else -sign1(g)
            means = []
            for a in (0.9 * alpha, alpha, 1.1 * alpha):
                thetas = theta[None, :] + a * z
                diff = thetas - p.x_star[None, :]
                losses = 0.5 * np.einsum("ij,ij->i", diff @ p.Q, diff)
                means.append(losses.mean())
            assert means[1] <= means[0] + 1e-9
            assert means[1] <= means[2] + 1e-9

    def test_errors(self):
        p = small_problem(nu=0.5)
        with pytest.raises(ValueError):
            optimal_step(p, p.x_star, "sgd")
        theta = np.ones(4)
        with pytest.raises(ValueError):
            optimal_step(p, theta, "ssd", mc_samples=0, rng=RngStream(1))
        with pytest.raises(ValueError):
            optimal_step(p, theta, "ssd", rng=None)
        with pytest.raises(ValueError):
            optimal_step(p, theta, "spam")


SMALL_FIG2 = Figure2Config(
    d=12,
    steps=25,
    seeds=(0, 1),
    mc_samples=64,
    workers=1,
    ill_tail_lo=8.0,
    ill_tail_hi=12.0,
)


class TestFigure2:
    def test_cell_count_and_order(self):
        records = figure2_experiment(SMALL_FIG2)
        # 2 spectra x 2 orientations x 3 noise levels x 2 methods x 2 seeds
        assert len(records) == 48
        keys = [r.sort_key() for r in records]
        assert keys == sorted(keys)

    def test_rows_cover_every_step(self):
        records = figure2_experiment(SMALL_FIG2)
        assert all(r.steps == list(range(26)) for r in records)

    def test_deterministic_across_calls(self):
        a = figure2_experiment(SMALL_FIG2)
        b = figure2_experiment(SMALL_FIG2)
        for ra, rb in zip(a, b):
            assert np.array(ra.losses).tobytes() == np.array(rb.losses).tobytes()

    def test_deterministic_across_worker_counts(self):
        from dataclasses import replace

        a = figure2_experiment(SMALL_FIG2)
        b = figure2_experiment(replace(SMALL_FIG2, workers=2))
        for ra, rb in zip(a, b):
            assert np.array(ra.losses).tobytes() == np.array(rb.losses).tobytes()
