import math

import numpy as np
import pytest

from maxentkf.med import (
    FitOptions,
    MedCoefficients,
    MomentConsistencyError,
    fit_med,
    gaussian_med,
    med_logpdf,
    med_logpdf_many,
    med_moments,
    normalize,
    potential,
    potential_gradient,
)
from maxentkf.moments import (
    MomentVector,
    gaussian_moments,
    moment_vector_from_dict,
    sample_moments,
)
from maxentkf.polyalg import enumerate_basis, quotient_basis
from maxentkf.quadrature import AngleBox, Box, unbounded_box

LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


def standard_normal_med(order=2):
    basis = enumerate_basis(1, order)
    lam = np.zeros(len(basis))
    lam[basis.position((0,))] = LOG_SQRT_2PI
    lam[basis.position((2,))] = 0.5
    return MedCoefficients(basis, lam, Box((-8.0,), (8.0,)),
                           np.zeros(1), np.ones(1))


class TestPotential:
    def test_self_consistency_at_gaussian(self):
        med = standard_normal_med()
        targets = gaussian_moments([0.0], np.eye(1), 2)
        val = potential(med, targets)
        expected = 1.0 + med.lam @ targets.values
        assert val == pytest.approx(expected, abs=1e-8)
        grad = potential_gradient(med, targets)
        assert np.max(np.abs(grad)) < 1e-8

    def test_uniform_box(self):
        basis = enumerate_basis(1, 0)
        med = MedCoefficients(basis, np.zeros(1), Box((0.0,), (1.0,)),
                              np.zeros(1), np.ones(1))
        targets = MomentVector(basis, np.array([1.0]))
        assert potential(med, targets) == pytest.approx(1.0, abs=1e-10)

    def test_convexity_probe_around_optimum(self):
        med = standard_normal_med()
        targets = gaussian_moments([0.0], np.eye(1), 2)
        base = potential(med, targets)
        rng = np.random.default_rng(2)
        for _ in range(10):
            delta = 0.1 * rng.normal(size=3)
            bumped = MedCoefficients(med.basis, med.lam + delta, med.chart,
                                     med.shift, med.scale)
            assert potential(bumped, targets) > base - 1e-9

    def test_midpoint_convexity(self):
        targets = gaussian_moments([0.0], np.eye(1), 2)
        rng = np.random.default_rng(5)
        basis = enumerate_basis(1, 2)
        chart = Box((-8.0,), (8.0,))
        for _ in range(100):
            l1 = np.array([rng.normal(), 0.3 * rng.normal(), 0.2 + rng.random()])
            l2 = np.array([rng.normal(), 0.3 * rng.normal(), 0.2 + rng.random()])
            m1 = MedCoefficients(basis, l1, chart, np.zeros(1), np.ones(1))
            m2 = MedCoefficients(basis, l2, chart, np.zeros(1), np.ones(1))
            mid = MedCoefficients(basis, (l1 + l2) / 2, chart, np.zeros(1), np.ones(1))
            d1, d2 = potential(m1, targets), potential(m2, targets)
            dm = potential(mid, targets)
            assert dm <= 0.5 * (d1 + d2) + 1e-9


class TestPotentialGradient:
    def test_finite_difference_match(self):
        rng = np.random.default_rng(7)
        basis = enumerate_basis(1, 2)
        chart = Box((-8.0,), (8.0,))
        targets = gaussian_moments([0.0], np.eye(1), 2)
        h = 1e-5
        for _ in range(20):
            lam = np.array([rng.normal(), 0.3 * rng.normal(), 0.3 + 0.5 * rng.random()])
            med = MedCoefficients(basis, lam, chart, np.zeros(1), np.ones(1))
            grad = potential_gradient(med, targets, rel_tol=1e-10)
            for k in range(3):
                dp = lam.copy()
                dm = lam.copy()
                dp[k] += h
                dm[k] -= h
                fd = (
                    potential(MedCoefficients(basis, dp, chart, np.zeros(1), np.ones(1)),
                              targets, rel_tol=1e-10)
                    - potential(MedCoefficients(basis, dm, chart, np.zeros(1), np.ones(1)),
                                targets, rel_tol=1e-10)
                ) / (2 * h)
                assert grad[k] == pytest.approx(fd, abs=1e-5)

    def test_inflated_second_moment_sign(self):
        # gradient entry for x^2 is target minus current: inflating the
        # target second moment makes it positive
        med = standard_normal_med()
        basis = enumerate_basis(1, 2)
        targets = moment_vector_from_dict(1, 2, {(0,): 1.0, (1,): 0.0, (2,): 1.5})
        grad = potential_gradient(med, targets)
        assert grad[basis.position((2,))] > 0


class TestFitMed:
    def test_standard_normal_coefficients(self):
        targets = gaussian_moments([0.0], np.eye(1), 2)
        med, report = fit_med(targets, unbounded_box(1))
        assert report.converged
        assert med.lam[0] == pytest.approx(LOG_SQRT_2PI, abs=1e-5)
        assert med.lam[1] == pytest.approx(0.0, abs=1e-5)
        assert med.lam[2] == pytest.approx(0.5, abs=1e-5)

    def test_mass_only_targets_give_uniform(self):
        basis = enumerate_basis(1, 0)
        targets = MomentVector(basis, np.array([1.0]))
        med, report = fit_med(targets, Box((0.0,), (1.0,)))
        assert report.converged
        assert med.lam[0] == pytest.approx(0.0, abs=1e-7)

    def test_round_trip_moments(self):
        rng = np.random.default_rng(11)
        samples = rng.normal(size=(50_000, 2)) @ np.array([[1.0, 0.3], [0.0, 0.7]])
        targets = sample_moments(samples, 4)
        med, report = fit_med(targets, unbounded_box(2),
                              opts=FitOptions(quad_rel_tol=1e-9))
        assert report.converged
        fitted = med_moments(med, 4)
        assert np.max(np.abs(fitted.values - targets.values)) < 1e-5
        assert report.moment_residual < 1e-5

    def test_skewed_scaled_targets(self):
        # standardization must cope with far-from-standard placement
        rng = np.random.default_rng(13)
        raw = rng.gamma(4.0, 2.0, size=200_000) + 30.0
        targets = sample_moments(raw.reshape(-1, 1), 4)
        med, report = fit_med(targets, unbounded_box(1))
        assert report.converged
        fitted = med_moments(med, 4)
        rel = np.abs(fitted.values - targets.values) / np.maximum(1.0, np.abs(targets.values))
        assert np.max(rel) < 1e-5

    def test_rejects_infeasible_targets(self):
        # variance cannot be negative
        targets = moment_vector_from_dict(1, 2, {(0,): 1.0, (1,): 0.0, (2,): -0.5})
        with pytest.raises(MomentConsistencyError):
            fit_med(targets, unbounded_box(1))

    def test_rejects_degenerate_targets(self):
        targets = moment_vector_from_dict(1, 2, {(0,): 1.0, (1,): 0.0, (2,): 0.0})
        with pytest.raises(MomentConsistencyError):
            fit_med(targets, unbounded_box(1))

    def test_rejects_wrong_mass(self):
        targets = moment_vector_from_dict(1, 2, {(0,): 2.0, (1,): 0.0, (2,): 1.0})
        with pytest.raises(MomentConsistencyError):
            fit_med(targets, unbounded_box(1))

    def test_quotient_fit_on_circle(self):
        # concentrated direction distribution on the unit circle
        rng = np.random.default_rng(3)
        theta = 0.8 + 0.3 * rng.normal(size=100_000)
        pts = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        targets = sample_moments(pts, 4)
        med, report = fit_med(targets, AngleBox())
        assert report.converged
        qb = quotient_basis(AngleBox().constraint_polys(), 4)
        # constraint coordinates stay zero
        assert np.max(np.abs(qb.q.T @ med.lam)) < 1e-10
        fitted = med_moments(med, 4)
        assert np.max(np.abs(fitted.values - targets.values)) < 1e-5

    def test_ideal_shift_leaves_chart_density_unchanged(self):
        rng = np.random.default_rng(4)
        theta = 0.3 * rng.normal(size=20_000) - 1.0
        pts = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        targets = sample_moments(pts, 2)
        med, _ = fit_med(targets, AngleBox())
        qb = quotient_basis(AngleBox().constraint_polys(), 2)
        bump = qb.ideal_rows[0]
        shifted = MedCoefficients(med.basis, med.lam + bump, med.chart,
                                  med.shift, med.scale, med.q_perp)
        probe = np.stack([np.cos(theta[:50]), np.sin(theta[:50])], axis=1)
        a = med_logpdf_many(med, probe)
        b = med_logpdf_many(shifted, probe)
        assert np.max(np.abs(a - b)) < 1e-9


class TestMedMoments:
    def test_gaussian_closed_form(self):
        med = standard_normal_med()
        mv = med_moments(med, 4)
        exact = gaussian_moments([0.0], np.eye(1), 4)
        assert np.max(np.abs(mv.values - exact.values)) < 1e-6

    def test_uniform_power_integrals(self):
        basis = enumerate_basis(1, 0)
        med = MedCoefficients(basis, np.zeros(1), Box((0.0,), (1.0,)),
                              np.zeros(1), np.ones(1))
        mv = med_moments(med, 3)
        assert np.allclose(mv.values, [1.0, 0.5, 1 / 3, 0.25], atol=1e-9)

    def test_order_above_basis(self):
        med = standard_normal_med()
        mv = med_moments(med, 6)
        assert mv.value((6,)) == pytest.approx(15.0, rel=1e-6)


class TestNormalize:
    def test_idempotent(self):
        med = normalize(standard_normal_med())
        again = normalize(med)
        assert np.max(np.abs(again.lam - med.lam)) < 1e-10

    def test_shift_inverse(self):
        med = standard_normal_med()
        off = MedCoefficients(med.basis, med.lam - math.log(2.0) * np.eye(3)[0],
                              med.chart, med.shift, med.scale)
        fixed = normalize(off)
        assert np.max(np.abs(fixed.lam - med.lam)) < 1e-10

    def test_unit_mass_after(self):
        rng = np.random.default_rng(9)
        basis = enumerate_basis(1, 4)
        lam = np.zeros(len(basis))
        lam[basis.position((2,))] = 0.7
        lam[basis.position((4,))] = 0.05
        lam[basis.position((1,))] = 0.2 * rng.normal()
        med = MedCoefficients(basis, lam, Box((-8.0,), (8.0,)),
                              np.zeros(1), np.ones(1))
        from maxentkf.quadrature import integrate_med_batch

        fixed = normalize(med)
        mass = integrate_med_batch(fixed, [(0,)], rel_tol=1e-9).value[0]
        assert mass == pytest.approx(1.0, abs=1e-6)


class TestLogpdf:
    def test_gaussian_at_mean(self):
        med = standard_normal_med()
        assert med_logpdf(med, [0.0]) == pytest.approx(-med.lam[0])

    def test_even_symmetry(self):
        med = standard_normal_med()
        assert med_logpdf(med, [1.3]) == pytest.approx(med_logpdf(med, [-1.3]))

    def test_matches_histogram_density(self):
        rng = np.random.default_rng(21)
        samples = rng.normal(0.0, 1.0, size=(400_000, 1))
        targets = sample_moments(samples, 4)
        med, _ = fit_med(targets, unbounded_box(1))
        hist, edges = np.histogram(samples, bins=60, range=(-2.0, 2.0), density=True)
        centers = 0.5 * (edges[:-1] + edges[1:])
        logp = med_logpdf_many(med, centers.reshape(-1, 1))
        assert np.max(np.abs(np.exp(logp) - hist)) < 0.05


class TestHessianStructure:
    def test_fd_hessian_equals_unnormalized_moment_matrix(self):
        # d2 Delta / dlam_b dlam_c = integral exp(-lam.phi) x^(b+c)
        from maxentkf.quadrature import integrate_med_batch

        rng = np.random.default_rng(31)
        basis = enumerate_basis(1, 2)
        chart = Box((-8.0,), (8.0,))
        targets = gaussian_moments([0.0], np.eye(1), 2)
        h = 1e-4
        for _ in range(5):
            lam = np.array([rng.normal() * 0.3, 0.2 * rng.normal(), 0.4 + 0.3 * rng.random()])
            med = MedCoefficients(basis, lam, chart, np.zeros(1), np.ones(1))
            pairs = [tuple(np.add(a, b)) for a in basis.indices for b in basis.indices]
            raw = integrate_med_batch(med, pairs, rel_tol=1e-10).value
            M = raw.reshape(len(basis), len(basis))
            fd = np.zeros_like(M)
            for k in range(len(basis)):
                lp, lm = lam.copy(), lam.copy()
                lp[k] += h
                lm[k] -= h
                gp = -integrate_med_batch(
                    MedCoefficients(basis, lp, chart, np.zeros(1), np.ones(1)),
                    basis.indices, rel_tol=1e-10).value
                gm = -integrate_med_batch(
                    MedCoefficients(basis, lm, chart, np.zeros(1), np.ones(1)),
                    basis.indices, rel_tol=1e-10).value
                fd[:, k] = (gp - gm) / (2 * h)
            assert np.max(np.abs(fd - M) / (1.0 + np.abs(M))) < 1e-4
            assert np.linalg.eigvalsh(M).min() > 0


class TestGaussianMed:
    def test_matches_fit(self):
        basis = enumerate_basis(2, 2)
        mean = np.array([0.4, -1.0])
        cov = np.array([[0.5, 0.1], [0.1, 0.3]])
        med = gaussian_med(basis, mean, cov, unbounded_box(2))
        mv = med_moments(med, 2)
        exact = gaussian_moments(mean, cov, 2)
        assert np.max(np.abs(mv.values - exact.values)) < 1e-6
