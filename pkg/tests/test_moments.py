import numpy as np
import pytest

from maxentkf.moments import (
    IncompleteMomentsError,
    MomentVector,
    affine_transform_moments,
    gaussian_moments,
    locating_matrix,
    moment_constraints,
    moment_matrix,
    moment_vector_from_dict,
    sample_moments,
)
from maxentkf.polyalg import enumerate_basis


class TestMomentMatrix:
    def test_standard_normal_r1(self):
        m = gaussian_moments([0.0], np.eye(1), 2)
        assert np.allclose(moment_matrix(m, 1), [[1, 0], [0, 1]])

    def test_layout_matches_worked_6x6(self):
        # n=2, r=2: entry (i, j) holds the moment of x^(a_i + a_j)
        basis = enumerate_basis(2, 2)
        rng = np.random.default_rng(4)
        x = rng.normal(size=2)
        big = enumerate_basis(2, 4)
        mv = MomentVector(big, big.eval_many(x.reshape(1, -1))[0])
        M = moment_matrix(mv, 2)
        phi = basis.eval_many(x.reshape(1, -1))[0]
        assert np.allclose(M, np.outer(phi, phi), atol=1e-12)
        # spot-check the printed layout: M[1, 3] = x1^3, M[3, 5] = x1^2 x2^2
        assert M[1, 3] == pytest.approx(x[0] ** 3)
        assert M[3, 5] == pytest.approx(x[0] ** 2 * x[1] ** 2)

    def test_uniform_sample_moments_psd(self):
        rng = np.random.default_rng(123)
        samples = rng.uniform(0.0, 1.0, size=(100_000, 1))
        mv = sample_moments(samples, 4)
        M = moment_matrix(mv, 2)
        assert M[0, 1] == pytest.approx(0.5, abs=2e-3)
        assert M[1, 1] == pytest.approx(1.0 / 3.0, abs=2e-3)
        assert np.linalg.eigvalsh(M).min() >= -1e-8 * np.linalg.norm(M)

    def test_missing_moment_raises(self):
        m = gaussian_moments([0.0], np.eye(1), 2)
        with pytest.raises(IncompleteMomentsError):
            moment_matrix(m, 2)  # needs order 4


class TestLocatingMatrix:
    def test_normalizer_three(self):
        lm = locating_matrix((2, 0), 2)
        assert lm.normalizer == 3
        basis = enumerate_basis(2, 2)
        expected = np.zeros((6, 6))
        expected[basis.position((0, 0)), basis.position((2, 0))] = 1 / 3
        expected[basis.position((2, 0)), basis.position((0, 0))] = 1 / 3
        expected[basis.position((1, 0)), basis.position((1, 0))] = 1 / 3
        assert np.allclose(lm.matrix, expected)

    def test_constant_cell(self):
        lm = locating_matrix((0, 0), 2)
        assert lm.normalizer == 1
        assert lm.matrix[0, 0] == 1.0
        assert np.count_nonzero(lm.matrix) == 1

    def test_cross_term_pairs(self):
        # gamma=(1,1) at r=2 has ordered pairs (0,0)+(1,1), (1,0)+(0,1),
        # (0,1)+(1,0), (1,1)+(0,0)
        lm = locating_matrix((1, 1), 2)
        pairs = [
            ((0, 0), (1, 1)),
            ((0, 1), (1, 0)),
            ((1, 0), (0, 1)),
            ((1, 1), (0, 0)),
        ]
        assert lm.normalizer == len(pairs)

    def test_reads_monomial_off_moment_matrix(self):
        rng = np.random.default_rng(8)
        big = enumerate_basis(2, 4)
        for _ in range(50):
            x = rng.normal(size=2)
            mv = MomentVector(big, big.eval_many(x.reshape(1, -1))[0])
            M = moment_matrix(mv, 2)
            for gamma in [(2, 0), (1, 1), (0, 2), (3, 1), (4, 0), (0, 0)]:
                lm = locating_matrix(gamma, 2)
                want = x[0] ** gamma[0] * x[1] ** gamma[1]
                assert np.sum(lm.matrix * M) == pytest.approx(want, rel=1e-10, abs=1e-10)

    def test_degree_guard(self):
        with pytest.raises(ValueError):
            locating_matrix((5, 0), 2)

    def test_reconstruction_identity(self):
        # sum_gamma C_gamma B_gamma x^gamma rebuilds the moment matrix
        rng = np.random.default_rng(17)
        for _ in range(20):
            x = rng.normal(size=2)
            phi = enumerate_basis(2, 2).eval_many(x.reshape(1, -1))[0]
            M = np.outer(phi, phi)
            acc = np.zeros_like(M)
            for gamma in enumerate_basis(2, 4).indices:
                lm = locating_matrix(gamma, 2)
                acc += lm.normalizer * lm.matrix * (x[0] ** gamma[0] * x[1] ** gamma[1])
            assert np.max(np.abs(acc - M)) < 1e-10


class TestMomentConstraints:
    def test_printed_example_exact(self):
        # gamma=(2,0), alpha=(1,0): +1 at the two (1, x1^2) cells, -2 at (x1, x1)
        basis = enumerate_basis(2, 2)
        cons = moment_constraints(2, 2)
        expected = np.zeros((6, 6))
        expected[basis.position((0, 0)), basis.position((2, 0))] = 1.0
        expected[basis.position((2, 0)), basis.position((0, 0))] = 1.0
        expected[basis.position((1, 0)), basis.position((1, 0))] = -2.0
        hit = [c for c in cons if np.array_equal(c, expected)]
        assert len(hit) == 1

    def test_no_constraints_scalar_r1(self):
        assert moment_constraints(1, 1) == []

    def test_count_matches_enumeration(self):
        # one constraint per non-canonical unordered representation
        from maxentkf.moments import _representations

        n, r = 2, 2
        expected = 0
        for gamma in enumerate_basis(n, 2 * r).indices:
            reps = {tuple(sorted(p)) for p in _representations(gamma, r)}
            expected += max(0, len(reps) - 1)
        assert len(moment_constraints(r, n)) == expected

    def test_annihilates_rank_one_moment_matrices(self):
        rng = np.random.default_rng(21)
        cons = moment_constraints(2, 2)
        basis = enumerate_basis(2, 2)
        for _ in range(1000):
            x = rng.normal(size=2)
            phi = basis.eval_many(x.reshape(1, -1))[0]
            M = np.outer(phi, phi)
            for c in cons:
                assert abs(np.sum(c * M)) < 1e-10


class TestSampleMoments:
    def test_single_point_mass(self):
        mv = sample_moments(np.array([[1.0, 1.0]]), 2)
        assert np.allclose(mv.values, 1.0)

    def test_unit_mass_entry(self):
        rng = np.random.default_rng(0)
        mv = sample_moments(rng.normal(size=(100, 3)), 2)
        assert mv.value((0, 0, 0)) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            sample_moments(np.zeros((0, 2)), 2)

    def test_gaussian_moments_within_standard_errors(self):
        rng = np.random.default_rng(99)
        n = 1_000_000
        samples = rng.normal(size=(n, 2))
        mv = sample_moments(samples, 4)
        exact = gaussian_moments([0.0, 0.0], np.eye(2), 4)
        big = sample_moments(samples, 8)  # for standard errors of order-4 terms
        for i, alpha in enumerate(mv.basis.indices):
            doubled = tuple(2 * a for a in alpha)
            second = big.value(doubled)
            se = np.sqrt(max(second - exact.values[i] ** 2, 1e-30) / n)
            assert abs(mv.values[i] - exact.values[i]) <= 5 * se + 1e-12

    def test_bimodal_noise_low_moments(self):
        from maxentkf.scenarios import gen_bin_noise

        v = gen_bin_noise(100_000, seed=5)
        mv = sample_moments(v, 4)
        # per-axis variance 1 + 0.04, fourth moment 1 + 6*0.04 + 3*0.04^2
        assert mv.value((1, 0)) == pytest.approx(0.0, abs=0.02)
        assert mv.value((2, 0)) == pytest.approx(1.04, rel=0.02)
        assert mv.value((0, 2)) == pytest.approx(1.04, rel=0.02)
        assert mv.value((4, 0)) == pytest.approx(1.2448, rel=0.03)

    def test_moment_matrix_of_samples_is_psd(self):
        rng = np.random.default_rng(31)
        for _ in range(10):
            pts = rng.normal(size=(50, 2)) ** 3
            M = moment_matrix(sample_moments(pts, 4), 2)
            assert np.linalg.eigvalsh(M).min() >= -1e-8 * np.linalg.norm(M)


class TestTransforms:
    def test_affine_round_trip(self):
        mv = gaussian_moments([1.0, -2.0], np.diag([4.0, 0.25]), 4)
        shift = np.array([1.0, -2.0])
        scale = np.array([2.0, 0.5])
        z = affine_transform_moments(mv, -shift / scale, 1.0 / scale)
        std = gaussian_moments([0.0, 0.0], np.eye(2), 4)
        assert np.max(np.abs(z.values - std.values)) < 1e-12
        back = affine_transform_moments(z, shift, scale)
        assert np.max(np.abs(back.values - mv.values)) < 1e-12

    def test_csv_round_trip(self):
        mv = gaussian_moments([0.5], np.array([[2.0]]), 3)
        again = MomentVector.from_csv(mv.to_csv())
        assert np.array_equal(again.values, mv.values)
        assert again.basis.indices == mv.basis.indices

    def test_gaussian_moments_against_sampling(self):
        rng = np.random.default_rng(12)
        mean = np.array([0.3, -0.6])
        cov = np.array([[1.0, 0.4], [0.4, 0.8]])
        exact = gaussian_moments(mean, cov, 4)
        pts = rng.multivariate_normal(mean, cov, size=400_000)
        emp = sample_moments(pts, 4)
        assert np.max(np.abs(exact.values - emp.values)) < 0.05
