import math

import numpy as np
import pytest

from maxentkf.polyalg import (
    Polynomial,
    build_extended_observation,
    build_extended_process,
    enumerate_basis,
    eval_basis,
    poly_power_expand,
    quotient_basis,
)


def P(nvars, terms):
    return Polynomial(nvars, terms)


class TestEnumerateBasis:
    def test_counts(self):
        assert len(enumerate_basis(2, 2)) == 6
        assert len(enumerate_basis(3, 0)) == 1
        assert len(enumerate_basis(2, 3)) == 10  # comb(5, 2)

    def test_two_var_order_two_listing(self):
        # 1, x1, x2, x1^2, x1*x2, x2^2
        b = enumerate_basis(2, 2)
        assert b.indices == ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))

    def test_first_index_is_constant(self):
        for n, r in [(1, 4), (3, 2), (4, 3)]:
            assert enumerate_basis(n, r).indices[0] == (0,) * n

    def test_size_formula(self):
        for n, r in [(1, 5), (2, 6), (3, 4), (4, 4)]:
            assert len(enumerate_basis(n, r)) == math.comb(n + r, n)

    def test_strict_total_order(self):
        from maxentkf.polyalg import grlex_key

        idx = enumerate_basis(3, 3).indices
        keys = [grlex_key(a) for a in idx]
        assert keys == sorted(keys)
        assert len(set(keys)) == len(keys)

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            enumerate_basis(0, 2)
        with pytest.raises(ValueError):
            enumerate_basis(2, -1)


class TestEvalBasis:
    def test_origin(self):
        b = enumerate_basis(2, 2)
        assert np.array_equal(eval_basis(b, (0.0, 0.0)), [1, 0, 0, 0, 0, 0])

    def test_powers_of_two(self):
        b = enumerate_basis(1, 2)
        assert np.array_equal(eval_basis(b, (2.0,)), [1, 2, 4])

    def test_sign_parity(self):
        b = enumerate_basis(2, 2)
        vals = eval_basis(b, (1.0, -1.0))
        expected = [(-1.0) ** a[1] for a in b.indices]
        assert np.array_equal(vals, expected)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            eval_basis(enumerate_basis(2, 2), (1.0, 2.0, 3.0))


class TestPolynomialArithmetic:
    def test_commutative_associative(self):
        rng = np.random.default_rng(7)
        basis = enumerate_basis(3, 2)
        for _ in range(30):
            polys = []
            for _ in range(3):
                coef = rng.normal(size=len(basis))
                polys.append(Polynomial(3, dict(zip(basis.indices, coef))))
            a, b, c = polys
            x = rng.normal(size=3)
            ab = (a * b).evaluate(x)
            ba = (b * a).evaluate(x)
            assert ab == pytest.approx(ba, rel=1e-12)
            abc1 = ((a * b) * c).evaluate(x)
            abc2 = (a * (b * c)).evaluate(x)
            assert abc1 == pytest.approx(abc2, rel=1e-12, abs=1e-12)
            assert (a + b).evaluate(x) == pytest.approx(a.evaluate(x) + b.evaluate(x))

    def test_no_zero_terms_stored(self):
        p = P(1, {(1,): 1.0}) - P(1, {(1,): 1.0})
        assert p.terms == {}
        assert p.degree() == 0

    def test_text_round_trip(self):
        p = P(2, {(2, 0): 1.5, (0, 1): -2.0, (0, 0): 0.25})
        q = Polynomial.from_text(p.to_text(), 2)
        assert q.terms == p.terms

    def test_compose_affine(self):
        # p(x) = x^2; x = 1 + 2z -> 1 + 4z + 4z^2
        p = P(1, {(2,): 1.0})
        q = p.compose_affine([1.0], [2.0])
        assert q.terms == {(0,): 1.0, (1,): 4.0, (2,): 4.0}

    def test_gradient(self):
        p = P(2, {(2, 1): 3.0})  # 3 x^2 y
        gx, gy = p.gradient()
        assert gx.terms == {(1, 1): 6.0}
        assert gy.terms == {(2, 0): 3.0}


class TestPolyPowerExpand:
    def test_binomial_square(self):
        # (x + w)^2 over joint vars (x, w)
        f = [P(2, {(1, 0): 1.0, (0, 1): 1.0})]
        out = poly_power_expand(f, (2,))
        assert out.terms == {(2, 0): 1.0, (1, 1): 2.0, (0, 2): 1.0}

    def test_cross_product_expansion(self):
        # (y1 - x1)(y2 - x2) = y1 y2 + x1 x2 - y1 x2 - y2 x1, vars (y1, y2, x1, x2)
        f = [
            P(4, {(1, 0, 0, 0): 1.0, (0, 0, 1, 0): -1.0}),
            P(4, {(0, 1, 0, 0): 1.0, (0, 0, 0, 1): -1.0}),
        ]
        out = poly_power_expand(f, (1, 1))
        assert out.terms == {
            (1, 1, 0, 0): 1.0,
            (0, 0, 1, 1): 1.0,
            (1, 0, 0, 1): -1.0,
            (0, 1, 1, 0): -1.0,
        }

    def test_symbolic_quadratic_form(self):
        # (c*a - s*b)^2 over vars (c, s, a, b): 6-term quadratic form
        f = [P(4, {(1, 0, 1, 0): 1.0, (0, 1, 0, 1): -1.0})]
        out = poly_power_expand(f, (2,))
        assert out.terms == {
            (2, 0, 2, 0): 1.0,
            (0, 2, 0, 2): 1.0,
            (1, 1, 1, 1): -2.0,
        }
        # against random numeric evaluation
        rng = np.random.default_rng(0)
        for _ in range(5):
            x = rng.normal(size=4)
            direct = (x[0] * x[2] - x[1] * x[3]) ** 2
            assert out.evaluate(x) == pytest.approx(direct, rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            poly_power_expand([P(1, {(1,): 1.0})], (1, 2))


def _check_process_identity(ext, f, n_state, n_control, n_noise, seed, tol=1e-9):
    rng = np.random.default_rng(seed)
    from maxentkf.moments import moment_vector_from_dict

    for _ in range(1000):
        x = rng.normal(size=n_state)
        u = rng.normal(size=n_control)
        w = rng.normal(size=n_noise)
        joint = np.concatenate([x, u, w])
        fx = np.array([fi.evaluate(joint) for fi in f])
        lhs = ext.out_basis.eval_one(fx)
        # deterministic w: moments are just monomials of w
        wb = enumerate_basis(n_noise, max(1, ext.out_basis.order * 2))
        moms = {a: float(np.prod(w**np.array(a))) for a in wb.indices}
        mv = moment_vector_from_dict(n_noise, wb.order, moms)
        A = ext.propagation_matrix(u, mv)
        rhs = A @ ext.in_basis.eval_one(x)
        assert np.max(np.abs(lhs - rhs)) < tol


class TestExtendedProcess:
    def test_scalar_random_walk(self):
        # x' = x + w at order 2: rows give x'^1 = x + w, x'^2 = x^2 + 2wx + w^2
        f = [P(2, {(1, 0): 1.0, (0, 1): 1.0})]  # vars (x, w)
        ext = build_extended_process(f, 1, 0, 1, 2)
        assert ext.order_in == 2
        row1 = ext.rows[ext.out_basis.position((1,))]
        assert row1[ext.in_basis.position((1,))].terms == {(0,): 1.0}
        assert row1[ext.in_basis.position((0,))].terms == {(1,): 1.0}
        row2 = ext.rows[ext.out_basis.position((2,))]
        assert row2[ext.in_basis.position((2,))].terms == {(0,): 1.0}
        assert row2[ext.in_basis.position((1,))].terms == {(1,): 2.0}
        assert row2[ext.in_basis.position((0,))].terms == {(2,): 1.0}

    def test_unit_row(self):
        f = [P(2, {(1, 0): 1.0, (0, 1): 1.0})]
        ext = build_extended_process(f, 1, 0, 1, 2)
        row0 = ext.rows[0]
        assert row0[0].terms == {(0,): 1.0}
        assert all(row0[j].is_zero() for j in range(1, len(ext.in_basis)))

    def test_identity_on_random_draws(self):
        # mildly nonlinear scalar system with control
        f = [P(3, {(1, 0, 0): 0.9, (2, 0, 0): 0.1, (0, 1, 0): 1.0, (0, 0, 1): 1.0})]
        ext = build_extended_process(f, 1, 1, 1, 3)
        _check_process_identity(ext, f, 1, 1, 1, seed=11)

    def test_se2_product_rows_bilinear(self):
        from maxentkf.scenarios import se2_process_polynomials

        f = se2_process_polynomials()
        ext = build_extended_process(f, 4, 4, 4, 2)
        _check_process_identity(ext, f, 4, 4, 4, seed=3, tol=1e-8)


class TestExtendedObservation:
    def test_linear_order_one(self):
        # v = y - x: rows [1, 0], [y, -1]
        h = [P(2, {(1, 0): 1.0, (0, 1): -1.0})]  # vars (y, x)
        ext = build_extended_observation(h, 1, 1, 1)
        C = ext.observation_matrix(np.array([2.5]))
        assert np.allclose(C, [[1.0, 0.0], [2.5, -1.0]])

    def test_two_var_order_two_matches_worked_example(self):
        # v = y - x in R^2 at order 2; check rows against hand expansion
        h = [
            P(4, {(1, 0, 0, 0): 1.0, (0, 0, 1, 0): -1.0}),
            P(4, {(0, 1, 0, 0): 1.0, (0, 0, 0, 1): -1.0}),
        ]
        ext = build_extended_observation(h, 2, 2, 2)
        y = np.array([1.3, -0.7])
        C = ext.observation_matrix(y)
        rng = np.random.default_rng(5)
        for _ in range(200):
            x = rng.normal(size=2)
            v = y - x
            lhs = ext.out_basis.eval_one(v)
            rhs = C @ ext.in_basis.eval_one(x)
            assert np.max(np.abs(lhs - rhs)) < 1e-9

    def test_row_coefficients_quadratic_output(self):
        h = [
            P(4, {(1, 0, 0, 0): 1.0, (0, 0, 1, 0): -1.0}),
            P(4, {(0, 1, 0, 0): 1.0, (0, 0, 0, 1): -1.0}),
        ]
        ext = build_extended_observation(h, 2, 2, 2)
        row = ext.rows[ext.out_basis.position((2, 0))]
        # (y1 - x1)^2 = y1^2 * 1 - 2 y1 * x1 + 1 * x1^2
        assert row[ext.in_basis.position((0, 0))].terms == {(2, 0): 1.0}
        assert row[ext.in_basis.position((1, 0))].terms == {(1, 0): -2.0}
        assert row[ext.in_basis.position((2, 0))].terms == {(0, 0): 1.0}


class TestQuotientBasis:
    def test_empty_ideal(self):
        qb = quotient_basis([], 3)
        assert qb.reduced_dim == qb.q_perp.shape[0]
        assert np.allclose(qb.q_perp, np.eye(qb.q_perp.shape[0]))

    def test_circle_order_two(self):
        g = [P(2, {(2, 0): 1.0, (0, 2): 1.0, (0, 0): -1.0})]
        qb = quotient_basis(g, 2)
        assert qb.reduced_dim == 5

    def test_circle_order_four(self):
        g = [P(2, {(2, 0): 1.0, (0, 2): 1.0, (0, 0): -1.0})]
        qb = quotient_basis(g, 4)
        assert qb.reduced_dim == 15 - 6

    def test_orthogonality_and_vanishing(self):
        g = [P(2, {(2, 0): 1.0, (0, 2): 1.0, (0, 0): -1.0})]
        qb = quotient_basis(g, 4)
        assert np.max(np.abs(qb.q.T @ qb.q_perp)) < 1e-12
        stacked = np.hstack([qb.q, qb.q_perp])
        assert np.allclose(stacked.T @ stacked, np.eye(stacked.shape[1]), atol=1e-12)
        rng = np.random.default_rng(2)
        theta = rng.uniform(-np.pi, np.pi, size=1000)
        pts = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        phi = qb.basis.eval_many(pts)
        vals = qb.ideal_rows @ phi.T
        assert np.max(np.abs(vals)) < 1e-9
