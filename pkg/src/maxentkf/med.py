"""Max-entropy densities pinned by moment constraints.

A fitted density has the form exp(-sum_a lam_a x^a) on a chart.  The
coefficients are stored in internally standardized coordinates (zero mean,
unit variance per Euclidean axis) because raw high-order monomials are
numerically hopeless; the affine map back to user coordinates travels with
the coefficients.  Fitting minimizes the convex potential

    Delta(lam) = integral_K exp(-sum lam_a x^a) dx + sum_a lam_a m_a

whose gradient vanishes exactly when the density reproduces the target
moments m.  On algebraic charts the search is restricted to the quotient
ring so that directions that vanish on the chart are never explored.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .moments import (
    MomentVector,
    affine_transform_moments,
    moment_matrix,
)
from .polyalg import (
    Basis,
    Polynomial,
    QuotientBasis,
    enumerate_basis,
    quotient_basis,
)
from .quadrature import (
    AngleBox,
    Box,
    Chart,
    ExpPolyIntegrand,
    build_rule,
    integrate_med_batch,
)


class MomentConsistencyError(ValueError):
    """Targets are not (numerically) the moments of any distribution."""


class MedFitError(RuntimeError):
    pass


class MedFitStallError(MedFitError):
    """The line search cannot make progress at the working precision."""

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


@dataclass(frozen=True)
class MedCoefficients:
    """Coefficients of a max-entropy density plus its coordinate chart.

    `lam` lives on `basis` in internal coordinates; a point x in user
    coordinates maps to z = (x - shift) / scale.  `chart` is the internal
    (finite) integration domain.  `q_perp` is the quotient-ring projector
    when the chart is algebraic, else None.
    """

    basis: Basis
    lam: np.ndarray
    chart: Chart
    shift: np.ndarray
    scale: np.ndarray
    q_perp: np.ndarray | None = None

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        if lam.shape != (len(self.basis),):
            raise ValueError("coefficient vector does not match the basis")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "shift", np.asarray(self.shift, dtype=float))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=float))

    @property
    def nvars(self) -> int:
        return self.basis.nvars

    @property
    def order(self) -> int:
        return self.basis.order

    def to_internal_points(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.shift) / self.scale

    def user_chart(self) -> Chart:
        if isinstance(self.chart, AngleBox):
            lo = self.shift[2:] + self.scale[2:] * np.array(self.chart.lower)
            hi = self.shift[2:] + self.scale[2:] * np.array(self.chart.upper)
            return AngleBox(tuple(lo), tuple(hi))
        lo = self.shift + self.scale * np.array(self.chart.lower)
        hi = self.shift + self.scale * np.array(self.chart.upper)
        return Box(tuple(lo), tuple(hi))

    def to_user_coeffs(self) -> np.ndarray:
        """Coefficients over user coordinates so that
        exp(-coeffs . phi(x)) is the same *density* in x (Jacobian included)."""
        poly = Polynomial(self.nvars, dict(zip(self.basis.indices, self.lam)))
        user_poly = poly.compose_affine(-self.shift / self.scale, 1.0 / self.scale)
        vec = user_poly.coeff_vector(self.basis)
        vec[0] += float(np.sum(np.log(self.scale)))
        return vec

    def internal_targets(self, targets: MomentVector) -> MomentVector:
        """User-coordinate moments re-expressed in internal coordinates."""
        return affine_transform_moments(targets, -self.shift / self.scale,
                                        1.0 / self.scale)


@dataclass
class FitReport:
    iterations: int
    grad_inf_norm: float
    moment_residual: float
    potential: float
    converged: bool
    rule_cells: int = 0
    rule_rounds: int = 0
    rule: object | None = None  # final adapted quadrature rule (reusable)


@dataclass
class FitOptions:
    gtol: float = 1e-7
    mtol: float = 1e-5
    max_iter: int = 500
    quad_rel_tol: float = 1e-9
    cell_budget: int = 200_000
    trunc_mult: float = 8.0
    max_rule_rounds: int = 6
    armijo_c: float = 1e-4
    max_halvings: int = 60
    degeneracy_tol: float = 1e-10
    psd_tol: float = 1e-8
    ridge: float = 1e-6
    strict_quadrature: bool = True
    stall_ok: bool = False  # accept a precision-limited stall instead of raising
    coeff_penalty: float = 0.0  # Tikhonov weight on the coefficients; keeps
    # near-unidentifiable fits (concentrated angular beliefs) bounded


def _angular_stats(c_bar: float, s_bar: float) -> tuple[float, float]:
    theta = math.atan2(s_bar, c_bar)
    resultant = min(math.hypot(c_bar, s_bar), 1.0 - 1e-12)
    sigma = math.sqrt(max(-2.0 * math.log(max(resultant, 1e-12)), 1e-4))
    return theta, sigma


def _standardization(targets: MomentVector, chart: Chart, trunc_mult: float):
    """Shift/scale per ambient axis and the finite internal chart."""
    n = chart.ambient_dim
    shift = np.zeros(n)
    scale = np.ones(n)
    have_mean = targets.order >= 1
    have_var = targets.order >= 2

    def axis_stats(v):
        e = tuple(1 if i == v else 0 for i in range(n))
        mu = targets.value(e) if have_mean else 0.0
        if have_var:
            e2 = tuple(2 if i == v else 0 for i in range(n))
            var = max(targets.value(e2) - mu * mu, 1e-12)
        else:
            var = 1.0
        return mu, math.sqrt(var)

    box_axes = range(2, n) if isinstance(chart, AngleBox) else range(n)
    for v in box_axes:
        mu, sd = axis_stats(v)
        shift[v] = mu
        scale[v] = sd

    if isinstance(chart, AngleBox):
        lo, hi = [], []
        for i, v in enumerate(box_axes):
            user_lo, user_hi = chart.lower[i], chart.upper[i]
            zlo = (user_lo - shift[v]) / scale[v] if math.isfinite(user_lo) else -trunc_mult
            zhi = (user_hi - shift[v]) / scale[v] if math.isfinite(user_hi) else trunc_mult
            lo.append(zlo)
            hi.append(zhi)
        internal = AngleBox(tuple(lo), tuple(hi))
    else:
        lo, hi = [], []
        for v in box_axes:
            user_lo, user_hi = chart.lower[v], chart.upper[v]
            zlo = (user_lo - shift[v]) / scale[v] if math.isfinite(user_lo) else -trunc_mult
            zhi = (user_hi - shift[v]) / scale[v] if math.isfinite(user_hi) else trunc_mult
            lo.append(zlo)
            hi.append(zhi)
        internal = Box(tuple(lo), tuple(hi))
    return shift, scale, internal


def _initial_splits(internal_targets: MomentVector, chart: Chart):
    """Seed the adaptive grid so the bulk of the target mass is resolved."""
    n = internal_targets.nvars
    splits = []
    if isinstance(chart, AngleBox):
        if internal_targets.order >= 1:
            theta, sigma = _angular_stats(
                internal_targets.value(tuple(1 if i == 0 else 0 for i in range(n))),
                internal_targets.value(tuple(1 if i == 1 else 0 for i in range(n))),
            )
        else:
            theta, sigma = 0.0, 2.0
        pts = sorted({theta - 2 * sigma, theta + 2 * sigma, theta - 6 * sigma,
                      theta + 6 * sigma})
        splits.append([p for p in pts if -math.pi < p < math.pi])
        box_axes = range(2, n)
    else:
        box_axes = range(n)
    for v in box_axes:
        if internal_targets.order >= 2:
            e = tuple(1 if i == v else 0 for i in range(n))
            e2 = tuple(2 if i == v else 0 for i in range(n))
            mu = internal_targets.value(e)
            sd = math.sqrt(max(internal_targets.value(e2) - mu * mu, 1e-12))
        else:
            mu, sd = 0.0, 1.0
        splits.append([mu - 2 * sd, mu + 2 * sd])
    return splits


def gaussian_lambda(basis: Basis, mean: Sequence[float], cov: np.ndarray) -> np.ndarray:
    """Coefficient vector of the Gaussian density with the given mean/covariance."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    n = basis.nvars
    prec = np.linalg.inv(cov)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise MomentConsistencyError("covariance must be positive definite")
    lam = np.zeros(len(basis))
    lam[0] = 0.5 * (n * math.log(2 * math.pi) + logdet + mean @ prec @ mean)
    if basis.order < 2:
        # not enough slots for a quadratic exponent; start from a flat guess
        lam[0] = 0.0
        return lam
    pm = prec @ mean
    for v in range(n):
        e = tuple(1 if i == v else 0 for i in range(n))
        lam[basis.position(e)] = -pm[v]
        e2 = tuple(2 if i == v else 0 for i in range(n))
        lam[basis.position(e2)] = 0.5 * prec[v, v]
    for i in range(n):
        for j in range(i + 1, n):
            e = tuple(1 if k in (i, j) else 0 for k in range(n))
            lam[basis.position(e)] = prec[i, j]
    return lam


def _mean_cov(targets: MomentVector) -> tuple[np.ndarray, np.ndarray]:
    n = targets.nvars
    mean = np.zeros(n)
    cov = np.eye(n)
    if targets.order >= 1:
        for v in range(n):
            mean[v] = targets.value(tuple(1 if i == v else 0 for i in range(n)))
    if targets.order >= 2:
        for i in range(n):
            for j in range(i, n):
                e = tuple((1 if k == i else 0) + (1 if k == j else 0) for k in range(n))
                cov[i, j] = cov[j, i] = targets.value(e) - mean[i] * mean[j]
    return mean, cov


def _validate_targets(targets: MomentVector, chart: Chart, opts: FitOptions) -> None:
    if abs(targets.value((0,) * targets.nvars) - 1.0) > 1e-6:
        raise MomentConsistencyError(
            f"zeroth moment is {targets.value((0,) * targets.nvars)!r}, expected 1"
        )
    half = targets.order // 2
    if half == 0:
        return
    M = moment_matrix(targets, half)
    eigs = np.linalg.eigvalsh(M)
    norm = max(np.abs(eigs).max(), 1.0)
    if eigs[0] < -opts.psd_tol * norm:
        raise MomentConsistencyError(
            f"moment matrix has eigenvalue {eigs[0]:.3e}; targets are infeasible"
        )
    if isinstance(chart, Box) and eigs[0] < opts.degeneracy_tol * norm:
        raise MomentConsistencyError(
            f"moment matrix is numerically singular (eigmin {eigs[0]:.3e}); "
            "the targets describe a degenerate distribution"
        )


def _internal_quotient(quotient: QuotientBasis | None, chart: Chart,
                       shift: np.ndarray, scale: np.ndarray, order: int):
    gens = list(quotient.generators) if quotient is not None else []
    if not gens and isinstance(chart, AngleBox):
        gens = chart.constraint_polys()
    if not gens:
        return None
    internal_gens = [g.compose_affine(shift, scale) for g in gens]
    return quotient_basis(internal_gens, order)


def fit_med(targets: MomentVector, chart: Chart,
            quotient: QuotientBasis | None = None,
            opts: FitOptions | None = None) -> tuple[MedCoefficients, FitReport]:
    """Fit a max-entropy density to the target moments on the chart.

    BFGS with Armijo backtracking on the convex potential, with exact
    gradients from quadrature.  On algebraic charts the optimization runs
    in quotient-ring coordinates, so the chart constraints hold by
    construction.  Returns the fitted coefficients and a fit report;
    convergence means the potential gradient dropped below `opts.gtol` in
    the infinity norm under a freshly adapted quadrature rule.
    """
    opts = opts or FitOptions()
    if chart.ambient_dim != targets.nvars:
        raise ValueError("chart and targets disagree on the ambient dimension")
    _validate_targets(targets, chart, opts)
    order = targets.order
    basis = targets.basis

    shift, scale, internal_chart = _standardization(targets, chart, opts.trunc_mult)
    t_int = affine_transform_moments(targets, -shift / scale, 1.0 / scale)
    qb = _internal_quotient(quotient, chart, shift, scale, order)
    qperp = qb.q_perp if qb is not None else None

    mean, cov = _mean_cov(t_int)
    eigmin = np.linalg.eigvalsh(cov).min()
    if eigmin < opts.ridge:
        cov = cov + (opts.ridge - min(eigmin, 0.0)) * np.eye(targets.nvars)
    lam0 = gaussian_lambda(basis, mean, cov)

    reduce = (lambda v: qperp.T @ v) if qperp is not None else (lambda v: v)
    expand = (lambda v: qperp @ v) if qperp is not None else (lambda v: v)

    t_vec = t_int.values
    xi = reduce(lam0)
    splits = _initial_splits(t_int, internal_chart)

    def build(lam_vec):
        fn = ExpPolyIntegrand(lam_vec, basis, basis.indices, basis.nvars,
                              clip_exponent=200.0)
        rule, res = build_rule(fn, internal_chart, opts.quad_rel_tol,
                               opts.cell_budget, splits,
                               strict=opts.strict_quadrature)
        phi = basis.eval_many(rule.points)
        return rule, phi

    def moments_on(phi, w, lam_vec):
        expo = -(phi @ lam_vec)
        np.clip(expo, None, 709.0, out=expo)
        e = np.exp(expo)
        return phi.T @ (w * e)

    def mass_on(phi, w, lam_vec):
        expo = -(phi @ lam_vec)
        if np.any(expo > 709.0):
            return math.inf
        return float(w @ np.exp(expo))

    def inverse_hessian(phi, w, lam_vec):
        # the potential's Hessian is the (unnormalized) moment matrix of the
        # current density, available from the frozen rule at matvec cost
        expo = -(phi @ lam_vec)
        np.clip(expo, None, 709.0, out=expo)
        e = w * np.exp(expo)
        phi_red = phi @ qperp if qperp is not None else phi
        A = phi_red * np.sqrt(np.maximum(e, 0.0))[:, None]
        Hm = A.T @ A
        ridge = 1e-12 * max(np.trace(Hm), 1.0)
        try:
            L = np.linalg.cholesky(Hm + ridge * np.eye(Hm.shape[0]))
        except np.linalg.LinAlgError:
            return np.eye(Hm.shape[0])
        Linv = np.linalg.inv(L)
        return Linv.T @ Linv

    rule, phi = build(expand(xi))
    w = rule.weights
    rounds = 1
    iters = 0
    converged = False
    stalled_after_rebuild = False

    g0 = reduce(t_vec - moments_on(phi, w, expand(xi)))
    if np.max(np.abs(g0)) <= opts.gtol:
        # the initial guess already fits under a rule adapted to it
        converged = True
        g = g0

    while not converged:
        # inner BFGS on the frozen rule: the discretized potential is still
        # convex in the coefficients, so this is a clean convex program.
        # The metric starts from the exact inverse Hessian at the round's
        # first iterate (a free byproduct of the rule), which keeps the
        # iteration count low in high-order fits.
        dim = xi.shape[0]
        H = inverse_hessian(phi, w, expand(xi))
        g = reduce(t_vec - moments_on(phi, w, expand(xi)))
        f_cur = mass_on(phi, w, expand(xi)) + float(expand(xi) @ t_vec)
        progressed = False
        while iters < opts.max_iter:
            if np.max(np.abs(g)) <= opts.gtol:
                break
            d = -H @ g
            slope = float(g @ d)
            if slope >= 0:  # numerical loss of curvature; restart metric
                H = inverse_hessian(phi, w, expand(xi))
                d = -H @ g
                slope = float(g @ d)
                if slope >= 0:
                    H = np.eye(dim)
                    d = -g
                    slope = float(g @ d)
            alpha = 1.0
            ok = False
            for _ in range(opts.max_halvings):
                cand = xi + alpha * d
                f_new = mass_on(phi, w, expand(cand)) + float(expand(cand) @ t_vec)
                if f_new <= f_cur + opts.armijo_c * alpha * slope:
                    ok = True
                    break
                alpha *= 0.5
            if not ok:
                break
            iters += 1
            progressed = True
            xi_new = cand
            g_new = reduce(t_vec - moments_on(phi, w, expand(xi_new)))
            s = xi_new - xi
            yv = g_new - g
            sy = float(s @ yv)
            if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(yv) + 1e-300):
                rho = 1.0 / sy
                Hy = H @ yv
                H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) \
                    + rho * rho * float(yv @ Hy) * np.outer(s, s) \
                    + rho * np.outer(s, s)
            xi, g, f_cur = xi_new, g_new, f_new

        # re-adapt the rule under the current coefficients and re-check
        rule, phi = build(expand(xi))
        w = rule.weights
        g = reduce(t_vec - moments_on(phi, w, expand(xi)))
        f_cur = mass_on(phi, w, expand(xi)) + float(expand(xi) @ t_vec)
        if np.max(np.abs(g)) <= opts.gtol:
            converged = True
            break
        if iters >= opts.max_iter or rounds >= opts.max_rule_rounds:
            break
        if not progressed:
            if stalled_after_rebuild:
                if opts.stall_ok:
                    break
                report = FitReport(iters, float(np.max(np.abs(g))), math.nan,
                                   f_cur, False, rule.cells_used, rounds)
                raise MedFitStallError(
                    f"line search stalled after {opts.max_halvings} halvings "
                    f"with gradient {report.grad_inf_norm:.3e}", report)
            stalled_after_rebuild = True
        else:
            stalled_after_rebuild = False
        rounds += 1

    # normalize and measure the residual on the final adapted rule; the rule
    # was rebuilt at these coefficients, so this is the converged estimate
    lam = expand(xi)
    f_cur = mass_on(phi, w, lam) + float(lam @ t_vec)
    mass = mass_on(phi, w, lam)
    lam = lam.copy()
    lam[0] += math.log(mass)
    if qperp is not None:
        lam = qperp @ (qperp.T @ lam)
    med = MedCoefficients(basis, lam, internal_chart, shift, scale, qperp)
    fitted_int = MomentVector(basis, moments_on(phi, w, lam))
    fitted = affine_transform_moments(fitted_int, shift, scale)
    residual = float(np.max(np.abs(fitted.values - targets.values)))
    report = FitReport(iters, float(np.max(np.abs(g))), residual, f_cur,
                       converged, rule.cells_used, rounds, rule=rule)
    return med, report


def moments_from_rule(med: MedCoefficients, rule, order: int) -> MomentVector:
    """Normalized user-coordinate moments evaluated on a frozen rule.

    Cheap (one matrix pass) but only as accurate as the rule is for this
    density; intended for filter loops that trade tolerance for speed.
    """
    big = enumerate_basis(med.nvars, order)
    phi = big.eval_many(rule.points)
    expo = -(phi[:, : len(med.basis)] @ med.lam)
    np.clip(expo, None, 709.0, out=expo)
    e = rule.weights * np.exp(expo)
    raw = phi.T @ e
    internal = MomentVector(big, raw / raw[0])
    return affine_transform_moments(internal, med.shift, med.scale)


def normalize_on_rule(med: MedCoefficients, rule) -> MedCoefficients:
    """Unit-mass shift using a frozen rule instead of fresh adaptation."""
    phi = med.basis.eval_many(rule.points)
    expo = -(phi @ med.lam)
    np.clip(expo, None, 709.0, out=expo)
    mass = float(rule.weights @ np.exp(expo))
    lam = med.lam.copy()
    lam[0] += math.log(mass)
    if med.q_perp is not None:
        lam = med.q_perp @ (med.q_perp.T @ lam)
    return replace(med, lam=lam)


def potential(med: MedCoefficients, targets: MomentVector,
              rel_tol: float = 1e-9) -> float:
    """Convex potential of the coefficients against the target moments."""
    t_int = med.internal_targets(targets)
    mass = integrate_med_batch(med, [(0,) * med.nvars], rel_tol=rel_tol).value[0]
    return float(mass + med.lam @ t_int.values)


def potential_gradient(med: MedCoefficients, targets: MomentVector,
                       rel_tol: float = 1e-9) -> np.ndarray:
    """Gradient of the potential: target moments minus current (unnormalized)
    moments, per basis index, in internal coordinates."""
    t_int = med.internal_targets(targets)
    vals = integrate_med_batch(med, med.basis.indices, rel_tol=rel_tol).value
    return t_int.values - vals


def med_moments(med: MedCoefficients, order: int, rel_tol: float = 1e-9,
                cell_budget: int = 200_000, strict: bool = True) -> MomentVector:
    """Moments of the normalized density up to `order`, in user coordinates."""
    big = enumerate_basis(med.nvars, order)
    res = integrate_med_batch(med, big.indices, rel_tol=rel_tol,
                              max_cells=cell_budget, strict=strict)
    vals = np.asarray(res.value) / res.value[0]
    internal = MomentVector(big, vals)
    return affine_transform_moments(internal, med.shift, med.scale)


def normalize(med: MedCoefficients, rel_tol: float = 1e-9,
              strict: bool = True) -> MedCoefficients:
    """Shift the constant coefficient so the density has unit mass.

    On algebraic charts the shifted vector is re-projected onto the quotient
    coordinates; the projection removes a polynomial that vanishes on the
    chart, so the density itself is unchanged.
    """
    mass = integrate_med_batch(med, [(0,) * med.nvars], rel_tol=rel_tol,
                               strict=strict).value[0]
    lam = med.lam.copy()
    lam[0] += math.log(mass)
    if med.q_perp is not None:
        lam = med.q_perp @ (med.q_perp.T @ lam)
    return replace(med, lam=lam)


def med_logpdf(med: MedCoefficients, x: Sequence[float]) -> float:
    """Log-density at a user-coordinate point on the chart."""
    z = med.to_internal_points(np.asarray(x, dtype=float).reshape(1, -1))
    val = -float(med.basis.eval_many(z)[0] @ med.lam)
    return val - float(np.sum(np.log(med.scale)))


def med_logpdf_many(med: MedCoefficients, x: np.ndarray) -> np.ndarray:
    z = med.to_internal_points(np.asarray(x, dtype=float))
    vals = -(med.basis.eval_many(z) @ med.lam)
    return vals - float(np.sum(np.log(med.scale)))


def gaussian_med(basis: Basis, mean: Sequence[float], cov: np.ndarray,
                 chart: Chart, trunc_mult: float = 8.0) -> MedCoefficients:
    """Construct a Gaussian-exponent density directly (identity chart scale:
    coefficients standardized internally from the supplied mean/cov)."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    n = basis.nvars
    if isinstance(chart, AngleBox):
        shift = np.zeros(n)
        scale = np.ones(n)
        sd = np.sqrt(np.clip(np.diag(cov), 1e-12, None))
        shift[2:] = mean[2:]
        scale[2:] = sd[2:]
    else:
        shift = mean.copy()
        scale = np.sqrt(np.clip(np.diag(cov), 1e-12, None))
    corr = cov / np.outer(scale, scale)
    mu_int = (mean - shift) / scale
    lam = gaussian_lambda(basis, mu_int, corr)
    if isinstance(chart, AngleBox):
        lo = tuple((np.array(chart.lower) - shift[2:]) / scale[2:]) if chart.lower else ()
        hi = tuple((np.array(chart.upper) - shift[2:]) / scale[2:]) if chart.upper else ()
        lo = tuple(v if math.isfinite(v) else -trunc_mult for v in lo)
        hi = tuple(v if math.isfinite(v) else trunc_mult for v in hi)
        internal = AngleBox(lo, hi)
        qb = quotient_basis(internal.constraint_polys(), basis.order)
        med = MedCoefficients(basis, qb.q_perp @ (qb.q_perp.T @ lam), internal,
                              shift, scale, qb.q_perp)
    else:
        lo = tuple((np.array(chart.lower) - shift) / scale)
        hi = tuple((np.array(chart.upper) - shift) / scale)
        lo = tuple(v if math.isfinite(v) else -trunc_mult for v in lo)
        hi = tuple(v if math.isfinite(v) else trunc_mult for v in hi)
        internal = Box(lo, hi)
        med = MedCoefficients(basis, lam, internal, shift, scale, None)
    return normalize(med)
