"""Recursive moment filtering with max-entropy beliefs.

Each cycle propagates the belief moments through the lifted dynamics,
refits the max-entropy density to the predicted moments, folds measurements
in by adding coefficients of the noise density composed with the
observation map, renormalizes, and extracts a certified point estimate by
semidefinite relaxation.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .med import (
    FitOptions,
    MedCoefficients,
    fit_med,
    gaussian_med,
    med_logpdf_many,
    med_moments,
    moments_from_rule,
    normalize,
    normalize_on_rule,
)
from .moments import MomentVector, gaussian_moments, moment_matrix, sample_moments
from .polyalg import (
    Basis,
    ExtendedSystem,
    Polynomial,
    build_extended_observation,
    build_extended_process,
    enumerate_basis,
)
from .quadrature import AngleBox, Box, Chart, unbounded_box
from .sdp import minimize_polynomial
from . import scenarios as sc


class OrderOverflowError(ValueError):
    """A measurement update needs coefficients beyond the belief order."""


class PredictionDegeneracyError(RuntimeError):
    """Predicted moments stopped being moments of any distribution."""


class FilterStepError(RuntimeError):
    def __init__(self, step: int, stage: str, cause: Exception):
        super().__init__(f"step {step} failed during {stage}: {cause}")
        self.step = step
        self.stage = stage
        self.cause = cause


@dataclass
class FilterConfig:
    order: int = 4
    quad_rel_tol: float = 1e-8
    cell_budget: int = 200_000
    fit_gtol: float = 1e-7
    fit_mtol: float = 1e-5
    fit_max_iter: int = 500
    sdp_tol: float = 1e-8
    rank_tol: float = 1e-3
    sdp_order_bump: int = 1
    trunc_mult: float = 8.0
    stall_ok: bool = False
    predict_clip_tol: float = 1e-6

    def __post_init__(self):
        if self.order < 2 or self.order % 2:
            raise ValueError("belief order must be an even integer >= 2")
        for name in ("quad_rel_tol", "fit_gtol", "fit_mtol", "sdp_tol",
                     "rank_tol", "trunc_mult", "predict_clip_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def fit_options(self) -> FitOptions:
        return FitOptions(
            gtol=self.fit_gtol,
            mtol=self.fit_mtol,
            max_iter=self.fit_max_iter,
            quad_rel_tol=self.quad_rel_tol,
            cell_budget=self.cell_budget,
            trunc_mult=self.trunc_mult,
            stall_ok=self.stall_ok,
            strict_quadrature=not self.stall_ok,
        )


@dataclass
class Belief:
    med: MedCoefficients
    chart: Chart  # user-level chart, kept for refits (may be unbounded)
    step: int = 0
    rule: object | None = None  # frozen quadrature rule adapted to this density


@dataclass
class NoiseModel:
    med: MedCoefficients
    moments: MomentVector


def init_belief(mean: Sequence[float], cov: np.ndarray, config: FilterConfig,
                chart: Chart | None = None) -> Belief:
    """Gaussian-exponent starting belief on the chart."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    eig = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    if eig.min() < -1e-10 * max(1.0, abs(eig).max()):
        raise ValueError(f"covariance has negative eigenvalue {eig.min():.3e}")
    if eig.min() < 1e-9:
        cov = cov + 1e-6 * np.eye(len(mean))
    chart = unbounded_box(len(mean)) if chart is None else chart
    basis = enumerate_basis(len(mean), config.order)
    med = gaussian_med(basis, mean, cov, chart, config.trunc_mult)
    return Belief(med, chart, 0)


def fit_noise_model(samples_or_moments, order: int, chart: Chart | None = None,
                    config: FilterConfig | None = None) -> NoiseModel:
    """Max-entropy noise density from samples or precomputed moments."""
    if isinstance(samples_or_moments, MomentVector):
        moments = samples_or_moments
    else:
        moments = sample_moments(np.asarray(samples_or_moments, dtype=float), order)
    chart = unbounded_box(moments.nvars) if chart is None else chart
    opts = (config or FilterConfig(order=max(2, order + order % 2))).fit_options()
    med, report = fit_med(moments, chart, opts=opts)
    return NoiseModel(med, moments)


def _repair_moments(mv: MomentVector, clip_tol: float) -> MomentVector:
    """Clip slightly negative eigenvalues of the moment matrix, then restore
    the repeated-cell structure by averaging."""
    half = mv.order // 2
    basis = mv.basis
    half_basis = enumerate_basis(mv.nvars, half)
    M = moment_matrix(mv, half)
    eig, vec = np.linalg.eigh(M)
    norm = max(abs(eig).max(), 1.0)
    if eig.min() >= 0:
        return mv
    if eig.min() < -clip_tol * norm:
        raise PredictionDegeneracyError(
            f"predicted moment matrix has eigenvalue {eig.min():.3e} "
            f"(tolerance {-clip_tol * norm:.3e})"
        )
    for _ in range(3):
        eig, vec = np.linalg.eigh(M)
        if eig.min() >= 0:
            break
        M = vec @ np.diag(np.clip(eig, 1e-12 * norm, None)) @ vec.T
        # restore equal repeated cells
        acc: dict[tuple[int, ...], list] = {}
        for i, a in enumerate(half_basis.indices):
            for j, b in enumerate(half_basis.indices):
                acc.setdefault(tuple(x + y for x, y in zip(a, b)), []).append(M[i, j])
        vals = mv.values.copy()
        for gamma, cells in acc.items():
            if gamma in basis.index_map:
                vals[basis.position(gamma)] = float(np.mean(cells))
        vals[0] = 1.0
        mv = MomentVector(basis, vals)
        M = moment_matrix(mv, half)
    return mv


def predict(belief: Belief, u: Sequence[float], ext: ExtendedSystem,
            w_moments: MomentVector, config: FilterConfig) -> Belief:
    """Propagate belief moments through the lifted dynamics and refit."""
    s_in = ext.order_in
    if config.stall_ok and belief.rule is not None:
        x_moments = moments_from_rule(belief.med, belief.rule, s_in)
    else:
        x_moments = med_moments(belief.med, s_in, rel_tol=config.quad_rel_tol,
                                cell_budget=config.cell_budget,
                                strict=not config.stall_ok)
    A = ext.propagation_matrix(np.asarray(u, dtype=float), w_moments)
    predicted = MomentVector(ext.out_basis, A @ x_moments.values)
    predicted = _repair_moments(predicted, config.predict_clip_tol)
    med, report = fit_med(predicted, belief.chart, opts=config.fit_options())
    return Belief(med, belief.chart, belief.step + 1, report.rule)


def _nu_coefficients(obs_ext: ExtendedSystem, noise: NoiseModel,
                     y: np.ndarray) -> np.ndarray:
    """Coefficients on the state basis of the noise exponent composed with
    the observation map at a concrete measurement."""
    mu_user = noise.med.to_user_coeffs()
    C = obs_ext.observation_matrix(y)
    return C.T @ mu_user


def update(belief: Belief, y, noise: NoiseModel, obs, config: FilterConfig) -> Belief:
    """Measurement update: coefficient addition, then renormalization.

    `obs` is either the observation polynomials (variables ordered
    measurement-then-state) or a prebuilt lifted observation system at the
    noise order.  `y` may be one measurement or a batch (rows).
    """
    if isinstance(obs, ExtendedSystem):
        obs_ext = obs
    else:
        obs_ext = build_extended_observation(
            obs, obs[0].nvars - belief.med.nvars, belief.med.nvars,
            noise.med.order)
    if obs_ext.order_in > belief.med.order:
        raise OrderOverflowError(
            f"update needs state degree {obs_ext.order_in} but the belief "
            f"order is {belief.med.order}; rerun with a larger belief order"
        )
    y = np.atleast_2d(np.asarray(y, dtype=float))
    nu_total = np.zeros(len(obs_ext.in_basis))
    for row in y:
        nu_total += _nu_coefficients(obs_ext, noise, row)
    # user-coordinate coefficients -> internal coordinates of the belief
    nu_poly = Polynomial(belief.med.nvars,
                         dict(zip(obs_ext.in_basis.indices, nu_total)))
    nu_int = nu_poly.compose_affine(belief.med.shift, belief.med.scale)
    lam = belief.med.lam + nu_int.coeff_vector(belief.med.basis)
    med = replace(belief.med, lam=lam)
    if config.stall_ok and belief.rule is not None:
        med = normalize_on_rule(med, belief.rule)
    else:
        med = normalize(med, rel_tol=config.quad_rel_tol, strict=not config.stall_ok)
    return Belief(med, belief.chart, belief.step, belief.rule)


def local_mode(med: MedCoefficients, n_grid: int = 5, iters: int = 200) -> np.ndarray:
    """Deterministic interior mode search: coarse seeding on the truncation
    region, then projected gradient ascent on the log-density."""
    angular = isinstance(med.chart, AngleBox)
    lo, hi = med.chart.chart_bounds()
    axes = [np.linspace(a, b, n_grid + 2)[1:-1] for a, b in zip(lo, hi)]
    if angular:
        axes[0] = np.linspace(-math.pi, math.pi, 2 * n_grid, endpoint=False)
    mesh = np.meshgrid(*axes, indexing="ij")
    seeds_chart = np.stack([m.ravel() for m in mesh], axis=1)
    pts = med.chart.to_ambient(seeds_chart)
    logp = -(med.basis.eval_many(pts) @ med.lam)
    order = np.argsort(logp)[::-1][:4]
    cand = pts[order]

    coeffs_poly = Polynomial(med.nvars, dict(zip(med.basis.indices, med.lam)))
    grads = coeffs_poly.gradient()
    step = np.full(cand.shape[0], 0.1)
    best_val = logp[order].copy()
    for _ in range(iters):
        g = -np.stack([gi.evaluate_many(cand) for gi in grads], axis=1)
        trial = cand + step[:, None] * g
        if angular:
            nrm = np.sqrt(trial[:, 0] ** 2 + trial[:, 1] ** 2)
            trial[:, 0] /= nrm
            trial[:, 1] /= nrm
            trial[:, 2:] = np.clip(trial[:, 2:], lo[1:], hi[1:])
        else:
            trial = np.clip(trial, lo, hi)
        val = -(med.basis.eval_many(trial) @ med.lam)
        better = val > best_val
        cand[better] = trial[better]
        best_val[better] = val[better]
        step = np.where(better, step * 1.2, step * 0.5)
        if step.max() < 1e-12:
            break
    z = cand[int(np.argmax(best_val))]
    return med.shift + med.scale * z


def point_estimate(belief: Belief, config: FilterConfig):
    """Extract the density's mode over the chart.

    The relaxation solves the global problem and certifies rank-1 success;
    a certificate is accepted only when the point also lies in the region
    the density was fitted on (the polynomial exponent carries no
    information outside it and may be unbounded below there).  Failing
    that, a deterministic interior search supplies an uncertified point.
    """
    coeffs = belief.med.to_user_coeffs()
    cost = Polynomial(belief.med.nvars,
                      dict(zip(belief.med.basis.indices, coeffs)))
    g = belief.chart.constraint_polys()
    degrees = [cost.degree()] + [c.degree() for c in g]
    r0 = max(1, math.ceil(max(degrees) / 2))
    sol, order = minimize_polynomial(cost, g, r0, tol=config.sdp_tol,
                                     rank_tol=config.rank_tol,
                                     max_order_bumps=config.sdp_order_bump)
    if sol.rank_certified and sol.point is not None:
        z = belief.med.to_internal_points(sol.point.reshape(1, -1))[0]
        lo, hi = belief.med.chart.chart_bounds()
        if isinstance(belief.med.chart, AngleBox):
            inside = bool(np.all(z[2:] >= lo[1:] - 1e-9)
                          and np.all(z[2:] <= hi[1:] + 1e-9))
        else:
            inside = bool(np.all(z >= lo - 1e-9) and np.all(z <= hi + 1e-9))
        if inside:
            return sol.point, True
    return local_mode(belief.med), False


@dataclass
class FilterModel:
    """Everything a filter run needs about one dynamical system."""

    process_ext: ExtendedSystem
    obs_ext: ExtendedSystem
    w_moments: MomentVector
    noise: NoiseModel
    chart: Chart
    encode_input: Callable[[object], np.ndarray] = lambda u: np.asarray(u, dtype=float)


@dataclass
class StepRecord:
    step: int
    belief: Belief
    point: np.ndarray | None
    certified: bool
    wall_time: float


def run_filter(model: FilterModel, belief0: Belief, inputs: Sequence,
               measurements: Sequence, config: FilterConfig,
               extract_points: bool = True) -> list[StepRecord]:
    """Run the full predict/update/extract loop over an input sequence.

    `measurements[k]` may be None (prediction-only step), one measurement,
    or a batch of rows.  Any failure aborts with the step index attached.
    """
    if len(inputs) != len(measurements):
        raise ValueError("inputs and measurements must align")
    belief = belief0
    records: list[StepRecord] = []
    for k, (u, y) in enumerate(zip(inputs, measurements)):
        t0 = time.perf_counter()
        try:
            belief = predict(belief, model.encode_input(u), model.process_ext,
                             model.w_moments, config)
        except Exception as exc:  # noqa: BLE001 - annotate and rethrow
            raise FilterStepError(k, "prediction", exc) from exc
        if y is not None:
            try:
                belief = update(belief, y, model.noise, model.obs_ext, config)
            except Exception as exc:  # noqa: BLE001
                raise FilterStepError(k, "update", exc) from exc
        point, certified = None, False
        if extract_points:
            try:
                point, certified = point_estimate(belief, config)
            except Exception as exc:  # noqa: BLE001
                raise FilterStepError(k, "point extraction", exc) from exc
        records.append(StepRecord(k, belief, point, certified,
                                  time.perf_counter() - t0))
    return records


# ---------------------------------------------------------------------------
# model builders
# ---------------------------------------------------------------------------

def linear_filter_model(system: "sc.LinearGaussianSystem", order: int = 2) -> FilterModel:
    """Lifted model for x' = F x + w, y = H x + v with Gaussian noise."""
    n = system.F.shape[0]
    nv = 2 * n
    f = []
    for i in range(n):
        terms = {}
        for j in range(n):
            if system.F[i, j]:
                terms[tuple(1 if k == j else 0 for k in range(nv))] = system.F[i, j]
        terms[tuple(1 if k == n + i else 0 for k in range(nv))] = 1.0
        f.append(Polynomial(nv, terms))
    process_ext = build_extended_process(f, n, 0, n, order)

    h = []
    for i in range(n):
        terms = {tuple(1 if k == i else 0 for k in range(nv)): 1.0}
        for j in range(n):
            if system.H[i, j]:
                terms[tuple(1 if k == n + j else 0 for k in range(nv))] = -system.H[i, j]
        h.append(Polynomial(nv, terms))
    obs_ext = build_extended_observation(h, n, n, order)

    w_moments = gaussian_moments(np.zeros(n), system.Q, order)
    noise_basis = enumerate_basis(n, order)
    noise_med = gaussian_med(noise_basis, np.zeros(n), system.R, unbounded_box(n))
    noise = NoiseModel(noise_med, gaussian_moments(np.zeros(n), system.R, order))
    return FilterModel(process_ext, obs_ext, w_moments, noise, unbounded_box(n))


_SE2_EXT_CACHE: dict[int, ExtendedSystem] = {}
_SE2_OBS_CACHE: dict[int, ExtendedSystem] = {}


def se2_filter_model(scenario: "sc.Scenario", config: FilterConfig) -> FilterModel:
    """Lifted planar-pose model with the equal-weight landmark mixture noise."""
    r = config.order
    if r not in _SE2_EXT_CACHE:
        _SE2_EXT_CACHE[r] = build_extended_process(
            sc.se2_process_polynomials(), 4, 4, 4, r)
    process_ext = _SE2_EXT_CACHE[r]
    r_v = scenario.noise_order
    if r_v not in _SE2_OBS_CACHE:
        _SE2_OBS_CACHE[r_v] = build_extended_observation(
            sc.se2_observation_polynomials(), 2, 4, r_v)
    obs_ext = _SE2_OBS_CACHE[r_v]

    w_moments = sc.pose_noise_moments(scenario.sigma_xi, r, scenario.seed_moments)
    mix = sc.landmark_mixture_moments(scenario.landmarks, scenario.meas_cov(), r_v)
    margin = 8.0 * scenario.sigma_v
    lo = scenario.landmarks.min(axis=0) - margin
    hi = scenario.landmarks.max(axis=0) + margin
    noise = fit_noise_model(mix, r_v, Box(tuple(lo), tuple(hi)),
                            config=FilterConfig(order=max(2, r_v),
                                                quad_rel_tol=1e-8,
                                                fit_gtol=1e-7))
    chart = AngleBox((-math.inf, -math.inf), (math.inf, math.inf))
    return FilterModel(process_ext, obs_ext, w_moments, noise, chart)


def se2_init_belief(scenario: "sc.Scenario", config: FilterConfig) -> Belief:
    """Prior belief over (c, s, px, py) from a Gaussian in (theta, p)."""
    st, sp = scenario.prior_sigma_theta, scenario.prior_sigma_pos
    th = scenario.start_theta
    # exact circular moments of theta ~ N(th, st^2)
    e1 = math.exp(-st**2 / 2)
    c_bar, s_bar = e1 * math.cos(th), e1 * math.sin(th)
    e2 = math.exp(-2 * st**2)
    c2 = 0.5 * (1 + e2 * math.cos(2 * th))
    s2 = 0.5 * (1 - e2 * math.cos(2 * th))
    cs = 0.5 * e2 * math.sin(2 * th)
    mean = np.array([c_bar, s_bar, scenario.start_pos[0], scenario.start_pos[1]])
    cov = np.zeros((4, 4))
    cov[0, 0] = c2 - c_bar**2
    cov[1, 1] = s2 - s_bar**2
    cov[0, 1] = cov[1, 0] = cs - c_bar * s_bar
    cov[2, 2] = cov[3, 3] = sp**2
    chart = AngleBox((-math.inf, -math.inf), (math.inf, math.inf))
    return init_belief(mean, cov, config, chart)
