"""Deterministic adaptive integration on boxes and on the circle-cross-box chart.

The engine is a tensor-product Gauss-Legendre rule, 10 nodes per axis per
cell, with the cell error estimated against an embedded 5-node rule.  The
worst cell is bisected along the axis carrying the most unresolved
high-degree content until the requested relative accuracy is met or the
cell budget runs out.  Batched integrands share point evaluations, and the
reduction order is fixed by cell creation index so results do not depend
on scheduling.
"""
from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss, legval

from .polyalg import Polynomial, enumerate_basis

_N10, _W10 = leggauss(10)
_N5, _W5 = leggauss(5)
# spectral roughness detectors: Legendre coefficients 8 and 9 of the
# degree-9 interpolant through the 10 axis nodes
_DET = []
for _k in (8, 9):
    _ck = np.zeros(_k + 1)
    _ck[_k] = 1.0
    _DET.append((2 * _k + 1) / 2.0 * _W10 * legval(_N10, _ck))

DEFAULT_CELL_BUDGET = 200_000


class QuadratureError(RuntimeError):
    """Adaptive refinement failed to reach the requested accuracy."""

    def __init__(self, msg: str, worst_cell=None):
        super().__init__(msg)
        self.worst_cell = worst_cell


class DomainError(ValueError):
    """The integrand overflows or the chart is misconfigured."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; chart coordinates equal ambient coordinates.

    Infinite bounds mark unconstrained axes; they must be truncated to a
    finite range (from moment information) before integration.
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if len(lo) != len(hi):
            raise DomainError("lower/upper length mismatch")
        for a, b in zip(lo, hi):
            if not a < b:
                raise DomainError(f"box axis [{a}, {b}] must be increasing")

    @property
    def chart_dim(self) -> int:
        return len(self.lower)

    @property
    def ambient_dim(self) -> int:
        return len(self.lower)

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.lower).all() and np.isfinite(self.upper).all())

    def chart_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array(self.lower), np.array(self.upper)

    def to_ambient(self, pts: np.ndarray) -> np.ndarray:
        return pts

    def constraint_polys(self) -> list[Polynomial]:
        return []


def unbounded_box(n: int) -> Box:
    """The whole Euclidean space as a box of infinite extent."""
    return Box((-math.inf,) * n, (math.inf,) * n)


@dataclass(frozen=True)
class AngleBox:
    """One angular coordinate embedded as (cos t, sin t), remaining axes a box.

    Chart coordinates are (theta, *box) with theta on [-pi, pi); ambient
    coordinates are (c, s, *box) and satisfy c^2 + s^2 = 1 exactly.
    """

    lower: tuple[float, ...] = ()
    upper: tuple[float, ...] = ()

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if len(lo) != len(hi):
            raise DomainError("lower/upper length mismatch")
        for a, b in zip(lo, hi):
            if not a < b:
                raise DomainError(f"box axis [{a}, {b}] must be increasing")

    @property
    def chart_dim(self) -> int:
        return 1 + len(self.lower)

    @property
    def ambient_dim(self) -> int:
        return 2 + len(self.lower)

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.lower).all() and np.isfinite(self.upper).all())

    def chart_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array((-math.pi,) + self.lower),
                np.array((math.pi,) + self.upper))

    def to_ambient(self, pts: np.ndarray) -> np.ndarray:
        out = np.empty((pts.shape[0], self.ambient_dim))
        out[:, 0] = np.cos(pts[:, 0])
        out[:, 1] = np.sin(pts[:, 0])
        out[:, 2:] = pts[:, 1:]
        return out

    def constraint_polys(self) -> list[Polynomial]:
        n = self.ambient_dim
        c2 = tuple(2 if i == 0 else 0 for i in range(n))
        s2 = tuple(2 if i == 1 else 0 for i in range(n))
        return [Polynomial(n, {c2: 1.0, s2: 1.0, (0,) * n: -1.0})]


Chart = Box | AngleBox


@dataclass
class QuadratureResult:
    value: np.ndarray | float
    error_estimate: float
    cells_used: int
    converged: bool = True


@dataclass
class FrozenRule:
    """A concrete node/weight set produced by one adaptive run; reusable."""

    chart: Chart
    points: np.ndarray   # ambient coordinates, shape (N, ambient_dim)
    weights: np.ndarray  # shape (N,)
    cells_used: int

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Integrate from per-point values (N,) or (N, m)."""
        return values.T @ self.weights


class _Cell:
    __slots__ = ("uid", "lo", "hi", "val10", "val5", "err", "axis_scores",
                 "pts", "wts")

    def __init__(self, uid, lo, hi):
        self.uid = uid
        self.lo = lo
        self.hi = hi


class _RefGrids:
    """Reference tensor grids on [-1, 1]^d shared by every cell of one run."""

    def __init__(self, d: int):
        self.d = d

        def tensor(nodes, weights):
            grids = np.meshgrid(*([nodes] * d), indexing="ij")
            pts = np.stack([g.ravel() for g in grids], axis=1)
            w = weights
            for _ in range(d - 1):
                w = np.multiply.outer(w, weights)
            return pts, w.ravel()

        self.pts10, self.w10 = tensor(_N10, _W10)
        self.pts5, self.w5 = tensor(_N5, _W5)
        self.n10 = self.pts10.shape[0]
        self.pts_all = np.concatenate([self.pts10, self.pts5], axis=0)
        # per-axis detector tensors: contract the value tensor over the other
        # axes with plain weights, then take high-order Legendre content
        self.detectors = []
        for a in range(d):
            dets = []
            for det in _DET:
                vecs = [det if b == a else _W10 for b in range(d)]
                t = vecs[0]
                for v in vecs[1:]:
                    t = np.multiply.outer(t, v)
                dets.append(t.ravel())
            self.detectors.append(np.stack(dets))


def _eval_cell(cell: _Cell, integrand, chart: Chart, ref: _RefGrids) -> None:
    mid = (cell.lo + cell.hi) / 2.0
    half = (cell.hi - cell.lo) / 2.0
    vol = float(np.prod(half))
    pts = mid + half * ref.pts_all
    vals = np.asarray(integrand(chart.to_ambient(pts)), dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    v10 = vals[: ref.n10]
    v5 = vals[ref.n10:]
    cell.val10 = vol * (v10.T @ ref.w10)
    cell.val5 = vol * (v5.T @ ref.w5)
    cell.err = np.abs(cell.val10 - cell.val5)
    cell.pts = pts[: ref.n10]
    cell.wts = vol * ref.w10
    # roughness per axis from the detector contractions
    scores = np.empty(ref.d)
    for a in range(ref.d):
        scores[a] = np.abs(ref.detectors[a] @ v10).sum() * vol
    cell.axis_scores = scores


def _adaptive(integrand, chart: Chart, rel_tol: float, max_cells: int,
              initial_splits: Sequence[Sequence[float]] | None):
    if not chart.finite:
        raise DomainError(
            "chart has infinite extent; truncate unconstrained axes before integrating"
        )
    lo, hi = chart.chart_bounds()
    d = lo.shape[0]
    ref = _RefGrids(d)
    uid = 0
    cells: list[_Cell] = []

    def make_cell(clo, chi):
        nonlocal uid
        c = _Cell(uid, np.asarray(clo, dtype=float), np.asarray(chi, dtype=float))
        uid += 1
        _eval_cell(c, integrand, chart, ref)
        return c

    # initial partition from optional interior breakpoints per chart axis
    edges = []
    for a in range(d):
        pts = [lo[a]]
        if initial_splits is not None and a < len(initial_splits):
            pts.extend(x for x in sorted(initial_splits[a]) if lo[a] < x < hi[a])
        pts.append(hi[a])
        edges.append(pts)
    for combo in itertools.product(*[range(len(e) - 1) for e in edges]):
        clo = [edges[a][i] for a, i in enumerate(combo)]
        chi = [edges[a][i + 1] for a, i in enumerate(combo)]
        cells.append(make_cell(clo, chi))

    heap = [(-float(c.err.max()), c.uid, c) for c in cells]
    heapq.heapify(heap)
    alive = {c.uid: c for c in cells}

    def totals():
        order = sorted(alive)
        val = sum(alive[i].val10 for i in order)
        l1 = sum(np.abs(alive[i].val10) for i in order)
        err = sum(alive[i].err for i in order)
        return np.atleast_1d(val), np.atleast_1d(l1), np.atleast_1d(err)

    def converged() -> bool:
        val, l1, err = totals()
        scale = np.maximum(np.maximum(np.abs(val), l1), 1e-300)
        return bool(np.all(err <= rel_tol * scale))

    check_every = max(1, len(alive) // 4)
    since_check = 0
    ok = converged()
    while not ok and heap:
        if len(alive) + 1 > max_cells:
            break
        neg_err, _, cell = heapq.heappop(heap)
        if cell.uid not in alive:
            continue
        del alive[cell.uid]
        axis = int(np.argmax(cell.axis_scores))
        mid = (cell.lo[axis] + cell.hi[axis]) / 2.0
        lo1, hi1 = cell.lo.copy(), cell.hi.copy()
        hi1[axis] = mid
        lo2, hi2 = cell.lo.copy(), cell.hi.copy()
        lo2[axis] = mid
        for child in (make_cell(lo1, hi1), make_cell(lo2, hi2)):
            alive[child.uid] = child
            heapq.heappush(heap, (-float(child.err.max()), child.uid, child))
        since_check += 1
        if since_check >= check_every:
            since_check = 0
            ok = converged()
            check_every = max(1, len(alive) // 8)
    if not ok:
        ok = converged()
    val, l1, err = totals()
    worst = max(alive.values(), key=lambda c: float(c.err.max()), default=None)
    return alive, val, err, ok, worst


def _as_result(val, err, ncells, ok, scalar: bool) -> QuadratureResult:
    value = float(val[0]) if scalar and val.shape == (1,) else val
    return QuadratureResult(value, float(err.max()), ncells, ok)


def integrate_fn(f: Callable[[np.ndarray], np.ndarray], chart: Chart,
                 rel_tol: float, max_cells: int = DEFAULT_CELL_BUDGET,
                 initial_splits=None, strict: bool = True) -> QuadratureResult:
    """Integrate a pointwise function over the chart.

    `f` receives ambient points of shape (N, ambient_dim) and returns (N,)
    or (N, m) values.  Raises QuadratureError when the cell budget is
    exhausted before the error target (unless strict=False).
    """
    probe = np.asarray(f(chart.to_ambient(chart.chart_bounds()[0].reshape(1, -1))))
    alive, val, err, ok, worst = _adaptive(f, chart, rel_tol, max_cells, initial_splits)
    if not ok and strict:
        raise QuadratureError(
            f"no convergence within {max_cells} cells "
            f"(residual error {float(err.max()):.3e})",
            worst_cell=None if worst is None else (tuple(worst.lo), tuple(worst.hi)),
        )
    return _as_result(val, err, len(alive), ok, probe.ndim <= 1)


class ExpPolyIntegrand:
    """exp(-lam . phi(x)) times a batch of monomials; the exponential is
    evaluated once per point and shared across the batch.

    With `clip_exponent` set, runaway exponents saturate instead of raising;
    fitting loops use this so the adaptive grid can see (and the optimizer
    can then push back) a tail blow-up of a trial coefficient vector.
    """

    def __init__(self, lam: np.ndarray, lam_basis, betas, nvars: int,
                 clip_exponent: float | None = None):
        self.lam = np.asarray(lam, dtype=float)
        self.lam_basis = lam_basis
        self.betas = [tuple(b) for b in betas]
        max_deg = max([lam_basis.order] + [sum(b) for b in self.betas])
        self.eval_basis = enumerate_basis(nvars, max_deg)
        self.cols = [self.eval_basis.position(b) for b in self.betas]
        self.n_lam = len(lam_basis)
        self.clip_exponent = clip_exponent

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        phi = self.eval_basis.eval_many(pts)
        expo = -phi[:, : self.n_lam] @ self.lam
        if self.clip_exponent is not None:
            np.clip(expo, None, self.clip_exponent, out=expo)
        elif np.any(expo > 709.0):
            raise DomainError(
                "exp overflow while integrating the density; the chart or the "
                "coefficients are misconfigured"
            )
        e = np.exp(expo)
        return e[:, None] * phi[:, self.cols]


def integrate_med_batch(lam, betas, chart: Chart | None = None,
                        rel_tol: float = 1e-8,
                        max_cells: int = DEFAULT_CELL_BUDGET,
                        initial_splits=None, strict: bool = True) -> QuadratureResult:
    """Integrals of exp(-sum lam_a x^a) x^beta over the chart, batched over beta.

    `lam` is a coefficient object with attributes `basis`, `lam`, and `chart`
    (its internal chart is used when `chart` is None).  Entry j of the result
    estimates the integral for betas[j] with relative error <= rel_tol.
    """
    if not (1e-12 < rel_tol < 1e-2):
        raise ValueError(f"rel_tol {rel_tol} outside (1e-12, 1e-2)")
    chart = lam.chart if chart is None else chart
    fn = ExpPolyIntegrand(lam.lam, lam.basis, betas, chart.ambient_dim)
    alive, val, err, ok, worst = _adaptive(fn, chart, rel_tol, max_cells, initial_splits)
    if not ok and strict:
        raise QuadratureError(
            f"no convergence within {max_cells} cells "
            f"(residual error {float(err.max()):.3e})",
            worst_cell=None if worst is None else (tuple(worst.lo), tuple(worst.hi)),
        )
    return QuadratureResult(val, float(err.max()), len(alive), ok)


def build_rule(integrand, chart: Chart, rel_tol: float,
               max_cells: int = DEFAULT_CELL_BUDGET, initial_splits=None,
               strict: bool = False) -> tuple[FrozenRule, QuadratureResult]:
    """Run the adaptive refinement once and freeze the resulting node set."""
    alive, val, err, ok, worst = _adaptive(integrand, chart, rel_tol, max_cells,
                                           initial_splits)
    if not ok and strict:
        raise QuadratureError(
            f"no convergence within {max_cells} cells "
            f"(residual error {float(err.max()):.3e})",
            worst_cell=None if worst is None else (tuple(worst.lo), tuple(worst.hi)),
        )
    order = sorted(alive)
    pts = np.concatenate([chart.to_ambient(alive[i].pts) for i in order], axis=0)
    wts = np.concatenate([alive[i].wts for i in order])
    rule = FrozenRule(chart, pts, wts, len(alive))
    return rule, QuadratureResult(val, float(err.max()), len(alive), ok)
