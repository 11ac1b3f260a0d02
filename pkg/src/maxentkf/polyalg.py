"""Multivariate polynomial algebra over a fixed graded-lexicographic monomial basis.

Exponent indices are plain tuples of non-negative ints.  The canonical
ordering is graded-lexicographic: lower total degree first, ties broken so
that earlier variables dominate (x1^2 before x1*x2 before x2^2).  Every
vector and matrix in the package is indexed by this ordering.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg


class BasisSizeError(ValueError):
    """Requested monomial basis does not fit in a platform integer."""


def grlex_key(alpha: tuple[int, ...]) -> tuple:
    """Sort key realizing the graded-lex order (x1 > x2 > ... within a degree)."""
    return (sum(alpha), tuple(-a for a in alpha))


def enumerate_exponents(nvars: int, order: int) -> list[tuple[int, ...]]:
    """All multi-indices with total degree <= order, in graded-lex order."""
    if nvars < 1:
        raise ValueError(f"need at least one variable, got nvars={nvars}")
    if order < 0:
        raise ValueError(f"order must be non-negative, got {order}")
    size = math.comb(nvars + order, nvars)
    if size > 2**31 - 1:
        raise BasisSizeError(
            f"basis size comb({nvars + order},{nvars}) = {size} exceeds platform limit"
        )

    def compositions(n: int, total: int):
        # all n-tuples of non-negative ints summing to exactly total
        if n == 1:
            yield (total,)
            return
        for head in range(total, -1, -1):
            for tail in compositions(n - 1, total - head):
                yield (head,) + tail

    out: list[tuple[int, ...]] = []
    for deg in range(order + 1):
        out.extend(compositions(nvars, deg))
    return out


@dataclass(frozen=True)
class Basis:
    """Ordered monomial basis of all exponents with degree <= order."""

    nvars: int
    order: int
    indices: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def index_map(self) -> dict[tuple[int, ...], int]:
        m = getattr(self, "_index_map", None)
        if m is None:
            m = {a: i for i, a in enumerate(self.indices)}
            object.__setattr__(self, "_index_map", m)
        return m

    def position(self, alpha: Sequence[int]) -> int:
        return self.index_map[tuple(alpha)]

    def eval_one(self, x: Sequence[float]) -> np.ndarray:
        return self.eval_many(np.asarray(x, dtype=float).reshape(1, -1))[0]

    def eval_many(self, points: np.ndarray) -> np.ndarray:
        """Evaluate every monomial at each row of `points`; shape (N, len(basis))."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != self.nvars:
            raise ValueError(
                f"expected points of shape (N, {self.nvars}), got {pts.shape}"
            )
        # per-variable power tables, then product per monomial
        powers = [
            np.vander(pts[:, v], self.order + 1, increasing=True)
            for v in range(self.nvars)
        ]
        out = np.empty((pts.shape[0], len(self.indices)))
        for i, alpha in enumerate(self.indices):
            col = None
            for v, a in enumerate(alpha):
                if a == 0:
                    continue
                col = powers[v][:, a] if col is None else col * powers[v][:, a]
            out[:, i] = 1.0 if col is None else col
        return out


def enumerate_basis(nvars: int, order: int) -> Basis:
    """Canonical graded-lex basis of monomials of degree <= order."""
    return Basis(nvars, order, tuple(enumerate_exponents(nvars, order)))


def eval_basis(basis: Basis, x: Sequence[float]) -> np.ndarray:
    """Evaluate the basis at a single point; first entry is always 1."""
    x = np.asarray(x, dtype=float)
    if x.shape != (basis.nvars,):
        raise ValueError(f"point has dimension {x.shape}, basis has {basis.nvars} vars")
    return basis.eval_one(x)


class Polynomial:
    """Sparse real polynomial keyed by exponent tuple; no stored zero terms."""

    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms: dict[tuple[int, ...], float] | None = None):
        self.nvars = int(nvars)
        clean: dict[tuple[int, ...], float] = {}
        if terms:
            for alpha, c in terms.items():
                alpha = tuple(int(a) for a in alpha)
                if len(alpha) != self.nvars or any(a < 0 for a in alpha):
                    raise ValueError(f"bad exponent {alpha} for nvars={self.nvars}")
                c = float(c)
                if c != 0.0:
                    clean[alpha] = clean.get(alpha, 0.0) + c
        self.terms = {a: c for a, c in clean.items() if c != 0.0}

    # -- constructors -------------------------------------------------
    @staticmethod
    def constant(nvars: int, value: float) -> "Polynomial":
        return Polynomial(nvars, {(0,) * nvars: value})

    @staticmethod
    def variable(nvars: int, v: int) -> "Polynomial":
        alpha = tuple(1 if i == v else 0 for i in range(nvars))
        return Polynomial(nvars, {alpha: 1.0})

    @staticmethod
    def zero(nvars: int) -> "Polynomial":
        return Polynomial(nvars, {})

    # -- basic queries ------------------------------------------------
    def degree(self) -> int:
        return max((sum(a) for a in self.terms), default=0)

    def degree_in(self, variables: Iterable[int]) -> int:
        vs = tuple(variables)
        return max((sum(a[v] for v in vs) for a in self.terms), default=0)

    def is_zero(self) -> bool:
        return not self.terms

    # -- arithmetic ---------------------------------------------------
    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            if other.nvars != self.nvars:
                raise ValueError("mixed variable counts")
            return other
        return Polynomial.constant(self.nvars, float(other))

    def __add__(self, other) -> "Polynomial":
        other = self._coerce(other)
        out = dict(self.terms)
        for a, c in other.terms.items():
            out[a] = out.get(a, 0.0) + c
        return Polynomial(self.nvars, out)

    __radd__ = __add__

    def __neg__(self) -> "Polynomial":
        return Polynomial(self.nvars, {a: -c for a, c in self.terms.items()})

    def __sub__(self, other) -> "Polynomial":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Polynomial":
        return self._coerce(other) + (-self)

    def __mul__(self, other) -> "Polynomial":
        if not isinstance(other, Polynomial):
            c = float(other)
            return Polynomial(self.nvars, {a: v * c for a, v in self.terms.items()})
        other = self._coerce(other)
        out: dict[tuple[int, ...], float] = {}
        for a, ca in self.terms.items():
            for b, cb in other.terms.items():
                key = tuple(x + y for x, y in zip(a, b))
                out[key] = out.get(key, 0.0) + ca * cb
        return Polynomial(self.nvars, out)

    __rmul__ = __mul__

    def __pow__(self, k: int) -> "Polynomial":
        if k < 0:
            raise ValueError("negative power")
        out = Polynomial.constant(self.nvars, 1.0)
        for _ in range(k):
            out = out * self
        return out

    # -- evaluation and transforms -------------------------------------
    def evaluate(self, x: Sequence[float]) -> float:
        x = np.asarray(x, dtype=float)
        total = 0.0
        for a, c in self.terms.items():
            m = c
            for v, e in enumerate(a):
                if e:
                    m *= x[v] ** e
            total += m
        return total

    def evaluate_many(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        out = np.zeros(pts.shape[0])
        for a, c in self.terms.items():
            m = np.full(pts.shape[0], c)
            for v, e in enumerate(a):
                if e:
                    m = m * pts[:, v] ** e
            out += m
        return out

    def gradient(self) -> list["Polynomial"]:
        grads = []
        for v in range(self.nvars):
            t: dict[tuple[int, ...], float] = {}
            for a, c in self.terms.items():
                if a[v] == 0:
                    continue
                b = list(a)
                b[v] -= 1
                key = tuple(b)
                t[key] = t.get(key, 0.0) + c * a[v]
            grads.append(Polynomial(self.nvars, t))
        return grads

    def compose_affine(self, shift: Sequence[float], scale: Sequence[float]) -> "Polynomial":
        """Substitute x_v -> shift_v + scale_v * z_v; returns polynomial in z."""
        shift = np.asarray(shift, dtype=float)
        scale = np.asarray(scale, dtype=float)
        subs = [
            Polynomial(self.nvars, {(0,) * self.nvars: shift[v]})
            + scale[v] * Polynomial.variable(self.nvars, v)
            for v in range(self.nvars)
        ]
        out = Polynomial.zero(self.nvars)
        for a, c in self.terms.items():
            term = Polynomial.constant(self.nvars, c)
            for v, e in enumerate(a):
                if e:
                    term = term * subs[v] ** e
            out = out + term
        return out

    def substitute_values(self, assignments: dict[int, float]) -> "Polynomial":
        """Fix some variables to numbers; the result keeps the same nvars."""
        out: dict[tuple[int, ...], float] = {}
        for a, c in self.terms.items():
            val = c
            b = list(a)
            for v, x in assignments.items():
                if a[v]:
                    val *= x ** a[v]
                b[v] = 0
            key = tuple(b)
            out[key] = out.get(key, 0.0) + val
        return Polynomial(self.nvars, out)

    def coeff_vector(self, basis: Basis) -> np.ndarray:
        if basis.nvars != self.nvars:
            raise ValueError("basis variable count mismatch")
        vec = np.zeros(len(basis))
        pos = basis.index_map
        for a, c in self.terms.items():
            if a not in pos:
                raise ValueError(f"term {a} of degree {sum(a)} exceeds basis order {basis.order}")
            vec[pos[a]] = c
        return vec

    @staticmethod
    def from_coeff_vector(vec: Sequence[float], basis: Basis) -> "Polynomial":
        return Polynomial(basis.nvars, {a: float(c) for a, c in zip(basis.indices, vec)})

    # -- plain-text serialization: one term per line, "coeff e1 e2 ... en"
    def to_text(self) -> str:
        lines = []
        for a in sorted(self.terms, key=grlex_key):
            lines.append(" ".join([repr(self.terms[a])] + [str(e) for e in a]))
        return "\n".join(lines)

    @staticmethod
    def from_text(text: str, nvars: int) -> "Polynomial":
        terms: dict[tuple[int, ...], float] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != nvars + 1:
                raise ValueError(f"term line {line!r} does not have {nvars} exponents")
            alpha = tuple(int(p) for p in parts[1:])
            terms[alpha] = terms.get(alpha, 0.0) + float(parts[0])
        return Polynomial(nvars, terms)

    def __repr__(self) -> str:
        if not self.terms:
            return "Polynomial(0)"
        bits = []
        for a in sorted(self.terms, key=grlex_key):
            mono = "*".join(f"x{v}^{e}" for v, e in enumerate(a) if e) or "1"
            bits.append(f"{self.terms[a]:+g}*{mono}")
        return "Polynomial(" + " ".join(bits) + ")"


def poly_power_expand(f: Sequence[Polynomial], alpha: Sequence[int]) -> Polynomial:
    """Fully expanded product prod_i f_i^alpha_i in the joint variables of f."""
    alpha = tuple(int(a) for a in alpha)
    if len(f) != len(alpha):
        raise ValueError(f"{len(f)} polynomials but multi-index of length {len(alpha)}")
    nvars = f[0].nvars
    out = Polynomial.constant(nvars, 1.0)
    for fi, a in zip(f, alpha):
        if fi.nvars != nvars:
            raise ValueError("all component polynomials must share variables")
        if a:
            out = out * fi**a
    return out


@dataclass(frozen=True)
class ExtendedSystem:
    """Monomial-lifted form of a polynomial map.

    For a process model the rows satisfy, entrywise in the coefficient
    variables (u, w),

        rows[alpha][beta](u, w) * x^beta summed over beta == (f(x,u,w))^alpha,

    so taking expectations of both sides turns the dynamics into a linear
    map between moment vectors.  For an observation model the coefficient
    variables are the measurement y and the left-hand side is h(y, x)^alpha.
    """

    out_basis: Basis
    in_basis: Basis
    rows: tuple[tuple[Polynomial, ...], ...]
    coeff_nvars: int
    kind: str  # "process" (coeffs in (u, w)) or "observation" (coeffs in y)
    nu: int = 0  # for process systems: number of control variables

    @property
    def order_out(self) -> int:
        return self.out_basis.order

    @property
    def order_in(self) -> int:
        return self.in_basis.order

    def _compiled(self):
        cache = getattr(self, "_term_cache", None)
        if cache is None:
            ii, jj, cc, ee = [], [], [], []
            for i, row in enumerate(self.rows):
                for j, poly in enumerate(row):
                    for e, c in poly.terms.items():
                        ii.append(i)
                        jj.append(j)
                        cc.append(c)
                        ee.append(e)
            cache = (
                np.asarray(ii, dtype=int),
                np.asarray(jj, dtype=int),
                np.asarray(cc, dtype=float),
                np.asarray(ee, dtype=int).reshape(len(cc), self.coeff_nvars),
            )
            object.__setattr__(self, "_term_cache", cache)
        return cache

    def _moment_positions(self, basis: Basis) -> np.ndarray:
        table = getattr(self, "_pos_cache", None)
        if table is None:
            table = {}
            object.__setattr__(self, "_pos_cache", table)
        key = id(basis)
        pos = table.get(key)
        if pos is None:
            _, _, _, exps = self._compiled()
            pos = np.array([basis.position(tuple(e)) for e in exps[:, self.nu:]])
            table[key] = pos
        return pos

    def propagation_matrix(self, u: Sequence[float], w_moments) -> np.ndarray:
        """Numeric matrix E_w[rows(u, w)]: controls fixed, noise monomials
        replaced by their moments (w independent of the state)."""
        if self.kind != "process":
            raise ValueError("propagation_matrix is only defined for process systems")
        u = np.asarray(u, dtype=float)
        if u.shape != (self.nu,):
            raise ValueError(f"expected {self.nu} control values, got {u.shape}")
        ii, jj, cc, exps = self._compiled()
        vals = cc.copy()
        for v in range(self.nu):
            vals *= u[v] ** exps[:, v]
        pos = self._moment_positions(w_moments.basis)
        vals *= w_moments.values[pos]
        mat = np.zeros((len(self.out_basis), len(self.in_basis)))
        np.add.at(mat, (ii, jj), vals)
        return mat

    def observation_matrix(self, y: Sequence[float]) -> np.ndarray:
        """Numeric coefficient matrix at a concrete measurement y."""
        if self.kind != "observation":
            raise ValueError("observation_matrix is only defined for observation systems")
        y = np.asarray(y, dtype=float)
        if y.shape != (self.coeff_nvars,):
            raise ValueError(f"expected {self.coeff_nvars} measurement values, got {y.shape}")
        ii, jj, cc, exps = self._compiled()
        vals = cc.copy()
        for v in range(self.coeff_nvars):
            vals *= y[v] ** exps[:, v]
        mat = np.zeros((len(self.out_basis), len(self.in_basis)))
        np.add.at(mat, (ii, jj), vals)
        return mat


def _lift_rows(components: Sequence[Polynomial], n_state: int, state_first: bool,
               order: int) -> tuple[list[dict], int]:
    """Expand phi_order(components) and split each term into a state monomial
    times a coefficient monomial.  Returns per-output dicts keyed by state
    exponent, plus the maximal state degree encountered."""
    n_out = len(components)
    out_indices = enumerate_exponents(n_out, order)
    n_total = components[0].nvars
    rows = []
    max_state_deg = 0
    for alpha in out_indices:
        expanded = poly_power_expand(components, alpha)
        row: dict[tuple[int, ...], dict[tuple[int, ...], float]] = {}
        for e, c in expanded.terms.items():
            if state_first:
                se, ce = e[:n_state], e[n_state:]
            else:
                ce, se = e[:n_total - n_state], e[n_total - n_state:]
            max_state_deg = max(max_state_deg, sum(se))
            row.setdefault(se, {})
            row[se][ce] = row[se].get(ce, 0.0) + c
        rows.append(row)
    return rows, max_state_deg


def build_extended_process(f: Sequence[Polynomial], n_state: int, n_control: int,
                           n_noise: int, order: int) -> ExtendedSystem:
    """Lift x' = f(x, u, w) so monomials of x' up to `order` become linear in
    monomials of x.  Component polynomials use joint variables ordered
    (x..., u..., w...).  The input order is the smallest one that makes the
    factorization exact."""
    if len(f) != n_state:
        raise ValueError("process model must have one component per state variable")
    if f[0].nvars != n_state + n_control + n_noise:
        raise ValueError("component variable count does not match the declared partition")
    if order < 1:
        raise ValueError("order must be >= 1")
    raw_rows, s = _lift_rows(f, n_state, True, order)
    out_basis = enumerate_basis(n_state, order)
    in_basis = enumerate_basis(n_state, s)
    n_coeff = n_control + n_noise
    zero = Polynomial.zero(n_coeff)
    rows = []
    for row in raw_rows:
        entries = [zero] * len(in_basis)
        for se, coeffs in row.items():
            entries[in_basis.position(se)] = Polynomial(n_coeff, coeffs)
        rows.append(tuple(entries))
    return ExtendedSystem(out_basis, in_basis, tuple(rows), n_coeff, "process", n_control)


def build_extended_observation(h: Sequence[Polynomial], n_meas: int, n_state: int,
                               order: int) -> ExtendedSystem:
    """Lift v = h(y, x) so monomials of v up to `order` become linear in
    monomials of x with coefficients polynomial in y.  Component polynomials
    use joint variables ordered (y..., x...)."""
    if h[0].nvars != n_meas + n_state:
        raise ValueError("component variable count does not match the declared partition")
    if order < 1:
        raise ValueError("order must be >= 1")
    raw_rows, q = _lift_rows(h, n_state, False, order)
    out_basis = enumerate_basis(len(h), order)
    in_basis = enumerate_basis(n_state, q)
    zero = Polynomial.zero(n_meas)
    rows = []
    for row in raw_rows:
        entries = [zero] * len(in_basis)
        for se, coeffs in row.items():
            entries[in_basis.position(se)] = Polynomial(n_meas, coeffs)
        rows.append(tuple(entries))
    return ExtendedSystem(out_basis, in_basis, tuple(rows), n_meas, "observation")


@dataclass(frozen=True)
class QuotientBasis:
    """Orthonormal split of coefficient space along an ideal's degree-r slice.

    Columns of `q` span the coefficient vectors of polynomials that vanish
    on the constraint set; columns of `q_perp` span the complement and give
    a basis for the quotient ring up to degree r.
    """

    basis: Basis
    generators: tuple[Polynomial, ...]
    ideal_rows: np.ndarray  # stacked coefficient rows of {x^a * g_i}
    q: np.ndarray
    q_perp: np.ndarray

    @property
    def reduced_dim(self) -> int:
        return self.q_perp.shape[1]


def quotient_basis(g: Sequence[Polynomial], order: int,
                   rank_tol: float = 1e-10) -> QuotientBasis:
    """Quotient-ring coefficient basis for the ideal generated by g, degree <= order.

    Stacks coefficient rows of every x^a * g_i of degree <= order, then splits
    coefficient space with a pivoted QR of the transposed row matrix.  Rank is
    decided by singular values below rank_tol * sigma_max.
    """
    g = [gi for gi in g if not gi.is_zero()]
    if not g:
        nvars = 1
    else:
        nvars = g[0].nvars
    basis = enumerate_basis(nvars, order)
    s = len(basis)
    rows = []
    gens = []
    for gi in g:
        if gi.nvars != nvars:
            raise ValueError("constraint polynomials must share variables")
        dg = gi.degree()
        if dg > order:
            raise ValueError(f"constraint degree {dg} exceeds order {order}")
        gens.append(gi)
        for alpha in enumerate_exponents(nvars, order - dg):
            mono = Polynomial(nvars, {alpha: 1.0})
            rows.append((mono * gi).coeff_vector(basis))
    if not rows:
        return QuotientBasis(basis, tuple(), np.zeros((0, s)), np.zeros((s, 0)), np.eye(s))
    B = np.array(rows)
    sv = scipy.linalg.svdvals(B)
    rank = int(np.sum(sv > rank_tol * sv[0]))
    Q, _, _ = scipy.linalg.qr(B.T, pivoting=True)
    return QuotientBasis(basis, tuple(gens), B, Q[:, :rank], Q[:, rank:])
