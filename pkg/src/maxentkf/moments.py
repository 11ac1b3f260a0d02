"""Moment vectors, moment matrices, and the locating-matrix machinery."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .polyalg import Basis, enumerate_basis, enumerate_exponents, grlex_key


class IncompleteMomentsError(KeyError):
    """A required moment index is missing from the vector."""


@dataclass(frozen=True)
class MomentVector:
    """Moments of a distribution indexed by the canonical monomial basis."""

    basis: Basis
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (len(self.basis),):
            raise ValueError(
                f"{len(self.basis)} basis indices but {vals.shape} values"
            )
        object.__setattr__(self, "values", vals)

    @property
    def nvars(self) -> int:
        return self.basis.nvars

    @property
    def order(self) -> int:
        return self.basis.order

    def value(self, alpha: Sequence[int]) -> float:
        key = tuple(alpha)
        pos = self.basis.index_map.get(key)
        if pos is None:
            raise IncompleteMomentsError(
                f"moment {key} of degree {sum(key)} not stored (order {self.order})"
            )
        return float(self.values[pos])

    def __getitem__(self, alpha) -> float:
        return self.value(alpha)

    def truncated(self, order: int) -> "MomentVector":
        if order > self.order:
            raise ValueError(f"cannot truncate order {self.order} up to {order}")
        basis = enumerate_basis(self.nvars, order)
        vals = np.array([self.value(a) for a in basis.indices])
        return MomentVector(basis, vals)

    # -- CSV round trip: header of dash-joined multi-indices, one value row
    def to_csv(self) -> str:
        header = ",".join("-".join(str(e) for e in a) for a in self.basis.indices)
        row = ",".join(repr(float(v)) for v in self.values)
        return header + "\n" + row + "\n"

    @staticmethod
    def from_csv(text: str) -> "MomentVector":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if len(lines) != 2:
            raise ValueError("moment CSV must have a header line and one value row")
        indices = [tuple(int(e) for e in tok.split("-")) for tok in lines[0].split(",")]
        values = np.array([float(tok) for tok in lines[1].split(",")])
        nvars = len(indices[0])
        order = max(sum(a) for a in indices)
        basis = enumerate_basis(nvars, order)
        if list(basis.indices) != indices:
            raise ValueError("moment CSV header is not a complete graded-lex basis")
        return MomentVector(basis, values)


def moment_vector_from_dict(nvars: int, order: int,
                            entries: dict[tuple[int, ...], float]) -> MomentVector:
    basis = enumerate_basis(nvars, order)
    vals = np.zeros(len(basis))
    for a, v in entries.items():
        vals[basis.position(a)] = v
    return MomentVector(basis, vals)


def moment_matrix(m: MomentVector, r: int) -> np.ndarray:
    """Symmetric matrix with entry (alpha, beta) = m[alpha + beta]; needs order 2r."""
    basis = enumerate_basis(m.nvars, r)
    s = len(basis)
    out = np.empty((s, s))
    for i, a in enumerate(basis.indices):
        for j in range(i, s):
            b = basis.indices[j]
            v = m.value(tuple(x + y for x, y in zip(a, b)))
            out[i, j] = v
            out[j, i] = v
    return out


@dataclass(frozen=True)
class LocatingMatrix:
    """Reads the monomial x^gamma off a moment matrix: <B, M_r(x)> = x^gamma."""

    gamma: tuple[int, ...]
    matrix: np.ndarray
    normalizer: int


def _representations(gamma: tuple[int, ...], r: int) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """Ordered pairs (alpha, beta) of degree <= r with alpha + beta = gamma."""
    out = []
    for alpha in enumerate_exponents(len(gamma), min(r, sum(gamma))):
        beta = tuple(g - a for g, a in zip(gamma, alpha))
        if any(b < 0 for b in beta) or sum(beta) > r:
            continue
        out.append((alpha, beta))
    return out


def locating_matrix(gamma: Sequence[int], r: int) -> LocatingMatrix:
    """Averaging matrix over all cells of M_r holding x^gamma."""
    gamma = tuple(int(g) for g in gamma)
    if sum(gamma) > 2 * r:
        raise ValueError(f"|gamma| = {sum(gamma)} exceeds 2r = {2 * r}")
    basis = enumerate_basis(len(gamma), r)
    s = len(basis)
    mat = np.zeros((s, s))
    pairs = _representations(gamma, r)
    for alpha, beta in pairs:
        mat[basis.position(alpha), basis.position(beta)] += 1.0
    c = len(pairs)
    return LocatingMatrix(gamma, mat / c, c)


def moment_constraints(r: int, n: int) -> list[np.ndarray]:
    """Symmetric matrices whose zero inner product with a moment matrix forces
    its repeated cells (same total exponent) to agree.

    For each gamma with several unordered representations, the canonical pair
    has the lexicographically smallest left index; every other pair yields one
    constraint E_canonical - E_pair.
    """
    basis = enumerate_basis(n, r)
    s = len(basis)

    def sym_outer(a: tuple[int, ...], b: tuple[int, ...]) -> np.ndarray:
        m = np.zeros((s, s))
        i, j = basis.position(a), basis.position(b)
        m[i, j] += 1.0
        m[j, i] += 1.0
        return m

    out = []
    for gamma in enumerate_exponents(n, 2 * r):
        pairs = _representations(gamma, r)
        unordered = sorted({tuple(sorted((a, b))) for a, b in pairs})
        if len(unordered) < 2:
            continue
        # smallest lexicographic left index over all ordered pairs
        canon = min(pairs, key=lambda p: p[0])
        canon_key = tuple(sorted(canon))
        for pair in unordered:
            if pair == canon_key:
                continue
            out.append(sym_outer(*canon) - sym_outer(*pair))
    return out


def sample_moments(samples: np.ndarray, r: int) -> MomentVector:
    """Empirical moments (1/N) sum x_k^alpha for every |alpha| <= r."""
    pts = np.asarray(samples, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    if pts.shape[0] == 0:
        raise ValueError("need at least one sample")
    basis = enumerate_basis(pts.shape[1], r)
    vals = basis.eval_many(pts).mean(axis=0)
    return MomentVector(basis, vals)


def affine_transform_moments(m: MomentVector, shift: Sequence[float],
                             scale: Sequence[float],
                             order: int | None = None) -> MomentVector:
    """Moments of y = shift + scale * x (per-axis) from the moments of x."""
    shift = np.asarray(shift, dtype=float)
    scale = np.asarray(scale, dtype=float)
    order = m.order if order is None else order
    if order > m.order:
        raise ValueError("affine transform cannot raise the moment order")
    basis = enumerate_basis(m.nvars, order)
    vals = np.zeros(len(basis))
    for i, alpha in enumerate(basis.indices):
        # expand prod_v (shift_v + scale_v x_v)^alpha_v by multinomials
        total = 0.0
        # iterate over k <= alpha componentwise
        ranges = [range(a + 1) for a in alpha]
        for k in itertools.product(*ranges):
            coef = 1.0
            for v, (av, kv) in enumerate(zip(alpha, k)):
                coef *= math.comb(av, kv) * (shift[v] ** (av - kv)) * (scale[v] ** kv)
            if coef != 0.0:
                total += coef * m.value(k)
        vals[i] = total
    return MomentVector(basis, vals)


def gaussian_moments(mean: Sequence[float], cov: np.ndarray, order: int) -> MomentVector:
    """Analytic Gaussian moments up to `order` via the recursive Isserlis rule."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    n = mean.shape[0]
    basis = enumerate_basis(n, order)
    cache: dict[tuple[int, ...], float] = {(0,) * n: 1.0}

    def mom(alpha: tuple[int, ...]) -> float:
        if alpha in cache:
            return cache[alpha]
        # recursion on the first active variable:
        # E[x_i x^b] = mu_i E[x^b] + sum_j Sigma_ij b_j E[x^(b - e_j)]
        i = next(v for v, a in enumerate(alpha) if a > 0)
        b = list(alpha)
        b[i] -= 1
        b = tuple(b)
        total = mean[i] * mom(b)
        for j in range(n):
            if b[j] > 0:
                c = list(b)
                c[j] -= 1
                total += cov[i, j] * b[j] * mom(tuple(c))
        cache[alpha] = total
        return total

    vals = np.array([mom(a) for a in basis.indices])
    return MomentVector(basis, vals)
