"""Moment relaxation of equality-constrained polynomial minimization.

The relaxation replaces the rank-1 outer product of the monomial basis with
a PSD matrix subject to (i) a unit top-left entry, (ii) agreement of
repeated cells, and (iii) localizing rows for each equality constraint.
The resulting SDP is solved by a dense primal-dual path-following method
with Nesterov-Todd scaling and a Mehrotra predictor-corrector step; problem
sizes in this package stay below ~30, so a dense solve is the simplest
reliable choice and keeps results bit-reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .moments import locating_matrix, moment_constraints
from .polyalg import Basis, Polynomial, enumerate_basis, enumerate_exponents


class SdpInfeasibleError(RuntimeError):
    """The linear constraints are mutually inconsistent."""


class SdpConditionError(RuntimeError):
    """The Newton system could not be factorized."""


@dataclass
class SdpProblem:
    cost: np.ndarray
    constraints: list[np.ndarray]  # unit row first, then cell ties, then localizers
    rhs: np.ndarray
    order: int
    basis: Basis
    poly_constraints: tuple[Polynomial, ...] = ()

    @property
    def dim(self) -> int:
        return self.cost.shape[0]

    def to_triplet_text(self) -> str:
        """Sparse triplet dump, one section per matrix, for cross-checking."""
        out = [f"dim {self.dim}", f"order {self.order}"]

        def emit(name, mat, extra=""):
            out.append(f"matrix {name} {extra}".rstrip())
            for i, j in zip(*np.nonzero(np.triu(mat))):
                out.append(f"{i} {j} {mat[i, j]!r}")

        emit("C", self.cost)
        for k, (A, b) in enumerate(zip(self.constraints, self.rhs)):
            emit(f"A{k}", A, extra=repr(float(b)))
        return "\n".join(out) + "\n"


@dataclass
class SdpSolution:
    X: np.ndarray
    objective: float
    eigenvalues: np.ndarray
    rank_certified: bool
    point: np.ndarray | None
    gap: float
    converged: bool
    iterations: int
    dual_objective: float = math.nan


def _poly_to_cost_matrix(poly: Polynomial, basis: Basis, r: int) -> np.ndarray:
    s = len(basis)
    C = np.zeros((s, s))
    for gamma, c in poly.terms.items():
        if sum(gamma) > 2 * r:
            raise ValueError(
                f"term {gamma} has degree {sum(gamma)} > 2r = {2 * r}"
            )
        lm = locating_matrix(gamma, r)
        C += c * lm.matrix
    return C


def build_relaxation(cost: Polynomial, g: Sequence[Polynomial], r: int) -> SdpProblem:
    """Semidefinite relaxation of min cost(x) subject to g_j(x) = 0 at order r."""
    n = cost.nvars
    basis = enumerate_basis(n, r)
    C = _poly_to_cost_matrix(cost, basis, r)
    mats: list[np.ndarray] = []
    rhs: list[float] = []
    unit = np.zeros((len(basis), len(basis)))
    unit[0, 0] = 1.0
    mats.append(unit)
    rhs.append(1.0)
    for B in moment_constraints(r, n):
        mats.append(B)
        rhs.append(0.0)
    for gj in g:
        if gj.nvars != n:
            raise ValueError("constraint variable count mismatch")
        dg = gj.degree()
        if dg > 2 * r:
            raise ValueError(f"constraint degree {dg} exceeds 2r = {2 * r}")
        for alpha in enumerate_exponents(n, 2 * r - dg):
            mult = Polynomial(n, {alpha: 1.0}) * gj
            mats.append(_poly_to_cost_matrix(mult, basis, r))
            rhs.append(0.0)
    return SdpProblem(C, mats, np.array(rhs), r, basis, tuple(g))


def _prune_constraints(problem: SdpProblem) -> tuple[list[np.ndarray], np.ndarray]:
    """Drop linearly dependent constraint rows; flag inconsistent ones."""
    mats = problem.constraints
    rhs = problem.rhs
    flat = np.stack([m.ravel() for m in mats])
    keep: list[int] = []
    basis_rows: list[np.ndarray] = []
    for i in range(flat.shape[0]):
        row = flat[i]
        if basis_rows:
            Bm = np.stack(basis_rows)
            coef, res, _, _ = np.linalg.lstsq(Bm.T, row, rcond=None)
            resid = row - Bm.T @ coef
        else:
            coef = np.zeros(0)
            resid = row
        if np.linalg.norm(resid) > 1e-10 * max(1.0, np.linalg.norm(row)):
            keep.append(i)
            basis_rows.append(row)
        else:
            implied = float(coef @ rhs[keep]) if keep else 0.0
            if abs(implied - rhs[i]) > 1e-8 * (1.0 + abs(rhs[i])):
                raise SdpInfeasibleError(
                    f"constraint {i} contradicts earlier rows "
                    f"(implied rhs {implied:.6g}, stated {rhs[i]:.6g})"
                )
    return [mats[i] for i in keep], rhs[keep]


def _max_step(M: np.ndarray, D: np.ndarray) -> float:
    """Largest alpha <= 1 with M + alpha D still PSD."""
    L = np.linalg.cholesky(M)
    Linv = np.linalg.inv(L)
    W = Linv @ D @ Linv.T
    lam_min = float(np.linalg.eigvalsh(0.5 * (W + W.T))[0])
    if lam_min >= -1e-14:
        return 1.0
    return min(1.0, -1.0 / lam_min)


def solve_sdp(problem: SdpProblem, tol: float = 1e-8,
              max_iter: int = 200, rank_tol: float = 1e-3) -> SdpSolution:
    """Primal-dual interior-point solve of the moment relaxation.

    Runs Nesterov-Todd scaled predictor-corrector iterations to relative
    gap `tol`; deterministic for fixed inputs.  A non-converged run returns
    the best iterate with converged=False rather than raising.
    """
    A_list, b = _prune_constraints(problem)
    C_raw = 0.5 * (problem.cost + problem.cost.T)
    # scale-normalize the objective (argmin invariant); improves conditioning
    obj_scale = max(float(np.linalg.norm(C_raw, ord="fro")), 1.0)
    C = C_raw / obj_scale
    k = C.shape[0]
    m = len(A_list)
    A_flat = np.stack([a.ravel() for a in A_list])

    def A_op(X):
        return A_flat @ X.ravel()

    def At_op(y):
        return (A_flat.T @ y).reshape(k, k)

    X = np.eye(k) * max(1.0, float(np.abs(b).max()))
    S = np.eye(k) * max(1.0, float(np.linalg.norm(C, ord="fro")))
    y = np.zeros(m)

    bscale = 1.0 + float(np.linalg.norm(b))
    cscale = 1.0 + float(np.linalg.norm(C, ord="fro"))
    it = 0
    converged = False
    for it in range(1, max_iter + 1):
        rp = b - A_op(X)
        Rd = C - S - At_op(y)
        mu = float(np.sum(X * S)) / k
        pobj = float(np.sum(C * X))
        dobj = float(b @ y)
        gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        if (np.linalg.norm(rp) / bscale < tol
                and np.linalg.norm(Rd, ord="fro") / cscale < tol
                and gap < tol):
            converged = True
            break

        # Nesterov-Todd scaling point: W = G G^T with W S W = X
        try:
            jitter = 1e-15 * max(np.trace(X), np.trace(S), 1.0)
            Lx = np.linalg.cholesky(X + jitter * np.eye(k))
            Ls = np.linalg.cholesky(S + jitter * np.eye(k))
        except np.linalg.LinAlgError:
            break  # boundary reached at working precision; keep best iterate
        U, sig, Vt = np.linalg.svd(Ls.T @ Lx)
        G = Lx @ Vt.T @ np.diag(sig ** -0.5)
        Wmat = G @ G.T

        At_G = np.stack([G.T @ a @ G for a in A_list])
        M = np.einsum("iab,jab->ij", At_G, At_G)
        try:
            Mchol = np.linalg.cholesky(M + 1e-13 * np.trace(M) / m * np.eye(m))
        except np.linalg.LinAlgError as exc:
            raise SdpConditionError(f"Schur complement not PD: {exc}") from exc

        def solve_dirs(Rc):
            rhs_y = rp - A_op(Rc - Wmat @ Rd @ Wmat)
            dy = np.linalg.solve(Mchol.T, np.linalg.solve(Mchol, rhs_y))
            dS = Rd - At_op(dy)
            dX = Rc - Wmat @ dS @ Wmat
            dX = 0.5 * (dX + dX.T)
            dS = 0.5 * (dS + dS.T)
            return dX, dy, dS

        # predictor
        dXa, dya, dSa = solve_dirs(-X)
        ap = _max_step(X, dXa)
        ad = _max_step(S, dSa)
        mu_aff = float(np.sum((X + ap * dXa) * (S + ad * dSa))) / k
        sigma = min(1.0, max(1e-6, (mu_aff / max(mu, 1e-300)) ** 3))

        # corrector with the symmetrized second-order term
        Sinv = np.linalg.inv(S)
        corr = 0.5 * (dXa @ dSa @ Sinv + Sinv @ dSa @ dXa)
        Rc = sigma * mu * Sinv - X - corr
        Rc = 0.5 * (Rc + Rc.T)
        dX, dy, dS = solve_dirs(Rc)
        ap = min(1.0, 0.98 * _max_step(X, dX))
        ad = min(1.0, 0.98 * _max_step(S, dS))
        # back off until both iterates stay safely definite
        accepted = False
        for _ in range(40):
            Xn = 0.5 * (X + ap * dX + (X + ap * dX).T)
            Sn = 0.5 * (S + ad * dS + (S + ad * dS).T)
            try:
                np.linalg.cholesky(Xn)
                np.linalg.cholesky(Sn)
                accepted = True
                break
            except np.linalg.LinAlgError:
                ap *= 0.5
                ad *= 0.5
                if ap < 1e-14 and ad < 1e-14:
                    break
        if not accepted:
            break
        X, S = Xn, Sn
        y = y + ad * dy

    eigvals = np.linalg.eigvalsh(X)
    point, certified = extract_point_from_matrix(X, problem.basis, rank_tol)
    return SdpSolution(
        X=X,
        objective=float(np.sum(C_raw * X)),
        eigenvalues=eigvals,
        rank_certified=certified,
        point=point,
        gap=float(np.sum(X * S)) / k * obj_scale,
        converged=converged,
        iterations=it,
        dual_objective=float(b @ y) * obj_scale,
    )


def extract_point_from_matrix(X: np.ndarray, basis: Basis,
                              rank_tol: float = 1e-3) -> tuple[np.ndarray | None, bool]:
    """Read the minimizer out of a (near) rank-1 moment matrix.

    Certified when the second eigenvalue is at most rank_tol times the
    first; the point then comes from the degree-1 entries of the first
    column.  Otherwise the leading eigenvector supplies a heuristic point
    with certified=False.
    """
    n = basis.nvars
    eigvals, eigvecs = np.linalg.eigh(X)
    lam1 = eigvals[-1]
    lam2 = eigvals[-2] if X.shape[0] > 1 else 0.0
    ratio = abs(lam2) / lam1 if lam1 > 0 else math.inf
    first_deg1 = 1  # degree-1 block starts right after the constant
    if ratio <= rank_tol and abs(X[0, 0] - 1.0) < 1e-6:
        point = X[first_deg1:first_deg1 + n, 0] / X[0, 0]
        return point, True
    v = eigvecs[:, -1] * math.sqrt(max(lam1, 0.0))
    if abs(v[0]) < 1e-12:
        return None, False
    return v[first_deg1:first_deg1 + n] / v[0], False


def extract_point(sol: SdpSolution, basis: Basis,
                  rank_tol: float = 1e-3) -> tuple[np.ndarray | None, bool]:
    """Re-run extraction on a solved SDP with a caller-chosen rank tolerance."""
    return extract_point_from_matrix(sol.X, basis, rank_tol)


def minimize_polynomial(cost: Polynomial, g: Sequence[Polynomial], r: int,
                        tol: float = 1e-8, rank_tol: float = 1e-3,
                        max_order_bumps: int = 1):
    """Relax, solve, and extract; bump the relaxation order once if the
    solution does not certify."""
    order = max(r, (cost.degree() + 1) // 2,
                *[(gj.degree() + 1) // 2 for gj in g] if g else [0])
    sol = solve_sdp(build_relaxation(cost, g, order), tol=tol, rank_tol=rank_tol)
    bumps = 0
    while not sol.rank_certified and bumps < max_order_bumps:
        order += 1
        bumps += 1
        sol = solve_sdp(build_relaxation(cost, g, order), tol=tol, rank_tol=rank_tol)
    return sol, order
