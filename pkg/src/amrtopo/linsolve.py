"""Rescaled, IC(0)-preconditioned MINRES for the sequence of stiffness systems."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np
import scipy.sparse as sp

from .fem import SparseSymSystem, recover_full

log = logging.getLogger(__name__)


class SingularSystemError(RuntimeError):
    """A DOF has a nonpositive diagonal, i.e. it is not held by anything."""


class SolverBreakdown(RuntimeError):
    pass


@dataclass
class RescaledSystem:
    matrix: sp.csr_matrix
    scale: np.ndarray
    rhs: np.ndarray

    def to_original(self, x_scaled: np.ndarray) -> np.ndarray:
        return x_scaled / np.sqrt(self.scale)

    def to_scaled(self, x: np.ndarray) -> np.ndarray:
        return x * np.sqrt(self.scale)


@dataclass
class SolveStats:
    iterations: int
    final_relres: float
    wall_time: float
    converged: bool = True
    history: list[float] = field(default_factory=list)


def rescale(K: sp.spmatrix, f: np.ndarray) -> RescaledSystem:
    """Symmetric diagonal scaling ``D^{-1/2} K D^{-1/2}`` to unit diagonal."""
    K = sp.csr_matrix(K)
    d = K.diagonal()
    if np.any(d <= 0):
        bad = np.nonzero(d <= 0)[0]
        raise SingularSystemError(f"nonpositive diagonal at DOFs {bad[:10].tolist()}")
    s = 1.0 / np.sqrt(d)
    S = sp.diags(s)
    Kt = (S @ K @ S).tocsr()
    Kt.sort_indices()
    # exact unit diagonal regardless of rounding in s*d*s
    Kt.setdiag(1.0)
    return RescaledSystem(Kt, d, s * np.asarray(f, dtype=float))


@numba.njit(cache=True)
def _ic0_kernel(indptr, indices, data):
    """IC(0) of a CSR lower triangle with sorted columns and the diagonal last."""
    n = len(indptr) - 1
    L = data.copy()
    for i in range(n):
        start, end = indptr[i], indptr[i + 1]
        for kk in range(start, end - 1):
            j = indices[kk]
            # dot of rows i and j over shared columns < j
            s = L[kk]
            a, b = start, indptr[j]
            bend = indptr[j + 1] - 1
            while a < kk and b < bend:
                ca, cb = indices[a], indices[b]
                if ca == cb:
                    s -= L[a] * L[b]
                    a += 1
                    b += 1
                elif ca < cb:
                    a += 1
                else:
                    b += 1
            L[kk] = s / L[bend]
        d = L[end - 1]
        for kk in range(start, end - 1):
            d -= L[kk] * L[kk]
        if d <= 0.0:
            return L, i
        L[end - 1] = np.sqrt(d)
    return L, -1


@numba.njit(cache=True)
def _ic_apply(indptr, indices, L, r):
    """Solve ``L L^T z = r``."""
    n = len(indptr) - 1
    y = r.copy()
    for i in range(n):
        s = y[i]
        end = indptr[i + 1] - 1
        for kk in range(indptr[i], end):
            s -= L[kk] * y[indices[kk]]
        y[i] = s / L[end]
    for i in range(n - 1, -1, -1):
        end = indptr[i + 1] - 1
        y[i] /= L[end]
        xi = y[i]
        for kk in range(indptr[i], end):
            y[indices[kk]] -= L[kk] * xi
    return y


@dataclass
class ICFactor:
    """Zero-fill incomplete Cholesky factor ``L`` (CSR lower triangle).

    ``jacobi`` is set when a nonpositive pivot forced a diagonal fallback.
    """

    L: sp.csr_matrix
    jacobi: bool = False

    def solve(self, r: np.ndarray) -> np.ndarray:
        if self.jacobi:
            return r / self.L.diagonal() ** 2
        return _ic_apply(self.L.indptr, self.L.indices, self.L.data, np.ascontiguousarray(r, dtype=float))


def ic0(Kt: sp.spmatrix) -> ICFactor:
    low = sp.tril(sp.csr_matrix(Kt), format="csr")
    low.sum_duplicates()
    low.sort_indices()
    n = low.shape[0]
    diag_pos = low.indptr[1:] - 1
    rows_ok = np.diff(low.indptr) > 0
    if not (rows_ok.all() and np.all(low.indices[diag_pos] == np.arange(n))):
        raise SingularSystemError("matrix has missing diagonal entries")
    data, bad = _ic0_kernel(low.indptr.astype(np.int64), low.indices.astype(np.int64), low.data.astype(float))
    if bad >= 0:
        log.warning("IC(0) hit a nonpositive pivot at row %d; falling back to Jacobi", bad)
        d = np.sqrt(low.diagonal())
        return ICFactor(sp.diags(d).tocsr(), jacobi=True)
    L = sp.csr_matrix((data, low.indices, low.indptr), shape=low.shape)
    return ICFactor(L)


def minres(
    apply_A: Callable[[np.ndarray], np.ndarray],
    apply_Minv: Callable[[np.ndarray], np.ndarray] | None,
    b: np.ndarray,
    x0: np.ndarray | None = None,
    tol: float = 1e-8,
    maxit: int = 1000,
) -> tuple[np.ndarray, SolveStats]:
    """Preconditioned MINRES (Paige and Saunders).

    Stops when the preconditioned residual norm ``||r||_{M^-1}`` drops below
    ``tol * ||b||_{M^-1}``; measuring against ``b`` rather than ``r0`` lets a
    good initial guess save iterations. ``history`` holds the relative
    residual estimate after each iteration (entry 0 is the initial guess).
    """
    t0 = time.perf_counter()
    if apply_Minv is None:
        apply_Minv = lambda v: v  # noqa: E731
    b = np.asarray(b, dtype=float)
    n = len(b)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float, copy=True)

    zb = apply_Minv(b)
    bnorm = np.sqrt(max(float(b @ zb), 0.0))
    if bnorm == 0.0:
        return np.zeros(n), SolveStats(0, 0.0, time.perf_counter() - t0, True, [0.0])

    r1 = b - apply_A(x) if x0 is not None else b.copy()
    y = apply_Minv(r1) if x0 is not None else zb
    beta1 = float(r1 @ y)
    if beta1 < 0:
        raise SolverBreakdown("preconditioner is not positive definite")
    beta1 = np.sqrt(beta1)
    history = [beta1 / bnorm]
    if not np.isfinite(beta1):
        raise FloatingPointError("NaN/inf in initial residual")
    if beta1 <= tol * bnorm:
        return x, SolveStats(0, beta1 / bnorm, time.perf_counter() - t0, True, history)

    oldb, beta = 0.0, beta1
    dbar = epsln = 0.0
    phibar = beta1
    cs, sn = -1.0, 0.0
    w = np.zeros(n)
    w2 = np.zeros(n)
    r2 = r1.copy()
    converged = False
    itn = 0
    while itn < maxit:
        itn += 1
        s = 1.0 / beta
        v = s * y
        y = apply_A(v)
        if itn >= 2:
            y = y - (beta / oldb) * r1
        alfa = float(v @ y)
        y = y - (alfa / beta) * r2
        r1, r2 = r2, y
        y = apply_Minv(r2)
        oldb = beta
        beta = float(r2 @ y)
        if beta < 0:
            raise SolverBreakdown("preconditioner is not positive definite")
        beta = np.sqrt(beta)

        oldeps = epsln
        delta = cs * dbar + sn * alfa
        gbar = sn * dbar - cs * alfa
        epsln = sn * beta
        dbar = -cs * beta
        gamma = max(np.hypot(gbar, beta), np.finfo(float).eps)
        cs = gbar / gamma
        sn = beta / gamma
        phi = cs * phibar
        phibar = sn * phibar

        w1 = w2
        w2 = w
        w = (v - oldeps * w1 - delta * w2) / gamma
        x = x + phi * w

        relres = phibar / bnorm
        if not np.isfinite(relres):
            raise FloatingPointError(f"NaN/inf in MINRES at iteration {itn}")
        history.append(relres)
        if relres <= tol:
            converged = True
            break
        if beta == 0.0:
            # Krylov space exhausted with a nonzero residual
            log.warning("MINRES breakdown at iteration %d (relres %.3e)", itn, relres)
            break
    stats = SolveStats(itn, history[-1], time.perf_counter() - t0, converged, history)
    return x, stats


def default_maxit(n_free: int) -> int:
    return max(1000, int(10 * np.sqrt(max(n_free, 1))))


def solve_equilibrium(
    sys: SparseSymSystem,
    warm: np.ndarray | None = None,
    tol: float = 1e-8,
    maxit: int | None = None,
) -> tuple[np.ndarray, SolveStats]:
    """Rescale, factor IC(0), run MINRES from ``warm`` and recover hanging DOFs.

    ``warm`` is a full displacement vector on the current mesh; its hanging
    and Dirichlet entries are overwritten before use.
    """
    if not sys.reduced:
        raise ValueError("system must be constraint-processed (apply_constraints) before solving")
    rs = rescale(sys.matrix, sys.rhs)
    fac = ic0(rs.matrix)
    A = rs.matrix
    x0 = None
    if warm is not None:
        w = np.array(warm, dtype=float, copy=True)
        w[sys.constrained] = 0.0
        w[sys.fixed] = sys.fixed_values
        x0 = rs.to_scaled(w)
    if maxit is None:
        maxit = default_maxit(sys.n_free)
    xt, stats = minres(A.dot, fac.solve, rs.rhs, x0=x0, tol=tol, maxit=maxit)
    if not stats.converged:
        log.warning("MINRES stopped after %d iterations at relres %.3e", stats.iterations, stats.final_relres)
    u = recover_full(sys, rs.to_original(xt))
    return u, stats
