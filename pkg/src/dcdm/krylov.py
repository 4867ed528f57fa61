"""Conjugate-direction solvers: CG, IC(0)-PCG, deflated CG, and DCDM.

All solvers share the same stopping rule, ``||r_k|| < rel_tol * ||r_0||``,
and report the 2-norm of every residual including the initial one.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numba
import numpy as np
import scipy.linalg

from .grid import SparseMatrix, matvec

__all__ = [
    "DegenerateDirection",
    "DeflationBreakdown",
    "DirectionOracle",
    "FactorBreakdown",
    "KrylovError",
    "SolveReport",
    "SolverConfig",
    "ZeroDirection",
    "a_orthogonalize",
    "cg",
    "dcdm",
    "deflated_pcg",
    "ic0_factor",
    "pcg",
    "step_size",
]

DirectionOracle = Callable[[np.ndarray], np.ndarray]

CURVATURE_TOL = 1e-14
ZERO_DIRECTION_TOL = 1e-14


class KrylovError(ArithmeticError):
    pass


class DegenerateDirection(KrylovError):
    """Search direction has (numerically) no curvature: d^T A d <= tol."""


class ZeroDirection(KrylovError):
    """Direction vanished under A-orthogonalization."""


class FactorBreakdown(KrylovError):
    pass


class DeflationBreakdown(KrylovError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """``ortho_window=None`` orthogonalizes against every previous direction;
    an integer ``w`` keeps only the last ``w`` (``w=2`` is ``i_start = k-2``)."""

    rel_tol: float = 1e-4
    max_iter: int = 1000
    ortho_window: Optional[int] = None

    def __post_init__(self):
        if not 0 < self.rel_tol < 1:
            raise ValueError("rel_tol must lie in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.ortho_window is not None and self.ortho_window < 1:
            raise ValueError("ortho_window must be >= 1")


@dataclass
class SolveReport:
    iterations: int
    residual_history: list[float]
    converged: bool
    final_x: np.ndarray = field(repr=False)

    def relative_history(self) -> np.ndarray:
        h = np.asarray(self.residual_history)
        return h / h[0] if h[0] > 0 else h

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "residual"])
            for k, res in enumerate(self.residual_history):
                w.writerow([k, repr(float(res))])


def _curvature(d, Ad) -> float:
    dAd = float(d @ Ad)
    if not dAd > CURVATURE_TOL * float(d @ d):
        raise DegenerateDirection(f"d^T A d = {dAd:.3e}")
    return dAd


def step_size(r, d, A: SparseMatrix) -> float:
    """Line-search step minimizing the A-norm of the error along ``d``."""
    d = np.asarray(d, dtype=np.float64)
    dAd = _curvature(d, matvec(A, d))
    return float(np.asarray(r) @ d) / dAd


def a_orthogonalize(d, prev) -> np.ndarray:
    """Modified Gram-Schmidt in the A-inner product.

    ``prev`` holds ``(d_i, A d_i, d_i^T A d_i)`` triples; the cached products
    mean no matvec is needed here.
    """
    d = np.array(d, dtype=np.float64)
    norm0 = np.linalg.norm(d)
    for di, Adi, dAdi in prev:
        d -= (d @ Adi) / dAdi * di
    if np.linalg.norm(d) <= ZERO_DIRECTION_TOL * norm0 or norm0 == 0.0:
        raise ZeroDirection("direction lies in the span of previous directions")
    return d


def _start(A, b, x0):
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (A.n,):
        raise ValueError(f"right-hand side has shape {b.shape}, expected ({A.n},)")
    x = np.zeros(A.n) if x0 is None else np.array(x0, dtype=np.float64)
    return b, x, b - matvec(A, x)


def dcdm(
    A: SparseMatrix,
    b,
    x0,
    oracle: DirectionOracle,
    cfg: SolverConfig = SolverConfig(),
    callback=None,
) -> SolveReport:
    """Deep conjugate direction method with a pluggable direction oracle.

    The oracle receives the unit residual; its output is A-orthogonalized
    against the retained directions, then used for an exact line search.
    The residual is recomputed as ``b - A x`` every iteration.
    """
    b, x, r = _start(A, b, x0)
    rnorm = float(np.linalg.norm(r))
    history = [rnorm]
    target = cfg.rel_tol * rnorm
    prev: deque = deque(maxlen=cfg.ortho_window)
    if rnorm == 0.0:
        return SolveReport(0, history, True, x)

    converged = False
    k = 0
    while k < cfg.max_iter:
        k += 1
        d = np.asarray(oracle(r / rnorm), dtype=np.float64).ravel()
        if d.shape != r.shape or not np.all(np.isfinite(d)):
            raise DegenerateDirection("oracle returned a non-finite or mis-shaped direction")
        try:
            d = a_orthogonalize(d, prev)
        except ZeroDirection:
            # fall back to the residual so the iteration still makes progress
            d = a_orthogonalize(r, prev)
        Ad = matvec(A, d)
        dAd = _curvature(d, Ad)
        alpha = float(r @ d) / dAd
        x += alpha * d
        r = b - matvec(A, x)
        prev.append((d, Ad, dAd))
        rnorm = float(np.linalg.norm(r))
        history.append(rnorm)
        if callback is not None:
            callback(x)
        if rnorm < target:
            converged = True
            break
    return SolveReport(k, history, converged, x)


def _pcg(A, b, x0, precond, cfg: SolverConfig, callback=None) -> SolveReport:
    b, x, r = _start(A, b, x0)
    rnorm = float(np.linalg.norm(r))
    history = [rnorm]
    target = cfg.rel_tol * rnorm
    if rnorm == 0.0:
        return SolveReport(0, history, True, x)

    z = r if precond is None else precond(r)
    p = z.copy()
    rz = float(r @ z)
    converged = False
    k = 0
    while k < cfg.max_iter:
        k += 1
        Ap = matvec(A, p)
        pAp = float(p @ Ap)
        if not pAp > 0.0:
            raise DegenerateDirection(f"CG breakdown: p^T A p = {pAp:.3e}")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rnorm = float(np.linalg.norm(r))
        history.append(rnorm)
        if callback is not None:
            callback(x)
        if rnorm < target:
            converged = True
            break
        z = r if precond is None else precond(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return SolveReport(k, history, converged, x)


def cg(A: SparseMatrix, b, x0=None, cfg: SolverConfig = SolverConfig(), callback=None) -> SolveReport:
    return _pcg(A, b, x0, None, cfg, callback)


@numba.njit(cache=True)
def _ic0_kernel(n, indptr, indices, data, diag_shift):
    # L has the lower-triangular pattern of A (diagonal stored last in each row)
    lptr = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        cnt = 0
        for p in range(indptr[i], indptr[i + 1]):
            if indices[p] < i:
                cnt += 1
        lptr[i + 1] = lptr[i] + cnt + 1
    lind = np.empty(lptr[n], dtype=np.int64)
    lval = np.zeros(lptr[n], dtype=np.float64)
    for i in range(n):
        q = lptr[i]
        aii = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            if j < i:
                lind[q] = j
                lval[q] = data[p]
                q += 1
            elif j == i:
                aii = data[p]
        lind[q] = i
        if aii == 0.0:
            if q != lptr[i]:
                return lptr, lind, lval, i
            lval[q] = 1.0  # empty row: identity pass-through
            continue
        for q1 in range(lptr[i], lptr[i + 1] - 1):
            k = lind[q1]
            # sparse dot of L[i, :k] and L[k, :k]
            s = 0.0
            a = lptr[i]
            bq = lptr[k]
            bend = lptr[k + 1] - 1
            while a < q1 and bq < bend:
                if lind[a] == lind[bq]:
                    s += lval[a] * lval[bq]
                    a += 1
                    bq += 1
                elif lind[a] < lind[bq]:
                    a += 1
                else:
                    bq += 1
            lval[q1] = (lval[q1] - s) / lval[lptr[k + 1] - 1]
        s = 0.0
        for q1 in range(lptr[i], lptr[i + 1] - 1):
            s += lval[q1] * lval[q1]
        piv = aii * (1.0 + diag_shift) - s
        if not piv > 0.0:
            return lptr, lind, lval, i
        lval[lptr[i + 1] - 1] = np.sqrt(piv)
    return lptr, lind, lval, -1


def ic0_factor(A: SparseMatrix, shift: float = 1e-6) -> SparseMatrix:
    """Zero fill-in incomplete Cholesky of ``A + shift * diag(A)``.

    Rows with a zero diagonal (boundary cells) get a unit pivot so the factor
    acts as the identity there.
    """
    lptr, lind, lval, bad = _ic0_kernel(A.n, A.row_offsets, A.col_indices, A.values, float(shift))
    if bad >= 0:
        raise FactorBreakdown(f"nonpositive pivot in row {bad}")
    return SparseMatrix(A.n, lptr, lind, lval)


@numba.njit(cache=True)
def _ic0_solve(n, lptr, lind, lval, r):
    y = r.copy()
    for i in range(n):
        s = y[i]
        end = lptr[i + 1] - 1
        for p in range(lptr[i], end):
            s -= lval[p] * y[lind[p]]
        y[i] = s / lval[end]
    for i in range(n - 1, -1, -1):
        end = lptr[i + 1] - 1
        y[i] /= lval[end]
        yi = y[i]
        for p in range(lptr[i], end):
            y[lind[p]] -= lval[p] * yi
    return y


def _check_lower(L: SparseMatrix):
    ro, ci = L.row_offsets, L.col_indices
    last = ro[1:] - 1
    rows = np.repeat(np.arange(L.n), np.diff(ro))
    if np.any(np.diff(ro) < 1) or np.any(ci[last] != np.arange(L.n)) or np.any(ci > rows):
        raise ValueError("L must be lower triangular with a stored diagonal in every row")


def pcg(
    A: SparseMatrix, b, x0, L: SparseMatrix, cfg: SolverConfig = SolverConfig(), callback=None
) -> SolveReport:
    """CG preconditioned with ``(L L^T)^{-1}`` applied by two triangular solves."""
    _check_lower(L)
    ro, ci, va = L.row_offsets, L.col_indices, L.values

    def precond(r):
        return _ic0_solve(L.n, ro, ci, va, r)

    return _pcg(A, b, x0, precond, cfg, callback)


def deflated_pcg(
    A: SparseMatrix,
    b,
    W,
    cfg: SolverConfig = SolverConfig(),
    x0=None,
    L: SparseMatrix | None = None,
    callback=None,
) -> SolveReport:
    """Deflated (P)CG: CG restricted to the A-orthogonal complement of span(W).

    The starting guess is corrected so that ``W^T r_0 = 0``. The reported
    history starts from the residual of the caller's ``x0`` so that runs are
    comparable with the other solvers.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 1:
        W = W[:, None]
    if W.size == 0:
        if L is None:
            return cg(A, b, x0, cfg, callback)
        return pcg(A, b, x0, L, cfg, callback)
    if W.shape[0] != A.n:
        raise ValueError("deflation basis has the wrong number of rows")

    AW = A.to_scipy() @ W
    E = W.T @ AW
    E = 0.5 * (E + E.T)
    ev = np.linalg.eigvalsh(E)
    # ||A||_inf * max ||w_j||^2 bounds every eigenvalue of W^T A W
    scale = abs(A.to_scipy()).sum(axis=1).max() * (W * W).sum(axis=0).max()
    if not ev[0] > 1e-10 * scale:
        raise DeflationBreakdown(f"W^T A W is singular (eigenvalues in [{ev[0]:.3e}, {ev[-1]:.3e}])")
    E_fac = scipy.linalg.cho_factor(E)

    if L is not None:
        _check_lower(L)
        ro, ci, va = L.row_offsets, L.col_indices, L.values

        def precond(r):
            return _ic0_solve(L.n, ro, ci, va, r)
    else:
        precond = None

    b, x, r = _start(A, b, x0)
    rnorm = float(np.linalg.norm(r))
    history = [rnorm]
    target = cfg.rel_tol * rnorm
    if rnorm == 0.0:
        return SolveReport(0, history, True, x)

    x += W @ scipy.linalg.cho_solve(E_fac, W.T @ r)
    r = b - matvec(A, x)

    def deflate(z):
        return z - W @ scipy.linalg.cho_solve(E_fac, AW.T @ z)

    if np.linalg.norm(r) < target:
        # the coarse correction alone solved the system
        history.append(float(np.linalg.norm(r)))
        return SolveReport(1, history, True, x)

    z = r if precond is None else precond(r)
    p = deflate(z)
    rz = float(r @ z)
    converged = False
    k = 0
    while k < cfg.max_iter:
        k += 1
        Ap = matvec(A, p)
        pAp = float(p @ Ap)
        if not pAp > 0.0:
            raise DegenerateDirection(f"deflated CG breakdown: p^T A p = {pAp:.3e}")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rnorm = float(np.linalg.norm(r))
        history.append(rnorm)
        if callback is not None:
            callback(x)
        if rnorm < target:
            converged = True
            break
        z = r if precond is None else precond(r)
        rz_new = float(r @ z)
        p = deflate(z) + (rz_new / rz) * p
        rz = rz_new
    return SolveReport(k, history, converged, x)
