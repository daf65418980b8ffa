"""Small dense QP: minimally invasive control correction.

minimize ||u - u_des||^2  subject to  a_i . u >= b_i  and box bounds.

The solver is a dual active-set iteration on the tiny dense problem
(k <= 8, a handful of rows), exact at the boundary and deterministic:
the most violated row enters first, ties broken by lowest index.  An
infeasible instance can be retried with solve_relaxed, which softens
non-hard rows with priority-weighted quadratic slacks.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels as _k
from .errors import DomainError, SolverStallError


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    RELAXED_OPTIMAL = "relaxed_optimal"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class QpProblem:
    """u_des, rows (a, b) meaning a.u >= b, and box bounds."""

    u_des: np.ndarray
    rows: tuple
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        u = np.ascontiguousarray(np.asarray(self.u_des, dtype=np.float64))
        k = u.shape[0] if u.ndim == 1 else 0
        if not 1 <= k <= 8:
            raise DomainError("u_des must be a vector of dimension 1..8")
        lo = np.ascontiguousarray(np.asarray(self.lower, dtype=np.float64))
        hi = np.ascontiguousarray(np.asarray(self.upper, dtype=np.float64))
        if lo.shape != (k,) or hi.shape != (k,):
            raise DomainError("box bounds must match the control dimension")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise DomainError("problem coefficients must be finite")
        if np.any(lo > hi):
            raise DomainError("lower bound exceeds upper bound")
        rows = []
        for i, (a, b) in enumerate(self.rows):
            a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
            b = float(b)
            if a.shape != (k,) or not np.all(np.isfinite(a)) or not np.isfinite(b):
                raise DomainError(f"row {i} malformed")
            rows.append((a, b))
        object.__setattr__(self, "u_des", u)
        object.__setattr__(self, "rows", tuple(rows))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.u_des.shape[0]

    def row_matrix(self):
        m = len(self.rows)
        A = np.zeros((m, self.dim))
        b = np.zeros(m)
        for i, (a, bi) in enumerate(self.rows):
            A[i] = a
            b[i] = bi
        return A, b


@dataclass(frozen=True)
class QpSolution:
    u: np.ndarray
    status: QpStatus
    active_set: tuple
    slacks: np.ndarray
    iterations: int


def _finish(p: QpProblem, u, status, work_idx, nact, iters, slacks=None):
    m = len(p.rows)
    out_slacks = np.zeros(m) if slacks is None else slacks[:m].copy()
    if status == _k.QP_STALL:
        raise SolverStallError(f"active-set iteration cap reached after {iters} steps")
    if status == _k.QP_INFEASIBLE:
        return QpSolution(
            u=np.clip(p.u_des, p.lower, p.upper),
            status=QpStatus.INFEASIBLE,
            active_set=(),
            slacks=np.zeros(m),
            iterations=int(iters),
        )
    st = QpStatus.RELAXED_OPTIMAL if status == _k.QP_RELAXED else QpStatus.OPTIMAL
    if st is QpStatus.OPTIMAL:
        out_slacks = np.zeros(m)
    return QpSolution(
        u=u.copy(),
        status=st,
        active_set=tuple(sorted(int(work_idx[a]) for a in range(nact))),
        slacks=out_slacks,
        iterations=int(iters),
    )


def _try_warm(p: QpProblem, hint) -> QpSolution | None:
    """Equality-project onto the hinted active rows; accept only if the
    result is primal feasible with nonnegative multipliers."""
    idx = sorted(set(int(i) for i in hint))
    if any(i < 0 or i >= len(p.rows) for i in idx):
        return None
    A, b = p.row_matrix()
    if idx:
        Gw = A[idx]
        dw = b[list(idx)]
        try:
            pinv = np.linalg.pinv(Gw)
        except np.linalg.LinAlgError:
            return None
        u = p.u_des + pinv @ (dw - Gw @ p.u_des)
        rhs = 2.0 * (u - p.u_des)
        mu, *_ = np.linalg.lstsq(Gw.T, rhs, rcond=None)
        if np.any(mu < -1e-10):
            return None
        if np.linalg.norm(Gw.T @ mu - rhs) > 1e-9 * max(1.0, float(np.linalg.norm(rhs))):
            return None
    else:
        u = p.u_des.copy()
    if np.any(u < p.lower - _k.FEAS_TOL) or np.any(u > p.upper + _k.FEAS_TOL):
        return None
    if len(p.rows) and np.any(A @ u - b < -_k.FEAS_TOL):
        return None
    return QpSolution(u=u, status=QpStatus.OPTIMAL, active_set=tuple(idx),
                      slacks=np.zeros(len(p.rows)), iterations=0)


def solve(p: QpProblem, warm_start: Sequence[int] | None = None,
          iteration_cap: int | None = None) -> QpSolution:
    """Exact minimizer, or status Infeasible when rows and box conflict.

    warm_start is a candidate active set (row indices), typically from
    the previous control cycle; a wrong hint just falls back to the cold
    iteration.  iteration_cap overrides the 100 k default (diagnostics).
    """
    if warm_start is not None:
        hit = _try_warm(p, warm_start)
        if hit is not None:
            return hit
    A, b = p.row_matrix()
    cap = 100 * p.dim if iteration_cap is None else int(iteration_cap)
    mtot = len(p.rows) + 2 * p.dim
    work_idx = np.empty(mtot, np.int64)
    work_lam = np.empty(mtot)
    u, status, nact, iters = _k.solve_box_qp(
        p.u_des, A, b, len(p.rows), p.lower, p.upper, cap, work_idx, work_lam)
    return _finish(p, u, status, work_idx, nact, iters)


def solve_relaxed(p: QpProblem, weights: Sequence[float], hard: Sequence[bool],
                  iteration_cap: int | None = None) -> QpSolution:
    """Soften non-hard rows to a.u >= b - s, s >= 0, penalty sum w s^2.

    The relaxation only engages when the exact problem is infeasible; a
    feasible instance returns the solve result unchanged with zero
    slacks.  Hard rows stay exact; if they conflict with the box on
    their own the status is Infeasible.
    """
    m = len(p.rows)
    w = np.ascontiguousarray(np.asarray(weights, dtype=np.float64))
    hd = np.ascontiguousarray(np.asarray(hard, dtype=np.bool_))
    if w.shape != (m,) or hd.shape != (m,):
        raise DomainError("weights and hard flags must match the row count")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise DomainError("weights must be positive and finite")
    exact = solve(p, iteration_cap=iteration_cap)
    if exact.status is QpStatus.OPTIMAL:
        return exact
    A, b = p.row_matrix()
    nsoft = int(m - hd.sum())
    cap = 100 * (p.dim + nsoft) if iteration_cap is None else int(iteration_cap)
    mtot = m + nsoft + 2 * p.dim
    work_idx = np.empty(mtot, np.int64)
    work_lam = np.empty(mtot)
    slacks = np.zeros(max(m, 1))
    u, status, nact, iters, _ = _k.solve_relaxed_qp(
        p.u_des, A, b, m, p.lower, p.upper, w, hd, cap, work_idx, work_lam, slacks)
    return _finish(p, u, status, work_idx, nact, iters, slacks=slacks)


class QpSolver:
    """solve/solve_relaxed with warm-start memory across calls.

    Holds only the last successful active set; one instance per control
    session, independent instances across threads.
    """

    def __init__(self):
        self._last_active: tuple | None = None

    def solve(self, p: QpProblem) -> QpSolution:
        sol = solve(p, warm_start=self._last_active)
        if sol.status is QpStatus.OPTIMAL:
            self._last_active = sol.active_set
        else:
            self._last_active = None
        return sol

    def solve_relaxed(self, p: QpProblem, weights, hard) -> QpSolution:
        self._last_active = None
        return solve_relaxed(p, weights, hard)

    def reset(self):
        self._last_active = None
