"""Active-set QP against an exhaustive KKT enumeration oracle."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orbitguard.errors import DomainError, SolverStallError
from orbitguard.qp import QpProblem, QpSolution, QpSolver, QpStatus, solve, solve_relaxed


def objective(u, u_des):
    return float(np.sum((np.asarray(u) - np.asarray(u_des)) ** 2))


def enumeration_oracle(p: QpProblem):
    """Brute-force optimum by solving every candidate KKT subsystem.

    Enumerates all active subsets up to size k over constraint rows plus
    box faces, projects u_des onto each equality system, and keeps the
    best feasible candidate.  Returns (u, objective) or None when no
    candidate subset is feasible (infeasible problem).
    """
    k = p.dim
    A, b = p.row_matrix()
    G = np.vstack([A, np.eye(k), -np.eye(k)])
    d = np.concatenate([b, p.lower, -p.upper])
    m = G.shape[0]
    best = None
    for size in range(0, k + 1):
        for subset in itertools.combinations(range(m), size):
            if size == 0:
                u = p.u_des.copy()
            else:
                Gw = G[list(subset)]
                dw = d[list(subset)]
                u = p.u_des + np.linalg.pinv(Gw) @ (dw - Gw @ p.u_des)
            if np.all(G @ u - d >= -1e-8):
                obj = objective(u, p.u_des)
                if best is None or obj < best[1] - 1e-15:
                    best = (u, obj)
    return best


def random_problem(rng):
    k = int(rng.integers(1, 4))
    m = int(rng.integers(0, 7))
    lower = -rng.uniform(0.5, 2.0, size=k)
    upper = rng.uniform(0.5, 2.0, size=k)
    u_des = rng.normal(0.0, 1.2, size=k)
    anchor = rng.uniform(lower, upper)
    rows = []
    for _ in range(m):
        a = rng.normal(size=k)
        b = float(a @ anchor - rng.uniform(-0.3, 1.2))
        rows.append((a, b))
    return QpProblem(u_des=u_des, rows=tuple(rows), lower=lower, upper=upper)


# ---------------------------------------------------------------------------
# contract and hand examples


def test_no_rows_returns_u_des_exactly():
    p = QpProblem(u_des=np.array([0.3, -0.2, 0.1]), rows=(),
                  lower=-np.ones(3), upper=np.ones(3))
    sol = solve(p)
    assert sol.status is QpStatus.OPTIMAL
    assert np.array_equal(sol.u, p.u_des)
    assert sol.active_set == ()
    assert np.all(sol.slacks == 0.0)


def test_halfspace_projection_example():
    p = QpProblem(u_des=np.array([-1.0, 0.0, 0.0]),
                  rows=((np.array([1.0, 0.0, 0.0]), 0.0),),
                  lower=-np.ones(3), upper=np.ones(3))
    sol = solve(p)
    assert sol.status is QpStatus.OPTIMAL
    assert sol.u == pytest.approx([0.0, 0.0, 0.0], abs=1e-12)
    assert sol.active_set == (0,)


def test_feasible_u_des_returned_bit_exact():
    rng = np.random.default_rng(7)
    for _ in range(50):
        p = random_problem(rng)
        A, b = p.row_matrix()
        inside = (np.all(p.u_des >= p.lower) and np.all(p.u_des <= p.upper)
                  and (len(p.rows) == 0 or np.all(A @ p.u_des - b >= 0.0)))
        if not inside:
            continue
        sol = solve(p)
        assert np.array_equal(sol.u, p.u_des)


def test_box_clip_without_rows():
    p = QpProblem(u_des=np.array([2.0, 0.0]), rows=(),
                  lower=-np.ones(2), upper=np.ones(2))
    sol = solve(p)
    assert sol.u == pytest.approx([1.0, 0.0], abs=1e-12)
    assert sol.active_set == ()  # box faces are not constraint rows


def test_infeasible_status():
    p = QpProblem(u_des=np.zeros(2),
                  rows=((np.array([1.0, 0.0]), 5.0),),
                  lower=-np.ones(2), upper=np.ones(2))
    sol = solve(p)
    assert sol.status is QpStatus.INFEASIBLE
    assert np.all(sol.u >= p.lower) and np.all(sol.u <= p.upper)


def test_stall_raises():
    p = QpProblem(u_des=np.array([-1.0, -1.0]),
                  rows=((np.array([1.0, 0.0]), 0.0), (np.array([0.0, 1.0]), 0.0)),
                  lower=-2 * np.ones(2), upper=2 * np.ones(2))
    with pytest.raises(SolverStallError):
        solve(p, iteration_cap=1)
    assert solve(p).u == pytest.approx([0.0, 0.0], abs=1e-12)


def test_problem_validation():
    with pytest.raises(DomainError):
        QpProblem(u_des=np.zeros(9), rows=(), lower=-np.ones(9), upper=np.ones(9))
    with pytest.raises(DomainError):
        QpProblem(u_des=np.zeros(2), rows=(), lower=np.ones(2), upper=-np.ones(2))
    with pytest.raises(DomainError):
        QpProblem(u_des=np.array([np.nan, 0.0]), rows=(), lower=-np.ones(2),
                  upper=np.ones(2))
    with pytest.raises(DomainError):
        QpProblem(u_des=np.zeros(2), rows=((np.array([1.0]), 0.0),),
                  lower=-np.ones(2), upper=np.ones(2))


def test_scaling_invariance():
    rng = np.random.default_rng(11)
    c = 3.7
    for _ in range(25):
        p = random_problem(rng)
        sol = solve(p)
        scaled = QpProblem(
            u_des=c * p.u_des,
            rows=tuple((a, c * b) for a, b in p.rows),
            lower=c * p.lower,
            upper=c * p.upper,
        )
        sol_c = solve(scaled)
        assert sol_c.status == sol.status
        if sol.status is QpStatus.OPTIMAL:
            assert sol_c.u == pytest.approx(c * sol.u, abs=1e-9)


def test_determinism():
    rng = np.random.default_rng(13)
    for _ in range(20):
        p = random_problem(rng)
        a = solve(p)
        b = solve(p)
        assert a.u.tobytes() == b.u.tobytes()
        assert a.active_set == b.active_set
        assert a.iterations == b.iterations
        assert a.status == b.status


# ---------------------------------------------------------------------------
# oracle equivalence


def test_oracle_equivalence_random_problems():
    rng = np.random.default_rng(busted := 20250819)
    n_feasible = n_infeasible = 0
    for _ in range(400):
        p = random_problem(rng)
        expected = enumeration_oracle(p)
        sol = solve(p)
        if expected is None:
            assert sol.status is QpStatus.INFEASIBLE
            n_infeasible += 1
            continue
        n_feasible += 1
        assert sol.status is QpStatus.OPTIMAL
        A, b = p.row_matrix()
        if len(p.rows):
            assert np.all(A @ sol.u - b >= -1.1e-8)
        assert np.all(sol.u >= p.lower - 1.1e-8)
        assert np.all(sol.u <= p.upper + 1.1e-8)
        assert objective(sol.u, p.u_des) == pytest.approx(expected[1], abs=1e-6)
    assert n_feasible > 100 and n_infeasible > 20  # generator exercises both


def test_kkt_certificate_on_random_problems():
    """Stationarity: u - u_des lies in the cone of active row normals."""
    rng = np.random.default_rng(17)
    checked = 0
    for _ in range(120):
        p = random_problem(rng)
        sol = solve(p)
        if sol.status is not QpStatus.OPTIMAL:
            continue
        A, b = p.row_matrix()
        normals = [A[i] for i in sol.active_set]
        for j in range(p.dim):
            if abs(sol.u[j] - p.lower[j]) < 1e-9:
                e = np.zeros(p.dim)
                e[j] = 1.0
                normals.append(e)
            elif abs(sol.u[j] - p.upper[j]) < 1e-9:
                e = np.zeros(p.dim)
                e[j] = -1.0
                normals.append(e)
        grad = 2.0 * (sol.u - p.u_des)
        if not normals:
            assert np.linalg.norm(grad) < 1e-8
            checked += 1
            continue
        N = np.array(normals).T
        if np.linalg.cond(N) > 1e8:
            continue
        mu, *_ = np.linalg.lstsq(N, grad, rcond=None)
        assert np.linalg.norm(N @ mu - grad) < 1e-7 * max(1.0, np.linalg.norm(grad))
        assert np.all(mu >= -1e-6)
        checked += 1
    assert checked > 60


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_oracle_equivalence_property(seed):
    rng = np.random.default_rng(seed)
    p = random_problem(rng)
    expected = enumeration_oracle(p)
    sol = solve(p)
    if expected is None:
        assert sol.status is QpStatus.INFEASIBLE
    else:
        assert sol.status is QpStatus.OPTIMAL
        assert objective(sol.u, p.u_des) <= expected[1] + 1e-6
        assert objective(sol.u, p.u_des) >= expected[1] - 1e-6


# ---------------------------------------------------------------------------
# relaxation


def test_relaxed_on_feasible_problem_matches_solve():
    rng = np.random.default_rng(19)
    for _ in range(30):
        p = random_problem(rng)
        base = solve(p)
        if base.status is not QpStatus.OPTIMAL:
            continue
        rel = solve_relaxed(p, np.ones(len(p.rows)), np.zeros(len(p.rows), bool))
        assert rel.status is QpStatus.OPTIMAL
        assert rel.u == pytest.approx(base.u, abs=1e-7)
        assert np.all(rel.slacks == 0.0)


def test_relaxed_symmetric_contradiction():
    p = QpProblem(u_des=np.zeros(1),
                  rows=((np.array([1.0]), 1.0), (np.array([-1.0]), 1.0)),
                  lower=np.array([-2.0]), upper=np.array([2.0]))
    sol = solve_relaxed(p, np.array([1.0, 1.0]), np.array([False, False]))
    assert sol.status is QpStatus.RELAXED_OPTIMAL
    assert sol.u == pytest.approx([0.0], abs=1e-9)
    assert sol.slacks == pytest.approx([1.0, 1.0], abs=1e-8)


def test_relaxed_weight_ratio_concentrates_slack():
    # stationarity of u^2 + 100 (1-u)^2 + (1+u)^2 gives u = 198/204
    p = QpProblem(u_des=np.zeros(1),
                  rows=((np.array([1.0]), 1.0), (np.array([-1.0]), 1.0)),
                  lower=np.array([-2.0]), upper=np.array([2.0]))
    sol = solve_relaxed(p, np.array([100.0, 1.0]), np.array([False, False]))
    assert sol.status is QpStatus.RELAXED_OPTIMAL
    assert sol.u == pytest.approx([198.0 / 204.0], abs=1e-8)
    assert sol.slacks[0] == pytest.approx(1.0 - 198.0 / 204.0, abs=1e-8)
    assert sol.slacks[1] == pytest.approx(1.0 + 198.0 / 204.0, abs=1e-8)
    assert sol.slacks[0] < sol.slacks[1] / 10.0


def test_relaxed_hard_rows_stay_exact():
    p = QpProblem(u_des=np.zeros(2),
                  rows=((np.array([1.0, 0.0]), 0.5), (np.array([-1.0, 0.0]), 0.2)),
                  lower=-np.ones(2), upper=np.ones(2))
    sol = solve_relaxed(p, np.array([1.0, 1.0]), np.array([True, False]))
    assert sol.status is QpStatus.RELAXED_OPTIMAL
    assert sol.u[0] >= 0.5 - 1e-9  # hard row satisfied exactly
    assert sol.slacks[0] == 0.0
    assert sol.slacks[1] > 0.1


def test_relaxed_infeasible_hard_rows():
    p = QpProblem(u_des=np.zeros(1),
                  rows=((np.array([1.0]), 5.0),),
                  lower=np.array([-1.0]), upper=np.array([1.0]))
    sol = solve_relaxed(p, np.array([1.0]), np.array([True]))
    assert sol.status is QpStatus.INFEASIBLE


def test_relaxed_validation():
    p = QpProblem(u_des=np.zeros(1), rows=((np.array([1.0]), 0.0),),
                  lower=np.array([-1.0]), upper=np.array([1.0]))
    with pytest.raises(DomainError):
        solve_relaxed(p, np.array([0.0]), np.array([False]))
    with pytest.raises(DomainError):
        solve_relaxed(p, np.array([1.0, 1.0]), np.array([False]))


# ---------------------------------------------------------------------------
# warm start


def test_warm_start_hit_skips_iterations():
    p = QpProblem(u_des=np.array([-1.0, 0.0, 0.0]),
                  rows=((np.array([1.0, 0.0, 0.0]), 0.0),),
                  lower=-np.ones(3), upper=np.ones(3))
    cold = solve(p)
    assert cold.iterations > 0
    warm = solve(p, warm_start=cold.active_set)
    assert warm.iterations == 0
    assert warm.u == pytest.approx(cold.u, abs=1e-12)
    assert warm.active_set == cold.active_set


def test_warm_start_wrong_hint_falls_back():
    p = QpProblem(u_des=np.array([-1.0, 0.0]),
                  rows=((np.array([1.0, 0.0]), 0.0), (np.array([0.0, 1.0]), -0.5)),
                  lower=-np.ones(2), upper=np.ones(2))
    cold = solve(p)
    for hint in [(1,), (0, 1), (5,), ()]:
        warm = solve(p, warm_start=hint)
        assert warm.u == pytest.approx(cold.u, abs=1e-10)
        assert warm.status is QpStatus.OPTIMAL


def test_warm_start_rejects_sign_flipped_set():
    # active set of a DIFFERENT problem must not poison the result
    p1 = QpProblem(u_des=np.array([-1.0]), rows=((np.array([1.0]), 0.0),),
                   lower=np.array([-2.0]), upper=np.array([2.0]))
    p2 = QpProblem(u_des=np.array([1.0]), rows=((np.array([1.0]), 0.0),),
                   lower=np.array([-2.0]), upper=np.array([2.0]))
    sol1 = solve(p1)
    assert sol1.active_set == (0,)
    sol2 = solve(p2, warm_start=sol1.active_set)
    # hint claims row 0 active, but u_des = 1 already satisfies it strictly
    assert sol2.u == pytest.approx([1.0], abs=1e-12)


def test_solver_object_reuses_active_set():
    solver = QpSolver()
    p = QpProblem(u_des=np.array([-1.0, 0.2]),
                  rows=((np.array([1.0, 0.0]), 0.0),),
                  lower=-np.ones(2), upper=np.ones(2))
    first = solver.solve(p)
    assert first.iterations > 0
    second = solver.solve(p)
    assert second.iterations == 0
    assert second.u == pytest.approx(first.u, abs=1e-12)
    solver.reset()
    third = solver.solve(p)
    assert third.iterations == first.iterations


def test_random_warm_start_always_correct():
    rng = np.random.default_rng(23)
    for _ in range(60):
        p = random_problem(rng)
        cold = solve(p)
        hint = tuple(int(i) for i in rng.choice(max(len(p.rows), 1),
                                                size=min(2, max(len(p.rows), 1)),
                                                replace=False)) if p.rows else ()
        warm = solve(p, warm_start=hint)
        assert warm.status == cold.status
        if cold.status is QpStatus.OPTIMAL:
            assert objective(warm.u, p.u_des) == pytest.approx(
                objective(cold.u, p.u_des), abs=1e-8)
