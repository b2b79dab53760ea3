# tests/test_conic.py
import itertools

import numpy as np
import pytest
from dataclasses import replace

import cvxpy as cp
from hypothesis import given, settings, strategies as st

from heralded_diqkd.core import conic
from heralded_diqkd.core.conic import (
    INFEASIBLE, NUMERICAL_FAILURE, OPTIMAL, ConicSolution, LinearConstraint, LpProblem, SdpProblem,
    SolverError, SolverTolerances,
)
from heralded_diqkd.utils.checks import OutputPathError


def _vertex_optimum(c, A, b):
    """Brute-force LP optimum over basic feasible solutions."""
    m, n = A.shape
    best = np.inf
    for basis in itertools.combinations(range(n), m):
        B = A[:, basis]
        if abs(np.linalg.det(B)) < 1e-10:
            continue
        x_b = np.linalg.solve(B, b)
        if np.all(x_b >= -1e-10):
            best = min(best, float(c[list(basis)] @ x_b))
    return best


def _max_eigenvalue_sdp(C):
    n = C.shape[0]
    objective = tuple((0, i, j, float(C[i, j])) for i in range(n) for j in range(n) if C[i, j] != 0)
    trace = LinearConstraint(tuple((0, i, i, 1.0) for i in range(n)), 1.0)
    return SdpProblem((n,), objective, (trace,))


def _dense_entries(M, scale=1.0):
    n = M.shape[0]
    return tuple((0, i, j, scale * float(M[i, j])) for i in range(n) for j in range(n) if M[i, j] != 0)


def _random_feasible_sdp(rng, n, objective_scale=1.0, rhs_scale=1.0):
    """Trace-one SDP with two random equalities, feasible at a full-rank point X0 it returns."""
    M = rng.normal(size=(n, n))
    X0 = M @ M.T + 0.1 * np.eye(n)
    X0 /= np.trace(X0)
    constraints = [LinearConstraint(tuple((0, i, i, 1.0) for i in range(n)), rhs_scale)]
    for _ in range(2):
        G = rng.normal(size=(n, n))
        A = (G + G.T) / 2.0
        constraints.append(LinearConstraint(_dense_entries(A), rhs_scale * float(np.sum(A * X0))))
    G = rng.normal(size=(n, n))
    C = (G + G.T) / 2.0
    return SdpProblem((n,), _dense_entries(C, objective_scale), tuple(constraints)), C, X0


# --- Tests for solve_lp ---
@settings(max_examples=100)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_lp_matches_vertex_enumeration(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(2, 5))
    b = A @ rng.uniform(0.1, 1.0, size=5)
    c = rng.uniform(0.1, 2.0, size=5)
    solution = conic.solve_lp(LpProblem(c, A, b))
    assert solution.status == OPTIMAL
    assert solution.primal_objective == pytest.approx(_vertex_optimum(c, A, b), rel=1e-6, abs=1e-7)
    assert solution.gap < 1e-6
    assert solution.primal_residual < 1e-7


def test_lp_presolve_drops_duplicate_rows():
    A = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 1.0]])
    b = np.array([1.0, 1.0, 1.0])
    c = np.array([1.0, 2.0, 1.0])
    solution = conic.solve_lp(LpProblem(c, A, b))
    assert solution.status == OPTIMAL
    assert solution.notes['presolve_rows'] == 1
    assert solution.dual.shape == (3,)
    assert solution.primal_objective == pytest.approx(solution.dual_objective, abs=1e-8)


def test_lp_inconsistent_rows_are_infeasible():
    A = np.array([[1.0, 1.0], [1.0, 1.0]])
    b = np.array([1.0, 2.0])
    solution = conic.solve_lp(LpProblem(np.ones(2), A, b))
    assert solution.status == INFEASIBLE
    with pytest.raises(SolverError) as excinfo:
        solution.require_optimal('test LP')
    assert excinfo.value.status == INFEASIBLE


def test_lp_shape_mismatch_raises():
    with pytest.raises(ValueError):
        LpProblem(np.ones(3), np.ones((2, 2)), np.ones(2))


# --- Tests for solve_sdp ---
@settings(max_examples=100)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(2, 4))
def test_sdp_max_eigenvalue_oracle(seed, n):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n))
    C = (M + M.T) / 2.0
    solution = conic.solve_sdp(_max_eigenvalue_sdp(C))
    expected = float(np.linalg.eigvalsh(C).max())
    assert solution.status == OPTIMAL
    assert solution.primal_objective == pytest.approx(expected, abs=1e-6)
    assert solution.dual_objective == pytest.approx(expected, abs=1e-6)
    assert solution.gap < 1e-6


def test_sdp_with_nonnegative_block():
    # max x_0 - X_00 subject to x_0 + X_00 = 1, X_11 = 1
    problem = SdpProblem(
        (2,),
        ((1, 0, 0, 1.0), (0, 0, 0, -1.0)),
        (LinearConstraint(((1, 0, 0, 1.0), (0, 0, 0, 1.0)), 1.0),
         LinearConstraint(((0, 1, 1, 1.0),), 1.0)),
        nonneg_size=1,
    )
    solution = conic.solve_sdp(problem)
    assert solution.status == OPTIMAL
    assert solution.primal_objective == pytest.approx(1.0, abs=1e-6)
    assert solution.primal[-1][0] == pytest.approx(1.0, abs=1e-6)


def test_sdp_infeasible_is_reported():
    # X_00 = -1 cannot hold for PSD X
    problem = SdpProblem((2,), ((0, 0, 0, 1.0),), (LinearConstraint(((0, 0, 0, 1.0),), -1.0),))
    solution = conic.solve_sdp(problem)
    assert solution.status == INFEASIBLE


def test_sdp_iteration_cap_is_respected(mocker):
    spy = mocker.spy(conic.cp.Problem, 'solve')
    conic.solve_sdp(_max_eigenvalue_sdp(np.eye(2)), SolverTolerances(max_iter=50))
    assert spy.call_args.kwargs['max_iter'] == 50


@settings(max_examples=25)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(2, 3),
       alpha=st.floats(0.2, 5.0), beta=st.floats(0.2, 5.0))
def test_sdp_random_instance_duality_and_scaling(seed, n, alpha, beta):
    problem, C, X0 = _random_feasible_sdp(np.random.default_rng(seed), n)
    scaled, _, _ = _random_feasible_sdp(np.random.default_rng(seed), n, alpha, beta)
    base = conic.solve_sdp(problem)
    assert base.status == OPTIMAL
    assert base.primal_residual < 1e-6
    assert base.dual_residual < 1e-6
    # weak duality against the known feasible point and the returned primal
    assert float(np.sum(C * X0)) <= base.dual_objective + 1e-6
    assert base.primal_objective <= base.dual_objective + 1e-6
    result = conic.solve_sdp(scaled)
    assert result.status == OPTIMAL
    assert result.primal_objective == pytest.approx(alpha * beta * base.primal_objective,
                                                    abs=1e-5 * (1.0 + alpha * beta))


def test_inaccurate_sdp_within_tolerances_is_optimal(mocker):
    mocker.patch.object(conic.cp.Problem, 'status', new_callable=mocker.PropertyMock,
                        return_value=cp.OPTIMAL_INACCURATE)
    solution = conic.solve_sdp(_max_eigenvalue_sdp(np.diag([1.0, 2.0])))
    assert solution.status == OPTIMAL
    assert solution.primal_objective == pytest.approx(2.0, abs=1e-6)


def test_inaccurate_sdp_outside_tolerances_is_a_numerical_failure(mocker):
    mocker.patch.object(conic.cp.Problem, 'status', new_callable=mocker.PropertyMock,
                        return_value=cp.OPTIMAL_INACCURATE)
    mocker.patch.object(conic, '_meets_tolerances', return_value=False)
    solution = conic.solve_sdp(_max_eigenvalue_sdp(np.diag([1.0, 2.0])))
    assert solution.status == NUMERICAL_FAILURE
    with pytest.raises(SolverError) as excinfo:
        solution.require_optimal('guessing SDP')
    assert excinfo.value.status == NUMERICAL_FAILURE


def test_meets_tolerances_checks_residuals_and_gap():
    accurate = ConicSolution(OPTIMAL, 1.0, 1.0 + 1e-10, (), np.zeros(1), 1e-10, 1e-10)
    tolerances = SolverTolerances()
    assert conic._meets_tolerances(accurate, tolerances)
    assert not conic._meets_tolerances(replace(accurate, primal_residual=1e-5), tolerances)
    assert not conic._meets_tolerances(replace(accurate, dual_residual=1e-5), tolerances)
    assert not conic._meets_tolerances(replace(accurate, dual_objective=1.001), tolerances)
    assert conic._meets_tolerances(replace(accurate, primal_residual=2e-8), tolerances, scale=2.0)
    assert not conic._meets_tolerances(replace(accurate, primal_residual=2e-8), tolerances)


# --- Tests for dump_problem ---
def test_dump_problem_lists_triplets(tmp_path):
    conic.dump_problem(_max_eigenvalue_sdp(np.diag([1.0, 2.0])), 'debug/sdp.txt', str(tmp_path))
    path = tmp_path / 'debug' / 'sdp.txt'
    assert not (tmp_path / 'debug' / 'sdp.txt.part').exists()
    text = path.read_text()
    assert text.startswith('SDP max blocks=2')
    assert 'C 0 1 1 2' in text


def test_dump_problem_rejects_other_objects(tmp_path):
    with pytest.raises(TypeError):
        conic.dump_problem(object(), 'x.txt', str(tmp_path))


def test_dump_problem_stays_inside_the_output_directory(tmp_path):
    problem = LpProblem(np.ones(2), np.ones((1, 2)), np.ones(1))
    with pytest.raises(OutputPathError):
        conic.dump_problem(problem, '../escape.txt', str(tmp_path / 'out'))
    assert not (tmp_path / 'escape.txt').exists()
