# heralded_diqkd/core/conic.py
"""
Linear and semidefinite programs with certificates.

LPs go to HiGHS through scipy.optimize.linprog after a QR presolve that removes
linearly dependent equality rows. SDPs go to the Clarabel primal-dual interior-point
solver through cvxpy. Both return primal values, dual values, residuals and the
duality gap so callers can check what they got.

Sparse SDP coefficients are triplets (block, row, col, value); a triplet contributes
value * X_block[row, col] to the linear form (X is symmetric, so (i, j) and (j, i) name
the same variable). The nonnegative orthant block, if any, has index
len(block_sizes) and uses col = 0.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.optimize import linprog

import cvxpy as cp

from heralded_diqkd.utils.export import write_text

logger = logging.getLogger(__name__)

SparseEntry = Tuple[int, int, int, float]

OPTIMAL = 'Optimal'
INFEASIBLE = 'Infeasible'
UNBOUNDED = 'Unbounded'
ITER_LIMIT = 'IterLimit'
NUMERICAL_FAILURE = 'NumericalFailure'


class SolverError(RuntimeError):
    """Raised by callers that need an Optimal solution and did not get one."""
    def __init__(self, message: str, status: str = None, solution: 'ConicSolution' = None):
        super().__init__(message)
        self.status = status
        self.solution = solution


@dataclass(frozen=True)
class SolverTolerances:
    feasibility: float = 1e-8
    gap: float = 1e-8
    rank: float = 1e-10
    max_iter: int = 200
    solver: str = 'CLARABEL'


@dataclass(frozen=True, eq=False)
class LpProblem:
    """min c.x subject to A x = b, x >= 0."""
    c: np.ndarray
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).ravel()
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.asarray(self.b, dtype=float).ravel()
        if A.shape != (b.size, c.size):
            raise ValueError(f"LP shapes do not match: A {A.shape}, b {b.size}, c {c.size}")
        object.__setattr__(self, 'c', c)
        object.__setattr__(self, 'A', A)
        object.__setattr__(self, 'b', b)


@dataclass(frozen=True)
class LinearConstraint:
    entries: Tuple[SparseEntry, ...]
    rhs: float


@dataclass(frozen=True, eq=False)
class SdpProblem:
    """max sum <C_k, X_k> + c.x subject to linear equalities, X_k PSD, x >= 0."""
    block_sizes: Tuple[int, ...]
    objective: Tuple[SparseEntry, ...]
    constraints: Tuple[LinearConstraint, ...]
    nonneg_size: int = 0

    @property
    def nonneg_block(self) -> int:
        return len(self.block_sizes)


@dataclass(frozen=True, eq=False)
class ConicSolution:
    status: str
    primal_objective: float
    dual_objective: float
    primal: Tuple[np.ndarray, ...]
    dual: np.ndarray
    primal_residual: float
    dual_residual: float
    iterations: int = 0
    notes: Dict[str, float] = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return abs(self.primal_objective - self.dual_objective)

    def require_optimal(self, what: str = 'problem') -> 'ConicSolution':
        if self.status != OPTIMAL:
            raise SolverError(f"{what} ended with status {self.status}", self.status, self)
        return self


# --- LP ---

_LINPROG_STATUS = {0: OPTIMAL, 1: ITER_LIMIT, 2: INFEASIBLE, 3: UNBOUNDED, 4: NUMERICAL_FAILURE}


def _independent_rows(A: np.ndarray, b: np.ndarray, tol: float) -> Tuple[np.ndarray, bool]:
    """Row indices of a maximal independent subset and whether the dropped rows are consistent."""
    if A.shape[0] == 0:
        return np.arange(0), True
    augmented = np.column_stack([A, b])
    _, r, pivots = scipy.linalg.qr(A.T, mode='economic', pivoting=True)
    diagonal = np.abs(np.diag(r))
    scale = diagonal[0] if diagonal.size and diagonal[0] > 0 else 1.0
    rank = int(np.sum(diagonal > tol * scale))
    keep = np.sort(pivots[:rank])
    if rank == A.shape[0]:
        return keep, True
    _, r_aug, _ = scipy.linalg.qr(augmented.T, mode='economic', pivoting=True)
    diag_aug = np.abs(np.diag(r_aug))
    scale_aug = diag_aug[0] if diag_aug.size and diag_aug[0] > 0 else 1.0
    return keep, int(np.sum(diag_aug > tol * scale_aug)) == rank


def solve_lp(problem: LpProblem, tolerances: SolverTolerances = SolverTolerances()) -> ConicSolution:
    """
    Solves min c.x s.t. A x = b, x >= 0 with the HiGHS dual simplex.

    Dual values are reported for every original row; rows removed by presolve get 0.
    """
    A, b, c = problem.A, problem.b, problem.c
    keep, consistent = _independent_rows(A, b, tolerances.rank)
    dropped = A.shape[0] - keep.size
    if dropped:
        logger.debug("LP presolve removed %d dependent rows", dropped)
    if not consistent:
        return ConicSolution(INFEASIBLE, np.nan, np.nan, (np.full(c.size, np.nan),),
                             np.zeros(A.shape[0]), np.inf, np.inf, notes={'presolve_rows': dropped})

    result = linprog(
        c, A_eq=A[keep] if keep.size else None, b_eq=b[keep] if keep.size else None,
        bounds=(0, None), method='highs-ds',
        options={'primal_feasibility_tolerance': max(tolerances.feasibility, 1e-10),
                 'dual_feasibility_tolerance': max(tolerances.feasibility, 1e-10)},
    )
    status = _LINPROG_STATUS.get(result.status, NUMERICAL_FAILURE)
    duals = np.zeros(A.shape[0])
    if status != OPTIMAL:
        logger.debug("LP ended with status %s: %s", status, result.message)
        return ConicSolution(status, np.nan, np.nan, (np.full(c.size, np.nan),), duals,
                             np.inf, np.inf, int(getattr(result, 'nit', 0)),
                             notes={'presolve_rows': dropped})

    x = np.asarray(result.x)
    if keep.size:
        duals[keep] = result.eqlin.marginals
    primal_residual = float(np.max(np.abs(A @ x - b), initial=0.0)) if A.size else 0.0
    reduced = c - A.T @ duals
    dual_residual = float(max(0.0, -reduced.min(initial=0.0)))
    return ConicSolution(
        status=OPTIMAL,
        primal_objective=float(c @ x),
        dual_objective=float(b @ duals),
        primal=(x,),
        dual=duals,
        primal_residual=primal_residual,
        dual_residual=dual_residual,
        iterations=int(getattr(result, 'nit', 0)),
        notes={'presolve_rows': dropped},
    )


# --- SDP ---

def _block_matrix(entries_by_row: Sequence[Sequence[SparseEntry]],
                  block: int, size: int, ncols_nonneg: bool = False) -> sp.csr_matrix:
    rows, cols, values = [], [], []
    for row, entries in enumerate(entries_by_row):
        for b, i, j, value in entries:
            if b != block:
                continue
            rows.append(row)
            # column-major vectorization
            cols.append(i if ncols_nonneg else j * size + i)
            values.append(value)
    width = size if ncols_nonneg else size * size
    return sp.csr_matrix((values, (rows, cols)), shape=(len(entries_by_row), width))


_CVXPY_STATUS = {
    cp.OPTIMAL: OPTIMAL,
    cp.OPTIMAL_INACCURATE: NUMERICAL_FAILURE,
    cp.INFEASIBLE: INFEASIBLE,
    cp.INFEASIBLE_INACCURATE: INFEASIBLE,
    cp.UNBOUNDED: UNBOUNDED,
    cp.UNBOUNDED_INACCURATE: UNBOUNDED,
    cp.USER_LIMIT: ITER_LIMIT,
}


def _meets_tolerances(solution: ConicSolution, tolerances: SolverTolerances, scale: float = 0.0) -> bool:
    """Residuals and duality gap within the configured tolerances, relative to 1 + scale."""
    factor = 1.0 + abs(scale)
    return (solution.primal_residual <= tolerances.feasibility * factor
            and solution.dual_residual <= tolerances.feasibility * factor
            and solution.gap <= tolerances.gap * (1.0 + abs(solution.primal_objective)))


def solve_sdp(problem: SdpProblem, tolerances: SolverTolerances = SolverTolerances()) -> ConicSolution:
    """
    Solves the block SDP with an interior-point method (cvxpy + Clarabel, iteration cap
    from `tolerances`). Dual values are the multipliers of the equality constraints with
    the sign that makes b.y an upper bound on the primal objective.
    """
    sizes = problem.block_sizes
    rows = [c.entries for c in problem.constraints]
    rhs = np.array([c.rhs for c in problem.constraints], dtype=float)

    blocks = [cp.Variable((n, n), symmetric=True) for n in sizes]
    nonneg = cp.Variable(problem.nonneg_size, nonneg=True) if problem.nonneg_size else None

    lhs = cp.Constant(np.zeros(len(rows)))
    objective = cp.Constant(0.0)
    for k, (n, X) in enumerate(zip(sizes, blocks)):
        A_k = _block_matrix(rows, k, n)
        c_k = _block_matrix([problem.objective], k, n)
        if A_k.nnz:
            lhs = lhs + A_k @ cp.vec(X, order='F')
        if c_k.nnz:
            objective = objective + c_k @ cp.vec(X, order='F')
    if nonneg is not None:
        A_x = _block_matrix(rows, problem.nonneg_block, problem.nonneg_size, True)
        c_x = _block_matrix([problem.objective], problem.nonneg_block, problem.nonneg_size, True)
        if A_x.nnz:
            lhs = lhs + A_x @ nonneg
        if c_x.nnz:
            objective = objective + c_x @ nonneg

    equality = lhs == rhs if rows else None
    constraints = ([equality] if rows else []) + [X >> 0 for X in blocks]
    cvx_problem = cp.Problem(cp.Maximize(cp.sum(objective)), constraints)

    options = {}
    if tolerances.solver == 'CLARABEL':
        options = {'max_iter': tolerances.max_iter, 'tol_gap_abs': tolerances.gap,
                   'tol_gap_rel': tolerances.gap, 'tol_feas': tolerances.feasibility}
    try:
        cvx_problem.solve(solver=tolerances.solver, **options)
    except cp.error.SolverError as e:
        logger.warning("SDP solver failed: %s", e)
        return ConicSolution(NUMERICAL_FAILURE, np.nan, np.nan, tuple(), np.zeros(len(rows)),
                             np.inf, np.inf)

    status = _CVXPY_STATUS.get(cvx_problem.status, NUMERICAL_FAILURE)
    stats = cvx_problem.solver_stats
    iterations = int(stats.num_iters) if stats is not None and stats.num_iters is not None else 0
    logger.debug("SDP %s blocks=%s constraints=%d status=%s iterations=%d",
                 tolerances.solver, sizes, len(rows), cvx_problem.status, iterations)
    inaccurate = cvx_problem.status == cp.OPTIMAL_INACCURATE
    if status != OPTIMAL and not inaccurate:
        return ConicSolution(status, np.nan, np.nan, tuple(), np.zeros(len(rows)),
                             np.inf, np.inf, iterations)

    primal = tuple(np.array(X.value) for X in blocks)
    if nonneg is not None:
        primal = primal + (np.array(nonneg.value),)
    y = np.atleast_1d(np.asarray(equality.dual_value, dtype=float)) if rows else np.zeros(0)
    value = float(cvx_problem.value)
    if abs(rhs @ -y - value) < abs(rhs @ y - value):
        y = -y

    residual_vector = np.zeros(len(rows))
    for k, X in enumerate(primal[:len(sizes)]):
        A_k = _block_matrix(rows, k, sizes[k])
        residual_vector += A_k @ X.ravel(order='F')
    if nonneg is not None:
        residual_vector += _block_matrix(rows, problem.nonneg_block,
                                         problem.nonneg_size, True) @ primal[-1]
    primal_residual = float(np.max(np.abs(residual_vector - rhs), initial=0.0))
    for X in primal[:len(sizes)]:
        primal_residual = max(primal_residual, -float(np.linalg.eigvalsh(X).min()))

    dual_residual = 0.0
    for k, n in enumerate(sizes):
        A_k = _block_matrix(rows, k, n)
        c_k = _block_matrix([problem.objective], k, n)
        slack = (A_k.T @ y - c_k.T.toarray().ravel()).reshape((n, n), order='F')
        slack = (slack + slack.T) / 2.0
        dual_residual = max(dual_residual, max(0.0, -float(np.linalg.eigvalsh(slack).min())))

    solution = ConicSolution(
        status=OPTIMAL,
        primal_objective=value,
        dual_objective=float(rhs @ y),
        primal=primal,
        dual=y,
        primal_residual=primal_residual,
        dual_residual=dual_residual,
        iterations=iterations,
    )
    if inaccurate:
        scale = float(np.max(np.abs(rhs), initial=0.0))
        if not _meets_tolerances(solution, tolerances, scale):
            logger.warning("SDP solved to reduced accuracy: residuals %.2e/%.2e, gap %.2e",
                           solution.primal_residual, solution.dual_residual, solution.gap)
            return replace(solution, status=NUMERICAL_FAILURE)
        logger.debug("SDP reported reduced accuracy but meets the tolerances")
    return solution


# --- Debug dump ---

def dump_problem(problem, path: str, root: str) -> str:
    """Writes an LP or SDP as a plain-text sparse triplet listing inside `root`; returns the absolute path."""
    lines: List[str] = []
    if isinstance(problem, LpProblem):
        lines.append(f"LP min rows={problem.A.shape[0]} cols={problem.A.shape[1]}")
        lines.extend(f"c {j} {v:.17g}" for j, v in enumerate(problem.c) if v != 0.0)
        rows, cols = np.nonzero(problem.A)
        lines.extend(f"A {i} {j} {problem.A[i, j]:.17g}" for i, j in zip(rows, cols))
        lines.extend(f"b {i} {v:.17g}" for i, v in enumerate(problem.b))
    elif isinstance(problem, SdpProblem):
        lines.append(f"SDP max blocks={' '.join(map(str, problem.block_sizes))} "
                     f"nonneg={problem.nonneg_size} constraints={len(problem.constraints)}")
        lines.extend(f"C {b} {i} {j} {v:.17g}" for b, i, j, v in problem.objective)
        for row, constraint in enumerate(problem.constraints):
            lines.extend(f"A {row} {b} {i} {j} {v:.17g}" for b, i, j, v in constraint.entries)
            lines.append(f"b {row} {constraint.rhs:.17g}")
    else:
        raise TypeError(f"Cannot dump {type(problem).__name__}")
    return write_text(path, '\n'.join(lines) + '\n', root)
