"""Thin interface for linear-objective programs over affine equalities,
nonnegativity, and PSD cone constraints.

All the semidefinite and linear sub-problems downstream are phrased through
this layer, which compiles them with cvxpy and solves with an interior-point
conic solver (Clarabel).  The layer enforces the contract that objective and
constraints are affine in the declared blocks; quadratic terms must be
Schur-complemented into PSD blocks by the caller.
"""

import json
from dataclasses import dataclass, field
from enum import Enum

import cvxpy as cp
import numpy as np

from .exceptions import SolverFailure

__all__ = ["ConicProgram", "ConicSolution", "ConicStatus", "solve_conic"]


class ConicStatus(Enum):
    Optimal = "optimal"
    Infeasible = "infeasible"
    Unbounded = "unbounded"
    NumericalTrouble = "numerical_trouble"


_STATUS_MAP = {
    cp.OPTIMAL: ConicStatus.Optimal,
    cp.INFEASIBLE: ConicStatus.Infeasible,
    cp.UNBOUNDED: ConicStatus.Unbounded,
}


@dataclass
class ConicSolution:
    status: ConicStatus
    values: dict
    objective_value: float

    def __getitem__(self, name):
        return self.values[name]


@dataclass
class ConicProgram:
    """Linear objective + affine equality / nonnegativity / PSD constraints.

    Variable blocks are declared through scalar/vector/symmetric/matrix and
    referenced by the cvxpy expression handles they return.
    """

    _vars: dict = field(default_factory=dict)
    _params: dict = field(default_factory=dict)
    _objective: object = None
    _equalities: list = field(default_factory=list)
    _psd: list = field(default_factory=list)
    _nonneg: list = field(default_factory=list)
    _compiled: object = None

    # -- variable declaration -------------------------------------------------
    def scalar(self, name):
        return self._register(name, cp.Variable(name=name))

    def vector(self, name, n):
        return self._register(name, cp.Variable(n, name=name))

    def symmetric(self, name, n):
        return self._register(name, cp.Variable((n, n), symmetric=True, name=name))

    def matrix(self, name, rows, cols):
        return self._register(name, cp.Variable((rows, cols), name=name))

    def parameter(self, name, shape=None):
        """Constant placeholder whose value may change between solves.

        Lets iterative callers (the block-coordinate solvers) reuse one
        compiled program instead of re-canonicalizing every iteration.
        """
        par = cp.Parameter(shape) if shape is not None else cp.Parameter()
        self._params[name] = par
        return par

    def set_parameter(self, name, value):
        self._params[name].value = value

    def _register(self, name, var):
        if name in self._vars:
            raise ValueError(f"variable block {name!r} already declared")
        self._vars[name] = var
        return var

    # -- program assembly -----------------------------------------------------
    def minimize(self, expr):
        expr = cp.Constant(expr) if np.isscalar(expr) else expr
        if not expr.is_affine():
            raise ValueError("objective must be affine in the declared blocks")
        self._objective = expr

    def add_equality(self, expr):
        """Affine expression constrained to zero (elementwise)."""
        if not expr.is_affine():
            raise ValueError("equality constraints must be affine")
        self._equalities.append(expr == 0)

    def add_psd(self, expr):
        """Affine symmetric-matrix expression constrained to the PSD cone."""
        if not expr.is_affine():
            raise ValueError("PSD constraints must be affine")
        self._psd.append(expr >> 0)

    def add_nonneg(self, expr):
        if not expr.is_affine():
            raise ValueError("nonnegativity constraints must be affine")
        self._nonneg.append(expr >= 0)

    def _problem(self):
        if self._objective is None:
            raise ValueError("no objective set")
        if self._compiled is None:
            self._compiled = cp.Problem(
                cp.Minimize(self._objective), self._equalities + self._psd + self._nonneg
            )
        return self._compiled

    def dump(self, path):
        """Debug export of the compiled cone program (c, A, b, cone dims)."""
        data, _, _ = self._problem().get_problem_data(cp.SCS)
        A = data["A"].tocoo()
        payload = {
            "c": data["c"].tolist(),
            "b": data["b"].tolist(),
            "A": {
                "shape": list(A.shape),
                "rows": A.row.tolist(),
                "cols": A.col.tolist(),
                "vals": A.data.tolist(),
            },
            "cones": {
                "zero": int(data["dims"].zero),
                "nonneg": int(data["dims"].nonneg),
                "psd": [int(s) for s in data["dims"].psd],
            },
        }
        with open(path, "w") as fh:
            json.dump(payload, fh)


def solve_conic(program, tol=1e-8):
    """Solve and return a ConicSolution; never raises on solver divergence."""
    problem = program._problem()
    try:
        problem.solve(
            solver=cp.CLARABEL,
            tol_gap_abs=tol,
            tol_gap_rel=tol,
            tol_feas=tol,
        )
    except Exception:  # noqa: BLE001 - solver divergence maps to a status, never a crash
        return ConicSolution(ConicStatus.NumericalTrouble, {}, float("nan"))
    status = _STATUS_MAP.get(problem.status, ConicStatus.NumericalTrouble)
    values = {}
    if status is ConicStatus.Optimal:
        for name, var in program._vars.items():
            val = var.value
            values[name] = float(val) if np.isscalar(val) or val.ndim == 0 else np.asarray(val)
    obj = problem.value if problem.value is not None else float("nan")
    return ConicSolution(status, values, float(obj))


def require_optimal(solution, context):
    """Raise SolverFailure unless the solve came back Optimal."""
    if solution.status is not ConicStatus.Optimal:
        raise SolverFailure(
            f"{context}: solver returned {solution.status.value}", status=solution.status.value
        )
    return solution
