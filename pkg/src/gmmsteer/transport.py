"""Discrete optimal transport over a cost matrix, and the mixture-level
Wasserstein distance built on pairwise Gaussian costs."""

from dataclasses import dataclass

import numpy as np
import scipy.optimize
import scipy.sparse

from .exceptions import DimensionMismatch, InfeasibleMarginals, SolverFailure
from .gaussians import w2_gaussian

__all__ = ["TransportPlan", "solve_transport", "gmm_wasserstein"]


@dataclass(frozen=True)
class TransportPlan:
    """Optimal coupling matrix with its objective value."""

    plan: np.ndarray
    cost: float


def solve_transport(C, p, q):
    """Minimize sum_ij M_ij C_ij over couplings M with marginals (p, q).

    Solved exactly as a transportation LP with the HiGHS dual simplex, which
    returns a basic (vertex) optimal plan with at most N+M-1 nonzeros up to
    degeneracy, deterministically.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    p = np.asarray(p, dtype=float).reshape(-1)
    q = np.asarray(q, dtype=float).reshape(-1)
    N, M = C.shape
    if p.size != N or q.size != M:
        raise DimensionMismatch(f"cost is {N}x{M} but marginals have sizes {p.size}, {q.size}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix must be finite")
    if abs(p.sum() - q.sum()) > 1e-8:
        raise InfeasibleMarginals(f"total masses differ: {p.sum()} vs {q.sum()}")
    for name, vec in (("p", p), ("q", q)):
        if np.any(vec < -1e-10) or abs(vec.sum() - 1.0) > 1e-10:
            raise ValueError(f"marginal {name} is not on the probability simplex")

    # Row-sum and column-sum equality constraints over vec(M), row-major.
    rows, cols, vals = [], [], []
    for i in range(N):
        for j in range(M):
            k = i * M + j
            rows += [i, N + j]
            cols += [k, k]
            vals += [1.0, 1.0]
    A_eq = scipy.sparse.coo_matrix((vals, (rows, cols)), shape=(N + M, N * M))
    b_eq = np.concatenate([p, q])
    res = scipy.optimize.linprog(
        C.reshape(-1), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds"
    )
    if not res.success:
        raise SolverFailure(f"transport LP failed: {res.message}", status=res.status)
    plan = np.clip(res.x.reshape(N, M), 0.0, None)
    return TransportPlan(plan=plan, cost=float(np.sum(plan * C)))


def gmm_wasserstein(a, b):
    """Squared mixture-Wasserstein distance between two GMMs.

    Ground cost is the pairwise squared Gaussian Wasserstein distance and the
    marginals are the mixture weights.  Returns (squared distance, plan).
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"mixtures live in different dimensions: {a.dim} vs {b.dim}")
    C = np.empty((a.size, b.size))
    for i, ca in enumerate(a.components):
        for j, cb in enumerate(b.components):
            C[i, j] = w2_gaussian(ca, cb)
    plan = solve_transport(C, a.weights, b.weights)
    return plan.cost, plan
