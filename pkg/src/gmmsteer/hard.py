"""Exact mixture steering: pairwise steering costs + a transportation LP.

Each (source i, target j) pair gets the closed-form optimal mean/covariance
steering blocks and their combined cost C_{i,j}; the optimal coupling solves
the transportation LP with the mixture weights as marginals, and the policy
selection weights are the coupling rows normalized by the source weights.
"""

import numpy as np

from .covariance import build_thetas, cov_steer, mean_steer
from .lti import build_operators
from .policy import GmmPolicy
from .transport import solve_transport

__all__ = ["build_cost_matrix", "solve_hard"]


def build_cost_matrix(ops, w, initial, desired, thetas=None):
    """Pairwise optimal steering costs and their policy blocks.

    Returns (C, blocks) where C[i, j] is the optimal mean+covariance steering
    cost from source component i to target component j and blocks[(i, j)] is
    the corresponding (Ubar, L) pair.
    """
    if thetas is None:
        thetas = build_thetas(ops, w)
    r, t = initial.size, desired.size
    C = np.empty((r, t))
    blocks = {}
    for i in range(r):
        mu_i = initial.components[i].mean
        S_i = initial.components[i].cov
        for j in range(t):
            ms = mean_steer(ops, w, mu_i, desired.components[j].mean, thetas)
            cs = cov_steer(ops, w, S_i, desired.components[j].cov, thetas)
            C[i, j] = ms.cost + cs.cost
            blocks[(i, j)] = (ms.Ubar, cs.L)
    return C, blocks


def solve_hard(sys, w, initial, desired):
    """Steer the initial mixture exactly onto the desired one.

    Returns (policy, optimal value).  Source components with zero weight are
    dropped before the LP (their selection rows are refilled uniformly, since
    the row normalization is undefined there) and the terminal prediction of
    the returned policy reproduces the desired mixture exactly.
    """
    ops = build_operators(sys)
    thetas = build_thetas(ops, w)
    C, blocks = build_cost_matrix(ops, w, initial, desired, thetas)
    r, t = C.shape
    p0 = initial.weights
    pd = desired.weights

    live = p0 > 0.0
    plan = solve_transport(C[live], p0[live] / p0[live].sum(), pd)
    lam = np.full((r, t), 1.0 / t)
    lam[live] = plan.plan / p0[live, None]
    value = float(np.sum(plan.plan * C[live]))

    Ubar = {(i, j): blocks[(i, j)][0] for i in range(r) for j in range(t)}
    L = {(i, j): blocks[(i, j)][1] for i in range(r) for j in range(t)}
    policy = GmmPolicy(
        source=initial, lam=lam, Ubar=Ubar, L=L, horizon=sys.N, n=sys.n, m=sys.m
    )
    return policy, value
