from fractions import Fraction
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_gmm
from gmmsteer.exceptions import InfeasibleMarginals
from gmmsteer.gaussians import Gaussian, Gmm, w2_gaussian
from gmmsteer.transport import gmm_wasserstein, solve_transport


def vertex_enumeration_optimum(C, p, q):
    """Exhaustive search over basic solutions of the transportation polytope.

    Bases are spanning trees of the complete bipartite graph; each tree pins
    the plan uniquely, and feasible (nonnegative) ones are vertices.
    """
    N, M = C.shape
    cells = [(i, j) for i in range(N) for j in range(M)]
    best = np.inf
    for basis in combinations(cells, N + M - 1):
        # solve the flow on the candidate tree by elimination
        A = np.zeros((N + M, len(basis)))
        for col, (i, j) in enumerate(basis):
            A[i, col] = 1.0
            A[N + j, col] = 1.0
        b = np.concatenate([p, q])
        sol, *_ = np.linalg.lstsq(A, b, rcond=None)
        if np.abs(A @ sol - b).max() > 1e-9 or sol.min() < -1e-12:
            continue
        best = min(best, sum(C[i, j] * v for (i, j), v in zip(basis, sol)))
    return best


def test_diagonal_plan_zero_cost():
    p = np.array([0.2, 0.3, 0.5])
    C = np.ones((3, 3)) - np.eye(3)
    plan = solve_transport(C, p, p)
    assert plan.cost == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(plan.plan, np.diag(p), atol=1e-10)


def test_two_by_two_identity_coupling():
    C = np.array([[0.0, 1.0], [1.0, 0.0]])
    plan = solve_transport(C, [0.5, 0.5], [0.5, 0.5])
    assert plan.cost == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(plan.plan, 0.5 * np.eye(2), atol=1e-10)


FIXED_CORPUS = [
    # (shape, cost seed, p fractions, q fractions)
    ((2, 2), 0, (Fraction(1, 3), Fraction(2, 3)), (Fraction(1, 2), Fraction(1, 2))),
    ((2, 2), 1, (Fraction(1, 4), Fraction(3, 4)), (Fraction(2, 5), Fraction(3, 5))),
    ((2, 2), 2, (Fraction(1, 2), Fraction(1, 2)), (Fraction(1, 6), Fraction(5, 6))),
    ((2, 3), 3, (Fraction(1, 3), Fraction(2, 3)),
     (Fraction(1, 4), Fraction(1, 4), Fraction(1, 2))),
    ((2, 3), 4, (Fraction(3, 7), Fraction(4, 7)),
     (Fraction(1, 7), Fraction(2, 7), Fraction(4, 7))),
    ((2, 3), 5, (Fraction(1, 2), Fraction(1, 2)),
     (Fraction(1, 3), Fraction(1, 3), Fraction(1, 3))),
    ((2, 3), 6, (Fraction(9, 10), Fraction(1, 10)),
     (Fraction(1, 5), Fraction(3, 10), Fraction(1, 2))),
]


@pytest.mark.parametrize("shape,seed,p,q", FIXED_CORPUS)
def test_against_vertex_enumeration(shape, seed, p, q):
    rng = np.random.default_rng(seed)
    C = rng.uniform(0.0, 5.0, size=shape)
    p = np.array([float(f) for f in p])
    q = np.array([float(f) for f in q])
    plan = solve_transport(C, p, q)
    oracle = vertex_enumeration_optimum(C, p, q)
    assert plan.cost == pytest.approx(oracle, abs=1e-9)


def test_plan_is_basic(rng):
    N, M = 4, 5
    p = rng.dirichlet(np.ones(N))
    q = rng.dirichlet(np.ones(M))
    C = rng.uniform(size=(N, M))
    plan = solve_transport(C, p, q)
    assert np.count_nonzero(plan.plan > 1e-11) <= N + M - 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_marginals_and_duality(seed):
    rng = np.random.default_rng(seed)
    N, M = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    p = rng.dirichlet(np.ones(N))
    q = rng.dirichlet(np.ones(M))
    C = rng.uniform(size=(N, M))
    plan = solve_transport(C, p, q)
    assert np.abs(plan.plan.sum(axis=1) - p).max() < 1e-9
    assert np.abs(plan.plan.sum(axis=0) - q).max() < 1e-9
    assert plan.plan.min() >= 0.0
    assert abs(float(np.sum(plan.plan * C)) - plan.cost) < 1e-10


def test_constant_shift_monotonicity(rng):
    C = rng.uniform(size=(3, 4))
    p = rng.dirichlet(np.ones(3))
    q = rng.dirichlet(np.ones(4))
    base = solve_transport(C, p, q).cost
    shifted = solve_transport(C + 2.5, p, q).cost
    assert shifted == pytest.approx(base + 2.5, abs=1e-9)


def test_infeasible_marginals():
    with pytest.raises(InfeasibleMarginals):
        solve_transport(np.zeros((2, 2)), [0.6, 0.6], [0.5, 0.5])
    with pytest.raises(ValueError):
        solve_transport(np.zeros((2, 2)), [0.7, 0.5], [0.6, 0.6])  # off the simplex


def test_deterministic_tiebreak():
    # fully degenerate cost: every vertex optimal; the plan must be reproducible
    C = np.zeros((3, 3))
    p = np.array([1 / 3, 1 / 3, 1 / 3])
    first = solve_transport(C, p, p)
    for _ in range(3):
        assert np.array_equal(solve_transport(C, p, p).plan, first.plan)


def test_gmm_wasserstein_identity(rng):
    g = random_gmm(rng, 2, 3)
    dist, plan = gmm_wasserstein(g, g)
    assert dist == pytest.approx(0.0, abs=1e-9)
    assert np.allclose(plan.plan, np.diag(g.weights), atol=1e-8)


def test_gmm_wasserstein_single_components(rng):
    a = Gmm.single([0.0, 0.0], np.eye(2))
    b = Gmm.single([3.0, 0.0], 2.0 * np.eye(2))
    dist, _ = gmm_wasserstein(a, b)
    assert dist == pytest.approx(w2_gaussian(a.components[0], b.components[0]), rel=1e-12)


def test_gmm_wasserstein_matching_permutation():
    a = Gmm(np.array([0.5, 0.5]),
            [Gaussian([0.0, 0.0], 0.2 * np.eye(2)), Gaussian([20.0, 0.0], 0.3 * np.eye(2))])
    b = Gmm(np.array([0.5, 0.5]),
            [Gaussian([21.0, 0.0], 0.25 * np.eye(2)), Gaussian([1.0, 0.0], 0.2 * np.eye(2))])
    dist, plan = gmm_wasserstein(a, b)
    straight = 0.5 * (w2_gaussian(a.components[0], b.components[0])
                      + w2_gaussian(a.components[1], b.components[1]))
    crossed = 0.5 * (w2_gaussian(a.components[0], b.components[1])
                     + w2_gaussian(a.components[1], b.components[0]))
    assert dist == pytest.approx(min(straight, crossed), rel=1e-9)
    assert np.abs(plan.plan - 0.5 * np.fliplr(np.eye(2))).max() < 1e-9


def test_gmm_wasserstein_symmetry(rng):
    a = random_gmm(rng, 2, 2)
    b = random_gmm(rng, 2, 3)
    dab, _ = gmm_wasserstein(a, b)
    dba, _ = gmm_wasserstein(b, a)
    assert dab == pytest.approx(dba, abs=1e-9)
