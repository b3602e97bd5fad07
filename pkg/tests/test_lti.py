import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_controllable
from gmmsteer.exceptions import DimensionMismatch
from gmmsteer.lti import CostWeights, LinearSystem, build_operators, check_controllable


def rollout(sys, x0, U):
    xs = [np.asarray(x0, dtype=float)]
    for k in range(sys.N):
        xs.append(sys.A[k] @ xs[-1] + sys.B[k] @ U[k * sys.m:(k + 1) * sys.m])
    return np.concatenate(xs)


def test_identity_chain():
    sys = LinearSystem.time_invariant(np.eye(2), np.eye(2), 2)
    ops = build_operators(sys)
    assert np.allclose(ops.G, 2 * np.eye(2))
    assert np.allclose(ops.BN, np.hstack([np.eye(2), np.eye(2)]))
    assert np.allclose(ops.Gamma, np.vstack([np.eye(2)] * 3))


def test_nilpotent_chain():
    sys = LinearSystem.time_invariant([[0.0]], [[1.0]], 2)
    ops = build_operators(sys)
    assert ops.Phi(2, 0) == pytest.approx(0.0)
    assert np.allclose(ops.BN, [[0.0, 1.0]])
    assert ops.G == pytest.approx(1.0)


def test_stack_matches_stepwise_recursion():
    rng = np.random.default_rng(0)
    sys = random_controllable(rng, n=3, m=2, N=4)
    ops = build_operators(sys)
    for _ in range(5):
        x0 = rng.normal(size=3)
        U = rng.normal(size=8)
        X = ops.Gamma @ x0 + ops.Hu @ U
        assert np.abs(X - rollout(sys, x0, U)).max() < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_stack_identity_property(seed):
    rng = np.random.default_rng(seed)
    sys = random_controllable(rng)
    ops = build_operators(sys)
    x0 = rng.normal(size=sys.n)
    U = rng.normal(size=sys.N * sys.m)
    X = ops.Gamma @ x0 + ops.Hu @ U
    ref = rollout(sys, x0, U)
    assert np.abs(X - ref).max() <= 1e-10 * max(1.0, np.abs(ref).max())


def test_phi_semigroup():
    rng = np.random.default_rng(3)
    sys = random_controllable(rng, n=2, m=1, N=5)
    ops = build_operators(sys)
    for k in range(6):
        assert np.allclose(ops.Phi(k, k), np.eye(2))
    for k1 in range(6):
        for j in range(k1, 6):
            for k2 in range(j, 6):
                assert np.allclose(ops.Phi(k2, k1), ops.Phi(k2, j) @ ops.Phi(j, k1))


def test_grammian_and_nullspace():
    rng = np.random.default_rng(1)
    sys = random_controllable(rng, n=2, m=2, N=3)
    ops = build_operators(sys)
    Nm = sys.N * sys.m
    assert np.allclose(ops.BN @ ops.BN.T, ops.G, atol=1e-10)
    assert np.allclose(ops.D.T @ ops.D, np.eye(Nm - sys.n), atol=1e-12)
    assert np.abs(ops.BN @ ops.D).max() < 1e-10
    proj = ops.BN.T @ np.linalg.inv(ops.G) @ ops.BN + ops.D @ ops.D.T
    assert np.abs(proj - np.eye(Nm)).max() < 1e-8


def test_controllability_predicate():
    sys = LinearSystem.time_invariant(np.eye(2), np.eye(2), 2)
    assert check_controllable(build_operators(sys))

    dead = LinearSystem.time_invariant(np.eye(2), np.zeros((2, 1)), 3)
    assert not check_controllable(build_operators(dead))

    # A = I with input only into the first state: second state unreachable
    partial = LinearSystem.time_invariant(np.eye(2), [[1.0], [0.0]], 3)
    assert not check_controllable(build_operators(partial))


def test_dimension_validation():
    with pytest.raises(DimensionMismatch):
        LinearSystem(A=[np.eye(2)], B=[np.eye(3)], n=2, m=2, N=1)
    with pytest.raises(DimensionMismatch):
        LinearSystem(A=[np.eye(2)], B=[np.eye(2)], n=2, m=2, N=2)


def test_weights_validation():
    sys = LinearSystem.time_invariant(np.eye(2), np.eye(2), 3)
    w = CostWeights.uniform(sys, R=2.0, Q=1.0)
    assert w.Rhat.shape == (6, 6)
    assert w.Qhat.shape == (8, 8)
    assert np.allclose(w.Xref, 0.0)
    with pytest.raises(ValueError):
        CostWeights.uniform(sys, R=0.0)  # not PD
    with pytest.raises(Exception):
        CostWeights(Q=[np.eye(2)] * 3, R=[[[1.0, 2.0], [0.0, 1.0]]] * 3)  # asymmetric


def test_selectors():
    rng = np.random.default_rng(2)
    sys = random_controllable(rng, n=2, m=1, N=3)
    ops = build_operators(sys)
    X = rng.normal(size=(sys.N + 1) * sys.n)
    U = rng.normal(size=sys.N * sys.m)
    for k in range(sys.N + 1):
        assert np.allclose(ops.state_selector(k) @ X, X[k * sys.n:(k + 1) * sys.n])
    for k in range(sys.N):
        assert np.allclose(ops.input_selector(k) @ U, U[k * sys.m:(k + 1) * sys.m])
    with pytest.raises(IndexError):
        ops.input_selector(sys.N)
