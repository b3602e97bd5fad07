import numpy as np
import pytest
import scipy.linalg

from conftest import random_controllable, random_spd, random_weights
from gmmsteer.covariance import (
    build_thetas,
    cov_cost,
    cov_steer,
    cov_steer_sdp_value,
    mean_cost,
    mean_cost_quadratic,
    mean_steer,
)
from gmmsteer.exceptions import SingularGrammian
from gmmsteer.lti import CostWeights, LinearSystem, build_operators


def dense_kkt_mean_steer(ops, w, mu0, mud):
    """Independent oracle: assemble and solve the full bordered KKT system."""
    Nm = ops.N * ops.m
    M = w.Rhat + ops.Hu.T @ w.Qhat @ ops.Hu
    g = ops.Hu.T @ w.Qhat @ (ops.Gamma @ mu0 - w.Xref)
    KKT = np.block([
        [2.0 * M, -ops.BN.T],
        [ops.BN, np.zeros((ops.n, ops.n))],
    ])
    rhs = np.concatenate([-2.0 * g, mud - ops.PhiN @ mu0])
    sol = scipy.linalg.solve(KKT, rhs)
    return sol[:Nm]


def test_mean_steer_already_at_target(rng):
    sys = random_controllable(rng, 2, 2, 3)
    ops = build_operators(sys)
    w = CostWeights.uniform(sys, R=1.0)  # Q = 0, refs 0
    mu0 = rng.normal(size=2)
    sol = mean_steer(ops, w, mu0, ops.PhiN @ mu0)
    assert np.abs(sol.Ubar).max() < 1e-10
    assert sol.cost == pytest.approx(0.0, abs=1e-12)


def test_mean_steer_minimum_energy():
    sys = LinearSystem.time_invariant(np.eye(2), np.eye(2), 2)
    ops = build_operators(sys)
    w = CostWeights.uniform(sys, R=1.0)
    mu0 = np.array([1.0, -2.0])
    mud = np.array([3.0, 1.0])
    sol = mean_steer(ops, w, mu0, mud)
    assert sol.cost == pytest.approx(np.sum((mud - mu0) ** 2) / 2, rel=1e-12)


def test_mean_steer_against_dense_kkt(rng):
    for _ in range(10):
        sys = random_controllable(rng)
        ops = build_operators(sys)
        w = random_weights(rng, sys)
        mu0 = rng.normal(size=sys.n)
        mud = rng.normal(size=sys.n)
        sol = mean_steer(ops, w, mu0, mud)
        oracle_U = dense_kkt_mean_steer(ops, w, mu0, mud)
        assert np.abs(sol.Ubar - oracle_U).max() < 1e-8 * (1 + np.abs(oracle_U).max())
        assert sol.cost == pytest.approx(mean_cost(ops, w, oracle_U, mu0), rel=1e-8)
        assert np.abs(ops.BN @ sol.Ubar - (mud - ops.PhiN @ mu0)).max() < 1e-9


def test_mean_cost_quadratic_matches_solution(rng):
    for _ in range(6):
        sys = random_controllable(rng)
        ops = build_operators(sys)
        w = random_weights(rng, sys)
        thetas = build_thetas(ops, w)
        mu0 = rng.normal(size=sys.n)
        mud = rng.normal(size=sys.n)
        b, c0 = mean_cost_quadratic(ops, w, mu0, thetas)
        dev = thetas.Gm_inv_sqrt @ (mud - b)
        quad = float(dev @ dev) + c0
        assert quad == pytest.approx(mean_steer(ops, w, mu0, mud, thetas).cost,
                                     rel=1e-9, abs=1e-11)


def test_thetas_q_free_reduction(rng):
    sys = random_controllable(rng, 2, 2, 3)
    ops = build_operators(sys)
    w = CostWeights.uniform(sys, R=np.eye(2) * 2.0)  # Q = 0
    th = build_thetas(ops, w)
    assert np.abs(th.Theta2).max() == 0.0
    assert np.allclose(th.M, w.Rhat)
    assert np.allclose(th.Theta5, ops.Gamma - ops.Hu @ th.Theta4)


def test_thetas_square_input_map():
    sys = LinearSystem.time_invariant([[1.0]], [[1.0]], 1)  # Nm == n
    ops = build_operators(sys)
    w = CostWeights.uniform(sys, R=1.0)
    th = build_thetas(ops, w)
    assert ops.D.shape == (1, 0)
    assert np.allclose(th.Theta1, np.eye(1))


def test_thetas_psd_blocks(rng):
    for _ in range(5):
        sys = random_controllable(rng, 2, 1, 3)
        ops = build_operators(sys)
        w = random_weights(rng, sys)
        th = build_thetas(ops, w)
        assert np.linalg.eigvalsh(th.Theta6)[0] >= -1e-10
        assert np.linalg.eigvalsh(th.Theta7)[0] >= -1e-10
        assert np.linalg.eigvalsh(th.M)[0] > 0.0


def test_uncontrollable_raises():
    sys = LinearSystem.time_invariant(np.eye(2), [[1.0], [0.0]], 3)
    ops = build_operators(sys)
    w = CostWeights.uniform(sys, R=1.0)
    with pytest.raises(SingularGrammian):
        build_thetas(ops, w)


def test_cov_steer_terminal_constraint_and_orthogonality(rng):
    for _ in range(8):
        sys = random_controllable(rng)
        ops = build_operators(sys)
        w = random_weights(rng, sys)
        S0 = random_spd(rng, sys.n)
        Sd = random_spd(rng, sys.n)
        sol = cov_steer(ops, w, S0, Sd)
        assert np.abs(sol.T @ sol.T.T - np.eye(sys.n)).max() < 1e-9
        H = ops.PhiN + ops.BN @ sol.L
        resid = H @ S0 @ H.T - Sd
        assert np.linalg.norm(resid) < 1e-7 * np.linalg.norm(Sd)
        # reported optimal value equals the definitional cost of L*
        assert sol.cost == pytest.approx(cov_cost(ops, w, sol.L, S0),
                                         rel=1e-9, abs=1e-9)


def test_cov_steer_scalar_enumeration():
    # n = m = N = 1, A = B = 1, Q = 0, R = 1: the constraint forces
    # (1 + L)^2 S0 = Sd, so L = ±sqrt(Sd/S0) - 1 and the cost is L^2 S0
    sys = LinearSystem.time_invariant([[1.0]], [[1.0]], 1)
    ops = build_operators(sys)
    w = CostWeights.uniform(sys, R=1.0)
    S0, Sd = 0.7, 2.3
    sol = cov_steer(ops, w, [[S0]], [[Sd]])
    roots = [np.sqrt(Sd / S0) - 1.0, -np.sqrt(Sd / S0) - 1.0]
    best = min(r * r * S0 for r in roots)
    assert sol.cost == pytest.approx(best, rel=1e-10)
    assert sol.L[0, 0] == pytest.approx(np.sqrt(Sd / S0) - 1.0, rel=1e-10)


def test_cov_steer_identity_pushforward_upper_bound(rng):
    # Sd = S0 with Phi = I and Q = 0: L = 0 is feasible, so the optimum is <= 0
    sys = LinearSystem.time_invariant(np.eye(2), np.eye(2), 2)
    ops = build_operators(sys)
    w = CostWeights.uniform(sys, R=1.0)
    S0 = random_spd(rng, 2)
    sol = cov_steer(ops, w, S0, S0)
    assert sol.cost <= cov_cost(ops, w, np.zeros((4, 2)), S0) + 1e-9
    assert sol.cost == pytest.approx(0.0, abs=1e-8)


def test_cov_steer_sdp_cross_check(rng):
    for _ in range(6):
        sys = random_controllable(rng)
        ops = build_operators(sys)
        w = random_weights(rng, sys)
        th = build_thetas(ops, w)
        S0 = random_spd(rng, sys.n)
        Sd = random_spd(rng, sys.n)
        closed = cov_steer(ops, w, S0, Sd, th).cost
        sdp = cov_steer_sdp_value(ops, w, S0, Sd, th)
        assert abs(closed - sdp) <= 1e-5 * (1 + abs(closed))


def test_sdp_value_scaling_linearity(rng):
    sys = random_controllable(rng, 2, 1, 3)
    ops = build_operators(sys)
    w = CostWeights.uniform(sys, R=1.0)
    th = build_thetas(ops, w)
    Sd = random_spd(rng, 2)
    t = 3.0
    # the tr(Theta6 Sd) part of the objective scales linearly in Sd
    assert np.trace(th.Theta6 @ (t * Sd)) == pytest.approx(
        t * np.trace(th.Theta6 @ Sd), rel=1e-12
    )


def test_mean_cov_decoupling(rng):
    # total stacked objective at (Ubar*, L*) = mean cost + covariance cost
    from gmmsteer.gaussians import Gmm
    from gmmsteer.policy import GmmPolicy, expected_cost

    sys = random_controllable(rng, 2, 2, 3)
    ops = build_operators(sys)
    w = random_weights(rng, sys)
    mu0 = rng.normal(size=2)
    S0 = random_spd(rng, 2)
    mud = rng.normal(size=2)
    Sd = random_spd(rng, 2)
    ms = mean_steer(ops, w, mu0, mud)
    cs = cov_steer(ops, w, S0, Sd)
    initial = Gmm.single(mu0, S0)
    policy = GmmPolicy(
        source=initial, lam=np.array([[1.0]]), Ubar={(0, 0): ms.Ubar},
        L={(0, 0): cs.L}, horizon=sys.N, n=sys.n, m=sys.m,
    )
    total = expected_cost(policy, initial, ops, w)
    assert total == pytest.approx(ms.cost + cs.cost, rel=1e-8)
