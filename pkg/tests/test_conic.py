import json

import cvxpy as cp
import numpy as np
import pytest

from conftest import random_spd
from gmmsteer.conic import ConicProgram, ConicStatus, solve_conic


def test_scalar_nonneg_min():
    prog = ConicProgram()
    x = prog.scalar("x")
    prog.add_nonneg(x)
    prog.minimize(x)
    sol = solve_conic(prog)
    assert sol.status is ConicStatus.Optimal
    assert sol.objective_value == pytest.approx(0.0, abs=1e-7)


def test_nuclear_norm_scalar_case():
    # min tr(L + L^T) over [[1, L], [L, 1]] >= 0 reaches -2 at L = -1
    prog = ConicProgram()
    L = prog.matrix("L", 1, 1)
    prog.add_psd(cp.bmat([[np.eye(1), L], [L.T, np.eye(1)]]))
    prog.minimize(cp.trace(L + L.T))
    sol = solve_conic(prog)
    assert sol.status is ConicStatus.Optimal
    assert sol.objective_value == pytest.approx(-2.0, abs=1e-6)
    assert sol["L"] == pytest.approx(-1.0, abs=1e-6)


def _nuclear_sdp_value(Omega):
    n = Omega.shape[0]
    prog = ConicProgram()
    L = prog.matrix("L", n, n)
    prog.add_psd(cp.bmat([[Omega @ Omega.T, L], [L.T, np.eye(n)]]))
    prog.minimize(cp.trace(L))
    sol = solve_conic(prog, tol=1e-9)
    assert sol.status is ConicStatus.Optimal
    return sol.objective_value


def test_nuclear_norm_identity():
    rng = np.random.default_rng(17)
    for _ in range(20):
        n = int(rng.integers(1, 5))
        Omega = rng.normal(size=(n, n))
        nuc = np.linalg.svd(Omega, compute_uv=False).sum()
        assert _nuclear_sdp_value(Omega) == pytest.approx(-nuc, abs=1e-6)


def test_congruence_equivalence():
    # the two SDP forms agree for symmetric nonsingular A (the only case the
    # covariance-steering corollary relies on, with A a covariance square
    # root); for nonsymmetric A the forms differ by a transpose
    rng = np.random.default_rng(23)
    for _ in range(20):
        n = int(rng.integers(1, 5))
        G = rng.normal(size=(n, n))
        A = 0.5 * (G + G.T) + np.eye(n) * 0.1  # symmetric, nonsingular w.p. 1
        M = random_spd(rng, n)

        prog1 = ConicProgram()
        L1 = prog1.matrix("L", n, n)
        prog1.add_psd(cp.bmat([[A @ M @ A.T, L1], [L1.T, np.eye(n)]]))
        prog1.minimize(cp.trace(L1))
        v1 = solve_conic(prog1, tol=1e-9).objective_value

        prog2 = ConicProgram()
        L2 = prog2.matrix("L", n, n)
        prog2.add_psd(cp.bmat([[M, L2], [L2.T, A @ A.T]]))
        prog2.minimize(cp.trace(L2))
        v2 = solve_conic(prog2, tol=1e-9).objective_value

        assert v1 == pytest.approx(v2, abs=1e-6 * (1 + abs(v1)))


def test_equality_and_values():
    prog = ConicProgram()
    v = prog.vector("v", 3)
    prog.add_equality(v - np.array([1.0, 2.0, 3.0]))
    prog.minimize(cp.sum(v))
    sol = solve_conic(prog)
    assert np.allclose(sol["v"], [1, 2, 3], atol=1e-7)


def test_infeasible_and_unbounded_statuses():
    prog = ConicProgram()
    x = prog.scalar("x")
    prog.add_nonneg(x - 1.0)
    prog.add_nonneg(-x)
    prog.minimize(x)
    assert solve_conic(prog).status is ConicStatus.Infeasible

    prog2 = ConicProgram()
    y = prog2.scalar("y")
    prog2.add_nonneg(-y)
    prog2.minimize(y)
    assert solve_conic(prog2).status is ConicStatus.Unbounded


def test_rejects_nonaffine():
    prog = ConicProgram()
    x = prog.scalar("x")
    with pytest.raises(ValueError):
        prog.minimize(cp.square(x))
    with pytest.raises(ValueError):
        prog.add_nonneg(1 - cp.square(x))


def test_psd_solution_quality():
    rng = np.random.default_rng(3)
    n = 3
    target = random_spd(rng, n)
    prog = ConicProgram()
    X = prog.symmetric("X", n)
    prog.add_psd(X)
    prog.minimize(cp.trace(X) + cp.sum(cp.abs(0)) + cp.sum(cp.multiply(np.zeros((n, n)), X)))
    prog.add_equality(cp.trace(X) - np.trace(target))
    sol = solve_conic(prog, tol=1e-9)
    assert sol.status is ConicStatus.Optimal
    assert np.linalg.eigvalsh(sol["X"])[0] >= -1e-7


def test_parameter_reuse():
    prog = ConicProgram()
    x = prog.vector("x", 2)
    c = prog.parameter("c", 2)
    prog.add_nonneg(x)
    prog.add_nonneg(1.0 - cp.sum(x))
    prog.minimize(c @ x)
    prog.set_parameter("c", np.array([1.0, -1.0]))
    first = solve_conic(prog)
    assert first.objective_value == pytest.approx(-1.0, abs=1e-7)
    prog.set_parameter("c", np.array([-2.0, 1.0]))
    second = solve_conic(prog)
    assert second.objective_value == pytest.approx(-2.0, abs=1e-7)


def test_debug_dump(tmp_path):
    prog = ConicProgram()
    x = prog.scalar("x")
    prog.add_nonneg(x - 1.0)
    prog.minimize(x)
    path = tmp_path / "program.json"
    prog.dump(path)
    data = json.loads(path.read_text())
    assert {"c", "b", "A", "cones"} <= set(data)
