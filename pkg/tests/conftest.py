import numpy as np
import pytest

from gmmsteer.gaussians import Gaussian, Gmm
from gmmsteer.lti import CostWeights, LinearSystem, build_operators, check_controllable


def random_spd(rng, n, scale=1.0):
    A = rng.normal(size=(n, n))
    return scale * (A @ A.T + 0.3 * n * np.eye(n))


def random_controllable(rng, n=None, m=None, N=None, stable=True):
    """Random system that passes the Grammian controllability check."""
    n = n or rng.integers(1, 4)
    m = m or rng.integers(1, 3)
    N = N or rng.integers(max(2, int(np.ceil(n / m))), 6)
    while True:
        A = [rng.normal(size=(n, n)) * (0.6 if stable else 1.0) for _ in range(N)]
        B = [rng.normal(size=(n, m)) for _ in range(N)]
        sys = LinearSystem(A=A, B=B, n=int(n), m=int(m), N=int(N))
        if check_controllable(build_operators(sys), tol=1e-8):
            return sys


def random_weights(rng, sys, with_q=True):
    Q = [random_spd(rng, sys.n, 0.4) if with_q else np.zeros((sys.n, sys.n))
         for _ in range(sys.N + 1)]
    R = [random_spd(rng, sys.m, 1.0) + 0.2 * np.eye(sys.m) for _ in range(sys.N)]
    refs = [rng.normal(size=sys.n) * 0.5 for _ in range(sys.N + 1)] if with_q else None
    return CostWeights(Q=Q, R=R, x_ref=refs)


def random_gmm(rng, n, r, spread=4.0, cov_scale=0.4):
    weights = rng.dirichlet(np.full(r, 2.0))
    comps = [
        Gaussian(rng.normal(size=n) * spread, random_spd(rng, n, cov_scale))
        for _ in range(r)
    ]
    return Gmm(weights, comps)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
