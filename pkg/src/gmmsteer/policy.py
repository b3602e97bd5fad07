"""Randomized mixture steering policies.

A policy carries r source anchors (the initial mixture components), a
row-stochastic r x q selection matrix, and per-(i, j) affine blocks
(Ubar, L) acting on the initial state: given x0, pair (i, j) is drawn with
probability lambda_{i,j} * l_i(x0) where l_i is the posterior responsibility
of anchor i, and the applied input stack is U = L_{i,j}(x0 - mean_i) + Ubar_{i,j}.
Under matching anchors the terminal state stays a q-component mixture with
parameters available in closed form.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .covariance import cov_cost, mean_cost
from .exceptions import DimensionMismatch, InconsistentPolicy
from .gaussians import Gaussian, Gmm

__all__ = [
    "GmmPolicy",
    "TerminalPrediction",
    "component_likelihoods",
    "sample_control",
    "predict_terminal",
    "simulate",
    "expected_cost",
    "step_cost",
]


@dataclass(frozen=True)
class GmmPolicy:
    """Randomized policy parameters: anchors, selection weights, affine blocks."""

    source: Gmm
    lam: np.ndarray
    Ubar: dict
    L: dict
    horizon: int
    n: int
    m: int

    def __post_init__(self):
        lam = np.atleast_2d(np.asarray(self.lam, dtype=float))
        r, q = lam.shape
        if r != self.source.size:
            raise DimensionMismatch(f"lambda has {r} rows for {self.source.size} anchors")
        if np.any(lam < -1e-10) or np.abs(lam.sum(axis=1) - 1.0).max() > 1e-10:
            raise ValueError("each lambda row must lie on the probability simplex")
        Nm = self.horizon * self.m
        for i in range(r):
            for j in range(q):
                u = np.asarray(self.Ubar[(i, j)], dtype=float).reshape(-1)
                Lij = np.atleast_2d(np.asarray(self.L[(i, j)], dtype=float))
                if u.size != Nm or Lij.shape != (Nm, self.n):
                    raise DimensionMismatch(f"block ({i},{j}) has inconsistent shapes")
                self.Ubar[(i, j)] = u
                self.L[(i, j)] = Lij
        object.__setattr__(self, "lam", lam)

    @property
    def r(self):
        return self.lam.shape[0]

    @property
    def q(self):
        return self.lam.shape[1]

    def to_dict(self):
        return {
            "source": self.source.to_dict(),
            "lambda": self.lam.tolist(),
            "horizon": self.horizon,
            "blocks": [
                {
                    "i": i,
                    "j": j,
                    "Ubar": self.Ubar[(i, j)].tolist(),
                    "L": self.L[(i, j)].tolist(),
                }
                for i in range(self.r)
                for j in range(self.q)
            ],
        }

    @classmethod
    def from_dict(cls, data):
        source = Gmm.from_dict(data["source"])
        lam = np.array(data["lambda"], dtype=float)
        N = int(data["horizon"])
        Ubar, L = {}, {}
        for blk in data["blocks"]:
            key = (int(blk["i"]), int(blk["j"]))
            Ubar[key] = np.array(blk["Ubar"], dtype=float)
            L[key] = np.array(blk["L"], dtype=float)
        n = source.dim
        Nm = next(iter(Ubar.values())).size
        return cls(source=source, lam=lam, Ubar=Ubar, L=L, horizon=N, n=n, m=Nm // N)


def _log_responsibilities(policy, x):
    """log l_i(x) for each anchor, vectorized over rows of x."""
    logp = policy.source.log_component_pdfs(np.atleast_2d(x))
    logw = np.log(np.maximum(policy.source.weights, 1e-300))
    scores = logw + logp
    return scores - logsumexp(scores, axis=-1, keepdims=True)


def component_likelihoods(policy, x0):
    """Posterior responsibilities l_i(x0) of the policy anchors; sums to 1.

    Computed in log space so far-separated anchors never underflow to NaN.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != policy.n:
        raise DimensionMismatch(f"x0 has size {x0.size}, expected {policy.n}")
    return np.exp(_log_responsibilities(policy, x0)[0])


def sample_control(policy, x0, seed):
    """Draw (i, j) with probability lambda_{i,j} l_i(x0) and apply its block."""
    x0 = np.asarray(x0, dtype=float).reshape(policy.n)
    rng = np.random.default_rng(seed)
    gamma = component_likelihoods(policy, x0)[:, None] * policy.lam
    flat = gamma.reshape(-1)
    flat = flat / flat.sum()
    idx = rng.choice(flat.size, p=flat)
    i, j = divmod(idx, policy.q)
    mean_i = policy.source.components[i].mean
    return policy.L[(i, j)] @ (x0 - mean_i) + policy.Ubar[(i, j)]


@dataclass(frozen=True)
class TerminalPrediction:
    """Closed-form terminal mixture under the policy."""

    gmm: Gmm


def _check_anchors(policy, initial, tol=1e-9):
    if initial.size != policy.source.size or initial.dim != policy.source.dim:
        raise DimensionMismatch("initial mixture does not match the policy anchors")
    for a, b in zip(policy.source.components, initial.components):
        if np.abs(a.mean - b.mean).max() > tol or np.abs(a.cov - b.cov).max() > tol:
            raise ValueError("policy anchors must equal the initial mixture components")


def predict_terminal(policy, initial, ops, tol=1e-6, active_tol=1e-9):
    """Push the initial mixture through the policy in closed form.

    Terminal weights are q_j = sum_i p_i lambda_{i,j}; means and covariances
    come from the affine blocks.  Every source component routed to the same
    terminal component with weight above `active_tol` must imply the same
    (mean, cov) within `tol`, otherwise the policy is inconsistent.
    """
    _check_anchors(policy, initial)
    p = initial.weights
    weights = policy.lam.T @ p
    comps = []
    for j in range(policy.q):
        cand = None
        src = None
        for i in range(policy.r):
            mu_i = initial.components[i].mean
            S_i = initial.components[i].cov
            H = ops.PhiN + ops.BN @ policy.L[(i, j)]
            mu = ops.PhiN @ mu_i + ops.BN @ policy.Ubar[(i, j)]
            S = H @ S_i @ H.T
            if policy.lam[i, j] <= active_tol:
                if cand is None:
                    cand, src = (mu, S), -1
                continue
            if cand is None or src == -1:
                cand, src = (mu, S), i
                continue
            if np.abs(cand[0] - mu).max() > tol or np.abs(cand[1] - S).max() > tol:
                raise InconsistentPolicy(
                    f"components {src} and {i} disagree on terminal component {j}"
                )
        mu, S = cand
        comps.append(Gaussian(mu, 0.5 * (S + S.T)))
    total = weights.sum()
    return TerminalPrediction(gmm=Gmm(weights / total, comps))


def simulate(sys, policy, initial, count, seed, return_labels=False):
    """Sample `count` closed-loop trajectories.

    Returns (states, controls) with shapes (count, N+1, n) and (count, N, m);
    with return_labels=True also the drawn (i, j) index pairs, used by the
    Monte Carlo moment checks.
    """
    N, n, m = sys.N, sys.n, sys.m
    rng = np.random.default_rng(seed)
    states = np.empty((count, N + 1, n))
    controls = np.empty((count, N, m))
    labels = np.empty((count, 2), dtype=int)
    if count == 0:
        return (states, controls, labels) if return_labels else (states, controls)

    # x0 ~ initial, then (i, j) | x0 ~ gamma, all vectorized
    comp0 = rng.choice(initial.size, size=count, p=initial.weights)
    z = rng.standard_normal((count, n))
    x0 = np.empty((count, n))
    for i, comp in enumerate(initial.components):
        idx = comp0 == i
        if idx.any():
            x0[idx] = comp.mean + z[idx] @ np.linalg.cholesky(comp.cov).T
    ell = np.exp(_log_responsibilities(policy, x0))
    gamma = ell[:, :, None] * policy.lam[None, :, :]
    flat = gamma.reshape(count, -1)
    flat = flat / flat.sum(axis=1, keepdims=True)
    cum = np.cumsum(flat, axis=1)
    u = rng.random(count)
    pick = np.minimum((u[:, None] > cum).sum(axis=1), flat.shape[1] - 1)
    labels[:, 0], labels[:, 1] = divmod(pick, policy.q)

    U = np.empty((count, N * m))
    for i in range(policy.r):
        mean_i = policy.source.components[i].mean
        for j in range(policy.q):
            idx = (labels[:, 0] == i) & (labels[:, 1] == j)
            if idx.any():
                U[idx] = (x0[idx] - mean_i) @ policy.L[(i, j)].T + policy.Ubar[(i, j)]

    states[:, 0] = x0
    for k in range(N):
        uk = U[:, k * m:(k + 1) * m]
        controls[:, k] = uk
        states[:, k + 1] = states[:, k] @ sys.A[k].T + uk @ sys.B[k].T
    return (states, controls, labels) if return_labels else (states, controls)


def expected_cost(policy, initial, ops, w):
    """Expected quadratic cost of the policy under the initial mixture.

    By iterated expectations this is the lambda-weighted sum of the
    definitional mean and covariance costs of each affine block.
    """
    _check_anchors(policy, initial)
    total = 0.0
    for i in range(policy.r):
        p_i = initial.weights[i]
        mu_i = initial.components[i].mean
        S_i = initial.components[i].cov
        for j in range(policy.q):
            lam = policy.lam[i, j]
            if p_i * lam == 0.0:
                continue
            total += p_i * lam * (
                mean_cost(ops, w, policy.Ubar[(i, j)], mu_i)
                + cov_cost(ops, w, policy.L[(i, j)], S_i)
            )
    return total


def step_cost(Ubar, L, mu0, Sigma0, ops, w, k):
    """Expected stage cost E[J_k] of one affine block.

    Four terms for k < N: input mean/covariance energies under R_k plus state
    mean/covariance deviations under Q_k.  k = N is the terminal stage and
    carries the two state terms only, so summing over k = 0..N reproduces the
    total expected cost exactly.
    """
    if not 0 <= k <= ops.N:
        raise IndexError(f"stage index {k} outside 0..{ops.N}")
    mu0 = np.asarray(mu0, dtype=float).reshape(ops.n)
    Sigma0 = np.atleast_2d(np.asarray(Sigma0, dtype=float))
    Px = ops.state_selector(k)
    Qk = w.Q[k]
    GL = ops.Gamma + ops.Hu @ L
    x_mean = Px @ (ops.Gamma @ mu0 + ops.Hu @ Ubar) - w.x_ref[k]
    PxGL = Px @ GL
    total = float(x_mean @ Qk @ x_mean + np.trace(Qk @ PxGL @ Sigma0 @ PxGL.T))
    if k < ops.N:
        Pu = ops.input_selector(k)
        Rk = w.R[k]
        u_mean = Pu @ Ubar
        PuL = Pu @ L
        total += float(u_mean @ Rk @ u_mean + np.trace(Rk @ PuL @ Sigma0 @ PuL.T))
    return total
