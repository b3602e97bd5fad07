"""Propagation of mixture-approximation error through a steering policy.

If the true initial density is the policy's source mixture plus an error
field e_0, the terminal density is the predicted terminal mixture plus a
transported error e_N given pointwise by the selection-weighted sum of
pulled-back error ratios times the terminal component densities.  Two bounds
follow: the relative error ratio is preserved, and the absolute error is
bounded through the volume change of each push-forward map.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .exceptions import SingularPushforward
from .gaussians import pdf

__all__ = [
    "ErrorField",
    "default_grid",
    "propagate_error",
    "relative_bound_check",
    "absolute_bound",
    "safe_ratio",
]


@dataclass(frozen=True)
class ErrorField:
    """Error values evaluated on a grid of state points."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.atleast_2d(np.asarray(self.grid, dtype=float))
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if grid.shape[0] == 0:
            raise ValueError("grid must be nonempty")
        if grid.shape[0] != values.size:
            raise ValueError("grid and values must have matching lengths")
        if not np.all(np.isfinite(values)):
            raise ValueError("error values must be finite")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)


def default_grid(gmm, points_per_axis=401, spread=8.0):
    """Tensor grid covering the mixture mean +- spread * largest sigma.

    Supported for 1D and 2D mixtures (the verification use case); bounds in
    higher dimensions are still computable in closed form without a grid.
    """
    n = gmm.dim
    if n not in (1, 2):
        raise ValueError("grids are only generated for 1D and 2D mixtures")
    mean = gmm.weights @ gmm.means()
    sig = max(np.sqrt(np.linalg.eigvalsh(c.cov)[-1]) for c in gmm.components)
    offset = max(np.abs(c.mean - mean).max() for c in gmm.components)
    half = spread * sig + offset
    axes = [
        np.linspace(mean[d] - half, mean[d] + half, points_per_axis) for d in range(n)
    ]
    if n == 1:
        return axes[0].reshape(-1, 1)
    gx, gy = np.meshgrid(axes[0], axes[1], indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def _policy_maps(policy, ops, det_tol=1e-12):
    """Push-forward maps of every pair: H = Phi + BN L, shift h = BN(L mu - Ubar)."""
    maps = {}
    for i in range(policy.r):
        mu_i = policy.source.components[i].mean
        for j in range(policy.q):
            H = ops.PhiN + ops.BN @ policy.L[(i, j)]
            det = np.linalg.det(H)
            if abs(det) < det_tol:
                raise SingularPushforward(f"pair {(i, j)} has |det H| = {abs(det):.2e}")
            h = ops.BN @ (policy.L[(i, j)] @ mu_i - policy.Ubar[(i, j)])
            maps[(i, j)] = (H, h)
    return maps


def propagate_error(policy, ops, e0, grid):
    """Evaluate the terminal error field on `grid`.

    e0 is a callable taking an (count, n) array of points and returning the
    initial error values.  Each (i, j) pair contributes the pulled-back
    ratio e0 / source-pdf times the terminal component density, weighted by
    p_i lambda_{i,j}.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    maps = _policy_maps(policy, ops)
    source = policy.source
    p = source.weights
    logw = np.log(np.maximum(p, 1e-300))
    values = np.zeros(grid.shape[0])
    for i in range(policy.r):
        for j in range(policy.q):
            weight = p[i] * policy.lam[i, j]
            if weight == 0.0:
                continue
            H, h = maps[(i, j)]
            z = np.linalg.solve(H, (grid + h).T).T
            # component-over-mixture ratio, evaluated in log space: bounded
            # by 1/p_i, so the tails never produce 0/0
            logs = source.log_component_pdfs(z)
            log_ratio = logs[:, i] - logsumexp(logs + logw, axis=-1)
            contrib = np.asarray(e0(z)).reshape(-1) * np.exp(log_ratio)
            values += weight * contrib / abs(np.linalg.det(H))
    return ErrorField(grid=grid, values=values)


def relative_bound_check(policy, initial, terminal, e0, eps, grid, ops=None):
    """Numerically verify the relative-ratio bound on a grid.

    Requires |e0 / initial pdf| <= eps on the grid (raises otherwise), then
    returns whether |e_N / terminal pdf| <= eps * (1 + 1e-6) everywhere.
    """
    if ops is None:
        raise ValueError("ops is required to evaluate the push-forward maps")
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    ratio0 = safe_ratio(np.asarray(e0(grid)).reshape(-1), pdf(initial, grid))
    if ratio0.max() > eps * (1 + 1e-9):
        raise ValueError(
            f"initial ratio bound violated on the grid: {ratio0.max():.3e} > {eps}"
        )
    field = propagate_error(policy, ops, e0, grid)
    ratio_n = safe_ratio(field.values, pdf(terminal, grid))
    return bool(ratio_n.max() <= eps * (1 + 1e-6))


def safe_ratio(err, density, tiny=1e-300):
    """|err| / density with underflowed-density points treated as 0/0 = 0."""
    err = np.asarray(err, dtype=float)
    density = np.asarray(density, dtype=float)
    dead = density <= tiny
    if np.any(np.abs(err[dead]) > tiny):
        return np.full_like(err, np.inf)
    out = np.zeros_like(err)
    out[~dead] = np.abs(err[~dead]) / density[~dead]
    return out




def absolute_bound(policy, initial, terminal, eps0, weighted=False):
    """Bound on |e_N| when |e_0| <= eps0.

    The printed bound sums lambda_{i,j} sqrt(det S_i^0 / det S_j^N) * eps0
    over all pairs.  With weighted=True the source weights p_i are folded in
    as the derivation suggests; that variant is tighter but non-normative.
    """
    total = 0.0
    for i in range(policy.r):
        det0 = np.linalg.det(initial.components[i].cov)
        scale = initial.weights[i] if weighted else 1.0
        for j in range(policy.q):
            lam = policy.lam[i, j]
            if lam == 0.0:
                continue
            detN = np.linalg.det(terminal.components[j].cov)
            total += scale * lam * np.sqrt(det0 / detN) * eps0
    return float(total)
