"""Gaussian and Gaussian-mixture models: densities, sampling, EM fitting,
and the closed-form squared Wasserstein distance between Gaussians."""

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import logsumexp

from .exceptions import (
    CholeskyFailure,
    DegenerateComponent,
    DimensionMismatch,
    MatrixSqrtFailure,
    NotSymmetric,
)

__all__ = ["Gaussian", "Gmm", "pdf", "sample", "w2_gaussian", "sqrtm_psd", "fit_em"]

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class Gaussian:
    """Mean/covariance pair with a strictly positive definite covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise DimensionMismatch(f"cov shape {cov.shape} does not match mean of size {mean.size}")
        scale = max(1.0, np.abs(cov).max())
        if np.abs(cov - cov.T).max() > 1e-10 * scale:
            raise NotSymmetric("covariance is not symmetric within 1e-10")
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov)[0] <= 0.0:
            raise ValueError("covariance must be positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.size

    def logpdf(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"points have dimension {x.shape[-1]}, expected {self.dim}")
        try:
            chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as exc:
            raise CholeskyFailure("covariance is numerically indefinite") from exc
        diff = x - self.mean
        sol = scipy.linalg.solve_triangular(chol, diff.T, lower=True)
        maha = np.sum(sol**2, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        return -0.5 * (self.dim * _LOG_2PI + logdet + maha)


@dataclass(frozen=True)
class Gmm:
    """Simplex-weighted mixture of Gaussians over a common state space."""

    weights: np.ndarray
    components: list

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        comps = list(self.components)
        if w.size != len(comps):
            raise DimensionMismatch(f"{w.size} weights for {len(comps)} components")
        if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1 within 1e-12")
        dims = {c.dim for c in comps}
        if len(dims) != 1:
            raise DimensionMismatch(f"components live in different dimensions: {sorted(dims)}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @property
    def dim(self):
        return self.components[0].dim

    @property
    def size(self):
        return len(self.components)

    def means(self):
        return np.stack([c.mean for c in self.components])

    def covs(self):
        return np.stack([c.cov for c in self.components])

    def log_component_pdfs(self, x):
        """Per-component log densities, shape (len(x), r)."""
        return np.stack([c.logpdf(x) for c in self.components], axis=-1)

    def to_dict(self):
        return {
            "weights": [float(w) for w in self.weights],
            "components": [
                {"mean": c.mean.tolist(), "cov": c.cov.tolist()} for c in self.components
            ],
        }

    @classmethod
    def from_dict(cls, data):
        comps = [Gaussian(np.array(c["mean"]), np.array(c["cov"])) for c in data["components"]]
        return cls(np.array(data["weights"], dtype=float), comps)

    @classmethod
    def single(cls, mean, cov):
        return cls(np.array([1.0]), [Gaussian(mean, cov)])


def pdf(g, x):
    """Mixture density sum_i p_i N(x; mu_i, Sigma_i); vectorized over rows of x."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    logp = g.log_component_pdfs(np.atleast_2d(x))
    vals = np.exp(logsumexp(logp, axis=-1, b=np.maximum(g.weights, 1e-300)))
    # exact zero weights contribute nothing; the 1e-300 floor only guards log(0)
    dead = g.weights <= 0.0
    if dead.any():
        vals = np.exp(logsumexp(logp[:, ~dead], axis=-1, b=g.weights[~dead]))
    return float(vals[0]) if single else vals


def sample(g, count, seed):
    """Draw `count` i.i.d. samples; deterministic for a fixed seed."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    rng = np.random.default_rng(seed)
    n = g.dim
    out = np.empty((count, n))
    if count == 0:
        return out
    labels = rng.choice(g.size, size=count, p=g.weights)
    normals = rng.standard_normal((count, n))
    for i, comp in enumerate(g.components):
        idx = labels == i
        if not idx.any():
            continue
        try:
            chol = np.linalg.cholesky(comp.cov)
        except np.linalg.LinAlgError as exc:
            raise CholeskyFailure(f"component {i} covariance is numerically indefinite") from exc
        out[idx] = comp.mean + normals[idx] @ chol.T
    return out


def sqrtm_psd(Mtx, tol=1e-8):
    """Symmetric PSD square root via eigendecomposition.

    Negative eigenvalues (round-off) are clamped to zero.  Raises NotSymmetric
    if the input is asymmetric beyond `tol`.
    """
    Mtx = np.atleast_2d(np.asarray(Mtx, dtype=float))
    scale = max(1.0, np.abs(Mtx).max())
    if np.abs(Mtx - Mtx.T).max() > tol * scale:
        raise NotSymmetric(f"matrix is not symmetric within {tol}")
    Mtx = 0.5 * (Mtx + Mtx.T)
    w, V = np.linalg.eigh(Mtx)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def w2_gaussian(a, b):
    """Squared Wasserstein-2 distance between two Gaussians.

    ||mu_a - mu_b||^2 + tr(S_a + S_b) - 2 tr((S_b^{1/2} S_a S_b^{1/2})^{1/2}).
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"dimensions differ: {a.dim} vs {b.dim}")
    rb = sqrtm_psd(b.cov)
    inner = rb @ a.cov @ rb
    inner = 0.5 * (inner + inner.T)  # suppress round-off asymmetry
    w = np.linalg.eigvalsh(inner)
    if w[0] < -1e-10:
        raise MatrixSqrtFailure(f"inner product matrix has eigenvalue {w[0]:.3e} < -1e-10")
    cross = np.sum(np.sqrt(np.clip(w, 0.0, None)))
    mean_term = float(np.sum((a.mean - b.mean) ** 2))
    return mean_term + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * cross


def _kmeanspp_centers(samples, r, rng):
    """k-means++ seeding: first center uniform, then D^2-weighted draws."""
    count = samples.shape[0]
    centers = [samples[rng.integers(count)]]
    for _ in range(1, r):
        d2 = np.min(
            np.stack([np.sum((samples - c) ** 2, axis=1) for c in centers]), axis=0
        )
        total = d2.sum()
        if total <= 0.0:
            centers.append(samples[rng.integers(count)])
            continue
        centers.append(samples[rng.choice(count, p=d2 / total)])
    return np.stack(centers)


def _floored_cov(scatter, n):
    floor = 1e-6 * max(np.trace(scatter) / n, 1e-12)
    return scatter + floor * np.eye(n)


def fit_em(samples, r, seed=0, max_iter=200, tol=1e-8):
    """Fit an r-component GMM by EM with seeded k-means++ initialization.

    The log-likelihood is non-decreasing across iterations; covariances carry
    a small diagonal floor so components stay strictly positive definite.
    Raises DegenerateComponent if a component's responsibility mass underflows
    twice (it is re-seeded once from the k-means++ rule).
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    count, n = samples.shape
    if r < 1:
        raise ValueError("need at least one component")
    if count < r * (n + 1):
        raise ValueError(f"need at least r*(n+1) = {r * (n + 1)} samples, got {count}")
    rng = np.random.default_rng(seed)

    centers = _kmeanspp_centers(samples, r, rng)
    labels = np.argmin(
        np.stack([np.sum((samples - c) ** 2, axis=1) for c in centers]), axis=0
    )
    weights = np.empty(r)
    means = np.empty((r, n))
    covs = np.empty((r, n, n))
    global_scatter = np.cov(samples.T, bias=True).reshape(n, n)
    for i in range(r):
        members = samples[labels == i]
        weights[i] = max(len(members), 1) / count
        if len(members) == 0:
            means[i] = centers[i]
            covs[i] = _floored_cov(global_scatter, n)
            continue
        means[i] = members.mean(axis=0)
        diff = members - means[i]
        covs[i] = _floored_cov(diff.T @ diff / len(members), n)
    weights /= weights.sum()

    def log_resp():
        logp = np.empty((count, r))
        for i in range(r):
            logp[:, i] = np.log(weights[i]) + Gaussian(means[i], covs[i]).logpdf(samples)
        norm = logsumexp(logp, axis=1)
        return logp - norm[:, None], norm.sum()

    reseeded = set()
    prev_ll = -np.inf
    for _ in range(max_iter):
        lr, ll = log_resp()
        resp = np.exp(lr)
        mass = resp.sum(axis=0)
        for i in np.where(mass < 1e-10 * count)[0]:
            if i in reseeded:
                raise DegenerateComponent(f"component {i} lost all responsibility mass")
            reseeded.add(i)
            means[i] = samples[rng.integers(count)]
            covs[i] = _floored_cov(global_scatter, n)
            weights[i] = 1.0 / count
            weights /= weights.sum()
            lr, ll = log_resp()
            resp = np.exp(lr)
            mass = resp.sum(axis=0)
        weights = mass / count
        means = (resp.T @ samples) / mass[:, None]
        for i in range(r):
            diff = samples - means[i]
            scatter = (resp[:, i, None] * diff).T @ diff / mass[i]
            covs[i] = _floored_cov(scatter, n)
        if ll - prev_ll < tol and np.isfinite(prev_ll):
            break
        prev_ll = ll

    weights = weights / weights.sum()
    return Gmm(weights, [Gaussian(means[i], covs[i]) for i in range(r)])
