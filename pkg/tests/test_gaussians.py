import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_gmm, random_spd
from gmmsteer.exceptions import DimensionMismatch, NotSymmetric
from gmmsteer.gaussians import Gaussian, Gmm, fit_em, pdf, sample, sqrtm_psd, w2_gaussian


def test_standard_normal_mode():
    g = Gmm.single([0.0], [[1.0]])
    assert pdf(g, [0.0]) == pytest.approx(1.0 / np.sqrt(2 * np.pi), rel=1e-12)


def test_mixture_collapse():
    comp = Gaussian([1.0, -1.0], 0.5 * np.eye(2))
    two = Gmm(np.array([0.5, 0.5]), [comp, comp])
    one = Gmm(np.array([1.0]), [comp])
    x = np.array([0.3, 0.4])
    assert pdf(two, x) == pytest.approx(pdf(one, x), rel=1e-14)


def test_pdf_matches_direct_formula(rng):
    g = random_gmm(rng, 2, 2)
    x = rng.normal(size=2)
    direct = 0.0
    for w, c in zip(g.weights, g.components):
        d = x - c.mean
        direct += (
            w
            * np.exp(-0.5 * d @ np.linalg.solve(c.cov, d))
            / np.sqrt((2 * np.pi) ** 2 * np.linalg.det(c.cov))
        )
    assert pdf(g, x) == pytest.approx(direct, rel=1e-12)


def test_pdf_integrates_to_one():
    rng = np.random.default_rng(8)
    g1 = random_gmm(rng, 1, 3, spread=1.5, cov_scale=0.5)
    xs = np.linspace(-25, 25, 6001).reshape(-1, 1)
    mass = np.trapezoid(pdf(g1, xs), xs[:, 0])
    assert mass == pytest.approx(1.0, abs=1e-3)

    g2 = random_gmm(rng, 2, 2, spread=1.0, cov_scale=0.3)
    ax = np.linspace(-15, 15, 501)
    gx, gy = np.meshgrid(ax, ax, indexing="ij")
    vals = pdf(g2, np.column_stack([gx.ravel(), gy.ravel()])).reshape(gx.shape)
    mass2 = np.trapezoid(np.trapezoid(vals, ax, axis=1), ax)
    assert mass2 == pytest.approx(1.0, abs=1e-3)


def test_sample_moments_and_determinism():
    g = Gmm.single([1.0, -2.0], [[2.0, 0.3], [0.3, 0.5]])
    xs = sample(g, 100_000, seed=42)
    sig = np.sqrt(np.diag(g.components[0].cov))
    assert np.all(np.abs(xs.mean(axis=0) - g.components[0].mean) < 4 * sig / np.sqrt(1e5))
    assert np.array_equal(xs, sample(g, 100_000, seed=42))


def test_sample_degenerate_weights():
    g = Gmm(np.array([1.0, 0.0]),
            [Gaussian([0.0], [[1.0]]), Gaussian([100.0], [[1.0]])])
    xs = sample(g, 1000, seed=0)
    assert np.abs(xs).max() < 50


def test_w2_identity_and_scalar():
    a = Gaussian([0.0], [[1.0]])
    b = Gaussian([0.0], [[4.0]])
    assert w2_gaussian(a, a) == pytest.approx(0.0, abs=1e-12)
    assert w2_gaussian(a, b) == pytest.approx(1.0, rel=1e-12)  # (1-2)^2


def test_w2_translation():
    a = Gaussian([1.0, 0.0], np.eye(2))
    b = Gaussian([0.0, 0.0], np.eye(2))
    assert w2_gaussian(a, b) == pytest.approx(1.0, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_w2_symmetry_property(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    a = Gaussian(rng.normal(size=n), random_spd(rng, n))
    b = Gaussian(rng.normal(size=n), random_spd(rng, n))
    assert abs(w2_gaussian(a, b) - w2_gaussian(b, a)) < 1e-10
    assert w2_gaussian(a, b) >= -1e-12


def test_w2_triangle_inequality_spot(rng):
    for _ in range(20):
        n = int(rng.integers(1, 4))
        a, b, c = (Gaussian(rng.normal(size=n) * 2, random_spd(rng, n)) for _ in range(3))
        dab = np.sqrt(w2_gaussian(a, b))
        dbc = np.sqrt(w2_gaussian(b, c))
        dac = np.sqrt(w2_gaussian(a, c))
        assert dac <= dab + dbc + 1e-9


def test_sqrtm_psd():
    assert np.allclose(sqrtm_psd(np.eye(3)), np.eye(3))
    assert np.allclose(sqrtm_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))
    rng = np.random.default_rng(5)
    M = random_spd(rng, 4)
    S = sqrtm_psd(M)
    assert np.abs(S @ S - M).max() < 1e-9 * np.abs(M).max()
    with pytest.raises(NotSymmetric):
        sqrtm_psd([[1.0, 2.0], [0.0, 1.0]])


def test_gaussian_validation():
    with pytest.raises(NotSymmetric):
        Gaussian([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ValueError):
        Gaussian([0.0], [[0.0]])
    with pytest.raises(DimensionMismatch):
        Gaussian([0.0, 0.0], [[1.0]])


def test_gmm_validation():
    good = Gaussian([0.0], [[1.0]])
    with pytest.raises(ValueError):
        Gmm(np.array([0.5, 0.6]), [good, good])
    with pytest.raises(DimensionMismatch):
        Gmm(np.array([0.5, 0.5]), [good, Gaussian([0.0, 0.0], np.eye(2))])


def test_fit_em_single_gaussian():
    g = Gmm.single([2.0, -1.0], [[1.5, 0.4], [0.4, 0.8]])
    xs = sample(g, 20_000, seed=7)
    fit = fit_em(xs, 1, seed=0)
    comp = fit.components[0]
    se = np.sqrt(np.diag(g.components[0].cov) / 20_000)
    assert np.all(np.abs(comp.mean - g.components[0].mean) < 3 * se + 1e-6)
    assert np.abs(comp.cov - g.components[0].cov).max() < 0.05


def test_fit_em_separated_clusters():
    rng = np.random.default_rng(9)
    a = rng.normal(size=(3000, 2)) * 0.5 + np.array([0.0, 0.0])
    b = rng.normal(size=(7000, 2)) * 0.5 + np.array([10.0, 10.0])
    xs = np.vstack([a, b])
    fit = fit_em(xs, 2, seed=1)
    weights = np.sort(fit.weights)
    assert abs(weights[0] - 0.3) < 0.02 and abs(weights[1] - 0.7) < 0.02


def test_fit_em_deterministic():
    rng = np.random.default_rng(11)
    xs = rng.normal(size=(500, 2))
    f1 = fit_em(xs, 3, seed=4)
    f2 = fit_em(xs, 3, seed=4)
    assert np.array_equal(f1.weights, f2.weights)
    for c1, c2 in zip(f1.components, f2.components):
        assert np.array_equal(c1.mean, c2.mean)
        assert np.array_equal(c1.cov, c2.cov)


def test_fit_em_loglik_monotone():
    # re-run EM manually to watch the likelihood trace
    from scipy.special import logsumexp

    rng = np.random.default_rng(13)
    xs = np.vstack([
        rng.normal(size=(400, 2)) * 0.7,
        rng.normal(size=(600, 2)) * 0.4 + 3.0,
    ])

    def loglik(g):
        logp = g.log_component_pdfs(xs) + np.log(g.weights)
        return float(logsumexp(logp, axis=1).sum())

    prev = -np.inf
    for iters in range(1, 12):
        g = fit_em(xs, 2, seed=2, max_iter=iters)
        ll = loglik(g)
        assert ll >= prev - 1e-7
        prev = ll


def test_fit_em_needs_enough_samples():
    with pytest.raises(ValueError):
        fit_em(np.zeros((5, 2)), 2, seed=0)


def test_gmm_json_roundtrip(rng):
    g = random_gmm(rng, 2, 3)
    again = Gmm.from_dict(g.to_dict())
    assert np.allclose(again.weights, g.weights)
    for c1, c2 in zip(again.components, g.components):
        assert np.allclose(c1.mean, c2.mean)
        assert np.allclose(c1.cov, c2.cov)
