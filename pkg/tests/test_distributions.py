import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy import integrate, optimize, special, stats

from spatialcex.distributions import (
    DeltaLaplaceParams,
    dl_cdf,
    dl_logpdf,
    dl_pdf,
    dl_isf,
    dl_quantile,
    dl_sample,
    dl_scale_for_variance,
    dl_sf,
    dl_to_normal_score,
    dl_variance,
    laplace_cdf,
    laplace_ppf,
    normal_score_to_dl,
)

SHAPES = [0.5, 1.0, 1.74, 2.0, 3.0]


def _quad_pdf(lo, hi, p):
    # independent density written out by hand
    c = p.delta / (2 * p.sigma * special.gamma(1 / p.delta))
    f = lambda z: c * np.exp(-(abs(z - p.mu) / p.sigma) ** p.delta)
    if lo < p.mu < hi:
        return _quad_pdf(lo, p.mu, p) + _quad_pdf(p.mu, hi, p)
    val, _ = integrate.quad(f, lo, hi, epsabs=1e-14, epsrel=1e-13, limit=400)
    return val


def test_pdf_laplace_at_zero():
    assert dl_pdf(0.0, DeltaLaplaceParams(0.0, 1.0, 1.0)) == pytest.approx(0.5, abs=1e-15)


def test_pdf_delta2_is_gaussian_at_mean():
    p = DeltaLaplaceParams(0.3, 2.0, 2.0)
    assert dl_pdf(0.3, p) == pytest.approx(stats.norm.pdf(0.3, 0.3, np.sqrt(2.0)), rel=1e-13)


def test_pdf_normalizes_at_table_values():
    p = DeltaLaplaceParams(0.2, 0.7, 1.6)
    assert _quad_pdf(p.mu - 40 * p.sigma, p.mu + 40 * p.sigma, p) == pytest.approx(1.0, abs=1e-10)
    # the density value itself is positive and symmetric
    v = dl_pdf(1.3, p)
    assert v > 0
    assert v == pytest.approx(dl_pdf(2 * 0.2 - 1.3, p), rel=1e-14)


@pytest.mark.parametrize("delta", SHAPES)
def test_pdf_integrates_to_one(delta):
    p = DeltaLaplaceParams(-0.4, 1.3, delta)
    assert _quad_pdf(-np.inf, np.inf, p) == pytest.approx(1.0, abs=1e-8)


def test_pdf_delta2_grid_matches_gaussian():
    sigma = 0.83
    z = np.linspace(-5, 5, 1001)
    assert_allclose(
        dl_pdf(z, mu=0.1, sigma=sigma, delta=2.0),
        stats.norm.pdf(z, 0.1, sigma / np.sqrt(2)),
        rtol=0,
        atol=1e-12,
    )


def test_pdf_rejects_bad_input():
    with pytest.raises(ValueError):
        dl_pdf(np.inf, DeltaLaplaceParams())
    with pytest.raises(ValueError):
        DeltaLaplaceParams(0.0, -1.0, 1.0)
    with pytest.raises(ValueError):
        dl_pdf(0.0, mu=0.0, sigma=1.0, delta=0.0)


def test_cdf_trivial_values():
    for delta in SHAPES:
        assert dl_cdf(1.7, mu=1.7, sigma=0.4, delta=delta) == pytest.approx(0.5, abs=1e-15)
    assert dl_cdf(1.0, mu=0.0, sigma=1.0, delta=1.0) == pytest.approx(1 - np.exp(-1) / 2, abs=1e-15)
    assert dl_cdf(1.0, mu=0.0, sigma=1.0, delta=1.0) == pytest.approx(0.8161, abs=5e-5)


def test_cdf_matches_quadrature_at_table_shape():
    p = DeltaLaplaceParams(0.0, 1.0, 1.74)
    expected = 0.5 + _quad_pdf(0.0, 0.9, p)
    assert dl_cdf(0.9, p) == pytest.approx(expected, abs=1e-10)


@pytest.mark.parametrize("delta", SHAPES)
@pytest.mark.parametrize("z", [-3.1, -0.6, 0.25, 1.9, 4.4])
def test_cdf_matches_quadrature(delta, z):
    p = DeltaLaplaceParams(0.15, 0.9, delta)
    expected = _quad_pdf(-np.inf, z, p)
    assert dl_cdf(z, p) == pytest.approx(expected, abs=1e-8)
    assert dl_sf(z, p) == pytest.approx(1 - expected, abs=1e-8)


def test_cdf_limits_and_monotone():
    z = np.linspace(-2000, 2000, 40001)
    for delta in SHAPES:
        c = dl_cdf(z, mu=0.0, sigma=1.0, delta=delta)
        assert np.all(np.diff(c) >= 0)
        assert c[0] < 1e-10 and c[-1] > 1 - 1e-10


def test_quantile_trivial_values():
    assert dl_quantile(0.5, mu=0.8, sigma=2.0, delta=1.4) == pytest.approx(0.8, abs=1e-14)
    assert dl_quantile(0.975, mu=0.0, sigma=1.0, delta=1.0) == pytest.approx(-np.log(0.05), rel=1e-12)
    assert dl_quantile(0.975, mu=0.0, sigma=1.0, delta=1.0) == pytest.approx(2.9957, abs=5e-5)


def test_quantile_matches_root_finding():
    p = DeltaLaplaceParams(0.0, 1.0, 1.5)
    root = optimize.brentq(lambda z: _quad_pdf(-np.inf, z, p) - 0.99, 0.0, 10.0, xtol=1e-14)
    assert dl_quantile(0.99, p) == pytest.approx(root, abs=1e-9)
    assert dl_cdf(dl_quantile(0.99, p), p) == pytest.approx(0.99, abs=1e-10)


def test_quantile_rejects_bad_level():
    for q in (0.0, 1.0, -0.1, 1.5, np.nan):
        with pytest.raises(ValueError):
            dl_quantile(q, DeltaLaplaceParams())


@pytest.mark.parametrize("delta", SHAPES)
def test_quantile_cdf_roundtrip(delta):
    mu, sigma = -0.3, 1.2
    z = np.linspace(mu - 6 * sigma, mu + 6 * sigma, 301)
    kw = dict(mu=mu, sigma=sigma, delta=delta)
    lower = z <= mu
    assert_allclose(dl_quantile(dl_cdf(z[lower], **kw), **kw), z[lower], atol=1e-8)
    # above the median the cdf rounds to 1 in double precision for light tails;
    # the upper half is checked through the survivor function instead
    assert_allclose(dl_isf(dl_sf(z[~lower], **kw), **kw), z[~lower], atol=1e-8)
    c = dl_cdf(z, **kw)
    ok = (~lower) & (c < 1 - 1e-6)
    assert_allclose(dl_quantile(c[ok], **kw), z[ok], atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(
    q=st.floats(1e-9, 1 - 1e-9),
    delta=st.floats(0.4, 3.5),
    sigma=st.floats(0.1, 5.0),
)
def test_cdf_of_quantile_is_identity(q, delta, sigma):
    z = dl_quantile(q, mu=0.0, sigma=sigma, delta=delta)
    assert dl_cdf(z, mu=0.0, sigma=sigma, delta=delta) == pytest.approx(q, abs=1e-10)


def test_variance_formula_delta2_and_scale_inverse():
    assert dl_variance(1.0, 2.0) == pytest.approx(0.5, rel=1e-14)
    assert dl_variance(1.0, 1.0) == pytest.approx(2.0, rel=1e-14)
    s = dl_scale_for_variance(0.7, 1.3)
    assert dl_variance(s, 1.3) == pytest.approx(0.7, rel=1e-13)


@pytest.mark.parametrize("delta,target", [(2.0, 0.5), (1.0, 2.0)])
def test_sample_variance(delta, target):
    x = dl_sample(10**6, DeltaLaplaceParams(0.0, 1.0, delta), seed=11)
    n = x.size
    # SE of the sample variance uses the fourth central moment of the sample
    m4 = np.mean((x - x.mean()) ** 4)
    se = np.sqrt((m4 - x.var() ** 2) / n)
    assert abs(x.var() - target) < 3 * se
    assert abs(x.mean()) < 3 * x.std() / np.sqrt(n)


def test_sample_ks_at_table_values():
    p = DeltaLaplaceParams(-0.08, 0.88, 1.74)
    x = dl_sample(10**5, p, seed=3)
    d = stats.kstest(x, lambda z: dl_cdf(z, p)).statistic
    assert d < 0.01


def test_sample_reproducible():
    p = DeltaLaplaceParams(0.0, 1.0, 1.3)
    assert np.array_equal(dl_sample(50, p, seed=5), dl_sample(50, p, seed=5))
    assert not np.array_equal(dl_sample(50, p, seed=5), dl_sample(50, p, seed=6))
    with pytest.raises(ValueError):
        dl_sample(0, p, seed=1)
    with pytest.raises(ValueError):
        dl_sample(3, p, seed=None)


@pytest.mark.parametrize("delta", SHAPES)
def test_normal_score_roundtrip_and_tails(delta):
    z = np.concatenate([np.linspace(-30, 30, 601), [-400.0, 250.0]])
    w = dl_to_normal_score(z, 0.2, 0.9, delta)
    assert np.all(np.isfinite(w))
    assert np.all(np.diff(w[:601]) > 0)
    inner = np.abs(w) < 8
    assert_allclose(stats.norm.cdf(w[inner]), dl_cdf(z[inner], mu=0.2, sigma=0.9, delta=delta), atol=1e-13)
    assert_allclose(normal_score_to_dl(w, 0.2, 0.9, delta), z, rtol=1e-9, atol=1e-9)


def test_normal_score_gaussian_member_is_affine():
    z = np.linspace(-4, 4, 41)
    w = dl_to_normal_score(z, 0.5, np.sqrt(2) * 1.3, 2.0)
    assert_allclose(w, (z - 0.5) / 1.3, atol=1e-12)


def test_logpdf_far_tail_is_finite():
    assert np.isfinite(dl_logpdf(1e6, mu=0.0, sigma=1.0, delta=3.0))


def test_laplace_helpers():
    u = np.array([0.25, 0.5, 0.75])
    assert_allclose(laplace_ppf(u), [-np.log(2.0), 0.0, np.log(2.0)], atol=1e-15)
    assert_allclose(laplace_cdf(laplace_ppf(u)), u, atol=1e-15)
    assert_allclose(dl_cdf(1.3, mu=0.0, sigma=1.0, delta=1.0), laplace_cdf(1.3), atol=1e-15)
