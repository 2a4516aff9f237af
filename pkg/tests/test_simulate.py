import json

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from model_builders import TRI, U, hr_model, independent_model, model3
from oracles import hr_expectation, hr_log_spectral
from spatialcex.datasets import gaussian_copula_fields
from spatialcex.depmodel import alpha_fn, b_fn
from spatialcex.distributions import laplace_cdf
from spatialcex.margins import SpatialDataset, to_laplace
from spatialcex.simulate import (
    ImportanceSample,
    empirical_max_proportions,
    importance_estimate,
    importance_sample,
    importance_subsample,
    infill_sim,
    sim_given_site,
    sim_rejection,
    unconditional_prob,
    weighted_estimate,
    write_simulation,
)

def test_given_site_exceedance_is_exponential():
    fm = model3(TRI)
    X, x0 = sim_given_site(fm, TRI[0], TRI, U + 0.5, 100_000, seed=1, return_x0=True)
    assert np.array_equal(X[:, 0], x0)
    assert stats.kstest(x0 - U - 0.5, "expon").statistic < 0.01
    with pytest.raises(ValueError):
        sim_given_site(fm, TRI[0], TRI, U - 0.1, 10, seed=1)


def test_given_site_far_margin_is_laplace():
    locs = np.array([[0.0, 0.0], [50.0, 0.0]])
    X = sim_given_site(independent_model(locs), locs[0], locs[1:], U, 100_000, seed=2)
    assert stats.kstest(X[:, 0], laplace_cdf).statistic < 0.01


def test_given_site_conditional_mean_regression():
    fm = model3(TRI)
    X, x0 = sim_given_site(fm, TRI[0], TRI[1:2], U, 400_000, seed=3, return_x0=True)
    h = 1.0
    a = alpha_fn(h, fm.params.alpha)
    rf_mean = 0.1 * (1 - np.exp(-h / 1.5))
    edges = [U, U + 0.5, U + 1.0, U + 2.0, U + 4.0]
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (x0 >= lo) & (x0 < hi)
        b = b_fn(x0[sel], h, fm.params.alpha, fm.params.b)
        expected = np.mean(a * x0[sel] + b * rf_mean)
        se = X[sel, 0].std() / np.sqrt(sel.sum())
        assert abs(X[sel, 0].mean() - expected) < 4 * se


def test_given_site_off_grid_conditioning_and_determinism():
    fm = model3(TRI)
    s0 = np.array([0.3, 0.3])
    A = sim_given_site(fm, s0, TRI, U, 50, seed=9)
    B = sim_given_site(fm, s0, TRI, U, 50, seed=9)
    assert np.array_equal(A, B) and A.shape == (50, 3)


def test_excess_independent_of_residual_summary():
    fm = model3(TRI)
    X, x0 = sim_given_site(fm, TRI[0], TRI[1:], U, 2000, seed=4, return_x0=True)
    a = alpha_fn(np.array([1.0, 1.0]), fm.params.alpha)
    b = b_fn(x0[:, None], np.array([[1.0, 1.0]]), fm.params.alpha, fm.params.b)
    Z = (X - a * x0[:, None]) / b
    tau = stats.kendalltau(x0, Z.mean(axis=1)).statistic
    n = len(x0)
    assert abs(tau) < 3 * np.sqrt(2 * (2 * n + 5) / (9 * n * (n - 1)))


def test_importance_trivial_identities():
    fm = hr_model(TRI)
    est, se = importance_estimate(fm, [0, 1, 2], U, lambda X: np.ones(len(X)), 5000, seed=1)
    assert est == 1.0 and se == 0.0
    est, _ = importance_estimate(fm, [0, 1, 2], U, lambda X: (X.max(axis=1) > U).astype(float), 5000, seed=1)
    assert est == 1.0
    # a single site: plain Monte Carlo mean under the single-site law
    est, se, s = importance_estimate(fm, [1], U, lambda X: X[:, 0], 5000, seed=2, return_sample=True)
    assert np.all(s.weight == 1.0) and est == pytest.approx(s.draws[:, 0].mean(), rel=1e-14)


def test_importance_sample_invariants():
    fm = model3(TRI)
    samples = importance_sample(fm, [0, 1, 2], [U, U + 2.0], 3000, seed=5)
    for s in samples:
        assert np.all(s.exceed_count >= 1)
        assert np.all(s.draws[np.arange(s.n), s.component] > s.v)
        assert np.array_equal(s.weight, 1.0 / s.exceed_count)
    single = importance_sample(fm, [0, 1, 2], U + 2.0, 3000, seed=5)
    assert np.array_equal(single.draws, samples[1].draws)


def test_enumeration_identity_two_sites():
    # finite toy law with exchangeable coordinates; each support point listed once
    v = 1.0
    vals = np.array([0.2, 0.9, 1.3, 2.0, 3.5])
    rng = np.random.default_rng(0)
    pts = np.array([(a, b) for a in vals for b in vals if rng.random() < 0.7])
    pts = np.unique(np.vstack([pts, pts[:, ::-1]]), axis=0)
    g = lambda X: X[:, 0] ** 2 + np.sin(X[:, 1])
    ext = pts[pts.max(axis=1) > v]
    direct = np.mean(g(ext))
    # the mixture of the two single-site laws, enumerated: one entry per (point, exceeding site)
    draws, comp = [], []
    for j in range(2):
        sel = pts[pts[:, j] > v]
        draws.append(sel)
        comp.append(np.full(len(sel), j))
    s = ImportanceSample.from_draws(np.vstack(draws), np.concatenate(comp), v, np.arange(2))
    est, _ = weighted_estimate(s, g)
    assert est == pytest.approx(direct, abs=1e-12)


def test_importance_matches_hr_brute_force():
    fm = hr_model(TRI)
    g = lambda X: np.all(X > U, axis=1).astype(float)
    est, se = importance_estimate(fm, [0, 1, 2], U, g, 100_000, seed=6)
    rng = np.random.default_rng(7)
    ref, se_ref = hr_expectation(hr_log_spectral(TRI, 1.0, 1.0, 1_000_000, rng), U, g, rng)
    assert abs(est - ref) < 3 * np.hypot(se, se_ref)


def test_non_finite_g_is_reported():
    fm = hr_model(TRI)
    with pytest.raises(ValueError, match="draw"):
        importance_estimate(fm, [0, 1, 2], U, lambda X: np.where(X[:, 0] > 4, np.nan, 1.0), 1000, seed=1)


def test_subsample_properties():
    fm = hr_model(TRI)
    s = importance_sample(fm, [0, 1, 2], U, 20_000, seed=8)
    g = lambda X: X.max(axis=1)
    est, se = weighted_estimate(s, g)
    sub = importance_subsample(s, 5000, seed=9)
    assert abs(g(sub).mean() - est) < 3 * np.hypot(se, g(sub).std() / np.sqrt(5000))
    with pytest.raises(ValueError):
        importance_subsample(s, s.n, seed=1)
    one = importance_sample(fm, [0], U, 100, seed=1)
    assert importance_subsample(one, 40, seed=2).shape == (40, 1)


def test_subsample_uniform_when_weights_equal():
    locs = np.array([[0.0, 0.0], [50.0, 0.0]])
    fm = independent_model(locs)
    s = importance_sample(fm, [0, 1], 12.0, 400, seed=3)
    assert np.all(s.weight == 1.0)
    idx_counts = np.zeros(s.n)
    for k in range(400):
        sub = importance_subsample(s, 200, seed=k)
        idx_counts[np.flatnonzero(np.isin(s.draws[:, 0], sub[:, 0]))] += 1
    assert stats.chisquare(idx_counts).pvalue > 0.01


def test_rejection_single_site_and_proportions():
    fm = model3(TRI)
    r = sim_rejection(fm, [1], U, 500, seed=3, pi=[1.0])
    assert r.acceptance_rate == 1.0
    assert np.array_equal(r.draws, sim_given_site(fm, TRI[1], TRI[[1]], U, 500, seed=3))
    locs = np.array([[0.0, 0.0], [1.0, 0.0]])
    data = to_laplace(SpatialDataset(locs, gaussian_copula_fields(locs, 40_000, 1.0, 1.0, 1)))[0]
    pi = empirical_max_proportions(data, [0, 1], U)
    assert_allclose(pi, [0.5, 0.5], atol=0.05)
    with pytest.warns(RuntimeWarning, match="unavailable"):
        sim_rejection(model3(locs), [0, 1], U, 50, seed=1, pi=[1.0, 0.0])


def test_rejection_and_importance_agree():
    fm = hr_model(TRI)
    rej = sim_rejection(fm, [0, 1, 2], U, 6000, seed=10, pi=np.full(3, 1 / 3))
    assert 0 < rej.acceptance_rate < 1
    s = importance_sample(fm, [0, 1, 2], U, 40_000, seed=11)
    sub = importance_subsample(s, 6000, seed=12)
    for stat in (lambda X: X.max(axis=1), lambda X: (X > U).sum(axis=1), lambda X: X[:, 1]):
        assert stats.ks_2samp(stat(rej.draws), stat(sub)).pvalue > 0.01


def test_rejection_with_unequal_component_probabilities():
    # one isolated site: the maximum is far more often there than at either close site
    locs = np.array([[0.0, 0.0], [0.3, 0.0], [2.5, 0.0]])
    fm = hr_model(locs)
    rng = np.random.default_rng(13)
    logY = hr_log_spectral(locs, 1.0, 1.0, 1_000_000, rng)
    M = np.exp(logY.max(axis=1))
    pi = np.bincount(logY.argmax(axis=1), weights=M, minlength=3) / M.sum()
    assert pi[2] > 0.4
    rej = sim_rejection(fm, [0, 1, 2], U, 6000, seed=14, pi=pi)
    assert_allclose(np.bincount(rej.component, minlength=3) / 6000, pi, atol=0.03)
    s = importance_sample(fm, [0, 1, 2], U, 60_000, seed=15)
    sub = importance_subsample(s, 6000, seed=16)
    for stat in (lambda X: X[:, 2] - X[:, 0], lambda X: (X > U).sum(axis=1), lambda X: X.argmax(axis=1)):
        assert stats.ks_2samp(stat(rej.draws), stat(sub)).pvalue > 0.01


def test_unconditional_probability():
    fm = hr_model(TRI)
    assert unconditional_prob(fm, [2], U, 10, seed=1) == (0.5 * np.exp(-U), 0.0)
    p, se = unconditional_prob(fm, [0, 1, 2], U, 100_000, seed=2)
    rng = np.random.default_rng(3)
    logY = hr_log_spectral(TRI, 1.0, 1.0, 1_000_000, rng)
    M = np.exp(logY.max(axis=1))
    ref = 0.5 * np.exp(-U) * M.mean()
    se_ref = 0.5 * np.exp(-U) * M.std() / np.sqrt(len(M))
    assert abs(p - ref) < 3 * np.hypot(se, se_ref)
    locs = np.array([[0.0, 0.0], [50.0, 0.0]])
    p, se = unconditional_prob(independent_model(locs), [0, 1], U, 100_000, seed=4)
    q = 0.5 * np.exp(-U)
    assert abs(p - (1 - (1 - q) ** 2)) < 3 * se + 1e-12


def _gauss_infill_reference(fm, s0, x0, D, yD, L):
    from spatialcex.depmodel import residual_gauss_moments

    allp = np.vstack([D, L])
    m, C = residual_gauss_moments(allp, s0, fm.params.residual)
    if fm.params.residual.scale_match == "sd":
        C = C / 2
    nD = len(D)
    p = fm.params
    hD = np.linalg.norm(D - s0, axis=1)
    hL = np.linalg.norm(L - s0, axis=1)
    zD = (yD - alpha_fn(hD, p.alpha) * x0) / b_fn(np.array([x0]), hD, p.alpha, p.b)
    K = C[nD:, :nD] @ np.linalg.inv(C[:nD, :nD])
    mu = m[nD:] + K @ (zD - m[:nD])
    S = C[nD:, nD:] - K @ C[:nD, nD:]
    aL = alpha_fn(hL, p.alpha)
    bL = b_fn(np.array([x0]), hL, p.alpha, p.b)
    return aL * x0 + bL * mu, S * np.outer(bL, bL)


def test_infill_gaussian_case_matches_conditioning():
    locs = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, 0.4], [1.6, 0.7]])
    fm = model3(locs, delta_fixed=2.0)
    D, L = locs[1:4], locs[4:]
    x0, yD = 5.0, np.array([3.1, 2.2, 1.4])
    n = 100_000
    out = infill_sim(fm, locs[0], x0, D, yD, L, n, seed=1)
    mean, cov = _gauss_infill_reference(fm, locs[0], x0, D, yD, L)
    se_m = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(out.mean(axis=0) - mean) < 3 * se_m)
    se_c = np.sqrt((cov**2 + np.outer(np.diag(cov), np.diag(cov))) / n)
    assert np.all(np.abs(np.cov(out.T) - cov) < 3 * se_c)


def test_infill_variance_vanishes_near_observed_site():
    locs = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    fm = model3(locs)
    out = infill_sim(fm, locs[0], 4.0, locs[1:], [2.0, 1.0], [[1.0 + 1e-7, 0.0]], 2000, seed=2)
    assert out.std() < 1e-3
    with pytest.raises(ValueError):
        infill_sim(fm, locs[0], 4.0, locs[1:], [2.0, 1.0], locs[1:2], 10, seed=2)
    with pytest.raises(ValueError):
        infill_sim(fm, locs[0], U - 0.5, locs[1:], [2.0, 1.0], [[3.0, 3.0]], 10, seed=2)


def test_infill_interval_coverage():
    rng = np.random.default_rng(13)
    locs = np.array([[0.0, 0.0], [0.8, 0.1], [0.2, 0.9], [1.1, 1.0], [0.6, 0.5], [1.5, 0.3], [0.4, 1.6]])
    fm = model3(locs)
    D, L = locs[1:5], locs[5:]
    hits = []
    for r in range(300):
        X, x0 = sim_given_site(fm, locs[0], locs[1:], U, 1, seed=rng, return_x0=True)
        out = infill_sim(fm, locs[0], x0[0], D, X[0, :4], L, 400, seed=rng)
        lo, hi = np.quantile(out, [0.05, 0.95], axis=0)
        hits.append((X[0, 4:] >= lo) & (X[0, 4:] <= hi))
    cover = np.mean(hits)
    assert 0.85 <= cover <= 0.95


def test_write_simulation(tmp_path):
    fm = model3(TRI)
    s = importance_sample(fm, [0, 1, 2], U, 20, seed=1)
    meta = {"v": s.v, "sites": s.sites, "seed": 1, "component": s.component, "weight": s.weight}
    write_simulation(tmp_path / "sim.csv", s.draws, ["a", "b", "c"], meta)
    lines = (tmp_path / "sim.csv").read_text().splitlines()
    assert lines[0] == "a,b,c" and len(lines) == 21
    side = json.loads((tmp_path / "sim.json").read_text())
    assert side["sites"] == [0, 1, 2] and len(side["weight"]) == 20
    back = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
    assert np.array_equal(back, s.draws)
