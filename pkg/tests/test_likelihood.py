import json
import math
import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from oracles import naive_composite_nll
from spatialcex.datasets import gaussian_copula_fields
from spatialcex.depmodel import AlphaParams, BModel, ResidualFieldSpec, residual_log_density
from spatialcex.likelihood import (
    ConditionalModelParams,
    FitConfig,
    FittedModel,
    build_params,
    composite_nll,
    composite_nll_grad,
    extract_residuals,
    fit,
    pairwise_fit,
    refit_residuals,
    single_site_nll,
    _from_unconstrained,
    _to_unconstrained,
)
from spatialcex.margins import MarginTag, SpatialDataset, laplace_threshold, to_laplace

LOCS5 = np.array([[0.0, 0.0], [1.0, 0.2], [0.3, 1.4], [2.1, 1.0], [1.5, 2.5]])


def _laplace_data(locs, n, phi, nu, seed):
    W = gaussian_copula_fields(locs, n, phi, nu, seed)
    return to_laplace(SpatialDataset(locs, W))[0]


@pytest.fixture(scope="module")
def data5():
    # 1600 replicates at the 97.5% threshold: 40 exceedances per site, 200 in total
    return _laplace_data(LOCS5, 1600, 1.5, 1.0, 11)


PARAMS = ConditionalModelParams(
    AlphaParams(0.0, 1.2, 0.9),
    BModel("model3", beta=0.4),
    ResidualFieldSpec("conditioned", mu=0.1, sigma=1.1, phi=1.3, nu=1.2, delta1=0.9, delta2=1.1),
)


def _flat(p: ConditionalModelParams):
    r = p.residual
    return dict(Delta=p.alpha.Delta, lam=p.alpha.lam, kappa=p.alpha.kappa, variant=p.b.variant.value,
                beta=p.b.beta, zeta=p.b.zeta, base_variant=r.base_variant.value, mu=r.mu, sigma=r.sigma,
                phi=r.phi, nu=r.nu, delta1=r.delta1, delta2=r.delta2, scale_match=r.scale_match)


def test_two_site_gaussian_matches_closed_form():
    locs = LOCS5[:2]
    data = _laplace_data(locs, 3000, 1.0, 1.0, 2)
    u = laplace_threshold(0.95)
    spec = ResidualFieldSpec("conditioned", mu=0.2, sigma=0.8, phi=1.1, nu=1.0, delta_fixed=2.0)
    p = ConditionalModelParams(AlphaParams(0.0, 0.7, 1.0), BModel("model2", beta=0.3), spec)
    h = np.linalg.norm(locs[0] - locs[1])
    rho = math.exp(-h / 1.1)
    # shape 2 with the Gaussian sd as scale: variance halves
    m, s = 0.2 * (1 - rho), 0.8 * math.sqrt(1 - rho**2) / math.sqrt(2.0)
    a = math.exp(-h / 0.7)
    X = data.observations
    total = 0.0
    for j, k in ((0, 1), (1, 0)):
        x0 = X[X[:, j] > u, j]
        xk = X[X[:, j] > u, k]
        b = x0**0.3
        z = (xk - a * x0) / b
        nll_j = -np.sum(stats.norm.logpdf(z, m, s)) + np.sum(np.log(b))
        assert single_site_nll(data, j, u, p) == pytest.approx(nll_j, abs=1e-8)
        total += nll_j
    assert composite_nll(data, u, p) == pytest.approx(total, abs=1e-8)


def test_unit_scale_has_no_jacobian(data5):
    u = laplace_threshold(0.975)
    p = ConditionalModelParams(AlphaParams(0.0, 1.0, 1.0), BModel("model1", beta=-0.5, zeta=0.0), PARAMS.residual)
    X = data5.observations
    rows = X[:, 2] > u
    others = [0, 1, 3, 4]
    a = np.exp(-np.linalg.norm(LOCS5[others] - LOCS5[2], axis=1))
    z = X[np.ix_(rows, others)] - a * X[rows, 2][:, None]
    expected = -np.sum(residual_log_density(z, LOCS5[others], LOCS5[2], p.residual))
    assert single_site_nll(data5, 2, u, p) == pytest.approx(expected, rel=1e-13)


def test_sigma_sensitivity_and_errors(data5):
    u = laplace_threshold(0.975)
    p2 = ConditionalModelParams(PARAMS.alpha, PARAMS.b, PARAMS.residual.with_(sigma=2.2))
    assert composite_nll(data5, u, p2) != composite_nll(data5, u, PARAMS)
    with pytest.raises(ValueError, match="no exceedances"):
        single_site_nll(data5, 0, 50.0, PARAMS)
    with pytest.raises(ValueError, match="Laplace"):
        composite_nll(SpatialDataset(LOCS5, data5.observations), u, PARAMS)


def test_composite_is_sum_and_permutation_invariant(data5):
    u = laplace_threshold(0.975)
    total = composite_nll(data5, u, PARAMS)
    assert total == pytest.approx(sum(single_site_nll(data5, j, u, PARAMS) for j in range(5)), rel=1e-14)
    perm = np.array([3, 0, 4, 2, 1])
    permuted = SpatialDataset(LOCS5[perm], data5.observations[:, perm], margin_tag=MarginTag.LAPLACE)
    assert composite_nll(permuted, u, PARAMS) == pytest.approx(total, rel=1e-12)


@pytest.mark.parametrize("variant", ["model1", "model2", "model3"])
def test_matches_naive_reference(data5, variant):
    u = laplace_threshold(0.975)
    bm = {"model1": BModel("model1", -0.3, 0.8), "model2": BModel("model2", 0.35), "model3": PARAMS.b}[variant]
    p = ConditionalModelParams(AlphaParams(0.4, 1.2, 0.9), bm, PARAMS.residual)
    ref = naive_composite_nll(LOCS5, data5.observations, u, _flat(p))
    assert composite_nll(data5, u, p) == pytest.approx(ref, abs=1e-8)
    pi = ConditionalModelParams(p.alpha, p.b, ResidualFieldSpec("increments", mu=0.1, phi=1.3, nu=1.2, delta1=0.9, delta2=1.1))
    ref = naive_composite_nll(LOCS5, data5.observations, u, _flat(pi))
    assert composite_nll(data5, u, pi) == pytest.approx(ref, abs=1e-8)
    pv = ConditionalModelParams(p.alpha, p.b, PARAMS.residual.with_(scale_match="variance"))
    ref = naive_composite_nll(LOCS5, data5.observations, u, _flat(pv))
    assert composite_nll(data5, u, pv) == pytest.approx(ref, abs=1e-8)


@pytest.mark.parametrize("variant", ["model1", "model2", "model3"])
def test_gradient_matches_finite_differences(data5, variant):
    u = laplace_threshold(0.975)
    config = FitConfig(b_variant=variant)
    vals = {"lam": 1.2, "kappa": 0.9, "beta": -0.3 if variant == "model1" else 0.4, "zeta": 0.8,
            "mu": 0.1, "sigma": 1.1, "phi": 1.3, "nu": 1.2, "delta1": 0.9, "delta2": 1.1}
    p = build_params(vals, 0.0, config)
    grad = composite_nll_grad(data5, u, p)
    names = ["lam", "kappa", "beta"] + (["zeta"] if variant == "model1" else [])
    for n in names:
        th = _to_unconstrained(n, vals[n], variant)
        step = 1e-5

        def f(t):
            v = dict(vals)
            v[n] = _from_unconstrained(n, t, variant)
            return composite_nll(data5, u, build_params(v, 0.0, config))

        fd = (f(th + step) - f(th - step)) / (2 * step)
        dval = (_from_unconstrained(n, th + 1e-7, variant) - _from_unconstrained(n, th - 1e-7, variant)) / 2e-7
        analytic = grad[n] * dval
        assert abs(analytic - fd) <= 1e-4 * max(abs(fd), 1.0), (n, analytic, fd)


def test_rank_invariance(data5):
    rng = np.random.default_rng(4)
    W = gaussian_copula_fields(LOCS5, 800, 1.5, 1.0, 5)
    a = to_laplace(SpatialDataset(LOCS5, W))[0]
    b = to_laplace(SpatialDataset(LOCS5, np.exp(2 * W) + rng.uniform(0, 0)))[0]
    u = laplace_threshold(0.95)
    assert composite_nll(a, u, PARAMS) == composite_nll(b, u, PARAMS)


@pytest.fixture(scope="module")
def small_fit():
    data = _laplace_data(LOCS5[:4], 6000, 1.5, 1.0, 21)
    u = laplace_threshold(0.95)
    cfg = FitConfig(shape="constant", n_starts=2, screen_maxfev=150, maxiter=1500)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return data, u, cfg, fit(data, u, cfg)


def test_fit_improves_on_start_and_gaussian_alpha(small_fit):
    data, u, cfg, fm = small_fit
    assert fm.fit_info["nll"] <= min(s["nll"] for s in fm.fit_info["starts"]) + 1e-9
    assert fm.fit_info["nll"] == pytest.approx(composite_nll(data, u, fm.params), rel=1e-12)
    h = np.linalg.norm(LOCS5[:4, None] - LOCS5[None, :4], axis=-1)[np.triu_indices(4, 1)]
    from spatialcex.depmodel import alpha_fn

    assert np.all(np.abs(alpha_fn(h, fm.params.alpha) - np.exp(-h / 1.5) ** 2) < 0.15)


def test_refit_from_fitted_point_is_fixed(small_fit):
    data, u, cfg, fm = small_fit
    v = fm.params.values()
    cfg2 = FitConfig(shape="constant", n_starts=1, maxiter=1500, start=v)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fm2 = fit(data, u, cfg2)
    assert fm2.fit_info["nll"] <= fm.fit_info["nll"] + 1e-6
    assert fm2.fit_info["nll"] == pytest.approx(fm.fit_info["nll"], abs=1e-2)


def test_fit_invariant_to_relabelling(small_fit):
    data, u, cfg, fm = small_fit
    perm = np.array([2, 0, 3, 1])
    pd_ = SpatialDataset(data.locations[perm], data.observations[:, perm], margin_tag=MarginTag.LAPLACE)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fm2 = fit(pd_, u, cfg)
    assert fm2.fit_info["nll"] == pytest.approx(fm.fit_info["nll"], abs=1e-3)


def test_nonconvergence_is_flagged(small_fit):
    data, u, _, _ = small_fit
    with pytest.warns(RuntimeWarning, match="converge"):
        fm = fit(data, u, FitConfig(n_starts=1, maxiter=5))
    assert fm.fit_info["converged"] is False and np.isfinite(fm.fit_info["nll"])


def test_fixed_parameters_and_delta_grid(small_fit):
    data, u, _, _ = small_fit
    cfg = FitConfig(shape="constant", fixed={"mu": 0.0, "nu": 1.0}, n_starts=1, maxiter=400,
                    Delta_grid=(0.0, 0.5))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fm = fit(data, u, cfg)
    assert fm.params.residual.mu == 0.0 and fm.params.residual.nu == 1.0
    assert [r["Delta"] for r in fm.fit_info["Delta_profile"]] == [0.0, 0.5]
    best = min(fm.fit_info["Delta_profile"], key=lambda r: r["nll"])
    assert fm.params.alpha.Delta == best["Delta"]
    with pytest.raises(ValueError):
        FitConfig(fixed={"bogus": 1.0})


def test_fitted_model_json_roundtrip(small_fit):
    _, _, _, fm = small_fit
    text = fm.to_json()
    d = json.loads(text)
    assert d["schema_version"] == 1 and d["data"]["n_sites"] == 4 and len(d["data"]["sha256"]) == 64
    back = FittedModel.from_json(text)
    assert back.to_json() == text
    assert back.params.values() == fm.params.values()


def test_beta_constraint_never_violated():
    for t in np.linspace(-50, 50, 101):
        for v in ("model2", "model3"):
            b = _from_unconstrained("beta", t, v)
            assert 0 <= b <= 1 - 1e-6
            BModel(v, b if b > 0 else 1e-300)
        assert _from_unconstrained("beta", t, "model1") < 0 or t < -700
        assert 0 < _from_unconstrained("nu", t, None) <= 2


def test_pairwise_fit_limits():
    locs = np.array([[0.0, 0.0], [0.02, 0.0], [30.0, 0.0]])
    data = _laplace_data(locs, 20000, 2.0, 1.0, 8)
    u = laplace_threshold(0.975)
    df = pairwise_fit(data, u, [(0, 1), (0, 2)])
    near = df[(df.i == 0) & (df.j == 1)].iloc[0]
    far = df[(df.i == 0) & (df.j == 2)].iloc[0]
    assert near.alpha > 0.9
    assert far.alpha < 0.1 and abs(far.delta - 1.0) < 0.25
    assert list(df.distance) == sorted(df.distance)
    with pytest.raises(IndexError):
        pairwise_fit(data, u, [(0, 0)])


def test_extract_residuals_trivial(data5):
    u = laplace_threshold(0.975)
    p = ConditionalModelParams(AlphaParams(0.0, 1e-6, 1.0), BModel("model1", beta=-1.0, zeta=0.0), PARAMS.residual)
    fm = FittedModel(p, u, LOCS5, {})
    res = extract_residuals(data5, fm)
    for blk in res:
        assert np.all(blk.Z[:, blk.j] == 0)
        others = np.delete(np.arange(5), blk.j)
        assert_allclose(blk.Z[:, others], data5.observations[np.ix_(blk.rows, others)], atol=0)


def test_refit_residuals_gaussian():
    rng = np.random.default_rng(3)
    locs = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    spec = ResidualFieldSpec("conditioned", sigma=1.3, phi=1.0, nu=1.0, delta_fixed=2.0)
    from spatialcex.depmodel import residual_sample
    from spatialcex.likelihood import ResidualBlock

    blocks = []
    for j in range(4):
        others = np.delete(np.arange(4), j)
        n = 10 if j == 3 else 3000
        Z = np.zeros((n, 4))
        Z[:, others] = residual_sample(n, locs[others], locs[j], spec, seed=rng) + 0.3
        blocks.append(ResidualBlock(j, np.arange(n), np.full(n, 5.0), Z))
    start = spec.with_(sigma=0.7, phi=0.6)
    with pytest.warns(RuntimeWarning, match="excluded"):
        out = refit_residuals(blocks, locs, start)
    E = out.empirical_means
    for j in range(3):
        assert_allclose(E[j], blocks[j].Z.mean(axis=0), atol=0)
    assert np.all(np.isnan(E[3]))
    assert out.sigma == pytest.approx(1.3, rel=0.05)
    assert out.phi == pytest.approx(1.0, rel=0.15)
