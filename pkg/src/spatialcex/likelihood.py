"""Composite-likelihood inference for the conditional model.

For each conditioning site ``j`` the replicates with ``X(s_j) > u`` give
normalized residuals ``z_k = (x_k - alpha_k x_j) / b_k(x_j)``; the
single-site negative log-likelihood is ``-log f_Z(z) + sum_k log b_k`` and
the composite objective sums this over sites.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize, special

from spatialcex._validation import as_generator, pairwise_distances
from spatialcex.depmodel import (
    AlphaParams,
    BModel,
    BVariant,
    NumericalError,
    ResidualField,
    ResidualFieldSpec,
    ResidualVariant,
    alpha_fn,
    b_fn,
)
from spatialcex.distributions import dl_logpdf
from spatialcex.margins import MarginalTransform, MarginTag, SpatialDataset

__all__ = [
    "SCHEMA_VERSION",
    "ConditionalModelParams",
    "FitConfig",
    "FittedModel",
    "ResidualBlock",
    "single_site_nll",
    "composite_nll",
    "composite_nll_grad",
    "fit",
    "pairwise_fit",
    "extract_residuals",
    "refit_residuals",
    "data_fingerprint",
]

SCHEMA_VERSION = 1
BETA_MAX = 1.0 - 1e-6
_BAD = 1e300


# Parameter containers


@dataclass(frozen=True, eq=False)
class ConditionalModelParams:
    alpha: AlphaParams = field(default_factory=AlphaParams)
    b: BModel = field(default_factory=BModel)
    residual: ResidualFieldSpec = field(default_factory=ResidualFieldSpec)

    def to_dict(self) -> dict:
        r = self.residual
        em = None if r.empirical_means is None else _nan_to_none(r.empirical_means)
        return {
            "alpha": {"Delta": _jfloat(self.alpha.Delta), "lam": self.alpha.lam, "kappa": self.alpha.kappa},
            "b": {"variant": self.b.variant.value, "beta": self.b.beta, "zeta": self.b.zeta},
            "residual": {
                "base_variant": r.base_variant.value,
                "mu": r.mu,
                "sigma": r.sigma,
                "phi": r.phi,
                "nu": r.nu,
                "delta1": r.delta1,
                "delta2": r.delta2,
                "delta_fixed": r.delta_fixed,
                "scale_match": r.scale_match,
                "empirical_means": em,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionalModelParams":
        a = dict(d["alpha"])
        a["Delta"] = float(a["Delta"]) if a["Delta"] is not None else np.inf
        r = dict(d["residual"])
        if r.get("empirical_means") is not None:
            r["empirical_means"] = np.array(
                [[np.nan if v is None else v for v in row] for row in r["empirical_means"]], dtype=float
            )
        return cls(AlphaParams(**a), BModel(**d["b"]), ResidualFieldSpec(**r))

    def values(self) -> dict:
        """Flat name -> value mapping of the free-able parameters."""
        r = self.residual
        out = {
            "lam": self.alpha.lam,
            "kappa": self.alpha.kappa,
            "beta": self.b.beta,
            "zeta": self.b.zeta,
            "mu": r.mu,
            "sigma": r.sigma,
            "phi": r.phi,
            "nu": r.nu,
            "delta1": r.delta1,
            "delta2": r.delta2,
        }
        if r.delta_fixed is not None:
            out["delta"] = r.delta_fixed
        return out


def _jfloat(x):
    return None if not np.isfinite(x) else float(x)


def _nan_to_none(a):
    return [[None if not np.isfinite(v) else float(v) for v in row] for row in np.asarray(a)]


@dataclass
class FitConfig:
    """Settings of :func:`fit`.

    Parameters
    ----------
    b_variant : {"model1", "model2", "model3"}
    residual_variant : {"conditioned", "increments"}
    Delta_grid : sequence of float
        Values of ``Delta`` profiled over; the best is kept.
    shape : {"function", "constant"}
        Distance-varying delta-Laplace shape, or a single free shape.
    scale_match : {"sd", "variance"}
        How the delta-Laplace scale follows the Gaussian field.
    fixed : dict
        Parameters held at given values (names as in
        :meth:`ConditionalModelParams.values`).
    start : dict, optional
        Overrides the moment-based starting point.
    n_starts : int
        Number of starting points (1 to 3: moment-based, mid-range, perturbed).
    screen_maxfev : int
        Evaluations spent on each start before the best one is refined.
    maxiter : int
        Evaluation budget of the final simplex run.
    polish : bool
        Finish with L-BFGS-B.
    seed : int
        Seed of the perturbed start.
    """

    b_variant: str = "model3"
    residual_variant: str = "conditioned"
    Delta_grid: tuple = (0.0,)
    shape: str = "function"
    scale_match: str = "sd"
    fixed: dict = field(default_factory=dict)
    start: dict | None = None
    n_starts: int = 3
    screen_maxfev: int = 300
    maxiter: int = 4000
    xatol: float = 1e-4
    fatol: float = 1e-7
    polish: bool = False
    seed: int = 0

    def __post_init__(self):
        BVariant(self.b_variant)
        ResidualVariant(self.residual_variant)
        self.Delta_grid = tuple(float(x) for x in np.atleast_1d(self.Delta_grid))
        if not self.Delta_grid or any(x < 0 for x in self.Delta_grid):
            raise ValueError("Delta_grid must contain non-negative values")
        if self.shape not in ("function", "constant"):
            raise ValueError("shape must be 'function' or 'constant'")
        if not 1 <= int(self.n_starts) <= 3:
            raise ValueError("n_starts must be 1, 2 or 3")
        self.fixed = {k: float(v) for k, v in dict(self.fixed).items()}
        unknown = set(self.fixed) - set(_all_names(self))
        if unknown:
            raise ValueError(f"unknown fixed parameters: {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["Delta_grid"] = list(self.Delta_grid)
        return d


def _all_names(config: FitConfig) -> list[str]:
    names = ["lam", "kappa", "beta"]
    if config.b_variant == "model1":
        names.append("zeta")
    names.append("mu")
    if config.residual_variant == "conditioned":
        names.append("sigma")
    names += ["phi", "nu"]
    names += ["delta1", "delta2"] if config.shape == "function" else ["delta"]
    return names


def _free_names(config: FitConfig) -> list[str]:
    return [n for n in _all_names(config) if n not in config.fixed]


def _to_unconstrained(name, value, variant):
    if name == "mu":
        return value
    if name == "beta":
        if variant == "model1":
            return math.log(-value)
        return special.logit(min(max(value / BETA_MAX, 1e-12), 1 - 1e-12))
    if name == "nu":
        return special.logit(min(max(value / 2.0, 1e-12), 1 - 1e-12))
    if name == "zeta":
        return math.log(max(value, 1e-300))
    return math.log(value)


def _from_unconstrained(name, theta, variant):
    if name == "mu":
        return theta
    if name == "beta":
        if variant == "model1":
            return -math.exp(theta)
        return BETA_MAX * special.expit(theta)
    if name == "nu":
        return 2.0 * special.expit(theta)
    return math.exp(min(theta, 700.0))


def _defaults(config: FitConfig) -> dict:
    return {
        "lam": 1.0, "kappa": 1.0, "beta": -0.5 if config.b_variant == "model1" else 0.5,
        "zeta": 1.0, "mu": 0.0, "sigma": 1.0, "phi": 1.0, "nu": 1.0,
        "delta1": 1.0, "delta2": 1.0, "delta": 1.5,
    }


def build_params(values: dict, Delta: float, config: FitConfig, empirical_means=None) -> ConditionalModelParams:
    """Assemble parameters from a name -> value mapping under ``config``."""
    v = _defaults(config)
    v.update(values)
    v.update(config.fixed)
    alpha = AlphaParams(Delta=Delta, lam=v["lam"], kappa=v["kappa"])
    zeta = v["zeta"] if config.b_variant == "model1" else 0.0
    b = BModel(config.b_variant, beta=v["beta"], zeta=zeta)
    res = ResidualFieldSpec(
        base_variant=config.residual_variant,
        mu=v["mu"],
        sigma=v["sigma"],
        phi=v["phi"],
        nu=v["nu"],
        delta1=v["delta1"],
        delta2=v["delta2"],
        delta_fixed=v["delta"] if config.shape == "constant" else None,
        scale_match=config.scale_match,
        empirical_means=empirical_means,
    )
    return ConditionalModelParams(alpha, b, res)


# Data preparation


@dataclass
class _Block:
    j: int
    rows: np.ndarray
    x0: np.ndarray
    xk: np.ndarray
    others: np.ndarray
    h0: np.ndarray
    hkl: np.ndarray


def _check_laplace(data: SpatialDataset):
    if not isinstance(data, SpatialDataset):
        raise TypeError("data must be a SpatialDataset")
    if data.margin_tag is not MarginTag.LAPLACE:
        raise ValueError("data must be on the Laplace scale (margin_tag='laplace')")


def _blocks(data: SpatialDataset, u: float, sites=None) -> list[_Block]:
    _check_laplace(data)
    u = float(u)
    if not u > 0:
        raise ValueError("the threshold must be positive on the Laplace scale")
    X = data.observations
    D = pairwise_distances(data.locations)
    d = data.n_sites
    out = []
    for j in range(d) if sites is None else sites:
        rows = np.flatnonzero(X[:, j] > u)
        others = np.delete(np.arange(d), j)
        out.append(
            _Block(j, rows, X[rows, j], X[np.ix_(rows, others)], others, D[j, others], D[np.ix_(others, others)])
        )
    return out


def _empirical_row(spec: ResidualFieldSpec, blk: _Block):
    if spec.empirical_means is None:
        return None
    row = spec.empirical_means[blk.j, blk.others]
    return row


def _block_terms(blk: _Block, params: ConditionalModelParams, *, field: ResidualField | None = None):
    """Per-replicate negative log-likelihood terms and the pieces used by the gradient."""
    a = alpha_fn(blk.h0, params.alpha)
    b = b_fn(blk.x0[:, None], blk.h0[None, :], params.alpha, params.b)
    z = (blk.xk - a * blk.x0[:, None]) / b
    if field is None:
        field = _field(blk, params.residual)
    lp = field.logpdf(z)
    return -lp + np.sum(np.log(b), axis=1), a, b, z, field


def _field(blk: _Block, spec: ResidualFieldSpec) -> ResidualField:
    mean = None
    row = _empirical_row(spec, blk)
    if row is not None:
        model = ResidualField(blk.h0, blk.hkl, spec.with_(empirical_means=None))
        mean = np.where(np.isfinite(row), row, model.mean)
        return ResidualField(blk.h0, blk.hkl, spec, mean=mean)
    return ResidualField(blk.h0, blk.hkl, spec)


def _site_nll(blk: _Block, params) -> float:
    if blk.rows.size == 0:
        raise ValueError(f"site {blk.j} has no exceedances of the threshold")
    terms = _block_terms(blk, params)[0]
    bad = ~np.isfinite(terms)
    if np.any(bad):
        raise NumericalError(
            f"non-finite likelihood term at conditioning site {blk.j}, replicate {int(blk.rows[np.argmax(bad)])}"
        )
    return math.fsum(terms)


def single_site_nll(data: SpatialDataset, j: int, u: float, params: ConditionalModelParams) -> float:
    """Negative log-likelihood from the replicates in which site ``j`` exceeds ``u``."""
    if not 0 <= int(j) < data.n_sites:
        raise IndexError(f"site index {j} out of range")
    return _site_nll(_blocks(data, u, [int(j)])[0], params)


def _composite(blocks, params) -> float:
    return math.fsum(_site_nll(b, params) for b in blocks if b.rows.size)


def composite_nll(data: SpatialDataset, u: float, params: ConditionalModelParams) -> float:
    """Sum of :func:`single_site_nll` over sites with at least one exceedance."""
    blocks = _blocks(data, u)
    if not any(b.rows.size for b in blocks):
        raise ValueError("no site exceeds the threshold")
    return _composite(blocks, params)


def _alpha_derivs(h, p: AlphaParams):
    """d alpha / d lam and d alpha / d kappa."""
    a = alpha_fn(h, p)
    r = np.maximum(h - p.Delta, 0.0) / p.lam if np.isfinite(p.Delta) else np.zeros_like(h)
    active = (h >= p.Delta) & (r > 0)
    rk = np.where(active, r, 1.0) ** p.kappa
    d_lam = np.where(active, a * p.kappa * rk / p.lam, 0.0)
    d_kappa = np.where(active, -a * rk * np.log(np.where(active, r, 1.0)), 0.0)
    return d_lam, d_kappa


def _b_derivs(x0, h, params: ConditionalModelParams, a, b):
    """Partial derivatives of b (n x m) with respect to lam, kappa, beta, zeta."""
    bm = params.b
    x = x0[:, None]
    zeros = np.zeros_like(b)
    if bm.variant is BVariant.MODEL1:
        xb = x**bm.beta
        return {"lam": zeros, "kappa": zeros, "beta": -bm.zeta * xb * np.log(x) * b**2, "zeta": -xb * b**2}
    if bm.variant is BVariant.MODEL2:
        return {"lam": zeros, "kappa": zeros, "beta": b * np.log(x), "zeta": zeros}
    ax = a[None, :] * x
    pos = ax > 0
    axb = np.where(pos, ax, 1.0) ** bm.beta
    d_beta = np.where(pos, axb * np.log(np.where(pos, ax, 1.0)), 0.0)
    d_alpha = np.where(pos, bm.beta * axb / np.where(pos, a[None, :], 1.0), 0.0)
    da_lam, da_kappa = _alpha_derivs(h, params.alpha)
    return {"lam": d_alpha * da_lam, "kappa": d_alpha * da_kappa, "beta": d_beta, "zeta": zeros}


def composite_nll_grad(data: SpatialDataset, u: float, params: ConditionalModelParams) -> dict:
    """Analytic gradient of :func:`composite_nll` in the normalization parameters.

    Returns a mapping with keys ``lam``, ``kappa``, ``beta`` and ``zeta``.
    """
    grad = {"lam": 0.0, "kappa": 0.0, "beta": 0.0, "zeta": 0.0}
    for blk in _blocks(data, u):
        if blk.rows.size == 0:
            continue
        _, a, b, z, fld = _block_terms(blk, params)
        g = fld.dlogpdf_dz(z)
        da_lam, da_kappa = _alpha_derivs(blk.h0, params.alpha)
        db = _b_derivs(blk.x0, blk.h0, params, a, b)
        x = blk.x0[:, None]
        for name, da in (("lam", da_lam), ("kappa", da_kappa), ("beta", None), ("zeta", None)):
            dz = -z * db[name] / b
            if da is not None:
                dz = dz - x * da[None, :] / b
            grad[name] += float(np.sum(-g * dz + db[name] / b))
    return grad


# Fitting


def data_fingerprint(data: SpatialDataset) -> dict:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data.locations, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(data.observations, dtype="<f8").tobytes())
    return {"n_replicates": data.n_replicates, "n_sites": data.n_sites, "sha256": h.hexdigest()}


@dataclass(eq=False)
class FittedModel:
    """Fitted parameters together with the threshold, margins and fit record."""

    params: ConditionalModelParams
    threshold_u: float
    locations: np.ndarray
    fit_info: dict
    transforms: MarginalTransform | None = None
    site_ids: list | None = None
    config: FitConfig | None = None
    fingerprint: dict | None = None

    def __post_init__(self):
        if not self.threshold_u > 0:
            raise ValueError("threshold_u must be positive")
        self.locations = np.asarray(self.locations, dtype=float)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "params": self.params.to_dict(),
            "threshold_u": self.threshold_u,
            "locations": self.locations.tolist(),
            "site_ids": self.site_ids,
            "fit_info": self.fit_info,
            "config": None if self.config is None else self.config.to_dict(),
            "data": self.fingerprint,
            "transforms": None if self.transforms is None else self.transforms.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported fitted-model schema version {d.get('schema_version')!r}")
        cfg = None if d.get("config") is None else FitConfig(**d["config"])
        tr = None if d.get("transforms") is None else MarginalTransform.from_dict(d["transforms"])
        return cls(
            params=ConditionalModelParams.from_dict(d["params"]),
            threshold_u=float(d["threshold_u"]),
            locations=np.asarray(d["locations"], dtype=float),
            fit_info=d["fit_info"],
            transforms=tr,
            site_ids=d.get("site_ids"),
            config=cfg,
            fingerprint=d.get("data"),
        )

    @classmethod
    def from_json(cls, text: str) -> "FittedModel":
        return cls.from_dict(json.loads(text))


def _moment_start(blocks, Delta, config: FitConfig) -> dict:
    """Crude starting values from conditional mean ratios."""
    hs, rs, zs = [], [], []
    for blk in blocks:
        if blk.rows.size == 0:
            continue
        ratio = np.mean(blk.xk, axis=0) / np.mean(blk.x0)
        hs.append(blk.h0)
        rs.append(ratio)
    h = np.concatenate(hs)
    r = np.clip(np.concatenate(rs), 0.02, 0.98)
    keep = h > Delta
    start = _defaults(config)
    med = float(np.median(h))
    if keep.sum() >= 2 and np.ptp(np.log(h[keep] - Delta + 1e-12)) > 1e-6:
        yy = np.log(-np.log(r[keep]))
        xx = np.log(h[keep] - Delta + 1e-12)
        slope, icpt = np.polyfit(xx, yy, 1)
        kappa = float(np.clip(slope, 0.2, 2.0))
        lam = float(np.exp(-icpt / kappa)) if slope > 0 else med
        start["kappa"] = kappa
        start["lam"] = float(np.clip(lam, 1e-3 * med, 1e3 * med))
    else:
        start["lam"] = med
    start["phi"] = start["lam"]
    start["delta1"] = med
    params = build_params(start, Delta, config)
    for blk in blocks:
        if blk.rows.size == 0:
            continue
        a = alpha_fn(blk.h0, params.alpha)
        b = b_fn(blk.x0[:, None], blk.h0[None, :], params.alpha, params.b)
        zs.append(((blk.xk - a * blk.x0[:, None]) / b).ravel())
    z = np.concatenate(zs)
    start["mu"] = float(np.clip(np.mean(z), -2.0, 2.0))
    start["sigma"] = float(np.clip(np.std(z), 0.1, 10.0))
    if config.residual_variant == "increments":
        start["phi"] = med
    return start


def _midrange_start(blocks, config: FitConfig) -> dict:
    med = float(np.median(np.concatenate([b.h0 for b in blocks])))
    s = _defaults(config)
    s.update(lam=med, phi=med, delta1=med)
    return s


def _simplex(x0, step=0.5):
    n = x0.size
    sim = np.tile(x0, (n + 1, 1))
    sim[1:] += step * np.eye(n)
    return sim


def _run_nm(fun, x0, maxfev, config):
    return optimize.minimize(
        fun, x0, method="Nelder-Mead",
        options={"initial_simplex": _simplex(x0), "maxfev": int(maxfev), "maxiter": int(maxfev),
                 "xatol": config.xatol, "fatol": config.fatol, "adaptive": x0.size > 4},
    )


def _fit_one_delta(blocks, Delta, config: FitConfig, empirical_means=None):
    names = _free_names(config)
    var = config.b_variant

    def unpack(theta):
        return {n: _from_unconstrained(n, t, var) for n, t in zip(names, theta)}

    def objective(theta):
        try:
            params = build_params(unpack(theta), Delta, config, empirical_means)
            val = _composite(blocks, params)
        except (ValueError, NumericalError, FloatingPointError, np.linalg.LinAlgError):
            return _BAD
        return val if np.isfinite(val) else _BAD

    base = _moment_start(blocks, Delta, config)
    if config.start:
        base.update(config.start)
    starts = [("moment", base)]
    if config.n_starts >= 2:
        mid = _midrange_start(blocks, config)
        starts.append(("midrange", mid))
    theta0 = np.array([_to_unconstrained(n, base[n], var) for n in names])
    if config.n_starts >= 3:
        rng = as_generator(config.seed)
        pert = theta0 + rng.normal(0.0, 0.5, size=theta0.size)
        starts.append(("perturbed", unpack(pert)))

    if not names:
        val = objective(np.empty(0))
        return unpack(np.empty(0)), val, {"converged": True, "nfev": 1, "nit": 0, "starts": []}

    screened = []
    for label, s in starts:
        th = np.array([_to_unconstrained(n, s[n], var) for n in names])
        if len(starts) > 1:
            res = _run_nm(objective, th, config.screen_maxfev, config)
            screened.append((res.fun, label, res.x, res.nfev))
        else:
            screened.append((objective(th), label, th, 1))
    screened.sort(key=lambda t: (t[0], t[1]))
    best_f, _, best_x, _ = screened[0]
    res = _run_nm(objective, best_x, config.maxiter, config)
    nfev = sum(s[3] for s in screened) + res.nfev
    x, f, converged, nit = res.x, res.fun, bool(res.success), int(res.nit)
    if config.polish:
        pol = optimize.minimize(objective, x, method="L-BFGS-B", options={"maxiter": 200})
        nfev += pol.nfev
        if pol.fun < f:
            x, f = pol.x, pol.fun
        converged = converged or bool(pol.success)
    info = {
        "converged": bool(converged and f < _BAD),
        "nfev": int(nfev),
        "nit": nit,
        "starts": [{"label": s[1], "nll": float(s[0])} for s in sorted(screened, key=lambda t: t[1])],
    }
    return unpack(x), float(f), info


def fit(data: SpatialDataset, u: float, config: FitConfig | None = None, *, transforms=None) -> FittedModel:
    """Maximize the composite likelihood, profiling ``Delta`` over ``config.Delta_grid``.

    Non-convergence is reported through ``fit_info["converged"]`` rather than
    raised; the best iterate is returned.
    """
    config = FitConfig() if config is None else config
    blocks = _blocks(data, u)
    n_exc = [int(b.rows.size) for b in blocks]
    if not any(n_exc):
        raise ValueError("no site exceeds the threshold")
    profile = []
    best = None
    for Delta in config.Delta_grid:
        vals, f, info = _fit_one_delta(blocks, Delta, config)
        profile.append({"Delta": Delta, "nll": f, "converged": info["converged"]})
        if best is None or f < best[1]:
            best = (Delta, f, vals, info)
    Delta, f, vals, info = best
    params = build_params(vals, Delta, config)
    fit_info = {
        "nll": f,
        "converged": info["converged"],
        "nfev": info["nfev"],
        "nit": info["nit"],
        "starts": info["starts"],
        "n_exceedances": n_exc,
        "Delta_profile": profile,
        "free_parameters": _free_names(config),
    }
    if not info["converged"]:
        warnings.warn("composite-likelihood optimization did not converge", RuntimeWarning, stacklevel=2)
    return FittedModel(
        params=params,
        threshold_u=float(u),
        locations=data.locations.copy(),
        fit_info=fit_info,
        transforms=transforms,
        site_ids=list(data.site_ids) if data.site_ids is not None else None,
        config=config,
        fingerprint=data_fingerprint(data),
    )


# Pairwise fits


def _pair_nll(theta, x_cond, x_other, variant):
    alpha = special.expit(theta[0])
    beta = BETA_MAX * special.expit(theta[1])
    mu, sigma, delta = theta[2], math.exp(theta[3]), math.exp(theta[4])
    if variant == "model2":
        b = x_cond**beta
    else:
        b = 1.0 + (alpha * x_cond) ** beta
    z = (x_other - alpha * x_cond) / b
    val = -np.sum(dl_logpdf(z, mu=mu, sigma=sigma, delta=delta)) + np.sum(np.log(b))
    return float(val) if np.isfinite(val) else _BAD


def pairwise_fit(data: SpatialDataset, u: float, pairs, *, b_variant: str = "model3") -> pd.DataFrame:
    """Scalar conditional model fitted to each site pair.

    One parameter set ``(alpha, beta, mu, sigma, delta)`` is shared by both
    conditioning directions of a pair.  Returns one row per pair sorted by
    distance, with a ``converged`` flag.
    """
    _check_laplace(data)
    if b_variant not in ("model2", "model3"):
        raise ValueError("pairwise fits support model2 and model3")
    X = data.observations
    D = pairwise_distances(data.locations)
    rows = []
    for i, j in pairs:
        i, j = int(i), int(j)
        if i == j or not (0 <= i < data.n_sites and 0 <= j < data.n_sites):
            raise IndexError(f"invalid pair ({i}, {j})")
        a_rows = X[:, i] > u
        b_rows = X[:, j] > u
        xc = np.concatenate([X[a_rows, i], X[b_rows, j]])
        xo = np.concatenate([X[a_rows, j], X[b_rows, i]])
        if xc.size == 0:
            rows.append({"i": i, "j": j, "distance": D[i, j], "n": 0, "alpha": np.nan, "beta": np.nan,
                         "mu": np.nan, "sigma": np.nan, "delta": np.nan, "nll": np.nan, "converged": False})
            continue
        r0 = float(np.clip(np.mean(xo) / np.mean(xc), 0.02, 0.98))
        best = None
        for a0, d0 in ((r0, 1.5), (0.5, 1.0), (0.05, 1.0)):
            th0 = np.array([special.logit(a0), 0.0, 0.0, 0.0, math.log(d0)])
            res = optimize.minimize(_pair_nll, th0, args=(xc, xo, b_variant), method="Nelder-Mead",
                                    options={"initial_simplex": _simplex(th0), "maxfev": 3000,
                                             "xatol": 1e-6, "fatol": 1e-8})
            if best is None or res.fun < best.fun:
                best = res
        t = best.x
        rows.append({
            "i": i, "j": j, "distance": float(D[i, j]), "n": int(xc.size),
            "alpha": float(special.expit(t[0])), "beta": float(BETA_MAX * special.expit(t[1])),
            "mu": float(t[2]), "sigma": math.exp(t[3]), "delta": math.exp(t[4]),
            "nll": float(best.fun), "converged": bool(best.success),
        })
    cols = ["i", "j", "distance", "n", "alpha", "beta", "mu", "sigma", "delta", "nll", "converged"]
    df = pd.DataFrame(rows, columns=cols)
    return df.sort_values(["distance", "i", "j"], kind="mergesort").reset_index(drop=True)


# Residuals


@dataclass
class ResidualBlock:
    """Residuals for one conditioning site.

    ``Z`` has one row per replicate exceeding the threshold at site ``j`` and
    one column per site; column ``j`` is identically zero.
    """

    j: int
    rows: np.ndarray
    x0: np.ndarray
    Z: np.ndarray

    @property
    def n(self) -> int:
        return int(self.rows.size)


def extract_residuals(data: SpatialDataset, fitted: FittedModel) -> list[ResidualBlock]:
    """Normalized residuals for every conditioning site under the fitted model."""
    _check_laplace(data)
    if data.locations.shape != fitted.locations.shape:
        raise ValueError("data and fitted model have different site sets")
    X = data.observations
    D = pairwise_distances(data.locations)
    p = fitted.params
    out = []
    for j in range(data.n_sites):
        rows = np.flatnonzero(X[:, j] > fitted.threshold_u)
        x0 = X[rows, j]
        a = alpha_fn(D[j], p.alpha)
        b = b_fn(x0[:, None], D[j][None, :], p.alpha, p.b) if rows.size else np.ones((0, data.n_sites))
        Z = (X[rows] - a * x0[:, None]) / b
        Z[:, j] = 0.0
        out.append(ResidualBlock(j, rows, x0, Z))
    return out


_RESID_NAMES = {
    "conditioned": ["sigma", "phi", "nu"],
    "increments": ["phi", "nu"],
}


def refit_residuals(residuals, sites, spec: ResidualFieldSpec, *, min_exceedances: int = 20,
                    maxiter: int = 3000) -> ResidualFieldSpec:
    """Refit the residual field with its mean fixed at the per-site empirical means.

    Conditioning sites with fewer than ``min_exceedances`` residual vectors are
    excluded (with a warning); their row of ``empirical_means`` is NaN.
    """
    sites = np.asarray(sites, dtype=float)
    d = sites.shape[0]
    D = pairwise_distances(sites)
    E = np.full((d, d), np.nan)
    used = []
    for blk in residuals:
        if blk.Z.shape[1] != d:
            raise ValueError("residual blocks do not match the site set")
        if blk.n < int(min_exceedances):
            if blk.n:
                warnings.warn(f"site {blk.j} excluded from the residual refit ({blk.n} < {min_exceedances})",
                              RuntimeWarning, stacklevel=2)
            continue
        E[blk.j] = blk.Z.mean(axis=0)
        E[blk.j, blk.j] = 0.0
        others = np.delete(np.arange(d), blk.j)
        used.append((blk, others))
    if not used:
        raise ValueError("no conditioning site has enough residuals to refit")
    names = list(_RESID_NAMES[spec.base_variant.value])
    names += ["delta"] if spec.delta_fixed is not None else ["delta1", "delta2"]

    def make(theta):
        v = {n: _from_unconstrained(n, t, None) for n, t in zip(names, theta)}
        if "delta" in v:
            v["delta_fixed"] = v.pop("delta")
        return spec.with_(empirical_means=E, **v)

    def objective(theta):
        try:
            s = make(theta)
            total = []
            for blk, others in used:
                fld = ResidualField(D[blk.j, others], D[np.ix_(others, others)], s, mean=E[blk.j, others])
                total.append(np.sum(fld.logpdf(blk.Z[:, others])))
            val = -math.fsum(total)
        except (ValueError, NumericalError, FloatingPointError, np.linalg.LinAlgError):
            return _BAD
        return val if np.isfinite(val) else _BAD

    cur = {"sigma": spec.sigma, "phi": spec.phi, "nu": spec.nu, "delta1": spec.delta1,
           "delta2": spec.delta2, "delta": spec.delta_fixed}
    th0 = np.array([_to_unconstrained(n, cur[n], None) for n in names])
    # smooth objective from a warm start: quasi-Newton first, simplex as fallback
    res = optimize.minimize(objective, th0, method="L-BFGS-B", options={"maxfun": maxiter})
    if not res.success or res.fun >= _BAD:
        res = optimize.minimize(objective, th0, method="Nelder-Mead",
                                options={"initial_simplex": _simplex(th0), "maxfev": maxiter, "xatol": 1e-5,
                                         "fatol": 1e-8, "adaptive": th0.size > 4})
    if not res.success:
        warnings.warn("residual refit did not converge", RuntimeWarning, stacklevel=2)
    return make(res.x)
