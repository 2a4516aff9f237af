"""Simulation from the fitted conditional model.

* conditional draws given an extreme at one site,
* draws of the field given that its maximum over a site set exceeds ``v``,
  by rejection or by importance sampling from the equal-weight mixture of
  single-site conditional laws,
* unconditional probabilities of ``max > v``,
* conditional infill of unobserved sites given partial observations.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg

from spatialcex._validation import (
    as_generator,
    check_coords,
    check_point,
    check_site_indices,
    pairwise_distances,
    spawn_seeds,
)
from spatialcex.depmodel import NumericalError, ResidualField, alpha_fn, b_fn
from spatialcex.likelihood import FittedModel
from spatialcex.margins import SpatialDataset

__all__ = [
    "ImportanceSample",
    "RejectionSample",
    "sim_given_site",
    "sim_rejection",
    "importance_sample",
    "importance_estimate",
    "weighted_estimate",
    "importance_subsample",
    "unconditional_prob",
    "infill_sim",
    "write_simulation",
]


def _match_sites(fitted: FittedModel, coords) -> np.ndarray:
    """Observation-site index of each coordinate, or -1."""
    D = pairwise_distances(np.atleast_2d(coords), fitted.locations)
    hit = D == 0
    return np.where(hit.any(axis=1), hit.argmax(axis=1), -1)


def _field_at(fitted: FittedModel, s0, sites) -> ResidualField:
    """Residual field for conditioning point ``s0`` at ``sites`` (none equal to ``s0``)."""
    spec = fitted.params.residual
    h0 = np.sqrt(np.sum((sites - s0) ** 2, axis=1))
    hkl = pairwise_distances(sites)
    if spec.empirical_means is None:
        return ResidualField(h0, hkl, spec)
    base = ResidualField(h0, hkl, spec.with_(empirical_means=None))
    j = _match_sites(fitted, s0)[0]
    ks = _match_sites(fitted, sites)
    row = np.full(len(sites), np.nan)
    if j >= 0:
        ok = ks >= 0
        row[ok] = spec.empirical_means[j, ks[ok]]
    return ResidualField(h0, hkl, spec, mean=np.where(np.isfinite(row), row, base.mean))


def _conditional_draws(fitted: FittedModel, s0, sites, x0, rng):
    """``X(s) = a(x0) + b(x0) Z(s)`` at ``sites``; sites at ``s0`` take ``x0``."""
    p = fitted.params
    h = np.sqrt(np.sum((sites - s0) ** 2, axis=1))
    out = np.empty((x0.size, len(sites)))
    at0 = h == 0
    out[:, at0] = x0[:, None]
    if np.any(~at0):
        fld = _field_at(fitted, s0, sites[~at0])
        Z = fld.sample(x0.size, rng)
        hh = h[~at0]
        a = alpha_fn(hh, p.alpha)
        b = b_fn(x0[:, None], hh[None, :], p.alpha, p.b)
        out[:, ~at0] = a * x0[:, None] + b * Z
    return out


def _check_v(fitted, v):
    v = float(v)
    if v < fitted.threshold_u:
        raise ValueError(f"v={v} is below the fitted threshold u={fitted.threshold_u}")
    return v


def sim_given_site(fitted: FittedModel, s0, sim_sites, v: float, nsims: int, seed, *, return_x0: bool = False):
    """Draws of the field at ``sim_sites`` given ``X(s0) > v``.

    ``X(s0) = v + E`` with ``E`` standard exponential, and the residual field
    is drawn independently of ``E``.  ``s0`` need not be an observation site.

    Returns
    -------
    X : ndarray of shape (nsims, len(sim_sites))
    x0 : ndarray of shape (nsims,), only if ``return_x0``
    """
    v = _check_v(fitted, v)
    s0 = check_point(s0)
    sites = check_coords(sim_sites, name="sim_sites")
    if int(nsims) < 1:
        raise ValueError("nsims must be >= 1")
    rng = as_generator(seed)
    x0 = v + rng.standard_exponential(int(nsims))
    X = _conditional_draws(fitted, s0, sites, x0, rng)
    return (X, x0) if return_x0 else X


@dataclass
class ImportanceSample:
    """Draws from the mixture of single-site conditional laws.

    Attributes
    ----------
    draws : ndarray of shape (n, m)
        Laplace-scale values over the site set.
    component : ndarray of shape (n,)
        Position in ``sites`` of the site each draw was conditioned on.
    exceed_count : ndarray of shape (n,)
        Number of sites in the set exceeding ``v``; at least 1.
    weight : ndarray of shape (n,)
        ``1 / exceed_count``.
    v : float
    sites : ndarray of shape (m,)
        Observation-site indices of the site set.
    """

    draws: np.ndarray
    component: np.ndarray
    exceed_count: np.ndarray
    weight: np.ndarray
    v: float
    sites: np.ndarray

    @classmethod
    def from_draws(cls, draws, component, v, sites) -> "ImportanceSample":
        count = np.sum(draws > v, axis=1)
        if np.any(count < 1):
            raise NumericalError("a mixture draw does not exceed v at any site")
        return cls(draws, np.asarray(component), count, 1.0 / count, float(v), np.asarray(sites))

    @property
    def n(self) -> int:
        return self.draws.shape[0]


def _mixture_base(fitted, sites, nsims, seed):
    """Component labels, exponential excesses and standardized draws, reusable across ``v``."""
    m = len(sites)
    children = spawn_seeds(seed, m + 1)
    comp = np.sort(np.random.default_rng(children[0]).integers(0, m, size=int(nsims)))
    locs = fitted.locations[sites]
    E = np.empty(int(nsims))
    fields = []
    for c in range(m):
        idx = np.flatnonzero(comp == c)
        rng = np.random.default_rng(children[c + 1])
        E[idx] = rng.standard_exponential(idx.size)
        others = np.delete(np.arange(m), c)
        if others.size and idx.size:
            fld = _field_at(fitted, locs[c], locs[others])
            fields.append((idx, others, fld.sample(idx.size, rng)))
        else:
            fields.append((idx, others, np.empty((idx.size, others.size))))
    return comp, E, fields


def _mixture_draws(fitted, sites, v, comp, E, fields):
    p = fitted.params
    locs = fitted.locations[sites]
    out = np.empty((E.size, len(sites)))
    for c, (idx, others, Z) in enumerate(fields):
        x0 = v + E[idx]
        out[idx, c] = x0
        if others.size:
            h = np.sqrt(np.sum((locs[others] - locs[c]) ** 2, axis=1))
            a = alpha_fn(h, p.alpha)
            b = b_fn(x0[:, None], h[None, :], p.alpha, p.b)
            out[np.ix_(idx, others)] = a * x0[:, None] + b * Z
    return out


def importance_sample(fitted: FittedModel, sites, v, nsims: int, seed):
    """Mixture draws for one threshold, or a list of samples for several.

    With several thresholds the same exponential excesses and residual draws
    are reused for each ``v`` (common random numbers).
    """
    sites = check_site_indices(sites, fitted.locations.shape[0], name="sites")
    if int(nsims) < 1:
        raise ValueError("nsims must be >= 1")
    vs = np.atleast_1d(np.asarray(v, dtype=float))
    for vv in vs:
        _check_v(fitted, vv)
    comp, E, fields = _mixture_base(fitted, sites, nsims, seed)
    out = [ImportanceSample.from_draws(_mixture_draws(fitted, sites, vv, comp, E, fields), comp, vv, sites)
           for vv in vs]
    return out[0] if np.ndim(v) == 0 else out


def weighted_estimate(sample: ImportanceSample, g):
    """Self-normalized estimate of ``E[g(X) | max > v]`` with a delta-method SE.

    ``g`` maps the (n, m) draw matrix to an (n,) or (n, k) array.
    """
    vals = np.asarray(g(sample.draws), dtype=float)
    if vals.shape[0] != sample.n:
        raise ValueError("g must return one value (or row) per draw")
    bad = ~np.isfinite(vals)
    if np.any(bad):
        i = int(np.argmax(bad.reshape(sample.n, -1).any(axis=1)))
        raise ValueError(f"g returned a non-finite value at draw {i}")
    w = sample.weight if vals.ndim == 1 else sample.weight[:, None]
    sw = np.sum(sample.weight)
    est = np.sum(vals * w, axis=0) / sw
    se = np.sqrt(np.sum(w**2 * (vals - est) ** 2, axis=0)) / sw
    return est, se


def importance_estimate(fitted: FittedModel, sites, v: float, g, nsims: int, seed, *, return_sample: bool = False):
    """Estimate ``E[g(X) | max_{sites} X > v]`` by importance sampling.

    Returns ``(estimate, standard_error)`` and, if requested, the sample.
    """
    sample = importance_sample(fitted, sites, float(v), nsims, seed)
    est, se = weighted_estimate(sample, g)
    return (est, se, sample) if return_sample else (est, se)


def importance_subsample(sample: ImportanceSample, n_out: int, seed) -> np.ndarray:
    """Subsample draws without replacement with probability proportional to weight."""
    n_out = int(n_out)
    if not 1 <= n_out < sample.n:
        raise ValueError("n_out must be at least 1 and smaller than the sample size")
    rng = as_generator(seed)
    return sample.draws[_pps_systematic(sample.weight, n_out, rng)]


def _pps_systematic(w, k, rng) -> np.ndarray:
    """``k`` distinct indices with inclusion probabilities proportional to ``w``.

    Units whose probability would exceed one are taken with certainty; the
    rest are drawn by systematic sampling over a random ordering.
    """
    w = np.asarray(w, dtype=float)
    certain = np.zeros(w.size, dtype=bool)
    while True:
        rest = k - certain.sum()
        pi = np.where(certain, 0.0, w) * rest / w[~certain].sum()
        over = (pi >= 1.0) & ~certain
        if not over.any():
            break
        certain |= over
    order = rng.permutation(w.size)
    cum = np.cumsum(pi[order])
    cum *= rest / cum[-1]
    points = rng.random() + np.arange(rest)
    picked = order[np.searchsorted(cum, points, side="right")]
    return np.sort(np.concatenate([np.flatnonzero(certain), picked]))


@dataclass
class RejectionSample:
    draws: np.ndarray
    component: np.ndarray
    pi: np.ndarray
    acceptance_rate: float
    v: float
    sites: np.ndarray


def empirical_max_proportions(data: SpatialDataset, sites, u: float) -> np.ndarray:
    """Share of replicates with ``max > u`` in which each site holds the maximum."""
    X = data.observations[:, sites]
    rows = X.max(axis=1) > u
    if not np.any(rows):
        raise ValueError("no replicate has its maximum above the threshold")
    arg = X[rows].argmax(axis=1)
    return np.bincount(arg, minlength=len(sites)) / rows.sum()


def sim_rejection(fitted: FittedModel, sites, v: float, nsims: int, seed, *, data: SpatialDataset | None = None,
                  pi=None, batch: int | None = None) -> RejectionSample:
    """Draws given ``max > v`` by rejection.

    Each draw is assigned a site ``j`` with probability ``pi_j`` (by default
    the empirical share of replicates above the threshold whose maximum is
    at ``j``); fields are then simulated given ``X_j > v`` until one has its
    maximum at ``j``.
    """
    sites = check_site_indices(sites, fitted.locations.shape[0], name="sites")
    v = _check_v(fitted, v)
    m = len(sites)
    if pi is None:
        if data is None:
            raise ValueError("either data or pi is required")
        pi = empirical_max_proportions(data, sites, fitted.threshold_u)
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (m,) or np.any(pi < 0) or not np.isclose(pi.sum(), 1.0):
        raise ValueError("pi must be a probability vector over the site set")
    if np.any(pi == 0):
        warnings.warn(f"components {sites[pi == 0].tolist()} have no empirical maxima and are unavailable",
                      RuntimeWarning, stacklevel=2)
    locs = fitted.locations[sites]
    nsims = int(nsims)
    if m == 1:
        X = sim_given_site(fitted, locs[0], locs, v, nsims, seed)
        return RejectionSample(X, np.zeros(nsims, dtype=int), pi, 1.0, v, sites)
    rng = as_generator(seed)
    counts = rng.multinomial(nsims, pi / pi.sum())
    draws = np.empty((nsims, m))
    comps = np.repeat(np.arange(m), counts)
    tried = 0
    start = 0
    for c in range(m):
        need = int(counts[c])
        kept, n_kept, tried_c = [], 0, 0
        while n_kept < need:
            size = batch or max(1000, 2 * (need - n_kept))
            X = _conditional_draws(fitted, locs[c], locs, v + rng.standard_exponential(size), rng)
            ok = X.argmax(axis=1) == c
            kept.append(X[ok])
            n_kept += int(ok.sum())
            tried_c += size
            if tried_c > 1000 * max(need, 1000):
                raise NumericalError(f"rejection sampler acceptance rate too low for component {c}")
        if need:
            draws[start:start + need] = np.concatenate(kept)[:need]
        tried += tried_c
        start += need
    return RejectionSample(draws, comps, pi, nsims / tried if tried else 1.0, v, sites)


def unconditional_prob(fitted: FittedModel, sites, v: float, nsims: int, seed):
    """``P(max_{sites} X > v)`` on the Laplace scale.

    Uses ``P(X_j > v) / P(X_j > v | max > v)`` averaged over the sites:
    with identical margins this is ``m exp(-v) / 2 / E[N | max > v]`` where
    ``N`` counts the exceeding sites.

    Returns
    -------
    (probability, standard_error)
    """
    v = float(v)
    if not v > 0:
        raise ValueError("v must be positive")
    sites = check_site_indices(sites, fitted.locations.shape[0], name="sites")
    m = len(sites)
    p_marg = 0.5 * np.exp(-v)
    if m == 1:
        return float(p_marg), 0.0
    sample = importance_sample(fitted, sites, v, nsims, seed)
    den, se_den = weighted_estimate(sample, lambda X: np.mean(X > v, axis=1))
    if den <= 0:
        raise NumericalError("degenerate denominator in the unconditional probability")
    prob = p_marg / den
    return float(prob), float(prob * se_den / den)


def infill_sim(fitted: FittedModel, cond_site, x_cond: float, obs_sites, obs_values, target_sites,
               nsims: int, seed) -> np.ndarray:
    """Simulate the field at ``target_sites`` given an extreme ``x_cond`` at
    ``cond_site`` and observed values at ``obs_sites``.

    Residuals at the observed sites are moved to the Gaussian scale,
    the Gaussian field at the targets is drawn from its conditional law, and
    the draws are mapped back with the unconditional marginal parameters
    before the normalization is undone.
    """
    s0 = check_point(cond_site)
    x_cond = float(x_cond)
    if not x_cond > fitted.threshold_u:
        raise ValueError("the conditioning value must exceed the fitted threshold")
    D = check_coords(obs_sites, name="obs_sites")
    L = check_coords(target_sites, name="target_sites")
    y_obs = np.asarray(obs_values, dtype=float).reshape(-1)
    if y_obs.size != len(D) or not np.all(np.isfinite(y_obs)):
        raise ValueError("obs_values must hold one finite value per observed site")
    if np.any(pairwise_distances(L, D) == 0):
        raise ValueError("target and observed sites must be disjoint")
    if np.any(np.all(D == s0, axis=1)) or np.any(np.all(L == s0, axis=1)):
        raise ValueError("the conditioning site must not be among the observed or target sites")
    p = fitted.params
    allsites = np.vstack([D, L])
    fld = _field_at(fitted, s0, allsites)
    nD = len(D)
    hD = np.sqrt(np.sum((D - s0) ** 2, axis=1))
    hL = np.sqrt(np.sum((L - s0) ** 2, axis=1))
    zD = (y_obs - alpha_fn(hD, p.alpha) * x_cond) / b_fn(np.array([x_cond]), hD, p.alpha, p.b)
    # Gaussian block with the package convention y = mean + sd * normal score
    mean, cov, sd = fld.mean, fld.cov, fld.sd
    yD = mean[:nD] + sd[:nD] * fld.to_normal_scores(np.concatenate([zD, np.zeros(len(L))]))[:nD]
    S_DD = cov[:nD, :nD]
    S_LD = cov[nD:, :nD]
    try:
        cf = linalg.cho_factor(S_DD, lower=True)
    except linalg.LinAlgError:
        ridge = 1e-10 * np.trace(S_DD) / nD
        try:
            cf = linalg.cho_factor(S_DD + ridge * np.eye(nD), lower=True)
        except linalg.LinAlgError:
            raise NumericalError("observed-site covariance is singular after ridge") from None
    mu_c = mean[nD:] + S_LD @ linalg.cho_solve(cf, yD - mean[:nD])
    S_c = cov[nD:, nD:] - S_LD @ linalg.cho_solve(cf, S_LD.T)
    S_c = 0.5 * (S_c + S_c.T)
    rng = as_generator(seed)
    eps = rng.standard_normal((int(nsims), len(L)))
    w, V = np.linalg.eigh(S_c)
    if w.min() < -1e-8 * max(1.0, w.max()):
        raise NumericalError("conditional covariance is not positive semi-definite")
    root = V * np.sqrt(np.clip(w, 0.0, None))
    yL = mu_c + eps @ root.T
    # back-map with the unconditional marginal mean and sd of the target block
    scores = (yL - mean[nD:]) / sd[nD:]
    full = np.zeros((int(nsims), len(allsites)))
    full[:, nD:] = scores
    zL = fld.from_normal_scores(full)[:, nD:]
    aL = alpha_fn(hL, p.alpha)
    bL = b_fn(np.array([x_cond]), hL, p.alpha, p.b)
    return aL * x_cond + bL * zL


def write_simulation(csv_path, draws, site_ids, meta: dict) -> None:
    """Write draws (rows) by sites (columns) as CSV plus a JSON sidecar."""
    csv_path = Path(csv_path)
    draws = np.asarray(draws, dtype=float)
    lines = [",".join(map(str, site_ids))]
    lines += [",".join(repr(float(x)) for x in row) for row in draws]
    csv_path.write_text("\n".join(lines) + "\n")

    def conv(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, (np.floating,)):
            return float(o)
        raise TypeError(type(o).__name__)

    sidecar = csv_path.with_suffix(".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True, default=conv) + "\n")
