"""Dependence summaries, goodness-of-fit checks and bootstrap uncertainty."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import stats

from spatialcex._validation import (
    as_generator,
    check_observations,
    check_probability,
    check_site_indices,
    pairwise_distances,
    spawn_seeds,
)
from spatialcex.likelihood import FitConfig, FittedModel, extract_residuals, fit
from spatialcex.margins import MarginTag, SpatialDataset, laplace_threshold, to_laplace
from spatialcex.simulate import importance_sample, sim_given_site, weighted_estimate

__all__ = [
    "ChiEstimate",
    "chi_q",
    "chi_matrix",
    "chi_table",
    "kendall_null_band",
    "kendall_independence_check",
    "stationary_bootstrap",
    "bootstrap_fit",
    "bootstrap_summary",
    "expected_exceedances",
    "model_vs_data_pairs",
]


# Extremal dependence


@dataclass(frozen=True)
class ChiEstimate:
    """Empirical ``chi_q`` for one pair of sites.

    ``chi_hat`` is the proportion of replicates exceeding the ``q`` level at
    site ``i`` that also exceed it at site ``j``; ``n_eff`` is the number of
    joint exceedances.  ``low_count`` flags ``(1 - q) n < 5``.
    """

    pair: tuple
    q: float
    chi_hat: float
    n_eff: int
    low_count: bool


def _uniform_scores(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return stats.rankdata(X, axis=0) / (X.shape[0] + 1)


def _as_matrix(data) -> np.ndarray:
    X = data.observations if isinstance(data, SpatialDataset) else data
    return check_observations(X)


def chi_matrix(X, q: float) -> np.ndarray:
    """Matrix of rank-based ``chi_q`` estimates; entry (i, j) conditions on site i."""
    q = check_probability(q, name="q")
    U = _uniform_scores(_as_matrix(X)) > q
    E = U.astype(float)
    joint = E.T @ E
    marg = np.diag(joint).copy()
    with np.errstate(invalid="ignore", divide="ignore"):
        out = joint / marg[:, None]
    return np.where(marg[:, None] > 0, out, np.nan)


def chi_q(data, i: int, j: int, q: float) -> ChiEstimate:
    """Rank-based ``chi_q`` for sites ``i`` and ``j``.

    Invariant to strictly increasing transforms of either margin.
    """
    q = check_probability(q, name="q")
    X = _as_matrix(data)
    i, j = (int(k) for k in check_site_indices([i, j], X.shape[1], name="pair"))
    n = X.shape[0]
    low = (1.0 - q) * n < 5
    if low:
        warnings.warn(f"only {(1 - q) * n:.1f} expected exceedances of q={q} with n={n}", RuntimeWarning, stacklevel=2)
    U = _uniform_scores(X[:, [i, j]]) > q
    ni = int(U[:, 0].sum())
    joint = int(np.sum(U[:, 0] & U[:, 1]))
    chi = joint / ni if ni else float("nan")
    return ChiEstimate((i, j), q, float(chi), joint, bool(low))


def chi_table(data: SpatialDataset, q: float, pairs=None) -> pd.DataFrame:
    """Tidy table of ``chi_q`` estimates with inter-site distances."""
    q = check_probability(q, name="q")
    C = chi_matrix(data.observations, q)
    C = 0.5 * (C + C.T)  # equal margins counts make this symmetric up to ties
    D = pairwise_distances(data.locations)
    if pairs is None:
        pairs = list(zip(*np.triu_indices(data.n_sites, 1)))
    n_joint = ((_uniform_scores(data.observations) > q).astype(float))
    J = n_joint.T @ n_joint
    rows = [{"i": int(a), "j": int(b), "distance": float(D[a, b]), "q": q, "chi_hat": float(C[a, b]),
             "n_eff": int(J[a, b])} for a, b in pairs]
    return pd.DataFrame(rows, columns=["i", "j", "distance", "q", "chi_hat", "n_eff"])


# Kendall's tau of residual summaries against the conditioning value


def kendall_null_band(n: int, *, n_null: int = 2000, level: float = 0.95, seed=0) -> tuple[float, float]:
    """Central ``level`` interval of Kendall's tau for ``n`` independent pairs."""
    if int(n) < 2:
        raise ValueError("n must be >= 2")
    rng = as_generator(seed)
    taus = np.empty(int(n_null))
    for r in range(int(n_null)):
        taus[r] = stats.kendalltau(rng.random(int(n)), rng.random(int(n))).statistic
    a = 0.5 * (1.0 - level)
    return float(np.quantile(taus, a)), float(np.quantile(taus, 1.0 - a))


def kendall_independence_check(fitted: FittedModel, data: SpatialDataset, *, n_null: int = 2000,
                               level: float = 0.95, min_exceedances: int = 10, seed=0) -> pd.DataFrame:
    """Kendall's tau between the conditioning value and residual mean and variance.

    For each conditioning site the residual vector excludes the site itself.
    The null band is a Monte Carlo interval from independent pairs of the
    same size.  Sites with fewer than ``min_exceedances`` exceedances are
    omitted.
    """
    blocks = extract_residuals(data, fitted)
    rows = []
    bands: dict[int, tuple[float, float]] = {}
    seeds = spawn_seeds(seed, 1)[0]
    for blk in blocks:
        if blk.n < max(int(min_exceedances), 2):
            continue
        Z = np.delete(blk.Z, blk.j, axis=1)
        if blk.n not in bands:
            bands[blk.n] = kendall_null_band(blk.n, n_null=n_null, level=level,
                                             seed=np.random.SeedSequence([seeds.entropy, blk.n]))
        lo, hi = bands[blk.n]
        t_mean = stats.kendalltau(blk.x0, Z.mean(axis=1)).statistic
        t_var = stats.kendalltau(blk.x0, Z.var(axis=1)).statistic if Z.shape[1] > 1 else np.nan
        rows.append({"site": blk.j, "n": blk.n, "tau_mean": t_mean, "tau_var": t_var, "lower": lo, "upper": hi,
                     "mean_inside": bool(lo <= t_mean <= hi), "var_inside": bool(lo <= t_var <= hi)})
    cols = ["site", "n", "tau_mean", "tau_var", "lower", "upper", "mean_inside", "var_inside"]
    return pd.DataFrame(rows, columns=cols)


# Bootstrap


def stationary_bootstrap(n: int, mean_block: float = 10.0, seed=None, *, return_blocks: bool = False):
    """Stationary-bootstrap replicate indices (0-based).

    Blocks start at uniform positions, wrap around the end of the series and
    have geometric lengths with success probability ``1 / mean_block``.

    Returns
    -------
    idx : ndarray of shape (n,)
    lengths : ndarray, only if ``return_blocks``
        Lengths of the blocks; the last one is truncated at ``n``.
    """
    n = int(n)
    if n < 1:
        raise ValueError("n must be >= 1")
    if not mean_block >= 1:
        raise ValueError("mean_block must be >= 1")
    rng = as_generator(seed)
    new = rng.random(n) < 1.0 / mean_block
    new[0] = True
    starts = rng.integers(0, n, size=n)
    block = np.cumsum(new) - 1
    first = np.flatnonzero(new)
    offset = np.arange(n) - first[block]
    idx = (starts[block] + offset) % n
    if return_blocks:
        return idx, np.diff(np.append(first, n))
    return idx


def _one_bootstrap(data, u, config, idx):
    boot = data.subset(idx)
    if boot.margin_tag is MarginTag.RAW:
        boot, _ = to_laplace(boot)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fm = fit(boot, u, config)
    return fm.params.values(), fm.fit_info["nll"], fm.fit_info["converged"]


def bootstrap_fit(data: SpatialDataset, u: float, config: FitConfig, n_boot: int, seed, *, mean_block: float = 10.0,
                  start: dict | None = None, n_jobs: int = 1) -> pd.DataFrame:
    """Refit the model on stationary-bootstrap resamples of whole fields.

    Raw-scale data are re-transformed to Laplace margins within each
    resample.  ``start`` (typically the full-data estimate) warm-starts every
    refit.

    Returns
    -------
    DataFrame with one row per replicate: ``replicate``, ``nll``,
    ``converged`` and one column per parameter.
    """
    if int(n_boot) < 1:
        raise ValueError("n_boot must be >= 1")
    if start is not None:
        config = replace(config, start=dict(start))
    seeds = spawn_seeds(seed, int(n_boot))
    indices = [stationary_bootstrap(data.n_replicates, mean_block, s) for s in seeds]
    results = Parallel(n_jobs=n_jobs)(delayed(_one_bootstrap)(data, u, config, idx) for idx in indices)
    rows = [{"replicate": r, "nll": nll, "converged": bool(conv), **vals}
            for r, (vals, nll, conv) in enumerate(results)]
    return pd.DataFrame(rows)


def bootstrap_summary(boot: pd.DataFrame, truth: dict | None = None) -> pd.DataFrame:
    """Per-parameter spread of bootstrap estimates.

    The bracket is the range ``[min, max]`` over replicates; with ``truth``
    the table also records whether each true value lies inside it.
    """
    names = [c for c in boot.columns if c not in ("replicate", "nll", "converged")]
    rows = []
    for name in names:
        col = boot[name].to_numpy(dtype=float)
        row = {"parameter": name, "mean": col.mean(), "sd": col.std(ddof=1) if col.size > 1 else np.nan,
               "q025": np.quantile(col, 0.025), "q975": np.quantile(col, 0.975), "min": col.min(), "max": col.max()}
        if truth is not None and name in truth:
            row["truth"] = float(truth[name])
            row["bracketed"] = bool(col.min() <= truth[name] <= col.max())
        rows.append(row)
    return pd.DataFrame(rows)


# Model-based summaries


def expected_exceedances(fitted: FittedModel, sites, q_levels, nsims: int, seed, *,
                         data: SpatialDataset | None = None) -> pd.DataFrame:
    """Expected number of sites exceeding ``v_q`` given at least one does.

    Model values are importance-sampling estimates with common random numbers
    across levels.  With ``data`` (Laplace margins) the empirical conditional
    mean count is added with a normal-approximation 95% interval.
    """
    sites = check_site_indices(sites, fitted.locations.shape[0], name="sites")
    qs = [check_probability(q, name="q") for q in np.atleast_1d(q_levels)]
    vs = [laplace_threshold(q) for q in qs]
    samples = importance_sample(fitted, sites, vs, nsims, seed)
    rows = []
    for q, v, smp in zip(qs, vs, samples):
        est, se = weighted_estimate(smp, lambda X, v=v: np.sum(X > v, axis=1).astype(float))
        row = {"q": q, "v": v, "estimate": float(est), "se": float(se)}
        if data is not None:
            counts = np.sum(data.observations[:, sites] > v, axis=1)
            counts = counts[counts > 0]
            k = counts.size
            mean = counts.mean() if k else np.nan
            half = 1.96 * counts.std(ddof=1) / np.sqrt(k) if k > 1 else np.nan
            row.update({"n_empirical": int(k), "empirical": float(mean), "empirical_lower": float(mean - half),
                        "empirical_upper": float(mean + half)})
        rows.append(row)
    return pd.DataFrame(rows)


def model_vs_data_pairs(fitted: FittedModel, data: SpatialDataset, j: int, pairs, nsims: int, seed) -> pd.DataFrame:
    """Observed and model-simulated site pairs given an exceedance at site ``j``.

    Returns a tidy table with columns ``source`` ("observed" or "model"),
    ``replicate``, ``site_a``, ``site_b``, ``x_a`` and ``x_b``.  Pairs may not
    include the conditioning site.
    """
    cols = ["source", "replicate", "site_a", "site_b", "x_a", "x_b"]
    pairs = [tuple(int(k) for k in p) for p in pairs]
    if not pairs:
        return pd.DataFrame(columns=cols)
    j = int(check_site_indices([j], data.n_sites, name="j")[0])
    flat = sorted({k for p in pairs for k in p})
    check_site_indices(flat, data.n_sites, name="pairs")
    if j in flat:
        raise ValueError("pairs must not include the conditioning site")
    X = data.observations
    obs = X[X[:, j] > fitted.threshold_u]
    sim = sim_given_site(fitted, fitted.locations[j], fitted.locations[flat], fitted.threshold_u, nsims, seed)
    pos = {k: i for i, k in enumerate(flat)}
    frames = []
    for a, b in pairs:
        for source, vals, ca, cb in (("observed", obs, a, b), ("model", sim, pos[a], pos[b])):
            frames.append(pd.DataFrame({"source": source, "replicate": np.arange(vals.shape[0]), "site_a": a,
                                        "site_b": b, "x_a": vals[:, ca], "x_b": vals[:, cb]}))
    return pd.concat(frames, ignore_index=True)[cols]
