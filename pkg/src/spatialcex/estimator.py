"""Scikit-learn style wrappers around model fitting and spatial deformation."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from spatialcex._validation import check_coords
from spatialcex.deform import DeformConfig, tau_apply, tau_fit
from spatialcex.likelihood import FitConfig, composite_nll, fit
from spatialcex.margins import MarginTag, SpatialDataset, _forward, laplace_threshold, to_laplace
from spatialcex.simulate import importance_estimate, sim_given_site

__all__ = ["ConditionalExtremesModel", "SpatialDeformation"]


def _dataset(X, locations, margins):
    X = check_array(X, dtype=float, input_name="X")
    locs = check_coords(locations, name="locations")
    if X.shape[1] != locs.shape[0]:
        raise ValueError(f"X has {X.shape[1]} columns but there are {locs.shape[0]} locations")
    if margins == "raw":
        return to_laplace(SpatialDataset(locs, X))
    if margins == "laplace":
        return SpatialDataset(locs, X, MarginTag.LAPLACE), None
    raise ValueError("margins must be 'raw' or 'laplace'")


class ConditionalExtremesModel(BaseEstimator):
    """Spatial conditional extremes model fitted by composite likelihood.

    Parameters
    ----------
    locations : array-like of shape (n_sites, 2)
    threshold_q : float
        Quantile level of the Laplace-scale threshold.
    margins : {"raw", "laplace"}
        Whether ``X`` is transformed to Laplace margins before fitting.
    b_variant, residual_variant, Delta_grid, shape, n_starts, maxiter, seed
        Passed to :class:`~spatialcex.likelihood.FitConfig`.

    Attributes
    ----------
    fitted_model_ : FittedModel
    params_ : dict
        Flat parameter values.
    n_features_in_ : int
    """

    def __init__(self, locations=None, threshold_q=0.95, margins="raw", b_variant="model3",
                 residual_variant="conditioned", Delta_grid=(0.0,), shape="function", n_starts=3,
                 maxiter=4000, seed=0):
        self.locations = locations
        self.threshold_q = threshold_q
        self.margins = margins
        self.b_variant = b_variant
        self.residual_variant = residual_variant
        self.Delta_grid = Delta_grid
        self.shape = shape
        self.n_starts = n_starts
        self.maxiter = maxiter
        self.seed = seed

    def _config(self):
        return FitConfig(b_variant=self.b_variant, residual_variant=self.residual_variant,
                         Delta_grid=self.Delta_grid, shape=self.shape, n_starts=self.n_starts,
                         maxiter=self.maxiter, seed=self.seed)

    def fit(self, X, y=None):
        data, tr = _dataset(X, self.locations, self.margins)
        u = laplace_threshold(self.threshold_q)
        self.fitted_model_ = fit(data, u, self._config(), transforms=tr)
        self.params_ = self.fitted_model_.params.values()
        self.n_features_in_ = data.n_sites
        return self

    def _laplace(self, X):
        check_is_fitted(self, "fitted_model_")
        X = check_array(X, dtype=float, input_name="X")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, expected {self.n_features_in_}")
        if self.margins == "raw":
            X = _forward(self.fitted_model_.transforms.sorted_values, X)
        return SpatialDataset(self.fitted_model_.locations, X, MarginTag.LAPLACE)

    def score(self, X, y=None) -> float:
        """Composite log-likelihood per replicate under the fitted parameters."""
        data = self._laplace(X)
        fm = self.fitted_model_
        return -composite_nll(data, fm.threshold_u, fm.params) / data.n_replicates

    def sample_given_site(self, site: int, nsims: int, seed, v: float | None = None) -> np.ndarray:
        """Laplace-scale fields at all sites given an exceedance of ``v`` at ``site``."""
        check_is_fitted(self, "fitted_model_")
        fm = self.fitted_model_
        v = fm.threshold_u if v is None else v
        return sim_given_site(fm, fm.locations[int(site)], fm.locations, v, nsims, seed)

    def expected_exceedances(self, q: float, nsims: int, seed, sites=None) -> tuple[float, float]:
        """Expected number of sites above the ``q`` level given at least one is."""
        check_is_fitted(self, "fitted_model_")
        fm = self.fitted_model_
        sites = np.arange(fm.locations.shape[0]) if sites is None else sites
        v = laplace_threshold(q)
        return importance_estimate(fm, sites, v, lambda Xs: np.sum(Xs > v, axis=1).astype(float), nsims, seed)


class SpatialDeformation(TransformerMixin, BaseEstimator):
    """Deformation of site coordinates estimated from pairwise dependence.

    ``fit`` takes the observations (rows are replicates, columns sites);
    ``transform`` maps coordinates to the deformed plane.
    """

    def __init__(self, locations=None, anchors=(0, 1, 2), statistic="correlation", chi_q=0.95, margins="raw",
                 maxiter=4000):
        self.locations = locations
        self.anchors = anchors
        self.statistic = statistic
        self.chi_q = chi_q
        self.margins = margins
        self.maxiter = maxiter

    def fit(self, X, y=None):
        data, _ = _dataset(X, self.locations, self.margins)
        cfg = DeformConfig(statistic=self.statistic, chi_q=self.chi_q, maxiter=self.maxiter)
        self.fit_result_ = tau_fit(data, list(self.anchors), cfg)
        self.params_ = self.fit_result_.params
        self.n_features_in_ = data.n_sites
        return self

    def transform(self, coords):
        check_is_fitted(self, "params_")
        return tau_apply(check_coords(coords, name="coords"), self.params_)
