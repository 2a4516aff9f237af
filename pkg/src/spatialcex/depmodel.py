"""Normalizing functions and residual field of the conditional model.

Given an extreme ``X(s0) = x`` on the Laplace scale, the field at other sites
is modelled as ``a(x) + b(x) * Z(s)`` where ``a(x) = alpha(|s - s0|) x``, the
scale ``b`` follows one of three families and ``Z`` is a Gaussian field with
``Z(s0) = 0`` whose margins are transformed to delta-Laplace laws.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from spatialcex._validation import as_generator, check_coords, check_point, pairwise_distances
from spatialcex.distributions import (
    dl_logpdf,
    dl_scale_for_variance,
    dl_to_normal_score,
    normal_score_to_dl,
)

__all__ = [
    "AlphaParams",
    "BVariant",
    "BModel",
    "ResidualVariant",
    "ResidualFieldSpec",
    "NumericalError",
    "alpha_fn",
    "b_fn",
    "delta_fn",
    "residual_gauss_moments",
    "residual_log_density",
    "residual_sample",
    "ResidualField",
]

_LOG2PI = np.log(2.0 * np.pi)


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value or a non-PSD matrix."""


@dataclass(frozen=True)
class AlphaParams:
    """Location-normalization decay ``alpha(h)``.

    ``alpha(h) = 1`` for ``h < Delta`` and ``exp(-((h - Delta) / lam)**kappa)``
    beyond.
    """

    Delta: float = 0.0
    lam: float = 1.0
    kappa: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.Delta) or self.Delta == np.inf) or self.Delta < 0:
            raise ValueError("Delta must be >= 0")
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ValueError("lam must be > 0")
        if not (np.isfinite(self.kappa) and self.kappa > 0):
            raise ValueError("kappa must be > 0")


def alpha_fn(dist, p: AlphaParams):
    dist = np.asarray(dist, dtype=float)
    if np.any(dist < 0) or np.any(np.isnan(dist)):
        raise ValueError("distances must be non-negative")
    if p.Delta == np.inf:
        return np.ones_like(dist)
    r = np.maximum(dist - p.Delta, 0.0) / p.lam
    return np.where(dist < p.Delta, 1.0, np.exp(-(r**p.kappa)))


class BVariant(str, enum.Enum):
    MODEL1 = "model1"
    MODEL2 = "model2"
    MODEL3 = "model3"


@dataclass(frozen=True)
class BModel:
    """Scale-normalization family.

    * ``model1``: ``b(x) = 1 / (1 + zeta * x**beta)`` with ``beta < 0``, ``zeta >= 0``
    * ``model2``: ``b(x) = x**beta`` with ``0 <= beta < 1``
    * ``model3``: ``b(x) = 1 + (alpha(h) x)**beta`` with ``beta > 0``
    """

    variant: BVariant = BVariant.MODEL3
    beta: float = 0.5
    zeta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "variant", BVariant(self.variant))
        b, z = float(self.beta), float(self.zeta)
        if self.variant is BVariant.MODEL1:
            if not (b < 0 and z >= 0 and np.isfinite(z)):
                raise ValueError("model1 needs beta < 0 and zeta >= 0")
        elif self.variant is BVariant.MODEL2:
            if not (0 <= b < 1):
                raise ValueError("model2 needs 0 <= beta < 1")
        elif not (b > 0 and np.isfinite(b)):
            raise ValueError("model3 needs beta > 0")


def b_fn(x, dist, alpha_p: AlphaParams, bm: BModel):
    """Scale normalization ``b_{s - s0}(x)`` for exceedances ``x > 0``."""
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError("b is defined for positive Laplace-scale values only")
    if bm.variant is BVariant.MODEL1:
        out = 1.0 / (1.0 + bm.zeta * x**bm.beta)
        return np.broadcast_to(out, np.broadcast_shapes(x.shape, np.shape(dist))).copy()
    if bm.variant is BVariant.MODEL2:
        out = x**bm.beta
        return np.broadcast_to(out, np.broadcast_shapes(x.shape, np.shape(dist))).copy()
    return 1.0 + (alpha_fn(dist, alpha_p) * x) ** bm.beta


class ResidualVariant(str, enum.Enum):
    CONDITIONED = "conditioned"
    INCREMENTS = "increments"


@dataclass(frozen=True, eq=False)
class ResidualFieldSpec:
    """Gaussian base field and delta-Laplace margins of the residual process.

    ``conditioned`` uses a stationary field with mean ``mu``, variance
    ``sigma**2`` and correlation ``exp(-(h/phi)**nu)`` conditioned on zero at
    the conditioning site.  ``increments`` uses ``Z(s) - Z(s0)`` for a field
    with variogram ``(h/phi)**nu`` plus the drift ``-variogram/2``; ``sigma``
    plays no role there.

    The marginal shape is ``1 + exp(-(h/delta1)**delta2)`` unless
    ``delta_fixed`` is set.  With ``scale_match="sd"`` (default) each
    delta-Laplace margin takes the location and standard deviation of its
    Gaussian counterpart as location and scale, so ``sigma = 1`` and shape 1
    give unit-Laplace margins far from the conditioning site;
    ``"variance"`` instead matches the Gaussian variance.
    ``empirical_means`` (d x d, row = conditioning site) replaces the model
    mean wherever it is available.
    """

    base_variant: ResidualVariant = ResidualVariant.CONDITIONED
    mu: float = 0.0
    sigma: float = 1.0
    phi: float = 1.0
    nu: float = 1.0
    delta1: float = 1.0
    delta2: float = 1.0
    delta_fixed: float | None = None
    scale_match: str = "sd"
    empirical_means: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "base_variant", ResidualVariant(self.base_variant))
        for name in ("sigma", "phi", "delta1", "delta2"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be > 0")
        if not (0 < self.nu <= 2):
            raise ValueError("nu must lie in (0, 2]")
        if not np.isfinite(self.mu):
            raise ValueError("mu must be finite")
        if self.delta_fixed is not None and not self.delta_fixed > 0:
            raise ValueError("delta_fixed must be > 0")
        if self.scale_match not in ("variance", "sd"):
            raise ValueError("scale_match must be 'variance' or 'sd'")
        if self.empirical_means is not None:
            em = np.asarray(self.empirical_means, dtype=float)
            if em.ndim != 2 or em.shape[0] != em.shape[1]:
                raise ValueError("empirical_means must be a square matrix")
            object.__setattr__(self, "empirical_means", em)

    def with_(self, **changes) -> "ResidualFieldSpec":
        return replace(self, **changes)


def delta_fn(dist, spec: ResidualFieldSpec):
    dist = np.asarray(dist, dtype=float)
    if spec.delta_fixed is not None:
        return np.full_like(dist, float(spec.delta_fixed))
    return 1.0 + np.exp(-((dist / spec.delta1) ** spec.delta2))


def _correlation(h, spec):
    return np.exp(-((h / spec.phi) ** spec.nu))


def _variogram(h, spec):
    return (h / spec.phi) ** spec.nu


def _geometry(sites, s0):
    sites = check_coords(sites, name="sites")
    s0 = check_point(s0)
    h0 = np.sqrt(np.sum((sites - s0) ** 2, axis=1))
    if np.any(h0 == 0):
        raise ValueError("the conditioning location must not be among the sites")
    return sites, s0, h0, pairwise_distances(sites)


def _model_moments(h0, hkl, spec):
    if spec.base_variant is ResidualVariant.CONDITIONED:
        r0 = _correlation(h0, spec)
        mean = spec.mu * (1.0 - r0)
        cov = spec.sigma**2 * (_correlation(hkl, spec) - np.outer(r0, r0))
    else:
        g0 = _variogram(h0, spec)
        mean = spec.mu - 0.5 * g0
        cov = 0.5 * (g0[:, None] + g0[None, :] - _variogram(hkl, spec))
    return mean, cov


def _override_mean(mean, spec, cond_index, site_indices):
    if spec.empirical_means is None:
        return mean
    if cond_index is None or site_indices is None:
        raise ValueError(
            "a spec with empirical means needs the conditioning and site indices of observation sites"
        )
    row = spec.empirical_means[int(cond_index), np.asarray(site_indices, dtype=int)]
    return np.where(np.isfinite(row), row, mean)


def residual_gauss_moments(sites, s0, spec: ResidualFieldSpec, cond_index=None, site_indices=None):
    """Mean vector and covariance of the Gaussian residual block at ``sites``.

    ``cond_index`` and ``site_indices`` locate the sites among the
    observation sites; they are needed only when the spec carries empirical
    means.
    """
    _, _, h0, hkl = _geometry(sites, s0)
    mean, cov = _model_moments(h0, hkl, spec)
    return _override_mean(mean, spec, cond_index, site_indices), cov


def _cholesky(cov):
    try:
        return linalg.cholesky(cov, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        pass
    d = cov.shape[0]
    ridge = 1e-10 * np.trace(cov) / d
    try:
        return linalg.cholesky(cov + ridge * np.eye(d), lower=True)
    except (linalg.LinAlgError, ValueError):
        eig = np.linalg.eigvalsh(cov) if np.all(np.isfinite(cov)) else np.array([np.nan])
        raise NumericalError(
            f"residual covariance not positive definite after ridge {ridge:.3g} "
            f"(d={d}, min eigenvalue {eig.min():.3g})"
        ) from None


class ResidualField:
    """Residual field precomputed for one conditioning site and site set.

    Parameters
    ----------
    h0 : array of shape (m,)
        Distances from the conditioning site.
    hkl : array of shape (m, m)
        Distances between the sites.
    spec : ResidualFieldSpec
    mean : array of shape (m,), optional
        Replaces the model mean (empirical means).
    """

    def __init__(self, h0, hkl, spec: ResidualFieldSpec, mean=None):
        self.spec = spec
        self.h0 = np.asarray(h0, dtype=float)
        m, cov = _model_moments(self.h0, np.asarray(hkl, dtype=float), spec)
        self.mean = m if mean is None else np.asarray(mean, dtype=float)
        self.cov = cov
        self.chol = _cholesky(cov)
        self.sd = np.sqrt(np.diag(cov))
        self.delta = delta_fn(self.h0, spec)
        if spec.scale_match == "variance":
            self.dl_scale = dl_scale_for_variance(self.sd**2, self.delta)
            self._affine = self.delta == 2.0
        else:
            self.dl_scale = self.sd.copy()
            self._affine = np.zeros(self.h0.shape, dtype=bool)
        self._logdet = 2.0 * np.sum(np.log(np.diag(self.chol)))

    @classmethod
    def at(cls, sites, s0, spec, cond_index=None, site_indices=None):
        _, _, h0, hkl = _geometry(sites, s0)
        mean, _ = _model_moments(h0, hkl, spec)
        mean = _override_mean(mean, spec, cond_index, site_indices)
        return cls(h0, hkl, spec, mean=mean)

    @property
    def dim(self) -> int:
        return self.h0.size

    def to_normal_scores(self, z):
        """Standard normal scores of delta-Laplace values, column-wise."""
        w = dl_to_normal_score(z, self.mean, self.dl_scale, self.delta)
        if np.any(self._affine):
            w = np.where(self._affine, (z - self.mean) / self.sd, w)
        return w

    def from_normal_scores(self, w):
        """Map standard normal scores back to the delta-Laplace margins."""
        z = normal_score_to_dl(w, self.mean, self.dl_scale, self.delta)
        if np.any(self._affine):
            z = np.where(self._affine, self.mean + self.sd * w, z)
        return z

    def logpdf(self, z):
        """Joint log density; ``z`` of shape (m,) or (n, m)."""
        z = np.asarray(z, dtype=float)
        if not np.all(np.isfinite(z)):
            raise ValueError("residual values must be finite")
        zz = np.atleast_2d(z)
        w = self.to_normal_scores(zz)
        y = w * self.sd
        v = linalg.solve_triangular(self.chol, y.T, lower=True, check_finite=False)
        gauss = -0.5 * np.sum(v**2, axis=0) - 0.5 * self._logdet - 0.5 * self.dim * _LOG2PI
        jac = dl_logpdf(zz, mu=self.mean, sigma=self.dl_scale, delta=self.delta) - (
            -0.5 * w**2 - np.log(self.sd) - 0.5 * _LOG2PI
        )
        jac = np.where(self._affine, 0.0, jac)
        out = gauss + np.sum(jac, axis=1)
        return out[0] if z.ndim == 1 else out

    def dlogpdf_dz(self, z):
        """Gradient of :meth:`logpdf` with respect to ``z`` (rows of ``z``)."""
        zz = np.atleast_2d(np.asarray(z, dtype=float))
        w = self.to_normal_scores(zz)
        y = w * self.sd
        prec_y = linalg.cho_solve((self.chol, True), y.T, check_finite=False).T
        log_f = dl_logpdf(zz, mu=self.mean, sigma=self.dl_scale, delta=self.delta)
        log_phi = -0.5 * w**2 - np.log(self.sd) - 0.5 * _LOG2PI
        dy_dz = np.where(self._affine, 1.0, np.exp(log_f - log_phi))
        dev = zz - self.mean
        dlogf = -self.delta * np.abs(dev) ** (self.delta - 1) * np.sign(dev) / self.dl_scale**self.delta
        grad = (-prec_y + y / self.sd**2) * dy_dz + dlogf
        grad = np.where(self._affine, -prec_y, grad)
        return grad[0] if np.ndim(z) == 1 else grad

    def sample(self, n: int, rng) -> np.ndarray:
        """Draw ``n`` realizations, shape (n, m)."""
        rng = as_generator(rng)
        eps = rng.standard_normal((int(n), self.dim))
        y = eps @ self.chol.T
        return self.from_normal_scores(y / self.sd)


def residual_log_density(z, sites, s0, spec: ResidualFieldSpec, cond_index=None, site_indices=None):
    """Log density of the residual field at ``sites`` given the conditioning site ``s0``."""
    return ResidualField.at(sites, s0, spec, cond_index, site_indices).logpdf(z)


def residual_sample(nsims: int, sites, s0, spec: ResidualFieldSpec, seed, cond_index=None, site_indices=None):
    """Draw residual fields at ``sites``; shape (nsims, m)."""
    if int(nsims) < 1:
        raise ValueError("nsims must be >= 1")
    return ResidualField.at(sites, s0, spec, cond_index, site_indices).sample(nsims, seed)
