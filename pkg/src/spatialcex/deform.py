"""Planar deformation making dependence closer to isotropic and stationary.

``tau(s) = A s + sum_i omega_i xi_i(s)`` where ``A`` is the symmetric
matrix ``[[kappa^2, psi kappa lambda], [psi kappa lambda, lambda^2]]`` and
``xi_i(s) = r^2 log(r^2) / 2`` is the thin-plate function of the distance
to anchor ``i``.  The anchor weights of each output coordinate sum to zero
and are orthogonal to both anchor coordinates.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize, special

from spatialcex._validation import check_coords, pairwise_distances
from spatialcex.distributions import laplace_cdf
from spatialcex.margins import MarginTag, SpatialDataset

__all__ = [
    "DeformationParams",
    "DeformConfig",
    "DeformationFit",
    "tps_basis",
    "tau_apply",
    "tau_jacobian_det",
    "tau_fit",
    "fit_dependence_curve",
]

_CONSTRAINT_TOL = 1e-8


def tps_basis(s, anchors) -> np.ndarray:
    """Thin-plate functions ``r^2 log(r^2) / 2``; shape (n_points, n_anchors)."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    if not np.all(np.isfinite(s)):
        raise ValueError("coordinates must be finite")
    r2 = np.sum((s[:, None, :] - anchors[None, :, :]) ** 2, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 0.5 * r2 * np.log(r2)
    return np.where(r2 > 0, out, 0.0)


def _constraint_matrix(anchors):
    return np.vstack([np.ones(len(anchors)), anchors[:, 0], anchors[:, 1]])


@dataclass(frozen=True, eq=False)
class DeformationParams:
    """Affine and thin-plate parameters of the deformation.

    Attributes
    ----------
    kappa_d, lambda_d : float
        Positive scales of the affine part.
    psi : float
        Shear, ``|psi| < 1`` keeps the affine part orientation-preserving.
    anchors : ndarray of shape (n_anchors, 2)
    omega : ndarray of shape (2, n_anchors)
    anchor_indices : tuple of int, optional
        Site indices of the anchors.
    """

    kappa_d: float = 1.0
    lambda_d: float = 1.0
    psi: float = 0.0
    anchors: np.ndarray | None = None
    omega: np.ndarray | None = None
    anchor_indices: tuple | None = None

    def __post_init__(self):
        if not (self.kappa_d > 0 and self.lambda_d > 0):
            raise ValueError("kappa_d and lambda_d must be positive")
        if not np.isfinite(self.psi):
            raise ValueError("psi must be finite")
        anchors = np.zeros((0, 2)) if self.anchors is None else np.asarray(self.anchors, dtype=float).reshape(-1, 2)
        omega = np.zeros((2, len(anchors))) if self.omega is None else np.asarray(self.omega, dtype=float)
        if omega.shape != (2, len(anchors)):
            raise ValueError("omega must have shape (2, n_anchors)")
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "omega", omega)

    @property
    def affine(self) -> np.ndarray:
        k, l, p = self.kappa_d, self.lambda_d, self.psi
        return np.array([[k * k, p * k * l], [p * k * l, l * l]])

    def constraint_residual(self) -> float:
        if len(self.anchors) == 0:
            return 0.0
        return float(np.abs(self.omega @ _constraint_matrix(self.anchors).T).max())

    def omega_full(self, n_sites: int) -> np.ndarray:
        """Weights as a 2 x n_sites matrix, zero outside the anchors."""
        if self.anchor_indices is None:
            raise ValueError("anchor indices unknown")
        out = np.zeros((2, n_sites))
        out[:, list(self.anchor_indices)] = self.omega
        return out

    def to_dict(self) -> dict:
        return {
            "kappa_d": self.kappa_d,
            "lambda_d": self.lambda_d,
            "psi": self.psi,
            "anchors": self.anchors.tolist(),
            "omega": self.omega.tolist(),
            "anchor_indices": None if self.anchor_indices is None else list(self.anchor_indices),
        }

    def to_json(self) -> str:
        return json.dumps({"schema_version": 1, **self.to_dict()}, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DeformationParams":
        d = {k: v for k, v in d.items() if k != "schema_version"}
        if d.get("anchor_indices") is not None:
            d["anchor_indices"] = tuple(d["anchor_indices"])
        return cls(**d)


def tau_apply(s, p: DeformationParams) -> np.ndarray:
    """Deformed coordinates of the points ``s`` (shape (n, 2) or (2,))."""
    s_arr = np.asarray(s, dtype=float)
    pts = np.atleast_2d(s_arr)
    if pts.shape[1] != 2 or not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite (n, 2) coordinates")
    scale = max(1.0, float(np.abs(p.omega).max(initial=0.0)) * max(1.0, float(np.abs(p.anchors).max(initial=1.0))))
    if p.constraint_residual() > _CONSTRAINT_TOL * scale:
        raise ValueError("deformation weights violate the zero-sum and orthogonality constraints")
    out = pts @ p.affine.T
    if len(p.anchors):
        out = out + tps_basis(pts, p.anchors) @ p.omega.T
    return out[0] if s_arr.ndim == 1 else out


def tau_jacobian_det(s, p: DeformationParams) -> np.ndarray:
    """Determinant of the Jacobian of ``tau`` at the points ``s``."""
    pts = np.atleast_2d(np.asarray(s, dtype=float))
    J = np.broadcast_to(p.affine, (len(pts), 2, 2)).copy()
    if len(p.anchors):
        diff = pts[:, None, :] - p.anchors[None, :, :]
        r2 = np.sum(diff**2, axis=-1)
        with np.errstate(divide="ignore"):
            fac = np.where(r2 > 0, np.log(np.where(r2 > 0, r2, 1.0)) + 1.0, 0.0)
        grad = diff * fac[..., None]  # d xi_i / d s, shape (n, n_anchors, 2)
        J += np.einsum("ra,nac->nrc", p.omega, grad)
    return J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]


def _curve(h, theta):
    sill = special.expit(theta[0])
    rng = np.exp(theta[1])
    shape = 2.0 * special.expit(theta[2])
    return sill * np.exp(-((h / rng) ** shape))


def fit_dependence_curve(h, values):
    """Least-squares fit of ``c exp(-(h/r)^s)`` to pairwise dependence values.

    Returns the parameter vector ``(c, r, s)`` and the residuals.
    """
    h = np.asarray(h, dtype=float)
    values = np.asarray(values, dtype=float)
    th0 = np.array([special.logit(np.clip(values.max(), 0.05, 0.99)), np.log(np.median(h)), 0.0])
    res = optimize.least_squares(lambda t: _curve(h, t) - values, th0, method="lm")
    t = res.x
    return np.array([special.expit(t[0]), np.exp(t[1]), 2 * special.expit(t[2])]), res.fun


@dataclass
class DeformConfig:
    """Settings of :func:`tau_fit`.

    statistic : {"correlation", "chi"}
        Pairwise dependence summary matched by the curve.
    chi_q : float
        Quantile level of the chi statistic.
    grid_size : int
        Points per side of the folding-check grid over the sites' bounding box.
    maxiter : int
    """

    statistic: str = "correlation"
    chi_q: float = 0.95
    grid_size: int = 15
    maxiter: int = 4000

    def __post_init__(self):
        if self.statistic not in ("correlation", "chi"):
            raise ValueError("statistic must be 'correlation' or 'chi'")


@dataclass
class DeformationFit:
    params: DeformationParams
    curve: np.ndarray
    objective: float
    objective_identity: float
    converged: bool
    statistic: np.ndarray


def _pair_statistic(data: SpatialDataset, config: DeformConfig) -> np.ndarray:
    X = data.observations
    if config.statistic == "correlation":
        W = special.ndtri(laplace_cdf(X)) if data.margin_tag is MarginTag.LAPLACE else X
        return np.corrcoef(W.T)
    from spatialcex.diagnostics import chi_matrix

    return chi_matrix(X, config.chi_q)


def _normalize(coords, target_mean):
    d = pairwise_distances(coords)[np.triu_indices(len(coords), 1)]
    return target_mean / d.mean()


def tau_fit(data: SpatialDataset, anchors, config: DeformConfig | None = None) -> DeformationFit:
    """Estimate the deformation from pairwise dependence.

    Minimizes the squared difference between the empirical pairwise
    statistic and a decreasing curve of deformed distance.  The deformation
    is rescaled so that the mean pairwise distance of the sites is kept.
    """
    config = DeformConfig() if config is None else config
    locs = check_coords(data.locations, name="locations", min_sites=3)
    anchors = np.asarray(anchors, dtype=int)
    if anchors.size < 3 or len(np.unique(anchors)) != anchors.size:
        raise ValueError("at least three distinct anchors are required")
    A = locs[anchors]
    if np.linalg.matrix_rank(_constraint_matrix(A)) < 3:
        raise ValueError("anchors must not be collinear")
    N = linalg.null_space(_constraint_matrix(A))  # (n_a, n_a - 3)
    k = N.shape[1]
    stat = _pair_statistic(data, config)
    iu = np.triu_indices(len(locs), 1)
    y = stat[iu]
    mean_d = pairwise_distances(locs)[iu].mean()
    lo, hi = locs.min(axis=0), locs.max(axis=0)
    g = np.linspace(0.0, 1.0, config.grid_size)
    grid = lo + np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2) * (hi - lo)
    span = float(np.max(hi - lo))

    def build(theta):
        r, tpsi = theta[0], theta[1]
        c = theta[2 : 2 + 2 * k].reshape(2, k)
        # weights scaled by the squared span so that theta is dimensionless
        omega = (c @ N.T) / span**2
        return DeformationParams(np.exp(r / 2), np.exp(-r / 2), np.tanh(tpsi), A, omega, tuple(anchors.tolist()))

    def objective(theta, with_omega=True):
        p = build(theta if with_omega else np.concatenate([theta[:2], np.zeros(2 * k), theta[2:]]))
        curve = theta[-3:]
        pts = tau_apply(locs, p)
        pts = pts * _normalize(pts, mean_d)
        h = pairwise_distances(pts)[iu]
        val = float(np.sum((y - _curve(h, curve)) ** 2))
        det = tau_jacobian_det(grid, p)
        if np.any(det <= 0):
            val += 1e3 * (1.0 + np.sum(np.clip(-det, 0, None)) / np.abs(det).max())
        return val

    curve0, _ = fit_dependence_curve(pairwise_distances(locs)[iu], y)
    cth = np.array([special.logit(np.clip(curve0[0], 1e-6, 1 - 1e-6)), np.log(curve0[1]),
                    special.logit(np.clip(curve0[2] / 2, 1e-6, 1 - 1e-6))])
    identity = np.concatenate([[0.0, 0.0], np.zeros(2 * k), cth])
    f_id = objective(identity)
    # affine stage, then all parameters
    th_aff = np.concatenate([[0.0, 0.0], cth])
    best_aff = None
    for r0 in (-1.0, 0.0, 1.0):
        th = th_aff.copy()
        th[0] = r0
        res = optimize.minimize(lambda t: objective(t, with_omega=False), th, method="Nelder-Mead",
                                options={"maxiter": config.maxiter, "xatol": 1e-6, "fatol": 1e-10})
        if best_aff is None or res.fun < best_aff.fun:
            best_aff = res
    th_full = np.concatenate([best_aff.x[:2], np.zeros(2 * k), best_aff.x[2:]])
    res = optimize.minimize(objective, th_full, method="Nelder-Mead",
                            options={"maxiter": config.maxiter, "maxfev": config.maxiter, "xatol": 1e-6,
                                     "fatol": 1e-10, "adaptive": th_full.size > 4})
    theta = res.x if res.fun <= best_aff.fun else th_full
    p = build(theta)
    # fold the scale normalization into the parameters
    scale = _normalize(tau_apply(locs, p), mean_d)
    p = DeformationParams(p.kappa_d * np.sqrt(scale), p.lambda_d * np.sqrt(scale), p.psi, A,
                          p.omega * scale, p.anchor_indices)
    curve = np.array([special.expit(theta[-3]), np.exp(theta[-2]), 2 * special.expit(theta[-1])])
    return DeformationFit(p, curve, float(min(res.fun, best_aff.fun)), f_id,
                          bool(res.success or res.fun <= best_aff.fun), stat)
