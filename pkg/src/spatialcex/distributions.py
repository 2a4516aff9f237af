"""Univariate delta-Laplace and Laplace building blocks.

The delta-Laplace (exponential power) law with location ``mu``, scale
``sigma`` and shape ``delta`` has density

    delta / (2 sigma Gamma(1/delta)) * exp(-|z - mu|^delta / sigma^delta)

It is the Laplace law at ``delta = 1`` and the Gaussian with variance
``sigma**2 / 2`` at ``delta = 2``.  Its distribution function follows from
the fact that ``(|Z - mu| / sigma)**delta`` is Gamma(1/delta, 1) distributed,
so both tails reduce to regularized incomplete gamma functions.

All functions broadcast over numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from spatialcex._validation import as_generator

__all__ = [
    "DeltaLaplaceParams",
    "dl_pdf",
    "dl_logpdf",
    "dl_cdf",
    "dl_sf",
    "dl_quantile",
    "dl_isf",
    "dl_sample",
    "dl_variance",
    "dl_scale_for_variance",
    "dl_to_normal_score",
    "normal_score_to_dl",
    "laplace_cdf",
    "laplace_sf",
    "laplace_ppf",
    "laplace_logpdf",
]

_LOG2 = np.log(2.0)


@dataclass(frozen=True)
class DeltaLaplaceParams:
    """Location, scale and shape of a delta-Laplace distribution."""

    mu: float = 0.0
    sigma: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        _check_params(self.mu, self.sigma, self.delta)

    @property
    def variance(self) -> float:
        return float(dl_variance(self.sigma, self.delta))


def _check_params(mu, sigma, delta):
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if not np.all(np.isfinite(mu)):
        raise ValueError("delta-Laplace location must be finite")
    if not (np.all(np.isfinite(sigma)) and np.all(sigma > 0)):
        raise ValueError("delta-Laplace scale must be finite and > 0")
    if not (np.all(np.isfinite(delta)) and np.all(delta > 0)):
        raise ValueError("delta-Laplace shape must be finite and > 0")
    return mu, sigma, delta


def _unpack(p, mu, sigma, delta):
    if p is not None:
        return _check_params(p.mu, p.sigma, p.delta)
    return _check_params(mu, sigma, delta)


def _std_power(z, mu, sigma, delta):
    """Return ``(|z - mu| / sigma)**delta`` evaluated in log space."""
    w = np.abs(z - mu) / sigma
    with np.errstate(divide="ignore", over="ignore"):
        return np.exp(delta * np.log(w))


def _finite_z(z):
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("delta-Laplace argument must be finite")
    return z


def dl_logpdf(z, p: DeltaLaplaceParams | None = None, *, mu=0.0, sigma=1.0, delta=1.0):
    """Log density of the delta-Laplace law."""
    mu, sigma, delta = _unpack(p, mu, sigma, delta)
    z = _finite_z(z)
    t = _std_power(z, mu, sigma, delta)
    return np.log(delta) - _LOG2 - np.log(sigma) - special.gammaln(1.0 / delta) - t


def dl_pdf(z, p: DeltaLaplaceParams | None = None, *, mu=0.0, sigma=1.0, delta=1.0):
    """Density of the delta-Laplace law.

    Either pass a :class:`DeltaLaplaceParams` or the keyword parameters.

    >>> float(dl_pdf(0.0, DeltaLaplaceParams(0.0, 1.0, 1.0)))
    0.5
    """
    return np.exp(dl_logpdf(z, p, mu=mu, sigma=sigma, delta=delta))


def dl_cdf(z, p: DeltaLaplaceParams | None = None, *, mu=0.0, sigma=1.0, delta=1.0):
    """Distribution function, split by the sign of ``z - mu``."""
    mu, sigma, delta = _unpack(p, mu, sigma, delta)
    z = np.asarray(z, dtype=float)
    if np.any(np.isnan(z)):
        raise ValueError("delta-Laplace argument must not be NaN")
    t = _std_power(z, mu, sigma, delta)
    tail = 0.5 * special.gammaincc(1.0 / delta, t)
    return np.where(z >= mu, 1.0 - tail, tail)


def dl_sf(z, p: DeltaLaplaceParams | None = None, *, mu=0.0, sigma=1.0, delta=1.0):
    """Survivor function ``1 - dl_cdf``, accurate in the upper tail."""
    mu, sigma, delta = _unpack(p, mu, sigma, delta)
    z = np.asarray(z, dtype=float)
    t = _std_power(z, mu, sigma, delta)
    tail = 0.5 * special.gammaincc(1.0 / delta, t)
    return np.where(z >= mu, tail, 1.0 - tail)


def dl_quantile(q, p: DeltaLaplaceParams | None = None, *, mu=0.0, sigma=1.0, delta=1.0):
    """Quantile function for probabilities strictly inside (0, 1).

    Inverts the incomplete-gamma representation of each tail, so the upper
    tail is computed from ``1 - q`` without cancellation.
    """
    mu, sigma, delta = _unpack(p, mu, sigma, delta)
    q = np.asarray(q, dtype=float)
    if np.any(~np.isfinite(q)) or np.any(q <= 0) or np.any(q >= 1):
        raise ValueError("quantile level must lie strictly inside (0, 1)")
    upper = q >= 0.5
    tail = np.where(upper, 1.0 - q, q)
    t = special.gammainccinv(1.0 / delta, 2.0 * tail)
    dev = sigma * t ** (1.0 / delta)
    return mu + np.where(upper, dev, -dev)


def dl_isf(q, p: DeltaLaplaceParams | None = None, *, mu=0.0, sigma=1.0, delta=1.0):
    """Inverse survival function, ``dl_quantile(1 - q)`` without rounding ``1 - q``."""
    mu, sigma, delta = _unpack(p, mu, sigma, delta)
    q = np.asarray(q, dtype=float)
    if np.any(~np.isfinite(q)) or np.any(q <= 0) or np.any(q >= 1):
        raise ValueError("tail probability must lie strictly inside (0, 1)")
    lower = q > 0.5
    tail = np.where(lower, 1.0 - q, q)
    t = special.gammainccinv(1.0 / delta, 2.0 * tail)
    dev = sigma * t ** (1.0 / delta)
    return mu + np.where(lower, -dev, dev)


def dl_variance(sigma, delta):
    """``Gamma(3/delta) / Gamma(1/delta) * sigma**2``."""
    sigma = np.asarray(sigma, dtype=float)
    delta = np.asarray(delta, dtype=float)
    return np.exp(special.gammaln(3.0 / delta) - special.gammaln(1.0 / delta)) * sigma**2


def dl_scale_for_variance(variance, delta):
    """Scale giving a delta-Laplace law the requested variance."""
    variance = np.asarray(variance, dtype=float)
    delta = np.asarray(delta, dtype=float)
    ratio = np.exp(special.gammaln(1.0 / delta) - special.gammaln(3.0 / delta))
    return np.sqrt(variance * ratio)


def dl_sample(n: int, p: DeltaLaplaceParams, seed=None) -> np.ndarray:
    """Draw ``n`` variates as ``mu + S * sigma * G**(1/delta)``.

    ``G`` is Gamma(1/delta, 1) and ``S`` an independent fair sign.  The
    stream is fully determined by ``seed``.
    """
    if int(n) < 1:
        raise ValueError("n must be >= 1")
    mu, sigma, delta = _check_params(p.mu, p.sigma, p.delta)
    rng = as_generator(seed)
    g = rng.gamma(1.0 / delta, 1.0, size=int(n))
    sign = np.where(rng.random(int(n)) < 0.5, -1.0, 1.0)
    return mu + sign * sigma * g ** (1.0 / delta)


# Tail-accurate maps between the delta-Laplace and standard normal scales.


def _log_gammaincc(a, t):
    """log of the regularized upper incomplete gamma, safe for large ``t``."""
    a, t = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(t, dtype=float))
    q = special.gammaincc(a, t)
    out = np.empty_like(q)
    ok = q > 1e-280
    with np.errstate(divide="ignore"):
        out[ok] = np.log(q[ok])
    if np.any(~ok):
        aa, tt = a[~ok], t[~ok]
        # Asymptotic series Gamma(a, t) ~ t^(a-1) e^-t (1 + (a-1)/t + (a-1)(a-2)/t^2)
        corr = 1.0 + (aa - 1.0) / tt + (aa - 1.0) * (aa - 2.0) / tt**2
        out[~ok] = (aa - 1.0) * np.log(tt) - tt - special.gammaln(aa) + np.log(corr)
    return out


def _inv_log_gammaincc(a, logq):
    """Solve ``log Q(a, t) = logq`` for ``t``."""
    a, logq = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(logq, dtype=float))
    out = np.empty_like(logq)
    ok = logq > np.log(1e-280)
    out[ok] = special.gammainccinv(a[ok], np.exp(logq[ok]))
    if np.any(~ok):
        aa, lq = a[~ok], logq[~ok]
        t = -lq
        for _ in range(60):
            # d/dt log Q = -t^(a-1) e^-t / (Gamma(a) Q), log of that ratio:
            dlog = (aa - 1.0) * np.log(t) - t - special.gammaln(aa) - _log_gammaincc(aa, t)
            step = (_log_gammaincc(aa, t) - lq) / (-np.exp(dlog))
            t = np.maximum(t - step, 0.5 * t)
            if np.all(np.abs(step) < 1e-12 * t):
                break
        out[~ok] = t
    return out


def dl_to_normal_score(z, mu, sigma, delta):
    """Standard normal score ``w`` with ``Phi(w) = dl_cdf(z)``.

    Works from the tail probability on the far side of ``mu`` so values far
    into either tail keep full relative precision.
    """
    z = np.asarray(z, dtype=float)
    mu, sigma, delta = np.broadcast_arrays(
        np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float), np.asarray(delta, dtype=float)
    )
    t = _std_power(z, mu, sigma, delta)
    log_tail = _log_gammaincc(1.0 / delta, t) - _LOG2
    mag = -special.ndtri_exp(np.minimum(log_tail, -_LOG2))
    return np.where(z >= mu, mag, -mag)


def normal_score_to_dl(w, mu, sigma, delta):
    """Inverse of :func:`dl_to_normal_score`."""
    w = np.asarray(w, dtype=float)
    mu, sigma, delta = np.broadcast_arrays(
        np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float), np.asarray(delta, dtype=float)
    )
    log_tail = special.log_ndtr(-np.abs(w))
    t = _inv_log_gammaincc(1.0 / delta, np.minimum(log_tail + _LOG2, 0.0))
    dev = sigma * t ** (1.0 / delta)
    return mu + np.where(w >= 0, dev, -dev)


# Standard Laplace margins.


def laplace_cdf(x):
    x = np.asarray(x, dtype=float)
    return np.where(x < 0, 0.5 * np.exp(np.minimum(x, 0.0)), 1.0 - 0.5 * np.exp(-np.maximum(x, 0.0)))


def laplace_sf(x):
    x = np.asarray(x, dtype=float)
    return np.where(x < 0, 1.0 - 0.5 * np.exp(np.minimum(x, 0.0)), 0.5 * np.exp(-np.maximum(x, 0.0)))


def laplace_ppf(u):
    """Standard Laplace quantile, ``log(2u)`` below 1/2 and ``-log(2(1-u))`` above."""
    u = np.asarray(u, dtype=float)
    if np.any(~np.isfinite(u)) or np.any(u <= 0) or np.any(u >= 1):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    return np.where(u < 0.5, np.log(2.0 * np.minimum(u, 0.5)), -np.log(2.0 * (1.0 - np.maximum(u, 0.5))))


def laplace_logpdf(x):
    return -_LOG2 - np.abs(np.asarray(x, dtype=float))
