"""Input checks shared across modules."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils import check_array


def as_generator(seed) -> np.random.Generator:
    """Return a numpy Generator from an int, SeedSequence or Generator.

    ``None`` is rejected: every stochastic routine in the package takes an
    explicit seed so that results are reproducible.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        raise ValueError("an explicit seed is required")
    if isinstance(seed, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(seed)
    raise TypeError(f"cannot build a random generator from {type(seed).__name__}")


def spawn_seeds(seed, n: int) -> list[np.random.SeedSequence]:
    """Child seed sequences derived from ``seed`` (an int or SeedSequence)."""
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2**63))
    if seed is None:
        raise ValueError("an explicit seed is required")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    return ss.spawn(n)


def check_coords(coords, *, name="coords", min_sites=1) -> np.ndarray:
    coords = check_array(coords, dtype=float, ensure_min_samples=min_sites, input_name=name)
    if coords.shape[1] != 2:
        raise ValueError(f"{name} must have two columns, got shape {coords.shape}")
    return coords


def check_point(s) -> np.ndarray:
    s = np.asarray(s, dtype=float).reshape(-1)
    if s.shape != (2,) or not np.all(np.isfinite(s)):
        raise ValueError("a site coordinate must be two finite numbers")
    return s


def check_observations(X, *, n_sites=None, name="X") -> np.ndarray:
    X = check_array(X, dtype=float, ensure_min_features=2, input_name=name)
    if n_sites is not None and X.shape[1] != n_sites:
        raise ValueError(f"{name} has {X.shape[1]} columns but {n_sites} sites were given")
    return X


def check_probability(q, *, name="q", low=0.0, high=1.0) -> float:
    q = float(q)
    if not (low < q < high):
        raise ValueError(f"{name} must lie in ({low}, {high}), got {q}")
    return q


def check_site_indices(idx, n_sites, *, name="sites") -> np.ndarray:
    idx = np.atleast_1d(np.asarray(idx))
    if idx.size and not np.issubdtype(idx.dtype, np.integer):
        raise TypeError(f"{name} must be integer site indices")
    idx = idx.astype(int)
    if np.any(idx < 0) or np.any(idx >= n_sites):
        raise IndexError(f"{name} out of range for {n_sites} sites")
    if len(np.unique(idx)) != len(idx):
        raise ValueError(f"{name} contains duplicates")
    return idx


def pairwise_distances(a, b=None) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = a if b is None else np.asarray(b, dtype=float)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff**2, axis=-1))
