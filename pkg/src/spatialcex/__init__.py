"""Conditional spatial extremes: fitting, simulation and diagnostics."""
from spatialcex.depmodel import AlphaParams, BModel, ResidualFieldSpec
from spatialcex.distributions import DeltaLaplaceParams
from spatialcex.estimator import ConditionalExtremesModel, SpatialDeformation
from spatialcex.margins import MarginalTransform, SpatialDataset, from_laplace, to_laplace

__version__ = "0.1.0"

__all__ = [
    "AlphaParams",
    "BModel",
    "ConditionalExtremesModel",
    "DeltaLaplaceParams",
    "MarginalTransform",
    "ResidualFieldSpec",
    "SpatialDataset",
    "SpatialDeformation",
    "from_laplace",
    "to_laplace",
    "__version__",
]
