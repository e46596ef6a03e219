"""Bi-level meta-optimization with geometry-adaptive gradient preconditioning.

The package is organized around a small tape-based autodiff engine
(:mod:`gapmeta.autodiff`), a deterministic Jacobi SVD (:mod:`gapmeta.linalg`),
the preconditioner zoo (:mod:`gapmeta.precond`), the bi-level training engine
(:mod:`gapmeta.metaloop`), the sinusoid task distribution
(:mod:`gapmeta.tasks`) and Monte-Carlo verification of the supporting theory
(:mod:`gapmeta.theory`, :mod:`gapmeta.verify`).  ``gapmeta.cli`` ties it all
together.
"""

from .errors import (
    ConfigError,
    ContractError,
    DegenerateSvdError,
    DimensionError,
    DomainError,
    SvdConvergenceError,
    StateIOError,
    TapeLookupError,
    TrainingAbort,
)

__version__ = "0.1.0"
