from __future__ import annotations

from typing import Optional

import numpy as np


class DDBoundsError(Exception):
    """Base class of the errors raised by ddbounds on numerical or data failures."""


class IncompatibleLoadError(DDBoundsError, ValueError):
    """A floating local problem received a load with a non-vanishing rigid-body component."""

    def __init__(self, msg: str, *, defect: float) -> None:
        super().__init__(msg)
        self.defect = defect


class DisconnectedSubdomainError(DDBoundsError, ValueError):
    """A subdomain of a partition is not connected through shared element edges."""

    def __init__(self, msg: str, *, subdomain: int) -> None:
        super().__init__(msg)
        self.subdomain = subdomain


class SingularSystemError(DDBoundsError, ValueError):
    """A constrained system has a connected component without Dirichlet support."""


class NonNestedMeshError(DDBoundsError, ValueError):
    """Interface vectors cannot be transferred because the fine interface is not nested in the coarse one."""


class SolverBreakdownError(DDBoundsError, RuntimeError):
    """The conjugate gradient met a direction of non-positive curvature."""

    def __init__(self, msg: str, *, iteration: int, curvature: float) -> None:
        super().__init__(msg)
        self.iteration = iteration
        self.curvature = curvature


class PatchSolveError(DDBoundsError, RuntimeError):
    """A star-patch problem could not be solved."""

    def __init__(self, msg: str, *, subdomain: int, vertex: int) -> None:
        super().__init__(msg)
        self.subdomain = subdomain
        self.vertex = vertex


class AdmissibilityError(DDBoundsError, RuntimeError):
    """A recovered stress field failed the static admissibility certificate.

    `witness` holds the residual vector against the refined test basis.
    """

    def __init__(self, msg: str, *, residual: float, witness: Optional[np.ndarray] = None) -> None:
        super().__init__(msg)
        self.residual = residual
        self.witness = witness


class ReportError(DDBoundsError, OSError):
    """A report file could not be written or read."""

    def __init__(self, msg: str, *, path: str) -> None:
        super().__init__(msg)
        self.path = path
