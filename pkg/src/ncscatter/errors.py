"""Exception hierarchy.

Every error carries a ``category`` used by the CLI to build its
machine-readable failure document.
"""

from __future__ import annotations


class NCScatterError(Exception):
    category = "diagnostics-failed"


class ConfigError(NCScatterError, ValueError):
    category = "config"


class PreconditionError(NCScatterError, ValueError):
    category = "diagnostics-failed"


class SingularInputError(NCScatterError, ValueError):
    """Evaluation requested at (or numerically on top of) a centre."""

    category = "diagnostics-failed"


class CalibrationError(NCScatterError):
    category = "calibration"

    def __init__(self, message: str, inequality: str | None = None, witness=None):
        super().__init__(message)
        self.inequality = inequality
        self.witness = None if witness is None else [float(c) for c in witness]


class IntegrationError(NCScatterError):
    category = "integration"


class StepFailureError(IntegrationError):
    pass


class CollisionApproachError(IntegrationError):
    """Raised when a trajectory enters the handoff radius of a centre.

    The partial trajectory (up to the handoff event) is attached so the
    caller can switch to the regularized engine.
    """

    def __init__(self, message: str, centre_index: int, partial=None):
        super().__init__(message)
        self.centre_index = centre_index
        self.partial = partial


class ConvergenceError(NCScatterError):
    category = "diagnostics-failed"


class SingularPathError(NCScatterError, ValueError):
    category = "optimization"


class DegreeError(NCScatterError):
    category = "optimization"


class MeshTooCoarseError(DegreeError):
    pass


class DegeneratePanelError(DegreeError):
    pass


class ConstructionError(NCScatterError):
    category = "optimization"


class AdmissibilityError(NCScatterError):
    category = "optimization"


class StagnationError(NCScatterError):
    category = "optimization"


class CollisionTrendError(NCScatterError):
    category = "optimization"
