"""Scattering solutions of the spatial N-centre problem.

Fixed-energy trajectories joining prescribed asymptotic directions are found
as min-max critical points of a Maupertuis-type functional on large balls,
followed by a radius continuation; a Sundman-regularized engine handles
Kepler-type collisions.
"""

__version__ = "0.1.0"

from .errors import NCScatterError
from .problem import CalibratedConstants, ProblemSetup, calibrate, load_setup, recentre

__all__ = [
    "CalibratedConstants",
    "NCScatterError",
    "ProblemSetup",
    "__version__",
    "calibrate",
    "load_setup",
    "recentre",
]
