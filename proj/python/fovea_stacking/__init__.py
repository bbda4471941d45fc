"""Phase plate fovea stacking: design, simulation, fusion, control and calibration."""

from ._core import *  # noqa: F401,F403
from ._core import Error, Expansion, OpticalSystem, SystemConfig  # noqa: F401
