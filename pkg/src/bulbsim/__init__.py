"""Collective neutrino flavor oscillations in the extended bulb model."""

from bulbsim.grid import Grid, GridConfig, angle_factor, build_grid, local_angle
from bulbsim.state import Ensemble, Spectra, init_ensemble

__all__ = [
    "Ensemble",
    "Grid",
    "GridConfig",
    "Spectra",
    "angle_factor",
    "build_grid",
    "init_ensemble",
    "local_angle",
]

__version__ = "0.1.0"
