"""Derivative-free calibration of a planar articulated swimmer simulator."""

from swimcal.params import ParamBounds, clip, denormalize, normalize, random_init, swimmer_bounds

__version__ = "0.1.0"

__all__ = [
    "ParamBounds",
    "clip",
    "denormalize",
    "normalize",
    "random_init",
    "swimmer_bounds",
]
