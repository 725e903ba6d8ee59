from zoaeds.numerics import autodiff
from zoaeds.numerics.graph import ArchSpec, Layer, Network, backward, forward, init_params
from zoaeds.numerics.rng import RngStream, sample_gaussian, sample_unit_sphere

__all__ = [
    "ArchSpec",
    "Layer",
    "Network",
    "RngStream",
    "autodiff",
    "backward",
    "forward",
    "init_params",
    "sample_gaussian",
    "sample_unit_sphere",
]
