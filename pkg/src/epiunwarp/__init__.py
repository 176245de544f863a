"""
Susceptibility distortion correction for reversed phase-encoding EPI pairs.

The field map is estimated by regularized nonlinear least squares, started
from a column-wise 1D optimal transport estimate, and applied with a
mass-preserving (Jacobian-modulated) transform.
"""
from .correction import (fieldmap_rel_error, jacobian_correction, least_squares_correction, push_forward,
                         relative_improvement, simulate_pair)
from .image_model import Grid, ImageModel1D, cell_centers
from .objective import Objective, mp_transform
from .optim import SolverOptions, admm, gauss_newton, lbfgs
from .ot_init import init_field_map
from .simulation import make_phantom, synth_field_map
from .volume_io import Volume, permute_pe_last, read_volume, unpermute, write_volume

__version__ = "0.1.0"

__all__ = [
    "Grid", "ImageModel1D", "Objective", "SolverOptions", "Volume", "admm", "cell_centers",
    "fieldmap_rel_error", "gauss_newton", "init_field_map", "jacobian_correction", "lbfgs",
    "least_squares_correction", "make_phantom", "mp_transform", "permute_pe_last", "push_forward",
    "read_volume", "relative_improvement", "simulate_pair", "synth_field_map", "unpermute",
    "write_volume",
]
