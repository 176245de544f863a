"""Synthetic field maps and a head-like phantom for end-to-end checks."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import operators as ops
from .image_model import Grid
from .volume_io import Volume

FIELD_KINDS = ("gaussian-bump", "smooth-random")
MAX_SLOPE = 0.5
PE_MARGIN = (3.5, 2.5)   # zero band and ramp length at the PE ends, voxels


def _node_coords(grid: Grid):
    # cell centers along axes 1 and 2, nodes along the PE axis (mm)
    n1, n2, n3 = grid.dims
    h1, h2, h3 = grid.h
    x1 = (np.arange(n1) + 0.5) * h1
    x2 = (np.arange(n2) + 0.5) * h2
    x3 = np.arange(n3 + 1) * h3
    return np.meshgrid(x1, x2, x3, indexing="ij")


def synth_field_map(grid: Grid, kind="smooth-random", amplitude=1.0, seed=0, max_slope=MAX_SLOPE):
    """
    Smooth staggered test field with ``max |b| = amplitude`` (mm).

    Parameters
    ----------
    grid : Grid
    kind : {"gaussian-bump", "smooth-random"}
        a centered anisotropic Gaussian, or low-pass filtered white noise
    amplitude : float
        peak absolute displacement in mm (sign of the bump follows it)
    seed : int
        noise seed for ``smooth-random``
    max_slope : float
        largest allowed ``|d_v b|``; exceeding it raises ``ValueError``
    """
    if kind not in FIELD_KINDS:
        raise ValueError(f"unknown field kind {kind!r}; choose from {FIELD_KINDS}")
    shape = grid.staggered_shape
    if amplitude == 0:
        return np.zeros(shape)
    if kind == "gaussian-bump":
        X = _node_coords(grid)
        ext = grid.extent
        r2 = sum(((x - e / 2) / (e / 6)) ** 2 for x, e in zip(X, ext))
        g = np.exp(-0.5 * r2)
        b = amplitude * g / g.max()   # the peak falls between samples
    else:
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(shape)
        sigma = [max(2.0, n / 5.0) for n in shape]
        b = ndimage.gaussian_filter(noise, sigma, mode="reflect")
        b *= abs(amplitude) / np.max(np.abs(b))
    slope = float(np.max(np.abs(ops.diff_pe(b, grid.h[2]))))
    if slope > max_slope:
        raise ValueError(f"field slope {slope:.3f} exceeds {max_slope}; lower the amplitude")
    return b


def make_phantom(grid: Grid, seed=0, background=60.0, affine=None) -> Volume:
    """
    Head-like test image: scalp shell, textured brain, two bright ventricles.

    Intensities range up to about 1000. Outside the head the image is a
    textured surround of mean ``background`` (0 gives an empty background).
    """
    rng = np.random.default_rng(seed)
    axes = [np.linspace(-1, 1, n) for n in grid.dims]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    r = np.sqrt((X / 0.85) ** 2 + (Y / 0.9) ** 2 + (Z / 0.8) ** 2)

    texture = ndimage.gaussian_filter(rng.standard_normal(grid.dims), 2.0, mode="wrap")
    texture /= np.max(np.abs(texture))
    # weak textured surround keeps the field observable outside the head
    surround = ndimage.gaussian_filter(rng.standard_normal(grid.dims), 2.0, mode="wrap")
    surround /= np.max(np.abs(surround))
    # taper to zero near the PE ends so no signal is pushed out of the FOV
    n3 = grid.dims[2]
    edge = np.minimum(np.arange(n3) + 0.5, n3 - 0.5 - np.arange(n3))
    taper = np.clip((edge - PE_MARGIN[0]) / PE_MARGIN[1], 0.0, 1.0)
    img = background * (1.0 + 0.5 * surround) * taper
    img[(r >= 0.88) & (r < 1.0)] = 250.0
    brain = r < 0.88
    img[brain] = 500.0 + 150.0 * texture[brain]
    for cx in (-0.2, 0.2):
        v = ((X - cx) / 0.12) ** 2 + ((Y - 0.1) / 0.3) ** 2 + (Z / 0.2) ** 2
        img[v < 1] = 900.0
    img = ndimage.gaussian_filter(img, 0.7, mode="constant")
    return Volume(img, grid.h, np.eye(4) if affine is None else affine)
