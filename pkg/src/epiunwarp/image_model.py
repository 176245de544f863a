"""Piecewise-linear image model along the phase-encoding (last) axis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class Grid:
    """
    Cell-centered grid on the box ``[0, n1*h1] x [0, n2*h2] x [0, n3*h3]``.

    The last axis is the phase-encoding direction.
    """

    dims: tuple[int, int, int]
    h: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        h = tuple(float(x) for x in self.h)
        if len(dims) != 3 or min(dims) < 2:
            raise ShapeError(f"grid dims must be three integers >= 2, got {self.dims}")
        if len(h) != 3 or min(h) <= 0:
            raise ValueError(f"voxel sizes must be positive, got {self.h}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "h", h)

    @property
    def cell_volume(self) -> float:
        return self.h[0] * self.h[1] * self.h[2]

    @property
    def staggered_shape(self) -> tuple[int, int, int]:
        n1, n2, n3 = self.dims
        return (n1, n2, n3 + 1)

    @property
    def extent(self):
        return tuple(n * h for n, h in zip(self.dims, self.h))

    @classmethod
    def of(cls, volume) -> "Grid":
        return cls(volume.shape, volume.voxel_size)


def cell_centers(grid: Grid) -> np.ndarray:
    """PE-axis cell-center coordinates ``(k + 0.5) * h3`` in mm."""
    return (np.arange(grid.dims[2]) + 0.5) * grid.h[2]


class ImageModel1D:
    """
    Linear interpolation of a PE-last volume along its last axis.

    Every column ``data[i, j, :]`` is interpolated independently. The column
    is zero-padded with one ghost sample of value 0 beyond each end, so the
    interpolant ramps linearly to zero over the half cell outside the first
    and last centers and the cell beyond; further out it is exactly zero.
    This keeps the model continuous in the query. At a breakpoint the slope
    of the right-hand segment is returned.

    Parameters
    ----------
    data : numpy.ndarray (n1, n2, n3)
    grid : Grid
    """

    def __init__(self, data, grid: Grid):
        data = np.asarray(data)
        if data.shape != grid.dims:
            raise ShapeError(f"data shape {data.shape} does not match grid {grid.dims}")
        self.data = data
        self.grid = grid
        pad = np.zeros(data.shape[:-1] + (1,), dtype=data.dtype)
        self._padded = np.concatenate([pad, data, pad], axis=-1)

    @classmethod
    def from_volume(cls, volume, dtype=None):
        data = volume.data if dtype is None else volume.data.astype(dtype, copy=False)
        return cls(data, Grid.of(volume))

    def eval(self, query, do_derivative=True, mask=None):
        """
        Interpolate at PE coordinates ``query`` (mm), one per output voxel.

        Parameters
        ----------
        query : numpy.ndarray (n1, n2, n3), or (k, n3) with ``mask``
        mask : numpy.ndarray of bool (n1, n2), optional
            evaluate only the selected columns

        Returns
        -------
        values : numpy.ndarray, shape of ``query``
        dvalues : numpy.ndarray or None
            derivative with respect to the query coordinate
        """
        query = np.asarray(query)
        padded = self._padded if mask is None else self._padded[mask]
        if query.shape != padded.shape[:-1] + (padded.shape[-1] - 2,):
            raise ShapeError(f"query shape {query.shape} does not match image {self.data.shape}")
        n3 = self.grid.dims[2]
        h3 = self.grid.h[2]
        dtype = self.data.dtype

        # fractional index into the padded column (ghost zeros at 0 and n3 + 1)
        t = query / dtype.type(h3) + dtype.type(0.5)
        inside = (t >= 0) & (t < n3 + 1)
        k0 = np.clip(np.floor(t), 0, n3).astype(np.intp)
        w = t - k0

        left = np.take_along_axis(padded, k0, axis=-1)
        right = np.take_along_axis(padded, k0 + 1, axis=-1)
        slope = right - left
        values = np.where(inside, left + w * slope, 0).astype(dtype, copy=False)
        if not do_derivative:
            return values, None
        dvalues = np.where(inside, slope / dtype.type(h3), 0).astype(dtype, copy=False)
        return values, dvalues
