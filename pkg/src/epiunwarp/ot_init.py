"""
Field-map initialization from closed-form 1D optimal transport.

Each PE column of the +v and -v images is turned into a probability measure.
The halfway measure between the two, in the Wasserstein sense, has quantile
function ``(C+^-1 + C-^-1) / 2``. Transport maps into the halfway measure give
per-column displacements; stacking all columns gives a (non-smooth) field map
that is optionally blurred.

Positions here are in voxel-edge coordinates: cell ``k`` covers ``[k, k+1]``
and its center sits at ``k + 0.5``. Each measure is modeled as piecewise
constant on cells, so its CDF and quantile function are piecewise linear and
are evaluated exactly by linear-spline interpolation through the knots.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import operators as ops
from .errors import ShapeError
from .image_model import Grid

POSITIVITY_SHIFT = 1e-3
CLAMP = 0.95


def to_measure(column, eps=POSITIVITY_SHIFT):
    """
    Shift a column (or batch of columns, last axis) to strictly positive
    values and normalize to unit mass.
    """
    x = np.asarray(column, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ValueError("columns need at least two samples")
    lo = x.min(axis=-1, keepdims=True)
    hi = x.max(axis=-1, keepdims=True)
    shifted = (x - lo) + eps * (hi - lo + 1.0)
    return shifted / shifted.sum(axis=-1, keepdims=True)


def cdf(measure):
    """Inclusive prefix sums ``C(x) = sum_{j <= x} i(j)``; last entry forced to 1."""
    c = np.cumsum(measure, axis=-1)
    c /= c[..., -1:]
    return c


def _knots(c):
    # CDF knots at voxel edges 0..m: (0, 0), (1, C0), ..., (m, 1)
    zero = np.zeros(c.shape[:-1] + (1,))
    return np.concatenate([zero, c], axis=-1)


def batched_interp(x, xp, fp):
    """
    Row-wise linear interpolation ``np.interp(x[i], xp[i], fp[i])``.

    ``xp`` must be nondecreasing along the last axis. Queries are clamped to
    the knot range.
    """
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(xp, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    lead = xp.shape[:-1]
    n = xp.shape[-1]
    xp2 = xp.reshape(-1, n)
    fp2 = fp.reshape(-1, n)
    x2 = np.broadcast_to(x, lead + x.shape[-1:]).reshape(xp2.shape[0], -1)

    # segment lookup on offset rows, weights on the original values
    span = np.max(xp2[:, -1] - xp2[:, 0]) + 1.0
    offs = (np.arange(xp2.shape[0]) * 2.0 * span)[:, None]
    base = xp2[:, :1]
    flat_xp = (xp2 - base + offs).ravel()
    xq = np.clip(x2, xp2[:, :1], xp2[:, -1:])
    flat_x = (xq - base + offs).ravel()
    idx = np.searchsorted(flat_xp, flat_x, side="right") - 1
    idx = idx.reshape(x2.shape) - (np.arange(xp2.shape[0]) * n)[:, None]
    idx = np.clip(idx, 0, n - 2)
    x0 = np.take_along_axis(xp2, idx, axis=-1)
    x1 = np.take_along_axis(xp2, idx + 1, axis=-1)
    f0 = np.take_along_axis(fp2, idx, axis=-1)
    f1 = np.take_along_axis(fp2, idx + 1, axis=-1)
    dx = x1 - x0
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(dx > 0, (xq - x0) / dx, 0.0)
    out = f0 + w * (f1 - f0)
    return out.reshape(lead + x.shape[-1:])


class PseudoInverse:
    """
    Quantile function ``C^-1(r) = min{x : C(x) >= r}`` as a linear spline.

    Evaluates to edge positions in ``[0, m]``; ``C^-1(0) = 0``, ``C^-1(1) = m``.
    """

    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64)
        m = self.c.shape[-1]
        self.knots_r = _knots(self.c)
        self.knots_x = np.broadcast_to(np.arange(m + 1, dtype=np.float64), self.knots_r.shape)

    def __call__(self, r):
        r = np.asarray(r, dtype=np.float64)
        if self.c.ndim == 1:
            return np.interp(r, self.knots_r, self.knots_x)
        return batched_interp(r, self.knots_r, self.knots_x)


def pseudo_inverse(c) -> PseudoInverse:
    return PseudoInverse(c)


def cdf_at_centers(c):
    """Piecewise-linear CDF evaluated at cell centers ``k + 0.5``."""
    prev = np.concatenate([np.zeros(c.shape[:-1] + (1,)), c[..., :-1]], axis=-1)
    return 0.5 * (prev + c)


@dataclass(frozen=True)
class TransportPlan:
    """Per-column CDFs, quantile functions and transport maps into the halfway measure."""

    c_plus: np.ndarray
    c_minus: np.ndarray
    inv_plus: PseudoInverse
    inv_minus: PseudoInverse
    T_plus: np.ndarray
    T_minus: np.ndarray

    def inv_half(self, r):
        return 0.5 * (self.inv_plus(r) + self.inv_minus(r))


def transport_plan(mu_plus, mu_minus) -> TransportPlan:
    c_p, c_m = cdf(mu_plus), cdf(mu_minus)
    inv_p, inv_m = PseudoInverse(c_p), PseudoInverse(c_m)
    r_p, r_m = cdf_at_centers(c_p), cdf_at_centers(c_m)
    T_p = 0.5 * (inv_p(r_p) + inv_m(r_p))
    T_m = 0.5 * (inv_p(r_m) + inv_m(r_m))
    return TransportPlan(c_p, c_m, inv_p, inv_m, T_p, T_m)


def column_field(mu_plus, mu_minus, h3=1.0):
    """
    Displacement profile (mm) at cell centers for one column pair or a batch.

    With ``T+``/``T-`` the maps from the +v/-v measures into the halfway
    measure, the displacement at cell ``k`` is the average of
    ``k - T+(k)`` and ``-(k - T-(k))``. The sign matches
    :func:`epiunwarp.objective.mp_transform`: a feature pushed to ``x + b``
    in the +v image and to ``x - b`` in the -v image yields ``b > 0``.

    The expression is evaluated as ``[(q+ - q-)(r+) + (q+ - q-)(r-)] / 4``
    (``q`` quantile functions, ``r`` CDF values at the center), which is
    exactly antisymmetric in the two inputs and exactly zero for identical
    inputs.
    """
    mu_plus = np.asarray(mu_plus, dtype=np.float64)
    mu_minus = np.asarray(mu_minus, dtype=np.float64)
    if mu_plus.shape != mu_minus.shape:
        raise ShapeError(f"column shapes differ: {mu_plus.shape} vs {mu_minus.shape}")
    c_p, c_m = cdf(mu_plus), cdf(mu_minus)
    inv_p, inv_m = PseudoInverse(c_p), PseudoInverse(c_m)
    r_p, r_m = cdf_at_centers(c_p), cdf_at_centers(c_m)
    gap_p = inv_p(r_p) - inv_m(r_p)
    gap_m = inv_p(r_m) - inv_m(r_m)
    return 0.25 * (gap_p + gap_m) * h3


def centers_to_nodes(bc):
    """Cell values to staggered nodes: interior nodes average neighbors, end nodes copy."""
    out = np.empty(bc.shape[:-1] + (bc.shape[-1] + 1,), dtype=bc.dtype)
    out[..., 1:-1] = 0.5 * (bc[..., :-1] + bc[..., 1:])
    out[..., 0] = bc[..., 0]
    out[..., -1] = bc[..., -1]
    return out


def clamp_feasible(b, h3, limit=CLAMP):
    """Scale columns whose PE derivative exceeds ``limit`` in magnitude."""
    dpe = np.abs(ops.diff_pe(b, h3)).max(axis=-1, keepdims=True)
    scale = np.where(dpe > limit, limit / np.maximum(dpe, 1e-300), 1.0)
    return b * scale


def init_field_map(vol_plus, vol_minus, blur=True, grid: Grid | None = None):
    """
    OT-based initial field map (mm, staggered) for a PE-last image pair.

    Parameters
    ----------
    vol_plus, vol_minus : Volume or numpy.ndarray
        +v and -v images with the PE axis last
    blur : bool
        apply the 3x3x3 Gaussian (sigma 1, replicated borders) after the
        column-wise estimate
    grid : Grid, optional
        needed when plain arrays are passed

    Returns
    -------
    numpy.ndarray (n1, n2, n3 + 1), float64
    """
    Ip = np.asarray(getattr(vol_plus, "data", vol_plus))
    Im = np.asarray(getattr(vol_minus, "data", vol_minus))
    if Ip.shape != Im.shape:
        raise ShapeError(f"image pair shapes differ: {Ip.shape} vs {Im.shape}")
    if grid is None:
        grid = Grid(Ip.shape, vol_plus.voxel_size)
    h3 = grid.h[2]

    bc = column_field(to_measure(Ip), to_measure(Im), h3)
    b = centers_to_nodes(bc)
    if blur:
        b = ops.gaussian_blur_3(b, boundary="replicate")
    return clamp_feasible(b, h3)
