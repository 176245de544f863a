"""
Applying field maps: corrected images, push-forward matrices, simulated
distortions and quality metrics.

Push-forward matrices act on one PE column at a time. Mass at true voxel ``k``
lands at the fractional index ``p_k = k + sign * b(center_k) / h3`` and is split
linearly between the two neighboring voxels. Mass landing outside the column is
dropped. The transpose of such a matrix interpolates linearly at ``p_k`` with
zeros outside the column, so ``(1 + sign d_v b) * (A^T i)`` reproduces
:func:`objective.mp_transform`.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import operators as ops
from .errors import BarrierError, ShapeError
from .image_model import Grid, ImageModel1D
from .objective import mp_transform
from .optim.krylov import block_pcg

LSQ_LAMBDA = 0.05
LSQ_MAX_ITER = 100
LSQ_REL_TOL = 1e-8


def _data(v):
    return np.asarray(getattr(v, "data", v))


def _check_feasible(b, h3):
    m = float(np.max(np.abs(ops.diff_pe(np.asarray(b, dtype=np.float64), h3))))
    if not m < 1:
        raise BarrierError(f"field map violates the barrier (max |d_v b| = {m:.4f})")


# --------------------------------------------------------------------------- Jacobian correction


def jacobian_correction(b, vol_plus, vol_minus):
    """
    Corrected images ``mp_transform(I+, b, +1)`` and ``mp_transform(I-, b, -1)``.

    Parameters
    ----------
    b : numpy.ndarray (n1, n2, n3 + 1)
        field map in mm
    vol_plus, vol_minus : Volume
        PE-last input pair

    Returns
    -------
    corrected_plus, corrected_minus : numpy.ndarray
    """
    grid = Grid.of(vol_plus)
    if Grid.of(vol_minus) != grid:
        raise ShapeError("image pair must share a grid")
    b = np.asarray(b)
    if b.shape != grid.staggered_shape:
        raise ShapeError(f"field map shape {b.shape} != {grid.staggered_shape}")
    _check_feasible(b, grid.h[2])
    dtype = vol_plus.data.dtype
    cp, _ = mp_transform(ImageModel1D(vol_plus.data, grid), b.astype(dtype), +1)
    cm, _ = mp_transform(ImageModel1D(vol_minus.data, grid), b.astype(dtype), -1)
    return cp, cm


# --------------------------------------------------------------------------- push-forward


@dataclass(frozen=True)
class SplatWeights:
    """Targets and linear weights of the push-forward for a batch of columns."""

    lo: np.ndarray       # lower target index (may lie outside the column)
    w_lo: np.ndarray
    w_hi: np.ndarray
    m: int

    @property
    def lo_in(self):
        return (self.lo >= 0) & (self.lo <= self.m - 1)

    @property
    def hi_in(self):
        return (self.lo + 1 >= 0) & (self.lo + 1 <= self.m - 1)

    @property
    def interior(self):
        """True where no mass of the true voxel is truncated."""
        return (self.lo_in | (self.w_lo == 0)) & (self.hi_in | (self.w_hi == 0))


def splat_weights(b, sign, h3=1.0) -> SplatWeights:
    """Push-forward targets for staggered columns ``b`` (..., m + 1) in mm."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    b = np.asarray(b, dtype=np.float64)
    m = b.shape[-1] - 1
    pos = np.arange(m) + sign * ops.avg_pe(b) / h3
    lo = np.floor(pos).astype(np.intp)
    w_hi = pos - lo
    return SplatWeights(lo, 1.0 - w_hi, w_hi, m)


def push_forward(b_column, sign, h3=1.0):
    """
    Push-forward matrix of one staggered column.

    Returns
    -------
    scipy.sparse.csr_matrix (m, m)
        ``A[y, k]`` is the share of true voxel ``k`` landing in distorted
        voxel ``y``; ``distorted = A @ true``
    """
    b_column = np.asarray(b_column, dtype=np.float64)
    if b_column.ndim != 1 or b_column.size < 3:
        raise ShapeError("push_forward expects one staggered column with at least 3 nodes")
    w = splat_weights(b_column, sign, h3)
    k = np.arange(w.m)
    rows = np.concatenate([w.lo[w.lo_in], w.lo[w.hi_in] + 1])
    cols = np.concatenate([k[w.lo_in], k[w.hi_in]])
    vals = np.concatenate([w.w_lo[w.lo_in], w.w_hi[w.hi_in]])
    return sp.csr_matrix((vals, (rows, cols)), shape=(w.m, w.m))


def splat(w: SplatWeights, x):
    """Apply the push-forward to columns ``x`` (..., m): ``A @ x`` per column."""
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-1]
    ncols = int(np.prod(lead)) if lead else 1
    m = w.m
    base = (np.arange(ncols) * m).reshape(lead + (1,)) if lead else 0
    out = np.zeros(ncols * m)
    for tgt, wt, ok in ((w.lo, w.w_lo, w.lo_in), (w.lo + 1, w.w_hi, w.hi_in)):
        idx = (tgt + base)[ok]
        out += np.bincount(idx, weights=(wt * x)[ok], minlength=ncols * m)
    return out.reshape(x.shape)


def gather(w: SplatWeights, y):
    """Apply the transpose: ``A^T @ y`` per column (linear interpolation at targets)."""
    y = np.asarray(y, dtype=np.float64)
    lo = np.clip(w.lo, 0, w.m - 1)
    hi = np.clip(w.lo + 1, 0, w.m - 1)
    y_lo = np.where(w.lo_in, np.take_along_axis(y, lo, axis=-1), 0.0)
    y_hi = np.where(w.hi_in, np.take_along_axis(y, hi, axis=-1), 0.0)
    return w.w_lo * y_lo + w.w_hi * y_hi


def simulate_pair(true_image, b_true, noise=0.0, seed=0):
    """
    Distorted +v/-v images of ``true_image`` under the field map ``b_true`` (mm).

    ``noise`` adds independent Gaussian noise of that standard deviation to
    each distorted image (seeded by ``seed``).

    Returns
    -------
    vol_plus, vol_minus : Volume
        same grid and affine as ``true_image``
    """
    grid = Grid.of(true_image)
    b_true = np.asarray(b_true, dtype=np.float64)
    if b_true.shape != grid.staggered_shape:
        raise ShapeError(f"field map shape {b_true.shape} != {grid.staggered_shape}")
    _check_feasible(b_true, grid.h[2])
    if noise < 0:
        raise ValueError("noise must be nonnegative")
    x = true_image.data.astype(np.float64)
    rng = np.random.default_rng(seed)
    out = []
    for sign in (+1, -1):
        d = splat(splat_weights(b_true, sign, grid.h[2]), x)
        if noise > 0:
            d = d + noise * rng.standard_normal(d.shape)
        out.append(true_image.with_data(d.astype(true_image.data.dtype)))
    return tuple(out)


# --------------------------------------------------------------------------- least-squares correction


@dataclass
class LSQResult:
    image: np.ndarray
    converged: bool
    iters: int
    warning: str | None = None


def neumann_laplacian_1d(x):
    """Unscaled 1D Neumann negative Laplacian along the last axis."""
    d = np.diff(x, axis=-1)
    out = np.zeros_like(x)
    out[..., :-1] -= d
    out[..., 1:] += d
    return out


def least_squares_correction(b, vol_plus, vol_minus, lam=LSQ_LAMBDA, max_iter=LSQ_MAX_ITER,
                             rel_tol=LSQ_REL_TOL):
    """
    Single corrected image from the normal equations of both push-forwards.

    Solves ``(A+^T A+ + A-^T A- + lam L) x = A+^T i+ + A-^T i-`` column by
    column with CG, ``L`` the voxel-unit 1D Neumann Laplacian along PE.

    Returns
    -------
    LSQResult
        ``converged`` is False (and a warning issued) when some column misses
        the tolerance within ``max_iter`` iterations
    """
    grid = Grid.of(vol_plus)
    if Grid.of(vol_minus) != grid:
        raise ShapeError("image pair must share a grid")
    b = np.asarray(b, dtype=np.float64)
    if b.shape != grid.staggered_shape:
        raise ShapeError(f"field map shape {b.shape} != {grid.staggered_shape}")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    _check_feasible(b, grid.h[2])
    h3 = grid.h[2]
    wp, wm = splat_weights(b, +1, h3), splat_weights(b, -1, h3)
    ip = vol_plus.data.astype(np.float64)
    im = vol_minus.data.astype(np.float64)
    rhs = gather(wp, ip) + gather(wm, im)

    def matvec(x):
        out = gather(wp, splat(wp, x)) + gather(wm, splat(wm, x))
        if lam > 0:
            out += lam * neumann_laplacian_1d(x)
        return out

    sol = block_pcg(matvec, rhs, None, max_iter, rel_tol)
    ok = bool(np.all(sol.rel_res < rel_tol))
    msg = None
    if not ok:
        msg = f"least-squares CG did not converge in {max_iter} iterations (max rel. residual {np.max(sol.rel_res):.2e})"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    iters = int(np.max(sol.iters)) if np.size(sol.iters) else 0
    return LSQResult(sol.x.astype(vol_plus.data.dtype), ok, iters, msg)


# --------------------------------------------------------------------------- metrics


def ssd(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.sum(d * d))


def relative_improvement(input_pair, corrected_pair):
    """Percent reduction of the pair SSD; 0 when the input pair already agrees."""
    if np.shape(input_pair[0]) != np.shape(corrected_pair[0]):
        raise ShapeError("input and corrected pairs differ in shape")
    s_in = ssd(*[_data(v) for v in input_pair])
    if s_in == 0:
        return 0.0
    return 100.0 * (1.0 - ssd(*[_data(v) for v in corrected_pair]) / s_in)


def fieldmap_rel_error(b_est, b_true):
    """Global l2 error of a field map in percent of the true field's norm."""
    b_est = np.asarray(b_est, dtype=np.float64)
    b_true = np.asarray(b_true, dtype=np.float64)
    if b_est.shape != b_true.shape:
        raise ShapeError("field maps differ in shape")
    nt = np.linalg.norm(b_true)
    if nt == 0:
        raise ValueError("true field map is zero")
    return 100.0 * float(np.linalg.norm(b_est - b_true) / nt)


@dataclass
class MetricsReport:
    relative_improvement: float
    smoothness_value: float
    loss_value: float
    fieldmap_rel_error: float | None = None

    def __post_init__(self):
        if self.relative_improvement > 100.0 + 1e-9:
            raise ValueError("relative improvement cannot exceed 100%")


__all__ = [
    "LSQResult", "MetricsReport", "SplatWeights", "fieldmap_rel_error", "gather",
    "jacobian_correction", "least_squares_correction", "push_forward", "relative_improvement",
    "simulate_pair", "splat", "splat_weights", "ssd",
]
