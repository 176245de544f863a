"""
Linear operators of the staggered discretization.

Field maps live on an e3-staggered grid of shape ``(n1, n2, n3 + 1)``: cell
centers along the first two axes and nodes along the phase-encoding axis.
Averaging and differencing map such fields to the cell-centered grid
``(n1, n2, n3)``. The smoothness operator is the negative Laplacian with
homogeneous Neumann boundary conditions, applied directly on the staggered
array. Periodic convolution kernels diagonalized by the FFT are provided by
:class:`FFTKernel`.
"""
from __future__ import annotations

import numpy as np
import scipy.fft

from .errors import PreconditionerError, SingularOperatorError

_FFT_WORKERS = 1


def set_fft_workers(n: int) -> None:
    """Cap the number of threads used by FFT kernels."""
    global _FFT_WORKERS
    _FFT_WORKERS = max(1, int(n))


# --------------------------------------------------------------------------- averaging / differencing


def avg_pe(b):
    """Node-to-center average along the last axis."""
    return 0.5 * (b[..., :-1] + b[..., 1:])


def avg_pe_t(y):
    """Adjoint of :func:`avg_pe`."""
    out = np.zeros(y.shape[:-1] + (y.shape[-1] + 1,), dtype=y.dtype)
    out[..., :-1] += 0.5 * y
    out[..., 1:] += 0.5 * y
    return out


def diff_pe(b, h3):
    """Forward difference along the last axis, node values to cell centers."""
    return (b[..., 1:] - b[..., :-1]) / b.dtype.type(h3)


def diff_pe_t(y, h3):
    """Adjoint of :func:`diff_pe`."""
    out = np.zeros(y.shape[:-1] + (y.shape[-1] + 1,), dtype=y.dtype)
    yh = y / y.dtype.type(h3)
    out[..., :-1] -= yh
    out[..., 1:] += yh
    return out


def avg_diff_pe_t(y_avg, y_diff, h3):
    """``avg_pe_t(y_avg) + diff_pe_t(y_diff, h3)`` in one pass."""
    out = np.zeros(y_avg.shape[:-1] + (y_avg.shape[-1] + 1,), dtype=y_avg.dtype)
    half = y_avg.dtype.type(0.5) * y_avg
    yh = y_diff / y_diff.dtype.type(h3)
    out[..., :-1] += half - yh
    out[..., 1:] += half + yh
    return out


# --------------------------------------------------------------------------- Laplacian


def _neumann_second_diff(b, axis, h):
    # G^T G b for the forward difference G along ``axis``
    d = np.diff(b, axis=axis)
    out = np.zeros_like(b)
    n = b.shape[axis]
    lo = [slice(None)] * b.ndim
    hi = [slice(None)] * b.ndim
    lo[axis] = slice(0, n - 1)
    hi[axis] = slice(1, n)
    out[tuple(lo)] -= d
    out[tuple(hi)] += d
    return out / b.dtype.type(h * h)


def laplacian_split_apply(b, h, axes):
    """
    Apply the axis-restricted pieces of the negative Laplacian.

    Parameters
    ----------
    b : numpy.ndarray
        staggered field
    h : sequence of float
        voxel sizes (h1, h2, h3)
    axes : iterable of int
        0-based axes whose stencil terms are included
    """
    axes = tuple(axes)
    if not axes:
        raise ValueError("axes must be non-empty")
    out = np.zeros_like(b)
    for ax in axes:
        out += _neumann_second_diff(b, ax, h[ax])
    return out


def laplacian_apply(b, h):
    """Negative 7-point Laplacian with Neumann boundaries, ``H @ b``."""
    return laplacian_split_apply(b, h, (0, 1, 2))


def laplacian_diag(shape, h, axes=(0, 1, 2), dtype=np.float64):
    """Diagonal of the (split) Neumann negative Laplacian on ``shape``."""
    out = np.zeros(shape, dtype=dtype)
    for ax in axes:
        n = shape[ax]
        counts = np.full(n, 2.0)
        counts[0] = counts[-1] = 1.0
        bshape = [1] * len(shape)
        bshape[ax] = n
        out += (counts / (h[ax] * h[ax])).reshape(bshape)
    return out


def smoothness(b, h, axes=(0, 1, 2)):
    """Discrete smoothness energy ``(h1 h2 h3 / 2) b^T H b``."""
    hvol = h[0] * h[1] * h[2]
    Hb = laplacian_split_apply(b, h, axes)
    return 0.5 * hvol * float(np.sum(b * Hb, dtype=np.float64))


# --------------------------------------------------------------------------- FFT kernels


def laplacian_stencil(h, axes):
    """Negative-Laplacian convolution stencil (3 taps per listed axis)."""
    ndim = len(h)
    stencil = np.zeros((3,) * ndim)
    center = (1,) * ndim
    for ax in axes:
        w = 1.0 / (h[ax] * h[ax])
        stencil[center] += 2 * w
        for off in (0, 2):
            idx = list(center)
            idx[ax] = off
            stencil[tuple(idx)] -= w
    return stencil


class FFTKernel:
    """
    Periodic convolution ``(K + shift * I)`` diagonalized by the FFT.

    The stencil is centered: entry ``stencil[c + d]`` with ``c = s // 2`` is
    the weight of offset ``d``. The transform runs over the last
    ``stencil.ndim`` axes of the inputs when ``axes`` is not given; any
    remaining leading axes are treated as a batch.

    Parameters
    ----------
    stencil : numpy.ndarray
        small symmetric convolution kernel (odd size per axis)
    shape : tuple of int
        shape of the fields the kernel acts on
    shift : float
        nonnegative multiple of the identity added to the kernel
    axes : tuple of int, optional
        axes of ``shape`` the stencil dimensions map onto
    """

    def __init__(self, stencil, shape, shift=0.0, axes=None):
        stencil = np.asarray(stencil, dtype=np.float64)
        if any(s % 2 == 0 for s in stencil.shape):
            raise ValueError("stencil must have odd size along every axis")
        if shift < 0:
            raise ValueError("shift must be nonnegative")
        shape = tuple(shape)
        if axes is None:
            axes = tuple(range(len(shape) - stencil.ndim, len(shape)))
        if len(axes) != stencil.ndim:
            raise ValueError("axes must match the stencil dimensionality")
        self.shape = shape
        self.axes = tuple(axes)
        self.shift = float(shift)

        fshape = tuple(shape[a] for a in self.axes)
        # taps beyond the field size wrap around (periodic embedding)
        embed = np.zeros(fshape)
        center = tuple(s // 2 for s in stencil.shape)
        for idx in np.ndindex(stencil.shape):
            pos = tuple((i - c) % n for i, c, n in zip(idx, center, fshape))
            embed[pos] += stencil[idx]
        # symmetric stencil -> real spectrum
        eig = scipy.fft.fftn(embed).real + self.shift
        bshape = [1] * len(shape)
        for a in self.axes:
            bshape[a] = shape[a]
        self.eigenvalues = eig.reshape(bshape)

    def _transform(self, x, spectrum):
        X = scipy.fft.fftn(x, axes=self.axes, workers=_FFT_WORKERS)
        out = scipy.fft.ifftn(X * spectrum, axes=self.axes, workers=_FFT_WORKERS).real
        return out.astype(x.dtype, copy=False)

    def apply(self, x):
        return self._transform(x, self.eigenvalues)

    __call__ = apply

    def inverse(self, y):
        """Solve ``(K + shift I) x = y``."""
        if np.min(np.abs(self.eigenvalues)) < 1e-14:
            raise SingularOperatorError("kernel spectrum has a (near-)zero eigenvalue")
        return self._transform(y, 1.0 / self.eigenvalues)

    def diagonal(self):
        """Diagonal of the circulant operator (constant: mean eigenvalue)."""
        return np.full(self.shape, float(np.mean(self.eigenvalues)))


def fft_kernel(stencil, shape, shift=0.0, axes=None) -> FFTKernel:
    return FFTKernel(stencil, shape, shift, axes)


class DCTKernel:
    """
    ``weight * H_axes + shift * I`` with ``H_axes`` the split Neumann negative
    Laplacian, diagonalized by the type-II DCT.

    Exact counterpart of :func:`laplacian_split_apply` (no periodic wrap).

    Parameters
    ----------
    h : sequence of float
        voxel sizes, indexed by axis
    shape : tuple of int
    axes : tuple of int
        0-based axes carrying the Laplacian terms
    weight, shift : float
    """

    def __init__(self, h, shape, axes, weight=1.0, shift=0.0):
        if shift < 0 or weight < 0:
            raise ValueError("weight and shift must be nonnegative")
        self.shape = tuple(shape)
        self.axes = tuple(axes)
        self.shift = float(shift)
        eig = np.full([1] * len(self.shape), self.shift)
        for ax in self.axes:
            n = self.shape[ax]
            lam = (2.0 - 2.0 * np.cos(np.pi * np.arange(n) / n)) / (h[ax] * h[ax])
            bshape = [1] * len(self.shape)
            bshape[ax] = n
            eig = eig + weight * lam.reshape(bshape)
        self.eigenvalues = eig

    def _transform(self, x, spectrum):
        X = scipy.fft.dctn(x, type=2, axes=self.axes, norm="ortho", workers=_FFT_WORKERS)
        out = scipy.fft.idctn(X * spectrum, type=2, axes=self.axes, norm="ortho", workers=_FFT_WORKERS)
        return out.astype(x.dtype, copy=False)

    def apply(self, x):
        return self._transform(x, self.eigenvalues)

    __call__ = apply

    def inverse(self, y):
        if np.min(np.abs(self.eigenvalues)) < 1e-14:
            raise SingularOperatorError("kernel spectrum has a (near-)zero eigenvalue")
        return self._transform(y, 1.0 / self.eigenvalues)


def gaussian_stencil_3(sigma=1.0):
    """Normalized 3x3x3 Gaussian weights ``exp(-d^2 / (2 sigma^2))``."""
    d = np.arange(-1, 2)
    g = np.exp(-(d ** 2) / (2.0 * sigma ** 2))
    k = g[:, None, None] * g[None, :, None] * g[None, None, :]
    return k / k.sum()


def gaussian_blur_3(v, sigma=1.0, boundary="periodic"):
    """
    Blur a 3D field with the normalized 3x3x3 Gaussian via :class:`FFTKernel`.

    ``boundary="periodic"`` wraps around; ``"replicate"`` pads every face
    with one copied layer first, so opposite faces never mix.
    """
    if min(v.shape) < 3:
        raise ValueError(f"blur needs at least 3 samples per axis, got {v.shape}")
    if boundary == "periodic":
        return FFTKernel(gaussian_stencil_3(sigma), v.shape).apply(v)
    if boundary == "replicate":
        p = np.pad(v, 1, mode="edge")
        return FFTKernel(gaussian_stencil_3(sigma), p.shape).apply(p)[1:-1, 1:-1, 1:-1]
    raise ValueError(f"unknown boundary {boundary!r}")


# --------------------------------------------------------------------------- Jacobi preconditioner


def jacobi_diag(ctx):
    """
    Exact diagonal of the Gauss-Newton Hessian described by ``ctx``.

    ``ctx`` is a :class:`epiunwarp.objective.HessContext`; its residual
    Jacobian is ``diag(g_avg) A + diag(g_diff) D`` with ``A``/``D`` the PE
    averaging and differencing operators, so each node collects one term
    from each adjacent cell.

    Entries below ``1e-12 * max`` are lifted to that floor; an all-zero
    diagonal becomes the identity.
    """
    h3 = ctx.h[2]
    ga = ctx.g_avg.astype(np.float64)
    gd = ctx.g_diff.astype(np.float64)
    lower = (0.5 * ga - gd / h3) ** 2   # cell k contribution to node k
    upper = (0.5 * ga + gd / h3) ** 2   # cell k contribution to node k + 1
    diag = np.zeros(ga.shape[:-1] + (ga.shape[-1] + 1,))
    diag[..., :-1] += lower
    diag[..., 1:] += upper
    diag *= ctx.hvol

    if ctx.beta > 0:
        p2 = ctx.beta * 0.5 * ctx.hvol * ctx.phi2 / (h3 * h3)
        diag[..., :-1] += p2
        diag[..., 1:] += p2
    if ctx.alpha > 0:
        diag += ctx.alpha * ctx.hvol * laplacian_diag(diag.shape, ctx.h, ctx.reg_axes)
    if ctx.rho > 0:
        diag += ctx.rho * ctx.hvol

    if not np.all(np.isfinite(diag)) or np.any(diag < 0):
        raise PreconditionerError("Hessian diagonal has negative or non-finite entries")
    dmax = float(diag.max())
    if dmax == 0.0:
        return np.ones_like(diag)
    return np.maximum(diag, 1e-12 * dmax)
