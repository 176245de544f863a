"""
Discretized field-map loss ``J(b) = D(b) + alpha S(b) + beta P(b)``.

``D`` is half the squared distance between the two mass-preserving corrections
of the +v/-v images, ``S`` the Neumann-Laplacian smoothness energy, and ``P``
the barrier keeping the PE derivative of ``b`` inside (-1, 1). All integrals use
the midpoint rule with weight ``h1 h2 h3``. Field maps are in mm of
displacement along the PE axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import operators as ops
from .image_model import Grid, ImageModel1D, cell_centers

ALPHA_DEFAULT = 300.0
BETA_DEFAULT = 1e-4


def barrier_phi(z, do_derivative=True):
    """
    Barrier ``phi(z) = z^4 / (1 - z^2)`` on (-1, 1), ``+inf`` elsewhere.

    Returns
    -------
    phi, dphi, d2phi : numpy.ndarray
        value and first two derivatives; derivatives are zero where
        ``phi`` is infinite
    """
    z = np.asarray(z)
    feasible = np.abs(z) < 1
    zf = np.where(feasible, z, 0)
    z2 = zf * zf
    den = 1 - z2
    phi = np.where(feasible, z2 * z2 / den, np.inf)
    if not do_derivative:
        return phi, None, None
    dphi = 2 * zf * z2 * (2 - z2) / (den * den)
    d2phi = 2 * z2 * (z2 * z2 - 3 * z2 + 6) / (den * den * den)
    return phi, dphi, d2phi


def mp_transform(model: ImageModel1D, b, sign, centers=None):
    """
    Mass-preserving correction ``I(x + sign b(x)) * (1 + sign d_v b(x))``.

    Parameters
    ----------
    model : ImageModel1D
        image to correct (PE-last)
    b : numpy.ndarray (n1, n2, n3 + 1)
        staggered field map in mm
    sign : {+1, -1}
        phase-encoding polarity of ``model``

    Returns
    -------
    corrected : numpy.ndarray (n1, n2, n3)
    geom : dict
        interpolated values ``I``, slopes ``dI`` and the modulation factor
    """
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    grid = model.grid
    dtype = model.data.dtype
    b = np.asarray(b, dtype=dtype)
    if centers is None:
        centers = cell_centers(grid).astype(dtype)
    s = dtype.type(sign)
    query = centers + s * ops.avg_pe(b)
    I, dI = model.eval(query)
    modulation = 1 + s * ops.diff_pe(b, grid.h[2])
    return I * modulation, {"I": I, "dI": dI, "modulation": modulation}


@dataclass(frozen=True)
class HessContext:
    """
    Cached pieces of the Gauss-Newton Hessian at one field map.

    The residual Jacobian of ``T+ - T-`` is ``diag(g_avg) A + diag(g_diff) D``.
    """

    g_avg: np.ndarray
    g_diff: np.ndarray
    phi2: np.ndarray
    h: tuple
    hvol: float
    alpha: float
    beta: float
    reg_axes: tuple
    rho: float

    def matvec(self, q):
        """Gauss-Newton Hessian times ``q`` (staggered shape, or batch of columns)."""
        return gn_hess_matvec(self, q)

    def diagonal(self):
        return ops.jacobi_diag(self).astype(self.g_avg.dtype, copy=False)


def gn_hess_matvec(ctx: HessContext, q):
    """
    ``(Jr^T Jr + alpha hvol H + beta hvol/2 D^T diag(phi'') D + rho hvol I) q``.

    ``q`` may be given in staggered shape or flattened to columns
    ``(n1 * n2, n3 + 1)``; the output has the same shape as ``q``.
    """
    shape = q.shape
    q = q.reshape(ctx.g_avg.shape[:-1] + (ctx.g_avg.shape[-1] + 1,))
    h3 = ctx.h[2]
    dt = q.dtype.type
    hvol = dt(ctx.hvol)
    dq = ops.diff_pe(q, h3)
    w = ctx.g_avg * ops.avg_pe(q) + ctx.g_diff * dq
    y_avg = hvol * (ctx.g_avg * w)
    y_diff = hvol * (ctx.g_diff * w)
    if ctx.beta > 0:
        y_diff += dt(ctx.beta * 0.5 * ctx.hvol) * (ctx.phi2 * dq)
    # the PE part of the Neumann Laplacian is D^T D on the staggered nodes
    inplane = tuple(ax for ax in ctx.reg_axes if ax != 2)
    if ctx.alpha > 0 and 2 in ctx.reg_axes:
        y_diff += dt(ctx.alpha * ctx.hvol) * dq
    out = ops.avg_diff_pe_t(y_avg, y_diff, h3)
    if ctx.alpha > 0 and inplane:
        out += dt(ctx.alpha * ctx.hvol) * ops.laplacian_split_apply(q, ctx.h, inplane)
    if ctx.rho > 0:
        out += dt(ctx.rho * ctx.hvol) * q
    return out.reshape(shape)


@dataclass(frozen=True)
class LossParts:
    """
    Objective value, its pieces, gradient and Hessian context.

    ``J_cols`` holds per-column contributions (shape ``(n1, n2)``); they sum
    to ``J`` only when the objective is column-separable (smoothness acting
    along the PE axis alone).
    """

    J: float
    D: float
    S: float
    P: float
    Q: float
    feasible: bool
    gradient: np.ndarray | None
    hess_ctx: HessContext | None
    J_cols: np.ndarray
    max_abs_dpe: float

    @property
    def infeasible(self) -> bool:
        return not self.feasible


class Objective:
    """
    Field-map estimation loss for a +v/-v image pair.

    Parameters
    ----------
    model_plus, model_minus : ImageModel1D
        images acquired with phase encoding +v and -v, on the same grid
    alpha : float
        smoothness weight
    beta : float
        barrier weight
    reg_axes : tuple of int
        axes kept in the smoothness term; ``(2,)`` gives the PE-only piece
        used by the ADMM b-update
    rho : float
        weight of the proximal term ``(rho hvol / 2) ||b - ref||^2``
    ref : numpy.ndarray, optional
        proximal center (staggered)
    """

    def __init__(self, model_plus, model_minus, alpha=ALPHA_DEFAULT, beta=BETA_DEFAULT,
                 reg_axes=(0, 1, 2), rho=0.0, ref=None):
        if model_plus.grid != model_minus.grid:
            raise ValueError("image pair must share a grid")
        if alpha < 0 or beta < 0 or rho < 0:
            raise ValueError("alpha, beta and rho must be nonnegative")
        self.model_plus = model_plus
        self.model_minus = model_minus
        self.grid: Grid = model_plus.grid
        self.dtype = model_plus.data.dtype
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.reg_axes = tuple(reg_axes)
        self.rho = float(rho)
        self.ref = ref
        if self.rho > 0 and ref is None:
            raise ValueError("proximal term needs a reference field")
        self._centers = cell_centers(self.grid).astype(self.dtype)

    @classmethod
    def from_volumes(cls, vol_plus, vol_minus, alpha=ALPHA_DEFAULT, beta=BETA_DEFAULT, dtype=None):
        return cls(ImageModel1D.from_volume(vol_plus, dtype), ImageModel1D.from_volume(vol_minus, dtype),
                   alpha, beta)

    @property
    def h(self):
        return self.grid.h

    @property
    def hvol(self):
        return self.grid.cell_volume

    @property
    def pe_spacing(self):
        return self.grid.h[2]

    @property
    def shape(self):
        return self.grid.staggered_shape

    @property
    def separable(self) -> bool:
        return self.alpha == 0 or self.reg_axes == (2,)

    def with_prox(self, rho, ref, reg_axes=(2,)) -> "Objective":
        """Copy restricted to ``reg_axes`` smoothing plus a proximal term."""
        return Objective(self.model_plus, self.model_minus, self.alpha, self.beta, reg_axes, rho, ref)

    def column_losses(self, x, mask):
        """
        Losses of the columns ``x`` (shape ``(k, n3 + 1)``) selected by ``mask``.

        Only valid for column-separable objectives; agrees with
        ``evaluate(b).J_cols[mask]`` when ``b[mask] == x``.
        """
        if not self.separable:
            raise ValueError("column losses need a column-separable objective")
        mask = np.asarray(mask, dtype=bool)
        x = np.asarray(x, dtype=self.dtype)
        h3 = self.grid.h[2]
        hvol = self.hvol
        f64 = np.float64
        avg = ops.avg_pe(x)
        dpe = ops.diff_pe(x, h3)
        Ip, _ = self.model_plus.eval(self._centers + avg, False, mask)
        Im, _ = self.model_minus.eval(self._centers - avg, False, mask)
        r = Ip * (1 + dpe) - Im * (1 - dpe)
        J = 0.5 * hvol * np.sum(r * r, axis=-1, dtype=f64)
        with np.errstate(invalid="ignore"):
            J += self.beta * 0.5 * hvol * np.sum(barrier_phi(dpe, False)[0], axis=-1, dtype=f64)
        if self.alpha > 0:
            x3 = x[:, None, :]
            Hx = ops.laplacian_split_apply(x3, self.h, (2,))
            J += self.alpha * 0.5 * hvol * np.sum(x3 * Hx, axis=-1, dtype=f64)[:, 0]
        if self.rho > 0:
            d = x - np.asarray(self.ref)[mask]
            J += 0.5 * self.rho * hvol * np.sum(d * d, axis=-1, dtype=f64)
        return J

    def zeros(self):
        return np.zeros(self.shape, dtype=self.dtype)

    def transform_pair(self, b):
        Tp, _ = mp_transform(self.model_plus, b, +1, self._centers)
        Tm, _ = mp_transform(self.model_minus, b, -1, self._centers)
        return Tp, Tm

    def smoothness(self, b):
        return ops.smoothness(np.asarray(b, dtype=np.float64), self.h, self.reg_axes)

    def evaluate(self, b, do_derivative=True) -> LossParts:
        """
        Evaluate the loss and, optionally, gradient and GN Hessian context.

        Infeasible field maps (``|d_v b| >= 1`` somewhere) return ``J = inf``
        and no derivatives.
        """
        b = np.asarray(b, dtype=self.dtype)
        if b.shape != self.shape:
            raise ValueError(f"field map shape {b.shape} != staggered shape {self.shape}")
        dt = self.dtype.type
        h3 = self.grid.h[2]
        hvol = self.hvol
        f64 = np.float64

        Tp, gp = mp_transform(self.model_plus, b, +1, self._centers)
        Tm, gm = mp_transform(self.model_minus, b, -1, self._centers)
        r = Tp - Tm
        D_cols = 0.5 * hvol * np.sum(r * r, axis=-1, dtype=f64)

        dpe = ops.diff_pe(b, h3)
        max_abs = float(np.max(np.abs(dpe)))
        phi, dphi, d2phi = barrier_phi(dpe, do_derivative)
        with np.errstate(invalid="ignore"):
            P_cols = 0.5 * hvol * np.sum(phi, axis=-1, dtype=f64)

        Hb = ops.laplacian_split_apply(b, self.h, self.reg_axes) if self.alpha > 0 else None
        if Hb is not None:
            S_cols = 0.5 * hvol * np.sum(b * Hb, axis=-1, dtype=f64)
        else:
            S_cols = np.zeros(D_cols.shape)

        if self.rho > 0:
            dref = b - self.ref
            Q_cols = 0.5 * self.rho * hvol * np.sum(dref * dref, axis=-1, dtype=f64)
        else:
            Q_cols = np.zeros(D_cols.shape)

        J_cols = D_cols + self.alpha * S_cols + self.beta * P_cols + Q_cols
        D = float(np.sum(D_cols))
        S = float(np.sum(S_cols))
        P = float(np.sum(P_cols))
        Q = float(np.sum(Q_cols))
        feasible = max_abs < 1
        J = D + self.alpha * S + self.beta * P + Q if feasible else np.inf
        if not feasible or not do_derivative:
            return LossParts(J, D, S, P if feasible else np.inf, Q, feasible, None, None, J_cols, max_abs)

        # residual Jacobian: dr/db = diag(g_avg) A + diag(g_diff) D
        g_avg = gp["dI"] * gp["modulation"] + gm["dI"] * gm["modulation"]
        g_diff = gp["I"] + gm["I"]
        grad = ops.avg_pe_t(g_avg * r) + ops.diff_pe_t(g_diff * r, h3)
        grad *= dt(hvol)
        if self.beta > 0:
            grad += dt(self.beta * 0.5 * hvol) * ops.diff_pe_t(dphi, h3)
        if Hb is not None:
            grad += dt(self.alpha * hvol) * Hb
        if self.rho > 0:
            grad += dt(self.rho * hvol) * dref

        ctx = HessContext(g_avg, g_diff, d2phi, self.h, hvol, self.alpha, self.beta, self.reg_axes, self.rho)
        return LossParts(J, D, S, P, Q, True, grad, ctx, J_cols, max_abs)

    def __call__(self, b):
        return self.evaluate(b, do_derivative=False).J


def replace_weights(obj: Objective, alpha=None, beta=None) -> Objective:
    return Objective(obj.model_plus, obj.model_minus,
                     obj.alpha if alpha is None else alpha,
                     obj.beta if beta is None else beta,
                     obj.reg_axes, obj.rho, obj.ref)


__all__ = [
    "ALPHA_DEFAULT", "BETA_DEFAULT", "HessContext", "LossParts", "Objective",
    "barrier_phi", "gn_hess_matvec", "mp_transform", "replace_weights",
]
