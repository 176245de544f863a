"""
Preconditioned conjugate gradients, single system and column-batched.

All inner products are accumulated in double precision along the last axis,
so a batch of columns goes through exactly the same floating point operations
as the columns solved one at a time.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

@dataclass
class PCGResult:
    x: np.ndarray
    iters: np.ndarray | int
    rel_res: np.ndarray | float
    breakdown: np.ndarray | bool


def _dot(x, y):
    return np.sum(x * y, axis=-1, dtype=np.float64)


def _as_precond(precond):
    if precond is None:
        return lambda r: r
    if callable(precond):
        return precond
    d = np.asarray(precond)
    if np.any(d <= 0):
        raise ValueError("diagonal preconditioner must be positive")
    return lambda r: r / d.astype(r.dtype, copy=False)


def block_pcg(matvec, rhs, precond=None, max_iter=10, rel_tol=0.1):
    """
    Independent PCG solves for a batch of systems stacked along leading axes.

    Parameters
    ----------
    matvec : callable
        applies the operator to an array shaped like ``rhs``; must act on each
        column (last axis) independently
    rhs : numpy.ndarray (..., m)
    precond : callable or numpy.ndarray, optional
        inverse preconditioner, or the positive diagonal of the preconditioner
    max_iter, rel_tol : int, float
        per-column iteration cap and relative residual target

    Returns
    -------
    PCGResult
        solution with per-column iteration counts, final relative residuals
        and breakdown flags. Converged columns stop updating.
    """
    rhs = np.asarray(rhs)
    apply_m = _as_precond(precond)
    lead = rhs.shape[:-1]

    x = np.zeros_like(rhs)
    r = rhs.copy()
    z = apply_m(r)
    p = z.copy()
    rz = _dot(r, z)
    rhs_norm = np.sqrt(_dot(rhs, rhs))
    res = rhs_norm.copy()
    scale = np.where(rhs_norm > 0, rhs_norm, 1.0)
    iters = np.zeros(lead, dtype=int)
    breakdown = np.zeros(lead, dtype=bool)
    active = np.asarray(rhs_norm > 0)

    for _ in range(max_iter):
        if not np.any(active):
            break
        Ap = matvec(p)
        pAp = _dot(p, Ap)
        bad = active & (pAp <= 0)
        breakdown |= bad
        active &= ~bad
        if not np.any(active):
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            alpha = np.where(active, rz / np.where(active, pAp, 1.0), 0.0)
        a = alpha.astype(rhs.dtype)[..., None]
        x = x + a * p
        r = r - a * Ap
        iters += active
        res = np.where(active, np.sqrt(_dot(r, r)), res)
        done = active & (res < rel_tol * scale)
        active &= ~done
        z = apply_m(r)
        rz_new = _dot(r, z)
        with np.errstate(divide="ignore", invalid="ignore"):
            beta = np.where(active, rz_new / np.where(active, rz, 1.0), 0.0)
        p = np.where(active[..., None], z + beta.astype(rhs.dtype)[..., None] * p, p)
        rz = np.where(active, rz_new, rz)
    rel = np.where(rhs_norm > 0, res / scale, 0.0)
    if not lead:
        return PCGResult(x, int(iters), float(rel), bool(breakdown))
    return PCGResult(x, iters, rel, breakdown)


def pcg(matvec, rhs, precond=None, max_iter=10, rel_tol=0.1):
    """
    Preconditioned CG for ``A x = rhs`` started from zero.

    Stops when ``||r|| < rel_tol ||rhs||`` or after ``max_iter`` iterations.
    Treats ``rhs`` as one flat vector; ``matvec`` and ``precond`` see the
    original shape.

    Returns
    -------
    PCGResult
        ``x``, iteration count, final relative residual, breakdown flag
        (set when ``p^T A p <= 0`` and the iterate so far is returned)
    """
    rhs = np.asarray(rhs)
    shape = rhs.shape
    apply_m = _as_precond(precond)
    flat = rhs.reshape(-1)

    def mv(v):
        return np.asarray(matvec(v.reshape(shape))).reshape(-1)

    def pm(v):
        return np.asarray(apply_m(v.reshape(shape))).reshape(-1)

    res = block_pcg(mv, flat, pm, max_iter, rel_tol)
    return PCGResult(res.x.reshape(shape), res.iters, res.rel_res, res.breakdown)
