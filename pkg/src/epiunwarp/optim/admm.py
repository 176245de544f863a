"""
ADMM for the split ``min F(b) + G(z)  s.t.  b = z``.

``F`` holds the distance, the PE part of the smoothness term and the barrier,
so it decouples over image columns; ``G`` holds the in-plane smoothness and is
minimized exactly with a fast cosine-transform solve.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import operators as ops
from .common import CountingMatvec, evaluate_start, make_record, max_abs, norm, pe_spacing, rms, working_copy
from .krylov import block_pcg
from .linesearch import armijo_columns
from .report import OptReport, SolverOptions


@dataclass
class ADMMState:
    b: np.ndarray
    z: np.ndarray
    u: np.ndarray   # scaled multiplier
    rho: float
    primal: float = np.inf
    dual: float = np.inf


def default_rho(alpha, h3):
    return alpha / (h3 * h3) if alpha > 0 else 1.0


class ZSolver:
    """
    Exact minimizer of ``alpha (S1 + S2)(z) + (rho hvol / 2) ||z - v||^2``.

    The normal equations ``(alpha H_12 + rho I) z = rho v`` use the same
    Neumann in-plane Laplacian as the loss and are solved with the DCT.
    """

    def __init__(self, alpha, h, shape):
        self.alpha = alpha
        self.h = h
        self.shape = shape
        self._kernel = None
        self._rho = None

    def __call__(self, v, rho):
        if self.alpha == 0:
            return v.copy()
        if self._rho != rho:
            self._kernel = ops.DCTKernel(self.h, self.shape, (0, 1), self.alpha, rho)
            self._rho = rho
        return self._kernel.inverse(rho * v)


def prox_gauss_newton(sub, b, opts: SolverOptions, report: OptReport, n_iter):
    """
    A few column-wise Gauss-Newton steps on the separable subproblem ``sub``.

    Every column gets its own CG solve and its own Armijo step.
    """
    shape = b.shape
    ncols = shape[0] * shape[1]
    for _ in range(n_iter):
        parts = sub.evaluate(b)
        report.func_evals += 1
        g = parts.gradient
        ctx = parts.hess_ctx
        mv = CountingMatvec(ctx.matvec)
        sol = block_pcg(mv, -g.reshape(ncols, -1), ctx.diagonal().reshape(ncols, -1),
                        opts.cg_max_iter, opts.cg_rel_tol)
        report.hess_evals += mv.calls
        report.inner_iters += int(np.max(sol.iters)) if sol.iters.size else 0
        q = sol.x.reshape(shape)
        ls = armijo_columns(sub.column_losses, b, q, g, parts.J_cols, opts.c1, opts.backtrack, opts.max_tries)
        report.func_evals += ls.evals
        if not np.any(ls.steps > 0):
            break
        b = ls.point
        report.note_iterate(max_abs(ops.diff_pe(b, sub.pe_spacing)))
    return b


def admm(obj, b0, opts: SolverOptions | None = None, logger=None):
    """
    ADMM with adaptive augmentation parameter.

    Parameters
    ----------
    obj : Objective
        full loss; ``obj.with_prox`` provides the column-separable b-subproblem
    b0 : numpy.ndarray
        feasible start; ``z0 = b0`` and ``u0 = 0``

    Returns
    -------
    b : numpy.ndarray
    report : OptReport
        records carry ``primal``, ``dual`` and ``rho`` in ``extra``
    """
    opts = opts or SolverOptions()
    report = OptReport("admm", logger=logger)
    h3 = pe_spacing(obj)
    hvol = obj.hvol
    tol = opts.fieldmap_change_tol * h3

    b = working_copy(obj, b0)
    state = ADMMState(b, b.copy(), np.zeros_like(b), opts.rho0 or default_rho(obj.alpha, h3))
    parts = evaluate_start(obj, b)
    report.func_evals += 1
    report.add(make_record(0, parts, norm(parts.gradient), 0.0, 0, rho=state.rho))
    zsolve = ZSolver(obj.alpha, obj.h, b.shape)
    dt = b.dtype.type

    for k in range(1, opts.iterations("admm") + 1):
        b_old, z_old, u_old = state.b, state.z, state.u
        sub = obj.with_prox(state.rho, (state.z - state.u).astype(b.dtype))
        hess_before = report.hess_evals
        state.b = prox_gauss_newton(sub, state.b, opts, report, opts.admm_inner_iter)
        state.z = zsolve(state.b + state.u, state.rho).astype(b.dtype, copy=False)
        state.u = state.u + (state.b - state.z)

        state.primal = norm(state.b - state.z)
        state.dual = state.rho * hvol * norm(state.z - z_old)
        parts = obj.evaluate(state.b)
        report.func_evals += 1
        report.add(make_record(k, parts, norm(parts.gradient) if parts.feasible else np.nan, 1.0,
                               report.hess_evals - hess_before,
                               primal=state.primal, dual=state.dual, rho=state.rho))

        if max(rms(state.b - b_old), rms(state.z - z_old), rms(state.u - u_old)) <= tol:
            report.stop("u-z-b")
            break

        if state.primal > opts.mu * state.dual:
            state.rho *= opts.tau
            state.u = state.u / dt(opts.tau)
        elif state.dual > opts.mu * state.primal:
            state.rho /= opts.tau
            state.u = state.u * dt(opts.tau)
    else:
        report.stop("maxiter")
    report.state = state
    return state.b, report
