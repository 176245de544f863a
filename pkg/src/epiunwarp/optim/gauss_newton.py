"""Gauss-Newton with Jacobi-preconditioned CG and Armijo backtracking."""
from __future__ import annotations

import numpy as np

from .common import (CountingMatvec, dot, evaluate_start, grad_threshold, make_record, norm, rms,
                     pe_spacing, post_step_stop, working_copy)
from .krylov import pcg
from .linesearch import armijo
from .report import OptReport, SolverOptions


def gauss_newton(obj, b0, opts: SolverOptions | None = None, logger=None):
    """
    Minimize ``obj`` from ``b0`` with Gauss-Newton steps ``b <- b + gamma q``.

    Each step solves ``H_J q = -grad J`` approximately with PCG (Jacobi
    preconditioner from the Hessian context) and picks ``gamma`` by Armijo
    backtracking, which also rejects barrier-infeasible trial points.

    Parameters
    ----------
    obj : object
        provides ``evaluate(b, do_derivative=True)`` returning loss parts with
        ``J``, ``feasible``, ``gradient`` and a ``hess_ctx`` exposing
        ``matvec`` and ``diagonal``
    b0 : numpy.ndarray
        feasible starting point
    opts : SolverOptions, optional
    logger : IterationLogger, optional

    Returns
    -------
    b : numpy.ndarray
    report : OptReport
    """
    opts = opts or SolverOptions()
    report = OptReport("gn", logger=logger)
    h3 = pe_spacing(obj)
    b = working_copy(obj, b0)

    parts = evaluate_start(obj, b)
    report.func_evals += 1
    g = parts.gradient
    gnorm = norm(g)
    gtol = grad_threshold(opts, gnorm)
    report.add(make_record(0, parts, gnorm, 0.0, 0))

    for k in range(1, opts.iterations("gn") + 1):
        if gnorm <= gtol:
            report.stop("grad")
            break
        ctx = parts.hess_ctx
        diag = ctx.diagonal()
        mv = CountingMatvec(ctx.matvec)
        sol = pcg(mv, -g, diag, opts.cg_max_iter, opts.cg_rel_tol)
        report.hess_evals += mv.calls
        report.inner_iters += sol.iters
        q = sol.x
        if not dot(g, q) < 0:
            # CG breakdown: fall back to the preconditioned gradient
            q = -g / diag.astype(g.dtype, copy=False)

        ls = armijo(obj.evaluate, b, q, g, parts.J, opts.c1, opts.backtrack, opts.max_tries)
        report.func_evals += ls.tries
        if not ls.success:
            report.stop("linesearch")
            break
        b_new = b + g.dtype.type(ls.step) * q
        db = rms(b_new - b)
        J_prev = parts.J
        b, parts = b_new, ls.value
        g = parts.gradient
        gnorm = norm(g)
        report.add(make_record(k, parts, gnorm, ls.step, sol.iters))
        reason = post_step_stop(opts, J_prev, parts.J, db, h3)
        if reason:
            report.stop(reason)
            break
    else:
        report.stop("maxiter")
    return b, report
