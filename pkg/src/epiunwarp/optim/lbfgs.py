"""Limited-memory BFGS with two-loop recursion and Armijo backtracking."""
from __future__ import annotations

from collections import deque

import numpy as np

from .common import (dot, evaluate_start, grad_threshold, make_record, max_abs, norm, pe_spacing,
                     post_step_stop, rms, working_copy)
from .linesearch import armijo
from .report import OptReport, SolverOptions

CURVATURE_TOL = 1e-10
RESET_STEP = 0.25  # accepted steps this short clear the memory
FIRST_STEP = 0.1   # max-abs length of an unscaled gradient step, in PE voxels


def two_loop(g, pairs, d=None):
    """
    Apply the LBFGS inverse-Hessian approximation to ``g``.

    Parameters
    ----------
    g : numpy.ndarray
    pairs : list of (s, y, 1 / s^T y)
        oldest first
    d : numpy.ndarray, optional
        positive diagonal; the initial matrix is ``c D^-1`` with
        ``c = s^T y / y^T D^-1 y`` from the newest pair (``c = s^T y / y^T y``
        and ``D = I`` when omitted)
    """
    q = np.asarray(g, dtype=np.float64).copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * dot(s, q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        Dy = y if d is None else y / d
        q = (q if d is None else q / d) * (dot(s, y) / dot(y, Dy))
    elif d is not None:
        q = q / d
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        bcoef = rho * dot(y, q)
        q += (a - bcoef) * s
    return q


def _scaled_gradient_step(g, h3):
    scale = FIRST_STEP * h3 / max(max_abs(g), 1e-300)
    return -g * g.dtype.type(scale)


def lbfgs(obj, b0, opts: SolverOptions | None = None, logger=None):
    """
    Minimize ``obj`` from ``b0`` with LBFGS.

    Curvature pairs with ``s^T y <= 1e-10 ||s|| ||y||`` are skipped. With
    ``opts.lbfgs_h0 == "jacobi"`` (default) the recursion starts from the
    inverse diagonal of the Hessian context returned with every evaluation;
    otherwise from the scalar ``s^T y / y^T y``, and without stored pairs
    from the gradient scaled to a max-abs length of a tenth of a PE voxel.
    When a step fails the memory is cleared and one restart is tried; an
    accepted step shorter than ``RESET_STEP`` also clears the memory.
    Stopping rules match :func:`gauss_newton`.

    Returns
    -------
    b : numpy.ndarray
    report : OptReport
    """
    opts = opts or SolverOptions()
    report = OptReport("lbfgs", logger=logger)
    h3 = pe_spacing(obj)
    b = working_copy(obj, b0)
    pairs = deque(maxlen=opts.lbfgs_memory)

    def diagonal(parts):
        if opts.lbfgs_h0 != "jacobi" or getattr(parts, "hess_ctx", None) is None:
            return None
        return parts.hess_ctx.diagonal().astype(np.float64)

    def direction(parts):
        g = parts.gradient
        d = diagonal(parts)
        if pairs:
            q = -two_loop(g, list(pairs), d).astype(g.dtype)
            if dot(g, q) < 0:
                return q
            pairs.clear()
        if d is not None:
            return (-g / d).astype(g.dtype)
        return _scaled_gradient_step(g, h3)

    parts = evaluate_start(obj, b)
    report.func_evals += 1
    g = parts.gradient
    gnorm = norm(g)
    gtol = grad_threshold(opts, gnorm)
    report.add(make_record(0, parts, gnorm, 0.0, 0))

    for k in range(1, opts.iterations("lbfgs") + 1):
        if gnorm <= gtol:
            report.stop("grad")
            break
        q = direction(parts)
        ls = armijo(obj.evaluate, b, q, g, parts.J, opts.c1, opts.backtrack, opts.max_tries)
        report.func_evals += ls.tries
        if not ls.success and pairs:
            pairs.clear()
            q = direction(parts)
            ls = armijo(obj.evaluate, b, q, g, parts.J, opts.c1, opts.backtrack, opts.max_tries)
            report.func_evals += ls.tries
        if not ls.success:
            report.stop("linesearch")
            break

        b_new = b + g.dtype.type(ls.step) * q
        new = ls.value
        s = (b_new - b).astype(np.float64)
        y = (new.gradient - g).astype(np.float64)
        sy = dot(s, y)
        if ls.step < RESET_STEP:
            # the quasi-Newton model overshot (typically into the barrier)
            pairs.clear()
        elif sy > CURVATURE_TOL * norm(s) * norm(y):
            pairs.append((s, y, 1.0 / sy))

        J_prev = parts.J
        db = rms(s)
        b, parts, g = b_new, new, new.gradient
        gnorm = norm(g)
        report.add(make_record(k, parts, gnorm, ls.step, 0))
        reason = post_step_stop(opts, J_prev, parts.J, db, h3)
        if reason:
            report.stop(reason)
            break
    else:
        report.stop("maxiter")
    return b, report
