"""Backtracking Armijo line search, for whole fields and column by column."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DescentDirectionError


@dataclass
class LineSearchResult:
    step: float
    value: object       # whatever ``f`` returned at the accepted point
    tries: int
    success: bool


def _loss(v):
    return float(v.J) if hasattr(v, "J") else float(v)


def _dot(x, y):
    return float(np.sum(np.asarray(x) * np.asarray(y), dtype=np.float64))


def armijo(f, b, q, g, f0=None, c1=1e-4, backtrack=0.5, max_tries=10):
    """
    Largest step ``gamma`` in ``{1, 1/2, 1/4, ...}`` giving sufficient decrease.

    Parameters
    ----------
    f : callable
        returns the loss at a point, either as a float or as an object with a
        ``J`` attribute; ``inf`` marks an infeasible point
    b, q, g : numpy.ndarray
        current point, search direction and gradient
    f0 : float, optional
        loss at ``b`` (evaluated when omitted)

    Returns
    -------
    LineSearchResult
        ``success`` is False when no trial point was acceptable
    """
    gq = _dot(g, q)
    if not gq < 0:
        raise DescentDirectionError(f"not a descent direction: <g, q> = {gq:.3e}")
    if f0 is None:
        f0 = _loss(f(b))
    dt = np.asarray(b).dtype.type
    gamma = 1.0
    for t in range(1, max_tries + 1):
        val = f(b + dt(gamma) * q)
        ft = _loss(val)
        if np.isfinite(ft) and ft <= f0 + c1 * gamma * gq:
            return LineSearchResult(gamma, val, t, True)
        gamma *= backtrack
    return LineSearchResult(0.0, None, max_tries, False)


@dataclass
class ColumnLineSearchResult:
    steps: np.ndarray   # per-column accepted steps (0 where none accepted)
    point: np.ndarray
    tries: int
    evals: int


def armijo_columns(f_cols, b, q, g, f0_cols, c1=1e-4, backtrack=0.5, max_tries=10):
    """
    Independent Armijo searches on every column of a column-separable loss.

    Parameters
    ----------
    f_cols : callable
        ``f_cols(x, mask)`` takes the trial columns ``x`` of shape
        ``(k, n3 + 1)`` selected by the boolean ``mask`` (shape ``(n1, n2)``)
        and returns their ``k`` losses (``inf`` where infeasible); only
        columns still searching are evaluated
    b, q, g : numpy.ndarray (n1, n2, n3 + 1)
    f0_cols : numpy.ndarray (n1, n2)

    Columns whose direction is not a descent direction keep step 0.
    ``evals`` counts calls of ``f_cols``.
    """
    gq = np.sum(g * q, axis=-1, dtype=np.float64)
    pending = gq < 0
    steps = np.zeros(gq.shape)
    gamma = np.where(pending, 1.0, 0.0)
    dt = np.asarray(b).dtype
    tries = evals = 0
    while np.any(pending) and tries < max_tries:
        tries += 1
        trial = b[pending] + gamma[pending].astype(dt)[:, None] * q[pending]
        ft = np.asarray(f_cols(trial, pending), dtype=np.float64)
        evals += 1
        ok = np.isfinite(ft) & (ft <= f0_cols[pending] + c1 * gamma[pending] * gq[pending])
        idx = np.flatnonzero(pending)[ok]
        steps.flat[idx] = gamma.flat[idx]
        pending.flat[idx] = False
        gamma = np.where(pending, gamma * backtrack, 0.0)
    point = b + steps.astype(dt)[..., None] * q
    return ColumnLineSearchResult(steps, point, tries, evals)
