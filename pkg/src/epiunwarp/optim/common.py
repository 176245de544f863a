"""Helpers shared by the solvers: norms, records and stopping tests."""
from __future__ import annotations

import numpy as np

from ..errors import BarrierError
from .report import IterationRecord


def norm(x):
    return float(np.sqrt(np.sum(np.square(x, dtype=np.float64), dtype=np.float64)))


def dot(x, y):
    return float(np.sum(np.asarray(x, dtype=np.float64) * y, dtype=np.float64))


def max_abs(x):
    return float(np.max(np.abs(x))) if np.size(x) else 0.0


def rms(x):
    """Root-mean-square entry, the per-voxel size used by the change tests."""
    return norm(x) / np.sqrt(np.size(x)) if np.size(x) else 0.0


def pe_spacing(obj):
    return float(getattr(obj, "pe_spacing", 1.0))


def working_copy(obj, b0):
    dtype = getattr(obj, "dtype", None)
    return np.array(b0, dtype=dtype if dtype is not None else np.asarray(b0).dtype)


def evaluate_start(obj, b):
    parts = obj.evaluate(b)
    if not parts.feasible:
        raise BarrierError(f"starting field map violates the barrier (max |d_v b| = {parts.max_abs_dpe:.4f})")
    return parts


def make_record(k, parts, gnorm, step, inner, **extra):
    return IterationRecord(
        iter=k,
        J=float(parts.J),
        D=float(getattr(parts, "D", np.nan)),
        S=float(getattr(parts, "S", np.nan)),
        P=float(getattr(parts, "P", np.nan)),
        gradnorm=float(gnorm),
        step=float(step),
        inner_iters=int(inner),
        max_abs_dpe=float(getattr(parts, "max_abs_dpe", 0.0)),
        extra=extra,
    )


def grad_threshold(opts, g0norm):
    return max(opts.grad_tol * g0norm, opts.grad_abs_tol)


def post_step_stop(opts, J_prev, J, db_rms, h3):
    """
    Loss-change and field-map-change tests after an accepted step.

    ``db_rms`` is the RMS change of the field map in mm; it is compared with
    ``fieldmap_change_tol * h3``.
    """
    if abs(J_prev - J) <= opts.loss_change_tol * abs(J_prev):
        return "loss"
    if db_rms <= opts.fieldmap_change_tol * h3:
        return "fieldmap"
    return None


class CountingMatvec:
    """Wraps a matvec and counts applications (Hessian evaluations)."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, v):
        self.calls += 1
        return self.fn(v)
