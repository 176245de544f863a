"""Solver options, iteration records and the tab-separated iteration log."""
from __future__ import annotations

import sys
from collections import Counter
from dataclasses import dataclass, field, fields, replace

import numpy as np

STOP_REASONS = ("grad", "loss", "fieldmap", "maxiter", "u-z-b", "linesearch")
DEFAULT_MAX_ITER = {"gn": 50, "lbfgs": 500, "admm": 200}


@dataclass(frozen=True)
class SolverOptions:
    """
    Stopping rules and inner-solver settings shared by all solvers.

    ``grad_tol`` is relative to the initial gradient norm, ``loss_change_tol``
    relative to the previous loss, and ``fieldmap_change_tol`` is in units of
    the PE voxel size (compared against the RMS change of the field map per
    accepted step; for ADMM, of each of ``b``, ``z`` and ``u``).
    ``max_iter=None`` picks the solver default (GN 50, LBFGS 500, ADMM 200).
    ``lbfgs_h0`` selects the initial inverse Hessian of LBFGS: the inverse
    Jacobi diagonal of the current Hessian context, or the usual scalar
    ``s^T y / y^T y``.
    """

    max_iter: int | None = None
    grad_tol: float = 1e-2
    grad_abs_tol: float = 1e-12
    loss_change_tol: float = 1e-4
    fieldmap_change_tol: float = 1e-3
    cg_max_iter: int = 10
    cg_rel_tol: float = 0.1
    c1: float = 1e-4
    backtrack: float = 0.5
    max_tries: int = 10
    lbfgs_memory: int = 10
    lbfgs_h0: str = "jacobi"
    rho0: float | None = None
    mu: float = 10.0
    tau: float = 2.0
    admm_inner_iter: int = 2
    verbose: bool = False

    def __post_init__(self):
        for name in ("grad_tol", "loss_change_tol", "fieldmap_change_tol", "cg_rel_tol", "c1"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.grad_abs_tol < 0:
            raise ValueError("grad_abs_tol must be nonnegative")
        for name in ("cg_max_iter", "max_tries", "lbfgs_memory", "admm_inner_iter"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lbfgs_h0 not in ("jacobi", "scalar"):
            raise ValueError("lbfgs_h0 must be 'jacobi' or 'scalar'")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack must lie in (0, 1)")
        if self.mu <= 1 or self.tau <= 1:
            raise ValueError("mu and tau must exceed 1")
        if self.rho0 is not None and self.rho0 <= 0:
            raise ValueError("rho0 must be positive")

    def iterations(self, solver: str) -> int:
        return self.max_iter if self.max_iter is not None else DEFAULT_MAX_ITER[solver]

    def updated(self, **kw) -> "SolverOptions":
        return replace(self, **kw)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class IterationRecord:
    iter: int
    J: float
    D: float
    S: float
    P: float
    gradnorm: float
    step: float
    inner_iters: int
    max_abs_dpe: float
    extra: dict = field(default_factory=dict)


LOG_COLUMNS = ("iter", "J", "D", "S", "P", "gradnorm", "step", "inner_iters")


class IterationLogger:
    """Writes one tab-separated line per iteration; mirrors to stdout when verbose."""

    def __init__(self, path=None, verbose=False, stream=None):
        self.path = path
        self.verbose = verbose
        self.stream = stream if stream is not None else sys.stdout
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", encoding="utf-8")
            self._emit("\t".join(LOG_COLUMNS))

    def _emit(self, line):
        if self._fh is not None:
            self._fh.write(line + "\n")
        if self.verbose:
            print(line, file=self.stream)

    def header(self, title):
        if self.verbose:
            print(f"# {title}", file=self.stream)
            print("\t".join(LOG_COLUMNS), file=self.stream)

    def log(self, rec: IterationRecord):
        vals = [str(rec.iter)] + [f"{getattr(rec, c):.10e}" for c in LOG_COLUMNS[1:-1]] + [str(rec.inner_iters)]
        self._emit("\t".join(vals))

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class OptReport:
    """Iteration history, evaluation counters and the reason the solver stopped."""

    solver: str
    records: list = field(default_factory=list)
    func_evals: int = 0
    hess_evals: int = 0
    inner_iters: int = 0
    stop_reason: str | None = None
    max_abs_dpe_seen: float = 0.0
    logger: IterationLogger | None = None
    state: object = None

    def note_iterate(self, max_abs_dpe):
        """Hook called for every accepted iterate (including inner ADMM steps)."""
        self.max_abs_dpe_seen = max(self.max_abs_dpe_seen, float(np.max(max_abs_dpe)))

    def add(self, rec: IterationRecord):
        self.records.append(rec)
        self.note_iterate(rec.max_abs_dpe)
        if self.logger is not None:
            self.logger.log(rec)

    def stop(self, reason):
        if reason not in STOP_REASONS:
            raise ValueError(f"unknown stop reason {reason!r}")
        if self.stop_reason is not None:
            raise RuntimeError("stop reason already set")
        self.stop_reason = reason

    @property
    def n_iter(self) -> int:
        return max(0, len(self.records) - 1)

    @property
    def final(self) -> IterationRecord:
        return self.records[-1]

    @property
    def losses(self):
        return np.array([r.J for r in self.records])

    @property
    def all_feasible(self) -> bool:
        return self.max_abs_dpe_seen < 1

    def totals(self) -> dict:
        return {
            "iterations": self.n_iter,
            "func_evals": self.func_evals,
            "hess_evals": self.hess_evals,
            "inner_iters": self.inner_iters,
            "stop_reason": self.stop_reason,
        }


def tally_stop_reasons(reports) -> Counter:
    """Count stop reasons over a set of runs."""
    return Counter(r.stop_reason for r in reports)
