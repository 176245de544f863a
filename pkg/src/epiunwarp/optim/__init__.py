"""Solvers for the field-map estimation problem."""
from .admm import ADMMState, admm
from .gauss_newton import gauss_newton
from .krylov import PCGResult, block_pcg, pcg
from .lbfgs import lbfgs
from .linesearch import LineSearchResult, armijo, armijo_columns
from .report import IterationLogger, IterationRecord, OptReport, SolverOptions, tally_stop_reasons

SOLVERS = {"gn": gauss_newton, "admm": admm, "lbfgs": lbfgs}


def solve(name, obj, b0, opts=None, logger=None):
    """Dispatch to one of the solvers by name (``gn``, ``admm`` or ``lbfgs``)."""
    try:
        fn = SOLVERS[name]
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}; choose from {sorted(SOLVERS)}") from None
    return fn(obj, b0, opts, logger)


__all__ = [
    "ADMMState", "IterationLogger", "IterationRecord", "LineSearchResult", "OptReport", "PCGResult",
    "SOLVERS", "SolverOptions", "admm", "armijo", "armijo_columns", "block_pcg", "gauss_newton",
    "lbfgs", "pcg", "solve", "tally_stop_reasons",
]
