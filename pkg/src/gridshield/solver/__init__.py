"""Internal LP/QP/SOCP machinery: interior-point solver, quasidefinite
KKT backends (compiled kernel with pure-Python fallback), and the
branch-and-bound complementarity solvers.

BLAS threading is pinned to one thread on import: the solver factors many
small dense matrices, where thread-pool handoffs cost 10-100x the actual
arithmetic.  Override with GRIDSHIELD_BLAS_THREADS.
"""

import os as _os

try:
    from threadpoolctl import threadpool_limits as _tp_limits
    _tp_limits(int(_os.environ.get("GRIDSHIELD_BLAS_THREADS", "1")), "blas")
except Exception:  # pragma: no cover - threadpoolctl not installed
    pass

from .problem import ConicProblem, Solution, SolverContract
from .ipm import solve, InteriorPointSolver
from .lcp import (LcpSystem, solve_lcp, solve_lcp_auto, BigMTooSmall,
                  default_big_m, inner_lp_value)
from .kkt import HAVE_COMPILED_KERNEL

__all__ = [
    "ConicProblem", "Solution", "SolverContract", "solve",
    "InteriorPointSolver", "LcpSystem", "solve_lcp", "solve_lcp_auto",
    "BigMTooSmall", "default_big_m", "inner_lp_value", "HAVE_COMPILED_KERNEL",
]
