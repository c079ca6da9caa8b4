"""Problem and solution containers for the internal conic solver.

A :class:`ConicProblem` is a convex quadratic program over variables z:

    minimize    1/2 z' P z + c' z
    subject to  A_eq z = b_eq
                lb <= z <= ub                  (box bounds, +-inf allowed)
                G_ineq z <= h_ineq             (optional general rows)
                (z[t], z[u1], ..., z[ud]) in second-order cone, per `cones`

The cone membership list follows the (t, u_1..u_d) convention: the first
index is the cone's scalar part, i.e. z_t >= ||(z_u1, ..., z_ud)||_2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

__all__ = ["ConicProblem", "Solution", "SolverContract"]


@dataclass
class ConicProblem:
    n: int
    c: np.ndarray
    P: Optional[sp.spmatrix] = None
    A_eq: Optional[sp.spmatrix] = None
    b_eq: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    G_ineq: Optional[sp.spmatrix] = None
    h_ineq: Optional[np.ndarray] = None
    cones: list[list[int]] = field(default_factory=list)

    def validate(self):
        n = self.n
        if self.c.shape != (n,):
            raise ValueError("c has wrong shape")
        if self.P is not None:
            if self.P.shape != (n, n):
                raise ValueError("P has wrong shape")
            if abs(self.P - self.P.T).max() > 1e-12:
                raise ValueError("P must be symmetric")
        if (self.A_eq is None) != (self.b_eq is None):
            raise ValueError("A_eq and b_eq must be given together")
        if self.A_eq is not None and self.A_eq.shape[1] != n:
            raise ValueError("A_eq has wrong column count")
        if (self.G_ineq is None) != (self.h_ineq is None):
            raise ValueError("G_ineq and h_ineq must be given together")
        for cone in self.cones:
            if len(cone) < 2:
                raise ValueError("cone membership needs at least (t, u1)")
            if any(not 0 <= int(i) < n for i in cone):
                raise ValueError("cone index out of range")
        return self

    def objective(self, z):
        val = float(self.c @ z)
        if self.P is not None:
            val += 0.5 * float(z @ (self.P @ z))
        return val


@dataclass
class Solution:
    x: np.ndarray
    duals: dict
    status: str                       # optimal | infeasible | unbounded | max_iter
    kkt_residuals: tuple              # (primal, dual, gap), relative
    objective: float
    dual_objective: float
    iterations: int
    info: dict = field(default_factory=dict)

    @property
    def optimal(self):
        return self.status == "optimal"


class SolverContract:
    """Anything that maps a ConicProblem to a Solution can be plugged in here
    (e.g. an external solver for cross-validation).  The shipped test suite
    exercises only the internal interior-point implementation."""

    def solve(self, problem, tol=1e-8, max_iter=200):  # pragma: no cover
        raise NotImplementedError
