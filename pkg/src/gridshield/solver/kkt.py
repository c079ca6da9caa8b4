"""Quasidefinite KKT solves behind the interior-point iterations.

Three interchangeable backends solve K z = r for the symmetric indefinite

    K = [[H + eps*I, A'], [A, -eps*I]],

where H is the (scaled) Hessian block.  The compiled LDL^T kernel is the fast
path; a SciPy LU factorization is the pure-Python fallback selected at import
time; tiny systems go through a dense LU.  All backends run one step of
iterative refinement against the unregularized matrix.

Set GRIDSHIELD_KERNEL=python to force the fallback (used by the benchmark).
"""

from __future__ import annotations

import os

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import lu_factor, lu_solve

from .ordering import ordering_for

try:
    from . import _ldl_kernel as _cy
except ImportError:  # pragma: no cover - build-dependent
    _cy = None

if os.environ.get("GRIDSHIELD_KERNEL", "").lower() in ("python", "fallback"):
    _cy = None

HAVE_COMPILED_KERNEL = _cy is not None

__all__ = ["KktSystem", "HAVE_COMPILED_KERNEL", "DENSE_CUTOFF"]

DENSE_CUTOFF = 260
_REG = 1e-9


class _DenseBackend:
    def __init__(self, n1, n2):
        self.n = n1 + n2

    def factor(self, K_csc):
        self._K = K_csc.toarray()
        self._lu = lu_factor(self._K, check_finite=False)

    def raw_solve(self, rhs):
        return lu_solve(self._lu, rhs, check_finite=False)


class _SpluBackend:
    """Pure-Python fallback: sparse LU from SciPy (SuperLU)."""

    def __init__(self, n1, n2):
        self.n = n1 + n2

    def factor(self, K_csc):
        self._lu = spla.splu(K_csc, permc_spec="MMD_AT_PLUS_A",
                             options={"SymmetricMode": True})

    def raw_solve(self, rhs):
        return self._lu.solve(rhs)


class _CyLdlBackend:
    """Compiled LDL^T with a cached fill-reducing ordering."""

    def __init__(self, n1, n2):
        self.n = n1 + n2
        self._sign = np.concatenate([np.ones(n1), -np.ones(n2)])
        self._symbolic = None

    def factor(self, K_csc):
        if self._symbolic is None:
            self._perm = ordering_for(K_csc)
            self._iperm = np.argsort(self._perm)
            self._sign_p = np.ascontiguousarray(self._sign[self._perm])
        Kp = K_csc[self._perm, :][:, self._perm]
        U = sp.triu(Kp, format="csc")
        U.sort_indices()
        Up = U.indptr.astype(np.int32)
        Ui = U.indices.astype(np.int32)
        if self._symbolic is None or U.nnz != self._nnz:
            parent, lnz = _cy.etree_symbolic(self.n, Up, Ui)
            Lp = np.zeros(self.n + 1, dtype=np.int32)
            np.cumsum(lnz, out=Lp[1:self.n + 1])
            self._symbolic = (parent, Lp)
            self._nnz = U.nnz
            self._Li = np.empty(int(Lp[-1]), dtype=np.int32)
            self._Lx = np.empty(int(Lp[-1]))
            self._D = np.empty(self.n)
        parent, Lp = self._symbolic
        _cy.factorize(self.n, Up, Ui, U.data, parent, Lp,
                      self._Li, self._Lx, self._D, self._sign_p, 1e-13)

    def raw_solve(self, rhs):
        x = rhs[self._perm].copy()
        parent, Lp = self._symbolic
        _cy.solve(self.n, Lp, self._Li, self._Lx, self._D, x)
        return x[self._iperm]


class KktSystem:
    """Holds the 2x2 block system and refreshes the factorization as the
    scaling matrix changes across interior-point iterations."""

    def __init__(self, n1, n2, backend=None):
        self.n1, self.n2 = n1, n2
        n = n1 + n2
        if backend is None:
            if n <= DENSE_CUTOFF:
                backend = "dense"
            elif HAVE_COMPILED_KERNEL:
                backend = "cython"
            else:
                backend = "splu"
        self.backend_name = backend
        cls = {"dense": _DenseBackend, "splu": _SpluBackend,
               "cython": _CyLdlBackend}[backend]
        self._impl = cls(n1, n2)
        reg = np.concatenate([np.full(n1, _REG), np.full(n2, -_REG)])
        self._Reg = sp.diags(reg, format="csc")
        self._pattern = None

    def set_matrix(self, H, A):
        """Factor K for Hessian block H (n1 x n1) and equality block A."""
        n1, n2 = self.n1, self.n2
        if A is None or A.shape[0] == 0:
            K0 = sp.csc_matrix(H)
        else:
            K0 = sp.bmat([[H, A.T], [A, None]], format="csc")
        self._K0 = K0
        K = (K0 + self._Reg).tocsc()
        if self._pattern is None:
            self._pattern = K.copy()
            self._pattern.data = np.zeros_like(self._pattern.data)
        K = (K + self._pattern).tocsc()
        K.sort_indices()
        self._impl.factor(K)

    def solve(self, rhs, refine=1):
        z = self._impl.raw_solve(rhs)
        for _ in range(refine):
            r = rhs - self._K0 @ z
            z = z + self._impl.raw_solve(r)
        return z
