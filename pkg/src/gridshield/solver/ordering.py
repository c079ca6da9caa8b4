"""Fill-reducing orderings for the quasidefinite KKT factorizations.

A straightforward greedy minimum-degree on the elimination graph, AMD-flavored
(no supernode detection).  Orderings are cached by sparsity pattern: the
interior-point loop refactorizes the same pattern dozens of times and whole
scenario batches share one problem structure.
"""

from __future__ import annotations

import hashlib

import numpy as np
import scipy.sparse as sp

__all__ = ["min_degree_order", "ordering_for"]

_CACHE = {}
_CACHE_LIMIT = 128


def min_degree_order(n, indptr, indices):
    """Greedy minimum-degree permutation for a symmetric pattern."""
    adj = [set() for _ in range(n)]
    for j in range(n):
        for p in range(indptr[j], indptr[j + 1]):
            i = indices[p]
            if i != j:
                adj[i].add(j)
                adj[j].add(i)
    deg = np.array([len(a) for a in adj], dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    perm = np.empty(n, dtype=np.int64)
    big = np.iinfo(np.int64).max
    for k in range(n):
        deg_view = np.where(alive, deg, big)
        v = int(np.argmin(deg_view))
        perm[k] = v
        alive[v] = False
        nbrs = adj[v]
        for u in nbrs:
            au = adj[u]
            au.discard(v)
            au |= nbrs
            au.discard(u)
            deg[u] = len(au)
        adj[v] = set()
    return perm


def _pattern_key(mat):
    h = hashlib.sha1()
    h.update(np.int64(mat.shape[0]).tobytes())
    h.update(np.asarray(mat.indptr).tobytes())
    h.update(np.asarray(mat.indices).tobytes())
    return h.digest()


def ordering_for(mat_csc):
    """Cached minimum-degree ordering for a CSC matrix pattern."""
    key = _pattern_key(mat_csc)
    perm = _CACHE.get(key)
    if perm is None:
        if len(_CACHE) >= _CACHE_LIMIT:
            _CACHE.clear()
        perm = min_degree_order(mat_csc.shape[0], mat_csc.indptr, mat_csc.indices)
        _CACHE[key] = perm
    return perm
