"""Factorised solves for symmetric systems with one averaging constraint.

The systems assembled in :mod:`eitfactor.fem` are symmetric positive
semi-definite with a one-dimensional kernel ``k`` (the constants, for
Neumann-type problems). A gauge row ``c^T x = g`` with multiplier ``lam``
makes them uniquely solvable::

    [A   c] [x  ]   [b]
    [c^T 0] [lam] = [g]

The bordered system is solved by block elimination: ``lam = k^T b / c^T k``
makes the load consistent, the consistent singular system is solved for one
particular solution, and a multiple of ``k`` restores the gauge. Particular
solutions come from a sparse LU of ``A`` with one kernel dof removed (SPD, no
pivoting) or, above ``DIRECT_LIMIT`` unknowns, from Jacobi-preconditioned CG.
"""

from __future__ import annotations

import logging
import os

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .errors import NumericError

logger = logging.getLogger(__name__)

DIRECT_LIMIT = 200_000
CG_RTOL = 1e-10


class ConstrainedSolver:
    """Solve the gauge-bordered system for many right-hand sides.

    ``kernel`` is the null vector of ``A``; ``c`` must not vanish on it.
    """

    def __init__(self, A, c, kernel, method=None):
        A = sparse.csc_matrix(A)
        self.n = A.shape[0]
        self.c = np.asarray(c, dtype=float)
        self.kernel = np.asarray(kernel, dtype=float)
        if abs(self.c @ self.kernel) < 1e-14 * np.linalg.norm(self.c) * np.linalg.norm(self.kernel):
            raise NumericError("gauge functional vanishes on the kernel")
        if method is None:
            method = "direct" if self.n <= DIRECT_LIMIT else "cg"
        self.method = method
        self.A = A
        if method == "direct":
            self._pin = int(np.argmax(np.abs(self.kernel)))
            keep = np.ones(self.n, dtype=bool)
            keep[self._pin] = False
            self._keep = keep
            Ar = A[keep][:, keep].tocsc()
            try:
                self._lu = spla.splu(Ar, permc_spec="MMD_AT_PLUS_A",
                                     options={"SymmetricMode": True}, diag_pivot_thresh=0.0)
            except RuntimeError as exc:
                raise NumericError(f"factorisation failed: {exc}") from exc
        elif method == "cg":
            d = A.diagonal()
            self._jacobi = spla.LinearOperator(A.shape, matvec=lambda x: x / d, dtype=float)
        else:
            raise ValueError(f"unknown method {method!r}")

    def solve(self, b, g=0.0):
        """Solution(s) for right-hand side(s) ``b`` of shape (n,) or (n, k)."""
        b = np.asarray(b, dtype=float)
        single = b.ndim == 1
        B = b[:, None] if single else b
        G = np.broadcast_to(np.asarray(g, dtype=float), (B.shape[1],))
        k, c = self.kernel, self.c
        lam = (k @ B) / (c @ k)
        B = B - np.outer(c, lam)
        if self.method == "direct":
            X = np.zeros_like(B)
            X[self._keep] = self._lu.solve(np.ascontiguousarray(B[self._keep]))
        else:
            X = np.column_stack([self._cg(B[:, j]) for j in range(B.shape[1])])
        X += np.outer(k, (G - c @ X) / (c @ k))
        if single:
            return X[:, 0]
        return X

    def multiplier(self, b):
        """Lagrange multiplier of the gauge row for load(s) ``b``."""
        return (self.kernel @ np.asarray(b, dtype=float)) / (self.c @ self.kernel)

    def _cg(self, b):
        x, info = spla.cg(self.A, b, rtol=CG_RTOL, atol=0.0, M=self._jacobi, maxiter=20 * self.n)
        if info != 0:
            res = np.linalg.norm(self.A @ x - b) / max(np.linalg.norm(b), 1e-300)
            raise NumericError(f"CG did not converge (relative residual {res:.3e})")
        return x


def thread_cap():
    """Worker cap from ``EITFACTOR_THREADS``; ``None`` (no cap) when unset or malformed."""
    try:
        return max(1, int(os.environ["EITFACTOR_THREADS"]))
    except (KeyError, ValueError):
        return None
