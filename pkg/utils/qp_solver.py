"""
Sparse convex QP subsolver.

Solves   min 1/2 x'Px + q'x   s.t.  Ax = b,  Gx <= h
with a Mehrotra predictor-corrector primal-dual interior-point method. Each
Newton system is the reduced KKT matrix [[P + G'DG, A'], [A, 0]] with
D = lambda / w, factorized once per iteration with a sparse LU in the banded
ordering of KktAssembler and reused for the predictor and the corrector.
The KKT sparsity depends only on the patterns of P, A and G, so its assembly
plan is built once and refilled.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

logger = logging.getLogger(__name__)

STEP_FRACTION = 0.99
MAX_REGULARIZATION_ATTEMPTS = 8
FALLBACK_REGULARIZATION = 1e-10


@dataclass
class QpResult:
    x: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    iterations: int
    converged: bool
    regularizations: int
    residual: float


class KktAssembler:
    """
    Assembly plan for [[P + G'DG + rI, A'], [A, 0]] in CSC form.

    Rows and columns are permuted so that every equality row sits just before
    the last variable it touches. For stage-wise constraints this interleaves
    each dynamics row with the stage it closes and the matrix becomes banded,
    so a factorization in natural order fills in linearly with the horizon.
    """

    def __init__(self, P, A, G):
        P = sp.csc_matrix(P)
        A = sp.csc_matrix(A)
        G = sp.csr_matrix(G)
        self._patterns = [(M.indptr.copy(), M.indices.copy()) for M in (P, A, G)]
        P = sp.coo_matrix(P)
        A = sp.coo_matrix(A)
        self.n = n = P.shape[0]
        self.size = size = n + A.shape[0]

        last = np.full(A.shape[0], -1, dtype=np.int64)
        np.maximum.at(last, A.row, A.col)
        last[last < 0] = n
        keys = np.concatenate([2 * np.arange(n) + 1, 2 * last])
        self.order = np.argsort(keys, kind='stable')
        position = np.empty(size, dtype=np.int64)
        position[self.order] = np.arange(size)

        # every pair of nonzeros sharing a row of G contributes D_row * g_a * g_b at (col_a, col_b)
        lengths = np.diff(G.indptr)
        row_of = np.repeat(np.arange(G.shape[0]), lengths)
        counts = lengths[row_of]
        first = np.repeat(np.arange(G.nnz), counts)
        group_start = np.repeat(np.cumsum(counts) - counts, counts)
        second = np.repeat(G.indptr[row_of], counts) + (np.arange(counts.sum()) - group_start)
        self._pair_first = first
        self._pair_second = second
        self._pair_row = row_of[first]

        rows = position[np.concatenate([P.row, G.indices[first], A.row + n, A.col, np.arange(n)])]
        cols = position[np.concatenate([P.col, G.indices[second], A.col, A.row + n, np.arange(n)])]
        keys = cols * size + rows
        unique, self._slots = np.unique(keys, return_inverse=True)
        self._n_slots = len(unique)
        self._indices = (unique % size).astype(np.int32)
        column_counts = np.bincount(unique // size, minlength=size)
        self._indptr = np.concatenate([[0], np.cumsum(column_counts)]).astype(np.int32)

    def matches(self, P, A, G) -> bool:
        matrices = (sp.csc_matrix(P), sp.csc_matrix(A), sp.csr_matrix(G))
        return all(np.array_equal(M.indptr, indptr) and np.array_equal(M.indices, indices)
                   for M, (indptr, indices) in zip(matrices, self._patterns))

    def pair_coefficients(self, G_csr) -> np.ndarray:
        return G_csr.data[self._pair_first] * G_csr.data[self._pair_second]

    def assemble(self, p_values, a_values, coefficients, D, regularization=0.0) -> sp.csc_matrix:
        """The permuted KKT matrix; P and A values are given in COO order of their CSC forms."""
        values = np.concatenate([p_values, D[self._pair_row] * coefficients, a_values, a_values,
                                 np.full(self.n, regularization)])
        data = np.bincount(self._slots, weights=values, minlength=self._n_slots)
        return sp.csc_matrix((data, self._indices, self._indptr), shape=(self.size, self.size))

    def solve(self, lu, rhs) -> np.ndarray:
        solution = np.empty_like(rhs)
        solution[self.order] = lu.solve(rhs[self.order])
        return solution


def _max_step(values, directions):
    negative = directions < 0
    if not np.any(negative):
        return 1.0
    return float(min(1.0, np.min(-values[negative] / directions[negative])))


class InteriorPointQp:
    """One QP instance; owns the factorization workspace for the duration of a solve."""

    def __init__(self, P, q, A, b, G, h, tolerance=1e-9, max_iterations=60, regularization=0.0,
                 assembler: Optional[KktAssembler] = None):
        self.P = sp.csc_matrix(P)
        self.q = np.asarray(q, dtype=float)
        self.A = sp.csc_matrix(A)
        self.b = np.asarray(b, dtype=float)
        self.G = sp.csr_matrix(G)
        self.h = np.asarray(h, dtype=float)
        self.Gt = self.G.T.tocsr()
        self.At = self.A.T.tocsr()
        self.n = len(self.q)
        self.p = len(self.b)
        self.m = len(self.h)
        self.tolerance = tolerance
        self.max_iterations = max_iterations
        self.regularization = 0.0
        self.base_regularization = regularization if regularization > 0 else FALLBACK_REGULARIZATION
        self.regularizations = 0
        if assembler is None or not assembler.matches(self.P, self.A, self.G):
            assembler = KktAssembler(self.P, self.A, self.G)
        self.assembler = assembler
        self._coefficients = assembler.pair_coefficients(self.G)
        self._p_values = sp.coo_matrix(self.P).data
        self._a_values = sp.coo_matrix(self.A).data

    def kkt_matrix(self, D) -> sp.csc_matrix:
        return self.assembler.assemble(self._p_values, self._a_values, self._coefficients, D, self.regularization)

    def factorize(self, D):
        for _ in range(MAX_REGULARIZATION_ATTEMPTS + 1):
            try:
                return splu(self.kkt_matrix(D), permc_spec='NATURAL')
            except RuntimeError:
                self._escalate("singular KKT factorization")
        return None

    def _escalate(self, reason):
        self.regularization = (self.base_regularization if not self.regularization
                               else 10.0 * self.regularization)
        self.regularizations += 1
        logger.debug("QP regularization raised to %.1e (%s)", self.regularization, reason)

    def solve(self) -> QpResult:
        x = np.zeros(self.n)
        y = np.zeros(self.p)
        w = np.maximum(self.h - self.G @ x, 1.0)
        lam = np.ones(self.m)
        scale_q = 1.0 + np.abs(self.q).max(initial=0.0)
        scale_b = 1.0 + np.abs(self.b).max(initial=0.0)
        scale_h = 1.0 + np.abs(self.h).max(initial=0.0)
        residual = np.inf

        for iteration in range(1, self.max_iterations + 1):
            r_d = self.P @ x + self.q + self.At @ y + self.Gt @ lam
            r_p = self.A @ x - self.b
            r_g = self.G @ x + w - self.h
            mu = float(w @ lam) / self.m if self.m else 0.0
            residual = max(np.abs(r_d).max(initial=0.0) / scale_q, np.abs(r_p).max(initial=0.0) / scale_b,
                           np.abs(r_g).max(initial=0.0) / scale_h, mu)
            if residual <= self.tolerance:
                return QpResult(x, y, lam, iteration - 1, True, self.regularizations, residual)

            D = lam / w
            lu = self.factorize(D)
            if lu is None:
                break

            def newton(r_c):
                correction = (lam * r_g - r_c) / w
                solution = self.assembler.solve(lu, np.concatenate([-r_d - self.Gt @ correction, -r_p]))
                dx, dy = solution[:self.n], solution[self.n:]
                return dx, dy, -r_g - self.G @ dx, D * (self.G @ dx) + correction

            dx, dy, dw, dlam = newton(w * lam)
            if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
                self._escalate("non-finite Newton step")
                continue
            if self.m:
                alpha = min(_max_step(w, dw), _max_step(lam, dlam))
                mu_affine = float((w + alpha * dw) @ (lam + alpha * dlam)) / self.m
                sigma = (mu_affine / mu) ** 3 if mu > 0 else 0.0
                dx, dy, dw, dlam = newton(w * lam + dw * dlam - sigma * mu)
                alpha = min(1.0, STEP_FRACTION * min(_max_step(w, dw), _max_step(lam, dlam)))
            else:
                alpha = 1.0
            x = x + alpha * dx
            y = y + alpha * dy
            w = w + alpha * dw
            lam = lam + alpha * dlam

        logger.debug("QP stopped without convergence after %d iterations (residual %.2e)",
                     self.max_iterations, residual)
        return QpResult(x, y, lam, self.max_iterations, False, self.regularizations, residual)


def solve_qp(P, q, A, b, G, h, tolerance=1e-9, max_iterations=60, regularization=0.0,
             assembler: Optional[KktAssembler] = None) -> QpResult:
    return InteriorPointQp(P, q, A, b, G, h, tolerance, max_iterations, regularization, assembler).solve()
