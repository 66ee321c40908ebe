"""
Solvers for the symmetric positive-definite systems produced by assembly.

Systems of up to ``DIRECT_SOLVE_LIMIT`` unknowns are factorised once with a
dense Cholesky decomposition; larger systems are solved with conjugate
gradients preconditioned by the matrix diagonal.
"""

import logging
from typing import Union

import numpy as np
from scipy import sparse
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse.linalg import LinearOperator, cg

logger = logging.getLogger(__name__)

DIRECT_SOLVE_LIMIT = 2000

Matrix = Union[np.ndarray, sparse.spmatrix]


class SPDSolver(object):
    """
    Repeated solves with a fixed symmetric positive-definite matrix.

    Args:
        matrix: The matrix, dense or sparse.
        rtol: Relative residual tolerance for the iterative branch.
        maxiter: Iteration cap for the iterative branch.
    """

    def __init__(self, matrix: Matrix, rtol: float = 1e-12, maxiter: int = 10000):
        self.shape = matrix.shape
        self.rtol = rtol
        self.maxiter = maxiter
        self.direct = matrix.shape[0] <= DIRECT_SOLVE_LIMIT

        if self.direct:
            dense = matrix.toarray() if sparse.issparse(matrix) else np.asarray(matrix)
            # raises LinAlgError if the matrix is not positive definite
            self._factor = cho_factor(dense)
        else:
            self._matrix = sparse.csr_matrix(matrix)
            inv_diag = 1.0 / self._matrix.diagonal()
            self._preconditioner = LinearOperator(
                self.shape, matvec=lambda x: inv_diag * x, dtype=float
            )

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """
        Solve for one right-hand side vector, or for the columns of a matrix.

        Args:
            rhs: The right-hand side with shape ``(n,)`` or ``(n, k)``.

        Returns:
            The solution, with the same shape as ``rhs``.
        """
        rhs = np.asarray(rhs, dtype=float)
        if self.direct:
            return cho_solve(self._factor, rhs)

        if rhs.ndim == 2:
            return np.stack([self.solve(col) for col in rhs.T], axis=1)

        if not np.any(rhs):
            return np.zeros_like(rhs)

        x, info = cg(
            self._matrix,
            rhs,
            rtol=self.rtol,
            maxiter=self.maxiter,
            M=self._preconditioner,
        )
        if info > 0:
            logger.warning(
                "CG did not reach rtol={} in {} iterations".format(self.rtol, info)
            )
        elif info < 0:
            raise RuntimeError("CG breakdown (info={})".format(info))
        return x


def spd_solve(matrix: Matrix, rhs: np.ndarray) -> np.ndarray:
    """Solve a single symmetric positive-definite system."""
    return SPDSolver(matrix).solve(rhs)
