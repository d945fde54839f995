"""Dense SVD and the sigma-truncation rule used inside TT-SVD."""

import logging

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict, Field

from .errors import ConvergenceFailure, ShapeMismatch
from .tensor_core import Matrix

logger = logging.getLogger(__name__)


class SVDResult(BaseModel):
    """Thin SVD factors: m = u @ diag(singular_values) @ v.T"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    u: np.ndarray = Field(description="m x k matrix with orthonormal columns")
    singular_values: np.ndarray = Field(description="k nonincreasing nonnegative values")
    v: np.ndarray = Field(description="n x k matrix with orthonormal columns")

    @property
    def k(self) -> int:
        return int(self.singular_values.size)

    def compose(self) -> Matrix:
        """Multiply the factors back into a dense matrix"""
        return (self.u * self.singular_values) @ self.v.T


def full_svd(m: Matrix) -> SVDResult:
    """
    Thin SVD with k = min(rows, cols).

    LAPACK gesdd (numpy) is tried first; on non-convergence the slower but
    more robust gesvd driver is used before giving up.

    Args:
        m: finite 2-D matrix

    Returns:
        SVDResult with nonincreasing singular values
    """
    matrix = np.asarray(m, dtype=np.float64)
    if matrix.ndim != 2 or min(matrix.shape) < 1:
        raise ShapeMismatch(f"full_svd expects a non-empty 2-D matrix, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ConvergenceFailure("matrix contains NaN or Inf")

    try:
        u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    except np.linalg.LinAlgError:
        logger.warning(f"gesdd did not converge on {matrix.shape} matrix, retrying with gesvd")
        try:
            u, s, vt = scipy.linalg.svd(matrix, full_matrices=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as e:
            raise ConvergenceFailure(f"SVD did not converge on {matrix.shape} matrix: {e}") from e

    return SVDResult(u=u, singular_values=s, v=vt.T)


def tail_energies(singular_values: np.ndarray) -> np.ndarray:
    """
    tails[r] = sqrt(sum of s_i^2 for i >= r), for r = 0..k (tails[k] == 0)
    """
    squared = np.asarray(singular_values, dtype=np.float64) ** 2
    suffix = np.cumsum(squared[::-1])[::-1]
    return np.sqrt(np.concatenate([suffix, [0.0]]))


def truncation_rank(singular_values: np.ndarray, sigma: float) -> int:
    """Smallest r >= 1 whose discarded tail energy is <= sigma"""
    tails = tail_energies(singular_values)
    admissible = np.nonzero(tails[1:] <= sigma)[0]
    # tails[k] == 0 always qualifies, so admissible is never empty
    return int(admissible[0]) + 1


def truncate(res: SVDResult, sigma: float) -> tuple[SVDResult, int]:
    """
    Cut an SVD at the minimal rank whose residual Frobenius norm is <= sigma.

    Args:
        res: full (thin) SVD
        sigma: absolute tolerance on the discarded energy

    Returns:
        (truncated SVDResult, rank)
    """
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    rank = truncation_rank(res.singular_values, sigma)
    truncated = SVDResult(
        u=res.u[:, :rank],
        singular_values=res.singular_values[:rank],
        v=res.v[:, :rank],
    )
    return truncated, rank
