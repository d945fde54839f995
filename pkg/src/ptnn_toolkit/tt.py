"""TT-SVD decomposition and tensor-train reconstruction."""

import logging
import math
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import RankTooLow
from .linalg_svd import full_svd, truncate
from .tensor_core import DenseTensor, frobenius_norm

logger = logging.getLogger(__name__)

SigmaRule = Literal["paper", "strict", "standard"]


class TTCores(BaseModel):
    """Tensor-train cores G_1..G_d, core j shaped (r_{j-1}, n_j, r_j)"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    cores: list[DenseTensor] = Field(description="ordered 3-way cores")
    ranks: tuple[int, ...] = Field(description="rank chain r_0..r_d")
    mode_sizes: tuple[int, ...] = Field(description="mode sizes n_1..n_d")
    epsilon_used: float = Field(ge=0.0, description="relative error bound the cores were built with")

    @model_validator(mode="after")
    def _check_chain(self) -> "TTCores":
        d = len(self.mode_sizes)
        if len(self.cores) != d or len(self.ranks) != d + 1:
            raise ValueError(f"{len(self.cores)} cores / {len(self.ranks)} ranks for {d} modes")
        if self.ranks[0] != 1 or self.ranks[-1] != 1:
            raise ValueError(f"boundary ranks must be 1, got {self.ranks}")
        for j, core in enumerate(self.cores):
            expected = (self.ranks[j], self.mode_sizes[j], self.ranks[j + 1])
            if core.shape != expected:
                raise ValueError(f"core {j} has shape {core.shape}, expected {expected}")
        for j in range(1, d):
            cap = min(math.prod(self.mode_sizes[:j]), math.prod(self.mode_sizes[j:]))
            if self.ranks[j] > cap:
                raise ValueError(f"rank r_{j} = {self.ranks[j]} exceeds matricization cap {cap}")
        return self

    @classmethod
    def from_cores(cls, cores: list[DenseTensor], epsilon_used: float = 0.0) -> "TTCores":
        """Derive ranks and mode sizes from the core shapes"""
        ranks = tuple([cores[0].shape[0]] + [core.shape[2] for core in cores])
        mode_sizes = tuple(core.shape[1] for core in cores)
        return cls(cores=cores, ranks=ranks, mode_sizes=mode_sizes, epsilon_used=epsilon_used)

    @property
    def d(self) -> int:
        return len(self.mode_sizes)


def sigma_for(norm: float, epsilon: float, d: int, sigma_rule: SigmaRule = "paper") -> float:
    """
    Per-step truncation threshold.

    paper:    epsilon / (d - 1) * ||Y||_F  (strict 為同義別名)
    standard: epsilon / sqrt(d - 1) * ||Y||_F
    """
    if sigma_rule in ("paper", "strict"):
        return epsilon / (d - 1) * norm
    if sigma_rule == "standard":
        return epsilon / math.sqrt(d - 1) * norm
    raise ValueError(f"unknown sigma rule: {sigma_rule}")


def tt_svd(y: DenseTensor, epsilon: float, sigma_rule: SigmaRule = "paper") -> TTCores:
    """
    Decompose a d-way tensor into TT cores with ||y - y_hat||_F <= epsilon ||y||_F.

    Left-to-right sweep of d - 1 sigma-truncated SVDs; every core except the
    last is a reshaped U factor, so its (r_{j-1} n_j, r_j) unfolding has
    orthonormal columns.

    Args:
        y: tensor with d >= 2 modes
        epsilon: relative error bound
        sigma_rule: "paper" (alias "strict") or "standard" per-step threshold

    Returns:
        TTCores
    """
    if y.ndim < 2:
        raise RankTooLow(f"TT-SVD needs d >= 2, got d = {y.ndim}")
    if epsilon < 0:
        raise ValueError(f"epsilon must be nonnegative, got {epsilon}")

    shape = y.shape
    d = len(shape)
    sigma = sigma_for(frobenius_norm(y), epsilon, d, sigma_rule)

    ranks = [1]
    cores = list[DenseTensor]()
    carry = y.data.reshape(shape[0], -1)
    for j in range(d - 1):
        carry = carry.reshape(ranks[j] * shape[j], -1)
        truncated, rank = truncate(full_svd(carry), sigma)
        cores.append(DenseTensor(data=truncated.u.reshape(ranks[j], shape[j], rank)))
        ranks.append(rank)
        carry = truncated.singular_values[:, None] * truncated.v.T
    cores.append(DenseTensor(data=carry.reshape(ranks[-1], shape[-1], 1)))
    ranks.append(1)

    logger.debug(f"TT-SVD {shape} eps={epsilon} ({sigma_rule}) -> ranks {tuple(ranks)}")
    return TTCores(cores=cores, ranks=tuple(ranks), mode_sizes=shape, epsilon_used=epsilon)


def tt_reconstruct(cores: TTCores) -> DenseTensor:
    """
    Contract the core chain back into a dense tensor.

    Equivalent to the nested sum over rank indices
    W[i_1..i_d] = sum G_1[l_0,i_1,l_1] ... G_d[l_{d-1},i_d,l_d],
    evaluated as a sequence of matrix products.
    """
    first = cores.cores[0].data
    result = first.reshape(first.shape[1], first.shape[2])
    for core in cores.cores[1:]:
        r_prev, n, r_next = core.shape
        result = (result @ core.data.reshape(r_prev, n * r_next)).reshape(-1, r_next)
    return DenseTensor(data=result.reshape(cores.mode_sizes))


def tt_param_count(cores: TTCores) -> int:
    """sum_j r_{j-1} * n_j * r_j"""
    return sum(
        cores.ranks[j] * cores.mode_sizes[j] * cores.ranks[j + 1]
        for j in range(cores.d)
    )


def relative_error(y: DenseTensor, y_hat: DenseTensor) -> float:
    """||y - y_hat||_F / ||y||_F (0 when y is the zero tensor and y_hat matches)"""
    diff = float(np.linalg.norm(y.flat - y_hat.flat))
    norm = frobenius_norm(y)
    if norm == 0.0:
        return 0.0 if diff == 0.0 else math.inf
    return diff / norm
