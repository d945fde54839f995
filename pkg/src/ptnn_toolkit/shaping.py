import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ShapeMismatch, UnfactorableVolume
from .tensor_core import DenseTensor, Matrix

DEFAULT_D_TARGET = 4


class ShapePlan(BaseModel):
    """權重矩陣轉為高階張量的形狀規劃 (體積不變)"""

    model_config = ConfigDict(frozen=True)

    original_rows: int = Field(ge=1, description="原始矩陣列數")
    original_cols: int = Field(ge=1, description="原始矩陣行數")
    tensor_shape: tuple[int, ...] = Field(description="張量化後的各維度大小")

    @model_validator(mode="after")
    def _check_volume(self) -> "ShapePlan":
        if len(self.tensor_shape) < 2:
            raise ValueError("tensor_shape needs at least two extents")
        if any(extent < 2 for extent in self.tensor_shape):
            raise ValueError(f"every extent must be >= 2: {self.tensor_shape}")
        if math.prod(self.tensor_shape) != self.original_rows * self.original_cols:
            raise ValueError(
                f"tensor_shape {self.tensor_shape} does not preserve volume "
                f"{self.original_rows} x {self.original_cols}"
            )
        return self

    @property
    def d(self) -> int:
        return len(self.tensor_shape)


def prime_factors(n: int) -> list[int]:
    """
    質因數分解 (由小到大，含重複)

    Args:
        n: 正整數

    Returns:
        質因數列表
    """
    factors = list[int]()
    remaining = n
    divisor = 2
    while divisor * divisor <= remaining:
        while remaining % divisor == 0:
            factors.append(divisor)
            remaining //= divisor
        divisor += 1 if divisor == 2 else 2
    if remaining > 1:
        factors.append(remaining)
    return factors


def plan_shape(rows: int, cols: int, d_target: int = DEFAULT_D_TARGET) -> ShapePlan:
    """
    將 rows x cols 的體積分解成 d_target 個盡量平均的維度

    由大到小取出每個質因數，乘進目前最小的桶子 (同值取索引最小者)；
    空桶 (值為 1) 捨棄，最後由小到大排序。

    Args:
        rows: 矩陣列數
        cols: 矩陣行數
        d_target: 目標階數

    Returns:
        ShapePlan 物件
    """
    if rows < 1 or cols < 1:
        raise ShapeMismatch(f"matrix dimensions must be positive, got {rows} x {cols}")
    if d_target < 2:
        raise ValueError(f"d_target must be >= 2, got {d_target}")

    factors = prime_factors(rows * cols)
    if len(factors) < 2:
        raise UnfactorableVolume(f"volume {rows * cols} ({rows} x {cols}) cannot be split into two or more extents")

    buckets = [1] * d_target
    for factor in sorted(factors, reverse=True):
        smallest = buckets.index(min(buckets))
        buckets[smallest] *= factor

    tensor_shape = tuple(sorted(b for b in buckets if b > 1))
    return ShapePlan(original_rows=rows, original_cols=cols, tensor_shape=tensor_shape)


def fold(m: Matrix, plan: ShapePlan) -> DenseTensor:
    """
    將矩陣 row-major 重新塑形為 plan.tensor_shape

    Args:
        m: 權重矩陣
        plan: 形狀規劃

    Returns:
        張量化後的 DenseTensor
    """
    matrix = np.asarray(m, dtype=np.float64)
    if matrix.shape != (plan.original_rows, plan.original_cols):
        raise ShapeMismatch(
            f"matrix shape {matrix.shape} does not match plan "
            f"({plan.original_rows}, {plan.original_cols})"
        )
    return DenseTensor(data=matrix.reshape(plan.tensor_shape))


def unfold(t: DenseTensor, plan: ShapePlan) -> Matrix:
    """
    將張量還原為原始的 2D 權重矩陣

    Args:
        t: 形狀為 plan.tensor_shape 的張量
        plan: 形狀規劃

    Returns:
        (original_rows, original_cols) 矩陣
    """
    if t.shape != plan.tensor_shape:
        raise ShapeMismatch(f"tensor shape {t.shape} does not match plan {plan.tensor_shape}")
    return t.data.reshape(plan.original_rows, plan.original_cols)
