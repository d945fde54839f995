import math
from collections.abc import Sequence
from typing import Any

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .errors import RankTooLow, ShapeMismatch, VolumeMismatch

Matrix = npt.NDArray[np.float64]


class DenseTensor(BaseModel):
    """d 階稠密張量 (row-major, float64, 建立後不可變)"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray = Field(description="形狀為 (n_1, ..., n_d) 的 float64 陣列")

    @field_validator("data", mode="before")
    @classmethod
    def _validate_data(cls, value: Any) -> np.ndarray:
        array = np.array(value, dtype=np.float64, order="C", copy=True)
        if array.ndim < 1:
            raise ShapeMismatch("tensor must have at least one mode")
        if any(extent < 1 for extent in array.shape):
            raise ShapeMismatch(f"zero-extent tensors are not allowed: {array.shape}")
        if not np.all(np.isfinite(array)):
            raise ValueError("tensor contains NaN or Inf")
        array.flags.writeable = False
        return array

    @classmethod
    def from_flat(cls, shape: Sequence[int], values: Sequence[float] | np.ndarray) -> "DenseTensor":
        """
        從扁平資料與形狀建立張量

        Args:
            shape: 各維度大小
            values: row-major 順序的扁平資料

        Returns:
            DenseTensor 物件
        """
        flat = np.asarray(values, dtype=np.float64).ravel()
        if math.prod(shape) != flat.size:
            raise VolumeMismatch(f"shape {tuple(shape)} does not hold {flat.size} values")
        return cls(data=flat.reshape(tuple(shape)))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def flat(self) -> np.ndarray:
        return self.data.ravel()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None  # type: ignore[assignment]


def reshape(t: DenseTensor, new_shape: Sequence[int]) -> DenseTensor:
    """
    以新的形狀重新解讀 row-major 資料 (資料本身不變)

    Args:
        t: 輸入張量
        new_shape: 新形狀

    Returns:
        重新塑形後的張量
    """
    target = tuple(int(n) for n in new_shape)
    if math.prod(target) != t.size:
        raise VolumeMismatch(f"cannot reshape {t.shape} into {target}")
    return DenseTensor(data=t.data.reshape(target))


def frobenius_norm(t: DenseTensor) -> float:
    """Frobenius 範數 sqrt(sum x^2)"""
    return float(np.linalg.norm(t.flat))


def matricize_first(t: DenseTensor) -> Matrix:
    """
    沿第一個維度展開為 (n_1, volume / n_1) 矩陣

    Args:
        t: 至少 2 階的張量

    Returns:
        row-major 的矩陣
    """
    if t.ndim < 2:
        raise RankTooLow(f"matricization needs d >= 2, got d = {t.ndim}")
    return t.data.reshape(t.shape[0], -1)
