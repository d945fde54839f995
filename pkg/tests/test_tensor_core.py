# pyright: reportUnusedFunction=false

import itertools

import numpy as np
import pytest

from ptnn_toolkit.errors import RankTooLow, ShapeMismatch, VolumeMismatch
from ptnn_toolkit.tensor_core import DenseTensor, frobenius_norm, matricize_first, reshape


@pytest.fixture
def random_tensor() -> DenseTensor:
    """提供 (4, 5, 6) 隨機張量的fixture"""
    rng = np.random.default_rng(0)
    return DenseTensor(data=rng.standard_normal((4, 5, 6)))


def describe_dense_tensor():
    """測試 DenseTensor 型別"""

    def test_from_flat_row_major():
        """測試由扁平資料建立 (row-major)"""
        t = DenseTensor.from_flat((2, 3), [1, 2, 3, 4, 5, 6])
        assert t.shape == (2, 3)
        assert t.data[1, 0] == 4.0
        assert t.data.dtype == np.float64

    def test_from_flat_volume_mismatch():
        """測試資料長度與形狀不符"""
        with pytest.raises(VolumeMismatch):
            _ = DenseTensor.from_flat((2, 3), [1, 2, 3])

    def test_zero_extent_rejected():
        """測試拒絕大小為 0 的維度"""
        with pytest.raises(ShapeMismatch):
            _ = DenseTensor(data=np.zeros((2, 0)))

    def test_non_finite_rejected():
        """測試拒絕 NaN / Inf"""
        with pytest.raises(ValueError):
            _ = DenseTensor(data=np.array([1.0, np.nan]))
        with pytest.raises(ValueError):
            _ = DenseTensor(data=np.array([np.inf, 1.0]))

    def test_immutable(random_tensor: DenseTensor):
        """測試建立後不可修改"""
        with pytest.raises(ValueError):
            random_tensor.data[0, 0, 0] = 1.0

    def test_float32_input_promoted():
        """測試 32-bit 輸入轉為 64-bit"""
        t = DenseTensor(data=np.ones((2, 2), dtype=np.float32))
        assert t.data.dtype == np.float64

    def test_equality():
        """測試相等比較"""
        a = DenseTensor.from_flat((2, 2), [1, 2, 3, 4])
        assert a == DenseTensor.from_flat((2, 2), [1, 2, 3, 4])
        assert a != DenseTensor.from_flat((4,), [1, 2, 3, 4])
        assert a != DenseTensor.from_flat((2, 2), [1, 2, 3, 5])


def describe_reshape():
    """測試 reshape"""

    def test_row_major_reinterpretation():
        """測試 (2,3) -> (3,2) 資料不變"""
        t = DenseTensor.from_flat((2, 3), [1, 2, 3, 4, 5, 6])
        r = reshape(t, (3, 2))
        assert r.shape == (3, 2)
        assert list(r.flat) == [1, 2, 3, 4, 5, 6]

    def test_identity():
        """測試相同形狀"""
        t = DenseTensor.from_flat((4,), [1, 2, 3, 4])
        assert reshape(t, (4,)) == t

    def test_round_trip():
        """測試 (2,2,2) -> (8,) -> (2,2,2)"""
        t = DenseTensor(data=np.arange(8.0).reshape(2, 2, 2))
        assert reshape(reshape(t, (8,)), (2, 2, 2)) == t

    def test_volume_mismatch():
        """測試體積不符"""
        t = DenseTensor.from_flat((2, 3), [1, 2, 3, 4, 5, 6])
        with pytest.raises(VolumeMismatch):
            _ = reshape(t, (4, 2))

    @pytest.mark.parametrize("new_shape", [(120,), (10, 12), (2, 3, 4, 5), (6, 20)])
    def test_norm_and_data_preserved(random_tensor: DenseTensor, new_shape: tuple[int, ...]):
        """測試 reshape 不改變資料與範數"""
        r = reshape(random_tensor, new_shape)
        assert np.array_equal(r.flat, random_tensor.flat)
        assert frobenius_norm(r) == frobenius_norm(random_tensor)
        assert reshape(r, random_tensor.shape) == random_tensor


def describe_frobenius_norm():
    """測試 Frobenius 範數"""

    @pytest.mark.parametrize("shape", [(1,), (3, 3), (2, 3, 4)])
    def test_zero_tensor(shape: tuple[int, ...]):
        """測試零張量"""
        assert frobenius_norm(DenseTensor(data=np.zeros(shape))) == 0.0

    def test_three_four_five():
        """測試 3-4-5"""
        assert frobenius_norm(DenseTensor.from_flat((2, 2), [3, 0, 0, 4])) == pytest.approx(5.0)

    def test_matches_brute_force(random_tensor: DenseTensor):
        """測試與逐元素平方和一致"""
        total = 0.0
        for value in random_tensor.flat:
            total += float(value) ** 2
        assert abs(frobenius_norm(random_tensor) - total**0.5) <= 1e-12


def describe_matricize_first():
    """測試第一維展開"""

    def test_three_way():
        """測試 (2,3,4) -> 2x12"""
        t = DenseTensor(data=np.arange(24.0).reshape(2, 3, 4))
        m = matricize_first(t)
        assert m.shape == (2, 12)
        assert np.array_equal(m[1], t.data[1].ravel())

    def test_two_way():
        """測試 (5,7) 已經是矩陣"""
        t = DenseTensor(data=np.arange(35.0).reshape(5, 7))
        assert np.array_equal(matricize_first(t), t.data)

    def test_index_arithmetic():
        """測試 [i,j,k] == matrix[i, 3j + k]"""
        rng = np.random.default_rng(3)
        t = DenseTensor(data=rng.standard_normal((3, 3, 3)))
        m = matricize_first(t)
        for i, j, k in itertools.product(range(3), repeat=3):
            assert t.data[i, j, k] == m[i, 3 * j + k]

    def test_inverse_by_reshape(random_tensor: DenseTensor):
        """測試展開後 reshape 回原形狀"""
        m = matricize_first(random_tensor)
        assert reshape(DenseTensor(data=m), random_tensor.shape) == random_tensor

    def test_rank_too_low():
        """測試 d < 2"""
        with pytest.raises(RankTooLow):
            _ = matricize_first(DenseTensor.from_flat((4,), [1, 2, 3, 4]))
