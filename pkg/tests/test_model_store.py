# pyright: reportUnusedFunction=false

import json
import struct
from pathlib import Path

import numpy as np
import pytest

from ptnn_toolkit.errors import BadDimensions, BadMagic, CorruptLength, IoError, ShapeMismatch, UnsupportedVersion
from ptnn_toolkit.model_store import (
    EMBEDDING_LAYER,
    HEAD_LAYER,
    ArchitectureSpec,
    ModelBundle,
    ToyDataset,
    ToyOracle,
    evaluate,
    forward,
    generate_toy_bundle,
    load_bundle,
    load_tt_checkpoint,
    save_bundle,
    save_tt_checkpoint,
)
from ptnn_toolkit.shaping import fold, plan_shape
from ptnn_toolkit.tensor_core import DenseTensor
from ptnn_toolkit.tt import tt_reconstruct, tt_svd


@pytest.fixture(scope="module")
def toy() -> tuple[ModelBundle, ToyDataset]:
    """提供 seed 42 的玩具模型與資料集"""
    return generate_toy_bundle(42)


@pytest.fixture
def plain_bundle() -> ModelBundle:
    """提供沒有架構描述的一般 bundle"""
    rng = np.random.default_rng(0)
    return ModelBundle(
        weights={
            "a.weight": DenseTensor(data=rng.standard_normal((8, 8))),
            "b.bias": DenseTensor(data=rng.standard_normal(13)),
            "c.kernel": DenseTensor(data=rng.standard_normal((2, 3, 4))),
        }
    )


def describe_generate_toy_bundle():
    """測試玩具模型產生器"""

    def test_layout(toy: tuple[ModelBundle, ToyDataset]):
        """測試層名稱、形狀與參數量"""
        bundle, data = toy
        assert bundle.layer_names == [EMBEDDING_LAYER, "blocks.0.weight", "blocks.1.weight", HEAD_LAYER]
        assert bundle.weights[EMBEDDING_LAYER].shape == (256, 64)
        assert bundle.weights[HEAD_LAYER].shape == (64, 10)
        assert bundle.total_params == 256 * 64 + 2 * 64 * 64 + 64 * 10
        assert data.inputs.shape == (2000, 8)
        assert data.labels.shape == (2000,)

    def test_teacher_scores_perfectly(toy: tuple[ModelBundle, ToyDataset]):
        """測試原始模型準確率為 1.0"""
        bundle, data = toy
        assert evaluate(bundle, data) == 1.0

    def test_deterministic(toy: tuple[ModelBundle, ToyDataset]):
        """測試相同 seed 產生相同 bundle"""
        bundle, data = toy
        again, again_data = generate_toy_bundle(42)
        assert again == bundle
        assert np.array_equal(again_data.inputs, data.inputs)
        assert np.array_equal(again_data.labels, data.labels)

    def test_different_seed(toy: tuple[ModelBundle, ToyDataset]):
        """測試不同 seed 產生不同權重"""
        other, _ = generate_toy_bundle(43)
        assert other != toy[0]

    def test_zeroed_hidden_layer_hurts(toy: tuple[ModelBundle, ToyDataset]):
        """測試把隱藏層歸零會降低準確率"""
        bundle, data = toy
        zeroed = bundle.with_weight("blocks.0.weight", DenseTensor(data=np.zeros((64, 64))))
        assert evaluate(zeroed, data) < 1.0

    def test_all_zero_predicts_class_zero(toy: tuple[ModelBundle, ToyDataset]):
        """測試全零權重的準確率等於標籤 0 的比例"""
        bundle, data = toy
        zeros = bundle
        for name, tensor in bundle.weights.items():
            zeros = zeros.with_weight(name, DenseTensor(data=np.zeros(tensor.shape)))
        expected = float(np.count_nonzero(data.labels == 0)) / data.labels.size
        assert evaluate(zeros, data) == expected

    def test_lossless_compression_keeps_accuracy(toy: tuple[ModelBundle, ToyDataset]):
        """測試以 epsilon 1e-10 壓縮每一層後準確率不變"""
        bundle, data = toy
        rebuilt = bundle
        for name in bundle.layer_names:
            plan = plan_shape(*bundle.weights[name].shape)
            cores = tt_svd(fold(bundle.matrix(name), plan), 1e-10)
            rebuilt = rebuilt.with_weight(name, DenseTensor(data=tt_reconstruct(cores).data.reshape(bundle.weights[name].shape)))
        assert evaluate(rebuilt, data) == 1.0

    def test_planted_structure_survives_epsilon(toy: tuple[ModelBundle, ToyDataset]):
        """測試 epsilon 0.5 只截掉雜訊，embedding ranks 為 (1,8,8,8,1)"""
        bundle, _ = toy
        plan = plan_shape(256, 64)
        cores = tt_svd(fold(bundle.matrix(EMBEDDING_LAYER), plan), 0.5)
        assert cores.ranks == (1, 8, 8, 8, 1)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"n_layers": 2},
            {"width": 1},
            {"n_classes": 1},
            {"seq_len": 0},
            {"n_samples": 0},
            {"noise_amplitude": -0.1},
            {"planted_rank": 0},
        ],
    )
    def test_bad_dimensions(kwargs: dict[str, float]):
        """測試無效的維度設定"""
        with pytest.raises(BadDimensions):
            _ = generate_toy_bundle(1, **kwargs)  # pyright: ignore[reportArgumentType]


def describe_forward():
    """測試前向傳播"""

    def test_logit_shape(toy: tuple[ModelBundle, ToyDataset]):
        """測試輸出形狀"""
        bundle, data = toy
        assert forward(bundle, data.inputs[:5]).shape == (5, 10)

    def test_out_of_range_tokens(toy: tuple[ModelBundle, ToyDataset]):
        """測試超出詞表範圍的 token"""
        bundle, _ = toy
        with pytest.raises(ShapeMismatch):
            _ = forward(bundle, np.array([[0, 256]]))

    def test_requires_architecture(plain_bundle: ModelBundle):
        """測試沒有架構描述的 bundle"""
        with pytest.raises(ShapeMismatch):
            _ = forward(plain_bundle, np.zeros((1, 1), dtype=np.int64))

    def test_oracle_for_teacher(toy: tuple[ModelBundle, ToyDataset]):
        """測試由 bundle 重建的 oracle 與產生器的資料集一致"""
        bundle, data = toy
        oracle = ToyOracle.for_teacher(bundle)
        assert np.array_equal(oracle.data.labels, data.labels)
        assert oracle.evaluate(bundle) == 1.0


def describe_model_bundle():
    """測試 ModelBundle"""

    def test_matrix_view(plain_bundle: ModelBundle):
        """測試各種維度權重的 2D 視圖"""
        assert plain_bundle.matrix("a.weight").shape == (8, 8)
        assert plain_bundle.matrix("b.bias").shape == (1, 13)
        assert plain_bundle.matrix("c.kernel").shape == (2, 12)

    def test_with_weight_is_a_copy(plain_bundle: ModelBundle):
        """測試替換權重不影響原 bundle"""
        replaced = plain_bundle.with_weight("a.weight", DenseTensor(data=np.zeros((8, 8))))
        assert not np.array_equal(plain_bundle.weights["a.weight"].data, np.zeros((8, 8)))
        assert np.array_equal(replaced.weights["a.weight"].data, np.zeros((8, 8)))

    def test_with_weight_shape_mismatch(plain_bundle: ModelBundle):
        """測試替換的形狀不符"""
        with pytest.raises(ShapeMismatch):
            _ = plain_bundle.with_weight("a.weight", DenseTensor(data=np.zeros((4, 16))))

    def test_architecture_mismatch():
        """測試權重與架構描述不符"""
        arch = ArchitectureSpec(vocab_size=4, width=2, n_blocks=1, n_classes=2)
        with pytest.raises(ValueError):
            _ = ModelBundle(weights={"x": DenseTensor(data=np.ones((4, 2)))}, architecture=arch)


def describe_bundle_file():
    """測試 bundle 檔案格式"""

    def test_round_trip(plain_bundle: ModelBundle, tmp_path: Path):
        """測試儲存後讀回完全相同"""
        path = tmp_path / "plain.ptwt"
        save_bundle(plain_bundle, path)
        assert load_bundle(path) == plain_bundle

    def test_toy_round_trip(toy: tuple[ModelBundle, ToyDataset], tmp_path: Path):
        """測試玩具模型的架構與資料集描述也被保存"""
        path = tmp_path / "toy.ptwt"
        save_bundle(toy[0], path)
        loaded = load_bundle(path)
        assert loaded == toy[0]
        assert loaded.architecture == toy[0].architecture
        assert loaded.dataset == toy[0].dataset

    def test_randomized_round_trips(tmp_path: Path):
        """測試 20 組隨機 bundle"""
        rng = np.random.default_rng(99)
        for i in range(20):
            weights = dict[str, DenseTensor]()
            for j in range(int(rng.integers(1, 5))):
                shape = tuple(int(n) for n in rng.integers(1, 6, size=int(rng.integers(1, 4))))
                weights[f"layer{j}.w"] = DenseTensor(data=rng.standard_normal(shape))
            bundle = ModelBundle(weights=weights)
            path = tmp_path / f"{i}.ptwt"
            save_bundle(bundle, path)
            assert load_bundle(path) == bundle

    def test_float32_tensor(tmp_path: Path):
        """測試讀取 32-bit 浮點張量"""
        name = b"w"
        payload = b"PTWT" + struct.pack("<II", 1, 1)
        payload += struct.pack("<I", len(name)) + name
        payload += struct.pack("<BI", 0, 2) + struct.pack("<2Q", 2, 2)
        payload += np.array([1.5, 2.0, -3.0, 0.25], dtype="<f4").tobytes()
        descriptor = json.dumps({"architecture": None, "dataset": None}).encode()
        payload += struct.pack("<I", len(descriptor)) + descriptor
        path = tmp_path / "f32.ptwt"
        _ = path.write_bytes(payload)
        loaded = load_bundle(path)
        assert loaded.weights["w"].data.dtype == np.float64
        assert np.array_equal(loaded.weights["w"].data, [[1.5, 2.0], [-3.0, 0.25]])

    def test_truncated(plain_bundle: ModelBundle, tmp_path: Path):
        """測試截斷的檔案"""
        path = tmp_path / "cut.ptwt"
        save_bundle(plain_bundle, path)
        _ = path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CorruptLength):
            _ = load_bundle(path)

    def test_trailing_bytes(plain_bundle: ModelBundle, tmp_path: Path):
        """測試多餘的位元組"""
        path = tmp_path / "long.ptwt"
        save_bundle(plain_bundle, path)
        _ = path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(CorruptLength):
            _ = load_bundle(path)

    def test_invalid_utf8_name(tmp_path: Path):
        """測試張量名稱不是合法 UTF-8"""
        name = b"\xff\xfe"
        payload = b"PTWT" + struct.pack("<II", 1, 1)
        payload += struct.pack("<I", len(name)) + name
        payload += struct.pack("<BI", 0, 1) + struct.pack("<Q", 2)
        payload += np.array([1.0, 2.0], dtype="<f4").tobytes()
        descriptor = json.dumps({"architecture": None, "dataset": None}).encode()
        payload += struct.pack("<I", len(descriptor)) + descriptor
        path = tmp_path / "name.ptwt"
        _ = path.write_bytes(payload)
        with pytest.raises(CorruptLength):
            _ = load_bundle(path)

    def test_bad_magic(plain_bundle: ModelBundle, tmp_path: Path):
        """測試錯誤的 magic"""
        path = tmp_path / "magic.ptwt"
        save_bundle(plain_bundle, path)
        _ = path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(BadMagic):
            _ = load_bundle(path)

    def test_unsupported_version(plain_bundle: ModelBundle, tmp_path: Path):
        """測試不支援的版本"""
        path = tmp_path / "version.ptwt"
        save_bundle(plain_bundle, path)
        _ = path.write_bytes(b"PTWT" + struct.pack("<I", 2) + path.read_bytes()[8:])
        with pytest.raises(UnsupportedVersion):
            _ = load_bundle(path)

    def test_missing_file(tmp_path: Path):
        """測試不存在的檔案"""
        with pytest.raises(IoError):
            _ = load_bundle(tmp_path / "missing.ptwt")


def describe_tt_checkpoint():
    """測試 TT checkpoint 檔案格式"""

    def test_round_trip(tmp_path: Path):
        """測試 768x768 形狀規劃的 checkpoint"""
        rng = np.random.default_rng(4)
        plan = plan_shape(768, 768)
        vectors = [rng.standard_normal(n) for n in plan.tensor_shape]
        tensor = DenseTensor(data=np.einsum("i,j,k,l->ijkl", *vectors))
        cores = tt_svd(tensor, 0.1)
        path = tmp_path / "layer.pttt"
        save_tt_checkpoint(cores, plan, path)
        loaded, loaded_plan = load_tt_checkpoint(path)
        assert loaded_plan == plan
        assert loaded.ranks == cores.ranks
        assert loaded.mode_sizes == (24, 24, 32, 32)
        assert loaded.epsilon_used == 0.1
        assert all(a == b for a, b in zip(loaded.cores, cores.cores))

    def test_randomized_round_trips(tmp_path: Path):
        """測試 20 組隨機權重矩陣的 checkpoint"""
        rng = np.random.default_rng(17)
        for i in range(20):
            rows, cols = (int(n) for n in rng.integers(2, 40, size=2))
            plan = plan_shape(rows, cols)
            cores = tt_svd(fold(rng.standard_normal((rows, cols)), plan), float(rng.uniform(0.0, 0.6)))
            path = tmp_path / f"{i}.pttt"
            save_tt_checkpoint(cores, plan, path)
            loaded, loaded_plan = load_tt_checkpoint(path)
            assert loaded_plan == plan
            assert np.array_equal(tt_reconstruct(loaded).data, tt_reconstruct(cores).data)

    def test_plan_mismatch(tmp_path: Path):
        """測試 cores 與形狀規劃不符"""
        cores = tt_svd(DenseTensor(data=np.ones((2, 2, 2, 2))), 0.1)
        with pytest.raises(ShapeMismatch):
            save_tt_checkpoint(cores, plan_shape(8, 8), tmp_path / "bad.pttt")

    def test_truncated(tmp_path: Path):
        """測試截斷的 checkpoint"""
        cores = tt_svd(DenseTensor(data=np.ones((2, 2, 2, 2))), 0.1)
        path = tmp_path / "cut.pttt"
        save_tt_checkpoint(cores, plan_shape(4, 4), path)
        _ = path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(CorruptLength):
            _ = load_tt_checkpoint(path)

    def test_bundle_is_not_a_checkpoint(plain_bundle: ModelBundle, tmp_path: Path):
        """測試把 bundle 當成 checkpoint 讀取"""
        path = tmp_path / "plain.ptwt"
        save_bundle(plain_bundle, path)
        with pytest.raises(BadMagic):
            _ = load_tt_checkpoint(path)
