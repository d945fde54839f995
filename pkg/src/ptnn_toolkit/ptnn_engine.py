import asyncio
import logging
from typing import Protocol, final

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import OracleFailure, PtnnError, UnfactorableVolume
from .metrics import GateDecision, LayerMetrics, dense_layer_metrics, layer_metrics
from .model_store import ModelBundle
from .shaping import DEFAULT_D_TARGET, ShapePlan, fold, plan_shape, unfold
from .tensor_core import DenseTensor
from .tt import SigmaRule, TTCores, relative_error, tt_param_count, tt_reconstruct, tt_svd

logger = logging.getLogger(__name__)

# Constants
DEFAULT_EPSILON = 0.5
DEFAULT_TOLERANCE = 0.05
DEFAULT_MAX_WORKERS = 4
# 浮點誤差容許值 (例如 0.9 - 0.05 != 0.85)
GATE_SLACK = 1e-12


class AccuracyOracle(Protocol):
    """給定 ModelBundle，回傳固定評估集上的準確率 [0, 1]；相同 bundle 必須得到相同結果"""

    def evaluate(self, bundle: ModelBundle) -> float: ...


class GateConfig(BaseModel):
    """逐層壓縮的設定"""

    model_config = ConfigDict(frozen=True)

    epsilon: float = Field(default=DEFAULT_EPSILON, ge=0.0, description="TT-SVD 相對誤差上限")
    accuracy_drop_tolerance: float = Field(
        default=DEFAULT_TOLERANCE, ge=0.0, le=1.0, description="相對原始準確率可容許的絕對下降量"
    )
    d_target: int = Field(default=DEFAULT_D_TARGET, ge=2, description="張量化目標階數")
    layer_order: list[str] = Field(default_factory=list, description="處理順序 (空白表示 bundle 原始順序)")
    skip_inflating_layers: bool = Field(default=True, description="TT 參數量大於原始矩陣時直接略過")
    sigma_rule: SigmaRule = Field(default="paper", description="截斷門檻公式 (paper / strict / standard)")
    d_target_overrides: dict[str, int] = Field(default_factory=dict, description="個別層的目標階數")

    def d_target_for(self, layer: str) -> int:
        return self.d_target_overrides.get(layer, self.d_target)

    def resolve_order(self, bundle: ModelBundle) -> list[str]:
        """
        取得處理順序並確認每一層都存在

        Args:
            bundle: 模型權重

        Returns:
            層名稱列表
        """
        order = self.layer_order or bundle.layer_names
        missing = [name for name in order if name not in bundle.weights]
        if missing:
            raise KeyError(f"layers not in bundle: {missing}")
        return list(order)


class LayerRecord(BaseModel):
    """單一層的壓縮紀錄"""

    layer: str = Field(description="層名稱")
    pre_accuracy: float = Field(description="處理此層前的準確率")
    post_accuracy: float = Field(description="處理此層後 (含還原) 的準確率")
    candidate_accuracy: float | None = Field(default=None, description="壓縮此層時量測到的準確率 (未評估則為 None)")
    gate_decision: GateDecision = Field(description="compressed / skipped / unfactorable")
    ranks: list[int] = Field(default_factory=list, description="嘗試得到的 TT ranks")
    metrics: LayerMetrics = Field(description="層級指標")


class CompressionTrace(BaseModel):
    """整個壓縮流程的紀錄"""

    records: list[LayerRecord] = Field(default_factory=list, description="依處理順序的層紀錄")
    original_accuracy: float = Field(description="壓縮前準確率")
    final_accuracy: float = Field(description="壓縮後準確率")

    @model_validator(mode="after")
    def _check_consistency(self) -> "CompressionTrace":
        expected_final = self.records[-1].post_accuracy if self.records else self.original_accuracy
        if self.final_accuracy != expected_final:
            raise ValueError(f"final_accuracy {self.final_accuracy} != last post accuracy {expected_final}")
        for record in self.records:
            if record.gate_decision != "compressed" and record.post_accuracy != record.pre_accuracy:
                raise ValueError(f"{record.layer} was not compressed but its accuracy changed")
        return self


class LayerCheckpoint(BaseModel):
    """已接受層的 TT 表示"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    cores: TTCores = Field(description="TT cores")
    plan: ShapePlan = Field(description="形狀規劃")


class CompressionOutcome(BaseModel):
    """run() 的結果: 稠密重建後的 bundle、已接受層的 TT checkpoint、完整紀錄"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    bundle: ModelBundle = Field(description="以重建權重重新初始化的模型")
    checkpoints: dict[str, LayerCheckpoint] = Field(default_factory=dict, description="層名稱 -> checkpoint")
    trace: CompressionTrace = Field(description="壓縮紀錄")


class _Attempt(BaseModel):
    """一次 TT 壓縮嘗試 (尚未經過準確率閘門)"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    plan: ShapePlan
    cores: TTCores
    weight: DenseTensor
    metrics: LayerMetrics


@final
class PTNNCompressor:
    """部分張量化 (PTNN) 壓縮主類"""

    def __init__(self, oracle: AccuracyOracle, config: GateConfig | None = None, max_workers: int = DEFAULT_MAX_WORKERS):
        """
        初始化壓縮器

        Args:
            oracle: 準確率評估器
            config: 閘門設定
            max_workers: individual_study 的最大並行數 (>= 1)
        """
        if max_workers < 1:
            raise PtnnError(f"max_workers must be >= 1, got {max_workers}")
        self.oracle = oracle
        self.config = config or GateConfig()
        self.max_workers = max_workers

    def evaluate(self, bundle: ModelBundle) -> float:
        """
        呼叫 oracle 並檢查結果

        Args:
            bundle: 要評估的模型

        Returns:
            準確率
        """
        try:
            accuracy = float(self.oracle.evaluate(bundle))
        except OracleFailure:
            raise
        except (PtnnError, ArithmeticError, ValueError, KeyError) as e:
            raise OracleFailure(f"accuracy oracle failed: {e}") from e
        if not 0.0 <= accuracy <= 1.0:
            raise OracleFailure(f"accuracy oracle returned {accuracy}, outside [0, 1]")
        return accuracy

    def threshold(self, original_accuracy: float) -> float:
        """閘門門檻: 原始準確率 - 容許下降量"""
        return original_accuracy - self.config.accuracy_drop_tolerance - GATE_SLACK

    def attempt_layer(self, bundle: ModelBundle, layer: str) -> _Attempt:
        """
        對單一層做 plan -> fold -> TT-SVD -> reconstruct -> unfold

        Args:
            bundle: 模型權重
            layer: 層名稱

        Returns:
            壓縮嘗試結果；體積為質數時拋出 UnfactorableVolume
        """
        matrix = bundle.matrix(layer)
        rows, cols = matrix.shape
        plan = plan_shape(rows, cols, self.config.d_target_for(layer))
        tensor = fold(matrix, plan)
        cores = tt_svd(tensor, self.config.epsilon, self.config.sigma_rule)
        reconstruction = tt_reconstruct(cores)
        error = relative_error(tensor, reconstruction)
        weight = DenseTensor(data=unfold(reconstruction, plan).reshape(bundle.weights[layer].shape))
        return _Attempt(
            plan=plan,
            cores=cores,
            weight=weight,
            metrics=layer_metrics(layer, bundle.weights[layer].size, cores, error),
        )

    def _unfactorable_record(self, bundle: ModelBundle, layer: str, accuracy: float, reason: Exception) -> LayerRecord:
        logger.warning(f"⚠️ {layer}: {reason}; kept dense")
        matrix = bundle.matrix(layer)
        return LayerRecord(
            layer=layer,
            pre_accuracy=accuracy,
            post_accuracy=accuracy,
            gate_decision="unfactorable",
            metrics=dense_layer_metrics(layer, bundle.weights[layer].size, min(matrix.shape), "unfactorable"),
        )

    def _skipped_record(
        self, layer: str, attempt: _Attempt, accuracy: float, candidate: float | None
    ) -> LayerRecord:
        return LayerRecord(
            layer=layer,
            pre_accuracy=accuracy,
            post_accuracy=accuracy,
            candidate_accuracy=candidate,
            gate_decision="skipped",
            ranks=list(attempt.cores.ranks),
            metrics=layer_metrics(
                layer, attempt.metrics.original_params, attempt.cores, attempt.metrics.relative_error, "skipped"
            ),
        )

    def run(self, bundle: ModelBundle) -> CompressionOutcome:
        """
        逐層累積壓縮 (layer n 在 0..n-1 已處理完的狀態下評估)

        Args:
            bundle: 原始模型權重

        Returns:
            CompressionOutcome
        """
        order = self.config.resolve_order(bundle)
        original_accuracy = self.evaluate(bundle)
        threshold = self.threshold(original_accuracy)
        logger.info(
            f"🚀 Compressing {len(order)} layers, eps={self.config.epsilon}, "
            f"original accuracy {original_accuracy:.4f}, gate >= {original_accuracy - self.config.accuracy_drop_tolerance:.4f}"
        )

        current = bundle
        current_accuracy = original_accuracy
        records = list[LayerRecord]()
        checkpoints = dict[str, LayerCheckpoint]()

        for layer in order:
            logger.info(f"🔎 Processing: {layer} {bundle.weights[layer].shape}")
            try:
                attempt = self.attempt_layer(current, layer)
            except UnfactorableVolume as e:
                records.append(self._unfactorable_record(current, layer, current_accuracy, e))
                continue

            if self.config.skip_inflating_layers and attempt.metrics.space_saving < 0:
                logger.info(f"⛔ Skipped {layer}: TT form inflates ({attempt.metrics.space_saving:.3f} space saving)")
                records.append(self._skipped_record(layer, attempt, current_accuracy, None))
                continue

            candidate = current.with_weight(layer, attempt.weight)
            accuracy = self.evaluate(candidate)
            if accuracy >= threshold:
                logger.info(
                    f"✅ Accepted {layer}: accuracy {accuracy:.4f}, ranks {attempt.cores.ranks}, "
                    f"space saving {attempt.metrics.space_saving:.3f}"
                )
                records.append(
                    LayerRecord(
                        layer=layer,
                        pre_accuracy=current_accuracy,
                        post_accuracy=accuracy,
                        candidate_accuracy=accuracy,
                        gate_decision="compressed",
                        ranks=list(attempt.cores.ranks),
                        metrics=attempt.metrics,
                    )
                )
                checkpoints[layer] = LayerCheckpoint(cores=attempt.cores, plan=attempt.plan)
                current = candidate
                current_accuracy = accuracy
            else:
                logger.info(f"⛔ Skipped {layer}: accuracy {accuracy:.4f} below gate, restoring original weights")
                records.append(self._skipped_record(layer, attempt, current_accuracy, accuracy))

        trace = CompressionTrace(records=records, original_accuracy=original_accuracy, final_accuracy=current_accuracy)
        assert trace.final_accuracy >= threshold, "gate soundness violated"
        logger.info(
            f"✅ Compression completed. {len(checkpoints)}/{len(order)} layers compressed, "
            f"final accuracy {current_accuracy:.4f}"
        )
        return CompressionOutcome(bundle=current, checkpoints=checkpoints, trace=trace)

    def compress_single_layer(
        self, bundle: ModelBundle, layer: str, original_accuracy: float | None = None
    ) -> CompressionTrace:
        """
        只壓縮指定層 (其他層不變)，評估後還原

        Args:
            bundle: 原始模型權重 (不會被修改)
            layer: 層名稱
            original_accuracy: 已知的原始準確率 (省略時重新評估)

        Returns:
            只有一筆紀錄的 CompressionTrace
        """
        if layer not in bundle.weights:
            raise KeyError(f"layer not in bundle: {layer}")
        if original_accuracy is None:
            original_accuracy = self.evaluate(bundle)

        try:
            attempt = self.attempt_layer(bundle, layer)
        except UnfactorableVolume as e:
            record = self._unfactorable_record(bundle, layer, original_accuracy, e)
            return CompressionTrace(records=[record], original_accuracy=original_accuracy, final_accuracy=original_accuracy)

        accuracy = self.evaluate(bundle.with_weight(layer, attempt.weight))
        inflating = self.config.skip_inflating_layers and attempt.metrics.space_saving < 0
        if accuracy >= self.threshold(original_accuracy) and not inflating:
            record = LayerRecord(
                layer=layer,
                pre_accuracy=original_accuracy,
                post_accuracy=accuracy,
                candidate_accuracy=accuracy,
                gate_decision="compressed",
                ranks=list(attempt.cores.ranks),
                metrics=attempt.metrics,
            )
        else:
            record = self._skipped_record(layer, attempt, original_accuracy, accuracy)
        logger.info(f"📄 {layer}: accuracy {original_accuracy:.4f} -> {accuracy:.4f} ({record.gate_decision})")
        return CompressionTrace(records=[record], original_accuracy=original_accuracy, final_accuracy=record.post_accuracy)

    async def individual_study(self, bundle: ModelBundle, layers: list[str] | None = None) -> list[CompressionTrace]:
        """
        每一層各自從原始 bundle 壓縮 (並行執行)

        Args:
            bundle: 原始模型權重
            layers: 要研究的層 (預設全部)

        Returns:
            依 layers 順序排列的 CompressionTrace 列表
        """
        targets = layers or bundle.layer_names
        original_accuracy = self.evaluate(bundle)
        # 建立 semaphore 限制並發數量
        semaphore = asyncio.Semaphore(self.max_workers)

        async def study(layer: str) -> CompressionTrace:
            async with semaphore:
                logger.info(f"🔎 Individually compressing: {layer}")
                return await asyncio.to_thread(self.compress_single_layer, bundle, layer, original_accuracy)

        traces = await asyncio.gather(*(study(layer) for layer in targets))
        return list(traces)


def run(bundle: ModelBundle, oracle: AccuracyOracle, config: GateConfig | None = None) -> CompressionOutcome:
    """
    便利函數：執行逐層累積壓縮

    Args:
        bundle: 原始模型權重
        oracle: 準確率評估器
        config: 閘門設定

    Returns:
        CompressionOutcome
    """
    return PTNNCompressor(oracle, config).run(bundle)


def compress_single_layer(
    bundle: ModelBundle, layer: str, config: GateConfig | None, oracle: AccuracyOracle
) -> CompressionTrace:
    """便利函數：單層壓縮研究"""
    return PTNNCompressor(oracle, config).compress_single_layer(bundle, layer)


def checkpoint_param_count(outcome: CompressionOutcome, bundle: ModelBundle) -> int:
    """
    部署時的參數量: 已接受層以 TT 形式計算，其餘層維持稠密

    Args:
        outcome: run() 的結果
        bundle: 原始模型權重

    Returns:
        參數總數
    """
    total = 0
    for name, tensor in bundle.weights.items():
        checkpoint = outcome.checkpoints.get(name)
        total += tt_param_count(checkpoint.cores) if checkpoint else tensor.size
    return total
