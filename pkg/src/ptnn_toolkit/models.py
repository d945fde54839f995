from datetime import datetime
from fractions import Fraction

from pydantic import BaseModel, Field

from .metrics import GateDecision, LayerMetrics
from .ptnn_engine import LayerRecord


# Output models for JSON serialization
class TraceLine(BaseModel):
    """trace.jsonl 的一行 (一層一筆)"""

    layer: str = Field(description="層名稱")
    decision: GateDecision = Field(description="閘門結果")
    pre_acc: float = Field(description="處理前準確率")
    post_acc: float = Field(description="處理後準確率")
    original_params: int = Field(description="原始參數量")
    compressed_params: int = Field(description="儲存的參數量")
    space_saving: float = Field(description="空間節省比例")
    ranks: list[int] = Field(description="TT ranks")
    rel_error: float = Field(description="相對重建誤差")

    @classmethod
    def from_record(cls, record: LayerRecord) -> "TraceLine":
        """由 LayerRecord 轉換"""
        return cls(
            layer=record.layer,
            decision=record.gate_decision,
            pre_acc=record.pre_accuracy,
            post_acc=record.post_accuracy,
            original_params=record.metrics.original_params,
            compressed_params=record.metrics.compressed_params,
            space_saving=record.metrics.space_saving,
            ranks=record.ranks,
            rel_error=record.metrics.relative_error,
        )

    def to_layer_metrics(self) -> LayerMetrics:
        """還原為 LayerMetrics (供重新計算模型層級指標)"""
        return LayerMetrics(
            layer_name=self.layer,
            original_params=self.original_params,
            compressed_params=self.compressed_params,
            space_saving=self.space_saving,
            compression_ratio=float(Fraction(self.original_params, self.compressed_params)),
            max_rank=max(self.ranks, default=1),
            relative_error=self.rel_error,
            gate_decision=self.decision,
        )


class IndividualLine(TraceLine):
    """individual 研究的輸出行，多了壓縮當下量測到的準確率"""

    candidate_acc: float | None = Field(default=None, description="壓縮此層時的準確率")

    @classmethod
    def from_record(cls, record: LayerRecord) -> "IndividualLine":
        line = TraceLine.from_record(record)
        return cls(**line.model_dump(), candidate_acc=record.candidate_accuracy)


class ModelSummaryOutput(BaseModel):
    """compress-model 結束時輸出的模型層級摘要"""

    total_params: int = Field(description="模型總參數量")
    params_in_compressed_layers: int = Field(description="已壓縮層的原始參數量")
    model_memory_fraction_saved: float = Field(description="節省參數占總參數比例")
    aggregate_space_saving: float = Field(description="整體空間節省")
    checkpoint_params: int = Field(description="以 TT 形式部署時的參數量")
    layers_compressed: int = Field(description="被接受的層數")
    layers_total: int = Field(description="處理的層數")
    original_accuracy: float = Field(description="原始準確率")
    final_accuracy: float = Field(description="最終準確率")


class RunSummary(BaseModel):
    """一次 compress-model 執行的紀錄 (存入 registry)"""

    run_key: str = Field(description="trace 與設定的 sha256")
    bundle_path: str = Field(description="輸入 bundle 路徑")
    epsilon: float = Field(description="TT-SVD 相對誤差上限")
    accuracy_drop_tolerance: float = Field(description="閘門容許下降量")
    d_target: int = Field(description="張量化目標階數")
    sigma_rule: str = Field(description="截斷門檻公式")
    original_accuracy: float = Field(description="原始準確率")
    final_accuracy: float = Field(description="最終準確率")
    model_memory_fraction_saved: float = Field(description="節省參數占總參數比例")
    aggregate_space_saving: float = Field(description="整體空間節省")
    created_at: datetime = Field(default_factory=datetime.now, description="紀錄時間")
    layers: list[TraceLine] = Field(default_factory=list, description="逐層紀錄")


class ToyBundleOutput(BaseModel):
    """generate-toy 的輸出摘要"""

    path: str = Field(description="bundle 檔案路徑")
    seed: int = Field(description="產生器種子")
    tensors: int = Field(description="權重張量數量")
    total_params: int = Field(description="總參數量")
    n_samples: int = Field(description="評估樣本數")
    accuracy: float = Field(description="原始模型在評估集上的準確率")


class ReconstructOutput(BaseModel):
    """reconstruct 的輸出摘要"""

    path: str = Field(description="輸出 bundle 路徑")
    layer: str = Field(description="重建的層名稱")
    shape: list[int] = Field(description="重建矩陣形狀")
    ranks: list[int] = Field(description="checkpoint 的 TT ranks")
    frobenius_norm: float = Field(description="重建矩陣的 Frobenius 範數")
