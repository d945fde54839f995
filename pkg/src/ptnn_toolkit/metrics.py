"""Compression accounting: space saving, compression ratio, model memory fraction, rank complexity."""

from fractions import Fraction
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .errors import InconsistentTotals
from .tt import TTCores, tt_param_count

GateDecision = Literal["compressed", "skipped", "unfactorable"]

COMPLEXITY_FORM = "O(d·n·r²)"


class LayerMetrics(BaseModel):
    """Per-layer compression metrics"""

    layer_name: str = Field(description="Layer identifier")
    original_params: int = Field(ge=1, description="Dense parameter count")
    compressed_params: int = Field(ge=1, description="Parameters actually stored for this layer")
    space_saving: float = Field(le=1.0, description="1 - compressed / original")
    compression_ratio: float = Field(gt=0.0, description="original / compressed")
    max_rank: int = Field(ge=1, description="Largest TT rank attempted for the layer")
    relative_error: float = Field(ge=0.0, description="Relative Frobenius reconstruction error")
    gate_decision: GateDecision = Field(description="compressed, skipped or unfactorable")

    @model_validator(mode="after")
    def _check_dense_fallback(self) -> "LayerMetrics":
        if self.gate_decision != "compressed" and self.compressed_params != self.original_params:
            raise ValueError(f"{self.gate_decision} layer must keep its dense parameter count")
        return self


class ModelMetrics(BaseModel):
    """Model-level aggregate of LayerMetrics"""

    layers: list[LayerMetrics] = Field(default_factory=list, description="Per-layer metrics")
    total_params: int = Field(ge=1, description="Total parameters in the model")
    params_in_compressed_layers: int = Field(ge=0, description="Dense parameters of accepted layers")
    model_memory_fraction_saved: float = Field(description="Saved parameters / total parameters")
    aggregate_space_saving: float = Field(description="1 - sum(compressed) / sum(original) over listed layers")


def _saving(original: int, compressed: int) -> Fraction:
    return 1 - Fraction(compressed, original)


def layer_metrics(
    name: str,
    original: int,
    cores: TTCores,
    error: float,
    decision: GateDecision = "compressed",
) -> LayerMetrics:
    """
    Metrics for one layer given its TT cores.

    For skipped/unfactorable layers the stored parameter count stays dense,
    while max_rank and relative_error still describe the attempted cores.
    """
    compressed = tt_param_count(cores) if decision == "compressed" else original
    return LayerMetrics(
        layer_name=name,
        original_params=original,
        compressed_params=compressed,
        space_saving=float(_saving(original, compressed)),
        compression_ratio=float(Fraction(original, compressed)),
        max_rank=max(cores.ranks),
        relative_error=error,
        gate_decision=decision,
    )


def dense_layer_metrics(name: str, original: int, max_rank: int, decision: GateDecision) -> LayerMetrics:
    """Metrics for a layer that never got cores (e.g. unfactorable volume)"""
    return LayerMetrics(
        layer_name=name,
        original_params=original,
        compressed_params=original,
        space_saving=0.0,
        compression_ratio=1.0,
        max_rank=max_rank,
        relative_error=0.0,
        gate_decision=decision,
    )


def model_metrics(layers: list[LayerMetrics], total_params: int) -> ModelMetrics:
    """
    Aggregate per-layer metrics.

    model_memory_fraction_saved = sum over compressed layers of
    space_saving_i * original_params_i / total_params, evaluated exactly.
    """
    covered = sum(layer.original_params for layer in layers)
    if covered > total_params:
        raise InconsistentTotals(f"layers cover {covered} parameters but the model has {total_params}")

    accepted = [layer for layer in layers if layer.gate_decision == "compressed"]
    saved = sum(
        (_saving(layer.original_params, layer.compressed_params) * layer.original_params for layer in accepted),
        Fraction(0),
    )
    stored = sum(layer.compressed_params for layer in layers)

    return ModelMetrics(
        layers=layers,
        total_params=total_params,
        params_in_compressed_layers=sum(layer.original_params for layer in accepted),
        model_memory_fraction_saved=float(saved / total_params),
        aggregate_space_saving=float(_saving(covered, stored)) if covered else 0.0,
    )


def complexity_estimate(cores: TTCores) -> tuple[int, int]:
    """
    (max_rank, matvec_flops_estimate) where the estimate is
    sum_j 2 * r_{j-1} * n_j * r_j, the cost of pushing a vector through the chain.
    """
    return max(cores.ranks), 2 * tt_param_count(cores)


def space_saving_histogram(layers: list[LayerMetrics], bins: int = 10) -> list[int]:
    """
    Count layers per space-saving bucket over [0, 1].

    Negative savings fall into the first bucket.
    """
    values = np.clip([layer.space_saving for layer in layers], 0.0, 1.0)
    counts, _ = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return [int(c) for c in counts]
