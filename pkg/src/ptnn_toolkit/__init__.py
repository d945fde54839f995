"""PTNN Toolkit - Tensor-train compression and partial tensorization of neural network weights"""

__version__ = "0.1.0"

from .tensor_core import DenseTensor, reshape, frobenius_norm, matricize_first
from .linalg_svd import SVDResult, full_svd, truncate
from .shaping import ShapePlan, plan_shape, fold, unfold
from .tt import TTCores, tt_svd, tt_reconstruct, tt_param_count
from .metrics import LayerMetrics, ModelMetrics, layer_metrics, model_metrics, complexity_estimate
from .model_store import ModelBundle, ToyDataset, ToyOracle, generate_toy_bundle, evaluate
from .ptnn_engine import GateConfig, CompressionTrace, PTNNCompressor
from .registry import RegistryManager

__all__ = [
    "DenseTensor",
    "reshape",
    "frobenius_norm",
    "matricize_first",
    "SVDResult",
    "full_svd",
    "truncate",
    "ShapePlan",
    "plan_shape",
    "fold",
    "unfold",
    "TTCores",
    "tt_svd",
    "tt_reconstruct",
    "tt_param_count",
    "LayerMetrics",
    "ModelMetrics",
    "layer_metrics",
    "model_metrics",
    "complexity_estimate",
    "ModelBundle",
    "ToyDataset",
    "ToyOracle",
    "generate_toy_bundle",
    "evaluate",
    "GateConfig",
    "CompressionTrace",
    "PTNNCompressor",
    "RegistryManager",
]
