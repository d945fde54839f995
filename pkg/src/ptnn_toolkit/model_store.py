"""
Weight bundles, TT checkpoints, the toy teacher model and its accuracy oracle.

The toy model is a desk-scale stand-in for a transformer: token ids go through
an embedding table, are mean-pooled, pass a stack of dense + ReLU blocks and a
final linear head. Its labels are produced by the same weights (the frozen
teacher), so a freshly generated bundle scores exactly 1.0.

Generation uses numpy's PCG64 (``numpy.random.default_rng``):
  - teacher weights from ``default_rng(seed)``, layer by layer in bundle order;
    for each layer one ``standard_normal((n_j, R))`` draw per mode (orthonormalised
    by Householder QR) followed by one ``standard_normal(rows * cols)`` noise draw
  - dataset tokens from ``default_rng(seed + 1).integers(0, vocab_size, (n_samples, seq_len))``
"""

import json
import logging
import math
import struct
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import BadDimensions, BadMagic, CorruptLength, IoError, ShapeMismatch, UnfactorableVolume, UnsupportedVersion
from .shaping import ShapePlan, plan_shape
from .tensor_core import DenseTensor, Matrix
from .tt import TTCores

logger = logging.getLogger(__name__)

BUNDLE_MAGIC = b"PTWT"
CHECKPOINT_MAGIC = b"PTTT"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 0
DTYPE_FLOAT64 = 1

DEFAULT_VOCAB_SIZE = 256
DEFAULT_WIDTH = 64
DEFAULT_N_LAYERS = 4
DEFAULT_N_CLASSES = 10
DEFAULT_SEQ_LEN = 8
DEFAULT_N_SAMPLES = 2000
DEFAULT_NOISE_AMPLITUDE = 0.01
DEFAULT_PLANTED_RANK = 8

EMBEDDING_LAYER = "embedding.weight"
HEAD_LAYER = "head.weight"


class ArchitectureSpec(BaseModel):
    """玩具模型架構: embedding -> mean pool -> (dense + ReLU) x n -> linear head"""

    model_config = ConfigDict(frozen=True)

    vocab_size: int = Field(ge=2, description="Embedding table rows")
    width: int = Field(ge=2, description="Hidden width")
    n_blocks: int = Field(ge=1, description="Number of dense + ReLU blocks")
    n_classes: int = Field(ge=2, description="Output classes")
    kind: Literal["token-embedding-mlp"] = Field(default="token-embedding-mlp", description="Architecture family")

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        """Ordered layer name -> (rows, cols)"""
        shapes = {EMBEDDING_LAYER: (self.vocab_size, self.width)}
        for i in range(self.n_blocks):
            shapes[f"blocks.{i}.weight"] = (self.width, self.width)
        shapes[HEAD_LAYER] = (self.width, self.n_classes)
        return shapes


class DatasetRef(BaseModel):
    """Everything needed to regenerate the evaluation set"""

    model_config = ConfigDict(frozen=True)

    seed: int = Field(description="Model seed; tokens are drawn from seed + 1")
    n_samples: int = Field(ge=1, description="Number of evaluation samples")
    seq_len: int = Field(ge=1, description="Tokens per sample")


class BundleDescriptor(BaseModel):
    """JSON block stored at the end of a bundle file"""

    architecture: ArchitectureSpec | None = None
    dataset: DatasetRef | None = None


class ModelBundle(BaseModel):
    """Named, ordered weight tensors plus the toy architecture and dataset references"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    weights: dict[str, DenseTensor] = Field(description="Layer name -> weight tensor, in model order")
    architecture: ArchitectureSpec | None = Field(default=None, description="Toy architecture, if any")
    dataset: DatasetRef | None = Field(default=None, description="Evaluation set reference, if any")

    @field_validator("weights")
    @classmethod
    def _check_names(cls, value: dict[str, DenseTensor]) -> dict[str, DenseTensor]:
        for name in value:
            if not name:
                raise ValueError("layer names must be non-empty")
        return value

    @model_validator(mode="after")
    def _check_architecture(self) -> "ModelBundle":
        if self.architecture is None:
            return self
        expected = self.architecture.layer_shapes()
        if list(expected) != list(self.weights):
            raise ValueError(f"bundle layers {list(self.weights)} do not match architecture {list(expected)}")
        for name, shape in expected.items():
            if self.weights[name].shape != shape:
                raise ValueError(f"{name} has shape {self.weights[name].shape}, architecture expects {shape}")
        return self

    @property
    def layer_names(self) -> list[str]:
        return list(self.weights)

    @property
    def total_params(self) -> int:
        return sum(t.size for t in self.weights.values())

    def matrix(self, name: str) -> Matrix:
        """2-D view of a weight (first mode as rows)"""
        tensor = self.weights[name]
        if tensor.ndim == 1:
            return tensor.data.reshape(1, -1)
        return tensor.data.reshape(tensor.shape[0], -1)

    def with_weight(self, name: str, value: DenseTensor) -> "ModelBundle":
        """Copy of the bundle with one tensor replaced (same shape required)"""
        if name not in self.weights:
            raise KeyError(name)
        if value.shape != self.weights[name].shape:
            raise ShapeMismatch(f"{name}: replacement shape {value.shape} != {self.weights[name].shape}")
        weights = dict(self.weights)
        weights[name] = value
        return self.model_copy(update={"weights": weights})

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelBundle):
            return NotImplemented
        return (
            self.layer_names == other.layer_names
            and all(self.weights[n] == other.weights[n] for n in self.weights)
            and self.architecture == other.architecture
            and self.dataset == other.dataset
        )

    __hash__ = None  # type: ignore[assignment]


class ToyDataset(BaseModel):
    """Token sequences and teacher labels"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    inputs: np.ndarray = Field(description="(n_samples, seq_len) int64 token ids")
    labels: np.ndarray = Field(description="(n_samples,) int64 teacher argmax classes")
    seed: int = Field(description="Model seed the dataset was derived from")


def forward(bundle: ModelBundle, inputs: np.ndarray) -> np.ndarray:
    """
    Forward pass of the toy model.

    Args:
        bundle: bundle carrying a toy architecture
        inputs: (n_samples, seq_len) token ids

    Returns:
        (n_samples, n_classes) logits
    """
    arch = bundle.architecture
    if arch is None:
        raise ShapeMismatch("bundle has no toy architecture descriptor")
    tokens = np.asarray(inputs)
    out_of_range = tokens.size > 0 and (tokens.min() < 0 or tokens.max() >= arch.vocab_size)
    if tokens.ndim != 2 or out_of_range:
        raise ShapeMismatch(f"inputs must be (n, seq_len) token ids below {arch.vocab_size}")

    hidden = bundle.weights[EMBEDDING_LAYER].data[tokens].mean(axis=1)
    for i in range(arch.n_blocks):
        hidden = np.maximum(hidden @ bundle.weights[f"blocks.{i}.weight"].data, 0.0)
    return hidden @ bundle.weights[HEAD_LAYER].data


def predict(bundle: ModelBundle, inputs: np.ndarray) -> np.ndarray:
    """Argmax classes; ties go to the lowest class index"""
    return np.argmax(forward(bundle, inputs), axis=1).astype(np.int64)


def make_dataset(teacher: ModelBundle, ref: DatasetRef) -> ToyDataset:
    """
    Regenerate the evaluation set, labelling it with the given (frozen) teacher.

    Args:
        teacher: bundle whose predictions become the labels
        ref: dataset reference

    Returns:
        ToyDataset
    """
    arch = teacher.architecture
    if arch is None:
        raise ShapeMismatch("teacher bundle has no toy architecture descriptor")
    rng = np.random.default_rng(ref.seed + 1)
    inputs = rng.integers(0, arch.vocab_size, size=(ref.n_samples, ref.seq_len), dtype=np.int64)
    return ToyDataset(inputs=inputs, labels=predict(teacher, inputs), seed=ref.seed)


def evaluate(bundle: ModelBundle, data: ToyDataset) -> float:
    """Fraction of samples whose argmax matches the teacher label"""
    predictions = predict(bundle, data.inputs)
    if predictions.shape != data.labels.shape:
        raise ShapeMismatch(f"{predictions.shape[0]} predictions for {data.labels.shape[0]} labels")
    return float(np.count_nonzero(predictions == data.labels)) / data.labels.size


class ToyOracle:
    """Accuracy oracle over a fixed toy dataset; read-only, safe for concurrent use"""

    def __init__(self, data: ToyDataset):
        self.data = data

    @classmethod
    def for_teacher(cls, teacher: ModelBundle) -> "ToyOracle":
        """Oracle whose labels come from the given bundle"""
        if teacher.dataset is None:
            raise ShapeMismatch("bundle has no dataset descriptor")
        return cls(make_dataset(teacher, teacher.dataset))

    def evaluate(self, bundle: ModelBundle) -> float:
        return evaluate(bundle, self.data)


def planted_weight(
    rng: np.random.Generator,
    rows: int,
    cols: int,
    plan: ShapePlan,
    planted_rank: int,
    noise_amplitude: float,
) -> np.ndarray:
    """
    Low-TT-rank base plus dense noise.

    The base is an equal-weight sum of R rank-1 terms whose factors are
    orthonormal per mode, so every unfolding has exactly R equal singular
    values. It is scaled to an entry RMS of sqrt(2 / rows); the noise has RMS
    noise_amplitude times that.
    """
    modes = plan.tensor_shape
    rank = min(planted_rank, min(modes))
    factors = [np.linalg.qr(rng.standard_normal((n, rank)))[0] for n in modes]

    base = factors[0]
    for factor in factors[1:]:
        base = (base[:, None, :] * factor[None, :, :]).reshape(-1, rank)
    base = base.sum(axis=1)

    scale = math.sqrt(2.0 / rows)
    base *= scale / math.sqrt(float(np.mean(base**2)))
    noise = rng.standard_normal(rows * cols) * (noise_amplitude * scale)
    return (base + noise).reshape(rows, cols)


def generate_toy_bundle(
    seed: int,
    n_layers: int = DEFAULT_N_LAYERS,
    width: int = DEFAULT_WIDTH,
    n_classes: int = DEFAULT_N_CLASSES,
    *,
    vocab_size: int = DEFAULT_VOCAB_SIZE,
    seq_len: int = DEFAULT_SEQ_LEN,
    n_samples: int = DEFAULT_N_SAMPLES,
    noise_amplitude: float = DEFAULT_NOISE_AMPLITUDE,
    planted_rank: int = DEFAULT_PLANTED_RANK,
    d_target: int = 4,
) -> tuple[ModelBundle, ToyDataset]:
    """
    Deterministically build a teacher bundle and its labelled dataset.

    n_layers counts every weight tensor: one embedding, n_layers - 2 dense
    blocks and one head.
    """
    if n_layers < 3:
        raise BadDimensions(f"n_layers must be >= 3, got {n_layers}")
    if min(width, n_classes, vocab_size) < 2 or seq_len < 1 or n_samples < 1:
        raise BadDimensions(
            f"invalid toy dimensions: width={width} n_classes={n_classes} "
            f"vocab_size={vocab_size} seq_len={seq_len} n_samples={n_samples}"
        )
    if noise_amplitude < 0 or planted_rank < 1:
        raise BadDimensions(f"noise_amplitude must be >= 0 and planted_rank >= 1, got {noise_amplitude} and {planted_rank}")

    arch = ArchitectureSpec(vocab_size=vocab_size, width=width, n_blocks=n_layers - 2, n_classes=n_classes)
    rng = np.random.default_rng(seed)
    weights = dict[str, DenseTensor]()
    for name, (rows, cols) in arch.layer_shapes().items():
        try:
            plan = plan_shape(rows, cols, d_target)
        except UnfactorableVolume as e:
            raise BadDimensions(f"{name} ({rows} x {cols}) cannot be tensorized: {e}") from e
        weights[name] = DenseTensor(
            data=planted_weight(rng, rows, cols, plan, planted_rank, noise_amplitude)
        )

    ref = DatasetRef(seed=seed, n_samples=n_samples, seq_len=seq_len)
    bundle = ModelBundle(weights=weights, architecture=arch, dataset=ref)
    data = make_dataset(bundle, ref)
    logger.info(f"🧪 Generated toy bundle seed={seed}: {len(weights)} tensors, {bundle.total_params} params")
    return bundle, data


class _ByteReader:
    """Sequential little-endian reader that refuses to run past the buffer"""

    def __init__(self, payload: bytes, path: Path):
        self.payload = payload
        self.path = path
        self.offset = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.offset + n > len(self.payload):
            raise CorruptLength(f"{self.path}: needed {n} bytes at offset {self.offset}, file has {len(self.payload)}")
        chunk = self.payload[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u32(self) -> int:
        return self.unpack("<I")[0]

    def u64s(self, count: int) -> list[int]:
        return list(self.unpack(f"<{count}Q")) if count else []

    def float64s(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def expect_end(self) -> None:
        if self.offset != len(self.payload):
            raise CorruptLength(f"{self.path}: {len(self.payload) - self.offset} trailing bytes")


def _read_file(path: Path, magic: bytes) -> _ByteReader:
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    reader = _ByteReader(payload, path)
    if len(payload) < len(magic):
        raise CorruptLength(f"{path}: file too short for a header")
    if reader.take(len(magic)) != magic:
        raise BadMagic(f"{path}: expected magic {magic!r}")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: version {version} (supported: {FORMAT_VERSION})")
    return reader


def _write_file(path: Path, payload: bytes) -> None:
    try:
        _ = path.write_bytes(payload)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def save_bundle(bundle: ModelBundle, path: str | Path) -> None:
    """
    Write a bundle file: "PTWT", version, tensors, JSON descriptor.

    Tensors are always written as float64.
    """
    out = bytearray(BUNDLE_MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(bundle.weights))
    for name, tensor in bundle.weights.items():
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded)) + encoded
        out += struct.pack("<BI", DTYPE_FLOAT64, tensor.ndim)
        out += struct.pack(f"<{tensor.ndim}Q", *tensor.shape)
        out += tensor.data.astype("<f8").tobytes(order="C")
    descriptor = BundleDescriptor(architecture=bundle.architecture, dataset=bundle.dataset)
    encoded = descriptor.model_dump_json().encode("utf-8")
    out += struct.pack("<I", len(encoded)) + encoded
    _write_file(Path(path), bytes(out))


def load_bundle(path: str | Path) -> ModelBundle:
    """Read a bundle file; never returns partially decoded data"""
    path = Path(path)
    reader = _read_file(path, BUNDLE_MAGIC)
    count = reader.u32()
    weights = dict[str, DenseTensor]()
    for _ in range(count):
        try:
            name = reader.take(reader.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptLength(f"{path}: tensor name is not valid UTF-8") from e
        dtype_code, ndim = reader.unpack("<BI")
        shape = reader.u64s(ndim)
        volume = math.prod(shape)
        if dtype_code == DTYPE_FLOAT64:
            data = reader.float64s(volume)
        elif dtype_code == DTYPE_FLOAT32:
            data = np.frombuffer(reader.take(4 * volume), dtype="<f4").astype(np.float64)
        else:
            raise CorruptLength(f"{path}: unknown dtype code {dtype_code} for {name}")
        if name in weights:
            raise CorruptLength(f"{path}: duplicate tensor name {name}")
        try:
            weights[name] = DenseTensor.from_flat(shape, data)
        except (ShapeMismatch, ValueError) as e:
            raise CorruptLength(f"{path}: bad tensor {name}: {e}") from e

    raw = reader.take(reader.u32())
    reader.expect_end()
    try:
        descriptor = BundleDescriptor.model_validate(json.loads(raw.decode("utf-8")))
        return ModelBundle(weights=weights, architecture=descriptor.architecture, dataset=descriptor.dataset)
    except (ValueError, ValidationError) as e:
        raise CorruptLength(f"{path}: inconsistent descriptor: {e}") from e


def save_tt_checkpoint(cores: TTCores, plan: ShapePlan, path: str | Path) -> None:
    """Write a TT checkpoint: "PTTT", version, epsilon, d, modes, ranks, plan, cores"""
    if tuple(cores.mode_sizes) != tuple(plan.tensor_shape):
        raise ShapeMismatch(f"cores modes {cores.mode_sizes} do not match plan {plan.tensor_shape}")
    d = cores.d
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<IdI", FORMAT_VERSION, cores.epsilon_used, d)
    out += struct.pack(f"<{d}Q", *cores.mode_sizes)
    out += struct.pack(f"<{d + 1}Q", *cores.ranks)
    out += struct.pack("<2Q", plan.original_rows, plan.original_cols)
    for core in cores.cores:
        out += core.data.astype("<f8").tobytes(order="C")
    _write_file(Path(path), bytes(out))


def load_tt_checkpoint(path: str | Path) -> tuple[TTCores, ShapePlan]:
    """Read a TT checkpoint back into (TTCores, ShapePlan)"""
    path = Path(path)
    reader = _read_file(path, CHECKPOINT_MAGIC)
    (epsilon_used,) = reader.unpack("<d")
    d = reader.u32()
    mode_sizes = reader.u64s(d)
    ranks = reader.u64s(d + 1)
    rows, cols = reader.u64s(2)
    flat_cores = [reader.float64s(ranks[j] * mode_sizes[j] * ranks[j + 1]) for j in range(d)]
    reader.expect_end()
    try:
        cores = [
            DenseTensor.from_flat((ranks[j], mode_sizes[j], ranks[j + 1]), flat_cores[j])
            for j in range(d)
        ]
        plan = ShapePlan(original_rows=rows, original_cols=cols, tensor_shape=tuple(mode_sizes))
        tt_cores = TTCores(cores=cores, ranks=tuple(ranks), mode_sizes=tuple(mode_sizes), epsilon_used=epsilon_used)
    except (ShapeMismatch, ValueError) as e:
        raise CorruptLength(f"{path}: inconsistent checkpoint header: {e}") from e
    return tt_cores, plan
