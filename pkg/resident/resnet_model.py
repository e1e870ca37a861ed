"""
ResNet Byte Model

Residual convolution blocks over byte embeddings, a bidirectional GRU that
turns the block output into a sentence vector, and a softmax head over the
language labels. Also handles initialization and the ``.rsid`` model file:

    b"RSID" | u32 version | u32 metadata length | JSON metadata | float32 blobs

The metadata holds the model config, the label vocabulary and a manifest of
every stored tensor (name, shape, byte offset into the blob section, size).
All integers and floats are little-endian.
"""

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from resident.autodiff import Parameter, Tensor, concat
from resident.config import (
    BYTE_VOCAB_SIZE,
    EMBEDDING_INIT_SCALE,
    MODEL_DEFAULTS,
    MODEL_FORMAT_VERSION,
    MODEL_MAGIC,
    PAD_ID,
)
from resident.data_pipeline import LabelVocab, encode_bytes
from resident.exceptions import ConfigurationError, ContractViolation, FormatError
from resident.layers import (
    BNParams,
    ConvParams,
    DenseParams,
    GRUParams,
    LayerMode,
    batch_norm,
    bigru_encode,
    conv1d_same,
    dense_softmax,
    dropout,
    embed,
    max_pool1d,
    relu,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_HEADER = struct.Struct("<4sII")
_GRU_FIELDS = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")
_BN_BUFFERS = ("running_mean", "running_var")
_POSITIVE_FIELDS = ("n_classes", "n_blocks", "d_b", "conv_filters", "pool", "gru_hidden", "max_len")


class MergeMode(Enum):
    """How a residual block joins its input with the residual branch."""

    CONCAT = "concat"
    ADD = "add"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; validated on construction."""

    n_classes: int
    n_blocks: int = MODEL_DEFAULTS["n_blocks"]
    d_b: int = MODEL_DEFAULTS["d_b"]
    conv_filters: int = MODEL_DEFAULTS["conv_filters"]
    windows: Tuple[int, int] = MODEL_DEFAULTS["windows"]
    pool: int = MODEL_DEFAULTS["pool"]
    merge_mode: MergeMode = MergeMode(MODEL_DEFAULTS["merge_mode"])
    block_dropout: float = MODEL_DEFAULTS["block_dropout"]
    gru_hidden: int = MODEL_DEFAULTS["gru_hidden"]
    gru_dropout: float = MODEL_DEFAULTS["gru_dropout"]
    max_len: int = MODEL_DEFAULTS["max_len"]

    def __post_init__(self):
        if isinstance(self.merge_mode, str):
            try:
                object.__setattr__(self, "merge_mode", MergeMode(self.merge_mode.lower()))
            except ValueError:
                raise ConfigurationError(f"unknown merge mode: {self.merge_mode!r}") from None
        object.__setattr__(self, "windows", tuple(int(w) for w in self.windows))

        for name in _POSITIVE_FIELDS:
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.n_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {self.n_classes}")
        if len(self.windows) != 2 or min(self.windows) < 1:
            raise ConfigurationError(f"windows must be two positive sizes, got {self.windows}")
        for name in ("block_dropout", "gru_dropout"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1), got {rate}")
        if self.max_len // self.pool**self.n_blocks < 1:
            raise ConfigurationError(
                f"max_len={self.max_len} is too short for {self.n_blocks} blocks "
                f"pooling by {self.pool}"
            )
        if self.merge_mode is MergeMode.ADD and self.conv_filters != self.d_b:
            raise ConfigurationError(
                f"add merge needs conv_filters == d_b, got {self.conv_filters} and {self.d_b}"
            )

    def block_channels(self) -> List[int]:
        """Channel count entering each block, plus the count leaving the last one."""
        channels = [self.d_b]
        for _ in range(self.n_blocks):
            grow = self.conv_filters if self.merge_mode is MergeMode.CONCAT else 0
            channels.append(channels[-1] + grow)
        return channels

    def final_seq_len(self) -> int:
        length = self.max_len
        for _ in range(self.n_blocks):
            length //= self.pool
        return length

    def to_dict(self) -> Dict[str, Any]:
        values = dataclasses.asdict(self)
        values["merge_mode"] = self.merge_mode.value
        values["windows"] = list(self.windows)
        return values

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {', '.join(unknown)}")
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigurationError(f"incomplete model config: {e}") from e


@dataclass
class ResidualBlockParams:
    """Pre-activation residual block: BN, conv (first window), BN, conv (second window)."""

    bn1: BNParams
    conv1: ConvParams
    bn2: BNParams
    conv2: ConvParams

    def __post_init__(self):
        if self.conv1.c_out != self.conv2.c_in:
            raise ContractViolation(
                f"conv1 outputs {self.conv1.c_out} channels but conv2 expects {self.conv2.c_in}"
            )
        if self.bn1.channels != self.conv1.c_in or self.bn2.channels != self.conv1.c_out:
            raise ContractViolation("batch norm channel counts do not match the convolutions")

    @property
    def c_in(self) -> int:
        return self.conv1.c_in


def residual_block(
    X: Tensor,
    p: ResidualBlockParams,
    mode: LayerMode,
    merge: MergeMode = MergeMode.CONCAT,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.5,
    pool: int = 2,
) -> Tensor:
    """
    Apply one residual block.

    F(X) = conv2(drop(relu(bn2(conv1(drop(relu(bn1(X)))))))), then the block
    either concatenates X and F(X) along channels or adds them, and max-pools
    the result along the sequence.

    Args:
        X: Input of shape (batch, seq, c_in) or (seq, c_in)
        p: Block weights
        mode: Train or Infer
        merge: Concatenation or addition
        rng: Random generator for Train-mode dropout
        dropout_rate: Dropout applied before each convolution
        pool: Max pooling size

    Returns:
        Tensor of shape (batch, seq // pool, c_out)

    Raises:
        ContractViolation: If the sequence is shorter than the pooling size
        ConfigurationError: If addition is requested but channel counts differ
    """
    if X.ndim < 2 or X.shape[-2] < max(2, pool):
        raise ContractViolation(f"residual block needs a sequence of at least {pool}: {X.shape}")
    if X.shape[-1] != p.c_in:
        raise ContractViolation(f"block expects {p.c_in} channels, got {X.shape[-1]}")

    F = dropout(relu(batch_norm(X, p.bn1, mode)), dropout_rate, mode, rng)
    F = conv1d_same(F, p.conv1)
    F = dropout(relu(batch_norm(F, p.bn2, mode)), dropout_rate, mode, rng)
    F = conv1d_same(F, p.conv2)

    if merge is MergeMode.CONCAT:
        merged = concat([X, F], axis=-1)
    else:
        if F.shape[-1] != X.shape[-1]:
            raise ConfigurationError(
                f"add merge needs matching channels, got {X.shape[-1]} and {F.shape[-1]}"
            )
        merged = X + F
    return max_pool1d(merged, pool)


@dataclass
class Model:
    """Embedding table, residual blocks, bi-GRU and softmax head."""

    config: ModelConfig
    labels: LabelVocab
    embedding: Tensor
    blocks: List[ResidualBlockParams]
    gru_fw: GRUParams
    gru_bw: GRUParams
    head: DenseParams

    def __post_init__(self):
        if len(self.labels) != self.config.n_classes:
            raise ConfigurationError(
                f"config has {self.config.n_classes} classes but {len(self.labels)} labels given"
            )

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        """Trainable tensors under stable dotted names, in a fixed order."""
        named: List[Tuple[str, Tensor]] = [("embedding", self.embedding)]
        for i, block in enumerate(self.blocks):
            for part in ("bn1", "conv1", "bn2", "conv2"):
                layer = getattr(block, part)
                fields = ("gamma", "beta") if part.startswith("bn") else ("W", "b")
                named.extend((f"block{i}.{part}.{f}", getattr(layer, f)) for f in fields)
        for prefix in ("gru_fw", "gru_bw"):
            gru = getattr(self, prefix)
            named.extend((f"{prefix}.{f}", getattr(gru, f)) for f in _GRU_FIELDS)
        named.extend([("head.W", self.head.W), ("head.b", self.head.b)])
        return named

    def parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def named_buffers(self) -> Iterator[Tuple[str, BNParams, str]]:
        """(name, owning batch norm, attribute) for every running statistic."""
        for i, block in enumerate(self.blocks):
            for part in ("bn1", "bn2"):
                for attr in _BN_BUFFERS:
                    yield f"block{i}.{part}.{attr}", getattr(block, part), attr

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Copies of every parameter and buffer, rounded to float32."""
        state = {name: t.data.astype(np.float32) for name, t in self.named_parameters()}
        for name, bn, attr in self.named_buffers():
            state[name] = np.asarray(getattr(bn, attr), dtype=np.float32)
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """
        Overwrite parameters and buffers in place from ``state``.

        Raises:
            ContractViolation: If names or shapes do not match this model
        """
        expected = set(name for name, _ in self.named_parameters())
        expected |= set(name for name, _, _ in self.named_buffers())
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ContractViolation(f"state mismatch: missing {missing}, unexpected {extra}")

        for name, tensor in self.named_parameters():
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise ContractViolation(f"{name}: shape {value.shape} != {tensor.shape}")
            tensor.data = value.astype(np.float64)
        for name, bn, attr in self.named_buffers():
            value = np.asarray(state[name])
            if value.shape != (bn.channels,):
                raise ContractViolation(f"{name}: shape {value.shape} != ({bn.channels},)")
            setattr(bn, attr, value.astype(np.float64))

    def substitute(self, values: Mapping[str, Tensor]) -> "Model":
        """A model sharing this one's buffers with the named tensors swapped in."""
        tensors = dict(self.named_parameters())
        unknown = sorted(set(values) - set(tensors))
        if unknown:
            raise ContractViolation(f"unknown parameter names: {unknown}")
        tensors.update(values)
        buffers = {name: getattr(bn, attr) for name, bn, attr in self.named_buffers()}
        return _assemble(self.config, self.labels, tensors, buffers)


def _assemble(
    config: ModelConfig,
    labels: LabelVocab,
    tensors: Mapping[str, Tensor],
    buffers: Mapping[str, np.ndarray],
) -> Model:
    def bn(prefix: str) -> BNParams:
        return BNParams(
            gamma=tensors[f"{prefix}.gamma"],
            beta=tensors[f"{prefix}.beta"],
            running_mean=np.asarray(buffers[f"{prefix}.running_mean"], dtype=np.float64),
            running_var=np.asarray(buffers[f"{prefix}.running_var"], dtype=np.float64),
        )

    def conv(prefix: str) -> ConvParams:
        return ConvParams(W=tensors[f"{prefix}.W"], b=tensors[f"{prefix}.b"])

    def gru(prefix: str) -> GRUParams:
        return GRUParams(**{f: tensors[f"{prefix}.{f}"] for f in _GRU_FIELDS})

    blocks = [
        ResidualBlockParams(
            bn1=bn(f"block{i}.bn1"),
            conv1=conv(f"block{i}.conv1"),
            bn2=bn(f"block{i}.bn2"),
            conv2=conv(f"block{i}.conv2"),
        )
        for i in range(config.n_blocks)
    ]
    return Model(
        config=config,
        labels=labels,
        embedding=tensors["embedding"],
        blocks=blocks,
        gru_fw=gru("gru_fw"),
        gru_bw=gru("gru_bw"),
        head=DenseParams(W=tensors["head.W"], b=tensors["head.b"]),
    )


def _shapes(config: ModelConfig) -> Tuple[Dict[str, Tuple[int, ...]], Dict[str, int]]:
    """Parameter shapes and buffer channel counts implied by a config."""
    shapes: Dict[str, Tuple[int, ...]] = {"embedding": (BYTE_VOCAB_SIZE, config.d_b)}
    buffers: Dict[str, int] = {}
    first, second = config.windows
    filters = config.conv_filters
    channels = config.block_channels()

    for i in range(config.n_blocks):
        c_in = channels[i]
        for part, width in (("bn1", c_in), ("bn2", filters)):
            shapes[f"block{i}.{part}.gamma"] = (width,)
            shapes[f"block{i}.{part}.beta"] = (width,)
            for attr in _BN_BUFFERS:
                buffers[f"block{i}.{part}.{attr}"] = width
        shapes[f"block{i}.conv1.W"] = (first, c_in, filters)
        shapes[f"block{i}.conv1.b"] = (filters,)
        shapes[f"block{i}.conv2.W"] = (second, filters, filters)
        shapes[f"block{i}.conv2.b"] = (filters,)

    d_in, hidden = channels[-1], config.gru_hidden
    for prefix in ("gru_fw", "gru_bw"):
        for gate in ("z", "r", "h"):
            shapes[f"{prefix}.W_{gate}"] = (d_in, hidden)
            shapes[f"{prefix}.U_{gate}"] = (hidden, hidden)
            shapes[f"{prefix}.b_{gate}"] = (hidden,)
    shapes["head.W"] = (2 * hidden, config.n_classes)
    shapes["head.b"] = (config.n_classes,)
    return shapes, buffers


def _glorot_uniform(shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[-2] * receptive, shape[-1] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _float32_exact(values: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.float32).astype(np.float64)


def build_model(config: ModelConfig, labels: LabelVocab, seed: int = 1) -> Model:
    """
    Initialize a model deterministically from ``seed``.

    Weight matrices and conv kernels are Glorot-uniform, biases zero, batch
    norm scale 1 and shift 0 with running mean 0 and variance 1, embedding
    rows uniform in (-0.05, 0.05) with the PAD row fixed at zero. Values are
    rounded to float32 so a saved model reproduces them exactly.

    Raises:
        ConfigurationError: If the label count disagrees with the config
    """
    if len(labels) != config.n_classes:
        raise ConfigurationError(
            f"config has {config.n_classes} classes but {len(labels)} labels given"
        )
    rng = np.random.default_rng(seed)
    shapes, buffer_widths = _shapes(config)

    tensors: Dict[str, Tensor] = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "embedding":
            values = rng.uniform(-EMBEDDING_INIT_SCALE, EMBEDDING_INIT_SCALE, size=shape)
            values[PAD_ID] = 0.0
        elif leaf == "gamma":
            values = np.ones(shape)
        elif leaf in ("beta", "b") or leaf.startswith("b_"):
            values = np.zeros(shape)
        else:
            values = _glorot_uniform(shape, rng)
        tensors[name] = Parameter(name, _float32_exact(values))

    buffers = {
        name: np.zeros(width) if name.endswith("running_mean") else np.ones(width)
        for name, width in buffer_widths.items()
    }
    model = _assemble(config, labels, tensors, buffers)
    logger.info(
        f"Built model: {config.n_blocks} block(s), {count_parameters(model):,} parameters, "
        f"{len(labels)} labels"
    )
    return model


def count_parameters(model: Model) -> int:
    return sum(tensor.size for tensor in model.parameters())


def forward(
    model: Model,
    batch: Union[np.ndarray, Sequence[Sequence[int]]],
    mode: LayerMode = LayerMode.INFER,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """
    Class probabilities for a batch of byte-id rows.

    Args:
        model: The model
        batch: Integer matrix (B, seq) of byte ids in [0, 256]
        mode: Train enables dropout and batch statistics
        rng: Random generator, required in Train mode when dropout is active

    Returns:
        Tensor of shape (B, n_classes) whose rows sum to one

    Raises:
        ConfigurationError: If seq is too short for the model's pooling depth
    """
    ids = np.asarray(batch, dtype=np.int64)
    if ids.ndim != 2:
        raise ContractViolation(f"batch must be a (B, seq) id matrix, got shape {ids.shape}")
    cfg = model.config
    needed = cfg.pool**cfg.n_blocks
    if ids.shape[1] < needed:
        raise ConfigurationError(
            f"sequence length {ids.shape[1]} is shorter than {needed} required by "
            f"{cfg.n_blocks} pooling block(s)"
        )

    X = embed(ids, model.embedding)
    for block in model.blocks:
        X = residual_block(X, block, mode, cfg.merge_mode, rng, cfg.block_dropout, cfg.pool)
    sentence = bigru_encode(X, model.gru_fw, model.gru_bw, cfg.gru_dropout, mode, rng)
    return dense_softmax(sentence, model.head.W, model.head.b)


def encode_texts(texts: Iterable[str], max_len: int) -> np.ndarray:
    rows = [encode_bytes(text, max_len) for text in texts]
    if not rows:
        return np.empty((0, max_len), dtype=np.int64)
    return np.stack(rows)


def predict_proba(model: Model, texts: Sequence[str], batch_size: int = 100) -> np.ndarray:
    """Infer-mode probabilities (len(texts), n_classes), computed in batches."""
    if batch_size < 1:
        raise ContractViolation(f"batch_size must be positive, got {batch_size}")
    ids = encode_texts(texts, model.config.max_len)
    chunks = [
        forward(model, ids[start : start + batch_size], LayerMode.INFER).data
        for start in range(0, len(ids), batch_size)
    ]
    if not chunks:
        return np.empty((0, model.config.n_classes))
    return np.concatenate(chunks, axis=0)


def predict_labels(model: Model, texts: Sequence[str], batch_size: int = 100) -> List[str]:
    """Most probable language code per text (lowest index wins ties)."""
    probs = predict_proba(model, texts, batch_size)
    return [model.labels.code(int(i)) for i in probs.argmax(axis=1)]


def save_model(model: Model, path: PathLike) -> None:
    """
    Write a model to ``path`` in the versioned ``.rsid`` format.

    Parameters and running statistics are stored as little-endian float32, in
    the order of ``Model.named_parameters`` followed by the buffers.
    """
    state = model.state_dict()
    manifest = []
    blobs = []
    offset = 0
    for name, values in state.items():
        blob = np.ascontiguousarray(values, dtype="<f4").tobytes()
        manifest.append(
            {"name": name, "shape": list(values.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)

    metadata = {
        "config": model.config.to_dict(),
        "labels": list(model.labels.codes),
        "tensors": manifest,
    }
    meta_bytes = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = _HEADER.pack(MODEL_MAGIC, MODEL_FORMAT_VERSION, len(meta_bytes))

    Path(path).write_bytes(header + meta_bytes + b"".join(blobs))
    logger.info(f"✓ Saved model with {count_parameters(model):,} parameters to {path}")


def load_model(path: PathLike) -> Model:
    """
    Read a model written by ``save_model``.

    Raises:
        FormatError: On bad magic, unsupported version, truncation or
            inconsistent metadata; the error carries the byte offset
    """
    raw = Path(path).read_bytes()

    if len(raw) < 4:
        raise FormatError("file too short for magic number", 0)
    if raw[:4] != MODEL_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MODEL_MAGIC!r}", 0)
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", len(raw))
    _, version, meta_len = _HEADER.unpack_from(raw)
    if version != MODEL_FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)

    meta_start = _HEADER.size
    data_start = meta_start + meta_len
    if len(raw) < data_start:
        raise FormatError(f"metadata claims {meta_len} bytes, file is truncated", 8)
    try:
        metadata = json.loads(raw[meta_start:data_start].decode("utf-8"))
        config = ModelConfig.from_dict(metadata["config"])
        labels = LabelVocab(metadata["labels"])
        manifest = metadata["tensors"]
        if not isinstance(manifest, list):
            raise TypeError(f"tensors must be a list, got {type(manifest).__name__}")
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"unreadable metadata: {e}", meta_start) from e
    except (ConfigurationError, ContractViolation) as e:
        raise FormatError(f"invalid metadata: {e}", meta_start) from e

    state: Dict[str, np.ndarray] = {}
    end = data_start
    for entry in manifest:
        try:
            name, shape = entry["name"], tuple(int(n) for n in entry["shape"])
            start = data_start + int(entry["offset"])
            nbytes = int(entry["nbytes"])
            if not isinstance(name, str):
                raise TypeError(f"tensor name must be a string, got {name!r}")
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad manifest entry {entry!r}: {e}", meta_start) from e
        if start < data_start or any(n < 0 for n in shape):
            raise FormatError(f"{name}: negative offset or shape {shape}", meta_start)
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if nbytes != expected:
            raise FormatError(f"{name}: {nbytes} bytes for shape {shape}", start)
        if start + expected > len(raw):
            raise FormatError(f"{name}: tensor data truncated", start)
        state[name] = np.frombuffer(raw, dtype="<f4", count=expected // 4, offset=start).reshape(
            shape
        )
        end = max(end, start + expected)
    if end != len(raw):
        raise FormatError(f"{len(raw) - end} unexpected trailing byte(s)", end)

    shapes, buffer_widths = _shapes(config)
    tensors = {}
    for name, shape in shapes.items():
        if name not in state or state[name].shape != shape:
            raise FormatError(f"missing or misshapen tensor {name}", meta_start)
        tensors[name] = Parameter(name, state[name].astype(np.float64))
    buffers = {}
    for name, width in buffer_widths.items():
        if name not in state or state[name].shape != (width,):
            raise FormatError(f"missing or misshapen buffer {name}", meta_start)
        buffers[name] = state[name].astype(np.float64)
    if len(state) != len(shapes) + len(buffer_widths):
        raise FormatError("manifest lists tensors the config does not define", meta_start)

    model = _assemble(config, labels, tensors, buffers)
    logger.info(f"✓ Loaded model with {len(labels)} labels from {path}")
    return model
