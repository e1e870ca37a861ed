"""
Optimization and Training

ADAM updates, padded mini-batches and the early-stopping training loop that
monitors the development-set loss and restores the best epoch's weights.
"""

import json
import logging
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from resident.autodiff import Graph, Tensor, backward
from resident.config import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    ADAM_LR,
    DEV_HOLDOUT_FRACTION,
    TRAIN_DEFAULTS,
)
from resident.data_pipeline import Dataset, LabelVocab
from resident.exceptions import ConfigurationError, ContractViolation
from resident.layers import LayerMode, cross_entropy
from resident.resnet_model import Model, forward

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Batch = Tuple[np.ndarray, np.ndarray]


@dataclass
class AdamState:
    """First/second moment estimates per parameter name plus the step counter."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def create(cls, named_params: Sequence[Tuple[str, Tensor]], **hyper) -> "AdamState":
        """Zero moments shaped like each parameter."""
        m = {name: np.zeros(p.shape) for name, p in named_params}
        v = {name: np.zeros(p.shape) for name, p in named_params}
        return cls(m=m, v=v, **hyper)


def adam_step(
    params: Sequence[Tuple[str, Tensor]],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> AdamState:
    """
    Apply one ADAM update to every named parameter.

    Parameter arrays are replaced rather than modified, so graphs recorded
    before the step keep their forward values.

    Args:
        params: (name, tensor) pairs
        grads: Gradient per parameter name
        state: Moment estimates, advanced in place

    Returns:
        The updated state

    Raises:
        ContractViolation: If a gradient or moment is missing or misshapen
    """
    state.t += 1
    bias1 = 1.0 - state.beta1**state.t
    bias2 = 1.0 - state.beta2**state.t

    for name, param in params:
        if name not in grads or name not in state.m:
            raise ContractViolation(f"no gradient or moment for parameter {name}")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != param.shape or state.m[name].shape != param.shape:
            raise ContractViolation(f"{name}: gradient shape {g.shape} != {param.shape}")

        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bias1
        v_hat = state.v[name] / bias2
        param.data = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def make_batches(
    dataset: Dataset,
    batch_size: int,
    max_len: int,
    rng: Optional[np.random.Generator] = None,
    shuffle: bool = True,
    labels: Optional[LabelVocab] = None,
) -> List[Batch]:
    """
    Split a dataset into padded (byte ids, label ids) batches.

    Every example appears exactly once; the last batch holds the remainder.
    Without ``rng`` a generator seeded with the default training seed is used.
    """
    if len(dataset) == 0:
        raise ContractViolation("cannot batch an empty dataset")
    if batch_size < 1:
        raise ContractViolation(f"batch_size must be positive, got {batch_size}")

    ids = dataset.encode(max_len)
    gold = dataset.label_ids(labels)
    order = np.arange(len(dataset))
    if shuffle:
        rng = rng if rng is not None else np.random.default_rng(TRAIN_DEFAULTS["seed"])
        order = rng.permutation(len(dataset))

    return [
        (ids[order[start : start + batch_size]], gold[order[start : start + batch_size]])
        for start in range(0, len(dataset), batch_size)
    ]


@dataclass
class TrainConfig:
    """Training-loop settings."""

    batch_size: int = TRAIN_DEFAULTS["batch_size"]
    max_epochs: int = TRAIN_DEFAULTS["max_epochs"]
    patience: int = TRAIN_DEFAULTS["patience"]
    seed: int = TRAIN_DEFAULTS["seed"]
    shuffle: bool = TRAIN_DEFAULTS["shuffle"]

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigurationError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 0:
            raise ConfigurationError(f"patience must be >= 0, got {self.patience}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_loss: float
    dev_accuracy: float
    examples: int
    improved: bool = False
    wall_time: float = 0.0


@dataclass
class History:
    """Per-epoch records and the epoch whose weights the model ends up with."""

    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def epochs_run(self) -> int:
        return len(self.records)

    def to_jsonl(self) -> str:
        """One JSON object per epoch; wall time is left out so reruns compare equal."""
        return "".join(self.record_line(record) for record in self.records)

    def record_line(self, record: EpochRecord) -> str:
        values = asdict(record)
        del values["wall_time"]
        return json.dumps(values, sort_keys=True) + "\n"


class EarlyStopping:
    """
    Stops training after ``patience`` consecutive epochs without a strictly
    lower validation loss. Ties keep the earlier epoch.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.counter = 0
        self.best_loss: Optional[float] = None
        self.best_epoch = 0
        self.should_stop = False

    def __call__(self, loss: float, epoch: int) -> bool:
        """Record an epoch's loss; True when it is the new best."""
        if self.best_loss is None or loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            self.counter = 0
            return True
        self.counter += 1
        if self.counter >= max(self.patience, 1):
            self.should_stop = True
        return False


def evaluate(
    model: Model,
    dataset: Dataset,
    batch_size: int = TRAIN_DEFAULTS["batch_size"],
) -> Tuple[float, float]:
    """
    Infer-mode mean cross-entropy and accuracy over a dataset.

    Raises:
        ConfigurationError: If the dataset is empty or has labels the model lacks
    """
    if len(dataset) == 0:
        raise ConfigurationError("cannot evaluate on an empty dataset")
    _check_labels(model.labels, dataset)

    total_loss = 0.0
    correct = 0
    batches = make_batches(
        dataset, batch_size, model.config.max_len, shuffle=False, labels=model.labels
    )
    for ids, gold in batches:
        probs = forward(model, ids, LayerMode.INFER)
        total_loss += cross_entropy(probs, gold).item() * len(gold)
        correct += int((probs.data.argmax(axis=1) == gold).sum())
    return total_loss / len(dataset), correct / len(dataset)


def _check_labels(vocab: LabelVocab, dataset: Dataset) -> None:
    unknown = sorted(set(dataset.gold_labels()) - set(vocab))
    if unknown:
        raise ConfigurationError(f"labels not in the model vocabulary: {', '.join(unknown)}")


def _holdout(dataset: Dataset, rng: np.random.Generator) -> Tuple[Dataset, Dataset]:
    if len(dataset) < 2:
        raise ConfigurationError("need at least 2 training examples to hold out a dev split")
    order = rng.permutation(len(dataset))
    n_dev = max(1, int(round(len(dataset) * DEV_HOLDOUT_FRACTION)))
    return dataset.subset(order[:-n_dev]), dataset.subset(order[-n_dev:])


def train(
    model: Model,
    train_set: Dataset,
    dev_set: Optional[Dataset] = None,
    tcfg: Optional[TrainConfig] = None,
    metrics_path: Optional[PathLike] = None,
) -> Tuple[Model, History]:
    """
    Train with ADAM and early stopping on the dev loss.

    Each epoch shuffles the training data, runs Train-mode forward and
    backward passes per batch with one ADAM step each, then scores the dev set
    in Infer mode. When the loop ends the weights of the best epoch are
    restored.

    Args:
        model: Model to train in place
        train_set: Training examples
        dev_set: Development examples; when None the last 10% of a seeded
            shuffle of ``train_set`` is held out
        tcfg: Loop settings
        metrics_path: Optional JSON-lines file receiving one record per epoch

    Returns:
        (model, history)

    Raises:
        ConfigurationError: If the dev set is empty or a dataset carries
            labels the model does not know
    """
    tcfg = tcfg or TrainConfig()
    rng = np.random.default_rng(tcfg.seed)

    if dev_set is None:
        train_set, dev_set = _holdout(train_set, rng)
        logger.warning(f"No dev set given, holding out {len(dev_set)} training examples")
    if len(dev_set) == 0:
        raise ConfigurationError("dev set is empty")
    if len(train_set) == 0:
        raise ConfigurationError("training set is empty")
    _check_labels(model.labels, train_set)
    _check_labels(model.labels, dev_set)

    named = model.named_parameters()
    params = [p for _, p in named]
    state = AdamState.create(named)
    stopper = EarlyStopping(tcfg.patience)
    history = History()
    best_state = model.state_dict()

    logger.info("=" * 80)
    logger.info(
        f"Training on {len(train_set)} examples, dev {len(dev_set)}, "
        f"batch {tcfg.batch_size}, up to {tcfg.max_epochs} epochs, patience {tcfg.patience}"
    )
    logger.info("=" * 80)

    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else nullcontext()
    with sink as metrics_file:
        for epoch in range(1, tcfg.max_epochs + 1):
            started = time.perf_counter()
            batches = make_batches(
                train_set, tcfg.batch_size, model.config.max_len, rng, tcfg.shuffle, model.labels
            )
            loss_sum = 0.0
            seen = 0
            for ids, gold in batches:
                probs = forward(model, ids, LayerMode.TRAIN, rng)
                loss = cross_entropy(probs, gold)
                grads = backward(Graph(loss), loss, params)
                adam_step(named, grads, state)
                loss_sum += loss.item() * len(gold)
                seen += len(gold)
            if seen != len(train_set):
                raise ContractViolation(f"epoch saw {seen} of {len(train_set)} examples")

            dev_loss, dev_acc = evaluate(model, dev_set, tcfg.batch_size)
            improved = stopper(dev_loss, epoch)
            if improved:
                best_state = model.state_dict()
                history.best_epoch = epoch
            record = EpochRecord(
                epoch=epoch,
                train_loss=loss_sum / seen,
                dev_loss=dev_loss,
                dev_accuracy=dev_acc,
                examples=seen,
                improved=improved,
                wall_time=time.perf_counter() - started,
            )
            history.records.append(record)

            logger.info(
                f"epoch {epoch}/{tcfg.max_epochs} train_loss={record.train_loss:.4f} "
                f"dev_loss={dev_loss:.4f} dev_acc={dev_acc:.4f} "
                f"time={record.wall_time:.1f}s{' *best*' if improved else ''}"
            )
            if metrics_file is not None:
                metrics_file.write(history.record_line(record))
                metrics_file.flush()
            if stopper.should_stop:
                logger.info(f"Early stopping after epoch {epoch}")
                break

    model.load_state_dict(best_state)
    best = history.records[history.best_epoch - 1]
    logger.info("=" * 80)
    logger.info(
        f"✓ Training finished after {history.epochs_run} epoch(s); restored epoch "
        f"{history.best_epoch} (dev_loss={best.dev_loss:.4f}, dev_acc={best.dev_accuracy:.4f})"
    )
    logger.info("=" * 80)
    return model, history
