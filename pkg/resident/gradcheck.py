"""
Gradient Self-Check

Finite-difference suites for every differentiable component, from the tensor
primitives up to a tiny end-to-end model. Each suite draws its inputs from a
seed and returns the worst relative error reported by
``finite_difference_check``.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from resident.autodiff import Tensor, finite_difference_check
from resident.config import GRADCHECK_TOLERANCE, PAD_ID
from resident.data_pipeline import LabelVocab
from resident.layers import (
    BNParams,
    ConvParams,
    GRUParams,
    LayerMode,
    batch_norm,
    bigru_encode,
    conv1d_same,
    cross_entropy,
    dense_softmax,
    dropout,
    dropout_mask,
    embed,
    gru_sequence,
    max_pool1d,
    relu,
    softmax,
)
from resident.resnet_model import (
    MergeMode,
    ModelConfig,
    ResidualBlockParams,
    build_model,
    forward,
    residual_block,
)

logger = logging.getLogger(__name__)

Suite = Callable[[int], float]

_GRU_SHAPES = ("W", "W", "W", "U", "U", "U", "b", "b", "b")


def _gru_arrays(rng: np.random.Generator, d_in: int, hidden: int) -> List[np.ndarray]:
    shapes = {"W": (d_in, hidden), "U": (hidden, hidden), "b": (hidden,)}
    return [rng.normal(0.0, 0.5, size=shapes[kind]) for kind in _GRU_SHAPES]


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def check_primitives(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a, b, c = (rng.normal(size=(3, 4)) for _ in range(3))
    d = rng.normal(size=(4, 2))

    def op(a, b, c, d):
        hidden = ((a * b + c).tanh() @ d).sigmoid()
        scale = (a * a + 1.0).log().sum(axis=1, keepdims=True)
        return hidden * scale - (c / 3.0).exp()[:, :2] + (b - a).transpose(1, 0).mean()

    return finite_difference_check(op, [a, b, c, d], seed=seed)


def check_embed(seed: int) -> float:
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 257, size=(2, 9))
    ids[:, -2:] = PAD_ID
    table = rng.normal(size=(257, 3))
    return finite_difference_check(lambda t: embed(ids, t), [table], seed=seed)


def check_conv1d_same(seed: int) -> float:
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(4, 12, 8))
    W = rng.normal(0.0, 0.3, size=(8, 8, 3))
    b = rng.normal(size=3)
    return finite_difference_check(
        lambda X, W, b: conv1d_same(X, ConvParams(W, b)), [X, W, b], seed=seed
    )


def _bn(gamma: Tensor, beta: Tensor, mean=None, var=None) -> BNParams:
    channels = gamma.shape[0]
    return BNParams(
        gamma=gamma,
        beta=beta,
        running_mean=np.zeros(channels) if mean is None else mean,
        running_var=np.ones(channels) if var is None else var,
    )


def check_batch_norm_train(seed: int) -> float:
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(4, 6, 3))
    gamma, beta = rng.uniform(0.5, 1.5, size=3), rng.normal(size=3)
    return finite_difference_check(
        lambda X, g, b: batch_norm(X, _bn(g, b), LayerMode.TRAIN), [X, gamma, beta], seed=seed
    )


def check_batch_norm_infer(seed: int) -> float:
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(4, 6, 3))
    gamma, beta = rng.uniform(0.5, 1.5, size=3), rng.normal(size=3)
    mean, var = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    return finite_difference_check(
        lambda X, g, b: batch_norm(X, _bn(g, b, mean, var), LayerMode.INFER),
        [X, gamma, beta],
        seed=seed,
    )


def check_dropout(seed: int) -> float:
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(3, 5, 4))
    mask = dropout_mask(X.shape, 0.5, rng)
    return finite_difference_check(
        lambda X: dropout(X, 0.5, LayerMode.TRAIN, mask=mask), [X], seed=seed
    )


def check_relu(seed: int) -> float:
    rng = np.random.default_rng(seed)
    return finite_difference_check(relu, [_away_from_zero(rng, (3, 5, 4))], seed=seed)


def check_max_pool1d(seed: int) -> float:
    rng = np.random.default_rng(seed)
    # distinct values 0.1 apart keep every window's argmax stable under perturbation
    X = (rng.permutation(2 * 7 * 3) / 10.0).reshape(2, 7, 3)
    return finite_difference_check(lambda X: max_pool1d(X, 2), [X], seed=seed)


def check_gru_sequence(seed: int) -> float:
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(6, 3))
    h0 = rng.uniform(-0.5, 0.5, size=4)
    weights = _gru_arrays(rng, 3, 4)

    def op(reversed_):
        def run(X, h0, *w):
            states, final = gru_sequence(X, GRUParams(*w), h0, reversed=reversed_)
            return states.sum() + final * 2.0

        return run

    return max(
        finite_difference_check(op(False), [X, h0, *weights], seed=seed),
        finite_difference_check(op(True), [X, h0, *weights], seed=seed),
    )


def check_bigru_encode(seed: int) -> float:
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(2, 5, 3))
    fw, bw = _gru_arrays(rng, 3, 4), _gru_arrays(rng, 3, 4)

    def op(X, *w):
        return bigru_encode(X, GRUParams(*w[:9]), GRUParams(*w[9:]))

    return finite_difference_check(op, [X, *fw, *bw], seed=seed)


def check_dense_softmax(seed: int) -> float:
    rng = np.random.default_rng(seed)
    v, W, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), rng.normal(size=4)
    return finite_difference_check(dense_softmax, [v, W, b], seed=seed)


def check_cross_entropy(seed: int) -> float:
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 5))
    gold = rng.integers(0, 5, size=4)
    probs = softmax(Tensor(logits)).data
    return max(
        finite_difference_check(lambda p: cross_entropy(p, gold), [probs], seed=seed),
        finite_difference_check(lambda z: cross_entropy(softmax(z), gold), [logits], seed=seed),
    )


def _block_check(merge: MergeMode) -> Suite:
    def check(seed: int) -> float:
        rng = np.random.default_rng(seed)
        c = 4
        X = rng.normal(size=(2, 8, c))
        g1, g2 = rng.uniform(0.5, 1.5, size=c), rng.uniform(0.5, 1.5, size=c)
        be1, be2 = rng.normal(size=c), rng.normal(size=c)
        W1, W2 = rng.normal(0.0, 0.3, size=(8, c, c)), rng.normal(0.0, 0.3, size=(4, c, c))
        b2 = rng.normal(size=c)
        # conv1's bias feeds straight into batch norm, which cancels it
        b1 = Tensor(rng.normal(size=c))

        def op(X, g1, be1, W1, g2, be2, W2, b2):
            params = ResidualBlockParams(
                bn1=_bn(g1, be1),
                conv1=ConvParams(W1, b1),
                bn2=_bn(g2, be2),
                conv2=ConvParams(W2, b2),
            )
            return residual_block(X, params, LayerMode.TRAIN, merge, dropout_rate=0.0)

        return finite_difference_check(op, [X, g1, be1, W1, g2, be2, W2, b2], seed=seed)

    return check


def check_end_to_end(seed: int) -> float:
    """Cross-entropy of a one-block model in Infer mode against every non-embedding weight."""
    rng = np.random.default_rng(seed)
    config = ModelConfig(n_classes=2, n_blocks=1, d_b=4, conv_filters=4, gru_hidden=3, max_len=16)
    model = build_model(config, LabelVocab(["a", "b"]), seed=seed)
    table = _away_from_zero(rng, model.embedding.shape)
    table[PAD_ID] = 0.0
    model = model.substitute({"embedding": Tensor(table)})

    ids = rng.integers(0, 256, size=(2, 16))
    ids[0, 12:] = PAD_ID
    gold = np.array([0, 1])
    named = [(name, t) for name, t in model.named_parameters() if name != "embedding"]
    names = [name for name, _ in named]

    def op(*leaves):
        candidate = model.substitute(dict(zip(names, leaves)))
        return cross_entropy(forward(candidate, ids, LayerMode.INFER), gold)

    return finite_difference_check(op, [t.data for _, t in named], seed=seed)


SUITES: Dict[str, Suite] = {
    "primitives": check_primitives,
    "embed": check_embed,
    "conv1d_same": check_conv1d_same,
    "batch_norm.train": check_batch_norm_train,
    "batch_norm.infer": check_batch_norm_infer,
    "dropout.frozen_mask": check_dropout,
    "relu": check_relu,
    "max_pool1d": check_max_pool1d,
    "gru_sequence": check_gru_sequence,
    "bigru_encode": check_bigru_encode,
    "dense_softmax": check_dense_softmax,
    "cross_entropy": check_cross_entropy,
    "residual_block.concat": _block_check(MergeMode.CONCAT),
    "residual_block.add": _block_check(MergeMode.ADD),
    "model.end_to_end": check_end_to_end,
}


@dataclass
class GradcheckReport:
    seed: int
    tolerance: float
    errors: Dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> List[str]:
        return [name for name, error in self.errors.items() if not error < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def format(self) -> str:
        width = max(len(name) for name in self.errors) if self.errors else 0
        lines = [
            f"{name:<{width}}  {error:.3e}  {'ok' if error < self.tolerance else 'FAIL'}"
            for name, error in self.errors.items()
        ]
        return "\n".join(lines) + "\n"


def run_gradcheck(
    seed: int = 0,
    suites: Optional[Mapping[str, Suite]] = None,
    tolerance: float = GRADCHECK_TOLERANCE,
) -> GradcheckReport:
    """
    Run finite-difference suites and collect their worst relative errors.

    Args:
        seed: Seed for the inputs and reduction weights of every suite
        suites: Name -> suite mapping; defaults to ``SUITES``
        tolerance: Largest passing relative error

    Returns:
        GradcheckReport; ``failures`` names the components at or above tolerance
    """
    suites = SUITES if suites is None else suites
    report = GradcheckReport(seed=seed, tolerance=tolerance)

    logger.info("=" * 80)
    logger.info(f"Gradient check: {len(suites)} suite(s), seed {seed}, tolerance {tolerance:g}")
    logger.info("=" * 80)
    for name, suite in suites.items():
        error = suite(seed)
        report.errors[name] = error
        logger.debug(f"{name}: max relative error {error:.3e}")

    if report.passed:
        logger.info(f"✓ All {len(suites)} gradient suites below {tolerance:g}")
    else:
        logger.error(f"Gradient check failed for: {', '.join(report.failures)}")
    return report
