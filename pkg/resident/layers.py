"""
Differentiable Layer Kernels

Kernels used by the residual byte encoder and the bi-GRU classifier:
embedding lookup, same-length 1-D convolution, batch normalization, dropout,
max pooling, GRU recurrences and the dense softmax head with cross-entropy.

Sequence kernels accept ``(seq, channels)`` or ``(batch, seq, channels)``
input. Parameters are passed in explicitly and random masks come from a
caller-supplied ``numpy.random.Generator``, so kernels share no mutable state
apart from the running statistics a Train-mode batch norm updates.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from resident.autodiff import Function, Tensor, as_tensor, concat, stack
from resident.config import BN_EPS, BN_MOMENTUM, PAD_ID
from resident.exceptions import ContractViolation

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class LayerMode(Enum):
    """Switches dropout and batch normalization between training and inference."""

    TRAIN = "train"
    INFER = "infer"


@dataclass
class ConvParams:
    """Kernel of shape (window, c_in, c_out) and bias of shape (c_out,)."""

    W: Tensor
    b: Tensor

    def __post_init__(self):
        if self.W.ndim != 3 or min(self.W.shape) < 1:
            raise ContractViolation(f"conv kernel must be (k, c_in, c_out), got {self.W.shape}")
        if self.b.shape != (self.W.shape[2],):
            raise ContractViolation(f"conv bias shape {self.b.shape} != ({self.W.shape[2]},)")

    @property
    def window(self) -> int:
        return self.W.shape[0]

    @property
    def c_in(self) -> int:
        return self.W.shape[1]

    @property
    def c_out(self) -> int:
        return self.W.shape[2]


@dataclass
class BNParams:
    """Per-channel scale/shift plus the running statistics used at inference."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    def __post_init__(self):
        channels = self.gamma.shape
        if len(channels) != 1 or self.beta.shape != channels:
            raise ContractViolation("gamma and beta must be vectors of equal length")
        if self.running_mean.shape != channels or self.running_var.shape != channels:
            raise ContractViolation("running statistics must match the channel count")
        if np.any(self.running_var < 0):
            raise ContractViolation("running variance must be non-negative")
        if not 0.0 < self.momentum < 1.0 or self.eps <= 0:
            raise ContractViolation(f"bad momentum/eps: {self.momentum}, {self.eps}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class GRUParams:
    """Input (d_in x hidden), recurrent (hidden x hidden) and bias weights per gate."""

    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    def __post_init__(self):
        d_in, hidden = self.W_z.shape
        for name in ("W_z", "W_r", "W_h"):
            if getattr(self, name).shape != (d_in, hidden):
                raise ContractViolation(f"GRU {name} must be ({d_in}, {hidden})")
        for name in ("U_z", "U_r", "U_h"):
            if getattr(self, name).shape != (hidden, hidden):
                raise ContractViolation(f"GRU {name} must be ({hidden}, {hidden})")
        for name in ("b_z", "b_r", "b_h"):
            if getattr(self, name).shape != (hidden,):
                raise ContractViolation(f"GRU {name} must be ({hidden},)")

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[0]

    @property
    def hidden(self) -> int:
        return self.W_z.shape[1]


@dataclass
class DenseParams:
    """Softmax head weights (d x K) and bias (K,)."""

    W: Tensor
    b: Tensor

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ContractViolation(f"dense shapes inconsistent: {self.W.shape}, {self.b.shape}")


def _batched(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim == 3:
        return x, False
    raise ContractViolation(f"expected (seq, c) or (batch, seq, c) input, got {x.shape}")


class _EmbeddingLookup(Function):
    def forward(self, table, ids):
        self.ids = ids
        self.rows = table.shape[0]
        out = table[ids]
        out[ids == PAD_ID] = 0.0
        return out

    def backward(self, grad):
        grad_table = np.zeros((self.rows, grad.shape[-1]))
        keep = self.ids != PAD_ID
        np.add.at(grad_table, self.ids[keep], grad[keep])
        return (grad_table,)


def embed(byte_ids, table: Tensor) -> Tensor:
    """
    Look up byte embeddings.

    Args:
        byte_ids: Integer ids, any shape, each in [0, 256]
        table: Embedding table of shape (257, d_b)

    Returns:
        Tensor of shape ids.shape + (d_b,); PAD ids map to zero rows
    """
    ids = np.asarray(byte_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractViolation(
            f"byte ids must lie in [0, {table.shape[0] - 1}], got [{ids.min()}, {ids.max()}]"
        )
    return _EmbeddingLookup.apply(table, ids=ids)


class _Conv1dSame(Function):
    def forward(self, x, w, b):
        batch, seq, c_in = x.shape
        k, _, c_out = w.shape
        left = (k - 1) // 2
        padded = np.pad(x, ((0, 0), (left, k - 1 - left), (0, 0)))
        # (batch, seq, c_in, k) -> (batch, seq, k * c_in)
        cols = sliding_window_view(padded, k, axis=1).transpose(0, 1, 3, 2)
        self.cols = cols.reshape(batch, seq, k * c_in)
        self.w = w
        self.left = left
        self.x_shape = x.shape
        return self.cols @ w.reshape(k * c_in, c_out) + b

    def backward(self, grad):
        batch, seq, c_in = self.x_shape
        k, _, c_out = self.w.shape
        flat_w = self.w.reshape(k * c_in, c_out)

        grad_w = self.cols.reshape(-1, k * c_in).T @ grad.reshape(-1, c_out)
        grad_w = grad_w.reshape(self.w.shape)
        grad_b = grad.sum(axis=(0, 1))

        grad_cols = (grad @ flat_w.T).reshape(batch, seq, k, c_in)
        grad_padded = np.zeros((batch, seq + k - 1, c_in))
        for dt in range(k):
            grad_padded[:, dt : dt + seq] += grad_cols[:, :, dt]
        grad_x = grad_padded[:, self.left : self.left + seq]
        return grad_x, grad_w, grad_b


def conv1d_same(X: Tensor, p: ConvParams) -> Tensor:
    """
    Same-length 1-D convolution with zero padding.

    Output position t sees inputs t - (k-1)//2 .. t + k//2, so even windows pad
    one more position on the right (3 left, 4 right for k=8).
    """
    x, unbatched = _batched(X)
    if x.shape[-1] != p.c_in:
        raise ContractViolation(f"conv expects {p.c_in} input channels, got {x.shape[-1]}")
    out = _Conv1dSame.apply(x, p.W, p.b)
    return out.reshape(out.shape[1:]) if unbatched else out


class _BatchNormTrain(Function):
    def forward(self, x, gamma, beta, eps):
        self.axes = tuple(range(x.ndim - 1))
        self.count = x.size // x.shape[-1]
        mean = x.mean(axis=self.axes)
        var = x.var(axis=self.axes)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.x_hat = (x - mean) * self.inv_std
        self.gamma = gamma
        return gamma * self.x_hat + beta

    def backward(self, grad):
        grad_beta = grad.sum(axis=self.axes)
        grad_gamma = (grad * self.x_hat).sum(axis=self.axes)
        g_hat = grad * self.gamma
        grad_x = (self.inv_std / self.count) * (
            self.count * g_hat
            - g_hat.sum(axis=self.axes)
            - self.x_hat * (g_hat * self.x_hat).sum(axis=self.axes)
        )
        return grad_x, grad_gamma, grad_beta


def batch_norm(X: Tensor, p: BNParams, mode: LayerMode) -> Tensor:
    """
    Per-channel batch normalization over every axis but the last.

    Train mode normalizes with the batch mean and (biased) variance and moves
    the running statistics towards them by exponential averaging; Infer mode
    uses the running statistics only.
    """
    if X.shape[-1] != p.channels:
        raise ContractViolation(f"batch norm expects {p.channels} channels, got {X.shape[-1]}")

    if mode is LayerMode.TRAIN:
        count = X.size // X.shape[-1]
        if count < 2:
            raise ContractViolation("Train-mode batch norm needs at least 2 samples per channel")
        axes = tuple(range(X.ndim - 1))
        p.running_mean = p.momentum * p.running_mean + (1.0 - p.momentum) * X.data.mean(axis=axes)
        p.running_var = p.momentum * p.running_var + (1.0 - p.momentum) * X.data.var(axis=axes)
        return _BatchNormTrain.apply(X, p.gamma, p.beta, eps=p.eps)

    scale = p.gamma * Tensor(1.0 / np.sqrt(p.running_var + p.eps))
    return (X - Tensor(p.running_mean)) * scale + p.beta


def dropout_mask(shape: Sequence[int], p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability p, 1/(1-p) otherwise."""
    if not 0.0 <= p < 1.0:
        raise ContractViolation(f"dropout rate must lie in [0, 1), got {p}")
    return (rng.random(tuple(shape)) >= p) / (1.0 - p)


def dropout(
    X: Tensor,
    p: float,
    mode: LayerMode,
    rng: Optional[np.random.Generator] = None,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Inverted dropout; identity in Infer mode or when p == 0.

    A precomputed ``mask`` replaces the random draw (used for frozen-mask checks).
    """
    if not 0.0 <= p < 1.0:
        raise ContractViolation(f"dropout rate must lie in [0, 1), got {p}")
    if mode is LayerMode.INFER or p == 0.0:
        return X
    if mask is None:
        if rng is None:
            raise ContractViolation("Train-mode dropout needs a random generator")
        mask = dropout_mask(X.shape, p, rng)
    return X * Tensor(mask)


def relu(X: Tensor) -> Tensor:
    return X.relu()


class _MaxPool1d(Function):
    def forward(self, x, k):
        batch, seq, channels = x.shape
        n = seq // k
        windows = x[:, : n * k].reshape(batch, n, k, channels)
        self.argmax = windows.argmax(axis=2)[:, :, None, :]
        self.x_shape = x.shape
        self.k = k
        return np.take_along_axis(windows, self.argmax, axis=2)[:, :, 0, :]

    def backward(self, grad):
        batch, seq, channels = self.x_shape
        n = seq // self.k
        grad_windows = np.zeros((batch, n, self.k, channels))
        np.put_along_axis(grad_windows, self.argmax, grad[:, :, None, :], axis=2)
        grad_x = np.zeros(self.x_shape)
        grad_x[:, : n * self.k] = grad_windows.reshape(batch, n * self.k, channels)
        return (grad_x,)


def max_pool1d(X: Tensor, k: int) -> Tensor:
    """Non-overlapping max pooling along the sequence; trailing remainder dropped."""
    x, unbatched = _batched(X)
    if k < 1 or x.shape[1] < k:
        raise ContractViolation(f"cannot pool a sequence of length {x.shape[1]} with size {k}")
    out = _MaxPool1d.apply(x, k=k)
    return out.reshape(out.shape[1:]) if unbatched else out


def gru_sequence(
    X: Tensor,
    p: GRUParams,
    h0: Tensor,
    reversed: bool = False,
    input_mask: Optional[np.ndarray] = None,
    recurrent_mask: Optional[np.ndarray] = None,
) -> Tuple[Tensor, Tensor]:
    """
    Run a GRU over a sequence.

    z_t = sigmoid(x_t W_z + h_{t-1} U_z + b_z)
    r_t = sigmoid(x_t W_r + h_{t-1} U_r + b_r)
    c_t = tanh(x_t W_h + (r_t * h_{t-1}) U_h + b_h)
    h_t = (1 - z_t) * h_{t-1} + z_t * c_t

    Args:
        X: Input of shape (seq, d_in) or (batch, seq, d_in)
        p: GRU weights
        h0: Initial state of shape (hidden,) or (batch, hidden)
        reversed: Consume the sequence from the last position to the first
        input_mask: Optional (batch, d_in) dropout mask applied to every x_t
        recurrent_mask: Optional (batch, hidden) dropout mask applied to h_{t-1}
            inside the gate products

    Returns:
        (states, final): states[..., t, :] is the state after consuming
        position t, so reversed runs stay aligned with the input positions
    """
    x, unbatched = _batched(X)
    h0 = as_tensor(h0)
    if x.shape[-1] != p.input_dim:
        raise ContractViolation(f"GRU expects input dim {p.input_dim}, got {x.shape[-1]}")
    if h0.shape[-1] != p.hidden or h0.ndim > 2:
        raise ContractViolation(f"GRU initial state must end in {p.hidden}, got {h0.shape}")
    seq = x.shape[1]

    if input_mask is not None:
        x = x * Tensor(np.asarray(input_mask)[:, None, :])
    x_z = x @ p.W_z + p.b_z
    x_r = x @ p.W_r + p.b_r
    x_h = x @ p.W_h + p.b_h

    h = h0 if h0.ndim == 2 else h0.reshape(1, p.hidden)
    rec_mask = None if recurrent_mask is None else Tensor(recurrent_mask)
    states = [None] * seq
    for t in range(seq - 1, -1, -1) if reversed else range(seq):
        h_in = h if rec_mask is None else h * rec_mask
        z = (x_z[:, t] + h_in @ p.U_z).sigmoid()
        r = (x_r[:, t] + h_in @ p.U_r).sigmoid()
        candidate = (x_h[:, t] + (r * h_in) @ p.U_h).tanh()
        h = (1.0 - z) * h + z * candidate
        states[t] = h

    all_states = stack(states, axis=1)
    if unbatched:
        return all_states.reshape(seq, p.hidden), h.reshape(p.hidden)
    return all_states, h


def bigru_encode(
    X: Tensor,
    p_fw: GRUParams,
    p_bw: GRUParams,
    dropout_rate: float = 0.0,
    mode: LayerMode = LayerMode.INFER,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """
    Sentence representation from a bidirectional GRU.

    Concatenates the final forward state with the final backward state, both
    started from zero. In Train mode with a positive ``dropout_rate`` each
    direction draws its own frozen input and recurrent masks per sequence.
    """
    if p_fw.hidden != p_bw.hidden:
        raise ContractViolation(f"bi-GRU hidden sizes differ: {p_fw.hidden} vs {p_bw.hidden}")
    x, unbatched = _batched(X)
    batch = x.shape[0]

    finals = []
    for params, backwards in ((p_fw, False), (p_bw, True)):
        masks = {}
        if mode is LayerMode.TRAIN and dropout_rate > 0.0:
            if rng is None:
                raise ContractViolation("Train-mode GRU dropout needs a random generator")
            masks["input_mask"] = dropout_mask((batch, params.input_dim), dropout_rate, rng)
            masks["recurrent_mask"] = dropout_mask((batch, params.hidden), dropout_rate, rng)
        h0 = Tensor(np.zeros((batch, params.hidden)))
        _, final = gru_sequence(x, params, h0, reversed=backwards, **masks)
        finals.append(final)

    encoded = concat(finals, axis=-1)
    return encoded.reshape(encoded.shape[-1]) if unbatched else encoded


class _Softmax(Function):
    def forward(self, x):
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.y = e / e.sum(axis=-1, keepdims=True)
        return self.y

    def backward(self, grad):
        return (self.y * (grad - (grad * self.y).sum(axis=-1, keepdims=True)),)


def softmax(logits: Tensor) -> Tensor:
    return _Softmax.apply(logits)


def dense_softmax(v: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Class probabilities softmax(v W + b) for a vector (d,) or a batch (B, d)."""
    v = as_tensor(v)
    if v.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ContractViolation(f"dense shapes inconsistent: {v.shape}, {W.shape}, {b.shape}")
    if v.ndim == 1:
        return softmax(v.reshape(1, -1) @ W + b).reshape(W.shape[1])
    return softmax(v @ W + b)


class _NegLogLikelihood(Function):
    def forward(self, probs, gold):
        self.rows = np.arange(len(gold))
        self.gold = gold
        self.shape = probs.shape
        picked = probs[self.rows, gold]
        self.floored = picked < PROB_FLOOR
        self.clipped = np.maximum(picked, PROB_FLOOR)
        return np.asarray(-np.log(self.clipped).mean())

    def backward(self, grad):
        values = -grad / (len(self.gold) * self.clipped)
        values[self.floored] = 0.0
        out = np.zeros(self.shape)
        out[self.rows, self.gold] = values
        return (out,)


def cross_entropy(probs: Tensor, gold) -> Tensor:
    """
    -log(probs[gold]) with the probability floored at 1e-12.

    For a batch (B, K) with gold indices (B,) the result is the mean over examples.
    """
    probs = as_tensor(probs)
    gold_ids = np.atleast_1d(np.asarray(gold, dtype=np.int64))
    unbatched = probs.ndim == 1
    batch = probs.reshape(1, -1) if unbatched else probs
    if len(gold_ids) != batch.shape[0]:
        raise ContractViolation(f"{len(gold_ids)} gold labels for {batch.shape[0]} rows")
    if gold_ids.min() < 0 or gold_ids.max() >= batch.shape[1]:
        raise ContractViolation(f"gold index out of range [0, {batch.shape[1]})")
    return _NegLogLikelihood.apply(batch, gold=gold_ids)
